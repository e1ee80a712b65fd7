use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use streamkd::distill::{
    apc_loss, dis_loss, kld_loss, relation_distributions, total_loss, LossWeights, RelationSet,
    IDENTICAL_FRAME_LOSS,
};
use streamkd::nn::LayerTapOutput;
use streamkd::{AttentionMask, Tape, Tensor};

/// Plain scalar re-derivation of the per-frame distance.
fn frame_ref(a: &[f64], b: &[f64]) -> f64 {
    let d = a.len() as f64;
    let l1: f64 = a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / d;
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let cos = dot / (na * nb);
    l1 + (1.0 + (-cos).exp()).ln()
}

fn eval_dis(h: &Tensor, z: &Tensor) -> f64 {
    let mut tape = Tape::new();
    let h = tape.constant(h.clone());
    let z = tape.constant(z.clone());
    let l = dis_loss(&mut tape, h, z).unwrap();
    tape.value(l).item()
}

fn eval_apc(h: &Tensor, r: &Tensor, n: usize) -> streamkd::Result<f64> {
    let mut tape = Tape::new();
    let h = tape.constant(h.clone());
    let r = tape.constant(r.clone());
    let l = apc_loss(&mut tape, h, r, n)?;
    Ok(tape.value(l).item())
}

#[test]
fn identical_frame_constant() {
    let expect = (1.0 + (-1.0f64).exp()).ln();
    assert!((IDENTICAL_FRAME_LOSS - expect).abs() < 1e-16);
}

#[test]
fn dis_identities() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for t in 1..8 {
        let h = Tensor::randn(&[t, 5], 1.0, &mut rng);
        let v = eval_dis(&h, &h);
        assert!((v - t as f64 * IDENTICAL_FRAME_LOSS).abs() < 1e-12, "{t}: {v}");
    }
    let h = Tensor::new(&[1, 2], vec![1.0, 0.0]).unwrap();
    let z = Tensor::new(&[1, 2], vec![0.0, 1.0]).unwrap();
    assert!((eval_dis(&h, &z) - 1.6931471805599454).abs() < 1e-15);
}

#[test]
fn dis_rejects_shape_mismatch_and_zero_rows() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::zeros(&[2, 3]));
    let b = tape.constant(Tensor::filled(&[2, 4], 1.0));
    assert!(dis_loss(&mut tape, a, b).is_err());
    let c = tape.constant(Tensor::filled(&[2, 3], 1.0));
    assert!(dis_loss(&mut tape, a, c).is_err());
}

#[test]
fn apc_identities_and_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for (t, n) in [(5, 1), (8, 4), (6, 5), (9, 2)] {
        let h = Tensor::randn(&[t, 3], 1.0, &mut rng);
        let mut r = Tensor::randn(&[t, 3], 1.0, &mut rng);
        for i in 0..t - n {
            r.row_mut(i).copy_from_slice(h.row(i + n));
        }
        let v = eval_apc(&h, &r, n).unwrap();
        assert!((v - (t - n) as f64 * IDENTICAL_FRAME_LOSS).abs() < 1e-12);
    }
    for _ in 0..20 {
        let h = Tensor::randn(&[8, 6], 1.0, &mut rng);
        let r = Tensor::randn(&[8, 6], 1.0, &mut rng);
        let expect: f64 = (0..4).map(|i| frame_ref(r.row(i), h.row(i + 4))).sum();
        assert!((eval_apc(&h, &r, 4).unwrap() - expect).abs() < 1e-12);
    }
    let h = Tensor::randn(&[4, 2], 1.0, &mut rng);
    assert!(eval_apc(&h, &h, 4).is_err());
    assert!(eval_apc(&h, &h, 0).is_err());
}

#[test]
fn relation_scalar_example() {
    // Unit keys with query scores (0, ln 2) give (1/3, 2/3).
    let mut tape = Tape::new();
    let v = tape.constant(Tensor::new(&[2, 1], vec![0.0, std::f64::consts::LN_2.sqrt()]).unwrap());
    let qkv = LayerTapOutput { features: v, queries: vec![v], keys: vec![v], values: vec![v] };
    let rel = relation_distributions(&mut tape, &qkv, &AttentionMask::full(2).unwrap()).unwrap();
    let row = tape.value(rel.query[0]).row(1).to_vec();
    assert!((row[0] - 1.0 / 3.0).abs() < 1e-15 && (row[1] - 2.0 / 3.0).abs() < 1e-15, "{row:?}");
}

fn constants(tape: &mut Tape, rows: &[f64], heads: usize, support: &AttentionMask) -> RelationSet {
    let t = support.size();
    let make = |tape: &mut Tape| {
        (0..heads)
            .map(|_| tape.constant(Tensor::new(&[t, t], rows.to_vec()).unwrap()))
            .collect::<Vec<_>>()
    };
    RelationSet {
        query: make(tape),
        key: make(tape),
        value: make(tape),
        support: support.clone(),
    }
}

#[test]
fn kld_examples() {
    let full = AttentionMask::full(2).unwrap();
    let mut tape = Tape::new();
    let base = [0.5, 0.5, 0.3, 0.7];
    let a = constants(&mut tape, &base, 1, &full);
    let mut b = constants(&mut tape, &base, 1, &full);
    let k = kld_loss(&mut tape, &a, &b).unwrap();
    assert_eq!(tape.value(k).item(), 0.0);

    let mut teacher = constants(&mut tape, &base, 1, &full);
    teacher.key[0] = tape.constant(Tensor::new(&[2, 2], vec![1.0, 0.0, 0.3, 0.7]).unwrap());
    let k = kld_loss(&mut tape, &teacher, &b).unwrap();
    assert!((tape.value(k).item() - 0.6931471805599453).abs() < 1e-15);

    b.support = AttentionMask::future_gap(2, 1).unwrap();
    assert!(kld_loss(&mut tape, &teacher, &b).is_err());
    let three = constants(&mut tape, &base, 3, &full);
    assert!(kld_loss(&mut tape, &three, &a).is_err());
}

#[test]
fn kld_is_invariant_to_joint_head_reordering() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let support = AttentionMask::future_gap(5, 2).unwrap();
    let mut tape = Tape::new();
    let mut draw = |tape: &mut Tape| {
        let v: Vec<_> = (0..3).map(|_| tape.constant(Tensor::randn(&[5, 4], 1.0, &mut rng))).collect();
        LayerTapOutput { features: v[0], queries: v.clone(), keys: v.clone(), values: v }
    };
    let t = draw(&mut tape);
    let s = draw(&mut tape);
    let rt = relation_distributions(&mut tape, &t, &support).unwrap();
    let rs = relation_distributions(&mut tape, &s, &support).unwrap();
    let k1 = kld_loss(&mut tape, &rt, &rs).unwrap();
    let rev = |r: &RelationSet| RelationSet {
        query: r.query.iter().rev().copied().collect(),
        key: r.key.iter().rev().copied().collect(),
        value: r.value.iter().rev().copied().collect(),
        support: r.support.clone(),
    };
    let k2 = kld_loss(&mut tape, &rev(&rt), &rev(&rs)).unwrap();
    assert!((tape.value(k1).item() - tape.value(k2).item()).abs() < 1e-12);
}

#[test]
fn total_loss_examples() {
    let w = LossWeights::default();
    assert_eq!((w.alpha, w.beta, w.gamma), (0.01, 0.0005, 0.005));
    assert!((total_loss(Some(0.0), 1.0, 1.0, 1.0, &w, 4, 4).unwrap() - 0.0155).abs() < 1e-15);
    let zero = LossWeights { alpha: 0.0, beta: 0.0, gamma: 0.0 };
    assert_eq!(total_loss(Some(2.5), 7.0, 8.0, 9.0, &zero, 1, 0).unwrap(), 2.5);
    let unl = total_loss(None, 2.0, 3.0, 4.0, &w, 0, 8).unwrap();
    assert!((unl - (0.02 + 0.0015 + 0.02)).abs() < 1e-15);
    assert!(total_loss(Some(1.0), 0.0, 0.0, 0.0, &w, 0, 8).is_err());
    assert!(total_loss(None, 0.0, 0.0, 0.0, &w, 0, 0).is_err());
}

proptest! {
    #[test]
    fn dis_matches_scalar_reference(t in 1usize..6, d in 1usize..6, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = Tensor::randn(&[t, d], 1.0, &mut rng);
        let z = Tensor::randn(&[t, d], 1.0, &mut rng);
        let expect: f64 = (0..t).map(|i| frame_ref(h.row(i), z.row(i))).sum();
        prop_assert!((eval_dis(&h, &z) - expect).abs() < 1e-12);
        prop_assert!(eval_dis(&h, &z) >= t as f64 * IDENTICAL_FRAME_LOSS - 1e-12);
    }

    #[test]
    fn kl_is_nonnegative(cols in 2usize..8, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::randn(&[3, cols], 2.0, &mut rng));
        let b = tape.constant(Tensor::randn(&[3, cols], 2.0, &mut rng));
        let p = tape.softmax(a);
        let q = tape.softmax(b);
        let k = tape.kl_rows(p, q).unwrap();
        prop_assert!(tape.value(k).item() >= -1e-15);
    }
}
