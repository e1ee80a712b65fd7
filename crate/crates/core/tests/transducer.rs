use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use streamkd::params::ParamStore;
use streamkd::transducer::{brute_force_transducer, transducer_nll, TransducerHead, BLANK};
use streamkd::{Tape, Tensor};

fn log_probs(logits: &Tensor, t: usize, u: usize) -> Vec<f64> {
    let v1 = logits.shape()[2];
    let u1 = logits.shape()[1];
    let row = &logits.data()[(t * u1 + u) * v1..(t * u1 + u + 1) * v1];
    let z: f64 = row.iter().map(|x| x.exp()).sum();
    row.iter().map(|x| x - z.ln()).collect()
}

/// Depth-first walk over the lattice: probability of finishing from `(t, u)`.
fn walk(logits: &Tensor, tokens: &[usize], t: usize, u: usize, paths: &mut usize) -> f64 {
    let t_len = logits.shape()[0];
    let lp = log_probs(logits, t, u);
    let mut total = 0.0;
    if u < tokens.len() {
        total += lp[tokens[u]].exp() * walk(logits, tokens, t, u + 1, paths);
    }
    if t + 1 < t_len {
        total += lp[BLANK].exp() * walk(logits, tokens, t + 1, u, paths);
    } else if u == tokens.len() {
        *paths += 1;
        total += lp[BLANK].exp();
    }
    total
}

fn binomial(n: usize, k: usize) -> usize {
    (0..k).fold(1, |acc, i| acc * (n - i) / (i + 1))
}

#[test]
fn matches_independent_enumeration_on_random_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut worst = 0.0f64;
    for _ in 0..150 {
        let t = rng.gen_range(1..=4);
        let u = rng.gen_range(0..=3);
        let v = rng.gen_range(1..=5);
        let tokens: Vec<usize> = (0..u).map(|_| rng.gen_range(1..=v)).collect();
        let logits = Tensor::randn(&[t, u + 1, v + 1], 2.0, &mut rng);
        let (nll, _) = transducer_nll(&logits, &tokens).unwrap();
        let mut paths = 0;
        let oracle = -walk(&logits, &tokens, 0, 0, &mut paths).ln();
        let (brute, count) = brute_force_transducer(&logits, &tokens).unwrap();
        assert_eq!(count, paths);
        worst = worst.max((nll - oracle).abs()).max((brute - oracle).abs());
    }
    assert!(worst < 1e-10, "{worst}");
}

#[test]
fn complete_alignment_counts() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for t in 1..=5 {
        for u in 0..=5 {
            let logits = Tensor::randn(&[t, u + 1, 3], 1.0, &mut rng);
            let tokens = vec![1; u];
            let (_, count) = brute_force_transducer(&logits, &tokens).unwrap();
            assert_eq!(count, binomial(t + u - 1, u), "T={t} U={u}");
        }
    }
}

#[test]
fn zero_tokens_is_a_product_of_blanks() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let logits = Tensor::randn(&[4, 1, 4], 1.0, &mut rng);
    let expect: f64 = -(0..4).map(|t| log_probs(&logits, t, 0)[BLANK]).sum::<f64>();
    let (nll, _) = transducer_nll(&logits, &[]).unwrap();
    assert!((nll - expect).abs() < 1e-12);
}

#[test]
fn t3_u2_against_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let logits = Tensor::randn(&[3, 3, 4], 1.0, &mut rng);
    let (nll, _) = transducer_nll(&logits, &[3, 1]).unwrap();
    let (brute, count) = brute_force_transducer(&logits, &[3, 1]).unwrap();
    assert_eq!(count, 6);
    assert!((nll - brute).abs() < 1e-10);
}

#[test]
fn rejects_bad_lattices() {
    let logits = Tensor::zeros(&[2, 2, 3]);
    assert!(transducer_nll(&logits, &[]).is_err());
    assert!(transducer_nll(&logits, &[0]).is_err());
    assert!(transducer_nll(&logits, &[3]).is_err());
    assert!(brute_force_transducer(&Tensor::zeros(&[10, 4, 3]), &[1, 1, 1]).is_err());
}

#[test]
fn greedy_decode_forced_by_biases() {
    let head = TransducerHead::new(3, 4, 4, 4, "h");
    let mut params = ParamStore::new();
    head.init(&mut params, &mut ChaCha8Rng::seed_from_u64(0));
    for (name, t) in params.iter_mut() {
        if name.ends_with("out.w") {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }
    let decode = |params: &ParamStore| {
        let mut tape = Tape::new();
        let b = params.bind(&mut tape, false);
        let enc = tape.constant(Tensor::filled(&[5, 4], 0.3));
        head.greedy_decode(&mut tape, &b, enc, 4).unwrap()
    };
    params.get_mut("h.out.b").unwrap().data_mut().copy_from_slice(&[5.0, 0.0, 0.0, 0.0]);
    assert!(decode(&params).is_empty());
    // Token 2 everywhere: capped at 4 symbols per frame.
    params.get_mut("h.out.b").unwrap().data_mut().copy_from_slice(&[0.0, 0.0, 5.0, 0.0]);
    assert_eq!(decode(&params), vec![2; 20]);
}

#[test]
fn occupancy_covers_each_path_node_once() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    for _ in 0..30 {
        let t = rng.gen_range(1..=5);
        let u = rng.gen_range(0..=4);
        let tokens: Vec<usize> = (0..u).map(|_| rng.gen_range(1..=3)).collect();
        let logits = Tensor::randn(&[t, u + 1, 4], 1.5, &mut rng);
        let occ = streamkd::transducer::lattice_occupancy(&logits, &tokens).unwrap();
        // Every complete alignment visits T + U nodes, including both corners.
        let total: f64 = occ.iter().sum();
        assert!((total - (t + u) as f64).abs() < 1e-10, "{total}");
        assert!((occ[0] - 1.0).abs() < 1e-12 && (occ[occ.len() - 1] - 1.0).abs() < 1e-12);
        assert!(occ.iter().all(|&p| (-1e-12..=1.0 + 1e-12).contains(&p)));
    }
}
