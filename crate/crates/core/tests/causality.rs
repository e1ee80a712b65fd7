use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use streamkd::aux_branch::AuxBranch;
use streamkd::encoder::{AttentionMode, Encoder, EncoderConfig};
use streamkd::mask::chunk_end;
use streamkd::nn::{layer_forward, lstm_sequence, LayerSpec};
use streamkd::params::ParamStore;
use streamkd::suite::causality_suite;
use streamkd::{AttentionMask, Tape, Tensor};

fn encode(enc: &Encoder, params: &ParamStore, x: &Tensor) -> Vec<Tensor> {
    let mut tape = Tape::new();
    let b = params.bind(&mut tape, false);
    let xv = tape.constant(x.clone());
    let taps = enc.forward(&mut tape, &b, xv).unwrap();
    taps.iter().map(|o| tape.value(o.features).clone()).collect()
}

fn bits(row: &[f64]) -> Vec<u64> {
    row.iter().map(|v| v.to_bits()).collect()
}

#[test]
fn suite_reports_no_violations() {
    for r in causality_suite(20, 99).unwrap() {
        assert!(r.passed(), "{r:?}");
        assert_eq!(r.draws, 20);
    }
}

#[test]
fn streaming_student_ignores_frames_after_its_chunk() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let enc = Encoder::new(EncoderConfig::student(8), "s").unwrap();
    let mut params = ParamStore::new();
    enc.init(&mut params, &mut rng);
    for _ in 0..20 {
        let len = rng.gen_range(5..=20);
        let t = rng.gen_range(0..len);
        let end = chunk_end(t, len, 4);
        let x = Tensor::randn(&[len, 8], 1.0, &mut rng);
        let mut y = x.clone();
        for r in end + 1..len {
            y.row_mut(r).iter_mut().for_each(|v| *v = rng.gen_range(-10.0..10.0));
        }
        let (a, b) = (encode(&enc, &params, &x), encode(&enc, &params, &y));
        assert_eq!(bits(a.last().unwrap().row(t)), bits(b.last().unwrap().row(t)));
    }
}

#[test]
fn full_context_teacher_sees_the_future() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let enc = Encoder::new(EncoderConfig::teacher(8), "t").unwrap();
    let mut params = ParamStore::new();
    enc.init(&mut params, &mut rng);
    let x = Tensor::randn(&[12, 8], 1.0, &mut rng);
    let mut y = x.clone();
    y.row_mut(11)[0] += 1.0;
    let (a, b) = (encode(&enc, &params, &x), encode(&enc, &params, &y));
    assert_ne!(bits(a.last().unwrap().row(0)), bits(b.last().unwrap().row(0)));
}

#[test]
fn streaming_mode_without_conv_is_still_chunk_causal() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut cfg = EncoderConfig::student(8);
    cfg.causal_conv = false;
    cfg.mode = AttentionMode::Streaming { chunk: 3, left_context: 3 };
    assert_eq!(cfg.warnings().len(), 1);
    let enc = Encoder::new(cfg, "s").unwrap();
    let mut params = ParamStore::new();
    enc.init(&mut params, &mut rng);
    let x = Tensor::randn(&[9, 8], 1.0, &mut rng);
    let mut y = x.clone();
    y.row_mut(6)[2] -= 3.0;
    let (a, b) = (encode(&enc, &params, &x), encode(&enc, &params, &y));
    for t in 0..6 {
        assert_eq!(bits(a[3].row(t)), bits(b[3].row(t)));
    }
}

#[test]
fn single_frame_attention_ignores_queries_and_keys() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let spec = LayerSpec { dim: 4, heads: 2, ffn_dim: 8, conv_kernel: None };
    let mut params = ParamStore::new();
    spec.init(&mut params, "l", &mut rng);
    let x = Tensor::randn(&[1, 4], 1.0, &mut rng);
    let run = |params: &ParamStore| {
        let mut tape = Tape::new();
        let b = params.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let out = layer_forward(&mut tape, &b, "l", &spec, xv, &AttentionMask::full(1).unwrap()).unwrap();
        tape.value(out.features).clone()
    };
    let before = run(&params);
    let mut moved = params.clone();
    for name in ["l.wq", "l.wk", "l.bq", "l.bk"] {
        moved.get_mut(name).unwrap().data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-5.0..5.0));
    }
    assert_eq!(run(&moved), before);
    moved.get_mut("l.wv").unwrap().data_mut()[0] += 1.0;
    assert_ne!(run(&moved), before);
}

#[test]
fn one_layer_encoder_is_embedding_plus_layer() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut cfg = EncoderConfig::teacher(8);
    cfg.num_layers = 1;
    let enc = Encoder::new(cfg.clone(), "e").unwrap();
    let mut params = ParamStore::new();
    enc.init(&mut params, &mut rng);
    let x = Tensor::randn(&[6, 8], 1.0, &mut rng);
    let via_encoder = encode(&enc, &params, &x);

    let mut tape = Tape::new();
    let b = params.bind(&mut tape, false);
    let xv = tape.constant(x);
    let h = tape.linear(xv, b.var("e.embed.w").unwrap(), Some(b.var("e.embed.b").unwrap())).unwrap();
    let pe = tape.constant(streamkd::nn::positional_encoding(6, cfg.dim));
    let h = tape.add(h, pe).unwrap();
    let out = layer_forward(&mut tape, &b, "e.layer0", &cfg.layer_spec(), h, &AttentionMask::full(6).unwrap()).unwrap();
    assert_eq!(tape.value(out.features), &via_encoder[0]);
}

fn branch_z(branch: &AuxBranch, params: &ParamStore, s: &Tensor) -> (Tensor, Tensor) {
    let mut tape = Tape::new();
    let b = params.bind(&mut tape, false);
    let sv = tape.constant(s.clone());
    let out = branch.forward(&mut tape, &b, sv).unwrap();
    (tape.value(out.z).clone(), tape.value(out.r).clone())
}

#[test]
fn branch_attention_skips_the_gap_but_not_beyond() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let branch = AuxBranch::new(0, 16, 32, 4, 64, 4).unwrap();
    let mut params = ParamStore::new();
    branch.init(&mut params, &mut rng);
    let s = Tensor::randn(&[14, 16], 1.0, &mut rng);
    let (z, _) = branch_z(&branch, &params, &s);
    for t in 0..8 {
        let mut gap = s.clone();
        for k in t + 1..=t + 4 {
            gap.row_mut(k)[3] += 2.0;
        }
        assert_eq!(bits(branch_z(&branch, &params, &gap).0.row(t)), bits(z.row(t)));
        let mut beyond = s.clone();
        beyond.row_mut(t + 5)[3] += 2.0;
        assert_ne!(bits(branch_z(&branch, &params, &beyond).0.row(t)), bits(z.row(t)));
    }
}

#[test]
fn zero_gap_branch_is_full_layer_plus_recurrence() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let branch = AuxBranch::new(2, 8, 12, 3, 16, 0).unwrap();
    assert_eq!(branch.prefix, "aux.2");
    let mut params = ParamStore::new();
    branch.init(&mut params, &mut rng);
    let s = Tensor::randn(&[7, 8], 1.0, &mut rng);
    let (z, r) = branch_z(&branch, &params, &s);

    let mut tape = Tape::new();
    let b = params.bind(&mut tape, false);
    let sv = tape.constant(s);
    let g = branch.project(&mut tape, &b, sv).unwrap();
    let out = layer_forward(&mut tape, &b, "aux.2.attn", &branch.attn_spec(), g, &AttentionMask::full(7).unwrap()).unwrap();
    let r2 = lstm_sequence(&mut tape, &b, "aux.2.lstm", &branch.lstm_spec(), out.features).unwrap();
    assert_eq!(tape.value(out.features), &z);
    assert_eq!(tape.value(r2), &r);
}

#[test]
fn branch_rejects_wrong_width() {
    let branch = AuxBranch::new(0, 16, 32, 4, 64, 4).unwrap();
    let mut params = ParamStore::new();
    branch.init(&mut params, &mut ChaCha8Rng::seed_from_u64(0));
    let mut tape = Tape::new();
    let b = params.bind(&mut tape, false);
    let s = tape.constant(Tensor::zeros(&[5, 8]));
    assert!(branch.forward(&mut tape, &b, s).is_err());
    assert!(AuxBranch::new(0, 16, 30, 4, 64, 4).is_err());
}
