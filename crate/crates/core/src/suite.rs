//! Finite-difference and causality check suites over randomly drawn
//! instances.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::aux_branch::AuxBranch;
use crate::distill::{apc_loss, dis_loss, kld_loss, relation_distributions};
use crate::encoder::{Encoder, EncoderConfig};
use crate::error::Result;
use crate::gradcheck::{grad_check, DEFAULT_STEP};
use crate::mask::{chunk_end, AttentionMask};
use crate::nn::{layer_forward, lstm_sequence, LayerSpec, LayerTapOutput, LstmSpec};
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::transducer::transducer_loss;

pub const GRADIENT_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct GradientReport {
    pub name: &'static str,
    pub instances: usize,
    pub max_error: f64,
}

impl GradientReport {
    pub fn passed(&self) -> bool {
        self.max_error < GRADIENT_TOLERANCE
    }
}

fn check_many(
    name: &'static str,
    instances: usize,
    rng: &mut ChaCha8Rng,
    mut one: impl FnMut(&mut ChaCha8Rng) -> Result<f64>,
) -> Result<GradientReport> {
    let mut worst = 0.0f64;
    for _ in 0..instances {
        worst = worst.max(one(rng)?);
    }
    Ok(GradientReport {
        name,
        instances,
        max_error: worst,
    })
}

/// Random per-head Q/K/V for relation tests, `heads` x `[t, dh]` each.
fn random_qkv(tape: &mut Tape, rng: &mut ChaCha8Rng, heads: usize, t: usize, dh: usize) -> LayerTapOutput {
    let mut draw = |tape: &mut Tape| -> Vec<Var> {
        (0..heads)
            .map(|_| tape.constant(Tensor::randn(&[t, dh], 1.0, rng)))
            .collect()
    };
    let queries = draw(tape);
    let keys = draw(tape);
    let values = draw(tape);
    LayerTapOutput {
        features: queries[0],
        queries,
        keys,
        values,
    }
}

fn kld_instance(rng: &mut ChaCha8Rng, stream: usize) -> Result<f64> {
    let heads = rng.gen_range(1..=3);
    let t = rng.gen_range(3..=7);
    let dh = rng.gen_range(2..=4);
    let gap = rng.gen_range(1..=2);
    let support = AttentionMask::future_gap(t, gap)?;
    let seed: u64 = rng.gen();
    let x = Tensor::randn(&[heads, t, dh], 1.0, rng);
    grad_check(
        |tape, x| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            let teacher = random_qkv(tape, &mut r, heads, t, dh);
            let mut student = random_qkv(tape, &mut r, heads, t, dh);
            let target = match stream {
                0 => &mut student.queries,
                1 => &mut student.keys,
                _ => &mut student.values,
            };
            for (h, slot) in target.iter_mut().enumerate() {
                let flat = tape.reshape(x, &[heads * t, dh])?;
                *slot = tape.slice_rows(flat, h * t, t)?;
            }
            let rt = relation_distributions(tape, &teacher, &support)?;
            let rs = relation_distributions(tape, &student, &support)?;
            kld_loss(tape, &rt, &rs)
        },
        &x,
        DEFAULT_STEP,
    )
}

fn layer_instance(rng: &mut ChaCha8Rng) -> Result<f64> {
    let heads = rng.gen_range(1..=2);
    let spec = LayerSpec {
        dim: 4 * heads,
        heads,
        ffn_dim: 8,
        conv_kernel: rng.gen_bool(0.5).then_some(3),
    };
    let t = rng.gen_range(3..=6);
    let mask = if rng.gen_bool(0.5) {
        AttentionMask::full(t)?
    } else {
        AttentionMask::chunk_streaming(t, 2, 2, 0)?
    };
    let mut params = ParamStore::new();
    spec.init(&mut params, "l", rng);
    for (_, v) in params.iter_mut() {
        for x in v.data_mut() {
            *x += 0.1 * rng.gen_range(-1.0..1.0);
        }
    }
    let weights = Tensor::randn(&[t, spec.dim], 1.0, rng);
    let x = Tensor::randn(&[t, spec.dim], 1.0, rng);
    let f = |tape: &mut Tape, x: Var, swap: Option<&str>| -> Result<Var> {
        let mut b = params.bind(tape, false);
        let input = match swap {
            Some(name) => {
                b.insert(name, x);
                tape.constant(weights.clone())
            }
            None => x,
        };
        let out = layer_forward(tape, &b, "l", &spec, input, &mask)?;
        let w = tape.constant(weights.clone());
        let prod = tape.mul(out.features, w)?;
        Ok(tape.sum(prod))
    };
    let mut worst = grad_check(|tape, x| f(tape, x, None), &x, DEFAULT_STEP)?;
    for name in ["l.wq", "l.ff1.w", "l.ln1.g"] {
        let p = params.get(name).unwrap().clone();
        worst = worst.max(grad_check(|tape, x| f(tape, x, Some(name)), &p, DEFAULT_STEP)?);
    }
    Ok(worst)
}

/// Runs every gradient check `instances` times with random shapes and
/// values.
pub fn gradient_suite(instances: usize, seed: u64) -> Result<Vec<GradientReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = vec![];
    out.push(check_many("dis_loss", instances, &mut rng, |rng| {
        let t = rng.gen_range(1..=6);
        let d = rng.gen_range(2..=6);
        let h = Tensor::randn(&[t, d], 1.0, rng);
        let z = Tensor::randn(&[t, d], 1.0, rng);
        grad_check(
            |tape, z| {
                let h = tape.constant(h.clone());
                dis_loss(tape, h, z)
            },
            &z,
            DEFAULT_STEP,
        )
    })?);
    for (stream, name) in [(0, "kld_loss/query"), (1, "kld_loss/key"), (2, "kld_loss/value")] {
        out.push(check_many(name, instances, &mut rng, |rng| kld_instance(rng, stream))?);
    }
    out.push(check_many("apc_loss", instances, &mut rng, |rng| {
        let gap = rng.gen_range(1..=3);
        let t = gap + rng.gen_range(1..=4);
        let d = rng.gen_range(2..=5);
        let h = Tensor::randn(&[t, d], 1.0, rng);
        let r = Tensor::randn(&[t, d], 1.0, rng);
        grad_check(
            |tape, r| {
                let h = tape.constant(h.clone());
                apc_loss(tape, h, r, gap)
            },
            &r,
            DEFAULT_STEP,
        )
    })?);
    out.push(check_many("transducer_loss", instances, &mut rng, |rng| {
        let t = rng.gen_range(1..=4);
        let u = rng.gen_range(0..=3);
        let v = rng.gen_range(1..=5);
        let tokens: Vec<usize> = (0..u).map(|_| rng.gen_range(1..=v)).collect();
        let logits = Tensor::randn(&[t, u + 1, v + 1], 1.0, rng);
        grad_check(|tape, x| transducer_loss(tape, x, &tokens), &logits, DEFAULT_STEP)
    })?);
    out.push(check_many("encoder_layer", instances, &mut rng, layer_instance)?);
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CausalityReport {
    pub name: &'static str,
    pub draws: usize,
    pub violations: usize,
}

impl CausalityReport {
    pub fn passed(&self) -> bool {
        self.violations == 0 && self.draws > 0
    }
}

fn perturb_rows<R: Rng>(x: &Tensor, rows: std::ops::Range<usize>, rng: &mut R) -> Tensor {
    let mut y = x.clone();
    for r in rows {
        for v in y.row_mut(r) {
            *v += rng.gen_range(-3.0..3.0);
        }
    }
    y
}

fn rows_equal(a: &Tensor, b: &Tensor, row: usize) -> bool {
    a.row(row)
        .iter()
        .zip(b.row(row))
        .all(|(x, y)| x.to_bits() == y.to_bits())
}

/// Bit-level invariance checks: the streaming student ignores inputs past
/// its chunk, branch attention ignores the gap, and the recurrence ignores
/// the future.
pub fn causality_suite(draws: usize, seed: u64) -> Result<Vec<CausalityReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = EncoderConfig::student(8);
    let (chunk, _) = match cfg.mode {
        crate::encoder::AttentionMode::Streaming { chunk, left_context } => (chunk, left_context),
        _ => unreachable!(),
    };
    let encoder = Encoder::new(cfg, "student")?;
    let mut params = ParamStore::new();
    encoder.init(&mut params, &mut rng);

    let run_encoder = |x: &Tensor| -> Result<Vec<Tensor>> {
        let mut tape = Tape::new();
        let b = params.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let taps = encoder.forward(&mut tape, &b, xv)?;
        Ok(taps.iter().map(|o| tape.value(o.features).clone()).collect())
    };
    let mut student = CausalityReport {
        name: "streaming student",
        draws,
        violations: 0,
    };
    for _ in 0..draws {
        let len = rng.gen_range(6..=24);
        let t = rng.gen_range(0..len);
        let end = chunk_end(t, len, chunk);
        let x = Tensor::randn(&[len, 8], 1.0, &mut rng);
        let y = if end + 1 < len {
            perturb_rows(&x, end + 1..len, &mut rng)
        } else {
            x.clone()
        };
        let (a, b) = (run_encoder(&x)?, run_encoder(&y)?);
        if !a.iter().zip(&b).all(|(a, b)| rows_equal(a, b, t)) {
            student.violations += 1;
        }
    }

    let gap = 4;
    let branch = AuxBranch::new(0, 16, 32, 4, 64, gap)?;
    let mut bparams = ParamStore::new();
    branch.init(&mut bparams, &mut rng);
    let run_branch = |s: &Tensor| -> Result<Tensor> {
        let mut tape = Tape::new();
        let b = bparams.bind(&mut tape, false);
        let sv = tape.constant(s.clone());
        let out = branch.forward(&mut tape, &b, sv)?;
        Ok(tape.value(out.z).clone())
    };
    let mut gap_report = CausalityReport {
        name: "aux attention gap",
        draws,
        violations: 0,
    };
    for _ in 0..draws {
        let len = rng.gen_range(gap + 2..=20);
        let t = rng.gen_range(0..len - 1);
        let s = Tensor::randn(&[len, 16], 1.0, &mut rng);
        let hi = (t + gap + 1).min(len);
        let lo = rng.gen_range(t + 1..hi);
        let s2 = perturb_rows(&s, lo..hi, &mut rng);
        if !rows_equal(&run_branch(&s)?, &run_branch(&s2)?, t) {
            gap_report.violations += 1;
        }
    }

    let spec = LstmSpec {
        input_dim: 32,
        hidden_dim: 32,
    };
    let mut lparams = ParamStore::new();
    spec.init(&mut lparams, "lstm", &mut rng);
    let run_lstm = |z: &Tensor| -> Result<Tensor> {
        let mut tape = Tape::new();
        let b = lparams.bind(&mut tape, false);
        let zv = tape.constant(z.clone());
        let r = lstm_sequence(&mut tape, &b, "lstm", &spec, zv)?;
        Ok(tape.value(r).clone())
    };
    let mut rec = CausalityReport {
        name: "aux recurrence",
        draws,
        violations: 0,
    };
    for _ in 0..draws {
        let len = rng.gen_range(2..=20);
        let t = rng.gen_range(0..len - 1);
        let z = Tensor::randn(&[len, 32], 1.0, &mut rng);
        let z2 = perturb_rows(&z, t + 1..len, &mut rng);
        if !rows_equal(&run_lstm(&z)?, &run_lstm(&z2)?, t) {
            rec.violations += 1;
        }
    }
    Ok(vec![student, gap_report, rec])
}
