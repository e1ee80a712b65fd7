//! wasm-bindgen exports behind `www/index.html`.
//!
//! Each export is a thin wrapper over a plain function so the numerics can
//! be tested natively.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use streamkd::distill::{apc_loss, dis_loss};
use streamkd::transducer::{lattice_occupancy, transducer_nll};
use streamkd::{AttentionMask, Tape, Tensor};
use wasm_bindgen::prelude::*;

fn js(e: streamkd::Error) -> JsError {
    JsError::new(&e.to_string())
}

/// Row-major 0/1 visibility for `kind` in `full`, `chunk`, `future_gap`.
pub fn mask_cells(kind: &str, size: usize, chunk: usize, left_context: usize, gap: usize) -> streamkd::Result<Vec<u8>> {
    let mask = match kind {
        "full" => AttentionMask::full(size)?,
        "chunk" => AttentionMask::chunk_streaming(size, chunk, left_context, 0)?,
        "future_gap" => AttentionMask::future_gap(size, gap)?,
        other => return Err(streamkd::Error::InvalidArgument(format!("unknown mask kind {other:?}"))),
    };
    Ok(mask.as_slice().iter().map(|&v| u8::from(v)).collect())
}

#[wasm_bindgen]
pub fn mask_matrix(kind: &str, size: usize, chunk: usize, left_context: usize, gap: usize) -> Result<Vec<u8>, JsError> {
    mask_cells(kind, size, chunk, left_context, gap).map_err(js)
}

fn scalar(f: impl FnOnce(&mut Tape) -> streamkd::Result<streamkd::Var>) -> streamkd::Result<f64> {
    let mut tape = Tape::new();
    let v = f(&mut tape)?;
    Ok(tape.value(v).item())
}

/// Per-frame distillation distance between `h = (1, 0)` and
/// `z = scale * (cos a, sin a)` for `samples` angles over a full turn.
pub fn dis_sweep(scale: f64, samples: usize) -> streamkd::Result<Vec<f64>> {
    let h = Tensor::new(&[1, 2], vec![1.0, 0.0])?;
    (0..samples)
        .map(|i| {
            let a = std::f64::consts::TAU * i as f64 / samples as f64;
            let z = Tensor::new(&[1, 2], vec![scale * a.cos(), scale * a.sin()])?;
            scalar(|tape| {
                let (h, z) = (tape.constant(h.clone()), tape.constant(z));
                dis_loss(tape, h, z)
            })
        })
        .collect()
}

#[wasm_bindgen]
pub fn dis_curve(scale: f64, samples: usize) -> Result<Vec<f64>, JsError> {
    dis_sweep(scale, samples).map_err(js)
}

/// Future-prediction loss for a sine sequence `h_t = (sin wt, cos wt)`
/// against a predictor that outputs `h_{t+lead}`, for each gap `1..=max_gap`.
pub fn apc_by_gap(frames: usize, lead: usize, max_gap: usize) -> streamkd::Result<Vec<f64>> {
    let w = 0.4;
    let row = |t: usize| [(w * t as f64).sin(), (w * t as f64).cos()];
    let h: Vec<f64> = (0..frames).flat_map(row).collect();
    let r: Vec<f64> = (0..frames).flat_map(|t| row(t + lead)).collect();
    let (h, r) = (Tensor::new(&[frames, 2], h)?, Tensor::new(&[frames, 2], r)?);
    (1..=max_gap.min(frames.saturating_sub(1)))
        .map(|gap| {
            scalar(|tape| {
                let (h, r) = (tape.constant(h.clone()), tape.constant(r.clone()));
                apc_loss(tape, h, r, gap)
            })
            .map(|v| v / (frames - gap) as f64)
        })
        .collect()
}

#[wasm_bindgen]
pub fn apc_curve(frames: usize, lead: usize, max_gap: usize) -> Result<Vec<f64>, JsError> {
    apc_by_gap(frames, lead, max_gap).map_err(js)
}

/// Random lattice `[frames, tokens + 1, vocab + 1]` with logits scaled by
/// `sharpness`; returns node occupancy followed by the negative
/// log-likelihood as the last element.
pub fn lattice_view(frames: usize, tokens: usize, vocab: usize, sharpness: f64, seed: u64) -> streamkd::Result<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let logits = Tensor::randn(&[frames, tokens + 1, vocab + 1], sharpness, &mut rng);
    let labels: Vec<usize> = (0..tokens).map(|i| 1 + i % vocab.max(1)).collect();
    let mut out = lattice_occupancy(&logits, &labels)?;
    out.push(transducer_nll(&logits, &labels)?.0);
    Ok(out)
}

#[wasm_bindgen]
pub fn lattice(frames: usize, tokens: usize, vocab: usize, sharpness: f64, seed: u64) -> Result<Vec<f64>, JsError> {
    lattice_view(frames, tokens, vocab, sharpness, seed).map_err(js)
}
