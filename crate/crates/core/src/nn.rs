//! Shared building blocks: the attention layer used by both encoders and
//! the auxiliary branch, and a single-layer LSTM.

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::mask::AttentionMask;
use crate::params::{Binding, ParamStore};
use crate::tensor::Tensor;

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Shape of one attention + feed-forward layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerSpec {
    pub dim: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    /// Kernel width of the causal depthwise convolution, if any.
    pub conv_kernel: Option<usize>,
}

impl LayerSpec {
    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::InvalidArgument(format!(
                "feature dim {} must be a positive multiple of head count {}",
                self.dim, self.heads
            )));
        }
        if self.conv_kernel == Some(0) {
            return Err(Error::InvalidArgument("conv kernel must be at least 1".into()));
        }
        Ok(())
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, prefix: &str, rng: &mut R) {
        let d = self.dim;
        for proj in ["q", "k", "v", "o"] {
            store.init_weight(&format!("{prefix}.w{proj}"), d, d, rng);
            store.init_const(&format!("{prefix}.b{proj}"), &[d], 0.0);
        }
        store.init_weight(&format!("{prefix}.ff1.w"), d, self.ffn_dim, rng);
        store.init_const(&format!("{prefix}.ff1.b"), &[self.ffn_dim], 0.0);
        store.init_weight(&format!("{prefix}.ff2.w"), self.ffn_dim, d, rng);
        store.init_const(&format!("{prefix}.ff2.b"), &[d], 0.0);
        for ln in ["ln1", "ln2"] {
            store.init_const(&format!("{prefix}.{ln}.g"), &[d], 1.0);
            store.init_const(&format!("{prefix}.{ln}.b"), &[d], 0.0);
        }
        if let Some(k) = self.conv_kernel {
            let bound = (3.0 / k as f64).sqrt() * 0.5;
            store.insert(format!("{prefix}.conv.w"), Tensor::uniform(&[k, d], bound, rng));
            store.init_const(&format!("{prefix}.conv.b"), &[d], 0.0);
        }
    }
}

/// Output of one layer: post-norm features and the per-head query, key and
/// value projections (each `[T, d_A]`).
#[derive(Debug, Clone)]
pub struct LayerTapOutput {
    pub features: Var,
    pub queries: Vec<Var>,
    pub keys: Vec<Var>,
    pub values: Vec<Var>,
}

/// `x -> LN(x + FFN(LN(x + MHSA(conv(x)))))`, where `conv` is a residual
/// causal depthwise convolution present only when `LayerSpec::conv_kernel` is set.
pub fn layer_forward(
    tape: &mut Tape,
    params: &Binding,
    prefix: &str,
    spec: &LayerSpec,
    x: Var,
    mask: &AttentionMask,
) -> Result<LayerTapOutput> {
    let shape = tape.shape(x).to_vec();
    if shape.len() != 2 || shape[1] != spec.dim {
        return Err(Error::shape("layer_forward", &shape, &[0, spec.dim]));
    }
    let t = shape[0];
    if mask.size() != t {
        return Err(Error::shape("layer_forward mask", &[mask.size()], &[t]));
    }
    let p = |name: &str| params.var(&format!("{prefix}.{name}"));

    let mut x = x;
    if let Some(k) = spec.conv_kernel {
        let w = p("conv.w")?;
        let mut acc = None;
        for j in 0..k {
            let shifted = tape.shift_rows(x, j)?;
            let tap = tape.slice_rows(w, j, 1)?;
            let term = tape.mul(shifted, tap)?;
            acc = Some(match acc {
                None => term,
                Some(a) => tape.add(a, term)?,
            });
        }
        let conv = tape.add(acc.unwrap(), p("conv.b")?)?;
        let act = tape.silu(conv)?;
        x = tape.add(x, act)?;
    }

    let q = tape.linear(x, p("wq")?, Some(p("bq")?))?;
    let k = tape.linear(x, p("wk")?, Some(p("bk")?))?;
    let v = tape.linear(x, p("wv")?, Some(p("bv")?))?;
    let dh = spec.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let (mut queries, mut keys, mut values, mut heads) = (vec![], vec![], vec![], vec![]);
    for h in 0..spec.heads {
        let qh = tape.slice_last(q, h * dh, dh)?;
        let kh = tape.slice_last(k, h * dh, dh)?;
        let vh = tape.slice_last(v, h * dh, dh)?;
        let scores = tape.matmul_nt(qh, kh)?;
        let scores = tape.scale(scores, scale);
        let probs = tape.softmax_masked(scores, mask)?;
        heads.push(tape.matmul(probs, vh)?);
        queries.push(qh);
        keys.push(kh);
        values.push(vh);
    }
    let attn = if heads.len() == 1 {
        heads[0]
    } else {
        tape.concat_last(&heads)?
    };
    let attn = tape.linear(attn, p("wo")?, Some(p("bo")?))?;
    let res = tape.add(x, attn)?;
    let x = affine_norm(tape, res, p("ln1.g")?, p("ln1.b")?)?;

    let hidden = tape.linear(x, p("ff1.w")?, Some(p("ff1.b")?))?;
    let hidden = tape.silu(hidden)?;
    let ff = tape.linear(hidden, p("ff2.w")?, Some(p("ff2.b")?))?;
    let res = tape.add(x, ff)?;
    let features = affine_norm(tape, res, p("ln2.g")?, p("ln2.b")?)?;

    Ok(LayerTapOutput {
        features,
        queries,
        keys,
        values,
    })
}

fn affine_norm(tape: &mut Tape, x: Var, gain: Var, bias: Var) -> Result<Var> {
    let n = tape.layer_norm(x, LAYER_NORM_EPS);
    let n = tape.mul(n, gain)?;
    tape.add(n, bias)
}

/// Sinusoidal absolute positions, `[T, D]`.
pub fn positional_encoding(len: usize, dim: usize) -> Tensor {
    let mut pe = Tensor::zeros(&[len, dim]);
    for t in 0..len {
        for i in 0..dim {
            let rate = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / dim as f64);
            let angle = t as f64 * rate;
            pe.set(&[t, i], if i % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    pe
}

/// Single-layer LSTM with input, forget, output gates and a tanh candidate.
/// Parameters: `wx: [in, 4H]`, `wh: [H, 4H]`, `b: [4H]`, gate order
/// `i, f, g, o`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LstmSpec {
    pub input_dim: usize,
    pub hidden_dim: usize,
}

impl LstmSpec {
    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, prefix: &str, rng: &mut R) {
        let h = self.hidden_dim;
        store.init_weight(&format!("{prefix}.wx"), self.input_dim, 4 * h, rng);
        store.init_weight(&format!("{prefix}.wh"), h, 4 * h, rng);
        let mut b = Tensor::zeros(&[4 * h]);
        // Forget gate starts open.
        b.data_mut()[h..2 * h].iter_mut().for_each(|v| *v = 1.0);
        store.insert(format!("{prefix}.b"), b);
    }
}

/// Recurrent state `(h, c)`, each `[1, H]`.
#[derive(Debug, Clone, Copy)]
pub struct LstmState {
    pub h: Var,
    pub c: Var,
}

pub fn lstm_zero_state(tape: &mut Tape, spec: &LstmSpec) -> LstmState {
    LstmState {
        h: tape.constant(Tensor::zeros(&[1, spec.hidden_dim])),
        c: tape.constant(Tensor::zeros(&[1, spec.hidden_dim])),
    }
}

/// One step given the already-projected input row `xw = x wx + b`, `[1, 4H]`.
pub fn lstm_step(
    tape: &mut Tape,
    params: &Binding,
    prefix: &str,
    spec: &LstmSpec,
    xw: Var,
    state: LstmState,
) -> Result<LstmState> {
    let h = spec.hidden_dim;
    let rec = tape.matmul(state.h, params.var(&format!("{prefix}.wh"))?)?;
    let gates = tape.add(xw, rec)?;
    let i = tape.slice_last(gates, 0, h)?;
    let f = tape.slice_last(gates, h, h)?;
    let g = tape.slice_last(gates, 2 * h, h)?;
    let o = tape.slice_last(gates, 3 * h, h)?;
    let i = tape.sigmoid(i);
    let f = tape.sigmoid(f);
    let g = tape.tanh(g);
    let o = tape.sigmoid(o);
    let keep = tape.mul(f, state.c)?;
    let write = tape.mul(i, g)?;
    let c = tape.add(keep, write)?;
    let tc = tape.tanh(c);
    let h = tape.mul(o, tc)?;
    Ok(LstmState { h, c })
}

/// Projects inputs for every step at once: `[T, 4H]`.
pub fn lstm_project(tape: &mut Tape, params: &Binding, prefix: &str, x: Var) -> Result<Var> {
    let wx = params.var(&format!("{prefix}.wx"))?;
    let b = params.var(&format!("{prefix}.b"))?;
    tape.linear(x, wx, Some(b))
}

/// Runs left to right from a zero state and returns all outputs, `[T, H]`.
pub fn lstm_sequence(
    tape: &mut Tape,
    params: &Binding,
    prefix: &str,
    spec: &LstmSpec,
    x: Var,
) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    if shape.len() != 2 || shape[1] != spec.input_dim {
        return Err(Error::shape("lstm", &shape, &[0, spec.input_dim]));
    }
    let xw = lstm_project(tape, params, prefix, x)?;
    let mut state = lstm_zero_state(tape, spec);
    let mut outs = Vec::with_capacity(shape[0]);
    for t in 0..shape[0] {
        let row = tape.slice_rows(xw, t, 1)?;
        state = lstm_step(tape, params, prefix, spec, row, state)?;
        outs.push(state.h);
    }
    tape.concat_rows(&outs)
}
