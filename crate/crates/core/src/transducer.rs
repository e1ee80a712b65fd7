//! Transducer head: LSTM predictor over previous tokens, additive joint
//! network, exact negative log-likelihood over the `T x (U+1)` alignment
//! lattice, a brute-force enumeration oracle, and greedy decoding.
//!
//! Symbol 0 is blank; tokens are `1..=V`. From lattice node `(t, u)` a blank
//! moves to `(t+1, u)` and token `y_{u+1}` moves to `(t, u+1)`. A complete
//! alignment ends with the blank emitted at `(T-1, U)`.

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{lstm_project, lstm_step, lstm_zero_state, LstmSpec, LstmState};
use crate::params::{Binding, ParamStore};
use crate::tensor::Tensor;

pub const BLANK: usize = 0;

/// Enumeration limit for [`brute_force_transducer`].
pub const BRUTE_FORCE_MAX_LEN: usize = 12;

fn check_lattice(logits: &Tensor, tokens: &[usize]) -> Result<(usize, usize, usize)> {
    let &[t, u1, v1] = logits.shape() else {
        return Err(Error::shape("transducer logits", logits.shape(), &[0, tokens.len() + 1, 0]));
    };
    if u1 != tokens.len() + 1 {
        return Err(Error::shape("transducer logits", logits.shape(), &[t, tokens.len() + 1, v1]));
    }
    if v1 < 2 {
        return Err(Error::InvalidArgument("vocabulary needs blank plus one token".into()));
    }
    if let Some(&bad) = tokens.iter().find(|&&y| y == BLANK || y >= v1) {
        return Err(Error::InvalidArgument(format!(
            "token {bad} outside vocabulary 1..={}",
            v1 - 1
        )));
    }
    Ok((t, u1 - 1, v1))
}

fn log_softmax_rows(logits: &Tensor) -> Vec<f64> {
    let v1 = logits.cols();
    let mut out = vec![0.0; logits.numel()];
    for (x, y) in logits.data().chunks(v1).zip(out.chunks_mut(v1)) {
        let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + x.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        for (yi, xi) in y.iter_mut().zip(x) {
            *yi = xi - lse;
        }
    }
    out
}

fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

struct Lattice {
    t_len: usize,
    u_len: usize,
    v1: usize,
    lp: Vec<f64>,
    alpha: Vec<f64>,
    beta: Vec<f64>,
    log_p: f64,
}

impl Lattice {
    fn new(logits: &Tensor, tokens: &[usize]) -> Result<Self> {
        let (t_len, u_len, v1) = check_lattice(logits, tokens)?;
        let u1 = u_len + 1;
        let lp = log_softmax_rows(logits);
        let at = |t: usize, u: usize, k: usize| lp[(t * u1 + u) * v1 + k];
        let blank = |t: usize, u: usize| at(t, u, BLANK);
        let emit = |t: usize, u: usize| at(t, u, tokens[u]);

        let neg = f64::NEG_INFINITY;
        let mut alpha = vec![neg; t_len * u1];
        for t in 0..t_len {
            for u in 0..u1 {
                alpha[t * u1 + u] = if t == 0 && u == 0 {
                    0.0
                } else {
                    let from_t = if t > 0 { alpha[(t - 1) * u1 + u] + blank(t - 1, u) } else { neg };
                    let from_u = if u > 0 { alpha[t * u1 + u - 1] + emit(t, u - 1) } else { neg };
                    log_add(from_t, from_u)
                };
            }
        }
        let log_p = alpha[(t_len - 1) * u1 + u_len] + blank(t_len - 1, u_len);

        let mut beta = vec![neg; t_len * u1];
        for t in (0..t_len).rev() {
            for u in (0..u1).rev() {
                beta[t * u1 + u] = if t == t_len - 1 && u == u_len {
                    blank(t, u)
                } else {
                    let via_t = if t + 1 < t_len { beta[(t + 1) * u1 + u] + blank(t, u) } else { neg };
                    let via_u = if u < u_len { beta[t * u1 + u + 1] + emit(t, u) } else { neg };
                    log_add(via_t, via_u)
                };
            }
        }
        Ok(Self { t_len, u_len, v1, lp, alpha, beta, log_p })
    }
}

/// Negative log-likelihood and its gradient with respect to the raw logits
/// `[T, U+1, V+1]`. Log-softmax over the symbol axis is applied here.
pub fn transducer_nll(logits: &Tensor, tokens: &[usize]) -> Result<(f64, Vec<f64>)> {
    let lat = Lattice::new(logits, tokens)?;
    let (t_len, u_len, v1) = (lat.t_len, lat.u_len, lat.v1);
    let u1 = u_len + 1;
    let (lp, alpha, beta, log_p) = (&lat.lp, &lat.alpha, &lat.beta, lat.log_p);
    let at = |t: usize, u: usize, k: usize| lp[(t * u1 + u) * v1 + k];
    let blank = |t: usize, u: usize| at(t, u, BLANK);
    let emit = |t: usize, u: usize| at(t, u, tokens[u]);
    let neg = f64::NEG_INFINITY;

    // d(-log P)/d lp(t, u, k) is minus the posterior of taking that edge.
    let mut grad_lp = vec![0.0; lp.len()];
    for t in 0..t_len {
        for u in 0..u1 {
            let a = alpha[t * u1 + u];
            let base = (t * u1 + u) * v1;
            let next_t = if t == t_len - 1 {
                if u == u_len { 0.0 } else { neg }
            } else {
                beta[(t + 1) * u1 + u]
            };
            grad_lp[base + BLANK] = -(a + blank(t, u) + next_t - log_p).exp();
            if u < u_len {
                grad_lp[base + tokens[u]] = -(a + emit(t, u) + beta[t * u1 + u + 1] - log_p).exp();
            }
        }
    }
    // Back through log-softmax: g_x = g_lp - softmax * sum(g_lp).
    let mut grad = vec![0.0; lp.len()];
    for ((g, l), out) in grad_lp.chunks(v1).zip(lp.chunks(v1)).zip(grad.chunks_mut(v1)) {
        let s: f64 = g.iter().sum();
        for k in 0..v1 {
            out[k] = g[k] - l[k].exp() * s;
        }
    }
    Ok((-log_p, grad))
}

/// Differentiable transducer loss on a tape.
pub fn transducer_loss(tape: &mut Tape, logits: Var, tokens: &[usize]) -> Result<Var> {
    let (nll, grad) = transducer_nll(tape.value(logits), tokens)?;
    tape.scalar_fused(logits, nll, grad)
}

/// Posterior probability that an alignment passes through each lattice node
/// `(t, u)`, row-major `[T, U+1]`.
pub fn lattice_occupancy(logits: &Tensor, tokens: &[usize]) -> Result<Vec<f64>> {
    let lat = Lattice::new(logits, tokens)?;
    Ok(lat
        .alpha
        .iter()
        .zip(&lat.beta)
        .map(|(a, b)| (a + b - lat.log_p).exp())
        .collect())
}

/// Reference likelihood by explicit enumeration of every interleaving of
/// `T` blanks and `U` tokens; only interleavings ending in a blank are
/// complete alignments. Returns `(nll, number_of_complete_alignments)`.
pub fn brute_force_transducer(logits: &Tensor, tokens: &[usize]) -> Result<(f64, usize)> {
    let (t_len, u_len, v1) = check_lattice(logits, tokens)?;
    if t_len + u_len > BRUTE_FORCE_MAX_LEN {
        return Err(Error::InvalidArgument(format!(
            "T + U = {} exceeds enumeration bound {BRUTE_FORCE_MAX_LEN}",
            t_len + u_len
        )));
    }
    let u1 = u_len + 1;
    let lp = log_softmax_rows(logits);
    let total = t_len + u_len;
    let mut prob = 0.0;
    let mut count = 0;
    // Bit i set means step i emits a token.
    for bits in 0u32..(1 << total) {
        if bits.count_ones() as usize != u_len {
            continue;
        }
        if bits & (1 << (total - 1)) != 0 {
            continue;
        }
        let (mut t, mut u, mut logp) = (0, 0, 0.0);
        for step in 0..total {
            let base = (t * u1 + u) * v1;
            if bits & (1 << step) != 0 {
                logp += lp[base + tokens[u]];
                u += 1;
            } else {
                logp += lp[base + BLANK];
                t += 1;
            }
        }
        prob += logp.exp();
        count += 1;
    }
    Ok((-prob.ln(), count))
}

/// Predictor and joint network. Parameters live under `prefix`.
#[derive(Debug, Clone, PartialEq)]
pub struct TransducerHead {
    pub vocab: usize,
    pub enc_dim: usize,
    pub pred_dim: usize,
    pub joint_dim: usize,
    pub prefix: String,
}

impl TransducerHead {
    pub fn new(vocab: usize, enc_dim: usize, pred_dim: usize, joint_dim: usize, prefix: impl Into<String>) -> Self {
        Self {
            vocab,
            enc_dim,
            pred_dim,
            joint_dim,
            prefix: prefix.into(),
        }
    }

    fn lstm(&self) -> LstmSpec {
        LstmSpec {
            input_dim: self.pred_dim,
            hidden_dim: self.pred_dim,
        }
    }

    fn name(&self, part: &str) -> String {
        format!("{}.{part}", self.prefix)
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) {
        // Row 0 of the embedding is the learned start-of-sequence input.
        store.insert(self.name("embed"), Tensor::randn(&[self.vocab + 1, self.pred_dim], 0.5, rng));
        self.lstm().init(store, &self.name("lstm"), rng);
        store.init_weight(&self.name("enc.w"), self.enc_dim, self.joint_dim, rng);
        store.init_const(&self.name("enc.b"), &[self.joint_dim], 0.0);
        store.init_weight(&self.name("pred.w"), self.pred_dim, self.joint_dim, rng);
        store.init_weight(&self.name("out.w"), self.joint_dim, self.vocab + 1, rng);
        store.init_const(&self.name("out.b"), &[self.vocab + 1], 0.0);
    }

    /// Predictor outputs for `[start, y_1, .., y_U]`, shape `[U+1, P]`.
    pub fn predictor(&self, tape: &mut Tape, params: &Binding, tokens: &[usize]) -> Result<Var> {
        let mut inputs = Vec::with_capacity(tokens.len() + 1);
        inputs.push(BLANK);
        inputs.extend_from_slice(tokens);
        let emb = tape.index_rows(params.var(&self.name("embed"))?, &inputs)?;
        let prefix = self.name("lstm");
        let spec = self.lstm();
        let xw = lstm_project(tape, params, &prefix, emb)?;
        let mut state = lstm_zero_state(tape, &spec);
        let mut outs = Vec::with_capacity(inputs.len());
        for i in 0..inputs.len() {
            let row = tape.slice_rows(xw, i, 1)?;
            state = lstm_step(tape, params, &prefix, &spec, row, state)?;
            outs.push(state.h);
        }
        tape.concat_rows(&outs)
    }

    /// Joint logits `[T, U+1, V+1]` for encoder output `enc: [T, D]`.
    pub fn joint(&self, tape: &mut Tape, params: &Binding, enc: Var, tokens: &[usize]) -> Result<Var> {
        let t_len = tape.shape(enc)[0];
        let pred = self.predictor(tape, params, tokens)?;
        let e = tape.linear(enc, params.var(&self.name("enc.w"))?, Some(params.var(&self.name("enc.b"))?))?;
        let p = tape.matmul(pred, params.var(&self.name("pred.w"))?)?;
        let z = tape.outer_add_rows(e, p)?;
        let z = tape.tanh(z);
        let logits = tape.linear(z, params.var(&self.name("out.w"))?, Some(params.var(&self.name("out.b"))?))?;
        tape.reshape(logits, &[t_len, tokens.len() + 1, self.vocab + 1])
    }

    /// Frame-synchronous greedy search: at each frame emit argmax symbols
    /// until blank or `max_symbols_per_frame` tokens, then advance.
    pub fn greedy_decode(
        &self,
        tape: &mut Tape,
        params: &Binding,
        enc: Var,
        max_symbols_per_frame: usize,
    ) -> Result<Vec<usize>> {
        let max_symbols = max_symbols_per_frame.max(1);
        let t_len = tape.shape(enc)[0];
        let e = tape.linear(enc, params.var(&self.name("enc.w"))?, Some(params.var(&self.name("enc.b"))?))?;
        let prefix = self.name("lstm");
        let spec = self.lstm();
        let embed = params.var(&self.name("embed"))?;
        let step = |tape: &mut Tape, token: usize, state: LstmState| -> Result<LstmState> {
            let x = tape.index_rows(embed, &[token])?;
            let xw = lstm_project(tape, params, &prefix, x)?;
            lstm_step(tape, params, &prefix, &spec, xw, state)
        };
        let zero = lstm_zero_state(tape, &spec);
        let mut state = step(tape, BLANK, zero)?;
        let mut hyp = vec![];
        for t in 0..t_len {
            let et = tape.slice_rows(e, t, 1)?;
            for _ in 0..max_symbols {
                let p = tape.matmul(state.h, params.var(&self.name("pred.w"))?)?;
                let z = tape.add(et, p)?;
                let z = tape.tanh(z);
                let logits = tape.linear(z, params.var(&self.name("out.w"))?, Some(params.var(&self.name("out.b"))?))?;
                let best = argmax(tape.value(logits).data());
                if best == BLANK {
                    break;
                }
                hyp.push(best);
                state = step(tape, best, state)?;
            }
        }
        Ok(hyp)
    }
}

/// Greedy decoding over precomputed lattice-free logits: `logits_fn(t, u)`
/// returns the symbol scores at frame `t` after `u` emitted tokens.
pub fn greedy_from_fn(
    frames: usize,
    max_symbols_per_frame: usize,
    mut logits_fn: impl FnMut(usize, &[usize]) -> Vec<f64>,
) -> Vec<usize> {
    let mut hyp = vec![];
    for t in 0..frames {
        for _ in 0..max_symbols_per_frame.max(1) {
            let best = argmax(&logits_fn(t, &hyp));
            if best == BLANK {
                break;
            }
            hyp.push(best);
        }
    }
    hyp
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}
