//! Distillation losses: per-frame feature distance (DIS), query/key/value
//! self-relation divergence (KLD), future-frame prediction (APC), and their
//! weighted combination with the transducer loss.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::mask::AttentionMask;
use crate::nn::LayerTapOutput;
use crate::tensor::Tensor;

/// `-ln(sigmoid(1))`: the per-frame DIS/APC value for identical rows.
pub const IDENTICAL_FRAME_LOSS: f64 = 0.31326168751822286;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 0.01,
            beta: 0.0005,
            gamma: 0.005,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.alpha < 0.0 || self.beta < 0.0 || self.gamma < 0.0 {
            return Err(Error::InvalidArgument(format!("negative loss weight in {self:?}")));
        }
        Ok(())
    }
}

/// `sum_t [ |a_t - b_t|_1 / D - ln sigmoid(cos(a_t, b_t)) ]`
fn frame_distance(tape: &mut Tape, target: Var, pred: Var) -> Result<Var> {
    if tape.shape(target) != tape.shape(pred) || tape.shape(target).len() != 2 {
        return Err(Error::shape("frame distance", tape.shape(target), tape.shape(pred)));
    }
    let d = tape.shape(target)[1] as f64;
    let diff = tape.sub(target, pred)?;
    let l1 = tape.abs(diff);
    let l1 = tape.sum_axis(l1, 1)?;
    let l1 = tape.scale(l1, 1.0 / d);
    let cos = tape.cosine_rows(target, pred)?;
    let ls = tape.log_sigmoid(cos);
    let per_frame = tape.sub(l1, ls)?;
    Ok(tape.sum(per_frame))
}

/// Feature similarity loss between teacher features `h` and branch
/// features `z`, both `[T, D]`. Summed over frames.
pub fn dis_loss(tape: &mut Tape, h: Var, z: Var) -> Result<Var> {
    frame_distance(tape, h, z)
}

/// Future prediction loss: `r_t` is matched against `h_{t+N}` for
/// `t < T - N`; frames without a target are dropped.
pub fn apc_loss(tape: &mut Tape, h: Var, r: Var, gap: usize) -> Result<Var> {
    if tape.shape(h) != tape.shape(r) || tape.shape(h).len() != 2 {
        return Err(Error::shape("apc_loss", tape.shape(h), tape.shape(r)));
    }
    if gap == 0 {
        return Err(Error::InvalidArgument("APC gap must be at least 1".into()));
    }
    let len = tape.shape(h)[0];
    if len <= gap {
        return Err(Error::InvalidArgument(format!(
            "APC needs more than {gap} frames, got {len}"
        )));
    }
    let target = tape.slice_rows(h, gap, len - gap)?;
    let pred = tape.slice_rows(r, 0, len - gap)?;
    frame_distance(tape, target, pred)
}

/// Row-stochastic relation matrices `softmax_k(v_t . v_k / sqrt(d_A))`, one
/// per head, for each of the query, key and value streams. All rows share
/// one support mask.
#[derive(Debug, Clone)]
pub struct RelationSet {
    pub query: Vec<Var>,
    pub key: Vec<Var>,
    pub value: Vec<Var>,
    pub support: AttentionMask,
}

impl RelationSet {
    pub fn heads(&self) -> usize {
        self.query.len()
    }

    pub fn streams(&self) -> [&[Var]; 3] {
        [&self.query, &self.key, &self.value]
    }

    /// Snapshot of the relation values for use as constants on another tape.
    pub fn to_tensors(&self, tape: &Tape) -> RelationTensors {
        let grab = |vs: &[Var]| vs.iter().map(|&v| tape.value(v).clone()).collect();
        RelationTensors {
            query: grab(&self.query),
            key: grab(&self.key),
            value: grab(&self.value),
            support: self.support.clone(),
        }
    }
}

/// Detached copy of a [`RelationSet`].
#[derive(Debug, Clone, PartialEq)]
pub struct RelationTensors {
    pub query: Vec<Tensor>,
    pub key: Vec<Tensor>,
    pub value: Vec<Tensor>,
    pub support: AttentionMask,
}

impl RelationTensors {
    pub fn to_constants(&self, tape: &mut Tape) -> RelationSet {
        let mut put = |ts: &[Tensor]| ts.iter().map(|t| tape.constant(t.clone())).collect();
        RelationSet {
            query: put(&self.query),
            key: put(&self.key),
            value: put(&self.value),
            support: self.support.clone(),
        }
    }
}

fn relation_stream(tape: &mut Tape, heads: &[Var], support: &AttentionMask) -> Result<Vec<Var>> {
    heads
        .iter()
        .map(|&v| {
            let dh = tape.shape(v)[1] as f64;
            let scores = tape.matmul_nt(v, v)?;
            let scores = tape.scale(scores, 1.0 / dh.sqrt());
            tape.softmax_masked(scores, support)
        })
        .collect()
}

/// Relation distributions of a layer's per-head Q/K/V under `support`.
pub fn relation_distributions(
    tape: &mut Tape,
    qkv: &LayerTapOutput,
    support: &AttentionMask,
) -> Result<RelationSet> {
    if qkv.queries.len() != qkv.keys.len() || qkv.keys.len() != qkv.values.len() {
        return Err(Error::InvalidArgument("Q/K/V head counts differ".into()));
    }
    Ok(RelationSet {
        query: relation_stream(tape, &qkv.queries, support)?,
        key: relation_stream(tape, &qkv.keys, support)?,
        value: relation_stream(tape, &qkv.values, support)?,
        support: support.clone(),
    })
}

/// `(1/A) sum_a sum_t KL(R_teacher || R_student)`, summed over the query,
/// key and value streams.
pub fn kld_loss(tape: &mut Tape, teacher: &RelationSet, student: &RelationSet) -> Result<Var> {
    if teacher.heads() != student.heads() || teacher.heads() == 0 {
        return Err(Error::InvalidArgument(format!(
            "head count mismatch: teacher {} vs student {}",
            teacher.heads(),
            student.heads()
        )));
    }
    if teacher.support != student.support {
        return Err(Error::InvalidArgument("teacher and student relation supports differ".into()));
    }
    let mut total: Option<Var> = None;
    for (ts, ss) in teacher.streams().into_iter().zip(student.streams()) {
        for (&rt, &rs) in ts.iter().zip(ss) {
            let kl = tape.kl_rows(rt, rs)?;
            total = Some(match total {
                None => kl,
                Some(acc) => tape.add(acc, kl)?,
            });
        }
    }
    Ok(tape.scale(total.unwrap(), 1.0 / teacher.heads() as f64))
}

/// `asr + alpha * dis + beta * kld + gamma * apc`.
///
/// `asr` is the mean transducer loss over the `n_labeled` labeled items;
/// `dis`, `kld` and `apc` are means over all `n_labeled + n_unlabeled`
/// items, each already summed over tap pairs.
pub fn total_loss(
    asr: Option<f64>,
    dis: f64,
    kld: f64,
    apc: f64,
    w: &LossWeights,
    n_labeled: usize,
    n_unlabeled: usize,
) -> Result<f64> {
    w.validate()?;
    if asr.is_some() && n_labeled == 0 {
        return Err(Error::InvalidArgument("ASR term requested with no labeled items".into()));
    }
    if n_labeled + n_unlabeled == 0 {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    Ok(asr.unwrap_or(0.0) + w.alpha * dis + w.beta * kld + w.gamma * apc)
}
