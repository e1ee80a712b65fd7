//! Toy data, teacher pretraining, student distillation, and evaluation.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::aux_branch::AuxBranch;
use crate::distill::{
    apc_loss, dis_loss, kld_loss, relation_distributions, LossWeights, RelationTensors,
};
use crate::encoder::{AttentionMode, Encoder, EncoderConfig, TapPlan};
use crate::error::{Error, Result};
use crate::mask::AttentionMask;
use crate::params::{Adam, Binding, Gradients, ParamStore};
use crate::rng::{RngState, Stream};
use crate::tensor::Tensor;
use crate::transducer::{transducer_loss, TransducerHead};

// ---- toy task -------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct ToyTaskSpec {
    pub vocab: usize,
    /// Frames per token; every utterance has `T = span * U`.
    pub span: usize,
    pub input_dim: usize,
    pub noise_std: f64,
    pub min_tokens: usize,
    pub max_tokens: usize,
    /// Allowed successors per token; 0 draws every token independently.
    pub successors: usize,
}

impl Default for ToyTaskSpec {
    fn default() -> Self {
        Self {
            vocab: 6,
            span: 4,
            input_dim: 8,
            noise_std: 0.1,
            min_tokens: 2,
            max_tokens: 6,
            successors: 0,
        }
    }
}

impl ToyTaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.vocab == 0 || self.span == 0 || self.input_dim == 0 {
            return Err(Error::InvalidArgument("toy task extents must be positive".into()));
        }
        if self.min_tokens == 0 || self.min_tokens > self.max_tokens {
            return Err(Error::InvalidArgument(format!(
                "token range [{}, {}] is empty or allows empty utterances",
                self.min_tokens, self.max_tokens
            )));
        }
        if self.successors > self.vocab {
            return Err(Error::InvalidArgument("more successors than tokens".into()));
        }
        if self.noise_std < 0.0 {
            return Err(Error::InvalidArgument("noise_std must be nonnegative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Utterance {
    /// `[T, input_dim]` row-major.
    pub features: Vec<f64>,
    pub frames: usize,
    /// Present iff the utterance is labeled. Tokens are `1..=vocab`.
    pub tokens: Option<Vec<usize>>,
}

impl Utterance {
    pub fn feature_tensor(&self) -> Tensor {
        let d = self.features.len() / self.frames;
        Tensor::new(&[self.frames, d], self.features.clone()).expect("utterance shape")
    }

    pub fn is_labeled(&self) -> bool {
        self.tokens.is_some()
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Dataset {
    pub labeled: Vec<Utterance>,
    pub unlabeled: Vec<Utterance>,
}

impl Dataset {
    pub fn is_empty(&self) -> bool {
        self.labeled.is_empty() && self.unlabeled.is_empty()
    }

    pub fn len(&self) -> usize {
        self.labeled.len() + self.unlabeled.len()
    }
}

/// Per-token base vectors; frames are the base vector of their token plus
/// Gaussian noise.
#[derive(Debug, Clone)]
pub struct ToyTask {
    spec: ToyTaskSpec,
    bases: Vec<Vec<f64>>,
    /// `follow[y - 1]` lists the tokens allowed after `y`.
    follow: Vec<Vec<usize>>,
}

impl ToyTask {
    pub fn new(spec: &ToyTaskSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = RngState::new(seed).substream(Stream::Data, 0);
        let bases = (0..spec.vocab)
            .map(|_| (0..spec.input_dim).map(|_| rng.sample(StandardNormal)).collect())
            .collect();
        let follow = (0..spec.vocab)
            .map(|_| {
                let mut all: Vec<usize> = (1..=spec.vocab).collect();
                all.shuffle(&mut rng);
                all.truncate(spec.successors);
                all
            })
            .collect();
        Ok(Self {
            spec: spec.clone(),
            bases,
            follow,
        })
    }

    pub fn spec(&self) -> &ToyTaskSpec {
        &self.spec
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R, labeled: bool) -> Utterance {
        let s = &self.spec;
        let u = rng.gen_range(s.min_tokens..=s.max_tokens);
        let mut tokens: Vec<usize> = Vec::with_capacity(u);
        for _ in 0..u {
            let next = match tokens.last() {
                Some(&prev) if s.successors > 0 => *self.follow[prev - 1].choose(rng).unwrap(),
                _ => rng.gen_range(1..=s.vocab),
            };
            tokens.push(next);
        }
        let frames = u * s.span;
        let mut features = Vec::with_capacity(frames * s.input_dim);
        for &y in &tokens {
            for _ in 0..s.span {
                for &b in &self.bases[y - 1] {
                    let z: f64 = rng.sample(StandardNormal);
                    features.push(b + s.noise_std * z);
                }
            }
        }
        Utterance {
            features,
            frames,
            tokens: labeled.then_some(tokens),
        }
    }

    fn draw(&self, seed: u64, substream: u64, n: usize, labeled: bool) -> Vec<Utterance> {
        let mut rng = RngState::new(seed).substream(Stream::Data, substream);
        (0..n).map(|_| self.sample(&mut rng, labeled)).collect()
    }
}

/// Training set: `n_labeled` utterances with tokens and `n_unlabeled`
/// feature-only utterances. Deterministic in `seed`.
pub fn make_toy_dataset(spec: &ToyTaskSpec, n_labeled: usize, n_unlabeled: usize, seed: u64) -> Result<Dataset> {
    let task = ToyTask::new(spec, seed)?;
    Ok(Dataset {
        labeled: task.draw(seed, 1, n_labeled, true),
        unlabeled: task.draw(seed, 2, n_unlabeled, false),
    })
}

/// Held-out labeled utterances from the same task as
/// [`make_toy_dataset`] with the same seed.
pub fn make_eval_set(spec: &ToyTaskSpec, n: usize, seed: u64) -> Result<Vec<Utterance>> {
    Ok(ToyTask::new(spec, seed)?.draw(seed, 3, n, true))
}

// ---- configuration --------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub teacher: EncoderConfig,
    pub student: EncoderConfig,
    pub taps: TapPlan,
    pub vocab: usize,
    pub pred_dim: usize,
    pub joint_dim: usize,
    pub aux_ffn_dim: usize,
}

impl ModelConfig {
    pub fn desk(task: &ToyTaskSpec) -> Self {
        Self {
            teacher: EncoderConfig::teacher(task.input_dim),
            student: EncoderConfig::student(task.input_dim),
            taps: TapPlan::uniform(4),
            vocab: task.vocab,
            pred_dim: 16,
            joint_dim: 32,
            aux_ffn_dim: 64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.teacher.validate()?;
        self.student.validate()?;
        TapPlan::new(self.taps.pairs().to_vec(), self.teacher.num_layers, self.student.num_layers)?;
        Ok(())
    }

    pub fn teacher_model(&self) -> Result<AsrModel> {
        AsrModel::new(self.teacher.clone(), "teacher", self)
    }

    pub fn student_model(&self) -> Result<AsrModel> {
        AsrModel::new(self.student.clone(), "student", self)
    }

    pub fn branches(&self, gap: usize) -> Result<Vec<AuxBranch>> {
        (0..self.taps.len())
            .map(|i| {
                AuxBranch::new(
                    i,
                    self.student.dim,
                    self.teacher.dim,
                    self.teacher.heads,
                    self.aux_ffn_dim,
                    gap,
                )
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub teacher_steps: usize,
    pub student_steps: usize,
    pub weights: LossWeights,
    /// APC target distance and future-gap width.
    pub gap: usize,
    /// Labeled : unlabeled batches per epoch.
    pub mix: (usize, usize),
    pub max_symbols: usize,
    pub grad_clip: f64,
    /// Weight of the output-posterior KLD baseline term.
    pub prob_weight: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            batch_size: 8,
            teacher_steps: 2000,
            student_steps: 4000,
            weights: LossWeights::default(),
            gap: 4,
            mix: (1, 1),
            max_symbols: 4,
            grad_clip: 5.0,
            prob_weight: 0.5,
        }
    }
}

/// Which distillation losses are active on the auxiliary branches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct LossSet {
    pub dis: bool,
    pub kld: bool,
    pub apc: bool,
}

impl LossSet {
    pub const ALL: LossSet = LossSet {
        dis: true,
        kld: true,
        apc: true,
    };

    pub fn is_empty(&self) -> bool {
        !(self.dis || self.kld || self.apc)
    }
}

impl fmt::Display for LossSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<&str> = [(self.dis, "dis"), (self.kld, "kld"), (self.apc, "apc")]
            .iter()
            .filter(|(on, _)| *on)
            .map(|(_, n)| *n)
            .collect();
        if parts.is_empty() {
            write!(f, "none")
        } else {
            write!(f, "{}", parts.join("+"))
        }
    }
}

impl FromStr for LossSet {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut set = LossSet {
            dis: false,
            kld: false,
            apc: false,
        };
        for part in s.split('+').map(str::trim) {
            match part {
                "dis" => set.dis = true,
                "kld" => set.kld = true,
                "apc" => set.apc = true,
                "none" | "" => {}
                other => return Err(Error::Config(format!("unknown loss {other:?}"))),
            }
        }
        Ok(set)
    }
}

/// Student training recipe.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum StudentMode {
    /// Transducer loss only.
    Scratch,
    /// Frame-wise KLD between teacher and student joint posteriors.
    ProbKld,
    /// DIS between teacher taps and projected streaming student taps.
    LayerDirect,
    /// Auxiliary branches with the given losses.
    Aux(LossSet),
}

impl StudentMode {
    fn uses_branches(&self) -> bool {
        matches!(self, StudentMode::Aux(_) | StudentMode::LayerDirect)
    }

    fn uses_unlabeled(&self) -> bool {
        matches!(self, StudentMode::Aux(_) | StudentMode::LayerDirect)
    }
}

impl fmt::Display for StudentMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            StudentMode::Scratch => write!(f, "scratch"),
            StudentMode::ProbKld => write!(f, "prob_kld"),
            StudentMode::LayerDirect => write!(f, "layer_direct"),
            StudentMode::Aux(set) => write!(f, "aux:{set}"),
        }
    }
}

impl FromStr for StudentMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "scratch" => Ok(StudentMode::Scratch),
            "prob_kld" => Ok(StudentMode::ProbKld),
            "layer_direct" => Ok(StudentMode::LayerDirect),
            other => {
                let set = other.strip_prefix("aux:").unwrap_or(other);
                Ok(StudentMode::Aux(set.parse()?))
            }
        }
    }
}

// ---- models ---------------------------------------------------------------

/// Encoder plus transducer head sharing one parameter prefix.
#[derive(Debug, Clone, PartialEq)]
pub struct AsrModel {
    pub encoder: Encoder,
    pub head: TransducerHead,
}

impl AsrModel {
    fn new(cfg: EncoderConfig, prefix: &str, model: &ModelConfig) -> Result<Self> {
        let head = TransducerHead::new(model.vocab, cfg.dim, model.pred_dim, model.joint_dim, format!("{prefix}.head"));
        Ok(Self {
            encoder: Encoder::new(cfg, prefix)?,
            head,
        })
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) {
        self.encoder.init(store, rng);
        self.head.init(store, rng);
    }

    pub fn prefix(&self) -> &str {
        &self.encoder.prefix
    }

    /// Same model with a different attention mode.
    pub fn with_mode(&self, mode: AttentionMode) -> Result<Self> {
        let mut cfg = self.encoder.cfg.clone();
        cfg.mode = mode;
        Ok(Self {
            encoder: Encoder::new(cfg, self.encoder.prefix.clone())?,
            head: self.head.clone(),
        })
    }

    pub fn transcribe(&self, params: &ParamStore, utt: &Utterance, max_symbols: usize) -> Result<Vec<usize>> {
        let mut tape = Tape::new();
        let binding = params.bind(&mut tape, false);
        let x = tape.constant(utt.feature_tensor());
        let taps = self.encoder.forward(&mut tape, &binding, x)?;
        let enc = taps.last().unwrap().features;
        self.head.greedy_decode(&mut tape, &binding, enc, max_symbols)
    }
}

// ---- metrics --------------------------------------------------------------

/// Per-step loss components. `loss_asr` is `None` for unlabeled-only
/// batches and for recipes without a transducer term.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub step: usize,
    pub loss_total: f64,
    pub loss_asr: Option<f64>,
    pub loss_dis: f64,
    pub loss_kld: f64,
    pub loss_apc: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub loss_prob: Option<f64>,
    pub n_labeled: usize,
    pub n_unlabeled: usize,
    pub wall_ms: f64,
}

impl LossBreakdown {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("metrics serialize")
    }
}

pub fn metrics_jsonl(metrics: &[LossBreakdown]) -> String {
    metrics.iter().map(|m| m.to_json() + "\n").collect()
}

// ---- batching -------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Batch {
    Labeled(Vec<usize>),
    Unlabeled(Vec<usize>),
}

/// Deterministic epoch layout: shuffled labeled batches interleaved with
/// unlabeled batches at the configured ratio.
#[derive(Debug, Clone)]
pub struct Schedule {
    n_labeled: usize,
    n_unlabeled: usize,
    batch: usize,
    mix: (usize, usize),
    rng: RngState,
}

impl Schedule {
    pub fn new(n_labeled: usize, n_unlabeled: usize, batch: usize, mix: (usize, usize), seed: u64) -> Result<Self> {
        if batch == 0 {
            return Err(Error::InvalidArgument("batch size must be at least 1".into()));
        }
        if n_labeled + n_unlabeled == 0 {
            return Err(Error::InvalidArgument("nothing to train on".into()));
        }
        if n_labeled > 0 && mix.0 == 0 {
            return Err(Error::InvalidArgument("labeled mix weight must be positive".into()));
        }
        Ok(Self {
            n_labeled,
            n_unlabeled,
            batch,
            mix,
            rng: RngState::new(seed),
        })
    }

    pub fn batch_counts(&self) -> (usize, usize) {
        let nl = self.n_labeled.div_ceil(self.batch);
        let nu = if self.n_unlabeled == 0 || self.mix.1 == 0 {
            0
        } else if nl == 0 {
            self.n_unlabeled.div_ceil(self.batch)
        } else {
            ((nl * self.mix.1) as f64 / self.mix.0 as f64).round().max(1.0) as usize
        };
        (nl, nu)
    }

    pub fn epoch_len(&self) -> usize {
        let (a, b) = self.batch_counts();
        a + b
    }

    pub fn epoch(&self, epoch: usize) -> Vec<Batch> {
        let mut rng = self.rng.substream(Stream::Shuffle, epoch as u64);
        let (nl, nu) = self.batch_counts();
        let mut lab: Vec<usize> = (0..self.n_labeled).collect();
        lab.shuffle(&mut rng);
        let mut lab_batches = lab.chunks(self.batch).map(<[usize]>::to_vec);
        let mut pool = vec![];
        while pool.len() < nu * self.batch && self.n_unlabeled > 0 {
            let mut perm: Vec<usize> = (0..self.n_unlabeled).collect();
            perm.shuffle(&mut rng);
            pool.extend(perm);
        }
        let mut unl_batches = pool.chunks(self.batch).take(nu).map(<[usize]>::to_vec);
        let total = nl + nu;
        let mut out = Vec::with_capacity(total);
        let mut placed_l = 0;
        for i in 0..total {
            if placed_l < ((i + 1) * nl) / total {
                out.push(Batch::Labeled(lab_batches.next().unwrap()));
                placed_l += 1;
            } else {
                out.push(Batch::Unlabeled(unl_batches.next().unwrap()));
            }
        }
        out
    }

    pub fn batch_at(&self, step: usize) -> Batch {
        let len = self.epoch_len();
        self.epoch(step / len).swap_remove(step % len)
    }
}

// ---- optimization plumbing -----------------------------------------------

#[derive(Debug, Clone)]
struct Optim {
    params: ParamStore,
    grads: Gradients,
    adam: Adam,
    clip: f64,
}

impl Optim {
    fn new(params: ParamStore, lr: f64, clip: f64) -> Self {
        let grads = Gradients::for_store(&params);
        Self {
            params,
            grads,
            adam: Adam::new(lr),
            clip,
        }
    }

    fn apply(&mut self, tape: &Tape, binding: &Binding) {
        self.grads.zero();
        self.grads.accumulate(tape, binding);
        let norm = self.grads.global_norm();
        if self.clip > 0.0 && norm > self.clip {
            self.grads.scale(self.clip / norm);
        }
        self.adam.update(&mut self.params, &self.grads);
    }

    fn checkpoint(&self) -> ParamStore {
        let mut out = self.params.clone();
        for (k, v) in self.adam.state().iter() {
            out.insert(format!("opt.{k}"), v.clone());
        }
        out
    }

    fn restore(&mut self, store: &ParamStore) -> Result<()> {
        let mut params = ParamStore::new();
        let mut opt = ParamStore::new();
        for (k, v) in store.iter() {
            if let Some(rest) = k.strip_prefix("opt.") {
                opt.insert(rest, v.clone());
            } else {
                params.insert(k.clone(), v.clone());
            }
        }
        for name in self.params.names() {
            if params.get(name).is_none() {
                return Err(Error::Checkpoint(format!("missing tensor {name}")));
            }
        }
        self.grads = Gradients::for_store(&params);
        self.params = params;
        self.adam.load_state(&opt)
    }
}

fn check_finite(step: usize, loss: f64) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::Divergence { step, loss })
    }
}

fn mean_of(tape: &mut Tape, terms: &[Var], n: usize) -> Option<Var> {
    let (&first, rest) = terms.split_first()?;
    let mut acc = first;
    for &t in rest {
        acc = tape.add(acc, t).expect("scalar add");
    }
    Some(tape.scale(acc, 1.0 / n as f64))
}

// ---- teacher --------------------------------------------------------------

/// Supervised transducer training of the full-context teacher.
#[derive(Debug, Clone)]
pub struct TeacherTrainer {
    pub model: AsrModel,
    data: Vec<Utterance>,
    schedule: Schedule,
    optim: Optim,
    step: usize,
}

impl TeacherTrainer {
    pub fn new(model_cfg: &ModelConfig, cfg: &TrainConfig, data: &Dataset, seed: u64) -> Result<Self> {
        model_cfg.validate()?;
        if data.labeled.is_empty() {
            return Err(Error::InvalidArgument("teacher training needs labeled data".into()));
        }
        let model = model_cfg.teacher_model()?;
        let mut params = ParamStore::new();
        model.init(&mut params, &mut RngState::new(seed).stream(Stream::TeacherInit));
        Ok(Self {
            model,
            data: data.labeled.clone(),
            schedule: Schedule::new(data.labeled.len(), 0, cfg.batch_size, (1, 0), seed)?,
            optim: Optim::new(params, cfg.lr, cfg.grad_clip),
            step: 0,
        })
    }

    pub fn params(&self) -> &ParamStore {
        &self.optim.params
    }

    pub fn step_index(&self) -> usize {
        self.step
    }

    pub fn step(&mut self) -> Result<LossBreakdown> {
        let started = Instant::now();
        let Batch::Labeled(items) = self.schedule.batch_at(self.step) else {
            unreachable!("teacher schedule is labeled-only")
        };
        let mut tape = Tape::new();
        let binding = self.optim.params.bind(&mut tape, true);
        let mut losses = Vec::with_capacity(items.len());
        for &i in &items {
            let utt = &self.data[i];
            let x = tape.constant(utt.feature_tensor());
            let taps = self.model.encoder.forward(&mut tape, &binding, x)?;
            let tokens = utt.tokens.as_deref().unwrap();
            let logits = self.model.head.joint(&mut tape, &binding, taps.last().unwrap().features, tokens)?;
            losses.push(transducer_loss(&mut tape, logits, tokens)?);
        }
        let root = mean_of(&mut tape, &losses, items.len()).unwrap();
        let loss = tape.value(root).item();
        check_finite(self.step, loss)?;
        tape.backward(root)?;
        self.optim.apply(&tape, &binding);
        self.step += 1;
        Ok(LossBreakdown {
            step: self.step,
            loss_total: loss,
            loss_asr: Some(loss),
            loss_dis: 0.0,
            loss_kld: 0.0,
            loss_apc: 0.0,
            loss_prob: None,
            n_labeled: items.len(),
            n_unlabeled: 0,
            wall_ms: started.elapsed().as_secs_f64() * 1e3,
        })
    }

    pub fn run(&mut self, steps: usize) -> Result<Vec<LossBreakdown>> {
        (0..steps).map(|_| self.step()).collect()
    }

    /// Model parameters plus optimizer state.
    pub fn checkpoint(&self) -> ParamStore {
        self.optim.checkpoint()
    }

    pub fn restore(&mut self, store: &ParamStore) -> Result<()> {
        self.optim.restore(store)?;
        self.step = self.optim.adam.step as usize;
        Ok(())
    }
}

/// Trains a teacher for `cfg.teacher_steps` and returns its parameters
/// (without optimizer state) and the metric stream.
pub fn train_teacher(
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    data: &Dataset,
    seed: u64,
) -> Result<(ParamStore, Vec<LossBreakdown>)> {
    let mut trainer = TeacherTrainer::new(model_cfg, cfg, data, seed)?;
    let metrics = trainer.run(cfg.teacher_steps)?;
    Ok((trainer.params().clone(), metrics))
}

// ---- student --------------------------------------------------------------

/// Frozen-teacher outputs for one training utterance.
#[derive(Debug, Clone)]
struct TeacherTargets {
    /// Teacher tap features, one per tap pair.
    taps: Vec<Tensor>,
    /// Relation distributions under the future-gap support, one per tap pair.
    relations: Vec<RelationTensors>,
    /// Joint posteriors `[T * (U+1), V+1]` for labeled utterances.
    posteriors: Option<Tensor>,
}

fn teacher_targets(
    teacher: &AsrModel,
    params: &ParamStore,
    taps_plan: &TapPlan,
    utt: &Utterance,
    gap: usize,
    want_posteriors: bool,
) -> Result<TeacherTargets> {
    let mut tape = Tape::new();
    let binding = params.bind(&mut tape, false);
    let x = tape.constant(utt.feature_tensor());
    let taps = teacher.encoder.forward(&mut tape, &binding, x)?;
    let support = AttentionMask::future_gap(utt.frames, gap)?;
    let mut features = vec![];
    let mut relations = vec![];
    for &(t_layer, _) in taps_plan.pairs() {
        let tap = &taps[t_layer - 1];
        features.push(tape.value(tap.features).clone());
        let rel = relation_distributions(&mut tape, tap, &support)?;
        relations.push(rel.to_tensors(&tape));
    }
    let posteriors = match (&utt.tokens, want_posteriors) {
        (Some(tokens), true) => {
            let logits = teacher.head.joint(&mut tape, &binding, taps.last().unwrap().features, tokens)?;
            let v1 = tape.shape(logits)[2];
            let rows = tape.value(logits).numel() / v1;
            let flat = tape.reshape(logits, &[rows, v1])?;
            let post = tape.softmax(flat);
            Some(tape.value(post).clone())
        }
        _ => None,
    };
    Ok(TeacherTargets {
        taps: features,
        relations,
        posteriors,
    })
}

/// Streaming student trained against a frozen teacher.
#[derive(Debug, Clone)]
pub struct StudentTrainer {
    pub model: AsrModel,
    pub mode: StudentMode,
    branches: Vec<AuxBranch>,
    taps: TapPlan,
    cfg: TrainConfig,
    data: Dataset,
    targets_labeled: Vec<TeacherTargets>,
    targets_unlabeled: Vec<TeacherTargets>,
    schedule: Schedule,
    optim: Optim,
    step: usize,
}

impl StudentTrainer {
    /// `warm_start`, when given, replaces the initial student (and branch)
    /// parameters by name.
    pub fn new(
        teacher_params: &ParamStore,
        model_cfg: &ModelConfig,
        cfg: &TrainConfig,
        mode: StudentMode,
        data: &Dataset,
        seed: u64,
        warm_start: Option<&ParamStore>,
    ) -> Result<Self> {
        model_cfg.validate()?;
        cfg.weights.validate()?;
        if teacher_params.is_empty() {
            return Err(Error::InvalidArgument("teacher checkpoint is empty".into()));
        }
        if let StudentMode::Aux(set) = mode {
            if set.is_empty() && data.labeled.is_empty() {
                return Err(Error::InvalidArgument(
                    "no distillation loss enabled and no labeled data".into(),
                ));
            }
        }
        let teacher = model_cfg.teacher_model()?;
        let model = model_cfg.student_model()?;
        let branches = model_cfg.branches(cfg.gap)?;
        let mut params = ParamStore::new();
        model.init(&mut params, &mut RngState::new(seed).stream(Stream::StudentInit));
        if mode.uses_branches() {
            let mut rng = RngState::new(seed).stream(Stream::AuxInit);
            for b in &branches {
                b.init(&mut params, &mut rng);
            }
        }
        if let Some(init) = warm_start {
            for (k, v) in init.iter() {
                if let Some(slot) = params.get_mut(k) {
                    if slot.shape() != v.shape() {
                        return Err(Error::Checkpoint(format!("warm start tensor {k} has wrong shape")));
                    }
                    *slot = v.clone();
                }
            }
        }

        let want_post = mode == StudentMode::ProbKld;
        let needs_teacher = mode != StudentMode::Scratch;
        let targets = |set: &[Utterance]| -> Result<Vec<TeacherTargets>> {
            if !needs_teacher {
                return Ok(vec![]);
            }
            set.iter()
                .map(|u| teacher_targets(&teacher, teacher_params, &model_cfg.taps, u, cfg.gap, want_post))
                .collect()
        };
        let targets_labeled = targets(&data.labeled)?;
        let unlabeled: &[Utterance] = if mode.uses_unlabeled() { &data.unlabeled } else { &[] };
        let targets_unlabeled = targets(unlabeled)?;
        let schedule = Schedule::new(data.labeled.len(), unlabeled.len(), cfg.batch_size, cfg.mix, seed)?;

        Ok(Self {
            model,
            mode,
            branches,
            taps: model_cfg.taps.clone(),
            cfg: cfg.clone(),
            data: Dataset {
                labeled: data.labeled.clone(),
                unlabeled: unlabeled.to_vec(),
            },
            targets_labeled,
            targets_unlabeled,
            schedule,
            optim: Optim::new(params, cfg.lr, cfg.grad_clip),
            step: 0,
        })
    }

    pub fn params(&self) -> &ParamStore {
        &self.optim.params
    }

    /// Student encoder and head only; what inference needs.
    pub fn inference_params(&self) -> ParamStore {
        self.optim.params.subset(&format!("{}.", self.model.prefix()))
    }

    pub fn step_index(&self) -> usize {
        self.step
    }

    pub fn schedule(&self) -> &Schedule {
        &self.schedule
    }

    pub fn step(&mut self) -> Result<LossBreakdown> {
        let started = Instant::now();
        let batch = self.schedule.batch_at(self.step);
        let (items, labeled) = match &batch {
            Batch::Labeled(v) => (v.clone(), true),
            Batch::Unlabeled(v) => (v.clone(), false),
        };
        let mut tape = Tape::new();
        let binding = self.optim.params.bind(&mut tape, true);
        let w = self.cfg.weights;
        let (mut asr, mut dis, mut kld, mut apc, mut prob) = (vec![], vec![], vec![], vec![], vec![]);

        for &i in &items {
            let (utt, targets) = if labeled {
                (&self.data.labeled[i], self.targets_labeled.get(i))
            } else {
                (&self.data.unlabeled[i], self.targets_unlabeled.get(i))
            };
            let x = tape.constant(utt.feature_tensor());
            let taps = self.model.encoder.forward(&mut tape, &binding, x)?;
            let enc = taps.last().unwrap().features;
            let mut logits = None;
            if let Some(tokens) = &utt.tokens {
                let l = self.model.head.joint(&mut tape, &binding, enc, tokens)?;
                asr.push(transducer_loss(&mut tape, l, tokens)?);
                logits = Some(l);
            }
            match self.mode {
                StudentMode::Scratch => {}
                StudentMode::ProbKld => {
                    if let (Some(l), Some(post)) = (logits, targets.and_then(|t| t.posteriors.as_ref())) {
                        let v1 = tape.shape(l)[2];
                        let rows = tape.value(l).numel() / v1;
                        let flat = tape.reshape(l, &[rows, v1])?;
                        let q = tape.softmax(flat);
                        let p = tape.constant(post.clone());
                        let kl = tape.kl_rows(p, q)?;
                        prob.push(kl);
                    }
                }
                StudentMode::LayerDirect => {
                    let targets = targets.unwrap();
                    for (k, &(_, s_layer)) in self.taps.pairs().iter().enumerate() {
                        let h = tape.constant(targets.taps[k].clone());
                        let z = self.branches[k].project(&mut tape, &binding, taps[s_layer - 1].features)?;
                        dis.push(dis_loss(&mut tape, h, z)?);
                    }
                }
                StudentMode::Aux(set) => {
                    let targets = targets.unwrap();
                    for (k, &(_, s_layer)) in self.taps.pairs().iter().enumerate() {
                        let out = self.branches[k].forward(&mut tape, &binding, taps[s_layer - 1].features)?;
                        let h = tape.constant(targets.taps[k].clone());
                        if set.dis {
                            dis.push(dis_loss(&mut tape, h, out.z)?);
                        }
                        if set.kld {
                            let teacher_rel = targets.relations[k].to_constants(&mut tape);
                            let student_rel =
                                relation_distributions(&mut tape, &out.relations, &teacher_rel.support)?;
                            kld.push(kld_loss(&mut tape, &teacher_rel, &student_rel)?);
                        }
                        // Utterances no longer than the gap have no APC target.
                        if set.apc && utt.frames > self.cfg.gap {
                            apc.push(apc_loss(&mut tape, h, out.r, self.cfg.gap)?);
                        }
                    }
                }
            }
        }

        let n_all = items.len();
        let n_lab = if labeled { items.len() } else { 0 };
        let asr_mean = mean_of(&mut tape, &asr, n_lab.max(1));
        let dis_mean = mean_of(&mut tape, &dis, n_all);
        let kld_mean = mean_of(&mut tape, &kld, n_all);
        let apc_mean = mean_of(&mut tape, &apc, n_all);
        let prob_mean = mean_of(&mut tape, &prob, n_lab.max(1));

        let mut root: Option<Var> = asr_mean;
        for (term, weight) in [(dis_mean, w.alpha), (kld_mean, w.beta), (apc_mean, w.gamma), (prob_mean, self.cfg.prob_weight)] {
            if let Some(t) = term {
                let scaled = tape.scale(t, weight);
                root = Some(match root {
                    None => scaled,
                    Some(r) => tape.add(r, scaled)?,
                });
            }
        }
        let value = |tape: &Tape, v: Option<Var>| v.map(|v| tape.value(v).item());
        let breakdown_base = (
            value(&tape, asr_mean),
            value(&tape, dis_mean).unwrap_or(0.0),
            value(&tape, kld_mean).unwrap_or(0.0),
            value(&tape, apc_mean).unwrap_or(0.0),
            value(&tape, prob_mean),
        );
        let total = match root {
            Some(r) => {
                let loss = tape.value(r).item();
                check_finite(self.step, loss)?;
                tape.backward(r)?;
                self.optim.apply(&tape, &binding);
                loss
            }
            // Nothing to learn from this batch (e.g. unlabeled data in a
            // recipe without distillation terms).
            None => 0.0,
        };
        self.step += 1;
        let (loss_asr, loss_dis, loss_kld, loss_apc, loss_prob) = breakdown_base;
        Ok(LossBreakdown {
            step: self.step,
            loss_total: total,
            loss_asr,
            loss_dis,
            loss_kld,
            loss_apc,
            loss_prob,
            n_labeled: n_lab,
            n_unlabeled: n_all - n_lab,
            wall_ms: started.elapsed().as_secs_f64() * 1e3,
        })
    }

    pub fn run(&mut self, steps: usize) -> Result<Vec<LossBreakdown>> {
        (0..steps).map(|_| self.step()).collect()
    }

    /// Student, branch and optimizer tensors; branches are kept for
    /// resumption but are not needed for inference.
    pub fn checkpoint(&self) -> ParamStore {
        self.optim.checkpoint()
    }

    pub fn restore(&mut self, store: &ParamStore) -> Result<()> {
        self.optim.restore(store)?;
        self.step = self.optim.adam.step as usize;
        Ok(())
    }
}

/// Runs distillation for `cfg.student_steps` and returns the trainer, which
/// holds the final parameters, plus the metric stream.
pub fn train_student_kd(
    teacher_params: &ParamStore,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    mode: StudentMode,
    data: &Dataset,
    seed: u64,
) -> Result<(StudentTrainer, Vec<LossBreakdown>)> {
    let mut trainer = StudentTrainer::new(teacher_params, model_cfg, cfg, mode, data, seed, None)?;
    let metrics = trainer.run(cfg.student_steps)?;
    Ok((trainer, metrics))
}

// ---- evaluation -----------------------------------------------------------

pub fn edit_distance(a: &[usize], b: &[usize]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtteranceReport {
    pub reference: Vec<usize>,
    pub hypothesis: Vec<usize>,
    pub edits: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Total edits over total reference tokens.
    pub token_error_rate: f64,
    pub utterances: Vec<UtteranceReport>,
}

/// Token error rate from precomputed hypotheses.
pub fn score(pairs: impl IntoIterator<Item = (Vec<usize>, Vec<usize>)>) -> Result<EvalReport> {
    let utterances: Vec<UtteranceReport> = pairs
        .into_iter()
        .map(|(reference, hypothesis)| UtteranceReport {
            edits: edit_distance(&reference, &hypothesis),
            reference,
            hypothesis,
        })
        .collect();
    if utterances.is_empty() {
        return Err(Error::InvalidArgument("empty evaluation set".into()));
    }
    let edits: usize = utterances.iter().map(|u| u.edits).sum();
    let refs: usize = utterances.iter().map(|u| u.reference.len()).sum();
    Ok(EvalReport {
        token_error_rate: edits as f64 / refs.max(1) as f64,
        utterances,
    })
}

/// Greedy-decodes every labeled utterance with `model` under `mode`.
pub fn evaluate(
    model: &AsrModel,
    params: &ParamStore,
    data: &[Utterance],
    mode: AttentionMode,
    max_symbols: usize,
) -> Result<EvalReport> {
    if data.is_empty() {
        return Err(Error::InvalidArgument("empty evaluation set".into()));
    }
    let model = model.with_mode(mode)?;
    let mut pairs = Vec::with_capacity(data.len());
    for utt in data {
        let reference = utt
            .tokens
            .clone()
            .ok_or_else(|| Error::InvalidArgument("evaluation needs labeled utterances".into()))?;
        pairs.push((reference, model.transcribe(params, utt, max_symbols)?));
    }
    score(pairs)
}
