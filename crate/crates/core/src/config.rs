//! Plain-text run configuration: `key = value` lines, `#` comments.
//!
//! Later assignments win, so `--set` overrides are applied after the file.

use std::fmt::Write as _;
use std::path::PathBuf;

use crate::distill::LossWeights;
use crate::encoder::{AttentionMode, EncoderConfig, TapPlan};
use crate::error::{Error, Result};
use crate::mask::AttentionMask;
use crate::trainer::{LossSet, ModelConfig, StudentMode, ToyTaskSpec, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskChoice {
    Full,
    Chunk,
    FutureGap,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    // toy task
    pub vocab: usize,
    pub span: usize,
    pub input_dim: usize,
    pub noise_std: f64,
    pub min_tokens: usize,
    pub max_tokens: usize,
    pub successors: usize,
    pub data_seed: u64,
    pub n_teacher: usize,
    pub n_labeled: usize,
    pub n_unlabeled: usize,
    pub n_eval: usize,
    // encoders
    pub teacher_layers: usize,
    pub teacher_dim: usize,
    pub teacher_heads: usize,
    pub teacher_ffn: usize,
    pub student_layers: usize,
    pub student_dim: usize,
    pub student_heads: usize,
    pub student_ffn: usize,
    pub chunk: usize,
    pub left_context: usize,
    pub right_context: usize,
    pub causal_conv: bool,
    pub conv_kernel: usize,
    pub taps: String,
    pub pred_dim: usize,
    pub joint_dim: usize,
    pub aux_ffn: usize,
    // training
    pub lr: f64,
    pub batch_size: usize,
    pub teacher_steps: usize,
    pub student_steps: usize,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub gap: usize,
    pub mix: (usize, usize),
    pub max_symbols: usize,
    pub grad_clip: f64,
    pub prob_weight: f64,
    // runs
    pub seed: u64,
    pub seeds: usize,
    pub mode: StudentMode,
    /// Recipes compared by an ablation run.
    pub losses: Vec<StudentMode>,
    pub teacher: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub warm_start: Option<PathBuf>,
    pub eval_streaming: bool,
    // mask inspection
    pub mask_len: usize,
    pub mask_kind: MaskChoice,
}

impl Default for RunConfig {
    fn default() -> Self {
        let task = ToyTaskSpec::default();
        let model = ModelConfig::desk(&task);
        let train = TrainConfig::default();
        let AttentionMode::Streaming { chunk, left_context } = model.student.mode else {
            unreachable!()
        };
        Self {
            vocab: task.vocab,
            span: task.span,
            input_dim: task.input_dim,
            noise_std: task.noise_std,
            min_tokens: task.min_tokens,
            max_tokens: task.max_tokens,
            successors: task.successors,
            data_seed: 7,
            n_teacher: 256,
            n_labeled: 16,
            n_unlabeled: 256,
            n_eval: 64,
            teacher_layers: model.teacher.num_layers,
            teacher_dim: model.teacher.dim,
            teacher_heads: model.teacher.heads,
            teacher_ffn: model.teacher.ffn_dim,
            student_layers: model.student.num_layers,
            student_dim: model.student.dim,
            student_heads: model.student.heads,
            student_ffn: model.student.ffn_dim,
            chunk,
            left_context,
            right_context: 0,
            causal_conv: model.student.causal_conv,
            conv_kernel: model.student.conv_kernel,
            taps: model.taps.to_text(),
            pred_dim: model.pred_dim,
            joint_dim: model.joint_dim,
            aux_ffn: model.aux_ffn_dim,
            lr: train.lr,
            batch_size: train.batch_size,
            teacher_steps: train.teacher_steps,
            student_steps: train.student_steps,
            alpha: train.weights.alpha,
            beta: train.weights.beta,
            gamma: train.weights.gamma,
            gap: train.gap,
            mix: train.mix,
            max_symbols: train.max_symbols,
            grad_clip: train.grad_clip,
            prob_weight: train.prob_weight,
            seed: 0,
            seeds: 5,
            mode: StudentMode::Aux(LossSet::ALL),
            losses: ["dis", "dis+kld", "dis+kld+apc"]
                .iter()
                .map(|s| s.parse().unwrap())
                .collect(),
            teacher: None,
            checkpoint: None,
            warm_start: None,
            eval_streaming: true,
            mask_len: 6,
            mask_kind: MaskChoice::Chunk,
        }
    }
}

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("bad value {v:?} for key {key}")))
}

fn flag(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("bad value {v:?} for key {key}"))),
    }
}

fn path(v: &str) -> Option<PathBuf> {
    (!v.is_empty() && v != "none").then(|| PathBuf::from(v))
}

fn show_path(p: &Option<PathBuf>) -> String {
    p.as_ref().map_or("none".into(), |p| p.display().to_string())
}

impl RunConfig {
    /// Every accepted key, in the order [`RunConfig::to_text`] prints them.
    pub const KEYS: &'static [&'static str] = &[
        "vocab", "span", "input_dim", "noise_std", "min_tokens", "max_tokens", "successors", "data_seed",
        "n_teacher", "n_labeled", "n_unlabeled", "n_eval", "teacher_layers", "teacher_dim",
        "teacher_heads", "teacher_ffn", "student_layers", "student_dim", "student_heads",
        "student_ffn", "C", "LC", "RC", "causal_conv", "conv_kernel", "taps", "pred_dim",
        "joint_dim", "aux_ffn", "lr", "batch_size", "teacher_steps", "student_steps", "alpha",
        "beta", "gamma", "N", "mix", "max_symbols", "grad_clip", "prob_weight", "seed", "seeds",
        "mode", "losses", "teacher", "checkpoint", "warm_start", "eval_mode", "T", "kind",
    ];

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "vocab" => self.vocab = num(key, v)?,
            "span" => self.span = num(key, v)?,
            "input_dim" => self.input_dim = num(key, v)?,
            "noise_std" => self.noise_std = num(key, v)?,
            "min_tokens" => self.min_tokens = num(key, v)?,
            "max_tokens" => self.max_tokens = num(key, v)?,
            "successors" => self.successors = num(key, v)?,
            "data_seed" => self.data_seed = num(key, v)?,
            "n_teacher" => self.n_teacher = num(key, v)?,
            "n_labeled" => self.n_labeled = num(key, v)?,
            "n_unlabeled" => self.n_unlabeled = num(key, v)?,
            "n_eval" => self.n_eval = num(key, v)?,
            "teacher_layers" => self.teacher_layers = num(key, v)?,
            "teacher_dim" => self.teacher_dim = num(key, v)?,
            "teacher_heads" => self.teacher_heads = num(key, v)?,
            "teacher_ffn" => self.teacher_ffn = num(key, v)?,
            "student_layers" => self.student_layers = num(key, v)?,
            "student_dim" => self.student_dim = num(key, v)?,
            "student_heads" => self.student_heads = num(key, v)?,
            "student_ffn" => self.student_ffn = num(key, v)?,
            "C" => self.chunk = num(key, v)?,
            "LC" => self.left_context = num(key, v)?,
            "RC" => self.right_context = num(key, v)?,
            "causal_conv" => self.causal_conv = flag(key, v)?,
            "conv_kernel" => self.conv_kernel = num(key, v)?,
            "taps" => self.taps = v.to_owned(),
            "pred_dim" => self.pred_dim = num(key, v)?,
            "joint_dim" => self.joint_dim = num(key, v)?,
            "aux_ffn" => self.aux_ffn = num(key, v)?,
            "lr" => self.lr = num(key, v)?,
            "batch_size" => self.batch_size = num(key, v)?,
            "teacher_steps" => self.teacher_steps = num(key, v)?,
            "student_steps" => self.student_steps = num(key, v)?,
            "alpha" => self.alpha = num(key, v)?,
            "beta" => self.beta = num(key, v)?,
            "gamma" => self.gamma = num(key, v)?,
            "N" => self.gap = num(key, v)?,
            "mix" => {
                let (a, b) = v
                    .split_once(':')
                    .ok_or_else(|| Error::Config(format!("mix must look like 1:1, got {v:?}")))?;
                self.mix = (num(key, a.trim())?, num(key, b.trim())?);
            }
            "max_symbols" => self.max_symbols = num(key, v)?,
            "grad_clip" => self.grad_clip = num(key, v)?,
            "prob_weight" => self.prob_weight = num(key, v)?,
            "seed" => self.seed = num(key, v)?,
            "seeds" => self.seeds = num(key, v)?,
            "mode" => self.mode = v.parse()?,
            "losses" => {
                self.losses = v
                    .split(',')
                    .map(|s| s.parse())
                    .collect::<Result<Vec<StudentMode>>>()?;
            }
            "teacher" => self.teacher = path(v),
            "checkpoint" => self.checkpoint = path(v),
            "warm_start" => self.warm_start = path(v),
            "eval_mode" => {
                self.eval_streaming = match v {
                    "streaming" => true,
                    "non_streaming" => false,
                    _ => return Err(Error::Config(format!("bad value {v:?} for key eval_mode"))),
                }
            }
            "T" => self.mask_len = num(key, v)?,
            "kind" => {
                self.mask_kind = match v {
                    "full" => MaskChoice::Full,
                    "chunk" | "chunk_streaming" => MaskChoice::Chunk,
                    "future_gap" => MaskChoice::FutureGap,
                    _ => return Err(Error::Config(format!("bad value {v:?} for key kind"))),
                }
            }
            other => return Err(Error::Config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    /// Applies one `key=value` assignment.
    pub fn apply(&mut self, assignment: &str) -> Result<()> {
        let (k, v) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("expected key=value, got {assignment:?}")))?;
        self.set(k, v)
    }

    /// Applies every non-comment line of a config file.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            self.apply(line)
                .map_err(|e| Error::Config(format!("line {}: {e}", i + 1)))?;
        }
        Ok(())
    }

    pub fn value_of(&self, key: &str) -> Option<String> {
        let s = match key {
            "vocab" => self.vocab.to_string(),
            "span" => self.span.to_string(),
            "input_dim" => self.input_dim.to_string(),
            "noise_std" => self.noise_std.to_string(),
            "min_tokens" => self.min_tokens.to_string(),
            "max_tokens" => self.max_tokens.to_string(),
            "successors" => self.successors.to_string(),
            "data_seed" => self.data_seed.to_string(),
            "n_teacher" => self.n_teacher.to_string(),
            "n_labeled" => self.n_labeled.to_string(),
            "n_unlabeled" => self.n_unlabeled.to_string(),
            "n_eval" => self.n_eval.to_string(),
            "teacher_layers" => self.teacher_layers.to_string(),
            "teacher_dim" => self.teacher_dim.to_string(),
            "teacher_heads" => self.teacher_heads.to_string(),
            "teacher_ffn" => self.teacher_ffn.to_string(),
            "student_layers" => self.student_layers.to_string(),
            "student_dim" => self.student_dim.to_string(),
            "student_heads" => self.student_heads.to_string(),
            "student_ffn" => self.student_ffn.to_string(),
            "C" => self.chunk.to_string(),
            "LC" => self.left_context.to_string(),
            "RC" => self.right_context.to_string(),
            "causal_conv" => self.causal_conv.to_string(),
            "conv_kernel" => self.conv_kernel.to_string(),
            "taps" => self.taps.clone(),
            "pred_dim" => self.pred_dim.to_string(),
            "joint_dim" => self.joint_dim.to_string(),
            "aux_ffn" => self.aux_ffn.to_string(),
            "lr" => self.lr.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "teacher_steps" => self.teacher_steps.to_string(),
            "student_steps" => self.student_steps.to_string(),
            "alpha" => self.alpha.to_string(),
            "beta" => self.beta.to_string(),
            "gamma" => self.gamma.to_string(),
            "N" => self.gap.to_string(),
            "mix" => format!("{}:{}", self.mix.0, self.mix.1),
            "max_symbols" => self.max_symbols.to_string(),
            "grad_clip" => self.grad_clip.to_string(),
            "prob_weight" => self.prob_weight.to_string(),
            "seed" => self.seed.to_string(),
            "seeds" => self.seeds.to_string(),
            "mode" => self.mode.to_string(),
            "losses" => self.losses.iter().map(ToString::to_string).collect::<Vec<_>>().join(","),
            "teacher" => show_path(&self.teacher),
            "checkpoint" => show_path(&self.checkpoint),
            "warm_start" => show_path(&self.warm_start),
            "eval_mode" => if self.eval_streaming { "streaming" } else { "non_streaming" }.into(),
            "T" => self.mask_len.to_string(),
            "kind" => match self.mask_kind {
                MaskChoice::Full => "full",
                MaskChoice::Chunk => "chunk",
                MaskChoice::FutureGap => "future_gap",
            }
            .into(),
            _ => return None,
        };
        Some(s)
    }

    /// The fully resolved configuration; parsing it back reproduces `self`.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for key in Self::KEYS {
            writeln!(out, "{key} = {}", self.value_of(key).unwrap()).unwrap();
        }
        out
    }

    pub fn task(&self) -> ToyTaskSpec {
        ToyTaskSpec {
            vocab: self.vocab,
            span: self.span,
            input_dim: self.input_dim,
            noise_std: self.noise_std,
            min_tokens: self.min_tokens,
            max_tokens: self.max_tokens,
            successors: self.successors,
        }
    }

    pub fn model(&self) -> Result<ModelConfig> {
        if self.right_context != 0 {
            return Err(Error::Unsupported("right context (RC) must be 0".into()));
        }
        let teacher = EncoderConfig {
            num_layers: self.teacher_layers,
            dim: self.teacher_dim,
            heads: self.teacher_heads,
            ffn_dim: self.teacher_ffn,
            input_dim: self.input_dim,
            mode: AttentionMode::NonStreaming,
            causal_conv: false,
            conv_kernel: self.conv_kernel,
        };
        let student = EncoderConfig {
            num_layers: self.student_layers,
            dim: self.student_dim,
            heads: self.student_heads,
            ffn_dim: self.student_ffn,
            input_dim: self.input_dim,
            mode: AttentionMode::Streaming {
                chunk: self.chunk,
                left_context: self.left_context,
            },
            causal_conv: self.causal_conv,
            conv_kernel: self.conv_kernel,
        };
        let cfg = ModelConfig {
            taps: TapPlan::parse(&self.taps, self.teacher_layers, self.student_layers)?,
            teacher,
            student,
            vocab: self.vocab,
            pred_dim: self.pred_dim,
            joint_dim: self.joint_dim,
            aux_ffn_dim: self.aux_ffn,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn train(&self) -> Result<TrainConfig> {
        let cfg = TrainConfig {
            lr: self.lr,
            batch_size: self.batch_size,
            teacher_steps: self.teacher_steps,
            student_steps: self.student_steps,
            weights: LossWeights {
                alpha: self.alpha,
                beta: self.beta,
                gamma: self.gamma,
            },
            gap: self.gap,
            mix: self.mix,
            max_symbols: self.max_symbols,
            grad_clip: self.grad_clip,
            prob_weight: self.prob_weight,
        };
        cfg.weights.validate()?;
        if cfg.gap == 0 {
            return Err(Error::Config("N must be at least 1".into()));
        }
        if cfg.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        Ok(cfg)
    }

    pub fn eval_attention(&self) -> AttentionMode {
        if self.eval_streaming {
            AttentionMode::Streaming {
                chunk: self.chunk,
                left_context: self.left_context,
            }
        } else {
            AttentionMode::NonStreaming
        }
    }

    /// The mask selected by `T`, `kind`, `C`, `LC`, `RC` and `N`.
    pub fn mask(&self) -> Result<AttentionMask> {
        match self.mask_kind {
            MaskChoice::Full => AttentionMask::full(self.mask_len),
            MaskChoice::Chunk => {
                AttentionMask::chunk_streaming(self.mask_len, self.chunk, self.left_context, self.right_context)
            }
            MaskChoice::FutureGap => AttentionMask::future_gap(self.mask_len, self.gap),
        }
    }
}
