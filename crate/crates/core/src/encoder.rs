//! Teacher (full-context) and student (chunk-wise streaming) encoders.

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::mask::AttentionMask;
use crate::nn::{layer_forward, positional_encoding, LayerSpec};
use crate::params::{Binding, ParamStore};

pub use crate::nn::LayerTapOutput;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttentionMode {
    NonStreaming,
    Streaming { chunk: usize, left_context: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderConfig {
    pub num_layers: usize,
    pub dim: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub input_dim: usize,
    pub mode: AttentionMode,
    pub causal_conv: bool,
    pub conv_kernel: usize,
}

impl EncoderConfig {
    /// Desk-scale teacher: 4 layers, width 32, 4 heads, full context.
    pub fn teacher(input_dim: usize) -> Self {
        Self {
            num_layers: 4,
            dim: 32,
            heads: 4,
            ffn_dim: 64,
            input_dim,
            mode: AttentionMode::NonStreaming,
            causal_conv: false,
            conv_kernel: 3,
        }
    }

    /// Desk-scale student: 4 layers, width 16, 2 heads, 4-frame chunks with
    /// 16 frames of left context and a causal convolution.
    pub fn student(input_dim: usize) -> Self {
        Self {
            num_layers: 4,
            dim: 16,
            heads: 2,
            ffn_dim: 32,
            input_dim,
            mode: AttentionMode::Streaming {
                chunk: 4,
                left_context: 16,
            },
            causal_conv: true,
            conv_kernel: 3,
        }
    }

    pub fn layer_spec(&self) -> LayerSpec {
        LayerSpec {
            dim: self.dim,
            heads: self.heads,
            ffn_dim: self.ffn_dim,
            conv_kernel: self.causal_conv.then_some(self.conv_kernel),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_layers == 0 || self.input_dim == 0 {
            return Err(Error::InvalidArgument("encoder needs layers and input width".into()));
        }
        if let AttentionMode::Streaming { chunk: 0, .. } = self.mode {
            return Err(Error::InvalidArgument("chunk size must be at least 1".into()));
        }
        self.layer_spec().validate()
    }

    /// Attention mask used by every layer for a sequence of `len` frames.
    pub fn mask(&self, len: usize) -> Result<AttentionMask> {
        match self.mode {
            AttentionMode::NonStreaming => AttentionMask::full(len),
            AttentionMode::Streaming {
                chunk,
                left_context,
            } => AttentionMask::chunk_streaming(len, chunk, left_context, 0),
        }
    }

    /// Streaming without a causal convolution is allowed but unusual.
    pub fn warnings(&self) -> Vec<String> {
        let mut out = vec![];
        if matches!(self.mode, AttentionMode::Streaming { .. }) && !self.causal_conv {
            out.push("streaming encoder configured without causal convolution".to_owned());
        }
        out
    }
}

/// Teacher/student layer pairs (1-based) where distillation is applied.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TapPlan {
    pairs: Vec<(usize, usize)>,
}

impl TapPlan {
    pub fn new(pairs: Vec<(usize, usize)>, teacher_layers: usize, student_layers: usize) -> Result<Self> {
        for (i, &(t, s)) in pairs.iter().enumerate() {
            if t == 0 || t > teacher_layers || s == 0 || s > student_layers {
                return Err(Error::InvalidArgument(format!(
                    "tap pair ({t}, {s}) outside layer ranges [1, {teacher_layers}] / [1, {student_layers}]"
                )));
            }
            if i > 0 {
                let (pt, ps) = pairs[i - 1];
                if t <= pt || s <= ps {
                    return Err(Error::InvalidArgument("tap pairs must be strictly increasing".into()));
                }
            }
        }
        Ok(Self { pairs })
    }

    /// Pairs every layer with the same-index layer.
    pub fn uniform(layers: usize) -> Self {
        Self {
            pairs: (1..=layers).map(|l| (l, l)).collect(),
        }
    }

    pub fn pairs(&self) -> &[(usize, usize)] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Parses `"1:1,2:2"`.
    pub fn parse(text: &str, teacher_layers: usize, student_layers: usize) -> Result<Self> {
        let mut pairs = vec![];
        for item in text.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            let (t, s) = item
                .split_once(':')
                .ok_or_else(|| Error::Config(format!("tap pair {item:?} is not T:S")))?;
            let parse = |v: &str| {
                v.trim()
                    .parse::<usize>()
                    .map_err(|_| Error::Config(format!("bad layer index {v:?}")))
            };
            pairs.push((parse(t)?, parse(s)?));
        }
        Self::new(pairs, teacher_layers, student_layers)
    }

    pub fn to_text(&self) -> String {
        self.pairs
            .iter()
            .map(|(t, s)| format!("{t}:{s}"))
            .collect::<Vec<_>>()
            .join(",")
    }
}

/// An encoder whose parameters live under `prefix` in a [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    pub cfg: EncoderConfig,
    pub prefix: String,
}

impl Encoder {
    pub fn new(cfg: EncoderConfig, prefix: impl Into<String>) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            prefix: prefix.into(),
        })
    }

    pub fn layer_prefix(&self, layer: usize) -> String {
        format!("{}.layer{layer}", self.prefix)
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) {
        let p = &self.prefix;
        store.init_weight(&format!("{p}.embed.w"), self.cfg.input_dim, self.cfg.dim, rng);
        store.init_const(&format!("{p}.embed.b"), &[self.cfg.dim], 0.0);
        let spec = self.cfg.layer_spec();
        for l in 0..self.cfg.num_layers {
            spec.init(store, &self.layer_prefix(l), rng);
        }
    }

    /// Embeds `x: [T, input_dim]`, adds positions, and runs every layer.
    /// Returns one tap per layer; the last one is the encoder output.
    pub fn forward(&self, tape: &mut Tape, params: &Binding, x: Var) -> Result<Vec<LayerTapOutput>> {
        let shape = tape.shape(x).to_vec();
        if shape.len() != 2 || shape[1] != self.cfg.input_dim {
            return Err(Error::shape("encoder input", &shape, &[0, self.cfg.input_dim]));
        }
        let len = shape[0];
        let mask = self.cfg.mask(len)?;
        let p = &self.prefix;
        let h = tape.linear(
            x,
            params.var(&format!("{p}.embed.w"))?,
            Some(params.var(&format!("{p}.embed.b"))?),
        )?;
        let pe = tape.constant(positional_encoding(len, self.cfg.dim));
        let mut h = tape.add(h, pe)?;
        let spec = self.cfg.layer_spec();
        let mut taps = Vec::with_capacity(self.cfg.num_layers);
        for l in 0..self.cfg.num_layers {
            let out = layer_forward(tape, params, &self.layer_prefix(l), &spec, h, &mask)?;
            h = out.features;
            taps.push(out);
        }
        Ok(taps)
    }
}
