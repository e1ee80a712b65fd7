//! Training-only auxiliary branch attached to a student tap.
//!
//! The branch projects student features to the teacher width, runs one
//! attention + feed-forward layer under the future-gap mask (output `z`),
//! then a left-to-right LSTM over `z` (output `r`) that serves as the
//! future predictor.
//!
//! With gap `N`, `z_t` never sees inputs `t+1..=t+N`, but `z_{t-1}` does see
//! frame `t+N`, so `r_t` can depend on input frame `t+N` through the
//! recurrence. The per-frame mask is applied exactly as defined; this
//! indirect path is left open.

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::mask::AttentionMask;
use crate::nn::{layer_forward, lstm_sequence, LayerSpec, LayerTapOutput, LstmSpec};
use crate::params::{Binding, ParamStore};

#[derive(Debug, Clone, PartialEq)]
pub struct AuxBranch {
    pub student_dim: usize,
    pub teacher_dim: usize,
    /// Equal to the teacher head count at the paired tap.
    pub heads: usize,
    pub ffn_dim: usize,
    pub gap: usize,
    pub prefix: String,
}

#[derive(Debug, Clone)]
pub struct BranchOutput {
    pub z: Var,
    pub r: Var,
    /// Per-head query/key/value of the branch attention layer.
    pub relations: LayerTapOutput,
}

impl AuxBranch {
    /// Branch parameters are stored under `aux.<tap_index>.`.
    pub fn new(
        tap_index: usize,
        student_dim: usize,
        teacher_dim: usize,
        heads: usize,
        ffn_dim: usize,
        gap: usize,
    ) -> Result<Self> {
        let branch = Self {
            student_dim,
            teacher_dim,
            heads,
            ffn_dim,
            gap,
            prefix: format!("aux.{tap_index}"),
        };
        branch.attn_spec().validate()?;
        Ok(branch)
    }

    pub fn attn_spec(&self) -> LayerSpec {
        LayerSpec {
            dim: self.teacher_dim,
            heads: self.heads,
            ffn_dim: self.ffn_dim,
            conv_kernel: None,
        }
    }

    pub fn lstm_spec(&self) -> LstmSpec {
        LstmSpec {
            input_dim: self.teacher_dim,
            hidden_dim: self.teacher_dim,
        }
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) {
        let p = &self.prefix;
        store.init_weight(&format!("{p}.proj.w"), self.student_dim, self.teacher_dim, rng);
        store.init_const(&format!("{p}.proj.b"), &[self.teacher_dim], 0.0);
        self.attn_spec().init(store, &format!("{p}.attn"), rng);
        self.lstm_spec().init(store, &format!("{p}.lstm"), rng);
    }

    /// Student-to-teacher-width projection alone.
    pub fn project(&self, tape: &mut Tape, params: &Binding, s: Var) -> Result<Var> {
        let shape = tape.shape(s).to_vec();
        if shape.len() != 2 || shape[1] != self.student_dim {
            return Err(Error::shape("aux branch input", &shape, &[0, self.student_dim]));
        }
        let p = &self.prefix;
        tape.linear(
            s,
            params.var(&format!("{p}.proj.w"))?,
            Some(params.var(&format!("{p}.proj.b"))?),
        )
    }

    /// Runs the branch over student tap features `s: [T, D_student]`.
    pub fn forward(&self, tape: &mut Tape, params: &Binding, s: Var) -> Result<BranchOutput> {
        let g = self.project(tape, params, s)?;
        let len = tape.shape(s)[0];
        let mask = AttentionMask::future_gap(len, self.gap)?;
        let relations = layer_forward(
            tape,
            params,
            &format!("{}.attn", self.prefix),
            &self.attn_spec(),
            g,
            &mask,
        )?;
        let z = relations.features;
        let r = lstm_sequence(tape, params, &format!("{}.lstm", self.prefix), &self.lstm_spec(), z)?;
        Ok(BranchOutput { z, r, relations })
    }
}
