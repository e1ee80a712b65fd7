//! Named parameter storage, gradient buffers and the Adam optimizer.

use std::collections::BTreeMap;

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Parameters keyed by dotted name; iteration order is the name order, which
/// fixes reduction and serialization order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.params.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor> {
        self.params.remove(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.params.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    /// Copies every parameter whose name starts with `prefix`.
    pub fn subset(&self, prefix: &str) -> ParamStore {
        ParamStore {
            params: self
                .params
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    pub fn extend(&mut self, other: ParamStore) {
        self.params.extend(other.params);
    }

    /// Glorot-uniform `[fan_in, fan_out]` matrix.
    pub fn init_weight<R: Rng + ?Sized>(&mut self, name: &str, fan_in: usize, fan_out: usize, rng: &mut R) {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        self.insert(name, Tensor::uniform(&[fan_in, fan_out], bound, rng));
    }

    pub fn init_const(&mut self, name: &str, shape: &[usize], value: f64) {
        self.insert(name, Tensor::filled(shape, value));
    }

    /// Puts every parameter on `tape` as a leaf.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Binding {
        Binding {
            vars: self
                .params
                .iter()
                .map(|(k, v)| (k.clone(), tape.leaf(v.clone(), trainable)))
                .collect(),
        }
    }
}

/// Tape handles for a bound [`ParamStore`].
#[derive(Debug, Clone, Default)]
pub struct Binding {
    vars: BTreeMap<String, Var>,
}

impl Binding {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::InvalidArgument(format!("missing parameter {name}")))
    }

    /// Replaces (or adds) the handle for `name`.
    pub fn insert(&mut self, name: impl Into<String>, var: Var) {
        self.vars.insert(name.into(), var);
    }

    pub fn merge(mut self, other: Binding) -> Binding {
        self.vars.extend(other.vars);
        self
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }
}

/// Gradient accumulation buffers, one per parameter. Never cleared
/// implicitly: call [`Gradients::zero`] between optimizer steps.
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    grads: BTreeMap<String, Tensor>,
}

impl Gradients {
    pub fn for_store(store: &ParamStore) -> Self {
        Self {
            grads: store
                .iter()
                .map(|(k, v)| (k.clone(), Tensor::zeros(v.shape())))
                .collect(),
        }
    }

    pub fn zero(&mut self) {
        for g in self.grads.values_mut() {
            g.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }

    /// Adds the leaf gradients found on `tape` for every bound name tracked
    /// here.
    pub fn accumulate(&mut self, tape: &Tape, binding: &Binding) {
        for (name, var) in binding.iter() {
            let (Some(acc), Some(g)) = (self.grads.get_mut(name), tape.grad(*var)) else {
                continue;
            };
            acc.data_mut()
                .iter_mut()
                .zip(g.data())
                .for_each(|(a, b)| *a += b);
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.grads.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.grads.iter()
    }

    pub fn global_norm(&self) -> f64 {
        self.grads
            .values()
            .flat_map(|g| g.data())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, c: f64) {
        for g in self.grads.values_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= c);
        }
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn update(&mut self, store: &mut ParamStore, grads: &Gradients) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (name, g) in grads.iter() {
            let Some(p) = store.get_mut(name) else { continue };
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(g.shape()));
            for i in 0..g.numel() {
                let gi = g.data()[i];
                let mi = &mut m.data_mut()[i];
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                let mhat = *mi / bc1;
                let vi = &mut v.data_mut()[i];
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let vhat = *vi / bc2;
                p.data_mut()[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }

    /// Moment buffers as named tensors (`m.<name>`, `v.<name>`), plus the step
    /// counter, for checkpointing.
    pub fn state(&self) -> ParamStore {
        let mut out = ParamStore::new();
        for (k, t) in &self.m {
            out.insert(format!("m.{k}"), t.clone());
        }
        for (k, t) in &self.v {
            out.insert(format!("v.{k}"), t.clone());
        }
        out.insert("step", Tensor::scalar(self.step as f64));
        out
    }

    pub fn load_state(&mut self, state: &ParamStore) -> Result<()> {
        self.m.clear();
        self.v.clear();
        self.step = 0;
        for (k, t) in state.iter() {
            if let Some(name) = k.strip_prefix("m.") {
                self.m.insert(name.to_owned(), t.clone());
            } else if let Some(name) = k.strip_prefix("v.") {
                self.v.insert(name.to_owned(), t.clone());
            } else if k == "step" {
                self.step = t.item() as u64;
            } else {
                return Err(Error::Checkpoint(format!("unknown optimizer entry {k}")));
            }
        }
        Ok(())
    }
}
