//! Multi-seed comparisons of student recipes against one teacher.

use std::fmt::Write as _;

use crate::config::RunConfig;
use crate::encoder::AttentionMode;
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::trainer::{
    evaluate, make_eval_set, make_toy_dataset, train_student_kd, train_teacher, Dataset,
    LossBreakdown, ModelConfig, StudentMode, TrainConfig, Utterance,
};

/// Data and model settings resolved from a [`RunConfig`].
#[derive(Debug, Clone)]
pub struct Experiment {
    pub cfg: RunConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Labeled set used for the teacher.
    pub teacher_data: Dataset,
    /// Labeled subset plus unlabeled pool used for students.
    pub student_data: Dataset,
    pub eval: Vec<Utterance>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModeResult {
    pub mode: StudentMode,
    pub seeds: Vec<u64>,
    pub errors: Vec<f64>,
}

impl ModeResult {
    pub fn median(&self) -> f64 {
        median(&self.errors)
    }
}

pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    match v.len() {
        0 => f64::NAN,
        n if n % 2 == 1 => v[n / 2],
        n => 0.5 * (v[n / 2 - 1] + v[n / 2]),
    }
}

impl Experiment {
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        let task = cfg.task();
        Ok(Self {
            model: cfg.model()?,
            train: cfg.train()?,
            teacher_data: make_toy_dataset(&task, cfg.n_teacher, 0, cfg.data_seed)?,
            student_data: make_toy_dataset(&task, cfg.n_labeled, cfg.n_unlabeled, cfg.data_seed)?,
            eval: make_eval_set(&task, cfg.n_eval, cfg.data_seed)?,
            cfg: cfg.clone(),
        })
    }

    pub fn seeds(&self) -> Vec<u64> {
        (0..self.cfg.seeds as u64).map(|i| self.cfg.seed + i).collect()
    }

    pub fn train_teacher(&self) -> Result<(ParamStore, Vec<LossBreakdown>)> {
        train_teacher(&self.model, &self.train, &self.teacher_data, self.cfg.seed)
    }

    /// Teacher error on the held-out set with full context.
    pub fn teacher_error(&self, teacher: &ParamStore) -> Result<f64> {
        let model = self.model.teacher_model()?;
        Ok(evaluate(&model, teacher, &self.eval, AttentionMode::NonStreaming, self.train.max_symbols)?
            .token_error_rate)
    }

    /// Trains one student and returns its streaming error on the held-out set.
    pub fn student_error(&self, teacher: &ParamStore, mode: StudentMode, seed: u64) -> Result<f64> {
        let (trainer, _) = train_student_kd(teacher, &self.model, &self.train, mode, &self.student_data, seed)?;
        let model = &trainer.model;
        Ok(evaluate(
            model,
            &trainer.inference_params(),
            &self.eval,
            model.encoder.cfg.mode,
            self.train.max_symbols,
        )?
        .token_error_rate)
    }

    /// Every mode over every configured seed.
    pub fn compare(&self, teacher: &ParamStore, modes: &[StudentMode]) -> Result<Vec<ModeResult>> {
        if modes.is_empty() {
            return Err(Error::InvalidArgument("no student recipes to compare".into()));
        }
        let seeds = self.seeds();
        modes
            .iter()
            .map(|&mode| {
                let errors = seeds
                    .iter()
                    .map(|&s| self.student_error(teacher, mode, s))
                    .collect::<Result<Vec<_>>>()?;
                Ok(ModeResult {
                    mode,
                    seeds: seeds.clone(),
                    errors,
                })
            })
            .collect()
    }
}

/// Fixed-width text table: one row per recipe, per-seed errors then median.
pub fn format_table(results: &[ModeResult]) -> String {
    let mut out = String::new();
    let width = results.iter().map(|r| r.mode.to_string().len()).max().unwrap_or(4).max(6);
    write!(out, "{:<width$}", "recipe").unwrap();
    if let Some(r) = results.first() {
        for s in &r.seeds {
            write!(out, "  seed{s:<4}").unwrap();
        }
    }
    writeln!(out, "  median").unwrap();
    for r in results {
        write!(out, "{:<width$}", r.mode.to_string()).unwrap();
        for e in &r.errors {
            write!(out, "  {e:<8.4}").unwrap();
        }
        writeln!(out, "  {:.4}", r.median()).unwrap();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn medians() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
        assert!(median(&[]).is_nan());
    }
}
