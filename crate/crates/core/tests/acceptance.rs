//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! exits nonzero if any fails.
//!
//! `STREAMKD_ACCEPT_QUICK=1` shrinks the two training comparisons to a smoke
//! run; their verdicts are then reported but not meaningful.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use streamkd::checkpoint;
use streamkd::config::RunConfig;
use streamkd::distill::{apc_loss, dis_loss, kld_loss, relation_distributions, total_loss, IDENTICAL_FRAME_LOSS};
use streamkd::experiment::{format_table, Experiment, ModeResult};
use streamkd::nn::LayerTapOutput;
use streamkd::suite::{causality_suite, gradient_suite};
use streamkd::trainer::{metrics_jsonl, LossBreakdown, LossSet, StudentMode, StudentTrainer};
use streamkd::transducer::{brute_force_transducer, transducer_nll};
use streamkd::{AttentionMask, Tape, Tensor};

const GRAD_TOL: f64 = 1e-4;
const GRAD_BUDGET: Duration = Duration::from_secs(5 * 60);
const LATTICE_TOL: f64 = 1e-10;
const LATTICE_BUDGET: Duration = Duration::from_secs(60);
const IDENTITY_TOL: f64 = 1e-12;
const BOOKKEEPING_TOL: f64 = 1e-12;
const TEACHER_MAX_ERROR: f64 = 0.05;
const TABLE_BUDGET: Duration = Duration::from_secs(30 * 60);

/// Settings for the two recipe comparisons.
const TABLE_SETTINGS: &[&str] = &["seeds=5", "teacher_steps=1500", "student_steps=1200", "lr=0.003"];
const QUICK_SETTINGS: &[&str] = &["seeds=1", "teacher_steps=20", "student_steps=10", "n_eval=8"];

struct Verdict {
    name: &'static str,
    pass: bool,
    detail: String,
}

fn verdict(name: &'static str, pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict { name, pass, detail: detail.into() }
}

fn failed(name: &'static str, e: impl std::fmt::Display) -> Verdict {
    verdict(name, false, format!("error: {e}"))
}

fn gradients() -> Verdict {
    let name = "gradient_suite";
    let start = Instant::now();
    let reports = match gradient_suite(10, 2024) {
        Ok(r) => r,
        Err(e) => return failed(name, e),
    };
    let took = start.elapsed();
    let worst = reports.iter().map(|r| r.max_error).fold(0.0, f64::max);
    let fewest = reports.iter().map(|r| r.instances).min().unwrap_or(0);
    let parts: Vec<String> = reports.iter().map(|r| format!("{}={:.1e}", r.name, r.max_error)).collect();
    verdict(
        name,
        reports.len() == 7 && fewest >= 10 && worst < GRAD_TOL && took < GRAD_BUDGET,
        format!(
            "max_rel_err={worst:.2e} (<{GRAD_TOL:e}) instances>={fewest} {:.1}s [{}]",
            took.as_secs_f64(),
            parts.join(" ")
        ),
    )
}

/// Probability of finishing the lattice from `(t, u)`, by direct recursion.
fn lattice_walk(logits: &Tensor, tokens: &[usize], t: usize, u: usize) -> f64 {
    let (t_len, u1, v1) = (logits.shape()[0], logits.shape()[1], logits.shape()[2]);
    let row = &logits.data()[(t * u1 + u) * v1..(t * u1 + u + 1) * v1];
    let z: f64 = row.iter().map(|x| x.exp()).sum();
    let p = |k: usize| row[k].exp() / z;
    let mut total = 0.0;
    if u < tokens.len() {
        total += p(tokens[u]) * lattice_walk(logits, tokens, t, u + 1);
    }
    if t + 1 < t_len {
        total += p(0) * lattice_walk(logits, tokens, t + 1, u);
    } else if u == tokens.len() {
        total += p(0);
    }
    total
}

fn transducer_oracle() -> Verdict {
    let name = "transducer_oracle";
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let instances = 200;
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let t = rng.gen_range(1..=4);
        let u = rng.gen_range(0..=3);
        let v = rng.gen_range(1..=5);
        let tokens: Vec<usize> = (0..u).map(|_| rng.gen_range(1..=v)).collect();
        let logits = Tensor::randn(&[t, u + 1, v + 1], 2.0, &mut rng);
        let fast = match transducer_nll(&logits, &tokens) {
            Ok((nll, _)) => nll,
            Err(e) => return failed(name, e),
        };
        let brute = match brute_force_transducer(&logits, &tokens) {
            Ok((nll, _)) => nll,
            Err(e) => return failed(name, e),
        };
        let walk = -lattice_walk(&logits, &tokens, 0, 0).ln();
        worst = worst.max((fast - brute).abs()).max((fast - walk).abs());
    }
    let took = start.elapsed();
    verdict(
        name,
        worst < LATTICE_TOL && took < LATTICE_BUDGET,
        format!("max_abs_err={worst:.2e} (<{LATTICE_TOL:e}) instances={instances} {:.2}s", took.as_secs_f64()),
    )
}

fn loss_identities() -> Verdict {
    let name = "loss_identities";
    let run = || -> streamkd::Result<(f64, f64, f64)> {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (mut dis_err, mut apc_err, mut kld_err) = (0.0f64, 0.0f64, 0.0f64);
        for t in 2..=10 {
            let mut tape = Tape::new();
            let h = Tensor::randn(&[t, 6], 1.0, &mut rng);
            let hv = tape.constant(h.clone());
            let d = dis_loss(&mut tape, hv, hv)?;
            dis_err = dis_err.max((tape.value(d).item() - t as f64 * IDENTICAL_FRAME_LOSS).abs());

            let n = rng.gen_range(1..t);
            let mut r = Tensor::randn(&[t, 6], 1.0, &mut rng);
            for i in 0..t - n {
                r.row_mut(i).copy_from_slice(h.row(i + n));
            }
            let rv = tape.constant(r);
            let a = apc_loss(&mut tape, hv, rv, n)?;
            apc_err = apc_err.max((tape.value(a).item() - (t - n) as f64 * IDENTICAL_FRAME_LOSS).abs());

            let heads: Vec<_> = (0..2).map(|_| tape.constant(Tensor::randn(&[t, 3], 1.0, &mut rng))).collect();
            let taps = LayerTapOutput { features: hv, queries: heads.clone(), keys: heads.clone(), values: heads };
            let support = AttentionMask::future_gap(t, n)?;
            let rel = relation_distributions(&mut tape, &taps, &support)?;
            let k = kld_loss(&mut tape, &rel, &rel)?;
            kld_err = kld_err.max(tape.value(k).item().abs());
        }
        Ok((dis_err, apc_err, kld_err))
    };
    match run() {
        Ok((d, a, k)) => verdict(
            name,
            d < IDENTITY_TOL && a < IDENTITY_TOL && k < IDENTITY_TOL,
            format!("dis={d:.1e} apc={a:.1e} kld={k:.1e} (<{IDENTITY_TOL:e})"),
        ),
        Err(e) => failed(name, e),
    }
}

fn causality() -> Verdict {
    let name = "causality_suite";
    match causality_suite(20, 77) {
        Ok(reports) => {
            let pass = reports.len() == 3 && reports.iter().all(|r| r.passed() && r.draws >= 20);
            let parts: Vec<String> = reports
                .iter()
                .map(|r| format!("{}: {}/{} clean", r.name, r.draws - r.violations, r.draws))
                .collect();
            verdict(name, pass, parts.join(", "))
        }
        Err(e) => failed(name, e),
    }
}

fn masks() -> Verdict {
    let name = "mask_goldens";
    let chunk = AttentionMask::chunk_streaming(6, 2, 2, 0).map(|m| m.to_text()).ok();
    let gap = AttentionMask::future_gap(5, 2).map(|m| m.to_text()).ok();
    let chunk_ok = chunk.as_deref() == Some("110000\n110000\n111100\n111100\n001111\n001111\n");
    let gap_ok = gap.as_deref() == Some("10011\n11001\n11100\n11110\n11111\n");
    verdict(name, chunk_ok && gap_ok, format!("chunk(T=6,C=2,LC=2)={chunk_ok} future_gap(T=5,N=2)={gap_ok}"))
}

fn strip_wall(ms: &[LossBreakdown]) -> Vec<LossBreakdown> {
    ms.iter().map(|m| LossBreakdown { wall_ms: 0.0, ..m.clone() }).collect()
}

fn small_run_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    for s in ["teacher_steps=40", "student_steps=30", "n_teacher=32", "n_labeled=8", "n_unlabeled=16", "batch_size=4"] {
        cfg.apply(s).expect("valid setting");
    }
    cfg
}

/// One full-loss distillation run, checked term by term.
fn bookkeeping() -> Verdict {
    let name = "loss_bookkeeping";
    let run = || -> streamkd::Result<Verdict> {
        let cfg = small_run_config();
        let exp = Experiment::new(&cfg)?;
        let (teacher, _) = exp.train_teacher()?;
        let before = checkpoint::encode(&teacher);
        let mode = StudentMode::Aux(LossSet::ALL);
        let mut tr = StudentTrainer::new(&teacher, &exp.model, &exp.train, mode, &exp.student_data, 3, None)?;
        let metrics = tr.run(exp.train.student_steps)?;
        let w = &exp.train.weights;
        let mut worst = 0.0f64;
        let mut unlabeled = 0;
        let mut asr_leak = 0;
        for m in &metrics {
            let total = total_loss(m.loss_asr, m.loss_dis, m.loss_kld, m.loss_apc, w, m.n_labeled, m.n_unlabeled)?;
            worst = worst.max((total - m.loss_total).abs());
            if m.n_labeled == 0 {
                unlabeled += 1;
                asr_leak += usize::from(m.loss_asr.is_some());
            }
        }
        let frozen = checkpoint::encode(&teacher) == before;
        let weights_ok = (w.alpha, w.beta, w.gamma) == (0.01, 0.0005, 0.005);
        Ok(verdict(
            name,
            worst <= BOOKKEEPING_TOL && unlabeled > 0 && asr_leak == 0 && frozen && weights_ok,
            format!(
                "max_total_err={worst:.1e} (<={BOOKKEEPING_TOL:e}) unlabeled_steps={unlabeled} asr_on_unlabeled={asr_leak} teacher_frozen={frozen} weights=({}, {}, {})",
                w.alpha, w.beta, w.gamma
            ),
        ))
    };
    run().unwrap_or_else(|e| failed(name, e))
}

fn determinism() -> Verdict {
    let name = "determinism";
    let run = || -> streamkd::Result<Verdict> {
        let cfg = small_run_config();
        let exp = Experiment::new(&cfg)?;
        let (teacher, _) = exp.train_teacher()?;
        let dir = tempfile::tempdir()?;
        let path = dir.path().join("teacher.skdl");
        checkpoint::save(&path, &teacher)?;
        let once = || -> streamkd::Result<(Vec<u8>, String)> {
            let teacher = checkpoint::load(&path)?;
            let mode = StudentMode::Aux(LossSet::ALL);
            let mut tr = StudentTrainer::new(&teacher, &exp.model, &exp.train, mode, &exp.student_data, cfg.seed, None)?;
            let metrics = tr.run(exp.train.student_steps)?;
            Ok((checkpoint::encode(&tr.checkpoint()), metrics_jsonl(&strip_wall(&metrics))))
        };
        let (ca, ma) = once()?;
        let (cb, mb) = once()?;
        Ok(verdict(
            name,
            ca == cb && ma == mb,
            format!("checkpoint_identical={} metrics_identical={} ({} bytes)", ca == cb, ma == mb, ca.len()),
        ))
    };
    run().unwrap_or_else(|e| failed(name, e))
}

fn find(results: &[ModeResult], mode: &str) -> f64 {
    let mode: StudentMode = mode.parse().expect("known recipe");
    results.iter().find(|r| r.mode == mode).map(ModeResult::median).unwrap_or(f64::NAN)
}

fn tables(quick: bool) -> Vec<Verdict> {
    let (t1, t2) = ("recipe_order", "loss_set_order");
    let start = Instant::now();
    let mut cfg = RunConfig::default();
    for s in if quick { QUICK_SETTINGS } else { TABLE_SETTINGS } {
        cfg.apply(s).expect("valid setting");
    }
    cfg.apply("losses=scratch,layer_direct,dis,dis+kld,dis+kld+apc").expect("valid setting");
    let run = || -> streamkd::Result<(f64, Vec<ModeResult>)> {
        let exp = Experiment::new(&cfg)?;
        let (teacher, _) = exp.train_teacher()?;
        let teacher_error = exp.teacher_error(&teacher)?;
        Ok((teacher_error, exp.compare(&teacher, &cfg.losses)?))
    };
    let (teacher_error, results) = match run() {
        Ok(r) => r,
        Err(e) => return vec![failed(t1, &e), failed(t2, e)],
    };
    let took = start.elapsed();
    for line in format_table(&results).lines() {
        println!("    {line}");
    }
    let (s0, s2) = (find(&results, "scratch"), find(&results, "layer_direct"));
    let (dis, dis_kld, s3) = (find(&results, "dis"), find(&results, "dis+kld"), find(&results, "dis+kld+apc"));
    vec![
        verdict(
            t1,
            teacher_error < TEACHER_MAX_ERROR && s3 < s2 && s2 < s0 && took < TABLE_BUDGET,
            format!(
                "teacher={teacher_error:.4} (<{TEACHER_MAX_ERROR}) aux={s3:.4} < direct={s2:.4} < scratch={s0:.4} seeds={} {:.0}s",
                cfg.seeds,
                took.as_secs_f64()
            ),
        ),
        verdict(
            t2,
            dis_kld <= dis && s3 <= dis_kld,
            format!("dis={dis:.4} >= dis+kld={dis_kld:.4} >= dis+kld+apc={s3:.4} (N={})", cfg.gap),
        ),
    ]
}

fn main() -> ExitCode {
    let quick = std::env::var_os("STREAMKD_ACCEPT_QUICK").is_some();
    let mut all = vec![gradients(), transducer_oracle(), loss_identities(), causality(), masks()];
    all.extend(tables(quick));
    all.push(bookkeeping());
    all.push(determinism());
    let mut failures = 0;
    for v in &all {
        println!("{} {:<18} {}", if v.pass { "PASS" } else { "FAIL" }, v.name, v.detail);
        failures += usize::from(!v.pass);
    }
    println!("{} of {} criteria passed", all.len() - failures, all.len());
    if failures == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
