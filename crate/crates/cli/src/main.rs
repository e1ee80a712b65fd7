use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{CommandFactory, Parser, Subcommand};
use streamkd::checkpoint;
use streamkd::config::RunConfig;
use streamkd::experiment::{format_table, Experiment};
use streamkd::params::ParamStore;
use streamkd::suite::{causality_suite, gradient_suite, GRADIENT_TOLERANCE};
use streamkd::trainer::{evaluate, metrics_jsonl, StudentTrainer};
use streamkd::{Error, Result};

#[derive(Parser)]
#[command(name = "streamkd", version, about = "Layer-to-layer distillation into a streaming encoder")]
struct Cli {
    /// `key = value` configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run seed; same as `--set seed=INT`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Artifact directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Override one key, applied after the file. Repeatable.
    #[arg(long = "set", value_name = "KEY=VAL", global = true)]
    sets: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the toy training, teacher and evaluation sets as JSON.
    GenData,
    /// Train the full-context teacher.
    TrainTeacher,
    /// Distill a streaming student from a teacher checkpoint.
    Distill,
    /// Compare recipes (`losses`) over `seeds` seeds and print median errors.
    Ablate,
    /// Token error rate of a checkpoint on the held-out set.
    Eval,
    /// Finite-difference and causality suites.
    GradCheck,
    /// Print an attention mask as 0/1 rows.
    Masks,
}

fn resolve(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &cli.config {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        cfg.apply_text(&text)?;
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    for s in &cli.sets {
        cfg.apply(s)?;
    }
    Ok(cfg)
}

fn write(out: &Path, name: &str, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(out.join(name), contents)?;
    Ok(())
}

fn require<'a>(p: &'a Option<PathBuf>, key: &str) -> Result<&'a PathBuf> {
    p.as_ref()
        .ok_or_else(|| Error::Config(format!("missing {key} checkpoint (set {key}=PATH)")))
}

fn run(cli: &Cli) -> Result<bool> {
    let cfg = resolve(cli)?;
    print!("{}", cfg.to_text());
    println!();
    let out = &cli.out;
    fs::create_dir_all(out)?;
    write(out, "config.txt", cfg.to_text())?;

    match cli.command {
        Command::Masks => {
            let mask = cfg.mask()?;
            let text = mask.to_text();
            print!("{text}");
            write(out, "mask.txt", text)?;
        }
        Command::GradCheck => {
            let mut ok = true;
            let mut report = String::new();
            for r in gradient_suite(10, cfg.seed)? {
                let line = format!(
                    "{:<22} instances={:<3} max_rel_err={:.3e} {}\n",
                    r.name,
                    r.instances,
                    r.max_error,
                    if r.passed() { "ok" } else { "FAIL" }
                );
                ok &= r.passed();
                report.push_str(&line);
            }
            for r in causality_suite(20, cfg.seed)? {
                let line = format!(
                    "{:<22} draws={:<3} violations={} {}\n",
                    r.name,
                    r.draws,
                    r.violations,
                    if r.passed() { "ok" } else { "FAIL" }
                );
                ok &= r.passed();
                report.push_str(&line);
            }
            report.push_str(&format!("tolerance {GRADIENT_TOLERANCE:e}: {}\n", if ok { "pass" } else { "fail" }));
            print!("{report}");
            write(out, "grad_check.txt", report)?;
            return Ok(ok);
        }
        Command::GenData => {
            let exp = Experiment::new(&cfg)?;
            write(out, "teacher_train.json", serde_json::to_string(&exp.teacher_data).expect("json"))?;
            write(out, "student_train.json", serde_json::to_string(&exp.student_data).expect("json"))?;
            write(out, "eval.json", serde_json::to_string(&exp.eval).expect("json"))?;
            println!(
                "teacher_train={} student_labeled={} student_unlabeled={} eval={}",
                exp.teacher_data.labeled.len(),
                exp.student_data.labeled.len(),
                exp.student_data.unlabeled.len(),
                exp.eval.len()
            );
        }
        Command::TrainTeacher => {
            let exp = Experiment::new(&cfg)?;
            let (params, metrics) = exp.train_teacher()?;
            checkpoint::save(out.join("teacher.skdl"), &params)?;
            write(out, "teacher_metrics.jsonl", metrics_jsonl(&metrics))?;
            println!("teacher_error {:.6}", exp.teacher_error(&params)?);
        }
        Command::Distill => {
            let exp = Experiment::new(&cfg)?;
            let teacher = checkpoint::load(require(&cfg.teacher, "teacher")?)?;
            let warm = cfg.warm_start.as_ref().map(checkpoint::load).transpose()?;
            let mut trainer = StudentTrainer::new(
                &teacher,
                &exp.model,
                &exp.train,
                cfg.mode,
                &exp.student_data,
                cfg.seed,
                warm.as_ref(),
            )?;
            let metrics = trainer.run(exp.train.student_steps)?;
            checkpoint::save(out.join("student.skdl"), &trainer.checkpoint())?;
            write(out, "metrics.jsonl", metrics_jsonl(&metrics))?;
            let report = evaluate(
                &trainer.model,
                &trainer.inference_params(),
                &exp.eval,
                cfg.eval_attention(),
                exp.train.max_symbols,
            )?;
            println!("student_error {:.6}", report.token_error_rate);
        }
        Command::Ablate => {
            let exp = Experiment::new(&cfg)?;
            let teacher = match &cfg.teacher {
                Some(p) => checkpoint::load(p)?,
                None => {
                    let (params, _) = exp.train_teacher()?;
                    checkpoint::save(out.join("teacher.skdl"), &params)?;
                    params
                }
            };
            let teacher_error = exp.teacher_error(&teacher)?;
            let results = exp.compare(&teacher, &cfg.losses)?;
            let table = format!("teacher_error {teacher_error:.4}\n{}", format_table(&results));
            print!("{table}");
            write(out, "ablation.txt", table)?;
        }
        Command::Eval => {
            let exp = Experiment::new(&cfg)?;
            let store = checkpoint::load(require(&cfg.checkpoint, "checkpoint")?)?;
            let model = if store.names().any(|n| n.starts_with("student.")) {
                exp.model.student_model()?
            } else if store.names().any(|n| n.starts_with("teacher.")) {
                exp.model.teacher_model()?
            } else {
                return Err(Error::Checkpoint("no student.* or teacher.* tensors".into()));
            };
            let params: ParamStore = store.subset(&format!("{}.", model.prefix()));
            let report = evaluate(&model, &params, &exp.eval, cfg.eval_attention(), exp.train.max_symbols)?;
            write(out, "eval.json", serde_json::to_string_pretty(&report).expect("report serializes"))?;
            println!("token_error_rate {:.6}", report.token_error_rate);
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error kind={} message={:?}", e.kind(), e.to_string());
            if matches!(e, Error::Config(_)) {
                eprintln!("{}", Cli::command().render_usage());
            }
            ExitCode::from(2)
        }
    }
}
