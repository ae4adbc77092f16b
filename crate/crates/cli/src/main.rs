//! Experiment driver.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or configuration
//! error, 3 diagnostic tolerance violation.

mod config;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use config::ExperimentConfig;
use deflect_core::baselines::PeftMethod;
use deflect_core::budget::method_budget;
use deflect_core::data::synth::{generate_dataset, write_dataset, SyntheticTaskSpec};
use deflect_core::diagnostics::{algebra_suite, budget_suite, budget_table, gradient_suite, norms_suite, SuiteReport};
use deflect_core::experiment::{load_model_checkpoint, save_adapter_checkpoint, save_full_checkpoint};
use deflect_core::train::{evaluate, train, Metrics, TrainHistory};

#[derive(Parser)]
#[command(name = "deflect", version, about = "Multispectral adaptation experiments: untangled patch embeddings, untangled attention and norm-constrained embedding deflection, with PEFT baselines and verification suites")]
struct Cli {
    /// Worker cap for parallel evaluation (falls back to DEFLECT_THREADS).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic multispectral dataset into a directory.
    Generate {
        /// TOML task spec (see configs/ for examples).
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train per an experiment config; writes metrics.csv, a checkpoint and
    /// a run summary into the config's output directory.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Also write a full-model checkpoint next to the adapter one.
        #[arg(long)]
        save_full: bool,
    },
    /// Evaluate a checkpoint on the config's dataset.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Run a verification suite; exits 3 on any violated tolerance.
    Diagnose {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum)]
        suite: Suite,
    },
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum Suite {
    Algebra,
    Norms,
    Gradients,
    Budget,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let threads = cli
        .threads
        .or_else(|| std::env::var("DEFLECT_THREADS").ok().and_then(|v| v.parse().ok()))
        .unwrap_or(1)
        .max(1);
    match run(cli.command, threads) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(1)
        }
    }
}

fn run(command: Command, threads: usize) -> anyhow::Result<ExitCode> {
    match command {
        Command::Generate { spec, out, seed } => cmd_generate(&spec, &out, seed),
        Command::Train { config, save_full } => cmd_train(&config, save_full, threads),
        Command::Eval { config, checkpoint } => cmd_eval(&config, &checkpoint, threads),
        Command::Diagnose { config, suite } => cmd_diagnose(&config, suite),
    }
}

fn load_config(path: &Path) -> anyhow::Result<Result<ExperimentConfig, ExitCode>> {
    let cfg = match ExperimentConfig::from_path(path) {
        Ok(cfg) => cfg,
        Err(err) => {
            eprintln!("config error: {err:#}");
            return Ok(Err(ExitCode::from(2)));
        }
    };
    let errors = cfg.validation_errors();
    if !errors.is_empty() {
        eprintln!("config {} is invalid:", path.display());
        for e in &errors {
            eprintln!("  - {e}");
        }
        return Ok(Err(ExitCode::from(2)));
    }
    Ok(Ok(cfg))
}

// ── generate ──────────────────────────────────────────────────────────────

fn cmd_generate(spec_path: &Path, out: &Path, seed: u64) -> anyhow::Result<ExitCode> {
    let text = match std::fs::read_to_string(spec_path) {
        Ok(t) => t,
        Err(e) => {
            eprintln!("cannot read spec {}: {e}", spec_path.display());
            return Ok(ExitCode::from(2));
        }
    };
    let spec: SyntheticTaskSpec = match toml::from_str(&text) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("spec {}: {e}", spec_path.display());
            return Ok(ExitCode::from(2));
        }
    };
    let dataset = match generate_dataset(&spec, seed) {
        Ok(d) => d,
        Err(e) => {
            eprintln!("invalid task spec: {e}");
            return Ok(ExitCode::from(2));
        }
    };
    write_dataset(out, &dataset)?;
    println!(
        "wrote {} train / {} val / {} test samples ({} classes, {:?}) to {}",
        dataset.train.len(),
        dataset.val.len(),
        dataset.test.len(),
        dataset.num_classes,
        dataset.task,
        out.display()
    );
    Ok(ExitCode::SUCCESS)
}

// ── train / eval ──────────────────────────────────────────────────────────

fn metrics_rows(csv: &mut String, epoch: usize, split: &str, metrics: &Metrics) {
    let _ = writeln!(csv, "{epoch},{split},mean_f1,{}", metrics.mean_f1);
    let _ = writeln!(csv, "{epoch},{split},mean_iou,{}", metrics.mean_iou);
    let _ = writeln!(csv, "{epoch},{split},accuracy,{}", metrics.accuracy);
}

fn history_csv(history: &TrainHistory, test: Option<&Metrics>) -> String {
    let mut csv = String::from("epoch,split,metric,value\n");
    for record in &history.epochs {
        let _ = writeln!(csv, "{},train,loss,{}", record.epoch, record.mean_train_loss);
        let _ = writeln!(csv, "{},train,lr,{}", record.epoch, record.lr);
        if let Some(norms) = &record.displacement_norms {
            for (layer, value) in norms {
                let _ = writeln!(csv, "{},train,displacement_norm_layer_{layer},{value}", record.epoch);
            }
        }
        if let Some(val) = &record.val {
            metrics_rows(&mut csv, record.epoch, "val", val);
        }
    }
    if let Some(test) = test {
        let epoch = history.epochs.len().saturating_sub(1);
        metrics_rows(&mut csv, epoch, "test", test);
    }
    csv
}

fn cmd_train(config_path: &Path, save_full: bool, threads: usize) -> anyhow::Result<ExitCode> {
    let cfg = match load_config(config_path)? {
        Ok(cfg) => cfg,
        Err(code) => return Ok(code),
    };
    let data = cfg.load_data()?;
    let spec = cfg.model_spec(&data)?;
    let mut model = spec.build::<f32>()?;
    let history = train(&mut model, &data, &cfg.training)?;
    let test_metrics = if data.test.is_empty() {
        None
    } else {
        Some(evaluate(&model, &data.test, threads)?)
    };

    std::fs::create_dir_all(&cfg.output_dir)?;
    std::fs::write(cfg.output_dir.join("metrics.csv"), history_csv(&history, test_metrics.as_ref()))?;
    let ckpt_path = cfg.output_dir.join("adapter.dflt");
    save_adapter_checkpoint(&ckpt_path, &model, &spec)?;
    if save_full {
        save_full_checkpoint(&cfg.output_dir.join("full.dflt"), &model, &spec)?;
    }

    // encoder budget of this run's configuration
    let counts = method_budget(&model.vit_cfg, model.method, &model.adapter, model.upe.as_ref())?;
    let summary = serde_json::json!({
        "method": model.method.name(),
        "rank": match model.method {
            PeftMethod::Lora { rank, .. } => Some(rank),
            PeftMethod::Deflect => model.adapter.rank,
            _ => None,
        },
        "seed": cfg.seed,
        "total_steps": history.total_steps,
        "encoder": {
            "theta_p": counts.theta_p,
            "theta_a": counts.theta_a,
            "tuned_fraction": counts.tuned_fraction(),
        },
        "final_val": history.epochs.last().and_then(|e| e.val.as_ref()).map(|m| serde_json::json!({
            "mean_f1": m.mean_f1, "mean_iou": m.mean_iou, "accuracy": m.accuracy,
        })),
        "test": test_metrics.as_ref().map(|m| serde_json::json!({
            "mean_f1": m.mean_f1, "mean_iou": m.mean_iou, "accuracy": m.accuracy,
        })),
        "checkpoint": ckpt_path,
    });
    std::fs::write(
        cfg.output_dir.join("summary.json"),
        serde_json::to_string_pretty(&summary)?,
    )?;
    println!(
        "{}: tuned fraction {:.4}%, {} steps{}",
        model.method.name(),
        counts.tuned_fraction() * 100.0,
        history.total_steps,
        test_metrics
            .as_ref()
            .map(|m| format!(", test mean F1 {:.4}, mIoU {:.4}", m.mean_f1, m.mean_iou))
            .unwrap_or_default()
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_eval(config_path: &Path, checkpoint: &Path, threads: usize) -> anyhow::Result<ExitCode> {
    let cfg = match load_config(config_path)? {
        Ok(cfg) => cfg,
        Err(code) => return Ok(code),
    };
    let data = cfg.load_data()?;
    let (_spec, model) = load_model_checkpoint::<f32>(checkpoint)?;
    let val = if data.val.is_empty() { None } else { Some(evaluate(&model, &data.val, threads)?) };
    let test = if data.test.is_empty() { None } else { Some(evaluate(&model, &data.test, threads)?) };
    let report = serde_json::json!({
        "checkpoint": checkpoint,
        "val": val.as_ref().map(|m| serde_json::json!({
            "mean_f1": m.mean_f1, "mean_iou": m.mean_iou, "accuracy": m.accuracy,
        })),
        "test": test.as_ref().map(|m| serde_json::json!({
            "mean_f1": m.mean_f1, "mean_iou": m.mean_iou, "accuracy": m.accuracy,
        })),
    });
    std::fs::create_dir_all(&cfg.output_dir)?;
    std::fs::write(cfg.output_dir.join("eval.json"), serde_json::to_string_pretty(&report)?)?;
    println!("{}", serde_json::to_string(&report)?);
    Ok(ExitCode::SUCCESS)
}

// ── diagnose ──────────────────────────────────────────────────────────────

fn print_report(report: &SuiteReport) {
    for line in &report.lines {
        println!(
            "[{}] {}: {} — {}",
            if line.pass { "pass" } else { "FAIL" },
            report.suite,
            line.name,
            line.detail
        );
    }
}

fn cmd_diagnose(config_path: &Path, suite: Suite) -> anyhow::Result<ExitCode> {
    let cfg = match load_config(config_path)? {
        Ok(cfg) => cfg,
        Err(code) => return Ok(code),
    };
    let report = match suite {
        Suite::Algebra => algebra_suite(cfg.seed, 50)?,
        Suite::Norms => norms_suite(cfg.seed)?,
        Suite::Gradients => gradient_suite(cfg.seed)?,
        Suite::Budget => {
            for row in budget_table()? {
                println!("{row}");
            }
            budget_suite()?
        }
    };
    print_report(&report);
    if report.all_pass() {
        println!("{}: all checks passed", report.suite);
        Ok(ExitCode::SUCCESS)
    } else {
        eprintln!("{}: tolerance violations detected", report.suite);
        Ok(ExitCode::from(3))
    }
}
