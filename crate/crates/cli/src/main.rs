//! `tcl-lab`: verification, desk-scale contrastive training, and gradient
//! sweeps for the tuned multi-positive contrastive loss and its SupCon
//! baseline.
//!
//! Three subcommands share one flat configuration (JSON file plus flag
//! overrides):
//!
//! - `verify`   runs the property suites (gradient oracle, reduction
//!   identity, coefficient guarantees, structural invariants) and exits
//!   nonzero if any fails;
//! - `train`    contrastive pre-training followed by a linear probe,
//!   emitting `metrics.csv`, `trace.json`, and `model.ckpt`;
//! - `gradscan` evaluates gradient-term magnitudes over a k1/k2 grid on a
//!   frozen batch set, emitting `sweep.csv`.

mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::{
    resolve_gradscan, resolve_train, resolve_verify, ConfigError, GradscanRun, RawConfig,
    TrainRun, VerifyRun, EXIT_CHECK_FAILED, EXIT_CONFIG,
};
use tcl_core::data::BatchMode;
use tcl_core::gradlab::{k_sweep, BatchSpec, KSweepConfig, SweepTrain};
use tcl_core::losses::LossKind;
use tcl_core::trainer::{run_experiment, save_checkpoint};
use tcl_core::verify::run_all;

#[derive(Parser)]
#[command(name = "tcl-lab", version, about = "Contrastive-loss laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the property suites and exit 0 iff all pass.
    Verify(Flags),
    /// Contrastive pre-training plus linear probe; writes metrics.csv,
    /// trace.json, and model.ckpt.
    Train(Flags),
    /// Gradient-magnitude sweep over a k1/k2 grid; writes sweep.csv.
    Gradscan(Flags),
}

/// Every override; unset flags defer to the config file, then defaults.
#[derive(Args, Default)]
struct Flags {
    /// Flat JSON config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// RNG seed; required for train and gradscan.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (default "out").
    #[arg(long)]
    out: Option<PathBuf>,

    /// Loss to train with: supcon | tcl.
    #[arg(long)]
    loss: Option<String>,
    /// Positive-set mode: supervised | selfsup.
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    k1: Option<f64>,
    #[arg(long)]
    k2: Option<f64>,

    /// Views per sample (2 = pairs, 3 = triplets).
    #[arg(long)]
    views: Option<usize>,
    #[arg(long)]
    noise_std: Option<f64>,
    #[arg(long)]
    mask_prob: Option<f64>,
    #[arg(long)]
    rotation: Option<bool>,

    #[arg(long)]
    classes: Option<usize>,
    #[arg(long)]
    per_class: Option<usize>,
    #[arg(long)]
    d_in: Option<usize>,
    #[arg(long)]
    spread: Option<f64>,
    /// Train on a CSV dataset instead of synthetic clusters.
    #[arg(long)]
    dataset_csv: Option<PathBuf>,

    /// Encoder layer sizes, comma-separated (input first).
    #[arg(long, value_delimiter = ',')]
    encoder: Option<Vec<usize>>,
    /// Projector layer sizes, comma-separated (input first).
    #[arg(long, value_delimiter = ',')]
    projector: Option<Vec<usize>>,

    #[arg(long)]
    base_lr: Option<f64>,
    #[arg(long)]
    momentum: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    probe_epochs: Option<usize>,
    #[arg(long)]
    probe_lr: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
    /// Log gradient-term magnitudes every N steps (0 = off).
    #[arg(long)]
    grad_log_every: Option<usize>,
    /// Worker threads (TCL_LAB_THREADS also caps this).
    #[arg(long)]
    threads: Option<usize>,

    #[arg(long, value_delimiter = ',')]
    k1_grid: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    k2_grid: Option<Vec<f64>>,
    /// Frozen batches per sweep grid point.
    #[arg(long)]
    sweep_batches: Option<usize>,
    /// Also train and probe at every grid point.
    #[arg(long)]
    with_top1: Option<bool>,

    #[arg(long)]
    oracle_batches: Option<usize>,
    #[arg(long)]
    reduction_batches: Option<usize>,
    #[arg(long)]
    theorem_batches: Option<usize>,
}

impl Flags {
    fn into_raw(self) -> Result<RawConfig, ConfigError> {
        let loss = match self.loss.as_deref() {
            None => None,
            Some("supcon") => Some(LossKind::SupCon),
            Some("tcl") => Some(LossKind::Tcl),
            Some(other) => {
                return Err(ConfigError(format!("--loss must be supcon or tcl, got {other:?}")))
            }
        };
        let mode = match self.mode.as_deref() {
            None => None,
            Some("supervised") => Some(BatchMode::Supervised),
            Some("selfsup") => Some(BatchMode::SelfSupervised),
            Some(other) => {
                return Err(ConfigError(format!(
                    "--mode must be supervised or selfsup, got {other:?}"
                )))
            }
        };
        Ok(RawConfig {
            command: None,
            seed: self.seed,
            out_dir: self.out,
            loss,
            mode,
            tau: self.tau,
            k1: self.k1,
            k2: self.k2,
            views: self.views,
            noise_std: self.noise_std,
            mask_prob: self.mask_prob,
            rotation: self.rotation,
            classes: self.classes,
            per_class: self.per_class,
            d_in: self.d_in,
            spread: self.spread,
            dataset_csv: self.dataset_csv,
            encoder: self.encoder,
            projector: self.projector,
            base_lr: self.base_lr,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            epochs: self.epochs,
            probe_epochs: self.probe_epochs,
            probe_lr: self.probe_lr,
            batch: self.batch,
            grad_log_every: self.grad_log_every,
            threads: self.threads,
            k1_grid: self.k1_grid,
            k2_grid: self.k2_grid,
            sweep_batches: self.sweep_batches,
            with_top1: self.with_top1,
            oracle_batches: self.oracle_batches,
            reduction_batches: self.reduction_batches,
            theorem_batches: self.theorem_batches,
        })
    }
}

fn merged_config(flags: Flags) -> Result<RawConfig, ConfigError> {
    let mut raw = match &flags.config {
        Some(path) => RawConfig::load(path)?,
        None => RawConfig::default(),
    };
    raw.overlay(flags.into_raw()?);
    Ok(raw)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (name, flags) = match cli.command {
        Command::Verify(flags) => ("verify", flags),
        Command::Train(flags) => ("train", flags),
        Command::Gradscan(flags) => ("gradscan", flags),
    };
    let raw = match merged_config(flags) {
        Ok(raw) => raw,
        Err(e) => {
            eprintln!("config error: {e}");
            return ExitCode::from(EXIT_CONFIG);
        }
    };
    let outcome = match name {
        "verify" => resolve_verify(&raw).map(|run| cmd_verify(&run)),
        "train" => resolve_train(&raw).map(|run| cmd_train(&run)),
        "gradscan" => resolve_gradscan(&raw).map(|run| cmd_gradscan(&run)),
        _ => unreachable!(),
    };
    match outcome {
        Err(e) => {
            eprintln!("config error: {e}");
            ExitCode::from(EXIT_CONFIG)
        }
        Ok(Ok(code)) => ExitCode::from(code),
        Ok(Err(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_CHECK_FAILED)
        }
    }
}

fn cmd_verify(run: &VerifyRun) -> Result<u8, Box<dyn std::error::Error>> {
    let reports = run_all(&run.config);
    println!("{:<34} {:>8} {:>9}  details", "property", "status", "checked");
    println!("{}", "-".repeat(78));
    for report in &reports {
        println!(
            "{:<34} {:>8} {:>9}  {}",
            report.name,
            if report.passed { "PASS" } else { "FAIL" },
            report.checked,
            report.details
        );
    }
    println!("skipped checks: none");
    let failures: Vec<_> = reports.iter().filter(|r| !r.passed).collect();
    if failures.is_empty() {
        println!("all {} property suites passed", reports.len());
        return Ok(0);
    }
    let dump_path = run.out_dir.join("verify_failures.json");
    let dump = serde_json::to_string_pretty(&failures)?;
    output::atomic_write(&dump_path, &dump)?;
    for failure in &failures {
        eprintln!("FAILED: {}", failure.name);
        for counterexample in failure.counterexamples.iter().take(3) {
            eprintln!("  {counterexample}");
        }
    }
    eprintln!("counterexample dump: {}", dump_path.display());
    Ok(EXIT_CHECK_FAILED)
}

fn cmd_train(run: &TrainRun) -> Result<u8, Box<dyn std::error::Error>> {
    let dataset = run.dataset.load()?;
    let result = run_experiment(&dataset, &run.train, &run.probe)?;
    for warning in &result.trace.warnings {
        eprintln!("warning: {warning}");
    }

    let metrics = output::metrics_csv(&result.trace, &result.probe.records);
    output::atomic_write(&run.out_dir.join("metrics.csv"), &metrics)?;

    let trace = serde_json::json!({
        "config": &run.train,
        "seed": run.seed,
        "train": &result.trace,
        "probe": &result.probe.records,
        "top1": result.probe.top1,
    });
    output::atomic_write(&run.out_dir.join("trace.json"), &serde_json::to_string_pretty(&trace)?)?;
    save_checkpoint(&result.model, run.out_dir.join("model.ckpt"))?;

    let final_loss = result.trace.records.last().map(|r| r.loss);
    println!(
        "trained {} {} epochs (final loss {}), probe top1 {:.4}",
        run.train.loss_kind,
        result.trace.records.len(),
        final_loss.map(|l| format!("{l:.6}")).unwrap_or_else(|| "n/a".into()),
        result.probe.top1
    );
    println!("wrote {}", run.out_dir.join("metrics.csv").display());
    Ok(0)
}

fn cmd_gradscan(run: &GradscanRun) -> Result<u8, Box<dyn std::error::Error>> {
    let train = match &run.train {
        None => None,
        Some((source, train_cfg, probe_cfg)) => Some(SweepTrain {
            dataset: source.load()?,
            train: train_cfg.clone(),
            probe: *probe_cfg,
        }),
    };
    let config = KSweepConfig {
        tau: run.tau,
        k1_grid: run.k1_grid.clone(),
        k2_grid: run.k2_grid.clone(),
        n_batches: run.sweep_batches,
        batch_spec: BatchSpec::default(),
        seed: run.seed,
        train,
    };
    let rows = k_sweep(&config)?;
    output::atomic_write(&run.out_dir.join("sweep.csv"), &output::sweep_csv(&rows))?;
    println!(
        "swept {} grid points over {} frozen batches -> {}",
        rows.len(),
        run.sweep_batches,
        run.out_dir.join("sweep.csv").display()
    );
    Ok(0)
}
