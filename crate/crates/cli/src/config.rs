//! Flat JSON run configuration with CLI-flag overrides.
//!
//! The file schema is one flat object with a top-level `command` field;
//! unknown keys are rejected. Every field a flag can set exists in the
//! file too, flags win, and anything left unset falls back to the
//! mode-dependent defaults below.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use tcl_core::data::{BatchMode, ViewConfig};
use tcl_core::losses::{LossKind, LossParams};
use tcl_core::trainer::{GradLogConfig, GradProbe, MlpSpec, OptimConfig, ProbeConfig, TrainConfig};
use tcl_core::verify::VerifyConfig;

/// Exit codes: 1 for failed checks or runtime errors, 2 for configuration
/// problems (clap uses 2 for usage errors as well).
pub const EXIT_CHECK_FAILED: u8 = 1;
pub const EXIT_CONFIG: u8 = 2;

#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl std::error::Error for ConfigError {}

/// The on-disk schema. Everything optional; `command` required when the
/// file (rather than the CLI) selects the command.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawConfig {
    pub command: Option<String>,
    pub seed: Option<u64>,
    pub out_dir: Option<PathBuf>,

    pub loss: Option<LossKind>,
    pub mode: Option<BatchMode>,
    pub tau: Option<f64>,
    pub k1: Option<f64>,
    pub k2: Option<f64>,

    pub views: Option<usize>,
    pub noise_std: Option<f64>,
    pub mask_prob: Option<f64>,
    pub rotation: Option<bool>,

    pub classes: Option<usize>,
    pub per_class: Option<usize>,
    pub d_in: Option<usize>,
    pub spread: Option<f64>,
    pub dataset_csv: Option<PathBuf>,

    pub encoder: Option<Vec<usize>>,
    pub projector: Option<Vec<usize>>,

    pub base_lr: Option<f64>,
    pub momentum: Option<f64>,
    pub weight_decay: Option<f64>,
    pub epochs: Option<usize>,
    pub probe_epochs: Option<usize>,
    pub probe_lr: Option<f64>,
    pub batch: Option<usize>,
    pub grad_log_every: Option<usize>,
    pub threads: Option<usize>,

    pub k1_grid: Option<Vec<f64>>,
    pub k2_grid: Option<Vec<f64>>,
    pub sweep_batches: Option<usize>,
    pub with_top1: Option<bool>,

    pub oracle_batches: Option<usize>,
    pub reduction_batches: Option<usize>,
    pub theorem_batches: Option<usize>,
}

impl RawConfig {
    pub fn load(path: &std::path::Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError(format!("cannot read {}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| ConfigError(format!("invalid config {}: {e}", path.display())))
    }

    /// Overlays `other` (CLI flags) on top of `self` (file values).
    pub fn overlay(&mut self, other: RawConfig) {
        macro_rules! take {
            ($($field:ident),* $(,)?) => {
                $(if other.$field.is_some() { self.$field = other.$field; })*
            };
        }
        take!(
            command, seed, out_dir, loss, mode, tau, k1, k2, views, noise_std, mask_prob,
            rotation, classes, per_class, d_in, spread, dataset_csv, encoder, projector,
            base_lr, momentum, weight_decay, epochs, probe_epochs, probe_lr, batch,
            grad_log_every, threads, k1_grid, k2_grid, sweep_batches, with_top1,
            oracle_batches, reduction_batches, theorem_batches,
        );
    }
}

/// Where the training data comes from.
#[derive(Debug, Clone)]
pub enum DatasetSource {
    Synthetic { classes: usize, per_class: usize, d_in: usize, spread: f64, seed: u64 },
    Csv(PathBuf),
}

impl DatasetSource {
    pub fn load(&self) -> Result<tcl_core::data::Dataset, ConfigError> {
        match self {
            DatasetSource::Synthetic { classes, per_class, d_in, spread, seed } => {
                tcl_core::data::make_gaussian_clusters(*classes, *per_class, *d_in, *spread, *seed)
                    .map_err(|e| ConfigError(format!("synthetic dataset: {e}")))
            }
            DatasetSource::Csv(path) => tcl_core::data::load_csv_dataset(path)
                .map_err(|e| ConfigError(format!("dataset {}: {e}", path.display()))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainRun {
    pub dataset: DatasetSource,
    pub train: TrainConfig,
    pub probe: ProbeConfig,
    pub out_dir: PathBuf,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct GradscanRun {
    pub tau: f64,
    pub k1_grid: Vec<f64>,
    pub k2_grid: Vec<f64>,
    pub sweep_batches: usize,
    pub seed: u64,
    /// Training setup for the optional per-point probe accuracy.
    pub train: Option<(DatasetSource, TrainConfig, ProbeConfig)>,
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone)]
pub struct VerifyRun {
    pub config: VerifyConfig,
    pub out_dir: PathBuf,
}

fn mode_defaults(mode: BatchMode) -> (f64, f64, usize, f64) {
    // (k1, k2, views, base_lr)
    match mode {
        BatchMode::Supervised => (5000.0, 1.0, 2, 0.05),
        BatchMode::SelfSupervised => (1.0, 1.5, 3, 0.4),
    }
}

fn loss_params(raw: &RawConfig, mode: BatchMode) -> Result<LossParams, ConfigError> {
    let (k1_default, k2_default, _, _) = mode_defaults(mode);
    LossParams::new(
        raw.tau.unwrap_or(0.1),
        raw.k1.unwrap_or(k1_default),
        raw.k2.unwrap_or(k2_default),
    )
    .map_err(|e| ConfigError(e.to_string()))
}

fn view_config(raw: &RawConfig, mode: BatchMode) -> Result<ViewConfig, ConfigError> {
    let (_, _, views_default, _) = mode_defaults(mode);
    let cfg = ViewConfig {
        views_per_sample: raw.views.unwrap_or(views_default),
        noise_std: raw.noise_std.unwrap_or(0.1),
        mask_prob: raw.mask_prob.unwrap_or(0.1),
        rotation: raw.rotation.unwrap_or(false),
    };
    cfg.validate().map_err(|e| ConfigError(e.to_string()))?;
    Ok(cfg)
}

fn mlp_spec(raw: &RawConfig) -> Result<MlpSpec, ConfigError> {
    let spec = MlpSpec {
        encoder: raw.encoder.clone().unwrap_or_else(|| vec![32, 64, 32]),
        projector: raw.projector.clone().unwrap_or_else(|| vec![32, 32, 16]),
    };
    spec.validate().map_err(|e| ConfigError(e.to_string()))?;
    Ok(spec)
}

fn dataset_source(raw: &RawConfig, seed: u64) -> DatasetSource {
    match &raw.dataset_csv {
        Some(path) => DatasetSource::Csv(path.clone()),
        None => DatasetSource::Synthetic {
            classes: raw.classes.unwrap_or(10),
            per_class: raw.per_class.unwrap_or(100),
            d_in: raw.d_in.unwrap_or(32),
            spread: raw.spread.unwrap_or(0.15),
            seed,
        },
    }
}

fn require_seed(raw: &RawConfig, command: &str) -> Result<u64, ConfigError> {
    raw.seed.ok_or_else(|| {
        ConfigError(format!("--seed (or a `seed` config entry) is required for {command}"))
    })
}

fn threads(raw: &RawConfig) -> usize {
    raw.threads
        .or_else(|| std::env::var("TCL_LAB_THREADS").ok().and_then(|v| v.parse().ok()))
        .unwrap_or(1)
        .max(1)
}

pub fn resolve_train(raw: &RawConfig) -> Result<TrainRun, ConfigError> {
    let seed = require_seed(raw, "train")?;
    let mode = raw.mode.unwrap_or(BatchMode::Supervised);
    let loss_kind = raw.loss.unwrap_or(LossKind::Tcl);
    let params = loss_params(raw, mode)?;
    let (_, _, _, lr_default) = mode_defaults(mode);
    let optim = OptimConfig {
        base_lr: raw.base_lr.unwrap_or(lr_default),
        momentum: raw.momentum.unwrap_or(0.9),
        weight_decay: raw.weight_decay.unwrap_or(1e-4),
        epochs: raw.epochs.unwrap_or(100),
    };
    let grad_log = match raw.grad_log_every.unwrap_or(0) {
        0 => None,
        every => Some(GradLogConfig {
            every,
            probes: vec![
                GradProbe { kind: loss_kind, params },
                GradProbe {
                    kind: LossKind::SupCon,
                    params: LossParams::supcon_equivalent(params.tau)
                        .map_err(|e| ConfigError(e.to_string()))?,
                },
            ],
        }),
    };
    let train = TrainConfig {
        mode,
        loss_kind,
        loss_params: params,
        mlp: mlp_spec(raw)?,
        optim,
        view_cfg: view_config(raw, mode)?,
        batch_size: raw.batch.unwrap_or(64),
        seed,
        grad_log,
        threads: threads(raw),
    };
    let probe = ProbeConfig {
        epochs: raw.probe_epochs.unwrap_or(50),
        lr: raw.probe_lr.unwrap_or(0.5),
        momentum: 0.9,
        weight_decay: 1e-4,
        batch_size: raw.batch.unwrap_or(64),
        holdout_fraction: 0.2,
        seed,
    };
    Ok(TrainRun {
        dataset: dataset_source(raw, seed),
        train,
        probe,
        out_dir: raw.out_dir.clone().unwrap_or_else(|| PathBuf::from("out")),
        seed,
    })
}

pub fn resolve_gradscan(raw: &RawConfig) -> Result<GradscanRun, ConfigError> {
    let seed = require_seed(raw, "gradscan")?;
    let k1_grid = raw.k1_grid.clone().unwrap_or_else(|| vec![1.0, 1e3, 5e3, 5e4]);
    let k2_grid = raw.k2_grid.clone().unwrap_or_else(|| vec![1.0]);
    if k1_grid.is_empty() || k2_grid.is_empty() {
        return Err(ConfigError("k1_grid and k2_grid must be non-empty".into()));
    }
    let with_top1 = raw.with_top1.unwrap_or(false);
    let train = if with_top1 {
        let run = resolve_train(raw)?;
        Some((run.dataset, run.train, run.probe))
    } else {
        None
    };
    Ok(GradscanRun {
        tau: raw.tau.unwrap_or(0.1),
        k1_grid,
        k2_grid,
        sweep_batches: raw.sweep_batches.unwrap_or(50),
        seed,
        train,
        out_dir: raw.out_dir.clone().unwrap_or_else(|| PathBuf::from("out")),
    })
}

pub fn resolve_verify(raw: &RawConfig) -> Result<VerifyRun, ConfigError> {
    let mut config = VerifyConfig {
        seed: raw.seed.unwrap_or(0x7c1),
        ..VerifyConfig::default()
    };
    if let Some(n) = raw.oracle_batches {
        config.oracle_batches = n;
    }
    if let Some(n) = raw.reduction_batches {
        config.reduction_batches = n;
    }
    if let Some(n) = raw.theorem_batches {
        config.theorem_batches = n;
    }
    if config.oracle_batches == 0 || config.reduction_batches == 0 || config.theorem_batches == 0 {
        return Err(ConfigError("verify batch counts must be >= 1".into()));
    }
    match std::env::var("TCL_LAB_FAULT").ok().as_deref() {
        None | Some("") => {}
        Some("flip-y-sign") => config.fault.flip_y_sign = true,
        Some(other) => return Err(ConfigError(format!("unknown TCL_LAB_FAULT value {other:?}"))),
    }
    Ok(VerifyRun {
        config,
        out_dir: raw.out_dir.clone().unwrap_or_else(|| PathBuf::from("out")),
    })
}
