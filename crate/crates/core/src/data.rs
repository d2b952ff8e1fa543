//! Synthetic datasets, feature-space view augmentation, and multi-positive
//! batch construction.
//!
//! Batches come in two flavors. Supervised batches treat every view that
//! shares the anchor's label as a positive (augmentation siblings included).
//! Self-supervised batches ignore labels and use only the sibling views of
//! the anchor's source sample, so `views_per_sample = 3` yields positive
//! triplets and `|P(i)| = 2` everywhere.
//!
//! All randomness flows through the caller's RNG; equal seeds give
//! bit-identical datasets and batch sequences.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid shape: {0}")]
    InvalidShape(String),
    #[error("dataset has no labels")]
    NoLabels,
    #[error("batch of {requested} requested from {available} samples")]
    BatchTooLarge { requested: usize, available: usize },
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("file not found: {0}")]
    MissingFile(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// In-memory dataset: `N x d_in` features plus optional class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: Vec<Vec<f64>>,
    pub labels: Option<Vec<usize>>,
    pub class_count: usize,
    /// Generation seed, when the dataset is synthetic.
    pub seed: Option<u64>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.first().map_or(0, Vec::len)
    }
}

/// How views are produced from a source sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ViewConfig {
    /// Views per sample: 2 gives standard positive pairs, 3 gives triplets.
    /// Larger values are accepted and behave the same way structurally.
    pub views_per_sample: usize,
    pub noise_std: f64,
    pub mask_prob: f64,
    /// Apply a random rotation in one random coordinate plane per view.
    pub rotation: bool,
}

impl Default for ViewConfig {
    fn default() -> Self {
        Self { views_per_sample: 2, noise_std: 0.1, mask_prob: 0.1, rotation: false }
    }
}

impl ViewConfig {
    pub fn validate(&self) -> Result<(), DataError> {
        if self.views_per_sample < 2 {
            return Err(DataError::InvalidShape(format!(
                "views_per_sample must be >= 2, got {}",
                self.views_per_sample
            )));
        }
        if !(self.noise_std >= 0.0) || !self.noise_std.is_finite() {
            return Err(DataError::InvalidShape(format!("bad noise_std {}", self.noise_std)));
        }
        if !(0.0..1.0).contains(&self.mask_prob) {
            return Err(DataError::InvalidShape(format!(
                "mask_prob must be in [0, 1), got {}",
                self.mask_prob
            )));
        }
        Ok(())
    }
}

/// Whether positives come from labels or only from sibling views.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BatchMode {
    Supervised,
    #[serde(rename = "selfsup")]
    SelfSupervised,
}

impl std::fmt::Display for BatchMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            BatchMode::Supervised => write!(f, "supervised"),
            BatchMode::SelfSupervised => write!(f, "selfsup"),
        }
    }
}

/// Augmented views plus positive-set structure, before any encoder runs.
#[derive(Debug, Clone)]
pub struct BatchPrecursor {
    pub views: Vec<Vec<f64>>,
    pub positive_sets: Vec<Vec<usize>>,
    /// Dataset row each view came from.
    pub source_indices: Vec<usize>,
    pub view_labels: Option<Vec<usize>>,
}

impl BatchPrecursor {
    pub fn len(&self) -> usize {
        self.views.len()
    }

    pub fn is_empty(&self) -> bool {
        self.views.is_empty()
    }
}

/// Isotropic Gaussian blobs around random unit-sphere centers.
pub fn make_gaussian_clusters(
    classes: usize,
    per_class: usize,
    d_in: usize,
    spread: f64,
    seed: u64,
) -> Result<Dataset, DataError> {
    if classes < 2 {
        return Err(DataError::InvalidShape(format!("need >= 2 classes, got {classes}")));
    }
    if per_class < 1 {
        return Err(DataError::InvalidShape("need >= 1 sample per class".into()));
    }
    if d_in < 1 {
        return Err(DataError::InvalidShape("need d_in >= 1".into()));
    }
    if !(spread > 0.0) || !spread.is_finite() {
        return Err(DataError::InvalidShape(format!("spread must be > 0, got {spread}")));
    }
    let mut rng = crate::seeded_rng(seed);
    let mut features = Vec::with_capacity(classes * per_class);
    let mut labels = Vec::with_capacity(classes * per_class);
    for class in 0..classes {
        let mut center: Vec<f64> = (0..d_in).map(|_| rng.sample(StandardNormal)).collect();
        let norm = center.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        for x in &mut center {
            *x /= norm;
        }
        for _ in 0..per_class {
            let sample: Vec<f64> = center
                .iter()
                .map(|&c| c + spread * rng.sample::<f64, _>(StandardNormal))
                .collect();
            features.push(sample);
            labels.push(class);
        }
    }
    Ok(Dataset { features, labels: Some(labels), class_count: classes, seed: Some(seed) })
}

/// Produces `views_per_sample` augmented copies of one sample: Gaussian
/// noise, then independent coordinate masking, then the optional plane
/// rotation.
pub fn augment_views(sample: &[f64], cfg: &ViewConfig, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    (0..cfg.views_per_sample)
        .map(|_| {
            let mut view: Vec<f64> = sample
                .iter()
                .map(|&x| x + cfg.noise_std * rng.sample::<f64, _>(StandardNormal))
                .collect();
            if cfg.mask_prob > 0.0 {
                for x in &mut view {
                    if rng.random::<f64>() < cfg.mask_prob {
                        *x = 0.0;
                    }
                }
            }
            if cfg.rotation && view.len() >= 2 {
                let a = rng.random_range(0..view.len());
                let b = loop {
                    let b = rng.random_range(0..view.len());
                    if b != a {
                        break b;
                    }
                };
                let theta = rng.random_range(0.0..std::f64::consts::TAU);
                let (sin, cos) = theta.sin_cos();
                let (xa, xb) = (view[a], view[b]);
                view[a] = xa * cos - xb * sin;
                view[b] = xa * sin + xb * cos;
            }
            view
        })
        .collect()
}

fn assemble_batch(
    ds: &Dataset,
    chosen: &[usize],
    cfg: &ViewConfig,
    mode: BatchMode,
    rng: &mut impl Rng,
) -> Result<BatchPrecursor, DataError> {
    cfg.validate()?;
    let labels = match mode {
        BatchMode::Supervised => Some(ds.labels.as_ref().ok_or(DataError::NoLabels)?),
        BatchMode::SelfSupervised => None,
    };
    let v = cfg.views_per_sample;
    let mut views = Vec::with_capacity(chosen.len() * v);
    let mut source_indices = Vec::with_capacity(chosen.len() * v);
    let mut view_labels = ds.labels.as_ref().map(|_| Vec::with_capacity(chosen.len() * v));
    for &s in chosen {
        for view in augment_views(&ds.features[s], cfg, rng) {
            views.push(view);
            source_indices.push(s);
            if let (Some(out), Some(all)) = (view_labels.as_mut(), ds.labels.as_ref()) {
                out.push(all[s]);
            }
        }
    }
    let m = views.len();
    let positive_sets: Vec<Vec<usize>> = (0..m)
        .map(|i| {
            (0..m)
                .filter(|&j| {
                    j != i
                        && match (mode, labels) {
                            (BatchMode::Supervised, Some(all)) => {
                                all[source_indices[j]] == all[source_indices[i]]
                            }
                            _ => source_indices[j] == source_indices[i],
                        }
                })
                .collect()
        })
        .collect();
    Ok(BatchPrecursor { views, positive_sets, source_indices, view_labels })
}

fn sample_indices(ds: &Dataset, b: usize, rng: &mut impl Rng) -> Result<Vec<usize>, DataError> {
    if b == 0 {
        return Err(DataError::InvalidShape("batch size must be >= 1".into()));
    }
    if b > ds.len() {
        return Err(DataError::BatchTooLarge { requested: b, available: ds.len() });
    }
    let mut all: Vec<usize> = (0..ds.len()).collect();
    all.shuffle(rng);
    all.truncate(b);
    Ok(all)
}

/// Samples `b` items without replacement and emits `V * b` views with
/// label-driven positive sets.
pub fn build_supervised_batch(
    ds: &Dataset,
    b: usize,
    cfg: &ViewConfig,
    rng: &mut impl Rng,
) -> Result<BatchPrecursor, DataError> {
    if ds.labels.is_none() {
        return Err(DataError::NoLabels);
    }
    let chosen = sample_indices(ds, b, rng)?;
    assemble_batch(ds, &chosen, cfg, BatchMode::Supervised, rng)
}

/// Samples `b` items without replacement and emits `V * b` views whose only
/// positives are sibling views of the same source sample.
pub fn build_selfsup_batch(
    ds: &Dataset,
    b: usize,
    cfg: &ViewConfig,
    rng: &mut impl Rng,
) -> Result<BatchPrecursor, DataError> {
    let chosen = sample_indices(ds, b, rng)?;
    assemble_batch(ds, &chosen, cfg, BatchMode::SelfSupervised, rng)
}

/// One epoch's batches: a fresh shuffle of the dataset chunked into batches
/// of exactly `b` source samples (the final partial chunk is dropped, as in
/// a standard drop-last loader).
pub fn epoch_batches(
    ds: &Dataset,
    b: usize,
    cfg: &ViewConfig,
    mode: BatchMode,
    rng: &mut impl Rng,
) -> Result<Vec<BatchPrecursor>, DataError> {
    if b == 0 {
        return Err(DataError::InvalidShape("batch size must be >= 1".into()));
    }
    if b > ds.len() {
        return Err(DataError::BatchTooLarge { requested: b, available: ds.len() });
    }
    let mut order: Vec<usize> = (0..ds.len()).collect();
    order.shuffle(rng);
    let mut batches = Vec::with_capacity(ds.len() / b);
    for chunk in order.chunks_exact(b) {
        batches.push(assemble_batch(ds, chunk, cfg, mode, rng)?);
    }
    Ok(batches)
}

/// Reads a dataset from `f0,...,f{d-1}[,label]` CSV.
pub fn load_csv_dataset(path: impl AsRef<Path>) -> Result<Dataset, DataError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            DataError::MissingFile(path.display().to_string())
        } else {
            DataError::Io(e)
        }
    })?;
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| DataError::Parse { line: 1, message: "empty file".into() })?;
    let columns: Vec<&str> = header.split(',').collect();
    let labeled = columns.last() == Some(&"label");
    let d = if labeled { columns.len() - 1 } else { columns.len() };
    if d == 0 {
        return Err(DataError::Parse { line: 1, message: "no feature columns".into() });
    }
    for (i, col) in columns.iter().take(d).enumerate() {
        if *col != format!("f{i}") {
            return Err(DataError::Parse {
                line: 1,
                message: format!("expected header column f{i}, got {col:?}"),
            });
        }
    }
    let mut features = Vec::new();
    let mut labels = if labeled { Some(Vec::new()) } else { None };
    for (idx, line) in lines {
        let line_no = idx + 1;
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != columns.len() {
            return Err(DataError::Parse {
                line: line_no,
                message: format!("expected {} fields, got {}", columns.len(), fields.len()),
            });
        }
        let mut row = Vec::with_capacity(d);
        for field in &fields[..d] {
            let value: f64 = field.trim().parse().map_err(|_| DataError::Parse {
                line: line_no,
                message: format!("malformed float {field:?}"),
            })?;
            if !value.is_finite() {
                return Err(DataError::Parse {
                    line: line_no,
                    message: format!("non-finite feature {field:?}"),
                });
            }
            row.push(value);
        }
        features.push(row);
        if let Some(labels) = labels.as_mut() {
            let label: usize = fields[d].trim().parse().map_err(|_| DataError::Parse {
                line: line_no,
                message: format!("malformed label {:?}", fields[d]),
            })?;
            labels.push(label);
        }
    }
    if features.is_empty() {
        return Err(DataError::Parse { line: 1, message: "no data rows".into() });
    }
    let class_count = labels.as_ref().map_or(0, |l| l.iter().max().map_or(0, |m| m + 1));
    Ok(Dataset { features, labels, class_count, seed: None })
}

/// Writes a dataset in the format read by [`load_csv_dataset`]; floats use
/// the shortest representation that round-trips exactly.
pub fn save_csv_dataset(ds: &Dataset, path: impl AsRef<Path>) -> Result<(), DataError> {
    let mut out = String::new();
    let d = ds.dim();
    for i in 0..d {
        if i > 0 {
            out.push(',');
        }
        let _ = write!(out, "f{i}");
    }
    if ds.labels.is_some() {
        out.push_str(",label");
    }
    out.push('\n');
    for (i, row) in ds.features.iter().enumerate() {
        for (j, x) in row.iter().enumerate() {
            if j > 0 {
                out.push(',');
            }
            let _ = write!(out, "{x}");
        }
        if let Some(labels) = &ds.labels {
            let _ = write!(out, ",{}", labels[i]);
        }
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}
