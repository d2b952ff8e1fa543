//! MLP encoder + projector, SGD with momentum and cosine annealing, the
//! contrastive training loop, the linear probe, and checkpointing.
//!
//! The trainer descends the gradient of the total contrastive loss with
//! respect to every embedding (the full batch gradient, as any autograd
//! implementation would), scaled by the number of anchors in the loss sum
//! so the learning rate is batch-size independent. The chain rule through
//! the projector's L2 normalization uses the Jacobian
//! `(I - z z^T) / ||v||` between the raw projector output `v` and the unit
//! embedding `z`; MLP backprop below that is standard.
//!
//! Per-sample backward passes are reduced over a fixed number of contiguous
//! chunks, so results are bit-identical for any worker count.

use std::io::Read;
use std::path::Path;
use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{self, BatchMode, DataError, Dataset, ViewConfig};
use crate::gradlab::{self, TermMagnitudes};
use crate::losses::{
    cross_entropy, full_batch_grad, ContrastiveBatch, LossError, LossKind, LossParams,
};
use crate::numerics::{dot_slices, Embedding, ZERO_NORM_THRESHOLD};

/// Number of reduction chunks per batch; fixed so that gradient sums do not
/// depend on how many workers happen to run.
const GRAD_CHUNKS: usize = 8;

/// Stream offsets for deriving independent RNG streams from one seed.
const STREAM_INIT: u64 = 0x7c1_0001;
const STREAM_DATA: u64 = 0x7c1_0002;
const STREAM_PROBE: u64 = 0x7c1_0003;
const STREAM_SPLIT: u64 = 0x7c1_0004;
const JITTER_SEED: u64 = 0x7c1_00ff;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("dataset has no labels")]
    NoLabels,
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("checkpoint version {found} is not supported")]
    VersionMismatch { found: u8 },
    #[error("corrupt checkpoint: {0}")]
    CorruptFile(String),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Data(#[from] DataError),
}

/// Layer sizes for the encoder and projector MLPs.
///
/// `encoder` runs `d_in -> ... -> d_rep`, `projector` runs
/// `d_rep -> ... -> d_z`; ReLU sits between layers, outputs are linear, and
/// the projector output is L2-normalized into an [`Embedding`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub encoder: Vec<usize>,
    pub projector: Vec<usize>,
}

impl MlpSpec {
    pub fn validate(&self) -> Result<(), TrainError> {
        for (name, sizes) in [("encoder", &self.encoder), ("projector", &self.projector)] {
            if sizes.len() < 2 {
                return Err(TrainError::Config(format!(
                    "{name} needs at least an input and an output size"
                )));
            }
            if sizes.iter().any(|&s| s == 0) {
                return Err(TrainError::Config(format!("{name} has a zero-width layer")));
            }
        }
        if self.encoder.last() != self.projector.first() {
            return Err(TrainError::Config(format!(
                "projector input {} does not match encoder output {}",
                self.projector[0],
                self.encoder.last().unwrap()
            )));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.encoder[0]
    }

    pub fn representation_dim(&self) -> usize {
        *self.encoder.last().unwrap()
    }

    pub fn embedding_dim(&self) -> usize {
        *self.projector.last().unwrap()
    }
}

/// SGD-with-momentum settings and the cosine learning-rate schedule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimConfig {
    pub base_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
}

impl OptimConfig {
    pub fn new(base_lr: f64, epochs: usize) -> Self {
        Self { base_lr, momentum: 0.9, weight_decay: 1e-4, epochs }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.base_lr > 0.0) || !self.base_lr.is_finite() {
            return Err(TrainError::Config(format!("base_lr must be > 0, got {}", self.base_lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(TrainError::Config(format!(
                "momentum must be in [0, 1), got {}",
                self.momentum
            )));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(TrainError::Config("weight_decay must be >= 0".into()));
        }
        Ok(())
    }

    /// Cosine annealing: `base_lr * (1 + cos(pi * epoch / epochs)) / 2`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        if self.epochs == 0 {
            return self.base_lr;
        }
        let t = epoch as f64 / self.epochs as f64;
        self.base_lr * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
    }
}

/// One fully connected layer; weights are stored row-major `[out][in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Linear {
    fn init(in_dim: usize, out_dim: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        Self {
            in_dim,
            out_dim,
            weights: (0..in_dim * out_dim).map(|_| rng.random_range(-bound..bound)).collect(),
            bias: (0..out_dim).map(|_| rng.random_range(-bound..bound)).collect(),
        }
    }

    fn forward(&self, input: &[f64], out: &mut Vec<f64>) {
        out.clear();
        for o in 0..self.out_dim {
            let row = &self.weights[o * self.in_dim..(o + 1) * self.in_dim];
            out.push(self.bias[o] + dot_slices(row, input));
        }
    }
}

#[derive(Debug, Clone)]
struct Mlp {
    layers: Vec<Linear>,
}

impl Mlp {
    fn init(sizes: &[usize], rng: &mut impl Rng) -> Self {
        let layers =
            sizes.windows(2).map(|w| Linear::init(w[0], w[1], rng)).collect();
        Self { layers }
    }

    /// Post-activation output of every layer (ReLU on all but the last).
    fn forward_traced(&self, input: &[f64]) -> Vec<Vec<f64>> {
        let mut trace: Vec<Vec<f64>> = Vec::with_capacity(self.layers.len());
        let mut current = input;
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            let mut out = Vec::with_capacity(layer.out_dim);
            layer.forward(current, &mut out);
            if l < last {
                for x in &mut out {
                    if *x < 0.0 {
                        *x = 0.0;
                    }
                }
            }
            trace.push(out);
            current = trace.last().unwrap();
        }
        trace
    }

    /// Accumulates parameter gradients for one sample and returns the
    /// gradient with respect to the MLP input.
    fn backward_sample(
        &self,
        input: &[f64],
        trace: &[Vec<f64>],
        upstream: &[f64],
        grads: &mut [LayerGrads],
    ) -> Vec<f64> {
        let last = self.layers.len() - 1;
        let mut delta = upstream.to_vec();
        for l in (0..self.layers.len()).rev() {
            if l < last {
                // ReLU derivative from the post-activation values.
                for (d, &a) in delta.iter_mut().zip(&trace[l]) {
                    if a <= 0.0 {
                        *d = 0.0;
                    }
                }
            }
            let layer = &self.layers[l];
            let layer_input: &[f64] = if l == 0 { input } else { &trace[l - 1] };
            let g = &mut grads[l];
            for o in 0..layer.out_dim {
                let d = delta[o];
                g.bias[o] += d;
                let row = &mut g.weights[o * layer.in_dim..(o + 1) * layer.in_dim];
                for (w, &x) in row.iter_mut().zip(layer_input) {
                    *w += d * x;
                }
            }
            if l > 0 {
                let mut down = vec![0.0; layer.in_dim];
                for o in 0..layer.out_dim {
                    let d = delta[o];
                    let row = &layer.weights[o * layer.in_dim..(o + 1) * layer.in_dim];
                    for (acc, &w) in down.iter_mut().zip(row) {
                        *acc += d * w;
                    }
                }
                delta = down;
            } else {
                let mut down = vec![0.0; layer.in_dim];
                for o in 0..layer.out_dim {
                    let d = delta[o];
                    let row = &layer.weights[o * layer.in_dim..(o + 1) * layer.in_dim];
                    for (acc, &w) in down.iter_mut().zip(row) {
                        *acc += d * w;
                    }
                }
                return down;
            }
        }
        unreachable!("backward_sample always returns from layer 0");
    }
}

/// Encoder + projector pair.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    spec: MlpSpec,
    encoder: Vec<Linear>,
    projector: Vec<Linear>,
}

impl Model {
    /// Seeded initialization: every weight and bias uniform in
    /// `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    pub fn init(spec: &MlpSpec, seed: u64) -> Result<Self, TrainError> {
        spec.validate()?;
        let mut rng = crate::seeded_rng(seed ^ STREAM_INIT);
        let encoder = Mlp::init(&spec.encoder, &mut rng);
        let projector = Mlp::init(&spec.projector, &mut rng);
        Ok(Self { spec: spec.clone(), encoder: encoder.layers, projector: projector.layers })
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    fn encoder_mlp(&self) -> Mlp {
        Mlp { layers: self.encoder.clone() }
    }

    fn projector_mlp(&self) -> Mlp {
        Mlp { layers: self.projector.clone() }
    }

    /// Every parameter flattened in a fixed order; used for checkpointing,
    /// finite differences, and bitwise isolation checks.
    pub fn params_flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for layer in self.encoder.iter().chain(&self.projector) {
            out.extend_from_slice(&layer.weights);
            out.extend_from_slice(&layer.bias);
        }
        out
    }

    pub fn set_params_flat(&mut self, params: &[f64]) -> Result<(), TrainError> {
        let expected: usize = self
            .encoder
            .iter()
            .chain(&self.projector)
            .map(|l| l.weights.len() + l.bias.len())
            .sum();
        if params.len() != expected {
            return Err(TrainError::DimensionMismatch { expected, got: params.len() });
        }
        let mut offset = 0;
        for layer in self.encoder.iter_mut().chain(self.projector.iter_mut()) {
            let w = layer.weights.len();
            layer.weights.copy_from_slice(&params[offset..offset + w]);
            offset += w;
            let b = layer.bias.len();
            layer.bias.copy_from_slice(&params[offset..offset + b]);
            offset += b;
        }
        Ok(())
    }

    /// Encoder output only, for the probe and representation consumers.
    pub fn representations(&self, features: &[Vec<f64>]) -> Result<Vec<Vec<f64>>, TrainError> {
        let enc = self.encoder_mlp();
        features
            .iter()
            .map(|f| {
                if f.len() != self.spec.input_dim() {
                    return Err(TrainError::DimensionMismatch {
                        expected: self.spec.input_dim(),
                        got: f.len(),
                    });
                }
                Ok(enc.forward_traced(f).pop().unwrap())
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrads {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl LayerGrads {
    fn zeros_like(layer: &Linear) -> Self {
        Self { weights: vec![0.0; layer.weights.len()], bias: vec![0.0; layer.bias.len()] }
    }

    fn add_assign(&mut self, other: &Self) {
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            *a += b;
        }
        for (a, b) in self.bias.iter_mut().zip(&other.bias) {
            *a += b;
        }
    }
}

/// Gradients for every model parameter, mirroring the model layout.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads {
    pub encoder: Vec<LayerGrads>,
    pub projector: Vec<LayerGrads>,
}

impl ParamGrads {
    pub fn zeros_like(model: &Model) -> Self {
        Self {
            encoder: model.encoder.iter().map(LayerGrads::zeros_like).collect(),
            projector: model.projector.iter().map(LayerGrads::zeros_like).collect(),
        }
    }

    fn add_assign(&mut self, other: &Self) {
        for (a, b) in self.encoder.iter_mut().zip(&other.encoder) {
            a.add_assign(b);
        }
        for (a, b) in self.projector.iter_mut().zip(&other.projector) {
            a.add_assign(b);
        }
    }

    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for layer in self.encoder.iter().chain(&self.projector) {
            out.extend_from_slice(&layer.weights);
            out.extend_from_slice(&layer.bias);
        }
        out
    }
}

/// Per-sample activations cached by the forward pass.
pub struct ForwardCache {
    enc_traces: Vec<Vec<Vec<f64>>>,
    proj_traces: Vec<Vec<Vec<f64>>>,
    /// Norm of the (possibly jittered) raw projector output per sample.
    norms: Vec<f64>,
    embeddings: Vec<Vec<f64>>,
}

/// Forward pass returning representations and unit embeddings.
pub fn forward(
    model: &Model,
    features: &[Vec<f64>],
) -> Result<(Vec<Vec<f64>>, Vec<Embedding>), TrainError> {
    let (reps, embeddings, _) = forward_cached(model, features)?;
    Ok((reps, embeddings))
}

pub fn forward_cached(
    model: &Model,
    features: &[Vec<f64>],
) -> Result<(Vec<Vec<f64>>, Vec<Embedding>, ForwardCache), TrainError> {
    let enc = model.encoder_mlp();
    let proj = model.projector_mlp();
    let d_in = model.spec.input_dim();
    let mut reps = Vec::with_capacity(features.len());
    let mut embeddings = Vec::with_capacity(features.len());
    let mut cache = ForwardCache {
        enc_traces: Vec::with_capacity(features.len()),
        proj_traces: Vec::with_capacity(features.len()),
        norms: Vec::with_capacity(features.len()),
        embeddings: Vec::with_capacity(features.len()),
    };
    for f in features {
        if f.len() != d_in {
            return Err(TrainError::DimensionMismatch { expected: d_in, got: f.len() });
        }
        let enc_trace = enc.forward_traced(f);
        let rep = enc_trace.last().unwrap().clone();
        let mut proj_trace = proj.forward_traced(&rep);
        let v = proj_trace.last_mut().unwrap();
        let mut norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm <= ZERO_NORM_THRESHOLD {
            // Degenerate projector output: nudge deterministically rather
            // than fail, so pathological initializations stay trainable.
            let mut jitter_rng = crate::seeded_rng(JITTER_SEED);
            for x in v.iter_mut() {
                *x += jitter_rng.random_range(-1e-8..1e-8);
            }
            norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(ZERO_NORM_THRESHOLD);
        }
        let z: Vec<f64> = v.iter().map(|x| x / norm).collect();
        let embedding = Embedding::try_from_unit(z.clone())
            .map_err(|e| TrainError::Config(format!("normalization failed: {e}")))?;
        cache.enc_traces.push(enc_trace);
        cache.proj_traces.push(proj_trace);
        cache.norms.push(norm);
        cache.embeddings.push(z);
        reps.push(rep);
        embeddings.push(embedding);
    }
    Ok((reps, embeddings, cache))
}

/// Backprop of `dL/dz` (one row per sample) into parameter gradients,
/// including the normalization Jacobian. `threads` caps the worker count;
/// the reduction order is fixed regardless.
pub fn backward(
    model: &Model,
    features: &[Vec<f64>],
    cache: &ForwardCache,
    upstream: &[Vec<f64>],
    threads: usize,
) -> Result<ParamGrads, TrainError> {
    if upstream.len() != features.len() {
        return Err(TrainError::DimensionMismatch {
            expected: features.len(),
            got: upstream.len(),
        });
    }
    let d_z = model.spec.embedding_dim();
    if let Some(bad) = upstream.iter().find(|g| g.len() != d_z) {
        return Err(TrainError::DimensionMismatch { expected: d_z, got: bad.len() });
    }
    let n = features.len();
    let chunk_count = GRAD_CHUNKS.min(n.max(1));
    let bounds: Vec<(usize, usize)> = (0..chunk_count)
        .map(|c| (c * n / chunk_count, (c + 1) * n / chunk_count))
        .collect();

    let run_chunk = |range: (usize, usize)| -> ParamGrads {
        let mut partial = ParamGrads::zeros_like(model);
        let enc = model.encoder_mlp();
        let proj = model.projector_mlp();
        for s in range.0..range.1 {
            let g = &upstream[s];
            let z = &cache.embeddings[s];
            let radial = dot_slices(z, g);
            let dv: Vec<f64> =
                g.iter().zip(z).map(|(gi, zi)| (gi - radial * zi) / cache.norms[s]).collect();
            let rep = cache.enc_traces[s].last().unwrap();
            let d_rep = proj.backward_sample(
                rep,
                &cache.proj_traces[s],
                &dv,
                &mut partial.projector,
            );
            enc.backward_sample(&features[s], &cache.enc_traces[s], &d_rep, &mut partial.encoder);
        }
        partial
    };

    let workers = threads.max(1).min(chunk_count);
    let partials: Vec<ParamGrads> = if workers <= 1 {
        bounds.iter().map(|&b| run_chunk(b)).collect()
    } else {
        let mut slots: Vec<Option<ParamGrads>> = (0..chunk_count).map(|_| None).collect();
        std::thread::scope(|scope| {
            let mut handles = Vec::new();
            for worker in 0..workers {
                let bounds = &bounds;
                let run_chunk = &run_chunk;
                handles.push(scope.spawn(move || {
                    let mut mine = Vec::new();
                    let mut c = worker;
                    while c < bounds.len() {
                        mine.push((c, run_chunk(bounds[c])));
                        c += workers;
                    }
                    mine
                }));
            }
            for handle in handles {
                for (c, partial) in handle.join().expect("gradient worker panicked") {
                    slots[c] = Some(partial);
                }
            }
        });
        slots.into_iter().map(|s| s.expect("missing gradient chunk")).collect()
    };

    let mut total = ParamGrads::zeros_like(model);
    for partial in &partials {
        total.add_assign(partial);
    }
    Ok(total)
}

/// Momentum buffers for SGD.
#[derive(Debug, Clone)]
pub struct OptimState {
    velocity: ParamGrads,
}

impl OptimState {
    pub fn zeros_like(model: &Model) -> Self {
        Self { velocity: ParamGrads::zeros_like(model) }
    }
}

/// One SGD step: `v <- momentum*v + g + weight_decay*p; p <- p - lr(epoch)*v`.
pub fn sgd_step(
    model: &mut Model,
    grads: &ParamGrads,
    state: &mut OptimState,
    optim: &OptimConfig,
    epoch: usize,
) {
    let lr = optim.lr_at(epoch);
    let layers = model.encoder.iter_mut().chain(model.projector.iter_mut());
    let grad_layers = grads.encoder.iter().chain(&grads.projector);
    let vel_layers = state.velocity.encoder.iter_mut().chain(state.velocity.projector.iter_mut());
    for ((layer, g), v) in layers.zip(grad_layers).zip(vel_layers) {
        for ((p, gw), vw) in
            layer.weights.iter_mut().zip(&g.weights).zip(v.weights.iter_mut())
        {
            *vw = optim.momentum * *vw + gw + optim.weight_decay * *p;
            *p -= lr * *vw;
        }
        for ((p, gb), vb) in layer.bias.iter_mut().zip(&g.bias).zip(v.bias.iter_mut()) {
            *vb = optim.momentum * *vb + gb + optim.weight_decay * *p;
            *p -= lr * *vb;
        }
    }
}

/// A gradient-response probe evaluated on training batches: the loss whose
/// positive/negative term magnitudes get logged.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradProbe {
    pub kind: LossKind,
    pub params: LossParams,
}

/// Step-level gradient logging configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradLogConfig {
    /// Log every `every`-th optimizer step (1 = every step).
    pub every: usize,
    pub probes: Vec<GradProbe>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean per-anchor contrastive loss over the epoch.
    pub loss: f64,
    pub lr: f64,
    /// Mean positive/negative term magnitude of probe 0, when logging.
    pub mean_pos_grad: Option<f64>,
    pub mean_neg_grad: Option<f64>,
    pub wall_time_s: f64,
    pub augmented_batch_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    pub batch_size: usize,
    pub probes: Vec<TermMagnitudes>,
}

/// Everything recorded during contrastive training.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainTrace {
    pub records: Vec<EpochRecord>,
    pub steps: Vec<StepRecord>,
    pub probe_specs: Vec<GradProbe>,
    pub warnings: Vec<String>,
}

/// Configuration for one contrastive training run.
#[derive(Debug, Clone, Serialize)]
pub struct TrainConfig {
    pub mode: BatchMode,
    pub loss_kind: LossKind,
    pub loss_params: LossParams,
    pub mlp: MlpSpec,
    pub optim: OptimConfig,
    pub view_cfg: ViewConfig,
    pub batch_size: usize,
    pub seed: u64,
    pub grad_log: Option<GradLogConfig>,
    pub threads: usize,
}

impl TrainConfig {
    fn validate(&self, ds: &Dataset) -> Result<(), TrainError> {
        self.mlp.validate()?;
        self.optim.validate()?;
        self.view_cfg.validate()?;
        if self.batch_size == 0 || self.batch_size > ds.len() {
            return Err(TrainError::Config(format!(
                "batch_size {} out of range for {} samples",
                self.batch_size,
                ds.len()
            )));
        }
        if ds.dim() != self.mlp.input_dim() {
            return Err(TrainError::DimensionMismatch {
                expected: self.mlp.input_dim(),
                got: ds.dim(),
            });
        }
        if let Some(log) = &self.grad_log {
            if log.every == 0 {
                return Err(TrainError::Config("grad_log.every must be >= 1".into()));
            }
        }
        Ok(())
    }
}

/// Runs contrastive pre-training and returns the model with its trace.
pub fn train_contrastive(ds: &Dataset, cfg: &TrainConfig) -> Result<(Model, TrainTrace), TrainError> {
    cfg.validate(ds)?;
    let mut trace = TrainTrace {
        probe_specs: cfg.grad_log.as_ref().map(|g| g.probes.clone()).unwrap_or_default(),
        ..TrainTrace::default()
    };
    if cfg.loss_kind == LossKind::Tcl && !cfg.loss_params.in_guarantee_range() {
        trace.warnings.push(format!(
            "k1 = {}, k2 = {} are outside the k1, k2 >= 1 range the hard-pair guarantees assume",
            cfg.loss_params.k1, cfg.loss_params.k2
        ));
    }
    let mut model = Model::init(&cfg.mlp, cfg.seed)?;
    let mut state = OptimState::zeros_like(&model);
    let mut data_rng = crate::seeded_rng(cfg.seed ^ STREAM_DATA);
    let mut global_step = 0usize;
    for epoch in 0..cfg.optim.epochs {
        let started = Instant::now();
        let lr = cfg.optim.lr_at(epoch);
        let batches =
            data::epoch_batches(ds, cfg.batch_size, &cfg.view_cfg, cfg.mode, &mut data_rng)?;
        let mut epoch_loss = 0.0;
        let mut epoch_anchors = 0usize;
        let mut pos_mags = Vec::new();
        let mut neg_mags = Vec::new();
        let mut batch_size = 0usize;
        for precursor in &batches {
            batch_size = precursor.len();
            let (_, embeddings, cache) = forward_cached(&model, &precursor.views)?;
            let batch = ContrastiveBatch::new(embeddings, precursor.positive_sets.clone())?;
            let included = batch.included_anchors().count();
            let result = match cfg.loss_kind {
                LossKind::SupCon => {
                    crate::losses::supcon_loss(&batch, cfg.loss_params.tau)?
                }
                LossKind::Tcl => crate::losses::tcl_loss(&batch, &cfg.loss_params)?,
            };
            epoch_loss += result.total;
            epoch_anchors += included;

            if let Some(log) = &cfg.grad_log {
                if global_step % log.every == 0 {
                    let probes: Result<Vec<TermMagnitudes>, _> = log
                        .probes
                        .iter()
                        .map(|p| gradlab::batch_term_magnitudes(&batch, &p.params, p.kind))
                        .collect();
                    let probes = probes.map_err(|e| TrainError::Config(e.to_string()))?;
                    if let Some(first) = probes.first() {
                        pos_mags.push(first.mean_pos_mag);
                        neg_mags.push(first.mean_neg_mag);
                    }
                    trace.steps.push(StepRecord {
                        epoch,
                        step: global_step,
                        batch_size: precursor.len(),
                        probes,
                    });
                }
            }

            let grads_z = full_batch_grad(&batch, &cfg.loss_params, cfg.loss_kind)?;
            let scale = 1.0 / included.max(1) as f64;
            let upstream: Vec<Vec<f64>> = grads_z
                .into_iter()
                .map(|g| g.iter().map(|x| x * scale).collect())
                .collect();
            let grads = backward(&model, &precursor.views, &cache, &upstream, cfg.threads)?;
            sgd_step(&mut model, &grads, &mut state, &cfg.optim, epoch);
            global_step += 1;
        }
        let mean = |xs: &[f64]| {
            if xs.is_empty() {
                None
            } else {
                Some(xs.iter().sum::<f64>() / xs.len() as f64)
            }
        };
        trace.records.push(EpochRecord {
            epoch,
            loss: epoch_loss / epoch_anchors.max(1) as f64,
            lr,
            mean_pos_grad: mean(&pos_mags),
            mean_neg_grad: mean(&neg_mags),
            wall_time_s: started.elapsed().as_secs_f64(),
            augmented_batch_size: batch_size,
        });
    }
    Ok((model, trace))
}

/// Linear probe settings; defaults mirror the training protocol
/// (momentum 0.9, weight decay 1e-4, cosine schedule).
#[derive(Debug, Clone, Copy)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub holdout_fraction: f64,
    pub seed: u64,
}

impl ProbeConfig {
    pub fn new(epochs: usize, lr: f64, seed: u64) -> Self {
        Self {
            epochs,
            lr,
            momentum: 0.9,
            weight_decay: 1e-4,
            batch_size: 64,
            holdout_fraction: 0.2,
            seed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeEpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub lr: f64,
    pub top1: f64,
}

/// Result of linear-probe evaluation on a frozen encoder.
#[derive(Debug, Clone)]
pub struct ProbeOutcome {
    pub classifier: Linear,
    /// Held-out top-1 accuracy after the final epoch.
    pub top1: f64,
    pub records: Vec<ProbeEpochRecord>,
}

/// Trains a linear classifier on frozen encoder representations with
/// cross-entropy and reports held-out top-1 accuracy on an 80/20 split.
pub fn train_linear_probe(
    model: &Model,
    ds: &Dataset,
    cfg: &ProbeConfig,
) -> Result<ProbeOutcome, TrainError> {
    let labels = ds.labels.as_ref().ok_or(TrainError::NoLabels)?;
    if ds.class_count < 2 {
        return Err(TrainError::Config("probe needs at least 2 classes".into()));
    }
    if cfg.batch_size == 0 {
        return Err(TrainError::Config("probe batch_size must be >= 1".into()));
    }
    if !(0.0 < cfg.holdout_fraction && cfg.holdout_fraction < 1.0) {
        return Err(TrainError::Config("holdout_fraction must be in (0, 1)".into()));
    }
    let reps = model.representations(&ds.features)?;
    let d_rep = model.spec.representation_dim();
    let classes = ds.class_count;

    let mut split_rng = crate::seeded_rng(cfg.seed ^ STREAM_SPLIT);
    let mut order: Vec<usize> = (0..ds.len()).collect();
    use rand::seq::SliceRandom;
    order.shuffle(&mut split_rng);
    let holdout = ((ds.len() as f64) * cfg.holdout_fraction).round() as usize;
    let holdout = holdout.clamp(1, ds.len().saturating_sub(1));
    let (test_idx, train_idx) = order.split_at(holdout);

    let mut probe_rng = crate::seeded_rng(cfg.seed ^ STREAM_PROBE);
    let mut classifier = Linear::init(d_rep, classes, &mut probe_rng);
    let mut vel_w = vec![0.0; classifier.weights.len()];
    let mut vel_b = vec![0.0; classifier.bias.len()];
    let schedule = OptimConfig {
        base_lr: cfg.lr,
        momentum: cfg.momentum,
        weight_decay: cfg.weight_decay,
        epochs: cfg.epochs,
    };

    let evaluate = |classifier: &Linear| -> f64 {
        let mut correct = 0usize;
        let mut logits = Vec::new();
        for &i in test_idx {
            classifier.forward(&reps[i], &mut logits);
            let best = logits
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .map(|(c, _)| c)
                .unwrap();
            if best == labels[i] {
                correct += 1;
            }
        }
        correct as f64 / test_idx.len() as f64
    };

    let mut records = Vec::with_capacity(cfg.epochs);
    let mut shuffled = train_idx.to_vec();
    for epoch in 0..cfg.epochs {
        let lr = schedule.lr_at(epoch);
        shuffled.shuffle(&mut probe_rng);
        let mut epoch_loss = 0.0;
        let mut steps = 0usize;
        for chunk in shuffled.chunks(cfg.batch_size) {
            let mut logits_rows = Vec::with_capacity(chunk.len());
            let mut chunk_labels = Vec::with_capacity(chunk.len());
            let mut row = Vec::new();
            for &i in chunk {
                classifier.forward(&reps[i], &mut row);
                logits_rows.push(row.clone());
                chunk_labels.push(labels[i]);
            }
            let (loss, dlogits) = cross_entropy(&logits_rows, &chunk_labels)?;
            epoch_loss += loss;
            steps += 1;
            let mut gw = vec![0.0; classifier.weights.len()];
            let mut gb = vec![0.0; classifier.bias.len()];
            for (s, &i) in chunk.iter().enumerate() {
                for (c, &d) in dlogits[s].iter().enumerate() {
                    gb[c] += d;
                    let row = &mut gw[c * d_rep..(c + 1) * d_rep];
                    for (w, &x) in row.iter_mut().zip(&reps[i]) {
                        *w += d * x;
                    }
                }
            }
            for ((p, g), v) in classifier.weights.iter_mut().zip(&gw).zip(vel_w.iter_mut()) {
                *v = cfg.momentum * *v + g + cfg.weight_decay * *p;
                *p -= lr * *v;
            }
            for ((p, g), v) in classifier.bias.iter_mut().zip(&gb).zip(vel_b.iter_mut()) {
                *v = cfg.momentum * *v + g + cfg.weight_decay * *p;
                *p -= lr * *v;
            }
        }
        records.push(ProbeEpochRecord {
            epoch,
            loss: epoch_loss / steps.max(1) as f64,
            lr,
            top1: evaluate(&classifier),
        });
    }
    let top1 = records.last().map_or_else(|| evaluate(&classifier), |r| r.top1);
    Ok(ProbeOutcome { classifier, top1, records })
}

/// Contrastive pre-training followed by the linear probe.
pub struct ExperimentResult {
    pub model: Model,
    pub trace: TrainTrace,
    pub probe: ProbeOutcome,
}

pub fn run_experiment(
    ds: &Dataset,
    train_cfg: &TrainConfig,
    probe_cfg: &ProbeConfig,
) -> Result<ExperimentResult, TrainError> {
    let (model, trace) = train_contrastive(ds, train_cfg)?;
    let probe = train_linear_probe(&model, ds, probe_cfg)?;
    Ok(ExperimentResult { model, trace, probe })
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"TCLM";
const CHECKPOINT_VERSION: u8 = 1;

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

/// Writes a versioned checkpoint: magic, version, layer-size manifest,
/// little-endian f64 parameters, and a trailing checksum. The write goes
/// through a temp file and rename.
pub fn save_checkpoint(model: &Model, path: impl AsRef<Path>) -> Result<(), TrainError> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    bytes.extend_from_slice(CHECKPOINT_MAGIC);
    bytes.push(CHECKPOINT_VERSION);
    let manifest = |bytes: &mut Vec<u8>, layers: &[Linear]| {
        bytes.extend_from_slice(&(layers.len() as u32).to_le_bytes());
        for layer in layers {
            bytes.extend_from_slice(&(layer.in_dim as u32).to_le_bytes());
            bytes.extend_from_slice(&(layer.out_dim as u32).to_le_bytes());
        }
    };
    manifest(&mut bytes, &model.encoder);
    manifest(&mut bytes, &model.projector);
    for value in model.params_flat() {
        bytes.extend_from_slice(&value.to_le_bytes());
    }
    let checksum = fnv1a(&bytes);
    bytes.extend_from_slice(&checksum.to_le_bytes());

    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, &bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    offset: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], TrainError> {
        if self.offset + n > self.bytes.len() {
            return Err(TrainError::CorruptFile("unexpected end of file".into()));
        }
        let out = &self.bytes[self.offset..self.offset + n];
        self.offset += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32, TrainError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64, TrainError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Reads a checkpoint written by [`save_checkpoint`], verifying version and
/// checksum.
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Model, TrainError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < CHECKPOINT_MAGIC.len() + 1 + 8 {
        return Err(TrainError::CorruptFile("file too short".into()));
    }
    let (payload, tail) = bytes.split_at(bytes.len() - 8);
    let stored = u64::from_le_bytes(tail.try_into().unwrap());
    if fnv1a(payload) != stored {
        return Err(TrainError::CorruptFile("checksum mismatch".into()));
    }
    let mut reader = ByteReader { bytes: payload, offset: 0 };
    if reader.take(4)? != CHECKPOINT_MAGIC {
        return Err(TrainError::CorruptFile("bad magic".into()));
    }
    let version = reader.take(1)?[0];
    if version != CHECKPOINT_VERSION {
        return Err(TrainError::VersionMismatch { found: version });
    }
    let read_manifest = |reader: &mut ByteReader| -> Result<Vec<(usize, usize)>, TrainError> {
        let count = reader.u32()? as usize;
        if count == 0 || count > 1024 {
            return Err(TrainError::CorruptFile(format!("implausible layer count {count}")));
        }
        (0..count)
            .map(|_| Ok((reader.u32()? as usize, reader.u32()? as usize)))
            .collect()
    };
    let enc_shapes = read_manifest(&mut reader)?;
    let proj_shapes = read_manifest(&mut reader)?;
    let read_layers = |reader: &mut ByteReader,
                           shapes: &[(usize, usize)]|
     -> Result<Vec<Linear>, TrainError> {
        shapes
            .iter()
            .map(|&(in_dim, out_dim)| {
                if in_dim == 0 || out_dim == 0 {
                    return Err(TrainError::CorruptFile("zero-width layer".into()));
                }
                let mut weights = Vec::with_capacity(in_dim * out_dim);
                for _ in 0..in_dim * out_dim {
                    weights.push(reader.f64()?);
                }
                let mut bias = Vec::with_capacity(out_dim);
                for _ in 0..out_dim {
                    bias.push(reader.f64()?);
                }
                Ok(Linear { in_dim, out_dim, weights, bias })
            })
            .collect()
    };
    // Parameters are stored encoder-first, matching params_flat order.
    let encoder = read_layers(&mut reader, &enc_shapes)?;
    let projector = read_layers(&mut reader, &proj_shapes)?;
    if reader.offset != payload.len() {
        return Err(TrainError::CorruptFile("trailing bytes".into()));
    }
    let sizes_of = |shapes: &[(usize, usize)]| -> Vec<usize> {
        let mut sizes = vec![shapes[0].0];
        sizes.extend(shapes.iter().map(|&(_, out)| out));
        sizes
    };
    let spec = MlpSpec { encoder: sizes_of(&enc_shapes), projector: sizes_of(&proj_shapes) };
    spec.validate().map_err(|e| TrainError::CorruptFile(format!("inconsistent manifest: {e}")))?;
    Ok(Model { spec, encoder, projector })
}

#[cfg(test)]
mod tests {
    use super::*;

    use crate::data::make_gaussian_clusters;
    use crate::numerics::Vector;

    fn tiny_spec() -> MlpSpec {
        MlpSpec { encoder: vec![2, 3, 2], projector: vec![2, 2] }
    }

    fn desk_config(seed: u64, epochs: usize) -> (Dataset, TrainConfig) {
        let ds = make_gaussian_clusters(3, 20, 8, 0.15, 42).unwrap();
        let cfg = TrainConfig {
            mode: BatchMode::Supervised,
            loss_kind: LossKind::Tcl,
            loss_params: LossParams::new(0.1, 100.0, 1.0).unwrap(),
            mlp: MlpSpec { encoder: vec![8, 16, 6], projector: vec![6, 6, 4] },
            optim: OptimConfig::new(0.05, epochs),
            view_cfg: ViewConfig::default(),
            batch_size: 10,
            seed,
            grad_log: None,
            threads: 1,
        };
        (ds, cfg)
    }

    #[test]
    fn forward_embeddings_are_unit_norm() {
        let model = Model::init(&tiny_spec(), 1).unwrap();
        let features = vec![vec![0.3, -1.2], vec![5.0, 2.0], vec![0.0, 0.0]];
        let (reps, embeddings) = forward(&model, &features).unwrap();
        assert_eq!(reps.len(), 3);
        for e in &embeddings {
            let norm: f64 = e.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() <= 1e-9);
        }
    }

    #[test]
    fn zero_model_hits_jitter_guard_not_an_error() {
        let mut model = Model::init(&tiny_spec(), 1).unwrap();
        let zeros = vec![0.0; model.params_flat().len()];
        model.set_params_flat(&zeros).unwrap();
        let (_, embeddings) = forward(&model, &[vec![1.0, 1.0]]).unwrap();
        let norm: f64 = embeddings[0].iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() <= 1e-9);
        assert!(embeddings[0].iter().all(|x| x.is_finite()));
    }

    #[test]
    fn forward_is_deterministic() {
        let model = Model::init(&tiny_spec(), 9).unwrap();
        let features = vec![vec![0.5, 0.25]];
        let (r1, e1) = forward(&model, &features).unwrap();
        let (r2, e2) = forward(&model, &features).unwrap();
        assert_eq!(r1, r2);
        assert_eq!(e1[0].as_slice(), e2[0].as_slice());
    }

    #[test]
    fn forward_rejects_wrong_input_dim() {
        let model = Model::init(&tiny_spec(), 1).unwrap();
        assert!(matches!(
            forward(&model, &[vec![1.0, 2.0, 3.0]]),
            Err(TrainError::DimensionMismatch { expected: 2, got: 3 })
        ));
    }

    #[test]
    fn normalization_jacobian_kills_radial_component() {
        let model = Model::init(&tiny_spec(), 3).unwrap();
        let features = vec![vec![0.7, -0.4]];
        let (_, embeddings, cache) = forward_cached(&model, &features).unwrap();
        // Upstream gradient parallel to z maps to zero parameter gradients.
        let upstream = vec![embeddings[0].as_slice().to_vec()];
        let grads = backward(&model, &features, &cache, &upstream, 1).unwrap();
        for g in grads.flat() {
            assert!(g.abs() < 1e-14, "radial component leaked: {g}");
        }
    }

    #[test]
    fn zero_upstream_gives_zero_grads() {
        let model = Model::init(&tiny_spec(), 3).unwrap();
        let features = vec![vec![0.7, -0.4], vec![0.1, 0.9]];
        let (_, _, cache) = forward_cached(&model, &features).unwrap();
        let upstream = vec![vec![0.0; 2]; 2];
        let grads = backward(&model, &features, &cache, &upstream, 1).unwrap();
        assert!(grads.flat().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn backward_reduction_is_thread_count_invariant() {
        let model = Model::init(&MlpSpec { encoder: vec![3, 5, 4], projector: vec![4, 3] }, 5)
            .unwrap();
        let mut rng = crate::seeded_rng(77);
        let features: Vec<Vec<f64>> = (0..13)
            .map(|_| (0..3).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let (_, _, cache) = forward_cached(&model, &features).unwrap();
        let upstream: Vec<Vec<f64>> = (0..13)
            .map(|_| (0..3).map(|_| rng.random_range(-0.5..0.5)).collect())
            .collect();
        let sequential = backward(&model, &features, &cache, &upstream, 1).unwrap();
        for threads in [2, 3, 8, 32] {
            let parallel = backward(&model, &features, &cache, &upstream, threads).unwrap();
            assert_eq!(sequential.flat(), parallel.flat(), "threads = {threads}");
        }
    }

    #[test]
    fn sgd_step_examples() {
        let spec = MlpSpec { encoder: vec![1, 1], projector: vec![1, 1] };
        let mut model = Model::init(&spec, 0).unwrap();
        let before = model.params_flat();

        // lr = 0 leaves parameters unchanged.
        let mut grads = ParamGrads::zeros_like(&model);
        for layer in grads.encoder.iter_mut().chain(grads.projector.iter_mut()) {
            layer.weights.iter_mut().for_each(|g| *g = 1.0);
            layer.bias.iter_mut().for_each(|g| *g = 1.0);
        }
        let mut state = OptimState::zeros_like(&model);
        let optim = OptimConfig { base_lr: 0.0, momentum: 0.9, weight_decay: 0.0, epochs: 10 };
        sgd_step(&mut model, &grads, &mut state, &optim, 0);
        assert_eq!(model.params_flat(), before);

        // momentum = 0, weight_decay = 0: plain gradient descent.
        let mut model = Model::init(&spec, 0).unwrap();
        let before = model.params_flat();
        let mut state = OptimState::zeros_like(&model);
        let optim = OptimConfig { base_lr: 0.5, momentum: 0.0, weight_decay: 0.0, epochs: 10 };
        sgd_step(&mut model, &grads, &mut state, &optim, 0);
        let lr0 = optim.lr_at(0);
        for (a, b) in model.params_flat().iter().zip(&before) {
            assert!((a - (b - lr0)).abs() < 1e-15);
        }

        // Two steps with constant gradient g: v2 = 1.9 g.
        let mut model = Model::init(&spec, 0).unwrap();
        let mut state = OptimState::zeros_like(&model);
        let optim = OptimConfig { base_lr: 0.1, momentum: 0.9, weight_decay: 0.0, epochs: 0 };
        sgd_step(&mut model, &grads, &mut state, &optim, 0);
        sgd_step(&mut model, &grads, &mut state, &optim, 0);
        for v in state.velocity.flat() {
            assert!((v - 1.9).abs() < 1e-12);
        }
    }

    #[test]
    fn cosine_schedule_endpoints() {
        let optim = OptimConfig::new(0.4, 100);
        assert_eq!(optim.lr_at(0), 0.4);
        assert!(optim.lr_at(100).abs() <= 1e-12 * 0.4);
        assert!((optim.lr_at(50) - 0.2).abs() < 1e-12);
    }

    #[test]
    fn end_to_end_parameter_gradients_match_finite_differences() {
        // Tiny model, tiny batch: check d(total loss)/d(theta) for every
        // parameter against central differences of the composed scalar.
        let spec = MlpSpec { encoder: vec![2, 2], projector: vec![2, 2] };
        let model = Model::init(&spec, 11).unwrap();
        let views = vec![
            vec![0.8, -0.3],
            vec![0.7, -0.2],
            vec![-0.5, 0.6],
            vec![-0.4, 0.7],
        ];
        let positive_sets = vec![vec![1], vec![0], vec![3], vec![2]];
        let params = LossParams::new(0.5, 2.0, 1.5).unwrap();

        let loss_of = |m: &Model| -> f64 {
            let (_, embeddings) = forward(m, &views).unwrap();
            let batch = ContrastiveBatch::new(embeddings, positive_sets.clone()).unwrap();
            crate::losses::tcl_loss(&batch, &params).unwrap().total
        };

        let (_, embeddings, cache) = forward_cached(&model, &views).unwrap();
        let batch = ContrastiveBatch::new(embeddings, positive_sets.clone()).unwrap();
        let upstream: Vec<Vec<f64>> = full_batch_grad(&batch, &params, LossKind::Tcl)
            .unwrap()
            .into_iter()
            .map(Vector::into_components)
            .collect();
        let analytic = backward(&model, &views, &cache, &upstream, 1).unwrap().flat();

        let theta = model.params_flat();
        let h = 1e-6;
        for k in 0..theta.len() {
            let mut plus = model.clone();
            let mut minus = model.clone();
            let mut tp = theta.clone();
            tp[k] += h;
            plus.set_params_flat(&tp).unwrap();
            let mut tm = theta.clone();
            tm[k] -= h;
            minus.set_params_flat(&tm).unwrap();
            let fd = (loss_of(&plus) - loss_of(&minus)) / (2.0 * h);
            let denom = analytic[k].abs().max(fd.abs()).max(1e-8);
            assert!(
                (analytic[k] - fd).abs() / denom <= 1e-5,
                "param {k}: analytic {} vs fd {fd}",
                analytic[k]
            );
        }
    }

    #[test]
    fn training_is_deterministic_and_reduces_loss() {
        let (ds, cfg) = desk_config(7, 30);
        let (model_a, trace_a) = train_contrastive(&ds, &cfg).unwrap();
        let (model_b, trace_b) = train_contrastive(&ds, &cfg).unwrap();
        assert_eq!(model_a.params_flat(), model_b.params_flat());
        assert_eq!(trace_a.records.len(), 30);
        for (a, b) in trace_a.records.iter().zip(&trace_b.records) {
            assert_eq!(a.loss, b.loss);
        }
        let first = trace_a.records.first().unwrap().loss;
        let last = trace_a.records.last().unwrap().loss;
        assert!(last < first, "loss did not decrease: {first} -> {last}");
    }

    #[test]
    fn ten_cluster_training_reduces_loss() {
        let ds = make_gaussian_clusters(10, 20, 16, 0.15, 99).unwrap();
        let cfg = TrainConfig {
            mode: BatchMode::Supervised,
            loss_kind: LossKind::Tcl,
            loss_params: LossParams::new(0.1, 5000.0, 1.0).unwrap(),
            mlp: MlpSpec { encoder: vec![16, 32, 16], projector: vec![16, 16, 8] },
            optim: OptimConfig::new(0.05, 50),
            view_cfg: ViewConfig::default(),
            batch_size: 25,
            seed: 1,
            grad_log: None,
            threads: 1,
        };
        let (_, trace) = train_contrastive(&ds, &cfg).unwrap();
        let first = trace.records.first().unwrap().loss;
        let last = trace.records.last().unwrap().loss;
        assert!(last < first, "loss did not decrease: {first} -> {last}");
    }

    #[test]
    fn zero_epochs_returns_initialized_model_and_empty_trace() {
        let (ds, mut cfg) = desk_config(3, 0);
        cfg.optim.epochs = 0;
        let (model, trace) = train_contrastive(&ds, &cfg).unwrap();
        assert!(trace.records.is_empty());
        assert_eq!(model.params_flat(), Model::init(&cfg.mlp, cfg.seed).unwrap().params_flat());
    }

    #[test]
    fn sub_guarantee_params_produce_warning() {
        let (ds, mut cfg) = desk_config(3, 1);
        cfg.loss_params = LossParams::new(0.1, 0.5, 1.0).unwrap();
        let (_, trace) = train_contrastive(&ds, &cfg).unwrap();
        assert_eq!(trace.warnings.len(), 1);
    }

    #[test]
    fn probe_leaves_encoder_untouched_and_separates_easy_data() {
        let (ds, cfg) = desk_config(5, 25);
        let (model, _) = train_contrastive(&ds, &cfg).unwrap();
        let before = model.params_flat();
        let probe = train_linear_probe(&model, &ds, &ProbeConfig::new(30, 0.5, 5)).unwrap();
        assert_eq!(model.params_flat(), before, "probe mutated the encoder");
        assert!(probe.top1 >= 0.8, "probe top1 {} on easy clusters", probe.top1);
        assert_eq!(probe.records.len(), 30);
    }

    #[test]
    fn probe_on_shuffled_labels_is_chance_level() {
        let mut ds = make_gaussian_clusters(4, 25, 6, 0.1, 77).unwrap();
        // Destroy the label structure deterministically.
        let labels = ds.labels.as_mut().unwrap();
        let mut rng = crate::seeded_rng(123);
        use rand::seq::SliceRandom;
        labels.shuffle(&mut rng);
        let model = Model::init(
            &MlpSpec { encoder: vec![6, 8, 4], projector: vec![4, 3] },
            2,
        )
        .unwrap();
        let probe = train_linear_probe(&model, &ds, &ProbeConfig::new(25, 0.3, 9)).unwrap();
        let chance = 0.25;
        assert!(
            (probe.top1 - chance).abs() <= 0.15,
            "shuffled-label top1 {} should be near {chance}",
            probe.top1
        );
    }

    #[test]
    fn probe_requires_labels() {
        let (ds, cfg) = desk_config(5, 1);
        let (model, _) = train_contrastive(&ds, &cfg).unwrap();
        let unlabeled = Dataset { labels: None, class_count: 0, ..ds };
        assert!(matches!(
            train_linear_probe(&model, &unlabeled, &ProbeConfig::new(5, 0.5, 1)),
            Err(TrainError::NoLabels)
        ));
    }

    #[test]
    fn checkpoint_roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let (ds, cfg) = desk_config(13, 3);
        let (model, _) = train_contrastive(&ds, &cfg).unwrap();
        save_checkpoint(&model, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.params_flat(), model.params_flat());
        assert_eq!(loaded.spec(), model.spec());
    }

    #[test]
    fn checkpoint_detects_truncation_and_bad_version() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let model = Model::init(&tiny_spec(), 4).unwrap();
        save_checkpoint(&model, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();

        let truncated = dir.path().join("truncated.ckpt");
        std::fs::write(&truncated, &bytes[..bytes.len() - 9]).unwrap();
        assert!(matches!(load_checkpoint(&truncated), Err(TrainError::CorruptFile(_))));

        let mut versioned = bytes.clone();
        versioned[4] = 9;
        // Checksum must be recomputed or the corruption check fires first.
        let payload_len = versioned.len() - 8;
        let checksum = fnv1a(&versioned[..payload_len]);
        versioned[payload_len..].copy_from_slice(&checksum.to_le_bytes());
        let version_path = dir.path().join("version.ckpt");
        std::fs::write(&version_path, &versioned).unwrap();
        assert!(matches!(
            load_checkpoint(&version_path),
            Err(TrainError::VersionMismatch { found: 9 })
        ));

        let mut flipped = bytes;
        let mid = flipped.len() / 2;
        flipped[mid] ^= 0xff;
        let corrupt_path = dir.path().join("corrupt.ckpt");
        std::fs::write(&corrupt_path, &flipped).unwrap();
        assert!(matches!(load_checkpoint(&corrupt_path), Err(TrainError::CorruptFile(_))));
    }
}
