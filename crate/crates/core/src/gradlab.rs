//! Gradient-response analysis: per-pair coefficient decompositions,
//! hard-positive / hard-negative magnitudes, the two coefficient guarantees
//! behind the `k1`/`k2` tuning story, and mean-gradient curves and sweeps.
//!
//! The per-anchor gradient of either loss splits into a positive term
//! `sum_p z_p (P_ip - X_ip - Y_ip)` and a negative term `sum_n z_n P_in`,
//! with `positive_term + negative_term = tau * anchor_grad`. "Hard" pairs
//! are the near-orthogonal ones (|z_i.z_p| < 0.1), where the coefficient
//! magnitudes dominate what flows back through the projector.
//!
//! Mean gradient magnitudes are L2 norms of the summed term vectors,
//! averaged over anchors; the raw per-pair coefficient magnitudes are
//! logged alongside since the two normalizations differ.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::losses::{
    anchor_coefficients, ContrastiveBatch, LossError, LossKind, LossParams, NegativeCoefficient,
    PositiveCoefficient,
};
use crate::numerics::{Embedding, Vector};
use crate::trainer::{GradProbe, TrainError, TrainTrace};

/// |z_i . z_j| below this tags a pair as hard in reports.
pub const HARD_PAIR_DOT_THRESHOLD: f64 = 0.1;

#[derive(Debug, Error)]
pub enum GradLabError {
    #[error("invalid params: {0}")]
    InvalidParams(String),
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("trace has no logged gradient steps")]
    EmptyTrace,
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Train(#[from] TrainError),
}

/// One anchor's gradient split into its positive and negative term.
///
/// The terms carry the raw coefficients (no `1/tau`), so
/// `positive_term + negative_term = tau * anchor_grad`.
#[derive(Debug, Clone)]
pub struct AnchorDecomposition {
    pub anchor: usize,
    /// X_ip = 1/|P(i)|.
    pub x: f64,
    pub positive_term: Vector,
    pub negative_term: Vector,
    pub positives: Vec<PositiveCoefficient>,
    pub negatives: Vec<NegativeCoefficient>,
}

/// Decompositions for every anchor included in the loss sum.
#[derive(Debug, Clone)]
pub struct GradientDecomposition {
    pub kind: LossKind,
    pub params: LossParams,
    pub anchors: Vec<AnchorDecomposition>,
}

/// Exposes every per-pair coefficient of the batch gradient.
pub fn decompose(
    batch: &ContrastiveBatch,
    params: &LossParams,
    kind: LossKind,
) -> Result<GradientDecomposition, GradLabError> {
    let mut anchors = Vec::new();
    for anchor in batch.included_anchors() {
        let co = anchor_coefficients(batch, anchor, params, kind)?;
        let mut positive_term = Vector::zeros(batch.dim());
        for pc in &co.positives {
            positive_term.scaled_add(pc.p - co.x - pc.y, batch.embedding(pc.index));
        }
        let mut negative_term = Vector::zeros(batch.dim());
        for nc in &co.negatives {
            negative_term.scaled_add(nc.p, batch.embedding(nc.index));
        }
        anchors.push(AnchorDecomposition {
            anchor,
            x: co.x,
            positive_term,
            negative_term,
            positives: co.positives,
            negatives: co.negatives,
        });
    }
    if anchors.is_empty() {
        return Err(GradLabError::Loss(LossError::AllAnchorsExcluded));
    }
    Ok(GradientDecomposition { kind, params: *params, anchors })
}

/// Batch-mean magnitudes of the decomposition terms: vector-norm means per
/// anchor plus raw coefficient-magnitude means per pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TermMagnitudes {
    pub mean_pos_mag: f64,
    pub mean_neg_mag: f64,
    pub mean_pos_coef: f64,
    pub mean_neg_coef: f64,
}

pub fn batch_term_magnitudes(
    batch: &ContrastiveBatch,
    params: &LossParams,
    kind: LossKind,
) -> Result<TermMagnitudes, GradLabError> {
    let decomposition = decompose(batch, params, kind)?;
    let mut pos_mag = 0.0;
    let mut neg_mag = 0.0;
    let mut pos_coef = 0.0;
    let mut neg_coef = 0.0;
    let mut pos_pairs = 0usize;
    let mut neg_pairs = 0usize;
    for anchor in &decomposition.anchors {
        pos_mag += anchor.positive_term.norm();
        neg_mag += anchor.negative_term.norm();
        for pc in &anchor.positives {
            pos_coef += (pc.p - anchor.x - pc.y).abs();
            pos_pairs += 1;
        }
        for nc in &anchor.negatives {
            neg_coef += nc.p;
            neg_pairs += 1;
        }
    }
    let anchors = decomposition.anchors.len() as f64;
    Ok(TermMagnitudes {
        mean_pos_mag: pos_mag / anchors,
        mean_neg_mag: neg_mag / anchors,
        mean_pos_coef: pos_coef / pos_pairs.max(1) as f64,
        mean_neg_coef: neg_coef / neg_pairs.max(1) as f64,
    })
}

/// Hard-positive comparison for one (anchor, positive) pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct HardPositivePair {
    pub anchor: usize,
    pub positive: usize,
    pub dot: f64,
    pub is_hard: bool,
    /// X_ip - P_ip under the plain denominator.
    pub supcon_signed: f64,
    /// X_ip - P_ip + Y_ip under the tuned denominator.
    pub tcl_signed: f64,
    pub supcon_magnitude: f64,
    pub tcl_magnitude: f64,
}

/// Hard-negative comparison for one (anchor, negative) pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct HardNegativePair {
    pub anchor: usize,
    pub negative: usize,
    pub dot: f64,
    pub is_hard: bool,
    /// P_in under the plain denominator.
    pub supcon: f64,
    /// k2-scaled P_in under the tuned denominator.
    pub tcl: f64,
}

/// Both losses' positive-pair coefficients side by side.
pub fn hard_positive_magnitudes(
    batch: &ContrastiveBatch,
    params: &LossParams,
) -> Result<Vec<HardPositivePair>, GradLabError> {
    let mut out = Vec::new();
    for anchor in batch.included_anchors() {
        let sup = anchor_coefficients(batch, anchor, params, LossKind::SupCon)?;
        let tcl = anchor_coefficients(batch, anchor, params, LossKind::Tcl)?;
        for (s, t) in sup.positives.iter().zip(&tcl.positives) {
            debug_assert_eq!(s.index, t.index);
            let supcon_signed = sup.x - s.p;
            let tcl_signed = tcl.x - t.p + t.y;
            out.push(HardPositivePair {
                anchor,
                positive: s.index,
                dot: s.dot,
                is_hard: s.dot.abs() < HARD_PAIR_DOT_THRESHOLD,
                supcon_signed,
                tcl_signed,
                supcon_magnitude: supcon_signed.abs(),
                tcl_magnitude: tcl_signed.abs(),
            });
        }
    }
    Ok(out)
}

/// Both losses' negative-pair coefficients side by side.
pub fn hard_negative_magnitudes(
    batch: &ContrastiveBatch,
    params: &LossParams,
) -> Result<Vec<HardNegativePair>, GradLabError> {
    let mut out = Vec::new();
    for anchor in batch.included_anchors() {
        let sup = anchor_coefficients(batch, anchor, params, LossKind::SupCon)?;
        let tcl = anchor_coefficients(batch, anchor, params, LossKind::Tcl)?;
        for (s, t) in sup.negatives.iter().zip(&tcl.negatives) {
            debug_assert_eq!(s.index, t.index);
            out.push(HardNegativePair {
                anchor,
                negative: s.index,
                dot: s.dot,
                is_hard: s.dot.abs() < HARD_PAIR_DOT_THRESHOLD,
                supcon: s.p,
                tcl: t.p,
            });
        }
    }
    Ok(out)
}

/// Shape of randomly sampled verification batches: embedding count and
/// dimension ranges, with positives assigned by random grouping (group
/// sizes 2-4; a leftover singleton becomes an excluded anchor).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BatchSpec {
    pub min_m: usize,
    pub max_m: usize,
    pub min_dim: usize,
    pub max_dim: usize,
}

impl Default for BatchSpec {
    fn default() -> Self {
        Self { min_m: 4, max_m: 12, min_dim: 2, max_dim: 8 }
    }
}

/// Random unit embeddings with random positive groups.
pub fn sample_batch(spec: &BatchSpec, rng: &mut impl Rng) -> ContrastiveBatch {
    use rand_distr::StandardNormal;
    let m = rng.random_range(spec.min_m..=spec.max_m);
    let d = rng.random_range(spec.min_dim..=spec.max_dim);
    let embeddings: Vec<Embedding> = (0..m)
        .map(|_| loop {
            let v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-6 {
                break Embedding::try_from_unit(v.iter().map(|x| x / norm).collect()).unwrap();
            }
        })
        .collect();
    let mut positive_sets = vec![Vec::new(); m];
    let mut start = 0usize;
    while start < m {
        let size = usize::min(rng.random_range(2..=4), m - start);
        for a in start..start + size {
            for b in start..start + size {
                if a != b {
                    positive_sets[a].push(b);
                }
            }
        }
        start += size;
    }
    ContrastiveBatch::new(embeddings, positive_sets).expect("sampled batch is valid")
}

/// Outcome of a coefficient-guarantee check over sampled pairs.
///
/// `pass` is true exactly when `counterexamples` is empty. For the
/// hard-positive dominance check the magnitude-form section reports the
/// absolute-value comparison on pairs where it is meaningful
/// (`X_ip >= P_ip` for the plain denominator).
#[derive(Debug, Clone, Serialize)]
pub struct TheoremReport {
    pub descriptor: String,
    pub pairs_checked: usize,
    /// Signed margin per checked pair; positive margins satisfy the claim.
    pub margins: Vec<f64>,
    pub min_margin: f64,
    pub pass: bool,
    pub counterexamples: Vec<String>,
    pub magnitude_pairs_checked: usize,
    pub magnitude_counterexamples: Vec<String>,
}

impl TheoremReport {
    fn finish(mut self) -> Self {
        self.min_margin =
            self.margins.iter().cloned().fold(f64::INFINITY, f64::min);
        self.pass = self.counterexamples.is_empty();
        self
    }
}

/// Checks, over `n_batches` sampled batches, that the tuned loss's
/// hard-positive coefficient strictly dominates the plain one:
/// `(X - P_tcl + Y) > (X - P_sup)` on every positive pair. Requires
/// `k1, k2 >= 1`, the range in which the tuned denominator strictly
/// exceeds the plain one. The magnitude form `|X - P_tcl + Y| > |X - P_sup|`
/// is recorded on pairs with `X >= P_sup` but does not gate `pass`.
pub fn verify_hard_positive_dominance(
    n_batches: usize,
    spec: &BatchSpec,
    params: &LossParams,
    seed: u64,
) -> Result<TheoremReport, GradLabError> {
    if !params.in_guarantee_range() {
        return Err(GradLabError::InvalidParams(format!(
            "dominance guarantee needs k1, k2 >= 1, got k1 = {}, k2 = {}",
            params.k1, params.k2
        )));
    }
    let mut rng = crate::seeded_rng(seed);
    let mut report = TheoremReport {
        descriptor: format!(
            "hard-positive dominance over {n_batches} batches ({spec:?}), tau = {}, k1 = {}, k2 = {}",
            params.tau, params.k1, params.k2
        ),
        pairs_checked: 0,
        margins: Vec::new(),
        min_margin: f64::INFINITY,
        pass: true,
        counterexamples: Vec::new(),
        magnitude_pairs_checked: 0,
        magnitude_counterexamples: Vec::new(),
    };
    for batch_index in 0..n_batches {
        let batch = sample_batch(spec, &mut rng);
        for pair in hard_positive_magnitudes(&batch, params)? {
            report.pairs_checked += 1;
            let margin = pair.tcl_signed - pair.supcon_signed;
            report.margins.push(margin);
            if margin <= 0.0 {
                report.counterexamples.push(format!(
                    "batch {batch_index}, anchor {}, positive {}: signed {} vs {}",
                    pair.anchor, pair.positive, pair.tcl_signed, pair.supcon_signed
                ));
            }
            if pair.supcon_signed >= 0.0 {
                report.magnitude_pairs_checked += 1;
                if pair.tcl_magnitude <= pair.supcon_magnitude {
                    report.magnitude_counterexamples.push(format!(
                        "batch {batch_index}, anchor {}, positive {}: |{}| vs |{}|",
                        pair.anchor, pair.positive, pair.tcl_signed, pair.supcon_signed
                    ));
                }
            }
        }
    }
    Ok(report.finish())
}

/// Checks that the tuned hard-negative coefficient `P_in` strictly
/// increases along `k2_grid` (fixed `k1`) for every negative pair of the
/// batch. The grid must be strictly increasing with at least two points.
pub fn verify_hard_negative_monotonicity(
    batch: &ContrastiveBatch,
    tau: f64,
    k1: f64,
    k2_grid: &[f64],
) -> Result<TheoremReport, GradLabError> {
    if k2_grid.len() < 2 {
        return Err(GradLabError::InvalidGrid(format!(
            "need at least 2 grid points, got {}",
            k2_grid.len()
        )));
    }
    if k2_grid.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(GradLabError::InvalidGrid(format!(
            "k2 grid must be strictly increasing, got {k2_grid:?}"
        )));
    }
    if k2_grid.iter().any(|k| !k.is_finite() || *k < 0.0) {
        return Err(GradLabError::InvalidGrid("k2 values must be finite and >= 0".into()));
    }
    let mut report = TheoremReport {
        descriptor: format!(
            "hard-negative k2 monotonicity, tau = {tau}, k1 = {k1}, grid {k2_grid:?}"
        ),
        pairs_checked: 0,
        margins: Vec::new(),
        min_margin: f64::INFINITY,
        pass: true,
        counterexamples: Vec::new(),
        magnitude_pairs_checked: 0,
        magnitude_counterexamples: Vec::new(),
    };
    let per_grid: Vec<Vec<HardNegativePair>> = k2_grid
        .iter()
        .map(|&k2| {
            let params = LossParams::new(tau, k1, k2)
                .map_err(|e| GradLabError::InvalidParams(e.to_string()))?;
            hard_negative_magnitudes(batch, &params)
        })
        .collect::<Result<_, _>>()?;
    let pairs = per_grid[0].len();
    for pair_index in 0..pairs {
        report.pairs_checked += 1;
        let mut worst = f64::INFINITY;
        for step in 1..per_grid.len() {
            let prev = per_grid[step - 1][pair_index].tcl;
            let next = per_grid[step][pair_index].tcl;
            worst = worst.min(next - prev);
        }
        report.margins.push(worst);
        if worst <= 0.0 {
            let p = &per_grid[0][pair_index];
            report.counterexamples.push(format!(
                "anchor {}, negative {}: non-increasing step of {worst}",
                p.anchor, p.negative
            ));
        }
    }
    Ok(report.finish())
}

/// Per-epoch means of the logged gradient-term magnitudes, one curve per
/// probe.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CurvePoint {
    pub epoch: usize,
    pub mean_pos_mag: f64,
    pub mean_neg_mag: f64,
    pub mean_pos_coef: f64,
    pub mean_neg_coef: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradientCurves {
    pub probes: Vec<GradProbe>,
    /// `curves[probe][k]` is the k-th logged epoch's mean for that probe.
    pub curves: Vec<Vec<CurvePoint>>,
}

/// Aggregates a trace's step log into per-epoch mean curves.
pub fn mean_gradient_curves(trace: &TrainTrace) -> Result<GradientCurves, GradLabError> {
    if trace.steps.is_empty() {
        return Err(GradLabError::EmptyTrace);
    }
    let probes = trace.probe_specs.clone();
    let mut curves: Vec<Vec<CurvePoint>> = vec![Vec::new(); probes.len()];
    for (p, curve) in curves.iter_mut().enumerate() {
        let mut current: Option<(usize, TermMagnitudes, usize)> = None;
        for step in &trace.steps {
            let mags = step.probes[p];
            match current.as_mut() {
                Some((epoch, acc, count)) if *epoch == step.epoch => {
                    acc.mean_pos_mag += mags.mean_pos_mag;
                    acc.mean_neg_mag += mags.mean_neg_mag;
                    acc.mean_pos_coef += mags.mean_pos_coef;
                    acc.mean_neg_coef += mags.mean_neg_coef;
                    *count += 1;
                }
                _ => {
                    if let Some((epoch, acc, count)) = current.take() {
                        curve.push(average_point(epoch, acc, count));
                    }
                    current = Some((step.epoch, mags, 1));
                }
            }
        }
        if let Some((epoch, acc, count)) = current {
            curve.push(average_point(epoch, acc, count));
        }
    }
    Ok(GradientCurves { probes, curves })
}

fn average_point(epoch: usize, acc: TermMagnitudes, count: usize) -> CurvePoint {
    let n = count as f64;
    CurvePoint {
        epoch,
        mean_pos_mag: acc.mean_pos_mag / n,
        mean_neg_mag: acc.mean_neg_mag / n,
        mean_pos_coef: acc.mean_pos_coef / n,
        mean_neg_coef: acc.mean_neg_coef / n,
    }
}

/// Optional per-grid-point training for probe accuracy in a sweep.
#[derive(Debug, Clone)]
pub struct SweepTrain {
    pub dataset: crate::data::Dataset,
    /// Template; `loss_kind` is forced to TCL and `loss_params` replaced by
    /// each grid point.
    pub train: crate::trainer::TrainConfig,
    pub probe: crate::trainer::ProbeConfig,
}

#[derive(Debug, Clone)]
pub struct KSweepConfig {
    pub tau: f64,
    pub k1_grid: Vec<f64>,
    pub k2_grid: Vec<f64>,
    /// Number of frozen batches shared by every grid point.
    pub n_batches: usize,
    pub batch_spec: BatchSpec,
    pub seed: u64,
    pub train: Option<SweepTrain>,
}

/// One sweep table row.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SweepRow {
    pub k1: f64,
    pub k2: f64,
    pub mean_pos_mag: f64,
    pub mean_neg_mag: f64,
    pub supcon_pos_mag: f64,
    pub supcon_neg_mag: f64,
    pub top1: Option<f64>,
}

/// Evaluates the tuned loss's term magnitudes for every (k1, k2) grid point
/// on one frozen, seeded batch set, with the plain-loss baseline alongside.
pub fn k_sweep(config: &KSweepConfig) -> Result<Vec<SweepRow>, GradLabError> {
    if config.k1_grid.is_empty() || config.k2_grid.is_empty() {
        return Err(GradLabError::InvalidGrid("k1 and k2 grids must be non-empty".into()));
    }
    if config.n_batches == 0 {
        return Err(GradLabError::InvalidGrid("n_batches must be >= 1".into()));
    }
    for (name, grid) in [("k1", &config.k1_grid), ("k2", &config.k2_grid)] {
        if grid.iter().any(|k| !k.is_finite() || *k < 0.0) {
            return Err(GradLabError::InvalidGrid(format!(
                "{name} grid must be finite and >= 0"
            )));
        }
    }
    let mut rng = crate::seeded_rng(config.seed);
    let batches: Vec<ContrastiveBatch> =
        (0..config.n_batches).map(|_| sample_batch(&config.batch_spec, &mut rng)).collect();

    let mean_over = |params: &LossParams, kind: LossKind| -> Result<(f64, f64), GradLabError> {
        let mut pos = 0.0;
        let mut neg = 0.0;
        for batch in &batches {
            let mags = batch_term_magnitudes(batch, params, kind)?;
            pos += mags.mean_pos_mag;
            neg += mags.mean_neg_mag;
        }
        let n = batches.len() as f64;
        Ok((pos / n, neg / n))
    };

    let supcon_params = LossParams::supcon_equivalent(config.tau)?;
    let (supcon_pos_mag, supcon_neg_mag) = mean_over(&supcon_params, LossKind::SupCon)?;

    let mut rows = Vec::with_capacity(config.k1_grid.len() * config.k2_grid.len());
    for &k1 in &config.k1_grid {
        for &k2 in &config.k2_grid {
            let params = LossParams::new(config.tau, k1, k2)?;
            let (mean_pos_mag, mean_neg_mag) = mean_over(&params, LossKind::Tcl)?;
            let top1 = match &config.train {
                None => None,
                Some(sweep) => {
                    let mut train = sweep.train.clone();
                    train.loss_kind = LossKind::Tcl;
                    train.loss_params = params;
                    let result =
                        crate::trainer::run_experiment(&sweep.dataset, &train, &sweep.probe)?;
                    Some(result.probe.top1)
                }
            };
            rows.push(SweepRow {
                k1,
                k2,
                mean_pos_mag,
                mean_neg_mag,
                supcon_pos_mag,
                supcon_neg_mag,
                top1,
            });
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    use crate::losses::{supcon_anchor_grad, tcl_anchor_grad};
    use crate::numerics::l2_normalize;

    fn orthonormal_triple() -> ContrastiveBatch {
        let embeddings = vec![
            Embedding::try_from_unit(vec![1.0, 0.0, 0.0]).unwrap(),
            Embedding::try_from_unit(vec![0.0, 1.0, 0.0]).unwrap(),
            Embedding::try_from_unit(vec![0.0, 0.0, 1.0]).unwrap(),
        ];
        ContrastiveBatch::new(embeddings, vec![vec![1], vec![0], vec![]]).unwrap()
    }

    #[test]
    fn decompose_trivial_coefficients() {
        let batch = orthonormal_triple();
        let params = LossParams::new(1.0, 1.0, 1.0).unwrap();
        let decomposition = decompose(&batch, &params, LossKind::Tcl).unwrap();
        let anchor = &decomposition.anchors[0];
        assert_eq!(anchor.anchor, 0);
        assert!((anchor.x - 1.0).abs() < 1e-15);
        assert!((anchor.positives[0].p - 1.0 / 3.0).abs() < 1e-12);
        assert!((anchor.positives[0].y - 1.0 / 3.0).abs() < 1e-12);
        assert!((anchor.negatives[0].p - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn supcon_decomposition_coefficients_sum_to_zero() {
        let mut rng = crate::seeded_rng(61);
        for _ in 0..20 {
            let batch = sample_batch(&BatchSpec::default(), &mut rng);
            let params = LossParams::supcon_equivalent(0.2).unwrap();
            let decomposition = decompose(&batch, &params, LossKind::SupCon).unwrap();
            for anchor in &decomposition.anchors {
                let sum: f64 = anchor.positives.iter().map(|p| p.p - anchor.x).sum::<f64>()
                    + anchor.negatives.iter().map(|n| n.p).sum::<f64>();
                assert!(sum.abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn decomposition_reassembles_anchor_gradients() {
        let mut rng = crate::seeded_rng(67);
        for _ in 0..20 {
            let batch = sample_batch(&BatchSpec::default(), &mut rng);
            let params = LossParams::new(0.1, 4000.0, 1.5).unwrap();
            for kind in [LossKind::Tcl, LossKind::SupCon] {
                let decomposition = decompose(&batch, &params, kind).unwrap();
                for anchor in &decomposition.anchors {
                    let grad = match kind {
                        LossKind::Tcl => tcl_anchor_grad(&batch, anchor.anchor, &params).unwrap(),
                        LossKind::SupCon => {
                            supcon_anchor_grad(&batch, anchor.anchor, params.tau).unwrap()
                        }
                    };
                    for k in 0..batch.dim() {
                        let reassembled =
                            (anchor.positive_term[k] + anchor.negative_term[k]) / params.tau;
                        assert!(
                            (reassembled - grad[k]).abs() <= 1e-10,
                            "{kind}: {reassembled} vs {}",
                            grad[k]
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn hard_positive_trivial_magnitudes() {
        let batch = orthonormal_triple();
        let params = LossParams::new(1.0, 1.0, 1.0).unwrap();
        let pairs = hard_positive_magnitudes(&batch, &params).unwrap();
        let pair = pairs.iter().find(|p| p.anchor == 0).unwrap();
        assert!((pair.supcon_magnitude - 0.5).abs() < 1e-12);
        assert!((pair.tcl_magnitude - 1.0).abs() < 1e-12);
        assert!(pair.is_hard);
        // Magnitude form of the dominance claim on this hard pair.
        assert!(pair.tcl_magnitude > pair.supcon_magnitude);
    }

    #[test]
    fn hard_pair_magnitudes_coincide_at_reduction_params() {
        let mut rng = crate::seeded_rng(71);
        let batch = sample_batch(&BatchSpec::default(), &mut rng);
        let params = LossParams::supcon_equivalent(0.4).unwrap();
        for pair in hard_positive_magnitudes(&batch, &params).unwrap() {
            assert!((pair.tcl_signed - pair.supcon_signed).abs() <= 1e-12);
        }
        for pair in hard_negative_magnitudes(&batch, &params).unwrap() {
            assert!((pair.tcl - pair.supcon).abs() <= 1e-12);
        }
    }

    #[test]
    fn hard_negative_trivial_values() {
        let batch = orthonormal_triple();
        let k2_1 = LossParams::new(1.0, 1.0, 1.0).unwrap();
        let pairs = hard_negative_magnitudes(&batch, &k2_1).unwrap();
        let pair = pairs.iter().find(|p| p.anchor == 0).unwrap();
        assert!((pair.tcl - 1.0 / 3.0).abs() < 1e-12);
        // k2 = 2 doubles the negative term: D = 1 + 1 + 2 = 4, P = 2/4.
        let k2_2 = LossParams::new(1.0, 1.0, 2.0).unwrap();
        let pairs = hard_negative_magnitudes(&batch, &k2_2).unwrap();
        let pair = pairs.iter().find(|p| p.anchor == 0).unwrap();
        assert!((pair.tcl - 0.5).abs() < 1e-12);
    }

    #[test]
    fn hard_negative_matches_scalar_oracle() {
        let mut rng = crate::seeded_rng(73);
        let batch = sample_batch(&BatchSpec::default(), &mut rng);
        let params = LossParams::new(0.3, 50.0, 2.5).unwrap();
        let pairs = hard_negative_magnitudes(&batch, &params).unwrap();
        for pair in pairs {
            let d = crate::losses::tcl_denominator(&batch, pair.anchor, &params).unwrap();
            let oracle = params.k2 * (pair.dot / params.tau).exp() / d;
            assert!((pair.tcl - oracle).abs() <= 1e-12 * oracle.max(1.0));
        }
    }

    #[test]
    fn coefficient_signs_positive_in_guarantee_range() {
        let mut rng = crate::seeded_rng(79);
        for _ in 0..20 {
            let batch = sample_batch(&BatchSpec::default(), &mut rng);
            let params = LossParams::new(0.2, 3.0, 2.0).unwrap();
            let decomposition = decompose(&batch, &params, LossKind::Tcl).unwrap();
            for anchor in &decomposition.anchors {
                for pc in &anchor.positives {
                    assert!(pc.y > 0.0);
                    assert!(pc.p > 0.0);
                }
                for nc in &anchor.negatives {
                    assert!(nc.p > 0.0);
                }
            }
        }
    }

    #[test]
    fn tuned_softmax_weight_strictly_below_plain_weight() {
        // P_tcl < P_sup for every positive pair whenever k1 >= 1 (k2 = 1) or
        // k2 > 1, since the tuned denominator strictly grows.
        let mut rng = crate::seeded_rng(83);
        for params in [
            LossParams::new(0.3, 1.0, 1.0).unwrap(),
            LossParams::new(0.3, 0.0, 2.0).unwrap(),
        ] {
            for _ in 0..10 {
                let batch = sample_batch(&BatchSpec::default(), &mut rng);
                for anchor in batch.included_anchors().collect::<Vec<_>>() {
                    if params.k1 == 0.0 && batch.negatives(anchor).is_empty() {
                        continue;
                    }
                    let sup =
                        anchor_coefficients(&batch, anchor, &params, LossKind::SupCon).unwrap();
                    let tcl = anchor_coefficients(&batch, anchor, &params, LossKind::Tcl).unwrap();
                    for (s, t) in sup.positives.iter().zip(&tcl.positives) {
                        assert!(t.p < s.p, "P_tcl {} !< P_sup {}", t.p, s.p);
                    }
                }
            }
        }
    }

    #[test]
    fn dominance_check_passes_in_guarantee_range() {
        let params = LossParams::new(0.5, 1.0, 1.0).unwrap();
        let report =
            verify_hard_positive_dominance(200, &BatchSpec::default(), &params, 17).unwrap();
        assert!(report.pass, "counterexamples: {:?}", report.counterexamples);
        assert!(report.pairs_checked > 0);
        assert!(report.min_margin > 0.0);

        let extreme = LossParams::new(0.1, 5000.0, 1.0).unwrap();
        let report =
            verify_hard_positive_dominance(200, &BatchSpec::default(), &extreme, 19).unwrap();
        assert!(report.pass);
    }

    #[test]
    fn dominance_check_rejects_sub_guarantee_params() {
        let params = LossParams::new(0.5, 0.5, 1.0).unwrap();
        assert!(matches!(
            verify_hard_positive_dominance(10, &BatchSpec::default(), &params, 1),
            Err(GradLabError::InvalidParams(_))
        ));
    }

    #[test]
    fn monotonicity_trivial_and_random() {
        let batch = orthonormal_triple();
        let report = verify_hard_negative_monotonicity(&batch, 1.0, 1.0, &[1.0, 2.0]).unwrap();
        assert!(report.pass);
        // 1/3 -> 1/2 on the trivial pair.
        assert!((report.min_margin - (0.5 - 1.0 / 3.0)).abs() < 1e-12);

        let mut rng = crate::seeded_rng(89);
        for k1 in [0.0, 1.0, 5000.0] {
            let batch = sample_batch(&BatchSpec::default(), &mut rng);
            let report =
                verify_hard_negative_monotonicity(&batch, 0.1, k1, &[1.0, 1.5, 2.0, 3.0, 5.0])
                    .unwrap();
            assert!(report.pass, "k1 = {k1}: {:?}", report.counterexamples);
        }
    }

    #[test]
    fn monotonicity_rejects_bad_grids() {
        let batch = orthonormal_triple();
        assert!(matches!(
            verify_hard_negative_monotonicity(&batch, 1.0, 1.0, &[1.0, 1.0]),
            Err(GradLabError::InvalidGrid(_))
        ));
        assert!(matches!(
            verify_hard_negative_monotonicity(&batch, 1.0, 1.0, &[1.0]),
            Err(GradLabError::InvalidGrid(_))
        ));
    }

    #[test]
    fn curves_from_single_epoch_trace_equal_batch_means() {
        use crate::trainer::{StepRecord, TrainTrace};
        let probe = GradProbe {
            kind: LossKind::Tcl,
            params: LossParams::new(0.1, 1.0, 1.0).unwrap(),
        };
        let mags = TermMagnitudes {
            mean_pos_mag: 0.25,
            mean_neg_mag: 0.5,
            mean_pos_coef: 0.1,
            mean_neg_coef: 0.2,
        };
        let trace = TrainTrace {
            records: Vec::new(),
            steps: vec![StepRecord { epoch: 0, step: 0, batch_size: 8, probes: vec![mags] }],
            probe_specs: vec![probe],
            warnings: Vec::new(),
        };
        let curves = mean_gradient_curves(&trace).unwrap();
        assert_eq!(curves.curves[0].len(), 1);
        assert_eq!(curves.curves[0][0].mean_pos_mag, 0.25);
        assert_eq!(curves.curves[0][0].mean_neg_mag, 0.5);
        // Determinism: aggregating the same trace twice gives the same curves.
        let again = mean_gradient_curves(&trace).unwrap();
        assert_eq!(curves.curves[0], again.curves[0]);
    }

    #[test]
    fn curves_require_logged_steps() {
        let trace = TrainTrace::default();
        assert!(matches!(mean_gradient_curves(&trace), Err(GradLabError::EmptyTrace)));
    }

    #[test]
    fn curves_aggregate_a_real_training_trace_per_epoch() {
        use crate::data::{make_gaussian_clusters, BatchMode, ViewConfig};
        use crate::trainer::{train_contrastive, GradLogConfig, MlpSpec, OptimConfig, TrainConfig};
        let ds = make_gaussian_clusters(3, 12, 6, 0.15, 5).unwrap();
        let params = LossParams::new(0.1, 100.0, 1.0).unwrap();
        let cfg = TrainConfig {
            mode: BatchMode::Supervised,
            loss_kind: LossKind::Tcl,
            loss_params: params,
            mlp: MlpSpec { encoder: vec![6, 8, 4], projector: vec![4, 4, 3] },
            optim: OptimConfig::new(0.05, 3),
            view_cfg: ViewConfig::default(),
            batch_size: 6,
            seed: 9,
            grad_log: Some(GradLogConfig {
                every: 1,
                probes: vec![
                    GradProbe { kind: LossKind::Tcl, params },
                    GradProbe {
                        kind: LossKind::SupCon,
                        params: LossParams::supcon_equivalent(0.1).unwrap(),
                    },
                ],
            }),
            threads: 1,
        };
        let (_, trace) = train_contrastive(&ds, &cfg).unwrap();
        assert_eq!(trace.steps.len(), 3 * 2, "3 epochs x 2 batches per epoch");
        let curves = mean_gradient_curves(&trace).unwrap();
        assert_eq!(curves.probes.len(), 2);
        for curve in &curves.curves {
            assert_eq!(curve.len(), 3, "one point per epoch");
            assert!(curve.iter().all(|p| p.mean_pos_mag.is_finite() && p.mean_pos_mag > 0.0));
        }
        // Epoch means match direct averaging of the step log.
        let epoch0: Vec<&crate::trainer::StepRecord> =
            trace.steps.iter().filter(|s| s.epoch == 0).collect();
        let direct = epoch0.iter().map(|s| s.probes[0].mean_pos_mag).sum::<f64>()
            / epoch0.len() as f64;
        assert!((curves.curves[0][0].mean_pos_mag - direct).abs() < 1e-15);
    }

    #[test]
    fn sweep_single_point_and_k1_monotonicity() {
        let config = KSweepConfig {
            tau: 0.1,
            k1_grid: vec![10.0],
            k2_grid: vec![1.0],
            n_batches: 5,
            batch_spec: BatchSpec::default(),
            seed: 7,
            train: None,
        };
        let rows = k_sweep(&config).unwrap();
        assert_eq!(rows.len(), 1);
        assert!(rows[0].top1.is_none());

        let config = KSweepConfig {
            k1_grid: vec![1.0, 1e3, 5e3, 5e4],
            n_batches: 20,
            ..config
        };
        let rows = k_sweep(&config).unwrap();
        for pair in rows.windows(2) {
            assert!(
                pair[1].mean_pos_mag >= pair[0].mean_pos_mag,
                "mean positive magnitude not nondecreasing in k1: {pair:?}"
            );
        }
        // Same frozen batches: the baseline columns repeat.
        assert!(rows.windows(2).all(|w| w[0].supcon_pos_mag == w[1].supcon_pos_mag));
    }

    #[test]
    fn sweep_k2_raises_negative_magnitude() {
        let config = KSweepConfig {
            tau: 0.1,
            k1_grid: vec![5e4],
            k2_grid: vec![1.0, 3.0],
            n_batches: 20,
            batch_spec: BatchSpec::default(),
            seed: 11,
            train: None,
        };
        let rows = k_sweep(&config).unwrap();
        assert_eq!(rows.len(), 2);
        assert!(
            rows[1].mean_neg_mag > rows[0].mean_neg_mag,
            "k2 = 3 should raise the mean negative magnitude: {rows:?}"
        );
    }

    #[test]
    fn sweep_rejects_empty_grids() {
        let config = KSweepConfig {
            tau: 0.1,
            k1_grid: vec![],
            k2_grid: vec![1.0],
            n_batches: 1,
            batch_spec: BatchSpec::default(),
            seed: 0,
            train: None,
        };
        assert!(matches!(k_sweep(&config), Err(GradLabError::InvalidGrid(_))));
    }
}
