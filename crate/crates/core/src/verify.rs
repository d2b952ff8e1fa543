//! Runnable property suites: gradient oracles, reduction identities, the
//! coefficient guarantees, and the structural invariants, each reported as
//! a named pass/fail with counterexamples.
//!
//! The gradient oracle evaluates both losses on raw (unnormalized) copies
//! of the embeddings with naive direct sums — an implementation
//! deliberately separate from the log-domain production path — and compares
//! central finite differences against the closed-form gradients. Vector
//! agreement is measured as `||a - f|| / max(||a||, ||f||)`.

use serde::Serialize;

use crate::data::{self, BatchMode, ViewConfig};
use crate::gradlab::{self, BatchSpec};
use crate::losses::{
    anchor_coefficients, cross_entropy, full_batch_grad, supcon_anchor_grad, supcon_loss,
    tcl_anchor_grad, tcl_loss, ContrastiveBatch, LossKind, LossParams,
};
use crate::numerics::{dot_slices, Embedding};
use crate::trainer::{
    load_checkpoint, save_checkpoint, train_contrastive, train_linear_probe, MlpSpec, Model,
    OptimConfig, ProbeConfig, TrainConfig,
};

const FD_STEP: f64 = 1e-5;
const FD_REL_TOL: f64 = 1e-6;
const MAX_COUNTEREXAMPLES: usize = 10;

/// Corruptions applied inside the verification layer so failure paths can
/// be exercised end to end; production math is untouched.
#[derive(Debug, Clone, Copy, Default)]
pub struct FaultInjection {
    /// Flip the sign of the Y coefficient when assembling the
    /// hard-positive dominance margins.
    pub flip_y_sign: bool,
}

#[derive(Debug, Clone)]
pub struct VerifyConfig {
    pub seed: u64,
    /// Batches for the finite-difference gradient oracle.
    pub oracle_batches: usize,
    /// Batches for the reduction-identity sweep.
    pub reduction_batches: usize,
    /// Batches per parameter combination for the coefficient guarantees.
    pub theorem_batches: usize,
    pub fault: FaultInjection,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self {
            seed: 0x7c1,
            oracle_batches: 108,
            reduction_batches: 1000,
            theorem_batches: 1000,
            fault: FaultInjection::default(),
        }
    }
}

/// Outcome of one named property suite.
#[derive(Debug, Clone, Serialize)]
pub struct PropertyReport {
    pub name: String,
    pub passed: bool,
    pub checked: usize,
    pub details: String,
    pub counterexamples: Vec<String>,
}

impl PropertyReport {
    fn new(name: &str) -> Self {
        Self {
            name: name.into(),
            passed: true,
            checked: 0,
            details: String::new(),
            counterexamples: Vec::new(),
        }
    }

    fn fail(&mut self, message: String) {
        self.passed = false;
        if self.counterexamples.len() < MAX_COUNTEREXAMPLES {
            self.counterexamples.push(message);
        } else if self.counterexamples.len() == MAX_COUNTEREXAMPLES {
            self.counterexamples.push("... further counterexamples elided".into());
        }
    }
}

/// Runs every suite. The list is fixed; nothing is skipped silently.
pub fn run_all(config: &VerifyConfig) -> Vec<PropertyReport> {
    vec![
        numerics_properties(config),
        gradient_oracle(config),
        reduction_identity(config),
        hard_positive_dominance(config),
        hard_negative_monotonicity(config),
        loss_positivity(config),
        supcon_zero_sum(config),
        permutation_invariance(config),
        decomposition_consistency(config),
        batch_construction(config),
        probe_isolation(config),
        checkpoint_roundtrip(config),
        determinism(config),
    ]
}

const ORACLE_TAUS: [f64; 3] = [0.1, 0.5, 1.0];
const ORACLE_K1S: [f64; 4] = [0.0, 1.0, 100.0, 5000.0];
const ORACLE_K2S: [f64; 3] = [1.0, 1.5, 3.0];

// ---------------------------------------------------------------------
// Raw-slice loss evaluators: naive direct sums over unnormalized vectors,
// used only to finite-difference the losses.
// ---------------------------------------------------------------------

fn raw_supcon_anchor(
    embeddings: &[Vec<f64>],
    batch: &ContrastiveBatch,
    anchor: usize,
    tau: f64,
) -> f64 {
    let z_i = &embeddings[anchor];
    let mut denom = 0.0;
    for &a in batch.positives(anchor).iter().chain(batch.negatives(anchor)) {
        denom += (dot_slices(z_i, &embeddings[a]) / tau).exp();
    }
    let mut acc = 0.0;
    for &p in batch.positives(anchor) {
        acc += ((dot_slices(z_i, &embeddings[p]) / tau).exp() / denom).ln();
    }
    -acc / batch.positives(anchor).len() as f64
}

fn raw_tcl_anchor(
    embeddings: &[Vec<f64>],
    batch: &ContrastiveBatch,
    anchor: usize,
    params: &LossParams,
) -> f64 {
    let z_i = &embeddings[anchor];
    let mut denom = 0.0;
    for &p in batch.positives(anchor) {
        let s = dot_slices(z_i, &embeddings[p]);
        denom += (s / params.tau).exp() + params.k1 * (-s).exp();
    }
    for &n in batch.negatives(anchor) {
        denom += params.k2 * (dot_slices(z_i, &embeddings[n]) / params.tau).exp();
    }
    let mut acc = 0.0;
    for &p in batch.positives(anchor) {
        acc += ((dot_slices(z_i, &embeddings[p]) / params.tau).exp() / denom).ln();
    }
    -acc / batch.positives(anchor).len() as f64
}

fn raw_total(
    embeddings: &[Vec<f64>],
    batch: &ContrastiveBatch,
    params: &LossParams,
    kind: LossKind,
) -> f64 {
    batch
        .included_anchors()
        .map(|i| match kind {
            LossKind::SupCon => raw_supcon_anchor(embeddings, batch, i, params.tau),
            LossKind::Tcl => raw_tcl_anchor(embeddings, batch, i, params),
        })
        .sum()
}

fn vector_rel_err(analytic: &[f64], fd: &[f64]) -> f64 {
    let diff: f64 = analytic.iter().zip(fd).map(|(a, f)| (a - f) * (a - f)).sum::<f64>().sqrt();
    let na: f64 = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nf: f64 = fd.iter().map(|f| f * f).sum::<f64>().sqrt();
    diff / na.max(nf).max(1e-12)
}

fn raw_copy(batch: &ContrastiveBatch) -> Vec<Vec<f64>> {
    batch.embeddings().iter().map(|e| e.as_slice().to_vec()).collect()
}

fn gradient_oracle(config: &VerifyConfig) -> PropertyReport {
    let mut report = PropertyReport::new("gradient_oracle");
    let mut rng = crate::seeded_rng(config.seed ^ 0x01);
    let mut combos = Vec::new();
    for tau in ORACLE_TAUS {
        for k1 in ORACLE_K1S {
            for k2 in ORACLE_K2S {
                combos.push(LossParams::new(tau, k1, k2).unwrap());
            }
        }
    }
    let spec = BatchSpec::default();
    for b in 0..config.oracle_batches {
        let params = combos[b % combos.len()];
        let batch = gradlab::sample_batch(&spec, &mut rng);
        let mut raw = raw_copy(&batch);
        let dim = batch.dim();

        // Per-anchor gradients, both losses.
        for anchor in batch.included_anchors().collect::<Vec<_>>() {
            for kind in [LossKind::SupCon, LossKind::Tcl] {
                let analytic = match kind {
                    LossKind::SupCon => supcon_anchor_grad(&batch, anchor, params.tau),
                    LossKind::Tcl => tcl_anchor_grad(&batch, anchor, &params),
                }
                .expect("anchor has positives");
                let mut fd = vec![0.0; dim];
                for (k, slot) in fd.iter_mut().enumerate() {
                    let original = raw[anchor][k];
                    raw[anchor][k] = original + FD_STEP;
                    let plus = match kind {
                        LossKind::SupCon => raw_supcon_anchor(&raw, &batch, anchor, params.tau),
                        LossKind::Tcl => raw_tcl_anchor(&raw, &batch, anchor, &params),
                    };
                    raw[anchor][k] = original - FD_STEP;
                    let minus = match kind {
                        LossKind::SupCon => raw_supcon_anchor(&raw, &batch, anchor, params.tau),
                        LossKind::Tcl => raw_tcl_anchor(&raw, &batch, anchor, &params),
                    };
                    raw[anchor][k] = original;
                    *slot = (plus - minus) / (2.0 * FD_STEP);
                }
                report.checked += 1;
                let err = vector_rel_err(&analytic, &fd);
                if err > FD_REL_TOL {
                    report.fail(format!(
                        "{kind} anchor {anchor} grad: rel err {err:.3e} (batch {b}, {params:?})"
                    ));
                }
            }
        }

        // Full-batch gradients, both losses, all coordinates at once.
        for kind in [LossKind::SupCon, LossKind::Tcl] {
            let analytic: Vec<f64> = full_batch_grad(&batch, &params, kind)
                .expect("batch has included anchors")
                .iter()
                .flat_map(|g| g.iter().copied().collect::<Vec<_>>())
                .collect();
            let mut fd = Vec::with_capacity(batch.len() * dim);
            for j in 0..batch.len() {
                for k in 0..dim {
                    let original = raw[j][k];
                    raw[j][k] = original + FD_STEP;
                    let plus = raw_total(&raw, &batch, &params, kind);
                    raw[j][k] = original - FD_STEP;
                    let minus = raw_total(&raw, &batch, &params, kind);
                    raw[j][k] = original;
                    fd.push((plus - minus) / (2.0 * FD_STEP));
                }
            }
            report.checked += 1;
            let err = vector_rel_err(&analytic, &fd);
            if err > FD_REL_TOL {
                report
                    .fail(format!("{kind} full grad: rel err {err:.3e} (batch {b}, {params:?})"));
            }
        }
    }

    // Cross-entropy gradient against finite differences of the scalar loss.
    for case in 0..10 {
        use rand::Rng;
        let rows = rng.random_range(2..6);
        let classes = rng.random_range(2..6);
        let mut logits: Vec<Vec<f64>> = (0..rows)
            .map(|_| (0..classes).map(|_| rng.random_range(-4.0..4.0)).collect())
            .collect();
        let labels: Vec<usize> = (0..rows).map(|_| rng.random_range(0..classes)).collect();
        let (_, analytic) = cross_entropy(&logits, &labels).unwrap();
        let analytic_flat: Vec<f64> = analytic.into_iter().flatten().collect();
        let mut fd = Vec::with_capacity(rows * classes);
        for r in 0..rows {
            for c in 0..classes {
                let original = logits[r][c];
                logits[r][c] = original + FD_STEP;
                let (plus, _) = cross_entropy(&logits, &labels).unwrap();
                logits[r][c] = original - FD_STEP;
                let (minus, _) = cross_entropy(&logits, &labels).unwrap();
                logits[r][c] = original;
                fd.push((plus - minus) / (2.0 * FD_STEP));
            }
        }
        report.checked += 1;
        let err = vector_rel_err(&analytic_flat, &fd);
        if err > FD_REL_TOL {
            report.fail(format!("cross_entropy grad case {case}: rel err {err:.3e}"));
        }
    }

    report.details = format!(
        "{} gradient vectors vs central differences (h = {FD_STEP}), rel tol {FD_REL_TOL}",
        report.checked
    );
    report
}

fn reduction_identity(config: &VerifyConfig) -> PropertyReport {
    let mut report = PropertyReport::new("reduction_identity");
    let mut rng = crate::seeded_rng(config.seed ^ 0x02);
    let spec = BatchSpec::default();
    for b in 0..config.reduction_batches {
        let batch = gradlab::sample_batch(&spec, &mut rng);
        let tau = ORACLE_TAUS[b % ORACLE_TAUS.len()];
        let params = LossParams::supcon_equivalent(tau).unwrap();
        let sup = supcon_loss(&batch, tau).unwrap();
        let tcl = tcl_loss(&batch, &params).unwrap();
        report.checked += 1;
        for (i, (a, t)) in sup.per_anchor.iter().zip(&tcl.per_anchor).enumerate() {
            if (a - t).abs() > 1e-12 {
                report.fail(format!("batch {b} anchor {i}: loss {a} vs {t}"));
            }
        }
        for anchor in batch.included_anchors().collect::<Vec<_>>() {
            let gs = supcon_anchor_grad(&batch, anchor, tau).unwrap();
            let gt = tcl_anchor_grad(&batch, anchor, &params).unwrap();
            if gs.iter().zip(gt.iter()).any(|(a, t)| (a - t).abs() > 1e-12) {
                report.fail(format!("batch {b} anchor {anchor}: anchor grads differ"));
            }
        }
        let fs = full_batch_grad(&batch, &params, LossKind::SupCon).unwrap();
        let ft = full_batch_grad(&batch, &params, LossKind::Tcl).unwrap();
        for (j, (a, t)) in fs.iter().zip(&ft).enumerate() {
            if a.iter().zip(t.iter()).any(|(x, y)| (x - y).abs() > 1e-12) {
                report.fail(format!("batch {b} embedding {j}: full grads differ"));
            }
        }
    }
    report.details = format!(
        "TCL(k1 = 0, k2 = 1) vs SupCon on {} batches, tolerance 1e-12",
        report.checked
    );
    report
}

fn hard_positive_dominance(config: &VerifyConfig) -> PropertyReport {
    let mut report = PropertyReport::new("hard_positive_dominance");
    let y_sign = if config.fault.flip_y_sign { -1.0 } else { 1.0 };
    let spec = BatchSpec::default();
    let mut magnitude_checked = 0usize;
    for (combo, (k1, k2)) in [(1.0, 1.0), (1.0, 1.5), (100.0, 1.0), (5000.0, 1.0), (5000.0, 3.0)]
        .into_iter()
        .enumerate()
    {
        let params = LossParams::new(0.1 + 0.2 * (combo % 3) as f64, k1, k2).unwrap();
        // The production check first, unfaulted.
        let product = gradlab::verify_hard_positive_dominance(
            config.theorem_batches,
            &spec,
            &params,
            config.seed ^ (0x10 + combo as u64),
        )
        .expect("params are in the guarantee range");
        if !product.pass && !config.fault.flip_y_sign {
            for c in &product.counterexamples {
                report.fail(format!("k1 = {k1}, k2 = {k2}: {c}"));
            }
        }
        // Margin assembly from the raw coefficients, honoring the fault hook.
        let mut rng = crate::seeded_rng(config.seed ^ (0x20 + combo as u64));
        for b in 0..config.theorem_batches {
            let batch = gradlab::sample_batch(&spec, &mut rng);
            for anchor in batch.included_anchors().collect::<Vec<_>>() {
                let sup = anchor_coefficients(&batch, anchor, &params, LossKind::SupCon).unwrap();
                let tcl = anchor_coefficients(&batch, anchor, &params, LossKind::Tcl).unwrap();
                for (s, t) in sup.positives.iter().zip(&tcl.positives) {
                    report.checked += 1;
                    let supcon_signed = sup.x - s.p;
                    let tcl_signed = tcl.x - t.p + y_sign * t.y;
                    if tcl_signed - supcon_signed <= 0.0 {
                        report.fail(format!(
                            "k1 = {k1}, k2 = {k2}, batch {b}, anchor {anchor}, positive {}: \
                             signed {tcl_signed} <= {supcon_signed}",
                            s.index
                        ));
                    }
                    if supcon_signed >= 0.0 {
                        magnitude_checked += 1;
                        if tcl_signed.abs() <= supcon_signed.abs() {
                            report.fail(format!(
                                "magnitude form: |{tcl_signed}| <= |{supcon_signed}| \
                                 (k1 = {k1}, k2 = {k2}, batch {b}, anchor {anchor})"
                            ));
                        }
                    }
                }
            }
        }
    }
    report.details = format!(
        "signed dominance on {} positive pairs, magnitude form on {magnitude_checked}",
        report.checked
    );
    report
}

fn hard_negative_monotonicity(config: &VerifyConfig) -> PropertyReport {
    let mut report = PropertyReport::new("hard_negative_k2_monotonicity");
    let grid = [1.0, 1.5, 2.0, 3.0, 5.0];
    let spec = BatchSpec::default();
    for (combo, k1) in [0.0, 1.0, 100.0, 5000.0].into_iter().enumerate() {
        let mut rng = crate::seeded_rng(config.seed ^ (0x30 + combo as u64));
        for b in 0..config.theorem_batches / 4 {
            let batch = gradlab::sample_batch(&spec, &mut rng);
            let result = gradlab::verify_hard_negative_monotonicity(&batch, 0.1, k1, &grid)
                .expect("valid grid");
            report.checked += result.pairs_checked;
            if !result.pass {
                for c in &result.counterexamples {
                    report.fail(format!("k1 = {k1}, batch {b}: {c}"));
                }
            }
        }
    }
    report.details =
        format!("P_in strictly increasing along k2 grid {grid:?} on {} pairs", report.checked);
    report
}

fn numerics_properties(config: &VerifyConfig) -> PropertyReport {
    use crate::numerics::{l2_normalize, log_sum_exp, Vector};
    use rand::Rng;
    let mut report = PropertyReport::new("numerics_properties");
    let mut rng = crate::seeded_rng(config.seed ^ 0x03);
    for case in 0..500 {
        let d = rng.random_range(1..10);
        let v = Vector::new((0..d).map(|_| rng.random_range(-5.0..5.0)).collect());
        if v.norm() > 1e-6 {
            let once = l2_normalize(&v).unwrap();
            let twice = l2_normalize(&Vector::new(once.as_slice().to_vec())).unwrap();
            report.checked += 1;
            if once.iter().zip(twice.iter()).any(|(a, b)| (a - b).abs() > 1e-12) {
                report.fail(format!("normalize not idempotent on case {case}"));
            }
            let norm: f64 = once.iter().map(|x| x * x).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > 1e-9 {
                report.fail(format!("normalized norm {norm} on case {case}"));
            }
        }
        let xs: Vec<f64> = (0..rng.random_range(1..10))
            .map(|_| rng.random_range(-100.0..100.0))
            .collect();
        let c = rng.random_range(-500.0..500.0);
        let shifted: Vec<f64> = xs.iter().map(|x| x + c).collect();
        let base = log_sum_exp(&xs).unwrap();
        let moved = log_sum_exp(&shifted).unwrap();
        report.checked += 1;
        if (moved - (base + c)).abs() > 1e-10 {
            report.fail(format!("log_sum_exp shift broke on case {case}"));
        }
    }
    report.details = "normalize idempotence + unit norm, log_sum_exp shift invariance".into();
    report
}

fn loss_positivity(config: &VerifyConfig) -> PropertyReport {
    let mut report = PropertyReport::new("loss_positivity");
    let mut rng = crate::seeded_rng(config.seed ^ 0x04);
    let spec = BatchSpec::default();
    for b in 0..500 {
        let batch = gradlab::sample_batch(&spec, &mut rng);
        let params = LossParams::new(ORACLE_TAUS[b % 3], ORACLE_K1S[b % 4], 1.0).unwrap();
        let result = tcl_loss(&batch, &params).unwrap();
        for anchor in batch.included_anchors().collect::<Vec<_>>() {
            if batch.negatives(anchor).is_empty() && params.k1 == 0.0 {
                continue;
            }
            report.checked += 1;
            if !(result.per_anchor[anchor] > 0.0) {
                report.fail(format!(
                    "batch {b} anchor {anchor}: loss {} not positive ({params:?})",
                    result.per_anchor[anchor]
                ));
            }
        }
    }
    report.details =
        format!("per-anchor loss > 0 with negatives present or k1 > 0 ({} anchors)", report.checked);
    report
}

fn supcon_zero_sum(config: &VerifyConfig) -> PropertyReport {
    let mut report = PropertyReport::new("supcon_zero_sum");
    let mut rng = crate::seeded_rng(config.seed ^ 0x05);
    let spec = BatchSpec::default();
    for b in 0..500 {
        let batch = gradlab::sample_batch(&spec, &mut rng);
        let params = LossParams::supcon_equivalent(ORACLE_TAUS[b % 3]).unwrap();
        for anchor in batch.included_anchors().collect::<Vec<_>>() {
            let co = anchor_coefficients(&batch, anchor, &params, LossKind::SupCon).unwrap();
            let sum: f64 = co.positives.iter().map(|p| p.p - co.x).sum::<f64>()
                + co.negatives.iter().map(|n| n.p).sum::<f64>();
            report.checked += 1;
            if sum.abs() > 1e-12 {
                report.fail(format!("batch {b} anchor {anchor}: coefficient sum {sum}"));
            }
        }
    }
    report.details = "sum_p (P_ip - X_ip) + sum_n P_in = 0 within 1e-12".into();
    report
}

fn permutation_invariance(config: &VerifyConfig) -> PropertyReport {
    use rand::seq::SliceRandom;
    let mut report = PropertyReport::new("permutation_invariance");
    let mut rng = crate::seeded_rng(config.seed ^ 0x06);
    let spec = BatchSpec::default();
    for b in 0..300 {
        let batch = gradlab::sample_batch(&spec, &mut rng);
        let m = batch.len();
        let mut perm: Vec<usize> = (0..m).collect();
        perm.shuffle(&mut rng);
        let mut inv = vec![0usize; m];
        for (new, &old) in perm.iter().enumerate() {
            inv[old] = new;
        }
        let embeddings: Vec<Embedding> =
            perm.iter().map(|&old| batch.embedding(old).clone()).collect();
        let positive_sets: Vec<Vec<usize>> = perm
            .iter()
            .map(|&old| batch.positives(old).iter().map(|&p| inv[p]).collect())
            .collect();
        let permuted = ContrastiveBatch::new(embeddings, positive_sets).unwrap();
        let params = LossParams::new(ORACLE_TAUS[b % 3], ORACLE_K1S[b % 4], ORACLE_K2S[b % 3])
            .unwrap();
        let original = tcl_loss(&batch, &params).unwrap().total;
        let shuffled = tcl_loss(&permuted, &params).unwrap().total;
        report.checked += 1;
        if (original - shuffled).abs() > 1e-10 * original.abs().max(1.0) {
            report.fail(format!("batch {b}: total {original} vs permuted {shuffled}"));
        }
    }
    report.details = "total loss invariant under positive-set-preserving reindexing".into();
    report
}

fn decomposition_consistency(config: &VerifyConfig) -> PropertyReport {
    let mut report = PropertyReport::new("decomposition_consistency");
    let mut rng = crate::seeded_rng(config.seed ^ 0x07);
    let spec = BatchSpec::default();
    for b in 0..300 {
        let batch = gradlab::sample_batch(&spec, &mut rng);
        let params = LossParams::new(ORACLE_TAUS[b % 3], ORACLE_K1S[b % 4], ORACLE_K2S[b % 3])
            .unwrap();
        for kind in [LossKind::SupCon, LossKind::Tcl] {
            let decomposition = gradlab::decompose(&batch, &params, kind).unwrap();
            for anchor in &decomposition.anchors {
                let grad = match kind {
                    LossKind::SupCon => supcon_anchor_grad(&batch, anchor.anchor, params.tau),
                    LossKind::Tcl => tcl_anchor_grad(&batch, anchor.anchor, &params),
                }
                .unwrap();
                report.checked += 1;
                for k in 0..batch.dim() {
                    let lhs = anchor.positive_term[k] + anchor.negative_term[k];
                    let rhs = params.tau * grad[k];
                    if (lhs - rhs).abs() > 1e-10 {
                        report.fail(format!(
                            "batch {b} {kind} anchor {}: term sum {lhs} vs tau*grad {rhs}",
                            anchor.anchor
                        ));
                        break;
                    }
                }
            }
        }
    }
    report.details = "positive_term + negative_term = tau * anchor_grad within 1e-10".into();
    report
}

fn batch_construction(config: &VerifyConfig) -> PropertyReport {
    let mut report = PropertyReport::new("batch_construction");
    let ds = match data::make_gaussian_clusters(4, 20, 6, 0.2, config.seed ^ 0x08) {
        Ok(ds) => ds,
        Err(e) => {
            let mut r = report;
            r.fail(format!("dataset generation failed: {e}"));
            return r;
        }
    };
    let mut rng = crate::seeded_rng(config.seed ^ 0x09);
    for (mode, cfg) in [
        (BatchMode::Supervised, ViewConfig::default()),
        (BatchMode::SelfSupervised, ViewConfig { views_per_sample: 3, ..ViewConfig::default() }),
    ] {
        for b in 0..50 {
            let precursor = match mode {
                BatchMode::Supervised => data::build_supervised_batch(&ds, 10, &cfg, &mut rng),
                BatchMode::SelfSupervised => data::build_selfsup_batch(&ds, 10, &cfg, &mut rng),
            }
            .expect("batch construction succeeds");
            report.checked += 1;
            let m = precursor.len();
            if m != 10 * cfg.views_per_sample {
                report.fail(format!("{mode} batch {b}: size {m}"));
            }
            for (i, positives) in precursor.positive_sets.iter().enumerate() {
                if positives.contains(&i) {
                    report.fail(format!("{mode} batch {b}: anchor {i} in own positives"));
                }
                for &p in positives {
                    if !precursor.positive_sets[p].contains(&i) {
                        report.fail(format!("{mode} batch {b}: asymmetric pair ({i}, {p})"));
                    }
                }
                // Disjointness: everything not positive and not the anchor
                // is a negative by construction; check the supervised size
                // formula instead.
                if mode == BatchMode::Supervised {
                    let labels = precursor.view_labels.as_ref().unwrap();
                    let same = labels.iter().filter(|&&l| l == labels[i]).count();
                    if positives.len() != same - 1 {
                        report.fail(format!(
                            "{mode} batch {b}: |P({i})| = {} but {same} same-label views",
                            positives.len()
                        ));
                    }
                } else if positives.len() != cfg.views_per_sample - 1 {
                    report.fail(format!(
                        "{mode} batch {b}: |P({i})| = {} for V = {}",
                        positives.len(),
                        cfg.views_per_sample
                    ));
                }
            }
        }
    }
    // Seed determinism of the batch stream.
    let mut rng_a = crate::seeded_rng(config.seed ^ 0x0a);
    let mut rng_b = crate::seeded_rng(config.seed ^ 0x0a);
    let a = data::epoch_batches(&ds, 8, &ViewConfig::default(), BatchMode::Supervised, &mut rng_a)
        .unwrap();
    let b = data::epoch_batches(&ds, 8, &ViewConfig::default(), BatchMode::Supervised, &mut rng_b)
        .unwrap();
    report.checked += 1;
    for (x, y) in a.iter().zip(&b) {
        if x.views != y.views || x.positive_sets != y.positive_sets {
            report.fail("equal seeds produced different batch streams".into());
        }
    }
    report.details = "symmetry, sizes, and seeded determinism of constructed batches".into();
    report
}

fn tiny_train_config(seed: u64, epochs: usize) -> (data::Dataset, TrainConfig) {
    let ds = data::make_gaussian_clusters(3, 10, 4, 0.15, 7).expect("valid dataset");
    let cfg = TrainConfig {
        mode: BatchMode::Supervised,
        loss_kind: LossKind::Tcl,
        loss_params: LossParams::new(0.1, 100.0, 1.0).unwrap(),
        mlp: MlpSpec { encoder: vec![4, 8, 4], projector: vec![4, 4, 3] },
        optim: OptimConfig::new(0.1, epochs),
        view_cfg: ViewConfig::default(),
        batch_size: 5,
        seed,
        grad_log: None,
        threads: 1,
    };
    (ds, cfg)
}

fn probe_isolation(config: &VerifyConfig) -> PropertyReport {
    let mut report = PropertyReport::new("probe_isolation");
    let (ds, cfg) = tiny_train_config(config.seed ^ 0x0b, 5);
    match train_contrastive(&ds, &cfg) {
        Ok((model, _)) => {
            let before = model.params_flat();
            match train_linear_probe(&model, &ds, &ProbeConfig::new(10, 0.5, config.seed)) {
                Ok(probe) => {
                    report.checked = before.len();
                    if model.params_flat() != before {
                        report.fail("encoder parameters changed during probe training".into());
                    }
                    report.details =
                        format!("encoder bit-identical through probe (top1 {:.3})", probe.top1);
                }
                Err(e) => report.fail(format!("probe failed: {e}")),
            }
        }
        Err(e) => report.fail(format!("training failed: {e}")),
    }
    report
}

fn checkpoint_roundtrip(config: &VerifyConfig) -> PropertyReport {
    let mut report = PropertyReport::new("checkpoint_roundtrip");
    let spec = MlpSpec { encoder: vec![4, 6, 4], projector: vec![4, 3] };
    let model = Model::init(&spec, config.seed ^ 0x0c).expect("valid spec");
    let dir = match tempfile_dir() {
        Ok(dir) => dir,
        Err(e) => {
            report.fail(format!("no temp dir: {e}"));
            return report;
        }
    };
    let path = dir.join("verify.ckpt");
    match save_checkpoint(&model, &path).and_then(|_| load_checkpoint(&path)) {
        Ok(loaded) => {
            report.checked = model.params_flat().len();
            if loaded.params_flat() != model.params_flat() {
                report.fail("roundtrip changed parameters".into());
            }
        }
        Err(e) => report.fail(format!("roundtrip failed: {e}")),
    }
    // Truncation must be detected.
    if let Ok(bytes) = std::fs::read(&path) {
        let truncated = dir.join("truncated.ckpt");
        let _ = std::fs::write(&truncated, &bytes[..bytes.len().saturating_sub(5)]);
        if load_checkpoint(&truncated).is_ok() {
            report.fail("truncated checkpoint loaded without error".into());
        }
    }
    let _ = std::fs::remove_dir_all(&dir);
    report.details = "save/load bit-exactness and corruption detection".into();
    report
}

fn determinism(config: &VerifyConfig) -> PropertyReport {
    let mut report = PropertyReport::new("determinism");
    let (ds, cfg) = tiny_train_config(config.seed ^ 0x0d, 4);
    let first = train_contrastive(&ds, &cfg);
    let second = train_contrastive(&ds, &cfg);
    match (first, second) {
        (Ok((model_a, trace_a)), Ok((model_b, trace_b))) => {
            report.checked = 1;
            if model_a.params_flat() != model_b.params_flat() {
                report.fail("equal seeds gave different parameters".into());
            }
            let losses_a: Vec<f64> = trace_a.records.iter().map(|r| r.loss).collect();
            let losses_b: Vec<f64> = trace_b.records.iter().map(|r| r.loss).collect();
            if losses_a != losses_b {
                report.fail("equal seeds gave different traces".into());
            }
        }
        (Err(e), _) | (_, Err(e)) => report.fail(format!("training failed: {e}")),
    }
    report.details = "(seed, config) determines trace and final parameters".into();
    report
}

fn tempfile_dir() -> std::io::Result<std::path::PathBuf> {
    let dir = std::env::temp_dir().join(format!("tcl-verify-{}", std::process::id()));
    std::fs::create_dir_all(&dir)?;
    Ok(dir)
}
