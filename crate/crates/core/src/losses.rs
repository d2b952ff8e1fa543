//! Forward values and exact closed-form gradients for the SupCon and TCL
//! contrastive losses, plus the softmax cross-entropy used by the linear
//! probe.
//!
//! Both losses act on a batch of unit embeddings with a positive set P(i)
//! per anchor; the negative set N(i) is everything else. Per anchor:
//!
//! ```text
//! L_i = -(1/|P(i)|) * sum_{p in P(i)} log( exp(z_i.z_p / tau) / D_i )
//! ```
//!
//! For SupCon, `D_i` is the sum of `exp(z_i.z_a / tau)` over all of A(i) =
//! P(i) ∪ N(i). For TCL,
//!
//! ```text
//! D_i = sum_p' exp(z_i.z_p' / tau)
//!     + k1 * sum_p' exp(-z_i.z_p')          // note: no tau here
//!     + k2 * sum_n  exp(z_i.z_n / tau)
//! ```
//!
//! The `k1` mirror term deliberately has no temperature scaling in its
//! exponent; its gradient coefficient `Y_ip` carries the compensating
//! `tau` factor instead. Everything is evaluated in the log domain with a
//! max shift so large `k1` and small `tau` cannot overflow.
//!
//! Anchors whose positive set is empty are excluded from the loss sum; an
//! error is raised only when that excludes the whole batch. Gradients here
//! are taken with respect to the embeddings themselves; the normalization
//! Jacobian lives in the trainer.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{dot_slices, log_sum_exp, Embedding, NumericsError, Vector};

#[derive(Debug, Error)]
pub enum LossError {
    #[error("anchor {anchor} has an empty positive set")]
    EmptyPositiveSet { anchor: usize },
    #[error("every anchor has an empty positive set")]
    AllAnchorsExcluded,
    #[error("invalid batch: {0}")]
    InvalidBatch(String),
    #[error("invalid loss params: {0}")]
    InvalidParams(String),
    #[error("label {label} out of range for {classes} classes")]
    InvalidLabel { label: usize, classes: usize },
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// Which contrastive objective to evaluate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    SupCon,
    Tcl,
}

impl std::fmt::Display for LossKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            LossKind::SupCon => write!(f, "supcon"),
            LossKind::Tcl => write!(f, "tcl"),
        }
    }
}

/// Temperature and denominator-tuning scalars.
///
/// `k1` and `k2` are fixed before training. The hard-positive/hard-negative
/// guarantees assume `k1, k2 >= 1`; smaller values are accepted (they are
/// needed for the SupCon reduction `k1 = 0, k2 = 1`) and the trainer warns
/// when they are used.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossParams {
    pub tau: f64,
    pub k1: f64,
    pub k2: f64,
}

impl LossParams {
    pub fn new(tau: f64, k1: f64, k2: f64) -> Result<Self, LossError> {
        if !(tau > 0.0) || !tau.is_finite() {
            return Err(LossError::InvalidParams(format!("tau must be positive, got {tau}")));
        }
        if !(k1 >= 0.0) || !k1.is_finite() {
            return Err(LossError::InvalidParams(format!("k1 must be finite and >= 0, got {k1}")));
        }
        if !(k2 >= 0.0) || !k2.is_finite() {
            return Err(LossError::InvalidParams(format!("k2 must be finite and >= 0, got {k2}")));
        }
        Ok(Self { tau, k1, k2 })
    }

    /// Parameters with `k1 = 0, k2 = 1`, for which TCL reduces to SupCon.
    pub fn supcon_equivalent(tau: f64) -> Result<Self, LossError> {
        Self::new(tau, 0.0, 1.0)
    }

    /// True when the hard-pair guarantees (`k1, k2 >= 1`) apply.
    pub fn in_guarantee_range(&self) -> bool {
        self.k1 >= 1.0 && self.k2 >= 1.0
    }
}

/// A batch of unit embeddings plus the positive-set structure over it.
///
/// Invariants checked at construction: `i ∉ P(i)`, indices in range, no
/// duplicates, equal dimensions, and symmetry (`j ∈ P(i) ⇔ i ∈ P(j)`).
/// `N(i)` is derived as everything that is neither the anchor nor one of
/// its positives.
#[derive(Debug, Clone)]
pub struct ContrastiveBatch {
    embeddings: Vec<Embedding>,
    positive_sets: Vec<Vec<usize>>,
    negative_sets: Vec<Vec<usize>>,
}

impl ContrastiveBatch {
    pub fn new(
        embeddings: Vec<Embedding>,
        positive_sets: Vec<Vec<usize>>,
    ) -> Result<Self, LossError> {
        let batch = Self::build(embeddings, positive_sets)?;
        for (i, positives) in batch.positive_sets.iter().enumerate() {
            for &p in positives {
                if batch.positive_sets[p].binary_search(&i).is_err() {
                    return Err(LossError::InvalidBatch(format!(
                        "positivity is not symmetric: {p} in P({i}) but {i} not in P({p})"
                    )));
                }
            }
        }
        Ok(batch)
    }

    /// Builds a batch without the symmetry check, for gradient-flow
    /// analysis of one-sided positive structures; every other invariant is
    /// still enforced and the loss functions remain well-defined.
    pub fn new_asymmetric(
        embeddings: Vec<Embedding>,
        positive_sets: Vec<Vec<usize>>,
    ) -> Result<Self, LossError> {
        Self::build(embeddings, positive_sets)
    }

    fn build(
        embeddings: Vec<Embedding>,
        mut positive_sets: Vec<Vec<usize>>,
    ) -> Result<Self, LossError> {
        let m = embeddings.len();
        if m == 0 {
            return Err(LossError::InvalidBatch("batch is empty".into()));
        }
        if positive_sets.len() != m {
            return Err(LossError::InvalidBatch(format!(
                "{} positive sets for {m} embeddings",
                positive_sets.len()
            )));
        }
        let dim = embeddings[0].dim();
        if let Some(bad) = embeddings.iter().find(|e| e.dim() != dim) {
            return Err(LossError::InvalidBatch(format!(
                "mixed embedding dimensions: {} vs {dim}",
                bad.dim()
            )));
        }
        for (i, positives) in positive_sets.iter_mut().enumerate() {
            positives.sort_unstable();
            if positives.windows(2).any(|w| w[0] == w[1]) {
                return Err(LossError::InvalidBatch(format!("duplicate index in P({i})")));
            }
            if positives.binary_search(&i).is_ok() {
                return Err(LossError::InvalidBatch(format!("anchor {i} is in its own P({i})")));
            }
            if let Some(&out) = positives.iter().find(|&&p| p >= m) {
                return Err(LossError::InvalidBatch(format!(
                    "P({i}) contains out-of-range index {out}"
                )));
            }
        }
        let negative_sets = (0..m)
            .map(|i| {
                let positives = &positive_sets[i];
                (0..m)
                    .filter(|&j| j != i && positives.binary_search(&j).is_err())
                    .collect()
            })
            .collect();
        Ok(Self { embeddings, positive_sets, negative_sets })
    }

    /// Number of embeddings in the augmented batch.
    pub fn len(&self) -> usize {
        self.embeddings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.embeddings.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.embeddings[0].dim()
    }

    pub fn embedding(&self, i: usize) -> &Embedding {
        &self.embeddings[i]
    }

    pub fn embeddings(&self) -> &[Embedding] {
        &self.embeddings
    }

    pub fn positives(&self, i: usize) -> &[usize] {
        &self.positive_sets[i]
    }

    pub fn negatives(&self, i: usize) -> &[usize] {
        &self.negative_sets[i]
    }

    /// Anchors that take part in the loss sum (non-empty positive set).
    pub fn included_anchors(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.len()).filter(|&i| !self.positive_sets[i].is_empty())
    }
}

/// Total and per-anchor loss values; excluded anchors contribute 0.
#[derive(Debug, Clone, PartialEq)]
pub struct LossResult {
    pub total: f64,
    pub per_anchor: Vec<f64>,
}

/// Per-positive scalar coefficients of one anchor's gradient.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PositiveCoefficient {
    /// Index of the positive in the batch.
    pub index: usize,
    /// z_i . z_p
    pub dot: f64,
    /// Softmax weight P_ip (SupCon) or P_ip with the tuned denominator (TCL).
    pub p: f64,
    /// Y_ip = tau * k1 * exp(-z_i.z_p) / D; zero for SupCon.
    pub y: f64,
}

/// Per-negative scalar coefficient of one anchor's gradient.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NegativeCoefficient {
    pub index: usize,
    /// z_i . z_n
    pub dot: f64,
    /// P_in (SupCon) or k2-scaled P_in (TCL).
    pub p: f64,
}

/// Every scalar entering one anchor's closed-form gradient.
///
/// The gradient of the anchor's loss term with respect to its own embedding
/// is `(1/tau) * [ sum_p z_p (p - x - y) + sum_n z_n p ]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorCoefficients {
    pub anchor: usize,
    /// X_ip = 1 / |P(i)|, shared by all positives of the anchor.
    pub x: f64,
    /// Log of the anchor's denominator.
    pub log_denom: f64,
    pub positives: Vec<PositiveCoefficient>,
    pub negatives: Vec<NegativeCoefficient>,
}

impl AnchorCoefficients {
    /// Per-anchor loss assembled from the cached dots and denominator.
    fn per_anchor_loss(&self, tau: f64) -> f64 {
        let mut acc = 0.0;
        for pc in &self.positives {
            acc += self.log_denom - pc.dot / tau;
        }
        acc * self.x
    }
}

/// Computes every coefficient of one anchor's gradient in one pass.
pub fn anchor_coefficients(
    batch: &ContrastiveBatch,
    anchor: usize,
    params: &LossParams,
    kind: LossKind,
) -> Result<AnchorCoefficients, LossError> {
    let positives = batch.positives(anchor);
    if positives.is_empty() {
        return Err(LossError::EmptyPositiveSet { anchor });
    }
    let negatives = batch.negatives(anchor);
    let z_i = batch.embedding(anchor).as_slice();
    let tau = params.tau;

    let pos_dots: Vec<f64> =
        positives.iter().map(|&p| dot_slices(z_i, batch.embedding(p))).collect();
    let neg_dots: Vec<f64> =
        negatives.iter().map(|&n| dot_slices(z_i, batch.embedding(n))).collect();

    // Exponent list for the log-domain denominator. Positive terms first,
    // then (TCL only) the k1 mirror terms, then the negative terms; terms
    // with a zero k factor are dropped so log(0) never appears.
    let mut exponents: Vec<f64> = pos_dots.iter().map(|s| s / tau).collect();
    match kind {
        LossKind::SupCon => {
            exponents.extend(neg_dots.iter().map(|s| s / tau));
        }
        LossKind::Tcl => {
            if params.k1 > 0.0 {
                let log_k1 = params.k1.ln();
                exponents.extend(pos_dots.iter().map(|s| log_k1 - s));
            }
            if params.k2 > 0.0 {
                let log_k2 = params.k2.ln();
                exponents.extend(neg_dots.iter().map(|s| log_k2 + s / tau));
            }
        }
    }
    let log_denom = log_sum_exp(&exponents)?;

    let x = 1.0 / positives.len() as f64;
    let pos_coefficients = positives
        .iter()
        .zip(&pos_dots)
        .map(|(&index, &dot)| {
            let p = (dot / tau - log_denom).exp();
            let y = match kind {
                LossKind::SupCon => 0.0,
                LossKind::Tcl if params.k1 > 0.0 => {
                    tau * (params.k1.ln() - dot - log_denom).exp()
                }
                LossKind::Tcl => 0.0,
            };
            PositiveCoefficient { index, dot, p, y }
        })
        .collect();
    let neg_coefficients = negatives
        .iter()
        .zip(&neg_dots)
        .map(|(&index, &dot)| {
            let p = match kind {
                LossKind::SupCon => (dot / tau - log_denom).exp(),
                LossKind::Tcl if params.k2 > 0.0 => {
                    (params.k2.ln() + dot / tau - log_denom).exp()
                }
                LossKind::Tcl => 0.0,
            };
            NegativeCoefficient { index, dot, p }
        })
        .collect();

    Ok(AnchorCoefficients {
        anchor,
        x,
        log_denom,
        positives: pos_coefficients,
        negatives: neg_coefficients,
    })
}

fn loss_impl(
    batch: &ContrastiveBatch,
    params: &LossParams,
    kind: LossKind,
) -> Result<LossResult, LossError> {
    let mut per_anchor = vec![0.0; batch.len()];
    let mut included = 0usize;
    for anchor in batch.included_anchors() {
        let co = anchor_coefficients(batch, anchor, params, kind)?;
        per_anchor[anchor] = co.per_anchor_loss(params.tau);
        included += 1;
    }
    if included == 0 {
        return Err(LossError::AllAnchorsExcluded);
    }
    Ok(LossResult { total: per_anchor.iter().sum(), per_anchor })
}

/// SupCon loss over the batch: per-anchor terms and their sum.
pub fn supcon_loss(batch: &ContrastiveBatch, tau: f64) -> Result<LossResult, LossError> {
    let params = LossParams::new(tau, 0.0, 1.0)?;
    loss_impl(batch, &params, LossKind::SupCon)
}

/// TCL loss over the batch: per-anchor terms and their sum.
pub fn tcl_loss(batch: &ContrastiveBatch, params: &LossParams) -> Result<LossResult, LossError> {
    loss_impl(batch, params, LossKind::Tcl)
}

/// The tuned denominator D(z_i), evaluated exactly as written:
/// positive terms at `1/tau` scaling, the k1 mirror terms with a bare
/// negated dot, and the k2-scaled negative terms.
pub fn tcl_denominator(
    batch: &ContrastiveBatch,
    anchor: usize,
    params: &LossParams,
) -> Result<f64, LossError> {
    let positives = batch.positives(anchor);
    if positives.is_empty() {
        return Err(LossError::EmptyPositiveSet { anchor });
    }
    let z_i = batch.embedding(anchor).as_slice();
    let mut pos = 0.0;
    let mut mirror = 0.0;
    for &p in positives {
        let s = dot_slices(z_i, batch.embedding(p));
        pos += (s / params.tau).exp();
        mirror += (-s).exp();
    }
    let mut neg = 0.0;
    for &n in batch.negatives(anchor) {
        let s = dot_slices(z_i, batch.embedding(n));
        neg += (s / params.tau).exp();
    }
    Ok(pos + params.k1 * mirror + params.k2 * neg)
}

fn anchor_grad_impl(
    batch: &ContrastiveBatch,
    anchor: usize,
    params: &LossParams,
    kind: LossKind,
) -> Result<Vector, LossError> {
    let co = anchor_coefficients(batch, anchor, params, kind)?;
    let mut grad = Vector::zeros(batch.dim());
    let inv_tau = 1.0 / params.tau;
    for pc in &co.positives {
        grad.scaled_add((pc.p - co.x - pc.y) * inv_tau, batch.embedding(pc.index));
    }
    for nc in &co.negatives {
        grad.scaled_add(nc.p * inv_tau, batch.embedding(nc.index));
    }
    Ok(grad)
}

/// Gradient of the anchor's SupCon term with respect to its own embedding:
/// `(1/tau) [ sum_p z_p (P_ip - X_ip) + sum_n z_n P_in ]`.
pub fn supcon_anchor_grad(
    batch: &ContrastiveBatch,
    anchor: usize,
    tau: f64,
) -> Result<Vector, LossError> {
    let params = LossParams::new(tau, 0.0, 1.0)?;
    anchor_grad_impl(batch, anchor, &params, LossKind::SupCon)
}

/// Gradient of the anchor's TCL term with respect to its own embedding:
/// `(1/tau) [ sum_p z_p (P_ip - X_ip - Y_ip) + sum_n z_n P_in ]`.
pub fn tcl_anchor_grad(
    batch: &ContrastiveBatch,
    anchor: usize,
    params: &LossParams,
) -> Result<Vector, LossError> {
    anchor_grad_impl(batch, anchor, params, LossKind::Tcl)
}

/// Gradient of the total loss with respect to every embedding.
///
/// Each anchor's term also depends on the embeddings appearing in its
/// denominator, so `z_j` picks up contributions from every anchor whose
/// positive or negative set contains it; the per-anchor closed form alone
/// is not the training gradient. For a positive pair the cross term reuses
/// the same scalar coefficient with the roles of the two embeddings
/// swapped, and likewise for negatives.
pub fn full_batch_grad(
    batch: &ContrastiveBatch,
    params: &LossParams,
    kind: LossKind,
) -> Result<Vec<Vector>, LossError> {
    let mut grads: Vec<Vector> = (0..batch.len()).map(|_| Vector::zeros(batch.dim())).collect();
    let inv_tau = 1.0 / params.tau;
    let mut included = 0usize;
    for anchor in batch.included_anchors() {
        let co = anchor_coefficients(batch, anchor, params, kind)?;
        let z_anchor = batch.embedding(anchor).as_slice();
        for pc in &co.positives {
            let c = (pc.p - co.x - pc.y) * inv_tau;
            grads[anchor].scaled_add(c, batch.embedding(pc.index));
            grads[pc.index].scaled_add(c, z_anchor);
        }
        for nc in &co.negatives {
            let c = nc.p * inv_tau;
            grads[anchor].scaled_add(c, batch.embedding(nc.index));
            grads[nc.index].scaled_add(c, z_anchor);
        }
        included += 1;
    }
    if included == 0 {
        return Err(LossError::AllAnchorsExcluded);
    }
    Ok(grads)
}

/// Mean softmax cross-entropy and its gradient with respect to the logits.
///
/// Returns `(loss, grad)` where `grad[i][c] = (softmax_i[c] - onehot) / B`.
pub fn cross_entropy(
    logits: &[Vec<f64>],
    labels: &[usize],
) -> Result<(f64, Vec<Vec<f64>>), LossError> {
    if logits.is_empty() {
        return Err(LossError::InvalidBatch("cross_entropy on an empty batch".into()));
    }
    if logits.len() != labels.len() {
        return Err(LossError::InvalidBatch(format!(
            "{} logit rows vs {} labels",
            logits.len(),
            labels.len()
        )));
    }
    let classes = logits[0].len();
    let batch = logits.len() as f64;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(logits.len());
    for (row, &label) in logits.iter().zip(labels) {
        if row.len() != classes {
            return Err(LossError::InvalidBatch("ragged logit rows".into()));
        }
        if label >= classes {
            return Err(LossError::InvalidLabel { label, classes });
        }
        let lse = log_sum_exp(row)?;
        loss += lse - row[label];
        let mut g: Vec<f64> = row.iter().map(|&v| (v - lse).exp() / batch).collect();
        g[label] -= 1.0 / batch;
        grad.push(g);
    }
    Ok((loss / batch, grad))
}
