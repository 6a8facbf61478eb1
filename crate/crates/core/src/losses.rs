//! The loss terms of the M-step and their analytic gradients.
//!
//! All gradients are taken with respect to raw embedding coordinates; the
//! normalization Jacobian is the encoder's responsibility. Prototypes and
//! the class prior are constants within a step.

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Real;

/// Label value carried by unlabeled rows of a batch.
pub const SENTINEL_UNLABELED: usize = usize::MAX;

/// Values below this are clamped before logarithms.
pub const LOG_FLOOR: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum LossError {
    #[error("too few samples: needed {needed}, got {got}")]
    TooFewSamples { needed: usize, got: usize },
    #[error("every labeled anchor has an empty positive set")]
    NoPositives,
    #[error("assignment {index} is out of range for {num_classes} classes")]
    InvalidAssignment { index: usize, num_classes: usize },
    #[error("prior entry for class {class} underflows the log floor")]
    PriorUnderflow { class: usize },
    #[error("invalid batch: {0}")]
    InvalidBatch(String),
}

/// Weights of the overall objective. `lambda_ins` exists so the
/// instance-term ablation is an exact switch rather than a code path.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LossConfig {
    /// Contrastive temperature.
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default = "default_weight")]
    pub lambda_ins: f64,
    #[serde(default = "default_weight")]
    pub lambda_proto: f64,
    #[serde(default = "default_weight")]
    pub lambda_sup: f64,
    #[serde(default = "default_lambda_kl")]
    pub lambda_kl: f64,
    /// Gaussian augmentation scale used when forming the two views.
    #[serde(default = "default_sigma_aug")]
    pub sigma_aug: f64,
}

fn default_temperature() -> f64 {
    0.1
}
fn default_weight() -> f64 {
    1.0
}
fn default_lambda_kl() -> f64 {
    0.05
}
fn default_sigma_aug() -> f64 {
    0.1
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            temperature: default_temperature(),
            lambda_ins: default_weight(),
            lambda_proto: default_weight(),
            lambda_sup: default_weight(),
            lambda_kl: default_lambda_kl(),
            sigma_aug: default_sigma_aug(),
        }
    }
}

/// Two augmented views of one mini-batch, with per-row label information.
#[derive(Debug, Clone)]
pub struct BatchViews<F> {
    pub v: Array2<F>,
    pub v_prime: Array2<F>,
    /// Class index per row; [`SENTINEL_UNLABELED`] on unlabeled rows.
    pub labels: Vec<usize>,
    pub is_labeled: Vec<bool>,
}

impl<F: Real> BatchViews<F> {
    pub fn new(
        v: Array2<F>,
        v_prime: Array2<F>,
        labels: Vec<usize>,
        is_labeled: Vec<bool>,
    ) -> Result<Self, LossError> {
        let b = v.nrows();
        if v_prime.dim() != v.dim() {
            return Err(LossError::InvalidBatch(format!(
                "view shapes disagree: {:?} vs {:?}",
                v.dim(),
                v_prime.dim()
            )));
        }
        if labels.len() != b || is_labeled.len() != b {
            return Err(LossError::InvalidBatch(
                "labels and mask must match the row count".into(),
            ));
        }
        let tol = F::real(1e-6);
        for (name, m) in [("v", &v), ("v_prime", &v_prime)] {
            for (i, row) in m.rows().into_iter().enumerate() {
                let norm = row.iter().map(|a| *a * *a).sum::<F>().sqrt();
                if (norm - F::one()).abs() > tol {
                    return Err(LossError::InvalidBatch(format!(
                        "{name} row {i} has norm {norm}, expected 1"
                    )));
                }
            }
        }
        for (i, (&l, &lab)) in labels.iter().zip(is_labeled.iter()).enumerate() {
            if lab && l == SENTINEL_UNLABELED {
                return Err(LossError::InvalidBatch(format!(
                    "labeled row {i} carries the unlabeled sentinel"
                )));
            }
        }
        Ok(Self {
            v,
            v_prime,
            labels,
            is_labeled,
        })
    }

    pub fn len(&self) -> usize {
        self.v.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn embed_dim(&self) -> usize {
        self.v.ncols()
    }

    fn rows_where(&self, labeled: bool) -> Vec<usize> {
        self.is_labeled
            .iter()
            .enumerate()
            .filter(|(_, &l)| l == labeled)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn unlabeled_rows(&self) -> Vec<usize> {
        self.rows_where(false)
    }

    pub fn labeled_rows(&self) -> Vec<usize> {
        self.rows_where(true)
    }
}

/// Loss value plus gradients for both views, shaped like the full batch
/// (rows outside the relevant subset are zero).
#[derive(Debug, Clone)]
pub struct ContrastiveResult<F> {
    pub loss: F,
    pub grad_v: Array2<F>,
    pub grad_v_prime: Array2<F>,
    /// Labeled anchors dropped for lack of positives (supervised loss only).
    pub skipped_anchors: usize,
}

/// Shared core of the two contrastive losses on a stacked embedding matrix
/// `u` (anchors = all rows): per active anchor `i`,
/// `L_i = logsumexp_{j != i}(s_ij) - mean_{q in N(i)} s_iq` with
/// `s = u u^T / tau`; the loss is the mean over active anchors.
fn contrastive_core<F: Real>(
    u: &Array2<F>,
    tau: F,
    positives: &[Vec<usize>],
) -> (F, Array2<F>, usize) {
    let a = u.nrows();
    let mut sims = u.dot(&u.t());
    sims.mapv_inplace(|s| s / tau);
    let active: Vec<usize> = (0..a).filter(|&i| !positives[i].is_empty()).collect();
    let n_act = active.len();
    let inv_act = F::one() / F::real(n_act as f64);

    let mut loss = F::zero();
    let mut grad_s = Array2::<F>::zeros((a, a));
    for &i in &active {
        let mut max = F::neg_infinity();
        for j in 0..a {
            if j != i {
                max = max.max(sims[[i, j]]);
            }
        }
        let mut denom = F::zero();
        for j in 0..a {
            if j != i {
                denom += (sims[[i, j]] - max).exp();
            }
        }
        let lse = max + denom.ln();
        let pos = &positives[i];
        let inv_pos = F::one() / F::real(pos.len() as f64);
        let mut mean_pos = F::zero();
        for &q in pos {
            mean_pos += sims[[i, q]];
        }
        mean_pos *= inv_pos;
        loss += lse - mean_pos;
        for j in 0..a {
            if j == i {
                continue;
            }
            let p = (sims[[i, j]] - lse).exp();
            grad_s[[i, j]] = p * inv_act;
        }
        for &q in pos {
            grad_s[[i, q]] -= inv_pos * inv_act;
        }
    }
    loss *= inv_act;

    // s_ij = u_i . u_j / tau, so dL/du = (G + G^T) u / tau.
    let grad_u = (grad_s.dot(u) + grad_s.t().dot(u)).mapv(|g| g / tau);
    (loss, grad_u, a - n_act)
}

fn scatter_stacked<F: Real>(
    grad_u: &Array2<F>,
    rows: &[usize],
    batch_rows: usize,
    embed_dim: usize,
) -> (Array2<F>, Array2<F>) {
    let half = rows.len();
    let mut grad_v = Array2::<F>::zeros((batch_rows, embed_dim));
    let mut grad_v_prime = Array2::<F>::zeros((batch_rows, embed_dim));
    for (slot, &row) in rows.iter().enumerate() {
        for e in 0..embed_dim {
            grad_v[[row, e]] = grad_u[[slot, e]];
            grad_v_prime[[row, e]] = grad_u[[slot + half, e]];
        }
    }
    (grad_v, grad_v_prime)
}

/// Instance-level contrastive loss on the unlabeled rows: each of the
/// `2 |B_u|` anchor embeddings has its counterpart view as the positive and
/// all other `2 |B_u| - 1` embeddings in the denominator.
pub fn instance_contrastive<F: Real>(
    batch: &BatchViews<F>,
    tau: F,
) -> Result<ContrastiveResult<F>, LossError> {
    let rows = batch.unlabeled_rows();
    let bu = rows.len();
    if bu < 2 {
        return Err(LossError::TooFewSamples { needed: 2, got: bu });
    }
    let e = batch.embed_dim();
    let mut u = Array2::<F>::zeros((2 * bu, e));
    for (slot, &row) in rows.iter().enumerate() {
        u.row_mut(slot).assign(&batch.v.row(row));
        u.row_mut(slot + bu).assign(&batch.v_prime.row(row));
    }
    let positives: Vec<Vec<usize>> = (0..2 * bu).map(|i| vec![(i + bu) % (2 * bu)]).collect();
    let (loss, grad_u, _) = contrastive_core(&u, tau, &positives);
    let (grad_v, grad_v_prime) = scatter_stacked(&grad_u, &rows, batch.len(), e);
    Ok(ContrastiveResult {
        loss,
        grad_v,
        grad_v_prime,
        skipped_anchors: 0,
    })
}

/// Supervised contrastive loss on the labeled rows: positives are all
/// same-label embeddings across both views. Anchors without positives are
/// skipped and counted; the call fails only if every anchor is skipped.
pub fn supervised_contrastive<F: Real>(
    batch: &BatchViews<F>,
    tau: F,
) -> Result<ContrastiveResult<F>, LossError> {
    let rows = batch.labeled_rows();
    let bl = rows.len();
    if bl < 2 {
        return Err(LossError::TooFewSamples { needed: 2, got: bl });
    }
    let e = batch.embed_dim();
    let mut u = Array2::<F>::zeros((2 * bl, e));
    let mut stacked_labels = vec![0usize; 2 * bl];
    for (slot, &row) in rows.iter().enumerate() {
        u.row_mut(slot).assign(&batch.v.row(row));
        u.row_mut(slot + bl).assign(&batch.v_prime.row(row));
        stacked_labels[slot] = batch.labels[row];
        stacked_labels[slot + bl] = batch.labels[row];
    }
    let positives: Vec<Vec<usize>> = (0..2 * bl)
        .map(|i| {
            (0..2 * bl)
                .filter(|&j| j != i && stacked_labels[j] == stacked_labels[i])
                .collect()
        })
        .collect();
    if positives.iter().all(|p| p.is_empty()) {
        return Err(LossError::NoPositives);
    }
    let (loss, grad_u, skipped) = contrastive_core(&u, tau, &positives);
    let (grad_v, grad_v_prime) = scatter_stacked(&grad_u, &rows, batch.len(), e);
    Ok(ContrastiveResult {
        loss,
        grad_v,
        grad_v_prime,
        skipped_anchors: skipped,
    })
}

/// Prototype loss on unlabeled embeddings under E-step assignments:
/// mean of `-log softmax(v_i . c)[k(i)] - log r[k(i)]`. The prior term has
/// no gradient with respect to `v`; prototypes are constants.
pub fn prototype_loss<F: Real>(
    v: &Array2<F>,
    assignments: &[usize],
    prototypes: &Array2<F>,
    prior: &Array1<F>,
) -> Result<(F, Array2<F>), LossError> {
    let (b, e) = v.dim();
    let c = prototypes.nrows();
    if assignments.len() != b {
        return Err(LossError::InvalidBatch(format!(
            "{} assignments for {} rows",
            assignments.len(),
            b
        )));
    }
    if prototypes.ncols() != e || prior.len() != c {
        return Err(LossError::InvalidBatch(
            "prototype or prior shape disagrees with the embeddings".into(),
        ));
    }
    if b == 0 {
        return Err(LossError::TooFewSamples { needed: 1, got: 0 });
    }
    let floor = F::real(LOG_FLOOR);
    for (&k, _) in assignments.iter().zip(0..) {
        if k >= c {
            return Err(LossError::InvalidAssignment {
                index: k,
                num_classes: c,
            });
        }
        if prior[k] < floor {
            return Err(LossError::PriorUnderflow { class: k });
        }
    }
    let logits = v.dot(&prototypes.t());
    let inv_b = F::one() / F::real(b as f64);
    let mut loss = F::zero();
    let mut grad_v = Array2::<F>::zeros((b, e));
    for i in 0..b {
        let k = assignments[i];
        let row = logits.row(i);
        let max = row.iter().cloned().fold(F::neg_infinity(), F::max);
        let denom: F = row.iter().map(|z| (*z - max).exp()).sum();
        let lse = max + denom.ln();
        loss += lse - row[k] - prior[k].ln();
        for j in 0..c {
            let p = (row[j] - lse).exp();
            let coeff = (p - if j == k { F::one() } else { F::zero() }) * inv_b;
            for d in 0..e {
                grad_v[[i, d]] += coeff * prototypes[[j, d]];
            }
        }
    }
    Ok((loss * inv_b, grad_v))
}

/// KL divergence between the batch-mean prediction and the class prior,
/// with both distributions clamped at [`LOG_FLOOR`] inside the logs.
pub fn kl_prior_regularizer<F: Real>(
    predictions: &Array2<F>,
    prior: &Array1<F>,
) -> Result<(F, Array2<F>), LossError> {
    let (b, c) = predictions.dim();
    if prior.len() != c {
        return Err(LossError::InvalidBatch(format!(
            "prior has length {}, predictions have {} columns",
            prior.len(),
            c
        )));
    }
    if b == 0 {
        return Err(LossError::TooFewSamples { needed: 1, got: 0 });
    }
    let floor = F::real(LOG_FLOOR);
    let inv_b = F::one() / F::real(b as f64);
    let mut loss = F::zero();
    let mut col_grad = Array1::<F>::zeros(c);
    for j in 0..c {
        let mean: F = (0..b).map(|i| predictions[[i, j]]).sum::<F>() * inv_b;
        let q = mean.max(floor);
        let r = prior[j].max(floor);
        loss += q * (q.ln() - r.ln());
        if mean >= floor {
            col_grad[j] = (q.ln() - r.ln() + F::one()) * inv_b;
        }
    }
    let mut grad = Array2::<F>::zeros((b, c));
    for i in 0..b {
        for j in 0..c {
            grad[[i, j]] = col_grad[j];
        }
    }
    Ok((loss, grad))
}

/// One weighted term of the overall objective, with gradients shaped like
/// the full batch.
#[derive(Debug, Clone)]
pub struct TermContribution<F> {
    pub loss: F,
    pub grad_v: Array2<F>,
    /// Present for terms that touch the second view.
    pub grad_v_prime: Option<Array2<F>>,
}

/// Component losses of one step, before weighting.
#[derive(Debug, Clone)]
pub struct LossParts<F> {
    pub instance: Option<TermContribution<F>>,
    pub supervised: Option<TermContribution<F>>,
    pub prototype: Option<TermContribution<F>>,
    pub kl: Option<TermContribution<F>>,
}

impl<F> Default for LossParts<F> {
    fn default() -> Self {
        Self {
            instance: None,
            supervised: None,
            prototype: None,
            kl: None,
        }
    }
}

/// Weighted loss values as logged per step. A switched-off term reports
/// exactly zero.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, Default)]
pub struct WeightedLosses {
    pub total: f64,
    pub instance: f64,
    pub prototype: f64,
    pub supervised: f64,
    pub kl: f64,
}

/// Combines the component losses into
/// `lambda_ins L_ins + lambda_proto L_proto + lambda_sup L_sup + lambda_kl L_KL`
/// and the matching weighted gradient sum. A term whose weight is zero (or
/// whose contribution is absent) is skipped entirely, so the result is
/// bitwise independent of that term's inputs.
pub fn overall_loss<F: Real>(
    parts: &LossParts<F>,
    config: &LossConfig,
    batch_rows: usize,
    embed_dim: usize,
) -> (WeightedLosses, Array2<F>, Array2<F>) {
    let mut grad_v = Array2::<F>::zeros((batch_rows, embed_dim));
    let mut grad_v_prime = Array2::<F>::zeros((batch_rows, embed_dim));
    let mut out = WeightedLosses::default();

    let mut apply = |term: &Option<TermContribution<F>>, weight: f64| -> f64 {
        let Some(term) = term else { return 0.0 };
        if weight == 0.0 {
            return 0.0;
        }
        let w = F::real(weight);
        grad_v.scaled_add(w, &term.grad_v);
        if let Some(gp) = &term.grad_v_prime {
            grad_v_prime.scaled_add(w, gp);
        }
        weight * term.loss.to_real()
    };

    out.instance = apply(&parts.instance, config.lambda_ins);
    out.prototype = apply(&parts.prototype, config.lambda_proto);
    out.supervised = apply(&parts.supervised, config.lambda_sup);
    out.kl = apply(&parts.kl, config.lambda_kl);
    out.total = out.instance + out.prototype + out.supervised + out.kl;
    (out, grad_v, grad_v_prime)
}
