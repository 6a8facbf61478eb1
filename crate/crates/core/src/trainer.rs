//! Training orchestration: per-step E/M alternation, per-epoch prior and
//! prototype updates, the embedding queue, logging, and checkpoints.
//!
//! Each step forms two augmented views of a mixed labeled/unlabeled batch.
//! The E-step solves the transport problem over the batch's unlabeled
//! embeddings together with the queued embeddings of recent batches (the
//! queue widens the marginal-matching sample without contributing
//! gradients), then the M-step applies one SGD update on the weighted loss.
//! After the step loop the class prior moves toward the empirical argmax
//! distribution of the full unlabeled pool and the prototypes move toward
//! their assigned embedding means.
//!
//! The loop is sequential and, for a fixed seed, bitwise deterministic.

use std::collections::VecDeque;
use std::io::Write as _;
use std::path::Path;

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{augment, Dataset};
use crate::encoder::{
    backward, forward, lr_at, save_checkpoint, CheckpointHeader, EncoderConfig, EncoderError,
    EncoderParams, OptimizerState, sgd_step,
};
use crate::eval::{
    accuracy_all, accuracy_known, accuracy_unknown_agnostic, accuracy_unknown_aware,
    class_count_report, EvalError, MetricsReport,
};
use crate::losses::{
    instance_contrastive, kl_prior_regularizer, overall_loss, prototype_loss,
    supervised_contrastive, BatchViews, LossConfig, LossError, LossParts, TermContribution,
    WeightedLosses, SENTINEL_UNLABELED,
};
use crate::ot::{sinkhorn_plan, OtError, TransportProblem};
use crate::priors::{
    empirical_argmax_distribution, predict_distribution, predict_distribution_backward,
    update_prior, update_prototypes, ClassPrior, PriorError, PrototypeBank,
};
use crate::scalar::Real;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid config: {0}")]
    ConfigInvalid(String),
    #[error("dataset is empty or lacks usable labeled/unlabeled pools")]
    EmptyDataset,
    #[error(transparent)]
    Ot(#[from] OtError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Prior(#[from] PriorError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("serialization: {0}")]
    Json(#[from] serde_json::Error),
}

/// Full hyperparameter set of a training run. All fields have defaults, so
/// a config JSON may specify only what it overrides.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Unlabeled share of each batch; proportional to pool sizes when None.
    pub unlabeled_fraction: Option<f64>,
    /// Sinkhorn smoothing exponent of the E-step.
    pub smoothing: f64,
    pub sinkhorn_iters: usize,
    pub sinkhorn_tolerance: f64,
    pub loss: LossConfig,
    /// Temperature of the prototype-similarity classifier.
    pub tau_pred: f64,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Shared momentum of the prior and prototype moving averages.
    pub mu: f64,
    /// Embedding queue capacity; 0 disables the queue.
    pub queue_capacity: usize,
    pub seed: u64,
    pub eval_every: usize,
    pub hidden_dim: usize,
    pub embed_dim: usize,
    /// Keeps the prior pinned at uniform (ablation switch).
    pub fix_prior: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 80,
            batch_size: 512,
            unlabeled_fraction: None,
            smoothing: 20.0,
            sinkhorn_iters: 100,
            sinkhorn_tolerance: 1e-6,
            loss: LossConfig::default(),
            tau_pred: 0.1,
            lr: 0.02,
            momentum: 0.9,
            weight_decay: 1e-4,
            mu: 0.99,
            queue_capacity: 2048,
            seed: 0,
            eval_every: 1,
            hidden_dim: 64,
            embed_dim: 128,
            fix_prior: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let fail = |msg: &str| Err(TrainError::ConfigInvalid(msg.into()));
        if self.batch_size < 4 {
            return fail("batch_size must be >= 4");
        }
        if self.queue_capacity != 0 && self.queue_capacity < self.batch_size {
            return fail("queue_capacity must be 0 or >= batch_size");
        }
        if !(self.smoothing > 0.0) || self.sinkhorn_iters == 0 || !(self.sinkhorn_tolerance > 0.0)
        {
            return fail("sinkhorn parameters must be positive");
        }
        if !(self.loss.temperature > 0.0) || !(self.tau_pred > 0.0) {
            return fail("temperatures must be positive");
        }
        if [
            self.loss.lambda_ins,
            self.loss.lambda_proto,
            self.loss.lambda_sup,
            self.loss.lambda_kl,
            self.loss.sigma_aug,
            self.weight_decay,
        ]
        .iter()
        .any(|&x| !(x >= 0.0))
        {
            return fail("loss weights, sigma_aug, and weight_decay must be >= 0");
        }
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.momentum) {
            return fail("lr must be positive and momentum in [0, 1)");
        }
        if !(0.0..=1.0).contains(&self.mu) {
            return fail("mu must lie in [0, 1]");
        }
        if self.eval_every == 0 {
            return fail("eval_every must be >= 1");
        }
        if self.hidden_dim == 0 || self.embed_dim == 0 {
            return fail("encoder dims must be >= 1");
        }
        if let Some(f) = self.unlabeled_fraction {
            if !(f > 0.0 && f < 1.0) {
                return fail("unlabeled_fraction must lie in (0, 1)");
            }
        }
        Ok(())
    }
}

/// An embedding admitted to the E-step marginals without gradients.
#[derive(Debug, Clone)]
pub struct QueueEntry<F> {
    pub embedding: Array1<F>,
    pub prediction: Array1<F>,
}

/// Mutable state of a run.
#[derive(Debug, Clone)]
pub struct TrainState<F> {
    pub params: EncoderParams<F>,
    pub opt: OptimizerState<F>,
    pub prior: ClassPrior<F>,
    pub bank: PrototypeBank<F>,
    pub queue: VecDeque<QueueEntry<F>>,
    pub epoch: usize,
    pub rng: ChaCha8Rng,
}

/// Two augmented feature views of one batch with label bookkeeping.
/// Unlabeled rows come first.
#[derive(Debug, Clone)]
pub struct BatchData<F> {
    pub x: Array2<F>,
    pub x_prime: Array2<F>,
    pub labels: Vec<usize>,
    pub is_labeled: Vec<bool>,
    /// Dataset row ids in batch order.
    pub dataset_rows: Vec<usize>,
    pub num_unlabeled: usize,
}

/// Result of one E-step.
#[derive(Debug, Clone)]
pub struct EStepOutcome<F> {
    /// Hard pseudo-labels for the batch rows.
    pub assignments: Vec<usize>,
    /// Hard labels over batch plus queue rows (marginal diagnostics).
    pub combined_assignments: Vec<usize>,
    /// Batch rows of the plan rescaled to row sum 1.
    pub soft_labels: Array2<F>,
    /// Classifier predictions of the batch rows.
    pub batch_predictions: Array2<F>,
    pub row_residual: f64,
    pub col_residual: f64,
    pub iterations_used: usize,
}

/// Loss breakdown of one M-step.
#[derive(Debug, Clone, Copy)]
pub struct StepOutcome {
    pub losses: WeightedLosses,
    pub grad_norm: f64,
    pub skipped_anchors: usize,
}

/// Per-epoch log row.
#[derive(Debug, Clone)]
pub struct EpochLog {
    pub epoch: usize,
    pub steps: usize,
    /// Step-mean weighted losses.
    pub losses: WeightedLosses,
    pub prior: Vec<f64>,
    pub skipped_anchors: usize,
    pub empty_classes: usize,
    pub queue_len: usize,
}

/// A completed (or zero-epoch) run.
#[derive(Debug)]
pub struct TrainOutcome<F> {
    pub state: TrainState<F>,
    pub history: Vec<MetricsReport>,
    pub epoch_logs: Vec<EpochLog>,
}

/// Solves the E-step transport problem for a batch of unlabeled embeddings
/// against the current prior, including queued embeddings in the marginals,
/// and extracts hard pseudo-labels for the batch rows. Pure in `state`.
pub fn e_step<F: Real>(
    state: &TrainState<F>,
    embeddings: &Array2<F>,
    config: &TrainConfig,
) -> Result<EStepOutcome<F>, TrainError> {
    let b = embeddings.nrows();
    if b < 2 {
        return Err(TrainError::Loss(LossError::TooFewSamples { needed: 2, got: b }));
    }
    let c = state.bank.num_classes();
    let batch_predictions =
        predict_distribution(embeddings, &state.bank, F::real(config.tau_pred))?;
    let m = b + state.queue.len();
    let mut combined = Array2::<F>::zeros((m, c));
    for i in 0..b {
        combined.row_mut(i).assign(&batch_predictions.row(i));
    }
    for (slot, entry) in state.queue.iter().enumerate() {
        combined.row_mut(b + slot).assign(&entry.prediction);
    }
    let problem = TransportProblem::new(
        combined,
        TransportProblem::uniform_rows(m),
        state.prior.r.clone(),
        F::real(config.smoothing),
        config.sinkhorn_iters,
        F::real(config.sinkhorn_tolerance),
    )?;
    let plan = sinkhorn_plan(&problem)?;
    let combined_assignments = crate::ot::pseudo_labels(&plan);
    let assignments = combined_assignments[..b].to_vec();
    // Per-sample rescale: rows of the pseudo-label matrix sum to 1.
    let mut soft_labels = Array2::<F>::zeros((b, c));
    for i in 0..b {
        let row = plan.plan.row(i);
        let sum: F = row.iter().copied().sum();
        if sum > F::zero() {
            for j in 0..c {
                soft_labels[[i, j]] = row[j] / sum;
            }
        }
    }
    Ok(EStepOutcome {
        assignments,
        combined_assignments,
        soft_labels,
        batch_predictions,
        row_residual: plan.row_residual.to_real(),
        col_residual: plan.col_residual.to_real(),
        iterations_used: plan.iterations_used,
    })
}

/// One M-step: compute the weighted loss on the batch views, backpropagate
/// through the encoder (both views), and apply one SGD update.
pub fn m_step<F: Real>(
    state: &mut TrainState<F>,
    batch: &BatchData<F>,
    assignments: &[usize],
    config: &TrainConfig,
) -> Result<StepOutcome, TrainError> {
    if assignments.len() != batch.num_unlabeled {
        return Err(TrainError::Loss(LossError::InvalidBatch(format!(
            "{} assignments for {} unlabeled rows",
            assignments.len(),
            batch.num_unlabeled
        ))));
    }
    let (v1, cache1) = forward(&state.params, &batch.x)?;
    let (v2, cache2) = forward(&state.params, &batch.x_prime)?;
    let b = v1.nrows();
    let e = v1.ncols();
    let views = BatchViews::new(
        v1,
        v2,
        batch.labels.clone(),
        batch.is_labeled.clone(),
    )?;
    let unlabeled_rows = views.unlabeled_rows();
    let tau = F::real(config.loss.temperature);

    let mut parts = LossParts::default();
    let mut skipped = 0usize;
    if config.loss.lambda_ins > 0.0 {
        let out = instance_contrastive(&views, tau)?;
        parts.instance = Some(TermContribution {
            loss: out.loss,
            grad_v: out.grad_v,
            grad_v_prime: Some(out.grad_v_prime),
        });
    }
    if config.loss.lambda_sup > 0.0 {
        let out = supervised_contrastive(&views, tau)?;
        skipped = out.skipped_anchors;
        parts.supervised = Some(TermContribution {
            loss: out.loss,
            grad_v: out.grad_v,
            grad_v_prime: Some(out.grad_v_prime),
        });
    }
    let v_u = gather_rows(&views.v, &unlabeled_rows);
    if config.loss.lambda_proto > 0.0 {
        let (loss, grad_u) =
            prototype_loss(&v_u, assignments, &state.bank.prototypes, &state.prior.r)?;
        parts.prototype = Some(TermContribution {
            loss,
            grad_v: scatter_rows(&grad_u, &unlabeled_rows, b, e),
            grad_v_prime: None,
        });
    }
    if config.loss.lambda_kl > 0.0 {
        let tau_pred = F::real(config.tau_pred);
        let p_u = predict_distribution(&v_u, &state.bank, tau_pred)?;
        let (loss, grad_p) = kl_prior_regularizer(&p_u, &state.prior.r)?;
        let grad_u = predict_distribution_backward(&state.bank, tau_pred, &p_u, &grad_p);
        parts.kl = Some(TermContribution {
            loss,
            grad_v: scatter_rows(&grad_u, &unlabeled_rows, b, e),
            grad_v_prime: None,
        });
    }

    let (losses, grad_v, grad_v_prime) = overall_loss(&parts, &config.loss, b, e);
    let (mut grads, _) = backward(&cache1, &grad_v)?;
    let (grads2, _) = backward(&cache2, &grad_v_prime)?;
    grads.add_scaled(&grads2, F::one());
    let grad_norm = grads.l2_norm().to_real();
    let lr = lr_at(&state.opt, state.epoch, config.epochs);
    sgd_step(&mut state.params, &grads, &mut state.opt, lr);
    Ok(StepOutcome {
        losses,
        grad_norm,
        skipped_anchors: skipped,
    })
}

fn gather_rows<F: Real>(m: &Array2<F>, rows: &[usize]) -> Array2<F> {
    let mut out = Array2::<F>::zeros((rows.len(), m.ncols()));
    for (slot, &r) in rows.iter().enumerate() {
        out.row_mut(slot).assign(&m.row(r));
    }
    out
}

fn scatter_rows<F: Real>(
    m: &Array2<F>,
    rows: &[usize],
    total_rows: usize,
    cols: usize,
) -> Array2<F> {
    let mut out = Array2::<F>::zeros((total_rows, cols));
    for (slot, &r) in rows.iter().enumerate() {
        out.row_mut(r).assign(&m.row(slot));
    }
    out
}

/// Splits `0..total` into contiguous chunks of size `chunk`, merging a
/// trailing chunk smaller than 2 into its predecessor.
fn chunk_ranges(total: usize, chunk: usize) -> Vec<(usize, usize)> {
    let mut ranges = Vec::new();
    let mut start = 0;
    while start < total {
        let end = (start + chunk).min(total);
        ranges.push((start, end));
        start = end;
    }
    if ranges.len() >= 2 {
        let last = *ranges.last().unwrap();
        if last.1 - last.0 < 2 {
            ranges.pop();
            ranges.last_mut().unwrap().1 = last.1;
        }
    }
    ranges
}

fn batch_composition(
    config: &TrainConfig,
    num_unlabeled: usize,
    num_labeled: usize,
) -> (usize, usize) {
    let b = config.batch_size;
    let fraction = config
        .unlabeled_fraction
        .unwrap_or(num_unlabeled as f64 / (num_unlabeled + num_labeled) as f64);
    let n_u = ((b as f64 * fraction).round() as usize).clamp(2, b - 2);
    (n_u, b - n_u)
}

/// Runs one epoch: shuffled mixed batches with two augmented views, an
/// E-step and an M-step per batch, then the per-epoch prior and prototype
/// updates over the full unlabeled pool.
pub fn run_epoch<F: Real>(
    state: &mut TrainState<F>,
    dataset: &Dataset,
    config: &TrainConfig,
) -> Result<EpochLog, TrainError>
where
    StandardNormal: Distribution<F>,
{
    let mut unlabeled = dataset.unlabeled_indices();
    let mut labeled = dataset.labeled_indices();
    if unlabeled.len() < 2 || labeled.len() < 2 {
        return Err(TrainError::EmptyDataset);
    }
    unlabeled.shuffle(&mut state.rng);
    labeled.shuffle(&mut state.rng);
    let (n_u, n_l) = batch_composition(config, unlabeled.len(), labeled.len());
    let ranges = chunk_ranges(unlabeled.len(), n_u);

    let mut assignments_by_row: Vec<Option<usize>> = vec![None; dataset.num_samples()];
    let mut loss_sum = WeightedLosses::default();
    let mut skipped = 0usize;
    let mut steps = 0usize;
    let mut labeled_cursor = 0usize;
    for &(lo, hi) in &ranges {
        let u_rows = &unlabeled[lo..hi];
        let l_rows: Vec<usize> = (0..n_l)
            .map(|k| labeled[(labeled_cursor + k) % labeled.len()])
            .collect();
        labeled_cursor = (labeled_cursor + n_l) % labeled.len();

        let mut rows: Vec<usize> = u_rows.to_vec();
        rows.extend_from_slice(&l_rows);
        let base = dataset.rows_as::<F>(&rows);
        let sigma = F::real(config.loss.sigma_aug);
        let seed_a = state.rng.next_u64();
        let seed_b = state.rng.next_u64();
        let batch = BatchData {
            x: augment(&base, sigma, seed_a),
            x_prime: augment(&base, sigma, seed_b),
            labels: rows
                .iter()
                .enumerate()
                .map(|(slot, &r)| {
                    if slot < u_rows.len() {
                        SENTINEL_UNLABELED
                    } else {
                        dataset.labels[r]
                    }
                })
                .collect(),
            is_labeled: (0..rows.len()).map(|slot| slot >= u_rows.len()).collect(),
            dataset_rows: rows.clone(),
            num_unlabeled: u_rows.len(),
        };

        let (v1, _) = forward(&state.params, &batch.x)?;
        let v1_u = v1.slice(ndarray::s![..u_rows.len(), ..]).to_owned();
        let outcome = e_step(state, &v1_u, config)?;
        for (slot, &row) in u_rows.iter().enumerate() {
            assignments_by_row[row] = Some(outcome.assignments[slot]);
        }
        let step = m_step(state, &batch, &outcome.assignments, config)?;
        loss_sum.total += step.losses.total;
        loss_sum.instance += step.losses.instance;
        loss_sum.prototype += step.losses.prototype;
        loss_sum.supervised += step.losses.supervised;
        loss_sum.kl += step.losses.kl;
        skipped += step.skipped_anchors;
        steps += 1;

        if config.queue_capacity > 0 {
            for slot in 0..u_rows.len() {
                state.queue.push_back(QueueEntry {
                    embedding: v1_u.row(slot).to_owned(),
                    prediction: outcome.batch_predictions.row(slot).to_owned(),
                });
            }
            while state.queue.len() > config.queue_capacity {
                state.queue.pop_front();
            }
        }
    }

    // Per-epoch updates over the full unlabeled pool with fresh embeddings.
    let pool = dataset.unlabeled_indices();
    let features = dataset.rows_as::<F>(&pool);
    let (pool_embeddings, _) = forward(&state.params, &features)?;
    let predictions =
        predict_distribution(&pool_embeddings, &state.bank, F::real(config.tau_pred))?;
    let z = empirical_argmax_distribution(&predictions);
    if !config.fix_prior {
        update_prior(&mut state.prior, &z)?;
    }
    let assignments: Vec<usize> = pool
        .iter()
        .map(|&row| assignments_by_row[row].expect("chunking covers every unlabeled row"))
        .collect();
    let empty_classes = update_prototypes(&mut state.bank, &pool_embeddings, &assignments)?;

    let inv = 1.0 / steps.max(1) as f64;
    let losses = WeightedLosses {
        total: loss_sum.total * inv,
        instance: loss_sum.instance * inv,
        prototype: loss_sum.prototype * inv,
        supervised: loss_sum.supervised * inv,
        kl: loss_sum.kl * inv,
    };
    let log = EpochLog {
        epoch: state.epoch,
        steps,
        losses,
        prior: state.prior.r.iter().map(|r| r.to_real()).collect(),
        skipped_anchors: skipped,
        empty_classes,
        queue_len: state.queue.len(),
    };
    state.epoch += 1;
    state.opt.epoch_count = state.epoch;
    Ok(log)
}

/// Initializes a training state: seeded encoder, uniform prior, known-class
/// prototypes from labeled embedding means, unknown-class prototypes from
/// seeded unlabeled picks sharpened by one farthest-point pass.
pub fn init_state<F: Real>(
    dataset: &Dataset,
    config: &TrainConfig,
) -> Result<TrainState<F>, TrainError> {
    config.validate()?;
    if dataset.num_samples() == 0 {
        return Err(TrainError::EmptyDataset);
    }
    let num_classes = dataset.num_classes();
    let encoder_config = EncoderConfig::new(
        dataset.input_dim(),
        config.hidden_dim,
        config.embed_dim,
        config.seed,
    );
    let params = EncoderParams::<F>::init(&encoder_config);
    let opt = OptimizerState::new(
        &params,
        F::real(config.lr),
        F::real(config.momentum),
        F::real(config.weight_decay),
    );
    let prior = ClassPrior::uniform(num_classes, F::real(config.mu));
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x9e37_79b9_7f4a_7c15);
    let bank = init_prototypes(&params, dataset, config, &mut rng)?;
    Ok(TrainState {
        params,
        opt,
        prior,
        bank,
        queue: VecDeque::new(),
        epoch: 0,
        rng,
    })
}

fn init_prototypes<F: Real>(
    params: &EncoderParams<F>,
    dataset: &Dataset,
    config: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<PrototypeBank<F>, TrainError> {
    let num_classes = dataset.num_classes();
    let e = config.embed_dim;
    let labeled = dataset.labeled_indices();
    let unlabeled = dataset.unlabeled_indices();
    if unlabeled.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let mut rows = Array2::<F>::zeros((num_classes, e));

    if !labeled.is_empty() {
        let (v_l, _) = forward(params, &dataset.rows_as::<F>(&labeled))?;
        for &class in &dataset.known_classes {
            let members: Vec<usize> = labeled
                .iter()
                .enumerate()
                .filter(|(_, &row)| dataset.labels[row] == class)
                .map(|(slot, _)| slot)
                .collect();
            if members.is_empty() {
                rows[[class, class % e]] = F::one();
                continue;
            }
            for &slot in &members {
                for j in 0..e {
                    rows[[class, j]] += v_l[[slot, j]];
                }
            }
        }
    }

    let (v_u, _) = forward(params, &dataset.rows_as::<F>(&unlabeled))?;
    let unknown: Vec<usize> = (0..num_classes)
        .filter(|c| !dataset.known_classes.contains(c))
        .collect();
    let n = v_u.nrows();
    let mut picks: Vec<usize> = Vec::with_capacity(unknown.len());
    while picks.len() < unknown.len() {
        let candidate = rng.random_range(0..n);
        if !picks.contains(&candidate) {
            picks.push(candidate);
        }
    }
    // One farthest-point refinement pass against known prototypes and the
    // other picks.
    let known_rows: Vec<Array1<F>> = dataset
        .known_classes
        .iter()
        .map(|&c| {
            let row = rows.row(c).to_owned();
            let norm = row.iter().map(|a| *a * *a).sum::<F>().sqrt();
            if norm > F::zero() {
                row.mapv(|a| a / norm)
            } else {
                row
            }
        })
        .collect();
    for slot in 0..picks.len() {
        let mut best = picks[slot];
        let mut best_dist = F::neg_infinity();
        for i in 0..n {
            let mut min_dist = F::infinity();
            for anchor in &known_rows {
                min_dist = min_dist.min(sq_dist(&v_u, i, anchor));
            }
            for (t, &p) in picks.iter().enumerate() {
                if t != slot {
                    let anchor = v_u.row(p).to_owned();
                    min_dist = min_dist.min(sq_dist(&v_u, i, &anchor));
                }
            }
            if min_dist > best_dist {
                best_dist = min_dist;
                best = i;
            }
        }
        picks[slot] = best;
    }
    for (slot, &class) in unknown.iter().enumerate() {
        rows.row_mut(class).assign(&v_u.row(picks[slot]));
    }
    Ok(PrototypeBank::from_rows(rows, F::real(config.mu)))
}

fn sq_dist<F: Real>(m: &Array2<F>, row: usize, anchor: &Array1<F>) -> F {
    m.row(row)
        .iter()
        .zip(anchor.iter())
        .map(|(a, b)| (*a - *b) * (*a - *b))
        .sum()
}

/// Scores the current model on the unlabeled pool.
pub fn evaluate<F: Real>(
    state: &TrainState<F>,
    dataset: &Dataset,
    config: &TrainConfig,
    epoch: usize,
) -> Result<MetricsReport, TrainError> {
    let preds = predict_pool(state, dataset, config)?;
    let pool = dataset.unlabeled_indices();
    let truth: Vec<usize> = pool.iter().map(|&i| dataset.labels[i]).collect();
    let num_classes = dataset.num_classes();
    let prior_truth = dataset.unlabeled_prior();
    let prior_l1_error = state
        .prior
        .r
        .iter()
        .zip(prior_truth.iter())
        .map(|(a, b)| (a.to_real() - b).abs())
        .sum();
    Ok(MetricsReport {
        acc_all: accuracy_all(&preds, &truth, num_classes)?,
        acc_known: accuracy_known(&preds, &truth, &dataset.known_classes)?,
        acc_unknown_aware: accuracy_unknown_aware(
            &preds,
            &truth,
            &dataset.known_classes,
            num_classes,
        )?,
        acc_unknown_agnostic: accuracy_unknown_agnostic(
            &preds,
            &truth,
            &dataset.known_classes,
            num_classes,
        )?,
        prior_l1_error,
        predicted_class_counts: class_count_report(&preds, num_classes),
        epoch,
    })
}

/// Argmax classifier predictions on the unlabeled pool (ascending dataset
/// row order).
pub fn predict_pool<F: Real>(
    state: &TrainState<F>,
    dataset: &Dataset,
    config: &TrainConfig,
) -> Result<Vec<usize>, TrainError> {
    let pool = dataset.unlabeled_indices();
    let (v, _) = forward(&state.params, &dataset.rows_as::<F>(&pool))?;
    let p = predict_distribution(&v, &state.bank, F::real(config.tau_pred))?;
    Ok(p
        .rows()
        .into_iter()
        .map(|row| crate::ot::argmax_lowest(row.iter().copied()))
        .collect())
}

/// Final artifact of a run written next to the metrics CSV.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunReport {
    pub config: TrainConfig,
    pub final_metrics: MetricsReport,
    pub prior: Vec<f64>,
    pub truth_unlabeled_counts: Vec<usize>,
    pub num_classes: usize,
    pub epochs_run: usize,
}

/// Trains for `config.epochs` epochs. When `out_dir` is given, writes
/// `metrics.csv`, `report.json`, `predictions.json`, and the initial and
/// final checkpoints there.
pub fn train<F: Real>(
    dataset: &Dataset,
    config: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome<F>, TrainError>
where
    StandardNormal: Distribution<F>,
{
    config.validate()?;
    let mut state = init_state::<F>(dataset, config)?;
    let num_classes = dataset.num_classes();

    let mut csv: Option<std::io::BufWriter<std::fs::File>> = None;
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
        save_checkpoint(
            &dir.join("checkpoint_init.bin"),
            &state.params,
            &CheckpointHeader {
                input_dim: dataset.input_dim(),
                hidden_dim: config.hidden_dim,
                embed_dim: config.embed_dim,
                seed: config.seed,
                epoch: 0,
            },
        )?;
        let mut writer = std::io::BufWriter::new(std::fs::File::create(dir.join("metrics.csv"))?);
        let mut header = String::from(
            "epoch,acc_all,acc_known,acc_unknown_aware,acc_unknown_agnostic,prior_l1_error,\
             loss_total,loss_ins,loss_proto,loss_sup,loss_kl",
        );
        for c in 0..num_classes {
            header.push_str(&format!(",prior_{c}"));
        }
        writeln!(writer, "{header}")?;
        csv = Some(writer);
    }

    let mut history = Vec::new();
    let mut epoch_logs = Vec::new();
    for epoch in 0..config.epochs {
        let log = run_epoch(&mut state, dataset, config)?;
        let is_eval = (epoch + 1) % config.eval_every == 0 || epoch + 1 == config.epochs;
        let metrics = if is_eval {
            let m = evaluate(&state, dataset, config, epoch)?;
            history.push(m.clone());
            Some(m)
        } else {
            None
        };
        if let Some(writer) = csv.as_mut() {
            write_csv_row(writer, &log, metrics.as_ref(), num_classes)?;
        }
        epoch_logs.push(log);
    }

    if let Some(dir) = out_dir {
        if let Some(writer) = csv.as_mut() {
            writer.flush()?;
        }
        save_checkpoint(
            &dir.join("checkpoint.bin"),
            &state.params,
            &CheckpointHeader {
                input_dim: dataset.input_dim(),
                hidden_dim: config.hidden_dim,
                embed_dim: config.embed_dim,
                seed: config.seed,
                epoch: config.epochs,
            },
        )?;
        let final_metrics = match history.last() {
            Some(m) => m.clone(),
            None => evaluate(&state, dataset, config, 0)?,
        };
        let preds = predict_pool(&state, dataset, config)?;
        std::fs::write(
            dir.join("predictions.json"),
            serde_json::to_vec(&preds)?,
        )?;
        let report = RunReport {
            config: config.clone(),
            final_metrics,
            prior: state.prior.r.iter().map(|r| r.to_real()).collect(),
            truth_unlabeled_counts: dataset.unlabeled_class_counts(),
            num_classes,
            epochs_run: config.epochs,
        };
        std::fs::write(
            dir.join("report.json"),
            serde_json::to_vec_pretty(&report)?,
        )?;
    }

    Ok(TrainOutcome {
        state,
        history,
        epoch_logs,
    })
}

fn write_csv_row(
    writer: &mut impl std::io::Write,
    log: &EpochLog,
    metrics: Option<&MetricsReport>,
    num_classes: usize,
) -> std::io::Result<()> {
    let acc = |f: fn(&MetricsReport) -> f64| -> String {
        metrics.map(|m| format!("{:.6}", f(m))).unwrap_or_default()
    };
    let mut row = format!(
        "{},{},{},{},{},{},{:.6},{:.6},{:.6},{:.6},{:.6}",
        log.epoch,
        acc(|m| m.acc_all),
        acc(|m| m.acc_known),
        acc(|m| m.acc_unknown_aware),
        acc(|m| m.acc_unknown_agnostic),
        acc(|m| m.prior_l1_error),
        log.losses.total,
        log.losses.instance,
        log.losses.prototype,
        log.losses.supervised,
        log.losses.kl,
    );
    debug_assert_eq!(log.prior.len(), num_classes);
    for p in &log.prior {
        row.push_str(&format!(",{p:.6}"));
    }
    writeln!(writer, "{row}")
}
