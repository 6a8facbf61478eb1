//! Entropy-regularized optimal transport for the E-step.
//!
//! Pseudo-labels are the solution of
//!
//! ```text
//! min_{A in U(w, r)}  <A, -log P>  -  (1/lambda) h(A)
//! ```
//!
//! where `U(w, r)` is the transport polytope of nonnegative `m x C` matrices
//! with row sums `w` (one entry of mass per sample) and column sums `r` (the
//! class prior), and `h` is the entropy of the plan. The solution factors as
//! `A = diag(alpha) K diag(beta)` with `K_ij = P_ij^lambda`; note this equals
//! `exp(-lambda * M)` for the cost `M = -log P`, so `lambda` here is the
//! *inverse* of the usual entropic regularization strength. `alpha` pairs
//! with the row marginal, `beta` with the column marginal, and both are
//! computed by the alternating scaling iteration
//!
//! ```text
//! alpha <- w ./ (K beta),    beta <- r ./ (K' alpha)
//! ```
//!
//! For large exponents or tall problems the iteration runs in the log domain
//! with stabilized log-sum-exp, since `P^lambda` underflows in linear
//! arithmetic.

use ndarray::{Array1, Array2, Axis};
use thiserror::Error;

use crate::scalar::Real;

/// Predictions are clamped to this floor before exponentiation so that the
/// cost `-log P` stays finite.
pub const PREDICTION_FLOOR: f64 = 1e-12;

/// Smoothing exponent at or above which the solver switches to the log domain.
pub const LOG_DOMAIN_SMOOTHING: f64 = 100.0;

/// Row count at or above which the solver switches to the log domain.
pub const LOG_DOMAIN_ROWS: usize = 4096;

/// Default convergence threshold on the worse of the two marginal residuals.
pub const DEFAULT_TOLERANCE: f64 = 1e-6;

/// Default cap on scaling iterations.
pub const DEFAULT_MAX_ITERS: usize = 100;

#[derive(Debug, Error)]
pub enum OtError {
    /// Marginal lengths disagree with the prediction matrix.
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    /// A scaling vector left the finite range, which signals a prediction
    /// entry underflowing the clamp floor after exponentiation.
    #[error("non-finite scaling vector at iteration {iteration}")]
    NonFiniteScaling { iteration: usize },
    /// A value-level invariant of the problem is violated.
    #[error("invalid transport problem: {0}")]
    InvalidProblem(String),
}

/// The E-step transport instance: classifier predictions plus the two
/// marginals and the solver knobs.
#[derive(Debug, Clone)]
pub struct TransportProblem<F> {
    /// Row-stochastic `m x C` prediction matrix, clamped to
    /// [`PREDICTION_FLOOR`] on construction.
    pub predictions: Array2<F>,
    /// Mass per sample `w`, length `m`; positive entries summing to 1.
    pub row_marginal: Array1<F>,
    /// Class prior `r`, length `C`; nonnegative entries summing to 1.
    pub col_marginal: Array1<F>,
    /// Smoothing exponent `lambda` applied as `K = P^lambda`.
    pub smoothing: F,
    /// Iteration cap.
    pub max_iters: usize,
    /// Convergence threshold on the worse L1 marginal residual.
    pub tolerance: F,
}

impl<F: Real> TransportProblem<F> {
    /// Validates shapes and value invariants, clamps the predictions, and
    /// builds the problem.
    pub fn new(
        predictions: Array2<F>,
        row_marginal: Array1<F>,
        col_marginal: Array1<F>,
        smoothing: F,
        max_iters: usize,
        tolerance: F,
    ) -> Result<Self, OtError> {
        let (m, c) = predictions.dim();
        if row_marginal.len() != m || col_marginal.len() != c {
            return Err(OtError::DimensionMismatch(format!(
                "predictions are {}x{} but marginals have lengths {} and {}",
                m,
                c,
                row_marginal.len(),
                col_marginal.len()
            )));
        }
        if m == 0 || c == 0 {
            return Err(OtError::InvalidProblem("empty prediction matrix".into()));
        }
        if smoothing <= F::zero() || !smoothing.is_finite() {
            return Err(OtError::InvalidProblem(format!(
                "smoothing must be a positive real, got {smoothing}"
            )));
        }
        if max_iters == 0 {
            return Err(OtError::InvalidProblem("max_iters must be >= 1".into()));
        }
        if tolerance <= F::zero() {
            return Err(OtError::InvalidProblem("tolerance must be positive".into()));
        }
        let row_tol = F::real(1e-6);
        for (i, row) in predictions.rows().into_iter().enumerate() {
            let sum: F = row.iter().copied().sum();
            if (sum - F::one()).abs() > row_tol {
                return Err(OtError::InvalidProblem(format!(
                    "prediction row {i} sums to {sum}, expected 1"
                )));
            }
            if row.iter().any(|p| !p.is_finite() || *p < F::zero()) {
                return Err(OtError::InvalidProblem(format!(
                    "prediction row {i} has a negative or non-finite entry"
                )));
            }
        }
        let marg_tol = F::real(1e-9);
        let w_sum: F = row_marginal.iter().copied().sum();
        if (w_sum - F::one()).abs() > marg_tol || row_marginal.iter().any(|w| *w <= F::zero()) {
            return Err(OtError::InvalidProblem(
                "row marginal must be positive and sum to 1".into(),
            ));
        }
        let r_sum: F = col_marginal.iter().copied().sum();
        if (r_sum - F::one()).abs() > marg_tol || col_marginal.iter().any(|r| *r < F::zero()) {
            return Err(OtError::InvalidProblem(
                "col marginal must be nonnegative and sum to 1".into(),
            ));
        }
        Ok(Self::new_unchecked(
            predictions,
            row_marginal,
            col_marginal,
            smoothing,
            max_iters,
            tolerance,
        ))
    }

    /// Builds the problem without value validation. The predictions are
    /// still clamped. Intended for tests of scale-invariance properties
    /// where rows are deliberately not stochastic.
    pub fn new_unchecked(
        predictions: Array2<F>,
        row_marginal: Array1<F>,
        col_marginal: Array1<F>,
        smoothing: F,
        max_iters: usize,
        tolerance: F,
    ) -> Self {
        let floor = F::real(PREDICTION_FLOOR);
        let predictions = predictions.mapv(|p| p.max(floor));
        Self {
            predictions,
            row_marginal,
            col_marginal,
            smoothing,
            max_iters,
            tolerance,
        }
    }

    /// Uniform row marginal of length `m` (the usual "samples drawn
    /// uniformly" setting).
    pub fn uniform_rows(m: usize) -> Array1<F> {
        Array1::from_elem(m, F::one() / F::real(m as f64))
    }

    fn use_log_domain(&self) -> bool {
        self.smoothing.to_real() >= LOG_DOMAIN_SMOOTHING
            || self.predictions.nrows() >= LOG_DOMAIN_ROWS
    }
}

/// A solved transport plan `A = diag(alpha) K diag(beta)` with its
/// convergence diagnostics.
#[derive(Debug, Clone)]
pub struct TransportPlan<F> {
    /// The plan itself, `m x C`, nonnegative, total mass 1.
    pub plan: Array2<F>,
    /// Row scaling vector (length `m`).
    pub alpha: Array1<F>,
    /// Column scaling vector (length `C`).
    pub beta: Array1<F>,
    /// Completed scaling iterations.
    pub iterations_used: usize,
    /// L1 distance between the plan's row sums and the row marginal.
    pub row_residual: F,
    /// L1 distance between the plan's column sums and the column marginal.
    pub col_residual: F,
}

/// Solves the transport problem by Sinkhorn's fixed-point iteration.
///
/// Stops when the worse of the two L1 marginal residuals drops to
/// `problem.tolerance`, or after `problem.max_iters` iterations; the final
/// residuals are reported either way.
pub fn sinkhorn_plan<F: Real>(problem: &TransportProblem<F>) -> Result<TransportPlan<F>, OtError> {
    let (plan, _) = sinkhorn_plan_traced(problem, 0)?;
    Ok(plan)
}

/// Like [`sinkhorn_plan`] but also records `max(row_residual, col_residual)`
/// after every `trace_every` iterations (0 disables tracing).
pub fn sinkhorn_plan_traced<F: Real>(
    problem: &TransportProblem<F>,
    trace_every: usize,
) -> Result<(TransportPlan<F>, Vec<F>), OtError> {
    if problem.use_log_domain() {
        solve_log_domain(problem, trace_every)
    } else {
        solve_linear_domain(problem, trace_every)
    }
}

fn solve_linear_domain<F: Real>(
    problem: &TransportProblem<F>,
    trace_every: usize,
) -> Result<(TransportPlan<F>, Vec<F>), OtError> {
    let (m, c) = problem.predictions.dim();
    let w = &problem.row_marginal;
    let r = &problem.col_marginal;
    let floor = F::real(PREDICTION_FLOOR);
    let lambda = problem.smoothing;
    let kernel = problem.predictions.mapv(|p| p.max(floor).powf(lambda));

    let mut alpha = Array1::<F>::zeros(m);
    let mut beta = Array1::<F>::ones(c);
    // K beta, reused across iterations: the row-sum vector is alpha .* (K beta).
    let mut k_beta = kernel.dot(&beta);
    let mut trace = Vec::new();
    let mut iterations_used = problem.max_iters;
    let mut row_residual = F::infinity();
    let mut col_residual = F::infinity();

    for iter in 1..=problem.max_iters {
        for i in 0..m {
            alpha[i] = w[i] / k_beta[i];
        }
        let kt_alpha = kernel.t().dot(&alpha);
        for j in 0..c {
            // A zero prior column legitimately zeroes the plan column.
            beta[j] = if r[j] == F::zero() {
                F::zero()
            } else {
                r[j] / kt_alpha[j]
            };
        }
        if alpha.iter().any(|a| !a.is_finite()) || beta.iter().any(|b| !b.is_finite()) {
            return Err(OtError::NonFiniteScaling { iteration: iter });
        }
        k_beta = kernel.dot(&beta);
        row_residual = (0..m).map(|i| (alpha[i] * k_beta[i] - w[i]).abs()).sum();
        col_residual = (0..c).map(|j| (beta[j] * kt_alpha[j] - r[j]).abs()).sum();
        let worst = row_residual.max(col_residual);
        if trace_every > 0 && iter % trace_every == 0 {
            trace.push(worst);
        }
        if worst <= problem.tolerance {
            iterations_used = iter;
            break;
        }
    }

    let mut plan = Array2::<F>::zeros((m, c));
    for i in 0..m {
        for j in 0..c {
            plan[[i, j]] = alpha[i] * kernel[[i, j]] * beta[j];
        }
    }
    Ok((
        TransportPlan {
            plan,
            alpha,
            beta,
            iterations_used,
            row_residual,
            col_residual,
        },
        trace,
    ))
}

fn solve_log_domain<F: Real>(
    problem: &TransportProblem<F>,
    trace_every: usize,
) -> Result<(TransportPlan<F>, Vec<F>), OtError> {
    let (m, c) = problem.predictions.dim();
    let floor = F::real(PREDICTION_FLOOR);
    let lambda = problem.smoothing;
    let log_kernel = problem.predictions.mapv(|p| p.max(floor).ln() * lambda);
    let log_w = problem.row_marginal.mapv(|w| w.ln());
    let log_r = problem.col_marginal.mapv(|r| r.ln()); // -inf on zero prior entries

    let mut log_alpha = Array1::<F>::zeros(m);
    let mut log_beta = Array1::<F>::zeros(c);
    let mut lse_rows = row_logsumexp(&log_kernel, &log_beta);
    let mut trace = Vec::new();
    let mut iterations_used = problem.max_iters;
    let mut row_residual = F::infinity();
    let mut col_residual = F::infinity();

    for iter in 1..=problem.max_iters {
        for i in 0..m {
            log_alpha[i] = log_w[i] - lse_rows[i];
        }
        let lse_cols = col_logsumexp(&log_kernel, &log_alpha);
        for j in 0..c {
            log_beta[j] = log_r[j] - lse_cols[j];
        }
        let bad = log_alpha.iter().any(|a| a.is_nan() || *a == F::infinity())
            || log_beta.iter().any(|b| b.is_nan() || *b == F::infinity());
        if bad {
            return Err(OtError::NonFiniteScaling { iteration: iter });
        }
        lse_rows = row_logsumexp(&log_kernel, &log_beta);
        row_residual = (0..m)
            .map(|i| ((log_alpha[i] + lse_rows[i]).exp() - problem.row_marginal[i]).abs())
            .sum();
        col_residual = (0..c)
            .map(|j| ((log_beta[j] + lse_cols[j]).exp() - problem.col_marginal[j]).abs())
            .sum();
        let worst = row_residual.max(col_residual);
        if trace_every > 0 && iter % trace_every == 0 {
            trace.push(worst);
        }
        if worst <= problem.tolerance {
            iterations_used = iter;
            break;
        }
    }

    let mut plan = Array2::<F>::zeros((m, c));
    for i in 0..m {
        for j in 0..c {
            plan[[i, j]] = (log_alpha[i] + log_kernel[[i, j]] + log_beta[j]).exp();
        }
    }
    // alpha/beta are unique only up to a scalar; balance the exponents so
    // both vectors stay representable when exponentiated.
    let max_la = log_alpha.iter().cloned().fold(F::neg_infinity(), F::max);
    let max_lb = log_beta
        .iter()
        .cloned()
        .filter(|b| b.is_finite())
        .fold(F::neg_infinity(), F::max);
    let shift = if max_lb.is_finite() {
        (max_lb - max_la) / F::real(2.0)
    } else {
        F::zero()
    };
    let alpha = log_alpha.mapv(|a| (a + shift).exp());
    let beta = log_beta.mapv(|b| (b - shift).exp());
    Ok((
        TransportPlan {
            plan,
            alpha,
            beta,
            iterations_used,
            row_residual,
            col_residual,
        },
        trace,
    ))
}

/// `out_i = logsumexp_j(log_kernel[i, j] + log_beta[j])`
fn row_logsumexp<F: Real>(log_kernel: &Array2<F>, log_beta: &Array1<F>) -> Array1<F> {
    let (m, c) = log_kernel.dim();
    let mut out = Array1::<F>::zeros(m);
    for i in 0..m {
        let mut max = F::neg_infinity();
        for j in 0..c {
            max = max.max(log_kernel[[i, j]] + log_beta[j]);
        }
        out[i] = if max == F::neg_infinity() {
            F::neg_infinity()
        } else {
            let sum: F = (0..c)
                .map(|j| (log_kernel[[i, j]] + log_beta[j] - max).exp())
                .sum();
            max + sum.ln()
        };
    }
    out
}

/// `out_j = logsumexp_i(log_kernel[i, j] + log_alpha[i])`
fn col_logsumexp<F: Real>(log_kernel: &Array2<F>, log_alpha: &Array1<F>) -> Array1<F> {
    let (m, c) = log_kernel.dim();
    let mut out = Array1::<F>::zeros(c);
    for j in 0..c {
        let mut max = F::neg_infinity();
        for i in 0..m {
            max = max.max(log_kernel[[i, j]] + log_alpha[i]);
        }
        out[j] = if max == F::neg_infinity() {
            F::neg_infinity()
        } else {
            let sum: F = (0..m)
                .map(|i| (log_kernel[[i, j]] + log_alpha[i] - max).exp())
                .sum();
            max + sum.ln()
        };
    }
    out
}

/// Transport cost `<A, M>` of the plan under the cost `M = -log P`
/// (predictions clamped). Finite and nonnegative for valid inputs.
pub fn dual_sinkhorn_divergence<F: Real>(
    problem: &TransportProblem<F>,
    plan: &TransportPlan<F>,
) -> F {
    let floor = F::real(PREDICTION_FLOOR);
    let mut total = F::zero();
    for (a, p) in plan.plan.iter().zip(problem.predictions.iter()) {
        if *a != F::zero() {
            total += *a * -(p.max(floor).ln());
        }
    }
    total
}

/// Hard pseudo-labels: per-row argmax of the plan, ties broken toward the
/// lowest class index.
pub fn pseudo_labels<F: Real>(plan: &TransportPlan<F>) -> Vec<usize> {
    plan.plan
        .rows()
        .into_iter()
        .map(|row| argmax_lowest(row.iter().copied()))
        .collect()
}

/// Index of the maximum value; the first occurrence wins on ties.
pub(crate) fn argmax_lowest<F: Real>(values: impl Iterator<Item = F>) -> usize {
    let mut best = 0;
    let mut best_val = F::neg_infinity();
    for (j, v) in values.enumerate() {
        if v > best_val {
            best_val = v;
            best = j;
        }
    }
    best
}

/// L1 violations of the row and column marginal constraints.
pub fn marginal_residual<F: Real>(
    plan: &TransportPlan<F>,
    problem: &TransportProblem<F>,
) -> Result<(F, F), OtError> {
    let (m, c) = plan.plan.dim();
    if problem.row_marginal.len() != m || problem.col_marginal.len() != c {
        return Err(OtError::DimensionMismatch(format!(
            "plan is {}x{} but marginals have lengths {} and {}",
            m,
            c,
            problem.row_marginal.len(),
            problem.col_marginal.len()
        )));
    }
    let row_sums = plan.plan.sum_axis(Axis(1));
    let col_sums = plan.plan.sum_axis(Axis(0));
    let row = row_sums
        .iter()
        .zip(problem.row_marginal.iter())
        .map(|(s, w)| (*s - *w).abs())
        .sum();
    let col = col_sums
        .iter()
        .zip(problem.col_marginal.iter())
        .map(|(s, r)| (*s - *r).abs())
        .sum();
    Ok((row, col))
}
