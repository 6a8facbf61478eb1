//! Shared oracles and helpers for the integration test suites. Everything
//! here is deliberately independent of the library's implementation paths:
//! plain loops, brute-force enumeration, extended precision.
#![allow(dead_code)]

pub mod dd;

use dd::Dd;
use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Extended-precision reference Sinkhorn: the fixed-point iteration run in
/// double-double arithmetic with an integer smoothing exponent, a deep
/// iteration cap, and a tight tolerance (marginal residuals checked every
/// ten iterations). Returns the plan (as `f64`) and the iterations used.
pub fn sinkhorn_reference_dd(
    predictions: &Array2<f64>,
    row_marginal: &[f64],
    col_marginal: &[f64],
    lambda: u32,
    max_iters: usize,
    tolerance: f64,
) -> (Array2<f64>, usize) {
    let (m, c) = predictions.dim();
    assert_eq!(row_marginal.len(), m);
    assert_eq!(col_marginal.len(), c);
    let kernel: Vec<Vec<Dd>> = (0..m)
        .map(|i| {
            (0..c)
                .map(|j| Dd::from_f64(predictions[[i, j]].max(1e-12)).powi(lambda))
                .collect()
        })
        .collect();
    let mut alpha = vec![Dd::ZERO; m];
    let mut beta = vec![Dd::ONE; c];
    let mut used = max_iters;
    for iter in 1..=max_iters {
        for i in 0..m {
            let mut denom = Dd::ZERO;
            for j in 0..c {
                denom = denom.add(kernel[i][j].mul(beta[j]));
            }
            alpha[i] = Dd::from_f64(row_marginal[i]).div(denom);
        }
        for j in 0..c {
            let mut denom = Dd::ZERO;
            for i in 0..m {
                denom = denom.add(kernel[i][j].mul(alpha[i]));
            }
            beta[j] = if col_marginal[j] == 0.0 {
                Dd::ZERO
            } else {
                Dd::from_f64(col_marginal[j]).div(denom)
            };
        }
        if iter % 10 != 0 && iter != max_iters {
            continue;
        }
        let mut row_res = 0.0f64;
        for i in 0..m {
            let mut sum = Dd::ZERO;
            for j in 0..c {
                sum = sum.add(alpha[i].mul(kernel[i][j]).mul(beta[j]));
            }
            row_res += (sum.to_f64() - row_marginal[i]).abs();
        }
        let mut col_res = 0.0f64;
        for j in 0..c {
            let mut sum = Dd::ZERO;
            for i in 0..m {
                sum = sum.add(alpha[i].mul(kernel[i][j]).mul(beta[j]));
            }
            col_res += (sum.to_f64() - col_marginal[j]).abs();
        }
        if row_res.max(col_res) <= tolerance {
            used = iter;
            break;
        }
    }
    let mut plan = Array2::<f64>::zeros((m, c));
    for i in 0..m {
        for j in 0..c {
            plan[[i, j]] = alpha[i].mul(kernel[i][j]).mul(beta[j]).to_f64();
        }
    }
    (plan, used)
}

/// Transport cost `<A, -log P>` of a reference plan.
pub fn divergence_of(plan: &Array2<f64>, predictions: &Array2<f64>) -> f64 {
    plan.iter()
        .zip(predictions.iter())
        .filter(|(a, _)| **a != 0.0)
        .map(|(a, p)| a * -(p.max(1e-12).ln()))
        .sum()
}

/// Lexicographically ordered permutations of `0..n`.
pub fn permutations(n: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut current: Vec<usize> = (0..n).collect();
    loop {
        out.push(current.clone());
        // next_permutation
        let Some(i) = (0..n.saturating_sub(1)).rev().find(|&i| current[i] < current[i + 1])
        else {
            break;
        };
        let j = (i + 1..n).rev().find(|&j| current[j] > current[i]).unwrap();
        current.swap(i, j);
        current[i + 1..].reverse();
    }
    out
}

/// Brute-force minimum-cost assignment by lexicographic enumeration;
/// ties keep the first (lexicographically smallest) minimizer.
pub fn brute_force_assignment(cost: &Array2<f64>) -> (Vec<usize>, f64) {
    let n = cost.nrows();
    let mut best_perm = Vec::new();
    let mut best_cost = f64::INFINITY;
    for perm in permutations(n) {
        let total: f64 = perm.iter().enumerate().map(|(i, &j)| cost[[i, j]]).sum();
        if total < best_cost {
            best_cost = total;
            best_perm = perm;
        }
    }
    (best_perm, best_cost)
}

/// Row-stochastic matrix with entries bounded away from zero.
pub fn random_row_stochastic(rng: &mut ChaCha8Rng, m: usize, c: usize, floor: f64) -> Array2<f64> {
    let mut p = Array2::<f64>::zeros((m, c));
    for i in 0..m {
        let mut sum = 0.0;
        for j in 0..c {
            let v: f64 = floor + rng.random::<f64>();
            p[[i, j]] = v;
            sum += v;
        }
        for j in 0..c {
            p[[i, j]] /= sum;
        }
    }
    p
}

/// Random point on the probability simplex with entries bounded away from
/// zero.
pub fn random_simplex(rng: &mut ChaCha8Rng, c: usize, floor: f64) -> Vec<f64> {
    let mut v: Vec<f64> = (0..c).map(|_| floor + rng.random::<f64>()).collect();
    let sum: f64 = v.iter().sum();
    v.iter_mut().for_each(|x| *x /= sum);
    v
}

/// Random unit-norm rows.
pub fn random_unit_rows(rng: &mut ChaCha8Rng, n: usize, e: usize) -> Array2<f64> {
    let mut m = Array2::<f64>::zeros((n, e));
    for i in 0..n {
        let mut norm = 0.0f64;
        for j in 0..e {
            let v: f64 = rng.random::<f64>() * 2.0 - 1.0;
            m[[i, j]] = v;
            norm += v * v;
        }
        let norm = norm.sqrt();
        for j in 0..e {
            m[[i, j]] /= norm;
        }
    }
    m
}

/// Gradient-check comparison: relative error with a small absolute floor so
/// near-zero finite-difference noise does not produce spurious failures.
pub fn grad_rel_err(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1e-6);
    (analytic - numeric).abs() / denom
}

/// Central finite difference of a scalar function.
pub fn central_diff(mut f: impl FnMut(f64) -> f64, x: f64, h: f64) -> f64 {
    (f(x + h) - f(x - h)) / (2.0 * h)
}

/// Central-difference step used by the gradient suites.
pub const FD_STEP: f64 = 1e-5;

/// Relative-error bound of the gradient suites.
pub const FD_TOL: f64 = 1e-4;

/// Checks an analytic gradient matrix against central differences of
/// `eval` entry by entry; returns the worst relative error.
pub fn max_grad_error(
    analytic: &Array2<f64>,
    mut eval: impl FnMut(&Array2<f64>) -> f64,
    base: &Array2<f64>,
) -> f64 {
    let mut worst = 0.0f64;
    for i in 0..base.nrows() {
        for j in 0..base.ncols() {
            let mut plus = base.clone();
            plus[[i, j]] += FD_STEP;
            let mut minus = base.clone();
            minus[[i, j]] -= FD_STEP;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * FD_STEP);
            worst = worst.max(grad_rel_err(analytic[[i, j]], numeric));
        }
    }
    worst
}
