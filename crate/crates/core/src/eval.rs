//! Hungarian assignment and the clustering accuracy metrics.
//!
//! Predicted cluster indices carry no intrinsic meaning for novel classes,
//! so accuracies are computed after an optimal matching of predicted
//! clusters to ground-truth classes on the contingency matrix. Known-class
//! accuracy is the exception: known indices are pinned by the labeled set,
//! so it uses the identity mapping.

use std::collections::BTreeSet;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Real;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("cost matrix is not square: {rows}x{cols}")]
    NonSquare { rows: usize, cols: usize },
    #[error("label vectors have mismatched lengths: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("label {label} is out of range for {num_classes} classes")]
    InvalidLabel { label: usize, num_classes: usize },
    #[error("no samples to evaluate")]
    NoSamples,
}

/// Per-evaluation metrics emitted by the trainer.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Hungarian-matched accuracy over all classes on the unlabeled pool.
    pub acc_all: f64,
    /// Identity-mapped accuracy on samples whose true class is known.
    pub acc_known: f64,
    /// Matched accuracy on the isolated unknown-class subset.
    pub acc_unknown_aware: f64,
    /// Accuracy on unknown-class samples under the full-set matching.
    pub acc_unknown_agnostic: f64,
    /// L1 distance between the estimated and ground-truth class priors.
    pub prior_l1_error: f64,
    /// Predicted sample count per class over the evaluated pool.
    pub predicted_class_counts: Vec<usize>,
    pub epoch: usize,
}

/// Minimum-cost assignment on a square cost matrix.
///
/// Returns the permutation `sigma` (row -> column) minimizing
/// `sum_i cost[i, sigma(i)]`. Among all minimizers the lexicographically
/// smallest permutation is returned. Costs must be finite.
pub fn hungarian<F: Real>(cost: &Array2<F>) -> Result<Vec<usize>, EvalError> {
    let (rows, cols) = cost.dim();
    if rows != cols {
        return Err(EvalError::NonSquare { rows, cols });
    }
    let n = rows;
    if n == 0 {
        return Ok(Vec::new());
    }
    debug_assert!(cost.iter().all(|c| c.is_finite()), "costs must be finite");

    let optimal = assignment_cost(cost.view(), &(0..n).collect::<Vec<_>>(), &(0..n).collect::<Vec<_>>()).1;
    let scale = F::one().max(optimal.abs());
    let tol = F::real(1e-9) * scale;

    // Lexicographic refinement: fix rows in order, keeping the smallest
    // column whose completion still attains the optimal total.
    let mut remaining_cols: Vec<usize> = (0..n).collect();
    let mut prefix = F::zero();
    let mut assignment = vec![0usize; n];
    for i in 0..n {
        let tail_rows: Vec<usize> = (i + 1..n).collect();
        let mut chosen = None;
        for (pos, &j) in remaining_cols.iter().enumerate() {
            let mut tail_cols = remaining_cols.clone();
            tail_cols.remove(pos);
            let completion = if tail_rows.is_empty() {
                F::zero()
            } else {
                assignment_cost(cost.view(), &tail_rows, &tail_cols).1
            };
            let total = prefix + cost[[i, j]] + completion;
            if total <= optimal + tol {
                chosen = Some((pos, j));
                break;
            }
        }
        let (pos, j) = chosen.expect("some column must complete the optimal assignment");
        assignment[i] = j;
        prefix += cost[[i, j]];
        remaining_cols.remove(pos);
    }
    Ok(assignment)
}

/// O(n^3) shortest-augmenting-path assignment on the submatrix induced by
/// `row_ids` x `col_ids`. Returns (assignment as positions into `col_ids`
/// per row, total cost).
fn assignment_cost<F: Real>(
    cost: ndarray::ArrayView2<F>,
    row_ids: &[usize],
    col_ids: &[usize],
) -> (Vec<usize>, F) {
    let n = row_ids.len();
    debug_assert_eq!(n, col_ids.len());
    // Potentials and matching are 1-indexed; column 0 is the virtual source.
    let mut u = vec![F::zero(); n + 1];
    let mut v = vec![F::zero(); n + 1];
    let mut matched_row = vec![0usize; n + 1]; // matched_row[j] = row occupying column j
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        matched_row[0] = i;
        let mut j0 = 0usize;
        let mut min_slack = vec![F::infinity(); n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = matched_row[j0];
            let mut delta = F::infinity();
            let mut j1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[[row_ids[i0 - 1], col_ids[j - 1]]] - u[i0] - v[j];
                if cur < min_slack[j] {
                    min_slack[j] = cur;
                    way[j] = j0;
                }
                if min_slack[j] < delta {
                    delta = min_slack[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[matched_row[j]] += delta;
                    v[j] -= delta;
                } else {
                    min_slack[j] -= delta;
                }
            }
            j0 = j1;
            if matched_row[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            matched_row[j0] = matched_row[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0usize; n];
    let mut total = F::zero();
    for j in 1..=n {
        if matched_row[j] > 0 {
            assignment[matched_row[j] - 1] = j - 1;
            total += cost[[row_ids[matched_row[j] - 1], col_ids[j - 1]]];
        }
    }
    (assignment, total)
}

fn check_labels(
    pred: &[usize],
    truth: &[usize],
    num_classes: usize,
) -> Result<(), EvalError> {
    if pred.len() != truth.len() {
        return Err(EvalError::LengthMismatch(pred.len(), truth.len()));
    }
    if pred.is_empty() {
        return Err(EvalError::NoSamples);
    }
    for &l in pred.iter().chain(truth.iter()) {
        if l >= num_classes {
            return Err(EvalError::InvalidLabel {
                label: l,
                num_classes,
            });
        }
    }
    Ok(())
}

fn contingency(pred: &[usize], truth: &[usize], num_classes: usize) -> Array2<f64> {
    let mut counts = Array2::<f64>::zeros((num_classes, num_classes));
    for (&p, &t) in pred.iter().zip(truth.iter()) {
        counts[[p, t]] += 1.0;
    }
    counts
}

/// Matching of predicted clusters to classes that maximizes the matched
/// count (Hungarian on negated contingency counts).
fn best_matching(pred: &[usize], truth: &[usize], num_classes: usize) -> Vec<usize> {
    let counts = contingency(pred, truth, num_classes);
    let cost = counts.mapv(|c| -c);
    hungarian(&cost).expect("contingency cost matrix is square")
}

/// Hungarian-matched accuracy over all classes.
pub fn accuracy_all(pred: &[usize], truth: &[usize], num_classes: usize) -> Result<f64, EvalError> {
    check_labels(pred, truth, num_classes)?;
    let mapping = best_matching(pred, truth, num_classes);
    let matched = pred
        .iter()
        .zip(truth.iter())
        .filter(|(&p, &t)| mapping[p] == t)
        .count();
    Ok(matched as f64 / pred.len() as f64)
}

/// Identity-mapped accuracy on samples whose true class is in `known`.
pub fn accuracy_known(
    pred: &[usize],
    truth: &[usize],
    known: &BTreeSet<usize>,
) -> Result<f64, EvalError> {
    if pred.len() != truth.len() {
        return Err(EvalError::LengthMismatch(pred.len(), truth.len()));
    }
    let mut total = 0usize;
    let mut correct = 0usize;
    for (&p, &t) in pred.iter().zip(truth.iter()) {
        if known.contains(&t) {
            total += 1;
            if p == t {
                correct += 1;
            }
        }
    }
    if total == 0 {
        return Err(EvalError::NoSamples);
    }
    Ok(correct as f64 / total as f64)
}

/// Matched accuracy after isolating the samples whose true class is
/// unknown and matching predicted clusters to unknown classes only.
pub fn accuracy_unknown_aware(
    pred: &[usize],
    truth: &[usize],
    known: &BTreeSet<usize>,
    num_classes: usize,
) -> Result<f64, EvalError> {
    check_labels(pred, truth, num_classes)?;
    let unknown: Vec<usize> = (0..num_classes).filter(|c| !known.contains(c)).collect();
    let subset: Vec<(usize, usize)> = pred
        .iter()
        .zip(truth.iter())
        .filter(|(_, &t)| !known.contains(&t))
        .map(|(&p, &t)| (p, t))
        .collect();
    if subset.is_empty() || unknown.is_empty() {
        return Err(EvalError::NoSamples);
    }
    // Contingency of predicted clusters against unknown classes,
    // zero-padded to square so the Hungarian step applies.
    let side = num_classes.max(unknown.len());
    let mut counts = Array2::<f64>::zeros((side, side));
    for &(p, t) in &subset {
        let col = unknown.iter().position(|&u| u == t).expect("t is unknown");
        counts[[p, col]] += 1.0;
    }
    let mapping = hungarian(&counts.mapv(|c| -c))?;
    let matched: f64 = (0..side)
        .map(|p| {
            if mapping[p] < unknown.len() {
                counts[[p, mapping[p]]]
            } else {
                0.0
            }
        })
        .sum();
    Ok(matched / subset.len() as f64)
}

/// Accuracy on unknown-class samples under a matching computed over all
/// classes on the full set, without isolating unknowns.
pub fn accuracy_unknown_agnostic(
    pred: &[usize],
    truth: &[usize],
    known: &BTreeSet<usize>,
    num_classes: usize,
) -> Result<f64, EvalError> {
    check_labels(pred, truth, num_classes)?;
    let mapping = best_matching(pred, truth, num_classes);
    let mut total = 0usize;
    let mut correct = 0usize;
    for (&p, &t) in pred.iter().zip(truth.iter()) {
        if !known.contains(&t) {
            total += 1;
            if mapping[p] == t {
                correct += 1;
            }
        }
    }
    if total == 0 {
        return Err(EvalError::NoSamples);
    }
    Ok(correct as f64 / total as f64)
}

/// Counts of predicted labels per class; sums to the number of samples.
pub fn class_count_report(pred: &[usize], num_classes: usize) -> Vec<usize> {
    let mut counts = vec![0usize; num_classes];
    for &p in pred {
        if p < num_classes {
            counts[p] += 1;
        }
    }
    counts
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn diagonal_dominant_cost_picks_identity() {
        let cost = array![[0.1, 5.0, 5.0], [5.0, 0.2, 5.0], [5.0, 5.0, 0.3]];
        assert_eq!(hungarian(&cost).unwrap(), vec![0, 1, 2]);
    }

    #[test]
    fn all_equal_costs_tie_break_to_identity() {
        let cost = Array2::<f64>::ones((4, 4));
        assert_eq!(hungarian(&cost).unwrap(), vec![0, 1, 2, 3]);
    }

    #[test]
    fn non_square_is_rejected() {
        let cost = Array2::<f64>::ones((2, 3));
        assert!(matches!(
            hungarian(&cost),
            Err(EvalError::NonSquare { rows: 2, cols: 3 })
        ));
    }

    #[test]
    fn anti_diagonal_structure() {
        let cost = array![[3.0, 1.0], [1.0, 3.0]];
        assert_eq!(hungarian(&cost).unwrap(), vec![1, 0]);
    }

    #[test]
    fn ties_between_equal_cost_assignments_pick_lexicographic() {
        // Both the identity and the swap cost 2; identity is smaller.
        let cost = array![[1.0, 1.0], [1.0, 1.0]];
        assert_eq!(hungarian(&cost).unwrap(), vec![0, 1]);
        // Here {0->1, 1->0} and {0->0, 1->1} both cost 4.
        let cost = array![[2.0, 2.0], [2.0, 2.0]];
        assert_eq!(hungarian(&cost).unwrap(), vec![0, 1]);
    }

    #[test]
    fn accuracy_all_perfect_and_permuted() {
        let truth = vec![0, 1, 2, 0, 1, 2];
        assert_eq!(accuracy_all(&truth, &truth, 3).unwrap(), 1.0);
        // Predictions permuted by a fixed relabeling are still perfect.
        let pred: Vec<usize> = truth.iter().map(|&t| (t + 1) % 3).collect();
        assert_eq!(accuracy_all(&pred, &truth, 3).unwrap(), 1.0);
    }

    #[test]
    fn accuracy_known_counts_identity_matches() {
        let known: BTreeSet<usize> = [0, 1].into_iter().collect();
        let truth = vec![0, 0, 1, 1, 2, 2];
        let pred = vec![0, 2, 1, 0, 2, 2];
        // Known-truth samples: 4; identity-correct: pred[0] and pred[2].
        assert_eq!(accuracy_known(&pred, &truth, &known).unwrap(), 0.5);
        let all_wrong = vec![2, 2, 2, 2, 0, 0];
        assert_eq!(accuracy_known(&all_wrong, &truth, &known).unwrap(), 0.0);
    }

    #[test]
    fn accuracy_known_mixed_hand_case() {
        // 10 hand-built samples, known = {0, 1}; 6 known-truth samples of
        // which 4 are predicted identically.
        let known: BTreeSet<usize> = [0, 1].into_iter().collect();
        let truth = vec![0, 0, 0, 1, 1, 1, 2, 2, 3, 3];
        let pred = vec![0, 0, 1, 1, 1, 3, 2, 0, 3, 3];
        let acc = accuracy_known(&pred, &truth, &known).unwrap();
        assert!((acc - 4.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn unknown_aware_is_relabel_invariant() {
        let known: BTreeSet<usize> = [0].into_iter().collect();
        // Truth has unknowns {1, 2}; predictions cluster them perfectly but
        // under swapped ids.
        let truth = vec![0, 1, 1, 2, 2];
        let pred = vec![0, 2, 2, 1, 1];
        assert_eq!(accuracy_unknown_aware(&pred, &truth, &known, 3).unwrap(), 1.0);
    }

    #[test]
    fn unknown_aware_single_class_single_cluster() {
        let known: BTreeSet<usize> = [0].into_iter().collect();
        let truth = vec![1, 1, 1];
        // All predictions land in one cluster, even a "known" one.
        let pred = vec![0, 0, 0];
        assert_eq!(accuracy_unknown_aware(&pred, &truth, &known, 2).unwrap(), 1.0);
    }

    #[test]
    fn unknown_agnostic_perfect_and_absorbed() {
        let known: BTreeSet<usize> = [0].into_iter().collect();
        let truth = vec![0, 0, 1, 1, 2, 2];
        assert_eq!(
            accuracy_unknown_agnostic(&truth, &truth, &known, 3).unwrap(),
            1.0
        );
        // Unknown samples absorbed into the dominant known cluster score 0.
        let absorbed = vec![0, 0, 0, 0, 0, 0];
        assert_eq!(
            accuracy_unknown_agnostic(&absorbed, &truth, &known, 3).unwrap(),
            0.0
        );
    }

    #[test]
    fn class_count_report_counts() {
        assert_eq!(class_count_report(&[1, 1, 1], 3), vec![0, 3, 0]);
        assert_eq!(class_count_report(&[0, 1, 2, 0, 1, 2], 3), vec![2, 2, 2]);
    }

    #[test]
    fn length_mismatch_is_reported() {
        assert!(matches!(
            accuracy_all(&[0, 1], &[0], 2),
            Err(EvalError::LengthMismatch(2, 1))
        ));
    }
}
