//! Class-prior and prototype state with moving-average updates.
//!
//! The prior `r` drives the column marginal of the E-step transport
//! problem; the prototype bank doubles as the classifier (predictions are a
//! temperature-scaled softmax over prototype cosine similarities). Both
//! update once per epoch with the same momentum.

use ndarray::{Array1, Array2};
use thiserror::Error;

use crate::ot::argmax_lowest;
use crate::scalar::Real;

/// Default momentum shared by the prior and prototype updates.
pub const DEFAULT_MOMENTUM: f64 = 0.99;

/// Default temperature of the prototype-similarity classifier.
pub const DEFAULT_PREDICT_TEMPERATURE: f64 = 0.1;

#[derive(Debug, Error)]
pub enum PriorError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("assignment {index} is out of range for {num_classes} classes")]
    InvalidAssignment { index: usize, num_classes: usize },
}

/// Estimated class distribution of the unlabeled pool.
#[derive(Debug, Clone)]
pub struct ClassPrior<F> {
    /// Simplex vector of length `C`.
    pub r: Array1<F>,
    /// Moving-average momentum in `[0, 1]`.
    pub momentum: F,
    /// Snapshot of `r` after each update.
    pub history: Vec<Array1<F>>,
}

impl<F: Real> ClassPrior<F> {
    /// Uniform prior over `num_classes` classes.
    pub fn uniform(num_classes: usize, momentum: F) -> Self {
        let r = Array1::from_elem(num_classes, F::one() / F::real(num_classes as f64));
        Self {
            r,
            momentum,
            history: Vec::new(),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.r.len()
    }
}

/// Unit-norm prototype per class.
#[derive(Debug, Clone)]
pub struct PrototypeBank<F> {
    /// `C x e`, rows unit L2 norm.
    pub prototypes: Array2<F>,
    pub momentum: F,
}

impl<F: Real> PrototypeBank<F> {
    /// Builds a bank from raw rows, normalizing each.
    pub fn from_rows(rows: Array2<F>, momentum: F) -> Self {
        let mut prototypes = rows;
        for mut row in prototypes.rows_mut() {
            let norm = row.iter().map(|a| *a * *a).sum::<F>().sqrt();
            if norm > F::zero() {
                row.mapv_inplace(|a| a / norm);
            }
        }
        Self {
            prototypes,
            momentum,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.prototypes.nrows()
    }

    pub fn embed_dim(&self) -> usize {
        self.prototypes.ncols()
    }
}

/// Classifier predictions: `P_ij = softmax_j(v_i . c_j / tau_pred)`.
pub fn predict_distribution<F: Real>(
    v: &Array2<F>,
    bank: &PrototypeBank<F>,
    tau_pred: F,
) -> Result<Array2<F>, PriorError> {
    if v.ncols() != bank.embed_dim() {
        return Err(PriorError::DimensionMismatch(format!(
            "embeddings have dim {}, prototypes have dim {}",
            v.ncols(),
            bank.embed_dim()
        )));
    }
    let mut logits = v.dot(&bank.prototypes.t());
    logits.mapv_inplace(|z| z / tau_pred);
    for mut row in logits.rows_mut() {
        let max = row.iter().cloned().fold(F::neg_infinity(), F::max);
        let mut denom = F::zero();
        for z in row.iter_mut() {
            *z = (*z - max).exp();
            denom += *z;
        }
        row.mapv_inplace(|p| p / denom);
    }
    Ok(logits)
}

/// Backpropagates a gradient on the predictions of [`predict_distribution`]
/// to the embeddings (prototypes held constant). Used to let the KL prior
/// regularizer reach the encoder.
pub fn predict_distribution_backward<F: Real>(
    bank: &PrototypeBank<F>,
    tau_pred: F,
    predictions: &Array2<F>,
    grad_predictions: &Array2<F>,
) -> Array2<F> {
    let (n, c) = predictions.dim();
    // Softmax Jacobian: grad_z = p .* (grad_p - <grad_p, p>).
    let mut grad_logits = Array2::<F>::zeros((n, c));
    for i in 0..n {
        let p = predictions.row(i);
        let g = grad_predictions.row(i);
        let inner: F = p.iter().zip(g.iter()).map(|(a, b)| *a * *b).sum();
        for j in 0..c {
            grad_logits[[i, j]] = p[j] * (g[j] - inner);
        }
    }
    grad_logits.dot(&bank.prototypes).mapv(|g| g / tau_pred)
}

/// Empirical distribution of per-row argmax predictions, ties broken
/// toward the lowest class index.
pub fn empirical_argmax_distribution<F: Real>(predictions: &Array2<F>) -> Array1<F> {
    let (n, c) = predictions.dim();
    let mut counts = vec![0usize; c];
    for row in predictions.rows() {
        counts[argmax_lowest(row.iter().copied())] += 1;
    }
    Array1::from_iter(
        counts
            .into_iter()
            .map(|k| F::real(k as f64) / F::real(n as f64)),
    )
}

/// Moving-average prior update `r <- mu r + (1 - mu) z`. The convex
/// combination keeps `r` on the simplex without renormalization.
pub fn update_prior<F: Real>(prior: &mut ClassPrior<F>, z: &Array1<F>) -> Result<(), PriorError> {
    if z.len() != prior.num_classes() {
        return Err(PriorError::DimensionMismatch(format!(
            "target has length {}, prior has {}",
            z.len(),
            prior.num_classes()
        )));
    }
    let mu = prior.momentum;
    let one_minus = F::one() - mu;
    for (r, z) in prior.r.iter_mut().zip(z.iter()) {
        *r = mu * *r + one_minus * *z;
    }
    prior.history.push(prior.r.clone());
    Ok(())
}

/// Moving-average prototype update: for each class with at least one
/// assigned embedding, `c_k <- normalize(mu c_k + (1 - mu) mean_k)` where
/// `mean_k` is the mean of the assigned unit embeddings. Classes without
/// assignments keep their prototype; returns how many classes were empty.
pub fn update_prototypes<F: Real>(
    bank: &mut PrototypeBank<F>,
    embeddings: &Array2<F>,
    assignments: &[usize],
) -> Result<usize, PriorError> {
    let c = bank.num_classes();
    let e = bank.embed_dim();
    if embeddings.nrows() != assignments.len() {
        return Err(PriorError::DimensionMismatch(format!(
            "{} embeddings vs {} assignments",
            embeddings.nrows(),
            assignments.len()
        )));
    }
    if embeddings.ncols() != e {
        return Err(PriorError::DimensionMismatch(
            "embedding dim disagrees with the bank".into(),
        ));
    }
    for &k in assignments {
        if k >= c {
            return Err(PriorError::InvalidAssignment {
                index: k,
                num_classes: c,
            });
        }
    }
    let mut sums = Array2::<F>::zeros((c, e));
    let mut counts = vec![0usize; c];
    for (row, &k) in embeddings.rows().into_iter().zip(assignments.iter()) {
        counts[k] += 1;
        for (s, x) in sums.row_mut(k).iter_mut().zip(row.iter()) {
            *s += *x;
        }
    }
    let mu = bank.momentum;
    let one_minus = F::one() - mu;
    let mut empty = 0usize;
    for k in 0..c {
        if counts[k] == 0 {
            empty += 1;
            continue;
        }
        let inv = F::one() / F::real(counts[k] as f64);
        let mut row = bank.prototypes.row_mut(k);
        for (p, s) in row.iter_mut().zip(sums.row(k).iter()) {
            *p = mu * *p + one_minus * *s * inv;
        }
        let norm = row.iter().map(|a| *a * *a).sum::<F>().sqrt();
        if norm > F::zero() {
            row.mapv_inplace(|a| a / norm);
        }
    }
    Ok(empty)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    #[test]
    fn predictions_match_closed_form_softmax() {
        // v equals prototype 0, the other prototype orthogonal, tau 1.
        let bank = PrototypeBank::from_rows(array![[1.0, 0.0], [0.0, 1.0]], 0.99);
        let v = array![[1.0, 0.0]];
        let p = predict_distribution(&v, &bank, 1.0).unwrap();
        let e = 1.0f64.exp();
        assert_abs_diff_eq!(p[[0, 0]], e / (e + 1.0), epsilon = 1e-12);
        assert_abs_diff_eq!(p[[0, 1]], 1.0 / (e + 1.0), epsilon = 1e-12);
    }

    #[test]
    fn high_temperature_flattens_predictions() {
        let bank = PrototypeBank::from_rows(array![[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0]], 0.99);
        let v = array![[0.6, 0.8]];
        let p = predict_distribution(&v, &bank, 1e6).unwrap();
        for &x in p.iter() {
            assert_abs_diff_eq!(x, 1.0 / 3.0, epsilon = 1e-6);
        }
    }

    #[test]
    fn prediction_rows_sum_to_one() {
        let mut rng_state = 88172645463325252u64;
        let mut next = move || {
            // xorshift, plenty for test data
            rng_state ^= rng_state << 13;
            rng_state ^= rng_state >> 7;
            rng_state ^= rng_state << 17;
            (rng_state as f64 / u64::MAX as f64) * 2.0 - 1.0
        };
        let raw = Array2::from_shape_fn((5, 4), |_| next());
        let bank = PrototypeBank::from_rows(Array2::from_shape_fn((3, 4), |_| next()), 0.99);
        let mut v = raw;
        for mut row in v.rows_mut() {
            let norm = row.iter().map(|a| a * a).sum::<f64>().sqrt();
            row.mapv_inplace(|a| a / norm);
        }
        let p = predict_distribution(&v, &bank, 0.1).unwrap();
        for row in p.rows() {
            let sum: f64 = row.iter().sum();
            assert_abs_diff_eq!(sum, 1.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn argmax_distribution_counts() {
        let p = array![
            [0.9, 0.05, 0.05],
            [0.8, 0.1, 0.1],
            [0.2, 0.7, 0.1],
            [0.3, 0.3, 0.4]
        ];
        let z = empirical_argmax_distribution(&p);
        assert_abs_diff_eq!(z[0], 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(z[1], 0.25, epsilon = 1e-15);
        assert_abs_diff_eq!(z[2], 0.25, epsilon = 1e-15);
        // Ties go to the lowest index.
        let tied = array![[0.5, 0.5]];
        let z = empirical_argmax_distribution(&tied);
        assert_eq!(z[0], 1.0);
    }

    #[test]
    fn prior_update_momentum_extremes() {
        let mut prior = ClassPrior::<f64>::uniform(2, 1.0);
        update_prior(&mut prior, &array![1.0, 0.0]).unwrap();
        assert_eq!(prior.r, array![0.5, 0.5]);

        let mut prior = ClassPrior::<f64>::uniform(2, 0.0);
        update_prior(&mut prior, &array![1.0, 0.0]).unwrap();
        assert_eq!(prior.r, array![1.0, 0.0]);

        let mut prior = ClassPrior::<f64>::uniform(2, 0.99);
        update_prior(&mut prior, &array![1.0, 0.0]).unwrap();
        assert_abs_diff_eq!(prior.r[0], 0.505, epsilon = 1e-12);
        assert_abs_diff_eq!(prior.r[1], 0.495, epsilon = 1e-12);
        assert_eq!(prior.history.len(), 1);
    }

    #[test]
    fn prior_stays_on_simplex_and_fixed_points_hold() {
        for mu in [0.0, 0.3, 0.7, 0.99, 1.0] {
            let mut prior = ClassPrior::<f64>::uniform(4, mu);
            let z = array![0.7, 0.1, 0.1, 0.1];
            update_prior(&mut prior, &z).unwrap();
            let sum: f64 = prior.r.iter().sum();
            assert_abs_diff_eq!(sum, 1.0, epsilon = 1e-12);
            assert!(prior.r.iter().all(|&x| x >= 0.0));
        }
        // z = r keeps r unchanged.
        let mut prior = ClassPrior::<f64>::uniform(3, 0.5);
        let r0 = prior.r.clone();
        update_prior(&mut prior, &r0.clone()).unwrap();
        for (a, b) in prior.r.iter().zip(r0.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-15);
        }
    }

    #[test]
    fn prototype_update_momentum_extremes() {
        // mu = 1: identity.
        let mut bank = PrototypeBank::from_rows(array![[1.0, 0.0], [0.0, 1.0]], 1.0);
        let before = bank.prototypes.clone();
        let emb = array![[0.0, 1.0], [1.0, 0.0]];
        update_prototypes(&mut bank, &emb, &[0, 1]).unwrap();
        for (a, b) in bank.prototypes.iter().zip(before.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }

        // mu = 0 with one embedding per class: prototypes become them.
        let mut bank = PrototypeBank::from_rows(array![[1.0, 0.0], [0.0, 1.0]], 0.0);
        update_prototypes(&mut bank, &emb, &[0, 1]).unwrap();
        for (a, b) in bank.prototypes.iter().zip(emb.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn prototype_update_matches_analytic_normalization() {
        // c0 = [1, 0], assigned mean [0, 1], mu = 0.99:
        // pre-norm [0.99, 0.01], norm sqrt(0.9802).
        let mut bank = PrototypeBank::from_rows(array![[1.0, 0.0]], 0.99);
        let emb = array![[0.0, 1.0]];
        update_prototypes(&mut bank, &emb, &[0]).unwrap();
        let norm = (0.99f64 * 0.99 + 0.01 * 0.01).sqrt();
        assert_abs_diff_eq!(bank.prototypes[[0, 0]], 0.99 / norm, epsilon = 1e-15);
        assert_abs_diff_eq!(bank.prototypes[[0, 1]], 0.01 / norm, epsilon = 1e-15);
    }

    #[test]
    fn empty_classes_keep_their_prototypes() {
        let mut bank = PrototypeBank::from_rows(array![[1.0, 0.0], [0.0, 1.0]], 0.5);
        let before = bank.prototypes.row(1).to_owned();
        let emb = array![[0.6, 0.8]];
        let empty = update_prototypes(&mut bank, &emb, &[0]).unwrap();
        assert_eq!(empty, 1);
        assert_eq!(bank.prototypes.row(1), before);
    }

    #[test]
    fn prototype_norms_stay_unit_after_updates() {
        let mut bank =
            PrototypeBank::from_rows(array![[3.0, 4.0], [1.0, 1.0], [0.0, 2.0]], 0.9);
        let emb = array![[0.6, 0.8], [-1.0, 0.0], [0.0, 1.0], [1.0, 0.0]];
        update_prototypes(&mut bank, &emb, &[0, 1, 2, 1]).unwrap();
        for row in bank.prototypes.rows() {
            let norm: f64 = row.iter().map(|a| a * a).sum::<f64>().sqrt();
            assert_abs_diff_eq!(norm, 1.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn fixed_point_when_means_equal_prototypes() {
        let mut bank = PrototypeBank::from_rows(array![[1.0, 0.0], [0.0, 1.0]], 0.7);
        let before = bank.prototypes.clone();
        let emb = array![[1.0, 0.0], [0.0, 1.0]];
        update_prototypes(&mut bank, &emb, &[0, 1]).unwrap();
        for (a, b) in bank.prototypes.iter().zip(before.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn invalid_assignment_is_rejected() {
        let mut bank = PrototypeBank::from_rows(array![[1.0, 0.0]], 0.9);
        let emb = array![[1.0, 0.0]];
        assert!(matches!(
            update_prototypes(&mut bank, &emb, &[3]),
            Err(PriorError::InvalidAssignment { index: 3, .. })
        ));
    }

    #[test]
    fn predictions_invariant_under_common_rotation() {
        // Rotation in the plane applied to both embeddings and prototypes.
        let theta = 0.73f64;
        let rot = array![
            [theta.cos(), -theta.sin()],
            [theta.sin(), theta.cos()]
        ];
        let v = array![[0.6, 0.8], [1.0, 0.0]];
        let protos = array![[0.0, 1.0], [-0.6, 0.8]];
        let bank = PrototypeBank::from_rows(protos.clone(), 0.9);
        let p = predict_distribution(&v, &bank, 0.1).unwrap();
        let bank_rot = PrototypeBank::from_rows(protos.dot(&rot.t()), 0.9);
        let p_rot = predict_distribution(&v.dot(&rot.t()), &bank_rot, 0.1).unwrap();
        for (a, b) in p.iter().zip(p_rot.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-9);
        }
    }
}
