//! Synthetic imbalanced benchmark generator and the on-disk dataset format.
//!
//! Datasets are Gaussian mixtures: class means drawn once from an isotropic
//! Gaussian, samples drawn around them. Known classes take the low indices.
//! The unlabeled pool's known/unknown mass ratio follows the imbalance
//! factor `rho` under a step or exponential decreasing profile; the labeled
//! pool is generated as extra draws so the unlabeled ratio stays exact.
//!
//! On disk a dataset is a directory of `meta.json` (spec, counts, digest),
//! `features.f32` (row-major little-endian), `labels.i32`, and `labeled.u8`.

use std::collections::BTreeSet;
use std::path::Path;

use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::scalar::Real;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("infeasible imbalance profile: {0}")]
    InfeasibleProfile(String),
    #[error("corrupt dataset file: {0}")]
    CorruptFile(String),
    #[error("invalid spec: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Shape of the per-class counts in the unlabeled pool.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    /// Unknown classes share the unknown mass equally.
    Step,
    /// Unknown counts form a decreasing geometric sequence.
    Exponential,
}

/// Parameters of a synthetic benchmark.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub num_known: usize,
    pub num_unknown: usize,
    pub input_dim: usize,
    /// Per-class sample standard deviation.
    pub cluster_spread: f64,
    /// Scale of the isotropic Gaussian the class means are drawn from.
    pub mean_scale: f64,
    /// Ratio of known to unknown sample mass in the unlabeled pool.
    pub rho: f64,
    pub profile: Profile,
    /// Samples per known class in the unlabeled pool.
    pub per_known_count: usize,
    /// Fraction of each known class's total that is labeled; the labeled
    /// pool is drawn on top of the unlabeled counts.
    #[serde(default = "default_labeled_fraction")]
    pub labeled_fraction: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_labeled_fraction() -> f64 {
    0.5
}

impl SyntheticSpec {
    pub fn num_classes(&self) -> usize {
        self.num_known + self.num_unknown
    }

    fn validate(&self) -> Result<(), DataError> {
        if self.num_known < 1 || self.num_unknown < 1 {
            return Err(DataError::InvalidSpec(
                "need at least one known and one unknown class".into(),
            ));
        }
        if self.input_dim < 1 {
            return Err(DataError::InvalidSpec("input_dim must be >= 1".into()));
        }
        if !(self.rho > 0.0) {
            return Err(DataError::InvalidSpec("rho must be positive".into()));
        }
        if self.cluster_spread < 0.0 || !self.mean_scale.is_finite() {
            return Err(DataError::InvalidSpec(
                "cluster_spread must be >= 0 and mean_scale finite".into(),
            ));
        }
        if !(self.labeled_fraction > 0.0 && self.labeled_fraction <= 1.0) {
            return Err(DataError::InvalidSpec(
                "labeled_fraction must lie in (0, 1]".into(),
            ));
        }
        Ok(())
    }

    /// Labeled draws per known class implied by `labeled_fraction`.
    /// At the default 0.5 this equals `per_known_count`, matching a 50/50
    /// labeled/unlabeled split of the known classes.
    pub fn labeled_per_known(&self) -> usize {
        if self.labeled_fraction >= 1.0 {
            self.per_known_count
        } else {
            let extra = self.per_known_count as f64 * self.labeled_fraction
                / (1.0 - self.labeled_fraction);
            extra.round().max(1.0) as usize
        }
    }
}

/// An in-memory dataset. Features are `f32`, exactly as stored on disk;
/// the trainer widens rows on demand.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub features: Array2<f32>,
    /// Ground-truth class per row (also for unlabeled rows).
    pub labels: Vec<usize>,
    pub is_labeled: Vec<bool>,
    pub known_classes: BTreeSet<usize>,
    pub spec: SyntheticSpec,
    /// Per-class counts over all rows.
    pub class_counts: Vec<usize>,
}

impl Dataset {
    pub fn num_samples(&self) -> usize {
        self.features.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn num_classes(&self) -> usize {
        self.class_counts.len()
    }

    pub fn labeled_indices(&self) -> Vec<usize> {
        (0..self.num_samples()).filter(|&i| self.is_labeled[i]).collect()
    }

    pub fn unlabeled_indices(&self) -> Vec<usize> {
        (0..self.num_samples()).filter(|&i| !self.is_labeled[i]).collect()
    }

    /// Per-class counts restricted to the unlabeled pool.
    pub fn unlabeled_class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.num_classes()];
        for (&label, &labeled) in self.labels.iter().zip(self.is_labeled.iter()) {
            if !labeled {
                counts[label] += 1;
            }
        }
        counts
    }

    /// Ground-truth class distribution of the unlabeled pool.
    pub fn unlabeled_prior(&self) -> Array1<f64> {
        let counts = self.unlabeled_class_counts();
        let total: usize = counts.iter().sum();
        Array1::from_iter(counts.into_iter().map(|c| c as f64 / total as f64))
    }

    /// Feature rows widened into the pipeline scalar.
    pub fn rows_as<F: Real>(&self, indices: &[usize]) -> Array2<F> {
        let d = self.input_dim();
        let mut out = Array2::<F>::zeros((indices.len(), d));
        for (slot, &i) in indices.iter().enumerate() {
            for j in 0..d {
                out[[slot, j]] = F::real(self.features[[i, j]] as f64);
            }
        }
        out
    }
}

/// Per-class counts for the unlabeled pool under the given profile.
///
/// Known classes each receive `per_known_count`. Under [`Profile::Step`]
/// every unknown class receives `round(per_known_count * K / (rho * U))`.
/// Under [`Profile::Exponential`] the unknown counts form a geometric
/// sequence whose total is `per_known_count * K / rho`, with the head
/// anchored at `per_known_count` when that total is attainable; otherwise
/// the total is anchored and the decay fixed at 0.9.
pub fn imbalance_profile(
    rho: f64,
    profile: Profile,
    num_known: usize,
    num_unknown: usize,
    per_known_count: usize,
) -> Result<Vec<usize>, DataError> {
    if num_known < 1 || num_unknown < 1 {
        return Err(DataError::InvalidSpec(
            "need at least one known and one unknown class".into(),
        ));
    }
    if !(rho > 0.0) {
        return Err(DataError::InvalidSpec("rho must be positive".into()));
    }
    if per_known_count < 2 {
        return Err(DataError::InfeasibleProfile(format!(
            "per-known-class count {per_known_count} rounds below 2"
        )));
    }
    let known_total = (num_known * per_known_count) as f64;
    let target = known_total / rho;
    let mut counts = vec![per_known_count; num_known];
    match profile {
        Profile::Step => {
            let each = (target / num_unknown as f64).round();
            if each < 2.0 {
                return Err(DataError::InfeasibleProfile(format!(
                    "step profile gives {each} samples per unknown class"
                )));
            }
            counts.extend(std::iter::repeat(each as usize).take(num_unknown));
        }
        Profile::Exponential => {
            let head = per_known_count as f64;
            let unknown = if target >= head - 0.5 && target <= head * num_unknown as f64 + 0.5 {
                // Head anchored at per_known_count; solve the decay.
                let g = solve_geometric_decay(head, num_unknown, target);
                geometric_counts(head, g, num_unknown, target)
            } else {
                // Head anchoring cannot reach the total; anchor the total
                // with a fixed decay instead.
                let g = 0.9;
                let denom = geometric_sum(g, num_unknown);
                geometric_counts(target / denom, g, num_unknown, target)
            };
            let head_count = unknown.iter().copied().max().unwrap_or(0);
            if head_count < 2 {
                return Err(DataError::InfeasibleProfile(
                    "exponential profile collapses below 2 samples".into(),
                ));
            }
            counts.extend(unknown);
        }
    }
    Ok(counts)
}

fn geometric_sum(g: f64, n: usize) -> f64 {
    let mut sum = 0.0;
    let mut term = 1.0;
    for _ in 0..n {
        sum += term;
        term *= g;
    }
    sum
}

/// Bisection for `g in [0, 1]` with `head * sum_j g^j = target`; the sum is
/// monotone increasing in `g`.
fn solve_geometric_decay(head: f64, n: usize, target: f64) -> f64 {
    let mut lo = 0.0f64;
    let mut hi = 1.0f64;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if head * geometric_sum(mid, n) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Rounds `a * g^j` to integers and nudges entries (largest first) until
/// they sum to `round(target)`.
fn geometric_counts(a: f64, g: f64, n: usize, target: f64) -> Vec<usize> {
    let mut counts: Vec<i64> = Vec::with_capacity(n);
    let mut term = a;
    for _ in 0..n {
        counts.push(term.round() as i64);
        term *= g;
    }
    let want = target.round() as i64;
    let mut have: i64 = counts.iter().sum();
    let mut j = 0usize;
    while have != want {
        let idx = j % n;
        if have < want {
            counts[idx] += 1;
            have += 1;
        } else if counts[idx] > 0 {
            counts[idx] -= 1;
            have -= 1;
        }
        j += 1;
    }
    counts.into_iter().map(|c| c.max(0) as usize).collect()
}

/// Generates the synthetic dataset described by `spec`. Deterministic for
/// a fixed spec, including the seed.
pub fn generate(spec: &SyntheticSpec) -> Result<Dataset, DataError> {
    spec.validate()?;
    let counts = imbalance_profile(
        spec.rho,
        spec.profile,
        spec.num_known,
        spec.num_unknown,
        spec.per_known_count,
    )?;
    let c = spec.num_classes();
    let d = spec.input_dim;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut normal = || -> f64 { StandardNormal.sample(&mut rng) };
    let means = Array2::from_shape_fn((c, d), |_| normal() * spec.mean_scale);

    let labeled_per_known = spec.labeled_per_known();
    let total = spec.num_known * labeled_per_known + counts.iter().sum::<usize>();
    let mut features = Array2::<f32>::zeros((total, d));
    let mut labels = Vec::with_capacity(total);
    let mut is_labeled = Vec::with_capacity(total);
    let mut row = 0usize;
    let emit = |class: usize,
                    labeled: bool,
                    rng: &mut ChaCha8Rng,
                    features: &mut Array2<f32>,
                    labels: &mut Vec<usize>,
                    is_labeled: &mut Vec<bool>,
                    row: &mut usize| {
        for j in 0..d {
            let noise: f64 = StandardNormal.sample(rng);
            features[[*row, j]] = (means[[class, j]] + spec.cluster_spread * noise) as f32;
        }
        labels.push(class);
        is_labeled.push(labeled);
        *row += 1;
    };
    for class in 0..spec.num_known {
        for _ in 0..labeled_per_known {
            emit(class, true, &mut rng, &mut features, &mut labels, &mut is_labeled, &mut row);
        }
    }
    for (class, &count) in counts.iter().enumerate() {
        for _ in 0..count {
            emit(class, false, &mut rng, &mut features, &mut labels, &mut is_labeled, &mut row);
        }
    }
    let mut class_counts = vec![0usize; c];
    for &l in &labels {
        class_counts[l] += 1;
    }
    Ok(Dataset {
        features,
        labels,
        is_labeled,
        known_classes: (0..spec.num_known).collect(),
        spec: spec.clone(),
        class_counts,
    })
}

/// Adds seeded isotropic Gaussian noise of scale `sigma_aug`.
pub fn augment<F: Real>(features: &Array2<F>, sigma_aug: F, seed: u64) -> Array2<F>
where
    StandardNormal: Distribution<F>,
{
    if sigma_aug == F::zero() {
        return features.clone();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array2::from_shape_fn(features.raw_dim(), |idx| {
        let noise: F = StandardNormal.sample(&mut rng);
        features[idx] + sigma_aug * noise
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct DatasetMeta {
    spec: SyntheticSpec,
    num_samples: usize,
    num_classes: usize,
    input_dim: usize,
    class_counts: Vec<usize>,
    known_classes: Vec<usize>,
    /// SHA-256 over features.f32, labels.i32, labeled.u8 in that order.
    digest: String,
}

fn payload_bytes(dataset: &Dataset) -> (Vec<u8>, Vec<u8>, Vec<u8>) {
    let mut feat = Vec::with_capacity(dataset.features.len() * 4);
    for &x in dataset.features.iter() {
        feat.extend_from_slice(&x.to_le_bytes());
    }
    let mut lab = Vec::with_capacity(dataset.labels.len() * 4);
    for &l in &dataset.labels {
        lab.extend_from_slice(&(l as i32).to_le_bytes());
    }
    let mask: Vec<u8> = dataset.is_labeled.iter().map(|&b| b as u8).collect();
    (feat, lab, mask)
}

fn hex_digest(parts: &[&[u8]]) -> String {
    let mut hasher = Sha256::new();
    for p in parts {
        hasher.update(p);
    }
    let mut out = String::new();
    for b in hasher.finalize() {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

/// Writes the dataset directory format.
pub fn save(dataset: &Dataset, dir: &Path) -> Result<(), DataError> {
    std::fs::create_dir_all(dir)?;
    let (feat, lab, mask) = payload_bytes(dataset);
    let digest = hex_digest(&[&feat, &lab, &mask]);
    let meta = DatasetMeta {
        spec: dataset.spec.clone(),
        num_samples: dataset.num_samples(),
        num_classes: dataset.num_classes(),
        input_dim: dataset.input_dim(),
        class_counts: dataset.class_counts.clone(),
        known_classes: dataset.known_classes.iter().copied().collect(),
        digest,
    };
    let meta_json = serde_json::to_vec_pretty(&meta)
        .map_err(|e| DataError::CorruptFile(e.to_string()))?;
    std::fs::write(dir.join("meta.json"), meta_json)?;
    std::fs::write(dir.join("features.f32"), feat)?;
    std::fs::write(dir.join("labels.i32"), lab)?;
    std::fs::write(dir.join("labeled.u8"), mask)?;
    Ok(())
}

/// Reads a dataset directory, verifying sizes and the payload digest.
pub fn load(dir: &Path) -> Result<Dataset, DataError> {
    let meta_bytes = std::fs::read(dir.join("meta.json"))
        .map_err(|e| DataError::CorruptFile(format!("meta.json: {e}")))?;
    let meta: DatasetMeta = serde_json::from_slice(&meta_bytes)
        .map_err(|e| DataError::CorruptFile(format!("meta.json: {e}")))?;
    let feat = std::fs::read(dir.join("features.f32"))?;
    let lab = std::fs::read(dir.join("labels.i32"))?;
    let mask = std::fs::read(dir.join("labeled.u8"))?;
    let n = meta.num_samples;
    let d = meta.input_dim;
    if feat.len() != n * d * 4 {
        return Err(DataError::CorruptFile(format!(
            "features.f32 holds {} bytes, expected {}",
            feat.len(),
            n * d * 4
        )));
    }
    if lab.len() != n * 4 || mask.len() != n {
        return Err(DataError::CorruptFile(
            "labels.i32 or labeled.u8 is truncated".into(),
        ));
    }
    let digest = hex_digest(&[&feat, &lab, &mask]);
    if digest != meta.digest {
        return Err(DataError::CorruptFile(format!(
            "payload digest {digest} does not match recorded {}",
            meta.digest
        )));
    }
    let features = Array2::from_shape_vec(
        (n, d),
        feat.chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect(),
    )
    .map_err(|e| DataError::CorruptFile(e.to_string()))?;
    let labels: Vec<usize> = lab
        .chunks_exact(4)
        .map(|c| i32::from_le_bytes([c[0], c[1], c[2], c[3]]) as usize)
        .collect();
    let is_labeled: Vec<bool> = mask.into_iter().map(|b| b != 0).collect();
    Ok(Dataset {
        features,
        labels,
        is_labeled,
        known_classes: meta.known_classes.into_iter().collect(),
        spec: meta.spec,
        class_counts: meta.class_counts,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(rho: f64, profile: Profile) -> SyntheticSpec {
        SyntheticSpec {
            num_known: 5,
            num_unknown: 5,
            input_dim: 16,
            cluster_spread: 0.5,
            mean_scale: 3.0,
            rho,
            profile,
            per_known_count: 100,
            labeled_fraction: 0.5,
            seed: 42,
        }
    }

    #[test]
    fn step_profile_balanced_and_skewed() {
        let counts = imbalance_profile(1.0, Profile::Step, 5, 5, 100).unwrap();
        assert!(counts.iter().all(|&c| c == 100));
        let counts = imbalance_profile(5.0, Profile::Step, 5, 5, 100).unwrap();
        assert_eq!(&counts[..5], &[100; 5]);
        assert_eq!(&counts[5..], &[20; 5]);
    }

    #[test]
    fn exponential_head_anchored_hits_ratio() {
        // rho = 5 on a 5/5 split: unknown total 100 with head 100, which
        // forces the remaining counts to zero.
        let counts = imbalance_profile(5.0, Profile::Exponential, 5, 5, 100).unwrap();
        let known: usize = counts[..5].iter().sum();
        let unknown: usize = counts[5..].iter().sum();
        assert_eq!(counts[5], 100);
        assert_eq!(unknown, 100);
        assert!((known as f64 / unknown as f64 - 5.0).abs() < 1e-9);
    }

    #[test]
    fn exponential_falls_back_to_total_anchor() {
        // rho = 10: head anchoring cannot reach a total of 50.
        let counts = imbalance_profile(10.0, Profile::Exponential, 5, 5, 100).unwrap();
        let unknown: usize = counts[5..].iter().sum();
        assert_eq!(unknown, 50);
        assert!(counts[5..].windows(2).all(|w| w[0] >= w[1]));
        assert!(counts[5..].iter().all(|&c| c >= 2));
        // rho = 0.5: unknown total 1000 exceeds head-anchored reach.
        let counts = imbalance_profile(0.5, Profile::Exponential, 5, 5, 100).unwrap();
        let unknown: usize = counts[5..].iter().sum();
        assert_eq!(unknown, 1000);
    }

    #[test]
    fn aggregate_ratio_holds_for_paper_rhos() {
        for rho in [0.5, 1.0, 5.0, 10.0] {
            for profile in [Profile::Step, Profile::Exponential] {
                let counts = imbalance_profile(rho, profile, 5, 5, 100).unwrap();
                let known: f64 = counts[..5].iter().sum::<usize>() as f64;
                let unknown: f64 = counts[5..].iter().sum::<usize>() as f64;
                let total = known + unknown;
                let slack = 10.0 / total; // C / total relative rounding slack
                assert!(
                    ((known / unknown - rho) / rho).abs() <= slack,
                    "rho {rho} {profile:?}: got {}",
                    known / unknown
                );
            }
        }
    }

    #[test]
    fn infeasible_step_profile_errors() {
        // One known class with 4 samples at rho=4 over 2 unknown classes
        // leaves 0.5 samples per unknown class.
        let err = imbalance_profile(4.0, Profile::Step, 1, 2, 4).unwrap_err();
        assert!(matches!(err, DataError::InfeasibleProfile(_)));
    }

    #[test]
    fn zero_spread_collapses_to_means() {
        let mut s = spec(1.0, Profile::Step);
        s.cluster_spread = 0.0;
        s.per_known_count = 3;
        let ds = generate(&s).unwrap();
        for (i, &label) in ds.labels.iter().enumerate() {
            for (j, &other) in ds.labels.iter().enumerate().skip(i + 1) {
                if label == other {
                    assert_eq!(ds.features.row(i), ds.features.row(j));
                }
            }
        }
    }

    #[test]
    fn balanced_step_counts_are_equal() {
        let ds = generate(&spec(1.0, Profile::Step)).unwrap();
        let counts = ds.unlabeled_class_counts();
        assert!(counts.iter().all(|&c| c == 100));
    }

    #[test]
    fn labeled_rows_only_carry_known_classes() {
        let ds = generate(&spec(5.0, Profile::Exponential)).unwrap();
        for (i, &labeled) in ds.is_labeled.iter().enumerate() {
            if labeled {
                assert!(ds.known_classes.contains(&ds.labels[i]));
            }
        }
        // 50% labeled fraction: labeled pool equals per-known count.
        let labeled = ds.labeled_indices().len();
        assert_eq!(labeled, 5 * 100);
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate(&spec(5.0, Profile::Step)).unwrap();
        let b = generate(&spec(5.0, Profile::Step)).unwrap();
        assert_eq!(a.features, b.features);
        assert_eq!(a.labels, b.labels);
    }

    #[test]
    fn augment_zero_sigma_is_identity_and_seeded() {
        let x = Array2::<f64>::from_shape_fn((4, 3), |(i, j)| (i * 3 + j) as f64);
        let same = augment(&x, 0.0, 9);
        assert_eq!(x, same);
        let a = augment(&x, 0.5, 9);
        let b = augment(&x, 0.5, 9);
        assert_eq!(a, b);
        let c = augment(&x, 0.5, 10);
        assert_ne!(a, c);
    }

    #[test]
    fn save_load_round_trips_bit_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ds");
        let ds = generate(&spec(5.0, Profile::Step)).unwrap();
        save(&ds, &path).unwrap();
        let loaded = load(&path).unwrap();
        assert_eq!(ds.features, loaded.features);
        assert_eq!(ds.labels, loaded.labels);
        assert_eq!(ds.is_labeled, loaded.is_labeled);
        assert_eq!(ds.known_classes, loaded.known_classes);
        assert_eq!(ds.class_counts, loaded.class_counts);
        // Saving twice produces identical bytes.
        let path2 = dir.path().join("ds2");
        save(&loaded, &path2).unwrap();
        assert_eq!(
            std::fs::read(path.join("features.f32")).unwrap(),
            std::fs::read(path2.join("features.f32")).unwrap()
        );
        assert_eq!(
            std::fs::read(path.join("meta.json")).unwrap(),
            std::fs::read(path2.join("meta.json")).unwrap()
        );
    }

    #[test]
    fn truncated_or_tampered_files_are_corrupt() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ds");
        let mut s = spec(1.0, Profile::Step);
        s.per_known_count = 4;
        let ds = generate(&s).unwrap();
        save(&ds, &path).unwrap();

        let feat_path = path.join("features.f32");
        let bytes = std::fs::read(&feat_path).unwrap();
        std::fs::write(&feat_path, &bytes[..bytes.len() - 4]).unwrap();
        assert!(matches!(load(&path), Err(DataError::CorruptFile(_))));

        // Restore the length but flip a byte: digest mismatch.
        let mut tampered = bytes.clone();
        tampered[0] ^= 0xff;
        std::fs::write(&feat_path, tampered).unwrap();
        assert!(matches!(load(&path), Err(DataError::CorruptFile(_))));
    }
}
