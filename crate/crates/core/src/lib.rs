//! Optimal-transport EM for category discovery on imbalanced data.
//!
//! The library alternates two steps over an unlabeled pool that mixes known
//! and never-seen classes:
//!
//! * **E-step** — pseudo-labels are the entropy-regularized optimal
//!   transport plan between classifier predictions and an estimated class
//!   prior, solved by Sinkhorn scaling ([`ot`]).
//! * **M-step** — a small unit-norm encoder is trained by SGD on a weighted
//!   sum of instance-contrastive, supervised-contrastive, prototype, and
//!   KL-prior losses with analytic gradients ([`losses`], [`encoder`]).
//!
//! Between epochs the class prior and the per-class prototypes evolve by
//! moving averages ([`priors`]). [`data`] generates synthetic imbalanced
//! Gaussian-mixture benchmarks, [`eval`] scores predictions with
//! Hungarian-matched accuracies, and [`trainer`] ties the loop together.
//!
//! All numeric code is generic over the [`Real`] scalar; the pipeline runs
//! at [`Scalar`] (`f64`) while the on-disk formats store `f32`.

pub mod data;
pub mod encoder;
pub mod eval;
pub mod losses;
pub mod ot;
pub mod priors;
pub mod scalar;
pub mod trainer;

pub use scalar::Real;

/// Scalar used by the training pipeline and the CLI.
pub type Scalar = f64;

/// Convenience aliases for the two supported precisions.
pub type TransportProblem32 = ot::TransportProblem<f32>;
pub type TransportProblem64 = ot::TransportProblem<f64>;
pub type TransportPlan32 = ot::TransportPlan<f32>;
pub type TransportPlan64 = ot::TransportPlan<f64>;
pub type EncoderParams32 = encoder::EncoderParams<f32>;
pub type EncoderParams64 = encoder::EncoderParams<f64>;
