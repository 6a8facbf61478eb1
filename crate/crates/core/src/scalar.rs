//! Scalar abstraction for the numeric core.
//!
//! Everything numerical in this crate is generic over [`Real`], so the same
//! solver code runs in `f32` or `f64`. The training pipeline uses the
//! [`crate::Scalar`] alias (`f64`); the on-disk formats are fixed at `f32`
//! independently of the in-memory scalar.

use std::fmt;
use std::iter::Sum;

use ndarray::ScalarOperand;
use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

/// Floating-point scalar the numeric core is generic over.
///
/// Blanket-implemented for `f32` and `f64`.
pub trait Real:
    Float
    + NumAssign
    + FromPrimitive
    + ToPrimitive
    + ScalarOperand
    + Sum
    + fmt::Debug
    + fmt::Display
    + Send
    + Sync
    + 'static
{
    /// Conversion from an `f64` constant (tolerances, hyperparameters).
    fn real(x: f64) -> Self {
        Self::from_f64(x).expect("finite f64 constant must convert")
    }

    /// Conversion to `f64` for reporting and logging.
    fn to_real(self) -> f64 {
        self.to_f64().expect("Real converts to f64")
    }
}

impl<T> Real for T where
    T: Float
        + NumAssign
        + FromPrimitive
        + ToPrimitive
        + ScalarOperand
        + Sum
        + fmt::Debug
        + fmt::Display
        + Send
        + Sync
        + 'static
{
}
