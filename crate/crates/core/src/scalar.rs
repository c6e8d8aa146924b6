//! Scalar abstraction for the numeric kernels.

use std::fmt::{Debug, Display};

use num_traits::{Float, NumAssign, NumCast};

/// Floating-point element type of models, traces, and scores.
///
/// Implemented for `f32` and `f64`. The shipped pipeline uses `f64`
/// throughout; `f32` exists to keep the kernels honest about genericity.
pub trait Scalar:
    Float + NumAssign + Default + Debug + Display + Send + Sync + 'static
{
    /// Conversion from `f64` for construction constants.
    fn from_f64(x: f64) -> Self {
        <Self as NumCast>::from(x).expect("f64 constant converts to scalar")
    }

    /// Widening conversion used by exports and serialization.
    fn to_f64_value(self) -> f64 {
        self.to_f64().expect("scalar converts to f64")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
