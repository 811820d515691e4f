//! Scalar abstraction for the numeric kernels.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, NumAssign, NumCast};

/// Floating-point scalar usable by the network, k-NN, and statistics
/// kernels. Implemented by `f32` and `f64`.
pub trait Real: Float + NumAssign + Sum + Debug + Display + Send + Sync + 'static {
    /// Lossy conversion from `f64`, used for constants and RNG draws.
    fn from_f64(value: f64) -> Self {
        <Self as NumCast>::from(value).expect("finite f64 converts to any Real")
    }

    /// Widening conversion to `f64` for reporting and serialization.
    fn to_f64(self) -> f64 {
        <f64 as NumCast>::from(self).expect("Real converts to f64")
    }
}

impl Real for f32 {}

impl Real for f64 {
    fn from_f64(value: f64) -> Self {
        value
    }

    fn to_f64(self) -> f64 {
        self
    }
}
