//! Float abstraction so the whole engine can run at f32 (training, checkpoints)
//! or f64 (finite-difference gradient checks) from one code path.

use num_traits::Float;

/// Scalar type the tensor engine is generic over.
///
/// Conversions go through f64 on purpose: random draws are always made in f64
/// and then narrowed, so f32 and f64 runs consume identical RNG streams.
pub trait Real:
    Float
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + std::iter::Sum
    + std::fmt::Debug
    + std::fmt::Display
    + Send
    + Sync
    + 'static
{
    fn from_f64(x: f64) -> Self;
    fn as_f64(self) -> f64;
    /// Gauss error function, used by the exact geLU.
    fn erf(self) -> Self;
}

impl Real for f32 {
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
    fn erf(self) -> Self {
        libm::erff(self)
    }
}

impl Real for f64 {
    fn from_f64(x: f64) -> Self {
        x
    }
    fn as_f64(self) -> f64 {
        self
    }
    fn erf(self) -> Self {
        libm::erf(self)
    }
}
