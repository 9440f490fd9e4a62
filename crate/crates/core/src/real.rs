use std::fmt::{Debug, Display};
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::Float;

/// Scalar type for parameters and activations.
///
/// Models are stored as `f32`; the same code paths run in `f64` for gradient
/// checking. Dot products always accumulate in `f64`.
pub trait Real:
    Float + Default + Debug + Display + AddAssign + SubAssign + MulAssign + Send + Sync + 'static
{
    fn to_acc(self) -> f64;
    fn from_acc(v: f64) -> Self;
}

impl Real for f32 {
    #[inline]
    fn to_acc(self) -> f64 {
        self as f64
    }

    #[inline]
    fn from_acc(v: f64) -> Self {
        v as f32
    }
}

impl Real for f64 {
    #[inline]
    fn to_acc(self) -> f64 {
        self
    }

    #[inline]
    fn from_acc(v: f64) -> Self {
        v
    }
}
