use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use ndarray::{LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating-point element type of model tensors. Models run in `f32`;
/// `f64` instantiations back the gradient checks.
pub trait Real:
    Float
    + LinalgScalar
    + ScalarOperand
    + FromPrimitive
    + ToPrimitive
    + Debug
    + Display
    + Default
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Send
    + Sync
    + 'static
{
    fn erf(self) -> Self;

    fn lit(value: f64) -> Self {
        Self::from_f64(value).expect("literal representable")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }

    fn of_f32(value: f32) -> Self;
    fn as_f32(self) -> f32;
}

impl Real for f32 {
    fn erf(self) -> Self {
        libm::erff(self)
    }
    fn of_f32(value: f32) -> Self {
        value
    }
    fn as_f32(self) -> f32 {
        self
    }
}

impl Real for f64 {
    fn erf(self) -> Self {
        libm::erf(self)
    }
    fn of_f32(value: f32) -> Self {
        value as f64
    }
    fn as_f32(self) -> f32 {
        self as f32
    }
}
