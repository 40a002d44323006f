//! Floating-point abstraction so every op runs in both `f32` and `f64`.
//!
//! Production paths instantiate `f32`; gradient checks instantiate `f64`
//! inside the same build, so there is no feature flag to flip.

use std::fmt::{Debug, Display};
use std::iter::Sum;

pub trait Scalar:
    num_traits::Float + num_traits::FromPrimitive + Debug + Display + Default + Sum + Send + Sync + 'static
{
    const NAME: &'static str;

    fn from_f64c(v: f64) -> Self;
    fn to_f64c(self) -> f64;
    /// Gauss error function (exact-erf GELU needs it).
    fn erf(self) -> Self;
}

impl Scalar for f32 {
    const NAME: &'static str = "f32";

    #[inline]
    fn from_f64c(v: f64) -> Self {
        v as f32
    }

    #[inline]
    fn to_f64c(self) -> f64 {
        self as f64
    }

    #[inline]
    fn erf(self) -> Self {
        libm::erff(self)
    }
}

impl Scalar for f64 {
    const NAME: &'static str = "f64";

    #[inline]
    fn from_f64c(v: f64) -> Self {
        v
    }

    #[inline]
    fn to_f64c(self) -> f64 {
        self
    }

    #[inline]
    fn erf(self) -> Self {
        libm::erf(self)
    }
}

/// Shorthand for lifting an `f64` constant into the working precision.
#[inline]
pub fn sc<T: Scalar>(v: f64) -> T {
    T::from_f64c(v)
}
