use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use ndarray::{LinalgScalar, ScalarOperand};
use rand::distr::{Distribution, Open01};
use rand::Rng;
use num_traits::Float;
use rand_distr::Normal;

/// Floating-point element type for models and batches.
///
/// Training runs in `f32`; the gradient checks use `f64`.
pub trait Real:
    Float
    + LinalgScalar
    + ScalarOperand
    + AddAssign
    + SubAssign
    + MulAssign
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;

    /// A draw from the open interval (0, 1) at this type's precision.
    fn open_unit<R: Rng + ?Sized>(rng: &mut R) -> Self;

    fn normal<R: Rng + ?Sized>(rng: &mut R, std: f64) -> Self {
        let d = Normal::new(0.0, std).expect("std must be finite and non-negative");
        Self::from_f64(d.sample(rng))
    }
}

impl Real for f32 {
    #[inline]
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self as f64
    }
    #[inline]
    fn open_unit<R: Rng + ?Sized>(rng: &mut R) -> Self {
        Open01.sample(rng)
    }
}

impl Real for f64 {
    #[inline]
    fn from_f64(x: f64) -> Self {
        x
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self
    }
    #[inline]
    fn open_unit<R: Rng + ?Sized>(rng: &mut R) -> Self {
        Open01.sample(rng)
    }
}
