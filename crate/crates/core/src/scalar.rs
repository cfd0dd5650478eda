//! Scalar abstraction shared by every numeric routine in the crate.

use std::fmt::{Debug, Display};

use nalgebra::RealField;
use num_traits::{FloatConst, FromPrimitive, ToPrimitive};

/// Floating point scalar: `f32` or `f64`.
pub trait Real:
    RealField + Copy + FromPrimitive + ToPrimitive + FloatConst + Default + Debug + Display
{
    /// Converts an `f64` literal into this scalar type.
    #[inline]
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("f64 literal representable")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().expect("scalar convertible to f64")
    }

    #[inline]
    fn as_f32(self) -> f32 {
        self.to_f32().expect("scalar convertible to f32")
    }

    #[inline]
    fn of_f32(x: f32) -> Self {
        <Self as FromPrimitive>::from_f32(x).expect("f32 representable")
    }

    #[inline]
    fn of_usize(n: usize) -> Self {
        <Self as FromPrimitive>::from_usize(n).expect("usize representable")
    }

    #[inline]
    fn finite(self) -> bool {
        self.as_f64().is_finite()
    }
}

impl Real for f32 {}
impl Real for f64 {}

/// Max-subtracted softmax.
pub fn softmax<T: Real>(logits: &[T]) -> Vec<T> {
    if logits.is_empty() {
        return Vec::new();
    }
    let max = logits.iter().copied().fold(logits[0], |m, v| m.max(v));
    let exps: Vec<T> = logits.iter().map(|&v| (v - max).exp()).collect();
    let sum = exps.iter().copied().fold(T::zero(), |a, b| a + b);
    exps.into_iter().map(|e| e / sum).collect()
}

/// Softmax of `scores / temperature`.
pub fn softmax_with_temperature<T: Real>(scores: &[T], temperature: T) -> Vec<T> {
    let scaled: Vec<T> = scores.iter().map(|&s| s / temperature).collect();
    softmax(&scaled)
}

#[inline]
pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[inline]
pub fn logit<T: Real>(p: T) -> T {
    (p / (T::one() - p)).ln()
}
