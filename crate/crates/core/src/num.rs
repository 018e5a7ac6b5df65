//! Scalar abstraction shared by every signal-processing routine.

use std::fmt::{Debug, Display};

use num_complex::Complex;
use num_traits::{Float, FloatConst, FromPrimitive, ToPrimitive};
use rustfft::FftNum;

/// Floating-point scalar the simulator can run on (`f32` or `f64`).
pub trait Real:
    Float + FloatConst + FromPrimitive + ToPrimitive + FftNum + Default + Debug + Display + Send + Sync + 'static
{
}

impl Real for f32 {}
impl Real for f64 {}

/// Converts an `f64` literal or configuration value into `T`.
#[inline]
pub fn lit<T: Real>(x: f64) -> T {
    T::from_f64(x).expect("f64 is representable in every Real type")
}

/// Lossy conversion back to `f64` for bookkeeping and metrics.
#[inline]
pub fn to_f64<T: Real>(x: T) -> f64 {
    x.to_f64().expect("Real values convert to f64")
}

/// `e^{j·theta}`.
#[inline]
pub fn cis<T: Real>(theta: T) -> Complex<T> {
    Complex::new(theta.cos(), theta.sin())
}

/// Reduces an angle to `(-π, π]`.
pub fn wrap_angle<T: Real>(theta: T) -> T {
    let two_pi = T::PI() + T::PI();
    let mut r = theta % two_pi;
    if r <= -T::PI() {
        r = r + two_pi;
    } else if r > T::PI() {
        r = r - two_pi;
    }
    r
}

/// Mean of `|z|²` over a slice; zero for an empty slice.
pub fn mean_power<T: Real>(x: &[Complex<T>]) -> T {
    if x.is_empty() {
        return T::zero();
    }
    let sum = x.iter().fold(T::zero(), |acc, z| acc + z.norm_sqr());
    sum / lit(x.len() as f64)
}

/// `‖est − truth‖² / ‖truth‖²` for real vectors. `None` when the truth has zero energy.
pub fn nmse(est: &[f64], truth: &[f64]) -> Option<f64> {
    assert_eq!(est.len(), truth.len(), "nmse length mismatch");
    let den: f64 = truth.iter().map(|t| t * t).sum();
    if den == 0.0 {
        return None;
    }
    let num: f64 = est.iter().zip(truth).map(|(e, t)| (e - t) * (e - t)).sum();
    Some(num / den)
}
