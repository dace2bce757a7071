use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FloatConst};
use rustfft::FftNum;

/// Real scalar the whole crate is generic over. Implemented for `f32` and `f64`.
pub trait Scalar:
    Float + FloatConst + FftNum + Sum + Default + Send + Sync + Debug + Display + 'static
{
}

impl<T> Scalar for T where
    T: Float + FloatConst + FftNum + Sum + Default + Send + Sync + Debug + Display + 'static
{
}

/// Converts an `f64` literal into the working scalar.
#[inline]
pub fn lit<T: Scalar>(x: f64) -> T {
    T::from(x).expect("literal representable in scalar type")
}

#[inline]
pub fn two_pi<T: Scalar>() -> T {
    T::TAU()
}

/// Converts a working scalar to `f64` for reporting.
#[inline]
pub fn to_f64<T: Scalar>(x: T) -> f64 {
    x.to_f64().unwrap_or(f64::NAN)
}

/// Machine epsilon of the working scalar, used to scale tolerances in f32 builds.
#[inline]
pub fn eps<T: Scalar>() -> T {
    T::epsilon()
}

/// Euclidean remainder in `[0, m)` for `m > 0` (up to rounding at the upper end).
#[inline]
pub fn rem_euclid<T: Scalar>(x: T, m: T) -> T {
    let r = x % m;
    if r < T::zero() {
        r + m
    } else {
        r
    }
}
