//! Scalar abstraction shared by every numerical module.
//!
//! All geometry, waveform and information computations are written against
//! [`Real`], which is implemented for `f32` and `f64`. The crate root exports
//! `f64` aliases for the common case.

use std::fmt::{Debug, Display, LowerExp};

use nalgebra::RealField;
use num_complex::Complex;
use num_traits::{FromPrimitive, ToPrimitive};
use rand::Rng;
use rand_distr::StandardNormal;

/// Floating point type usable throughout the crate.
pub trait Real:
    RealField + Copy + FromPrimitive + ToPrimitive + Debug + Display + LowerExp + Send + Sync + 'static
{
    /// Complementary error function.
    fn erfc(self) -> Self;

    /// One draw from the standard real normal distribution.
    fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> Self;

    fn infinity() -> Self;
}

impl Real for f64 {
    fn erfc(self) -> Self {
        libm::erfc(self)
    }

    fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> Self {
        rng.sample(StandardNormal)
    }

    fn infinity() -> Self {
        f64::INFINITY
    }
}

impl Real for f32 {
    fn erfc(self) -> Self {
        libm::erfcf(self)
    }

    fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> Self {
        rng.sample(StandardNormal)
    }

    fn infinity() -> Self {
        f32::INFINITY
    }
}

/// Converts an `f64` literal into `T`.
#[inline]
pub fn lit<T: Real>(x: f64) -> T {
    T::from_f64(x).expect("literal representable in scalar type")
}

/// Converts a count into `T`.
#[inline]
pub fn count<T: Real>(n: usize) -> T {
    T::from_usize(n).expect("count representable in scalar type")
}

#[inline]
pub fn to_f64<T: Real>(x: T) -> f64 {
    x.to_f64().unwrap_or(f64::NAN)
}

/// `exp(j * phase)`.
#[inline]
pub fn cis<T: Real>(phase: T) -> Complex<T> {
    Complex::new(phase.cos(), phase.sin())
}

/// Circularly-symmetric complex normal draw with unit total variance
/// (variance 1/2 per real and imaginary part).
pub fn complex_normal<T: Real, R: Rng + ?Sized>(rng: &mut R) -> Complex<T> {
    let half = lit::<T>(0.5).sqrt();
    let re = T::standard_normal(rng);
    let im = T::standard_normal(rng);
    Complex::new(re * half, im * half)
}

/// Speed of light in vacuum, m/s.
pub const SPEED_OF_LIGHT: f64 = 2.997_924_58e8;
