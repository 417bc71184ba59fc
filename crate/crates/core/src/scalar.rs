//! Scalar abstraction shared by the numerical kernels.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FloatConst, FromPrimitive, ToPrimitive};

/// Real floating-point scalar: `f32` or `f64`.
pub trait Real:
    Float
    + FloatConst
    + FromPrimitive
    + ToPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + 'static
{
    /// Complementary error function.
    fn erfc(self) -> Self;

    /// Lossless-enough conversion from an `f64` literal or data value.
    #[inline]
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("f64 is representable")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().expect("finite conversion to f64")
    }

    #[inline]
    fn from_usize_(n: usize) -> Self {
        Self::from_usize(n).expect("usize is representable")
    }
}

impl Real for f32 {
    #[inline]
    fn erfc(self) -> Self {
        libm::erfcf(self)
    }
}

impl Real for f64 {
    #[inline]
    fn erfc(self) -> Self {
        libm::erfc(self)
    }
}

/// Standard normal distribution function.
#[inline]
pub fn norm_cdf<T: Real>(x: T) -> T {
    T::lit(0.5) * (-x / T::SQRT_2()).erfc()
}

/// Logistic function, evaluated without overflow for large |x|.
#[inline]
pub fn inv_logit<T: Real>(x: T) -> T {
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

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normal_cdf_reference_points() {
        assert!((norm_cdf(0.0_f64) - 0.5).abs() < 1e-16);
        assert!((norm_cdf(1.959963984540054_f64) - 0.975).abs() < 1e-14);
        assert!((norm_cdf(-1.0_f64) - 0.15865525393145707).abs() < 1e-15);
        assert!((norm_cdf(1.0_f32) - 0.841_344_7).abs() < 1e-6);
    }

    #[test]
    fn inv_logit_is_stable_in_tails() {
        assert_eq!(inv_logit(1000.0_f64), 1.0);
        assert!(inv_logit(-1000.0_f64) >= 0.0);
        assert!((inv_logit(-1.386_f64) - 0.2000471).abs() < 1e-6);
        let p = 0.3_f64;
        assert!((inv_logit(logit(p)) - p).abs() < 1e-15);
    }
}
