//! Scalar abstraction shared by every numerical routine.

use std::fmt::{Debug, Display, LowerExp};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FloatConst, FromPrimitive, ToPrimitive};

/// Floating-point type the model can be instantiated with (`f32` or `f64`).
pub trait Real:
    Float
    + FloatConst
    + FromPrimitive
    + ToPrimitive
    + Debug
    + Display
    + LowerExp
    + Default
    + Send
    + Sync
    + 'static
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
{
}

impl<T> Real for T where
    T: Float
        + FloatConst
        + FromPrimitive
        + ToPrimitive
        + Debug
        + Display
        + LowerExp
        + Default
        + Send
        + Sync
        + 'static
        + AddAssign
        + SubAssign
        + MulAssign
        + DivAssign
        + Sum
{
}

/// Converts an `f64` literal into `T`.
#[inline]
pub fn lit<T: Real>(x: f64) -> T {
    T::from_f64(x).expect("f64 literal representable in scalar type")
}

#[inline]
pub fn to_f64<T: Real>(x: T) -> f64 {
    x.to_f64().unwrap_or(f64::NAN)
}

/// 0/0 := 0, otherwise plain division.
#[inline]
pub fn safe_div<T: Real>(num: T, den: T) -> T {
    if den == T::zero() && num == T::zero() {
        T::zero()
    } else {
        num / den
    }
}

/// Standard normal distribution function.
pub fn normal_cdf<T: Real>(y: T) -> T {
    let y = to_f64(y);
    lit(0.5 * libm::erfc(-y / std::f64::consts::SQRT_2))
}

/// Standard normal density.
pub fn normal_pdf<T: Real>(y: T) -> T {
    let y = to_f64(y);
    lit((-0.5 * y * y).exp() / (2.0 * std::f64::consts::PI).sqrt())
}

/// `exp(z)` and `(exp(z) - 1) / z`, the latter equal to 1 at `z = 0`.
pub fn exp_and_phi1<T: Real>(z: T) -> (T, T) {
    let e = z.exp();
    if z.abs() < lit(1e-8) {
        (e, T::one() + z / lit(2.0) + z * z / lit(6.0))
    } else {
        (e, z.exp_m1() / z)
    }
}

/// Central difference step used when a derivative is not supplied analytically.
#[inline]
pub fn fd_step<T: Real>(at: T) -> T {
    lit::<T>(1e-5) * (T::one() + at.abs())
}
