//! Floating point scalar abstraction shared by the numeric kernels.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

/// floating point: f32 or f64
pub trait Real:
    Float + FromPrimitive + ToPrimitive + NumAssign + Sum + Default + Debug + Display + Send + Sync + 'static
{
    /// Name used in file headers.
    const DTYPE: &'static str;

    /// Lossy conversion from an `f64` literal or intermediate.
    fn lit(v: f64) -> Self;

    fn widen(self) -> f64;
}

impl Real for f32 {
    const DTYPE: &'static str = "f32";

    #[inline(always)]
    fn lit(v: f64) -> Self {
        v as f32
    }

    #[inline(always)]
    fn widen(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    const DTYPE: &'static str = "f64";

    #[inline(always)]
    fn lit(v: f64) -> Self {
        v
    }

    #[inline(always)]
    fn widen(self) -> f64 {
        self
    }
}

/// Replace subnormal values by zero. Subnormal operands slow arithmetic
/// down by orders of magnitude on common hardware.
#[inline(always)]
pub fn flush_subnormal<T: Real>(v: T) -> T {
    if v.abs() < T::min_positive_value() {
        T::zero()
    } else {
        v
    }
}

/// Numerically stable logistic function; results below the smallest
/// normal value are flushed to zero.
#[inline]
pub fn sigmoid<T: Real>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else if z < T::min_positive_value().ln() {
        T::zero()
    } else {
        let e = z.exp();
        flush_subnormal(e / (T::one() + e))
    }
}
