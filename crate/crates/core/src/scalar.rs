//! Floating-point abstraction used throughout the crate.
//!
//! Arrays are generic over [`Scalar`] so gradient checks can run in double
//! precision while training runs in single precision. Reductions always
//! accumulate in `f64` regardless of the storage type; that keeps single
//! precision results stable under summation-order changes (point
//! permutations re-order reduction operands).

use std::fmt::{Debug, Display};
use std::ops::{AddAssign, MulAssign, SubAssign};

/// Element type of all numeric buffers.
pub trait Scalar:
    num_traits::Float
    + num_traits::FromPrimitive
    + num_traits::ToPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// Widen to the `f64` accumulator domain.
    fn acc(self) -> f64;
    /// Round an accumulated value back to storage precision.
    fn from_acc(v: f64) -> Self;
    /// Name used in checkpoints and diagnostics ("f32" or "f64").
    fn dtype_name() -> &'static str;
}

impl Scalar for f32 {
    #[inline(always)]
    fn acc(self) -> f64 {
        self as f64
    }
    #[inline(always)]
    fn from_acc(v: f64) -> Self {
        v as f32
    }
    fn dtype_name() -> &'static str {
        "f32"
    }
}

impl Scalar for f64 {
    #[inline(always)]
    fn acc(self) -> f64 {
        self
    }
    #[inline(always)]
    fn from_acc(v: f64) -> Self {
        v
    }
    fn dtype_name() -> &'static str {
        "f64"
    }
}

/// Deterministic dot product with `f64` accumulation.
#[inline]
pub fn dot_acc<T: Scalar>(a: &[T], b: &[T]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = 0.0f64;
    for (x, y) in a.iter().zip(b.iter()) {
        acc += x.acc() * y.acc();
    }
    acc
}

/// Sum with `f64` accumulation.
#[inline]
pub fn sum_acc<T: Scalar>(a: &[T]) -> f64 {
    let mut acc = 0.0f64;
    for x in a.iter() {
        acc += x.acc();
    }
    acc
}
