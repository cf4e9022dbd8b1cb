//! Floating point abstraction shared by the drift, scheme, density and
//! analysis modules.
//!
//! Everything that touches a sample path or a density grid is written against
//! [`Scalar`], so the same code runs in `f32` (fast, coarse) and `f64`
//! (reference quality). Verification utilities that need special functions
//! (quadrature, beta function, Gronwall constants) stay in `f64`.

use std::fmt::{Debug, Display, LowerExp};
use std::iter::Sum;

use num_traits::{Float, FloatConst, FromPrimitive, NumAssign, ToPrimitive};

/// Real scalar usable throughout the crate (`f32` or `f64`).
pub trait Scalar:
    Float
    + FloatConst
    + FromPrimitive
    + ToPrimitive
    + NumAssign
    + Sum
    + Debug
    + Display
    + LowerExp
    + Default
    + Send
    + Sync
    + 'static
{
    /// Converts an `f64` literal. Lossy for `f32`, never fails.
    fn lit(v: f64) -> Self;

    /// Converts back to `f64` for reporting and special functions.
    fn as_f64(self) -> f64;

    /// Bit pattern used as an exact hash key (memoized kernel stencils).
    fn key_bits(self) -> u64;

    /// Converts an index or count.
    fn of_usize(n: usize) -> Self {
        Self::lit(n as f64)
    }
}

impl Scalar for f32 {
    fn lit(v: f64) -> Self {
        v as f32
    }

    fn as_f64(self) -> f64 {
        self as f64
    }

    fn key_bits(self) -> u64 {
        // -0.0 and 0.0 must share a key
        if self == 0.0 {
            0
        } else {
            self.to_bits() as u64
        }
    }
}

impl Scalar for f64 {
    fn lit(v: f64) -> Self {
        v
    }

    fn as_f64(self) -> f64 {
        self
    }

    fn key_bits(self) -> u64 {
        if self == 0.0 {
            0
        } else {
            self.to_bits()
        }
    }
}

/// Euclidean norm of a point (exact `|x|` in one dimension).
pub fn norm<T: Scalar>(v: &[T]) -> T {
    if let [x] = v {
        return x.abs();
    }
    v.iter().map(|&x| x * x).sum::<T>().sqrt()
}

/// Squared Euclidean norm of a point.
pub fn norm_sq<T: Scalar>(v: &[T]) -> T {
    v.iter().map(|&x| x * x).sum::<T>()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn signed_zero_shares_key() {
        assert_eq!((-0.0f64).key_bits(), 0.0f64.key_bits());
        assert_eq!((-0.0f32).key_bits(), 0.0f32.key_bits());
        assert_ne!(1.0f64.key_bits(), (-1.0f64).key_bits());
    }

    #[test]
    fn norms() {
        assert_eq!(norm(&[3.0f64, 4.0]), 5.0);
        assert_eq!(norm_sq(&[1.0f32, 2.0]), 5.0);
    }
}
