//! Scalar abstraction so the transformer runs in `f32` for training and in
//! `f64` for finite-difference gradient checks.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use ndarray::{LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::format::DType;

pub trait Real:
    LinalgScalar
    + ScalarOperand
    + Float
    + FromPrimitive
    + ToPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    const DTYPE: DType;

    #[inline]
    fn of(x: f64) -> Self {
        <Self as FromPrimitive>::from_f64(x).expect("f64 converts to every Real")
    }

    #[inline]
    fn f64(self) -> f64 {
        ToPrimitive::to_f64(&self).expect("every Real converts to f64")
    }

    /// `exp`, possibly by a faster approximation accurate to the type's precision.
    #[inline]
    fn exp_fast(self) -> Self {
        self.exp()
    }

    #[inline]
    fn tanh_fast(self) -> Self {
        self.tanh()
    }
}

impl Real for f32 {
    const DTYPE: DType = DType::F32;

    /// Cephes-style range reduction and degree-7 polynomial (relative error
    /// below 1e-7). Branch-free so loops over it vectorize.
    #[inline]
    #[allow(clippy::manual_clamp)] // max/min vectorizes; clamp adds a NaN-order check.
    fn exp_fast(self) -> f32 {
        const SHIFT: f32 = 12_582_912.0; // 1.5 * 2^23: adding it rounds to an integer.
        let x = self.max(-87.0).min(88.0);
        let big = x * std::f32::consts::LOG2_E + SHIFT;
        let n = big - SHIFT;
        let r = x - n * 0.693_359_4 - n * -2.121_944_4e-4;
        let p = ((((1.987_569_1e-4 * r + 1.398_199_9e-3) * r + 8.333_452e-3) * r + 4.166_579_6e-2) * r + 0.166_666_65)
            * r
            + 0.5;
        let y = p * r * r + r + 1.0;
        let scale = (big.to_bits().wrapping_sub(0x4B40_0000).wrapping_add(127)) << 23;
        y * f32::from_bits(scale)
    }

    #[inline]
    fn tanh_fast(self) -> f32 {
        1.0 - 2.0 / (1.0 + (2.0 * self).exp_fast())
    }
}

impl Real for f64 {
    const DTYPE: DType = DType::F64;
}

#[cfg(test)]
mod tests {
    use super::Real;

    #[test]
    fn fast_exp_and_tanh_accuracy() {
        let mut worst_exp = 0.0f64;
        let mut worst_tanh = 0.0f64;
        for i in 0..=400_000 {
            let x = -80.0 + i as f32 * 0.0004;
            let e = (x as f64).exp();
            worst_exp = worst_exp.max((x.exp_fast() as f64 - e).abs() / e);
            let y = x * 0.1;
            worst_tanh = worst_tanh.max((y.tanh_fast() as f64 - (y as f64).tanh()).abs());
        }
        assert!(worst_exp < 2e-7, "{worst_exp}");
        assert!(worst_tanh < 3e-7, "{worst_tanh}");
        assert_eq!((-1e30f32).exp_fast(), (-87.0f32).exp_fast());
        assert_eq!(0.3f64.exp_fast(), 0.3f64.exp());
    }
}
