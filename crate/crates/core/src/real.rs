//! Scalar abstraction shared by every numeric routine in the crate.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FloatConst, FromPrimitive, NumAssign, ToPrimitive};

/// Floating point scalar: `f32` or `f64`.
pub trait Real:
    Float
    + FloatConst
    + FromPrimitive
    + ToPrimitive
    + NumAssign
    + Sum
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + 'static
{
    /// Lossy conversion from an `f64` literal.
    #[inline]
    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("f64 literal representable")
    }

    /// Widening conversion used at I/O boundaries.
    #[inline]
    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }

    /// `ln(1 + e^x)` without overflow.
    #[inline]
    fn softplus(self) -> Self {
        if self > Self::zero() {
            self + (-self).exp().ln_1p()
        } else {
            self.exp().ln_1p()
        }
    }

    /// Logistic CDF `1 / (1 + e^{-x})`.
    #[inline]
    fn sigmoid(self) -> Self {
        if self >= Self::zero() {
            Self::one() / (Self::one() + (-self).exp())
        } else {
            let e = self.exp();
            e / (Self::one() + e)
        }
    }

    /// `ln F(x)` for the logistic CDF.
    #[inline]
    fn log_sigmoid(self) -> Self {
        -(-self).softplus()
    }

    /// Smallest probability allowed inside a logarithm.
    #[inline]
    fn prob_floor() -> Self {
        Self::from_f64(1e-300)
            .filter(|v| *v > Self::zero())
            .unwrap_or_else(Self::min_positive_value)
    }
}

impl Real for f32 {}
impl Real for f64 {}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softplus_is_stable_at_extremes() {
        assert_eq!(1000.0f64.softplus(), 1000.0);
        assert!((-1000.0f64).softplus() >= 0.0);
        assert!(((0.0f64).softplus() - 2.0f64.ln()).abs() < 1e-15);
        assert!(1000.0f32.softplus().is_finite());
    }

    #[test]
    fn sigmoid_and_log_sigmoid_agree() {
        for &x in &[-30.0f64, -2.0, 0.0, 0.5, 7.0, 40.0] {
            assert!((x.sigmoid().ln() - x.log_sigmoid()).abs() < 1e-12);
        }
        assert_eq!(0.0f64.sigmoid(), 0.5);
    }

    #[test]
    fn prob_floor_is_positive_for_both_widths() {
        assert_eq!(f64::prob_floor(), 1e-300);
        assert!(f32::prob_floor() > 0.0);
    }
}
