//! Numeric abstraction shared by every algorithm in the crate.
//!
//! Sparse collectives only need addition, magnitude comparison and division
//! by small integers (residual weights), so the algorithms are written once
//! against [`Scalar`] and instantiated with `f64` for training runs and with
//! an exact rational type for conservation audits.

use std::fmt::Debug;

use num_rational::Ratio;
use num_traits::{FromPrimitive, Signed, ToPrimitive};

/// A value that can travel through the sparse collectives.
pub trait Scalar:
    Copy + Debug + PartialOrd + Signed + FromPrimitive + ToPrimitive + Send + Sync + 'static
{
    /// Magnitude used for top-k ranking.
    #[inline]
    fn magnitude(self) -> Self {
        self.abs()
    }

    /// `self / n` for a positive integer `n`.
    #[inline]
    fn div_count(self, n: usize) -> Self {
        debug_assert!(n > 0);
        if n == 1 {
            self
        } else {
            self / Self::from_usize(n).expect("count must be representable")
        }
    }

    /// Lossy view used for reporting.
    #[inline]
    fn to_real(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
impl Scalar for Ratio<i64> {}
impl Scalar for Ratio<i128> {}
