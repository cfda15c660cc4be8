//! Scalar abstraction shared by the statistics and the predictor.
//!
//! Everything that is a ratio of integer counts, or that comes out of the
//! coordinate-descent solver, is computed in a generic floating type `F`.
//! `f64` is what the report uses; `f32` works for the same code paths.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};

pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Sum + Debug + Display + Default + Send + Sync + 'static
{
    /// Lossy conversion from a count.
    #[inline]
    fn from_count(n: u64) -> Self {
        Self::from_u64(n).expect("every u64 is representable as a float")
    }

    #[inline]
    fn from_f64_lossy(x: f64) -> Self {
        Self::from_f64(x).unwrap_or_else(Self::nan)
    }

    #[inline]
    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }

    /// `num / den` evaluated in `Self`; zero denominators yield NaN.
    #[inline]
    fn ratio(num: u64, den: u64) -> Self {
        Self::from_count(num) / Self::from_count(den)
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
