//! Scalar abstraction shared by all numerical code in the crate.
//!
//! Everything that does arithmetic is generic over [`Real`], which is
//! implemented for `f32` and `f64`. Data ingestion and simulation work in
//! `f64` and convert at the model boundary.

use nalgebra::RealField;
use num_traits::{FromPrimitive, ToPrimitive};
use std::fmt::{Debug, Display};

/// Real scalar usable by the spline, likelihood and estimation code.
pub trait Real:
    RealField + Copy + FromPrimitive + ToPrimitive + Default + Display + Debug + Send + Sync + 'static
{
    /// Converts an `f64` literal into `Self`.
    #[inline]
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("f64 literal representable")
    }

    #[inline]
    fn from_usize_lossy(n: usize) -> Self {
        Self::from_usize(n).expect("usize representable")
    }

    /// Lossless for `f64`, widening for `f32`.
    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().expect("finite conversion to f64")
    }

    /// Largest argument accepted by [`Real::exp_capped`].
    #[inline]
    fn exp_cap() -> Self {
        // exp(88) is close to f32::MAX, exp(700) close to f64::MAX.
        if std::mem::size_of::<Self>() <= 4 {
            Self::lit(80.0)
        } else {
            Self::lit(700.0)
        }
    }

    /// `exp(min(self, cap))` plus whether the cap was hit.
    #[inline]
    fn exp_capped(self) -> (Self, bool) {
        let cap = Self::exp_cap();
        if self > cap {
            (cap.exp(), true)
        } else {
            (self.exp(), false)
        }
    }
}

impl Real for f32 {}
impl Real for f64 {}
