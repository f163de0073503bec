//! Scalar abstraction shared by the matrix kernel and the quantum layer.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Real floating-point type the numerical core is generic over (`f32` or `f64`).
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + Debug
    + Display
    + Default
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Send
    + Sync
    + 'static
{
    /// Converts an `f64` literal.
    #[inline]
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("literal representable")
    }

    /// A tolerance of `x`, floored at a small multiple of machine epsilon so
    /// that thresholds written for `f64` stay meaningful in `f32`.
    #[inline]
    fn tol(x: f64) -> Self {
        let floor = Self::epsilon() * Self::lit(1e3);
        Self::lit(x).max(floor)
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().expect("finite float")
    }
}

impl Real for f32 {}
impl Real for f64 {}
