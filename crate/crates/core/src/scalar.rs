//! Scalar abstraction for the numeric core.
//!
//! Everything numeric in this crate is generic over [`Scalar`], which is
//! implemented for `f32` and `f64`. The crate-root aliases pin `f64` as the
//! working precision; `f32` exists to keep the kernels honest about not
//! assuming a concrete float type.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, NumCast};

/// Floating-point scalar usable by tensors, geometry, and the training loop.
pub trait Scalar:
    Float
    + FromPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + 'static
{
    /// Converts an `f64` constant into this scalar type (rounding once for `f32`).
    #[inline]
    fn from_f(v: f64) -> Self {
        <Self as NumCast>::from(v).expect("finite f64 converts to any float scalar")
    }

    /// Widens to `f64`. Exact for both supported types.
    #[inline]
    fn to_f(self) -> f64 {
        num_traits::ToPrimitive::to_f64(&self).expect("float scalar widens to f64")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
