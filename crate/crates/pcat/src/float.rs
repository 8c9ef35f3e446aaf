//! Scalar abstraction: every numeric routine in this crate is generic over
//! [`Float`], implemented for `f32` and `f64`.
//!
//! Gradient checks and the acceptance tolerances are stated at `f64`;
//! training may run at `f32` for speed. Checkpoints always store `f32`.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float as NumFloat, FromPrimitive, NumAssignOps};

/// Floating-point scalar: `f32` or `f64`.
pub trait Float:
    NumFloat
    + FromPrimitive
    + NumAssignOps
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// Lossy conversion from `f64`.
    fn of(x: f64) -> Self;

    /// Conversion from `usize` (exact for the sizes this crate handles).
    fn of_usize(n: usize) -> Self;

    /// Widening conversion to `f64`.
    fn as_f64(self) -> f64;
}

impl Float for f32 {
    #[inline]
    fn of(x: f64) -> Self {
        x as f32
    }
    #[inline]
    fn of_usize(n: usize) -> Self {
        n as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        f64::from(self)
    }
}

impl Float for f64 {
    #[inline]
    fn of(x: f64) -> Self {
        x
    }
    #[inline]
    fn of_usize(n: usize) -> Self {
        n as f64
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}
