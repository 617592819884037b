//! Scalar abstraction shared by every numeric routine in the crate.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

/// Real scalar used for matrix payloads.
///
/// Statistics (norms, δ, quantiles) are always accumulated in `f64`
/// regardless of the payload type; `Wide` is the type used where an
/// operation must be exact with respect to the payload grid (see
/// [`crate::interp::background`]).
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + NumAssign
    + Default
    + Debug
    + Display
    + Sum
    + Send
    + Sync
    + 'static
{
    /// Type with at least as much precision, used for exact residuals.
    type Wide: Scalar;

    /// Short name written into file headers.
    const NAME: &'static str;

    fn widen(self) -> Self::Wide;

    fn from_f64_lossy(v: f64) -> Self;

    #[inline]
    fn to_f64_lossless(self) -> f64 {
        // f32 -> f64 and f64 -> f64 are both exact.
        self.to_f64().unwrap_or(f64::NAN)
    }

    #[inline]
    fn to_f32_lossy(self) -> f32 {
        self.to_f32().unwrap_or(f32::NAN)
    }
}

impl Scalar for f32 {
    type Wide = f64;
    const NAME: &'static str = "f32";

    #[inline]
    fn widen(self) -> f64 {
        self as f64
    }

    #[inline]
    fn from_f64_lossy(v: f64) -> Self {
        v as f32
    }
}

impl Scalar for f64 {
    type Wide = f64;
    const NAME: &'static str = "f64";

    #[inline]
    fn widen(self) -> f64 {
        self
    }

    #[inline]
    fn from_f64_lossy(v: f64) -> Self {
        v
    }
}
