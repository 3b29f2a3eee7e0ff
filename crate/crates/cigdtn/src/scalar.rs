//! Scalar abstraction: the whole numeric stack is generic over f32/f64.
//!
//! Gradient checks and acceptance oracles run at f64; training may run at
//! f32. Checkpoints always store f32 payloads.

use std::fmt::{Debug, Display, LowerExp};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

/// Floating-point scalar usable everywhere in the pipeline.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + NumAssign
    + Sum
    + Display
    + LowerExp
    + Debug
    + Default
    + Send
    + Sync
    + rustfft::FftNum
    + 'static
{
    const TYPE_NAME: &'static str;

    /// Convert an f64 literal. Panics only on values outside the type's
    /// range, which never happens for the constants used here.
    #[inline]
    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("f64 literal not representable")
    }

    #[inline]
    fn of_usize(n: usize) -> Self {
        Self::from_usize(n).expect("usize not representable")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().expect("scalar convertible to f64")
    }
}

impl Scalar for f32 {
    const TYPE_NAME: &'static str = "f32";
}

impl Scalar for f64 {
    const TYPE_NAME: &'static str = "f64";
}
