use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Real scalar the numeric core is written against.
///
/// Implemented for `f32` and `f64`. Privacy arithmetic in the accountant is
/// always carried out in `f64` regardless of the model scalar.
pub trait Scalar:
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
    /// Lossy conversion from `f64`.
    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("f64 representable in scalar type")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("scalar converts to f64")
    }

    /// Tolerance floor for iterative routines at this precision.
    fn tolerance_floor() -> Self {
        Self::epsilon() * Self::of(16.0)
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
