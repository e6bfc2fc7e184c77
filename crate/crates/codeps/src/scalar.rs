//! Scalar abstraction: f32 or f64.

use num_traits::{Float, FromPrimitive, NumAssignOps};
use std::fmt::{Debug, Display};
use std::iter::Sum;

/// Floating-point scalar the numeric core is generic over.
pub trait Real:
    Float + FromPrimitive + NumAssignOps + Sum + Debug + Display + Default + Send + Sync + 'static
{
    /// Shorthand for converting an `f64` constant.
    fn c(v: f64) -> Self {
        Self::from_f64(v).expect("constant conversion")
    }

    /// Lossy conversion to `f64` for reporting and serialization.
    fn as_f64(self) -> f64 {
        self.to_f64().expect("finite scalar")
    }

    fn as_f32(self) -> f32 {
        self.to_f32().expect("finite scalar")
    }

    fn from_usize_c(v: usize) -> Self {
        Self::from_usize(v).expect("usize conversion")
    }
}

impl Real for f32 {}
impl Real for f64 {}
