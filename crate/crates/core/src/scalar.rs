//! Scalar abstraction for the numeric core.
//!
//! The tensor engine, optimizer, and quantizer kernels are generic over
//! [`Scalar`] so they run at f32 or f64. Concrete aliases at the crate root
//! pin the rest of the library to f64.

use num_traits::{Float, FromPrimitive, NumAssignOps, ToPrimitive};
use std::fmt::{Debug, Display};
use std::iter::Sum;

/// Floating-point element type usable by the tensor engine.
pub trait Scalar:
    Float + NumAssignOps + FromPrimitive + ToPrimitive + Sum + Debug + Display + Send + Sync + 'static
{
    /// Lossless-enough conversion from f64 for literals and hyperparameters.
    fn from_f64_lit(v: f64) -> Self {
        Self::from_f64(v).expect("literal conversion")
    }

    /// Widening conversion used by serialization and reporting.
    fn to_f64_lit(self) -> f64 {
        self.to_f64().expect("f64 conversion")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
