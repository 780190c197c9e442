//! Scalar abstraction for the numeric core.
//!
//! The math kernels (group algebra, tensors, losses) are generic over a
//! floating scalar; concrete `f64` aliases live at the crate root. Data
//! files and checkpoints are always 64-bit on disk.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign};

/// Floating scalar usable throughout the numeric core.
pub trait Real:
    Float + FromPrimitive + NumAssign + Sum + Copy + Debug + Display + Send + Sync + 'static
{
    /// Shorthand for lifting an `f64` literal into the scalar type.
    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("literal representable in scalar type")
    }

    fn to_f64_lossy(self) -> f64;
}

impl Real for f32 {
    fn to_f64_lossy(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    fn to_f64_lossy(self) -> f64 {
        self
    }
}
