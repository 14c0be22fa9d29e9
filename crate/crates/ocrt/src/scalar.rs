//! Scalar abstraction for the tensor engine.
//!
//! The numeric core is generic over the float type; the rest of the
//! pipeline uses the `f64` aliases exported from the crate root.

use std::fmt::{Debug, Display};

use num_traits::{Float, NumAssignOps};

pub trait Scalar: Float + NumAssignOps + Debug + Display + Copy + 'static {
    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Scalar for f32 {
    fn from_f64(x: f64) -> f32 {
        x as f32
    }

    fn to_f64(self) -> f64 {
        f64::from(self)
    }
}

impl Scalar for f64 {
    fn from_f64(x: f64) -> f64 {
        x
    }

    fn to_f64(self) -> f64 {
        self
    }
}
