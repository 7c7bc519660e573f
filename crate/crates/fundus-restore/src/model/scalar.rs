//! Floating-point abstraction for the network.
//!
//! Production training and checkpoints run in f32; the finite-difference
//! gradient check instantiates the same code at f64, where central
//! differences are accurate enough to verify the analytic gradients to
//! three decimal places.

use ndarray::LinalgScalar;
use num_traits::{Float, FromPrimitive, NumAssign};

pub trait Scalar:
    Float + NumAssign + FromPrimitive + LinalgScalar + Send + Sync + std::fmt::Debug + 'static
{
    fn from_f64_exact(v: f64) -> Self;
    fn to_f64_exact(self) -> f64;
}

impl Scalar for f32 {
    fn from_f64_exact(v: f64) -> Self {
        v as f32
    }
    fn to_f64_exact(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn from_f64_exact(v: f64) -> Self {
        v
    }
    fn to_f64_exact(self) -> f64 {
        self
    }
}
