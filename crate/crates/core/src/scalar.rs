//! Scalar abstraction for the numeric kernels.
//!
//! Everything numeric in the crate is generic over [`Scalar`] so the same
//! code runs in f32 (the stored-artifact precision) and f64 (used where test
//! tolerances need headroom, e.g. finite-difference gradient checks).

use num_traits::{Float, NumAssign};
use std::fmt::{Debug, Display};
use std::iter::Sum;

pub trait Scalar:
    Float + NumAssign + Sum<Self> + Debug + Display + Default + Send + Sync + 'static
{
    /// Lossy conversion from f64; fine for constants and RNG draws.
    fn from_f64(x: f64) -> Self;

    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    fn from_f64(x: f64) -> Self {
        x as f32
    }

    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn from_f64(x: f64) -> Self {
        x
    }

    fn as_f64(self) -> f64 {
        self
    }
}
