use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use ndarray::{LinalgScalar, ScalarOperand};
use num_traits::Float;
use serde::de::DeserializeOwned;
use serde::Serialize;

/// Floating-point element type of the network: `f32` for training runs,
/// `f64` for gradient checks.
pub trait Real:
    Float
    + LinalgScalar
    + ScalarOperand
    + Default
    + Debug
    + Display
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Serialize
    + DeserializeOwned
    + Send
    + Sync
    + 'static
{
    fn of(v: f64) -> Self;

    fn f64(self) -> f64;
}

impl Real for f32 {
    fn of(v: f64) -> Self {
        v as f32
    }

    fn f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    fn of(v: f64) -> Self {
        v
    }

    fn f64(self) -> f64 {
        self
    }
}
