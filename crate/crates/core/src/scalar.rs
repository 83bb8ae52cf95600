//! Scalar abstraction for the differentiable core.
//!
//! Everything numeric (tape, model, optimizer, DTW, DP noise) is generic
//! over [`Scalar`] so the math is independent of float width; the shipped
//! pipeline pins `f64` through the aliases at the crate root.

use num_traits::{Float, FromPrimitive, NumAssignOps};
use std::fmt::{Debug, Display};
use std::iter::Sum;

pub trait Scalar:
    Float + FromPrimitive + NumAssignOps + Sum + Debug + Display + Default + Send + Sync + 'static
{
    fn of(v: f64) -> Self {
        <Self as FromPrimitive>::from_f64(v).expect("finite f64 converts to Scalar")
    }

    fn of_usize(v: usize) -> Self {
        <Self as FromPrimitive>::from_usize(v).expect("usize converts to Scalar")
    }

    fn to_f64(self) -> f64;
}

macro_rules! scalar_impl {
    ($($t:ty)*) => ($(
        impl Scalar for $t {
            fn to_f64(self) -> f64 {
                self as f64
            }
        }
    )*)
}

scalar_impl!(f32 f64);
