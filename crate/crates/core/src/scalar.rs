//! Scalar abstraction for the numeric core: f32 or f64.

use std::fmt::{Debug, Display};

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating-point scalar the tensor/autodiff core is generic over.
///
/// The training pipeline itself is pinned to `f64` (see the aliases at the
/// crate root); `f32` exists for the generic core and its tests.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Debug + Display + Default + Send + Sync + 'static
{
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Converts an `f64` constant into the scalar type.
#[inline]
pub fn sc<S: Scalar>(v: f64) -> S {
    S::from_f64(v).expect("f64 constant must convert into the scalar type")
}
