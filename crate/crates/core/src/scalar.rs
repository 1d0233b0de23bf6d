//! Scalar abstraction shared by the rigid-body algebra.
//!
//! The geometric kernels are written against [`Real`]; histogram and entropy
//! code is written against [`num_traits::Float`] directly.

use nalgebra::RealField;

/// Floating point type usable by the geometric kernels: `f32` or `f64`.
pub trait Real: RealField + Copy + Send + Sync + 'static {}

impl Real for f32 {}
impl Real for f64 {}

/// Converts an `f64` literal into the scalar type.
#[inline]
pub fn lit<T: Real>(x: f64) -> T {
    nalgebra::convert(x)
}
