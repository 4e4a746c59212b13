//! Scalar abstraction for the numeric core.
//!
//! Everything that is plain real arithmetic (network forward/backward, loss,
//! reward ratios, schedules) is written against [`Scalar`] so it runs at
//! `f32` or `f64`; the crate root pins the aliases used by the pipeline.

use std::fmt;

use num_traits::{Float, NumAssign};

/// Floating-point scalar usable by the network and reward math.
pub trait Scalar: Float + NumAssign + fmt::Debug + fmt::Display + Default + Send + Sync + 'static {}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Converts an `f64` constant into the working scalar type.
///
/// Panics only if the target type cannot represent any finite value of the
/// source, which cannot happen for the `f32`/`f64` instantiations.
#[inline]
pub fn scalar<F: Scalar>(x: f64) -> F {
    F::from(x).expect("f64 constant representable in scalar type")
}

/// Converts a working scalar back to `f64` (for logging and checkpoints).
#[inline]
pub fn to_f64<F: Scalar>(x: F) -> f64 {
    x.to_f64().expect("scalar representable as f64")
}
