//! Dense tensors with reverse-mode differentiation.
//!
//! The engine is deliberately small: rank ≤ 4 tensors, a define-by-run
//! [`Tape`] rebuilt per forward pass, and exactly the operations the
//! forecasting model needs. Everything is generic over [`Scalar`] so
//! training can run in f64 (the default) or f32.

mod adam;
mod check;
mod tensor;
mod tape;

pub use adam::{adam_step, AdamState};
pub use check::{finite_difference_check, DEFAULT_FD_STEP};
pub use tensor::Tensor;
pub use tape::{Tape, TensorId};

/// Element type of tensors: f32 or f64.
pub trait Scalar:
    num_traits::Float
    + num_traits::NumAssign
    + std::fmt::Debug
    + std::fmt::Display
    + Send
    + Sync
    + 'static
{
    fn from_f64(v: f64) -> Self;
    fn into_f64(self) -> f64;
}

impl Scalar for f64 {
    fn from_f64(v: f64) -> f64 {
        v
    }
    fn into_f64(self) -> f64 {
        self
    }
}

impl Scalar for f32 {
    fn from_f64(v: f64) -> f32 {
        v as f32
    }
    fn into_f64(self) -> f64 {
        self as f64
    }
}

/// Numerically stable logistic function.
pub(crate) fn sigmoid_stable<F: Scalar>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}
