//! Dense tensors, forward kernels, a reverse-mode tape and a seeded RNG.
//!
//! Everything numeric in the crate is generic over [`Scalar`] so the same
//! code runs in `f32` for training and evaluation and in `f64` for gradient
//! verification.

pub mod kernels;
mod rng;
pub mod tape;
mod tensor;

pub use rng::Rng;
pub use tape::{CustomOp, Gradients, Graph, Var};
pub use tensor::Tensor;

use std::fmt;

/// Floating-point element type of a [`Tensor`].
pub trait Scalar:
    num_traits::Float + std::iter::Sum + fmt::Debug + fmt::Display + Default + Send + Sync + 'static
{
    fn of(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    #[inline]
    fn of(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    #[inline]
    fn of(v: f64) -> Self {
        v
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}
