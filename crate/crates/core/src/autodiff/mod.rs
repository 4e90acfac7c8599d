//! Differentiable-computation substrate.
//!
//! A [`Tape`] records operations eagerly (define-by-run) and replays them in
//! reverse to propagate gradients. Training runs in `f32`; the
//! finite-difference harness in [`check`] is normally instantiated with `f64`.

pub mod check;
mod ops;
mod tape;

pub use check::finite_difference_check;
pub use tape::{NodeId, Tape};

use ndarray::NdFloat;
use rand::distr::uniform::SampleUniform;
use thiserror::Error;

/// Element type of tensors: `f32` or `f64`.
pub trait Scalar: NdFloat + SampleUniform {
    /// Raw bit pattern, widened to 64 bits; used for bit-exact comparisons.
    fn bits(self) -> u64;

    fn from_f64(v: f64) -> Self {
        <Self as num_traits::NumCast>::from(v).expect("f64 literal representable")
    }

    fn to_f64(self) -> f64 {
        num_traits::ToPrimitive::to_f64(&self).expect("scalar convertible to f64")
    }
}

impl Scalar for f32 {
    fn bits(self) -> u64 {
        u64::from(self.to_bits())
    }
}

impl Scalar for f64 {
    fn bits(self) -> u64 {
        self.to_bits()
    }
}

#[derive(Debug, Error)]
pub enum AutodiffError {
    #[error("{op}: shape mismatch on {what}: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        op: &'static str,
        what: &'static str,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("{op}: dimension {dim} mismatch: {detail}")]
    DimMismatch {
        op: &'static str,
        dim: usize,
        detail: String,
    },
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("finite-difference check: function is non-deterministic ({detail})")]
    NonDeterministic { detail: String },
    #[error("{op}: {detail}")]
    InvalidArgument { op: &'static str, detail: String },
}
