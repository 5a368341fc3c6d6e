//! Minimal reverse-mode differentiable tensor engine.
//!
//! Every layer of the autoencoder lives here: 1-D convolution, batch
//! normalization, dropout, max pooling, dense layers, nearest-neighbor
//! upsampling, plus the Adam optimizer and a finite-difference checking
//! harness.
//!
//! The engine is generic over [`Scalar`]: training runs in `f32`, tests run
//! the same code in `f64` where central finite differences have enough
//! headroom to verify every gradient.

mod adam;
mod graph;
mod gradcheck;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use gradcheck::{grad_check, GradCheckReport};
pub use graph::{BatchStats, Grads, Graph, NodeId, Op};

use std::fmt::{Debug, Display};
use std::iter::Sum;
use thiserror::Error;

/// Floating-point element type of the engine.
pub trait Scalar:
    num_traits::Float
    + num_traits::NumAssignOps
    + Sum
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + 'static
{
    fn from_f64(v: f64) -> Self;
    fn from_f32(v: f32) -> Self;
    fn into_f64(self) -> f64;
}

impl Scalar for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn from_f32(v: f32) -> Self {
        v
    }
    fn into_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn from_f32(v: f32) -> Self {
        v as f64
    }
    fn into_f64(self) -> f64 {
        self
    }
}

/// Forward-pass mode: training updates batch statistics and applies dropout,
/// evaluation uses running statistics and is deterministic.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// A named parameter or buffer.
#[derive(Debug, Clone)]
pub struct Tensor<S> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<S>,
}

impl<S: Scalar> Tensor<S> {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, data: Vec<S>) -> Self {
        let count: usize = shape.iter().product();
        assert_eq!(count, data.len());
        Self {
            name: name.into(),
            shape,
            data,
        }
    }

    pub fn zeros(name: impl Into<String>, shape: Vec<usize>) -> Self {
        let count: usize = shape.iter().product();
        Self::new(name, shape, vec![S::zero(); count])
    }
}

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("max pooling needs an even length, got {0}")]
    OddLength(usize),
    #[error("batch normalization needs more than one value per channel in train mode")]
    DegenerateBatch,
    #[error("non-finite gradient in {0}; step aborted")]
    NonFiniteGradient(String),
    #[error("gradient check failed: {0}")]
    ToleranceExceeded(String),
}
