//! Minimal dense-tensor numeric core with reverse-mode automatic
//! differentiation, the layer primitives used by the learned stack, an Adam
//! optimizer and a finite-difference gradient checker.
//!
//! The engine is define-by-run: every op evaluates eagerly and records a
//! node on a tape owned by [`Graph`]. It is generic over the element type;
//! forward passes run in f32, while the gradient checker replays the same
//! computation in f64 (f32 central differences are too noisy at the 1e-4
//! tolerance this crate holds itself to).

mod gradcheck;
mod graph;
mod optim;
mod params;

pub use gradcheck::{check_gradients, GradCheckReport, LayerCheck};
pub use graph::{Graph, Op, TensorId};
pub use optim::{Adam, AdamConfig};
pub use params::{bind_params, BoundParams, ParamSet};

use ndarray::ScalarOperand;

/// Element type the tape can run on: f32 in production, f64 for replay.
pub trait Element:
    num_traits::Float
    + std::ops::AddAssign
    + ndarray::LinalgScalar
    + ScalarOperand
    + std::fmt::Debug
    + std::fmt::Display
    + std::iter::Sum
    + 'static
{
    fn from_f64(v: f64) -> Self;
    fn into_f64(self) -> f64;
    fn from_f32(v: f32) -> Self;
}

impl Element for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn into_f64(self) -> f64 {
        self as f64
    }
    fn from_f32(v: f32) -> Self {
        v
    }
}

impl Element for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn into_f64(self) -> f64 {
        self
    }
    fn from_f32(v: f32) -> Self {
        v as f64
    }
}

#[derive(Debug, thiserror::Error)]
pub enum NnError {
    #[error("shape mismatch in {op}: {details}")]
    ShapeMismatch { op: &'static str, details: String },
    #[error("channel count {channels} not divisible by {groups} groups")]
    BadGroupCount { channels: usize, groups: usize },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("duplicate parameter name: {0}")]
    DuplicateParam(String),
    #[error("missing parameter: {0}")]
    MissingParam(String),
    #[error("missing gradient for parameter: {0}")]
    MissingGradient(String),
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
}
