//! Dense tensors with reverse-mode automatic differentiation, sized for
//! desk-scale models.
//!
//! Operations are recorded on a [`Tape`] as they execute; [`Tape::backward`]
//! replays them in reverse. Parameters live in a [`ParamStore`] as `f64`
//! master copies and are bound onto a tape of either precision.

pub mod checkpoint;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod nn;
mod ops;
pub mod params;
pub mod scalar;
pub mod tape;
pub mod tensor;

pub use error::{NeuralError, Result};
pub use graph::{GradGraph, NamedTensors, Program};
pub use params::{Param, ParamStore};
pub use scalar::{DType, Precision, Scalar};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
