//! Reverse-mode automatic differentiation over dense row-major matrices.
//!
//! The engine is generic over [`Scalar`] (`f32` or `f64`): models train in
//! single precision and are gradient-checked in double precision with the
//! same code.

pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod optim;
pub mod params;
pub mod rng;
pub mod scalar;
pub mod spatial;
pub mod tensor;

pub use error::{AutogradError, Result};
pub use graph::{AttentionSpec, Gradients, Graph, Var};
pub use optim::{AdamW, CosineSchedule};
pub use params::{GradStore, ParamStore};
pub use scalar::{lit, Scalar};
pub use spatial::SparseMap;
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type ParamStore32 = ParamStore<f32>;
pub type ParamStore64 = ParamStore<f64>;
