//! Toy referring image segmentation with mask-grounded language features,
//! a cross-modal alignment module and a pixel-text alignment loss.
//!
//! The model code is generic over the scalar type; [`Trainer32`] trains in
//! single precision and [`Params64`] stores are used for gradient checks.

pub mod cam;
pub mod checkpoint;
pub mod config;
pub mod datagen;
pub mod encoders;
pub mod error;
pub mod harness;
pub mod losses;
pub mod maskgrounding;
pub mod metrics;
pub mod nn;
pub mod plot;
pub mod segmenter;

pub use error::{MagnetError, Result};
pub use magnet_autograd as autograd;
pub use segmenter::{MagNet, ModelConfig};

pub type Params32 = magnet_autograd::ParamStore<f32>;
pub type Params64 = magnet_autograd::ParamStore<f64>;
pub type Trainer32 = segmenter::Trainer<f32>;
pub type Trainer64 = segmenter::Trainer<f64>;
pub type Batch32 = segmenter::Batch<f32>;
pub type Batch64 = segmenter::Batch<f64>;
