//! Sparse speculative-decoding drafters at desk scale.

pub mod bench;
pub mod checkpoint;
pub mod distill;
pub mod error;
pub mod layerprune;
pub mod model;
pub mod pipeline;
pub mod scalar;
pub mod sparsity;
pub mod specdec;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Inference and training run in f32; gradient checks use f64.
pub type Tensor32 = tensor::Tensor<f32>;
pub type Tensor64 = tensor::Tensor<f64>;
pub type Transformer32 = model::Transformer<f32>;
pub type Transformer64 = model::Transformer<f64>;
pub type ModelWeights32 = model::ModelWeights<f32>;
pub type GradTape32 = tensor::GradTape<f32>;
pub type GradTape64 = tensor::GradTape<f64>;
pub type Trainer32 = train::Trainer<f32>;
