//! Masked-patch reconstruction combined with pooled contrastive learning over
//! video-frame pairs and augmented images.

pub mod config;
pub mod corpus;
pub mod error;
pub mod evalsuite;
pub mod graph;
pub mod losses;
pub mod network;
pub mod patches;
pub mod pixels;
pub mod rng;
pub mod sampling;
pub mod scalar;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;

/// Single-precision instantiations used by the command-line tool.
pub type Model = network::Model<f32>;
pub type Checkpoint = network::Checkpoint<f32>;
pub type Trainer = trainer::Trainer<f32>;
pub type Graph = graph::Graph<f32>;
pub type Tensor32 = tensor::Tensor<f32>;
