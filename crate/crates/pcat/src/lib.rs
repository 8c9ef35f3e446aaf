//! Hierarchical point-cloud attention, from scratch.
//!
//! The pipeline abstracts a point cloud into multi-scale tokens (one sorted
//! ball query per centroid, sliced at increasing neighbor counts), then
//! alternates local self-attention over each token's nearest neighbors with
//! global cross-attention from the tokens to the lifted raw points, reducing
//! the token count stage by stage. Classification pools the final tokens;
//! segmentation interpolates them back to full resolution with
//! inverse-distance weights.
//!
//! Everything numeric is generic over the [`Float`] scalar (`f32` or `f64`);
//! concrete aliases for the common types live at the crate root. Gradient
//! checks run at `f64`, training usually at `f32`.

pub mod attention;
pub mod autodiff;
pub mod config;
pub mod data;
pub mod error;
pub mod float;
pub mod harness;
pub mod network;
pub mod spatial;
pub mod tensor;
pub mod tokenizer;

pub use error::{Error, Result};
pub use float::Float;

/// `f32` aliases (training precision).
pub type Tensor32 = tensor::Tensor<f32>;
pub type Node32 = autodiff::Node<f32>;
pub type PointCloud32 = spatial::PointCloud<f32>;
pub type TokenSet32 = tokenizer::TokenSet<f32>;
pub type Model32 = network::Model<f32>;
pub type ModelConfig32 = network::ModelConfig<f32>;

/// `f64` aliases (verification precision).
pub type Tensor64 = tensor::Tensor<f64>;
pub type Node64 = autodiff::Node<f64>;
pub type PointCloud64 = spatial::PointCloud<f64>;
pub type TokenSet64 = tokenizer::TokenSet<f64>;
pub type Model64 = network::Model<f64>;
pub type ModelConfig64 = network::ModelConfig<f64>;
