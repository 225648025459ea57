//! Narrow-baseline single-view novel view synthesis.
//!
//! A depth-based forward warp supplies flow and occlusion labels; a network
//! with one shared RGBD encoder, a pose encoder and three independent
//! decoders (flow, mask, inpainting) predicts them, and the target view is
//! composed by grid-sampling the source and blending in the inpainting.
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix the single-precision types used by the tools.

pub mod ablation;
pub mod backend;
pub mod bench;
pub mod checkpoint;
pub mod compositor;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod io;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod scalar;
pub mod teacher;
pub mod training;
pub mod tensor;
pub mod warp;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;

/// Single-precision tensor.
pub type Image = Tensor<f32>;
pub type Frame = warp::RgbdFrame<f32>;
pub type Pose = geometry::Extrinsics<f32>;
pub type Sample = warp::TrainingSample<f32>;
pub type NvsModel = model::Model<f32>;
pub type NvsPrediction = model::Prediction<f32>;
