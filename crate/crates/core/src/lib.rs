//! Image-guided point cloud completion.
//!
//! A partial point cloud and a single-view image are encoded separately,
//! fused by dual-channel cross attention into one global vector, decoded
//! into a coarse cloud, and refined by two cascaded transformer upsamplers.
//! Everything runs on the small reverse-mode autodiff engine in
//! [`diffarray`], in 64-bit floating point.

pub mod cli;
pub mod config;
pub mod dataio;
pub mod diffarray;
pub mod encoders;
pub mod error;
pub mod fusion;
pub mod generator;
pub mod geometry;
pub mod metrics;
pub mod model;
pub mod tensor;
pub mod training;
pub mod upsampler;

pub use error::{Error, Result};
pub use tensor::{IndexTensor, Tensor};
