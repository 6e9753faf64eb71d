//! Synthetic data, file formats and checkpoints.

pub mod checkpoint;
pub mod image;
pub mod manifest;
pub mod ply;
pub mod synth;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use image::{load_ppm, save_ppm};
pub use manifest::{gen_dataset, gen_sample, gen_samples, load_dataset, DatasetManifest, DatasetSpec, SampleRecord};
pub use ply::{load_ply, save_ply};
pub use synth::{gen_primitive, occlude, render_silhouette, viewpoints, ShapeKind};

use crate::encoders::ImageInput;
use crate::geometry::PointSet;

/// One training example: partial cloud, image and complete ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct CloudSample {
    pub partial: PointSet,
    pub image: ImageInput,
    pub gt: PointSet,
    pub category: String,
    /// Direction of the occluding half-space.
    pub viewpoint: [f64; 3],
    pub image_viewpoint: [f64; 3],
}
