//! Dense-CRF semantic segmentation with multi-view Bayesian fusion.
//!
//! A frame's unary label probabilities are refined by mean-field inference in
//! a fully connected CRF with Gaussian edge potentials, lifted into a world
//! frame point cloud through the depth image and camera pose, and fused into a
//! voxel map by a per-voxel recursive Bayesian update.
//!
//! The CRF and filtering code is generic over [`Real`] (`f32` or `f64`); the
//! aliases below fix the scalar for the common cases. Geometry, fusion and
//! metrics work in `f64`.

pub mod crf;
pub mod error;
pub mod filtering;
pub mod fusion;
pub mod metrics;
pub mod pipeline;
pub mod projection;
pub mod raster;
pub mod scalar;

pub use crf::{
    map_labeling, mean_field_backward, mean_field_infer, train_crf_params, LabelImage, IGNORE_LABEL,
};
pub use error::{Error, Result};
pub use filtering::Backend;
pub use fusion::VoxelMap;
pub use metrics::{compute_metrics, evaluate_fused_map, ConfusionMatrix, Metrics};
pub use pipeline::{run_frame, run_pipeline, PipelineConfig};
pub use projection::{CameraIntrinsics, Pose, SemanticPointCloud};
pub use raster::{DepthImage, RgbImage};
pub use scalar::Real;

pub type LabelDistributionImage64 = crf::LabelDistributionImage<f64>;
pub type LabelDistributionImage32 = crf::LabelDistributionImage<f32>;
pub type UnaryField64 = crf::UnaryField<f64>;
pub type UnaryField32 = crf::UnaryField<f32>;
pub type CrfParams64 = crf::CrfParams<f64>;
pub type CrfParams32 = crf::CrfParams<f32>;
pub type FilterPlan64 = filtering::FilterPlan<f64>;
pub type FilterPlan32 = filtering::FilterPlan<f32>;
