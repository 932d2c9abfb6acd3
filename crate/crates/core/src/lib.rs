//! Vector-LoRA adaptation of a transformer depth encoder, trained self-supervised
//! from monocular video with a multi-scale SSIM reprojection loss.
//!
//! The crate is organised bottom-up: [`autograd`] (a small `f64` reverse-mode engine),
//! [`geometry`] (camera model and differentiable warp), [`losses`], [`model`] and
//! [`lora`], the procedural ground-truth scenes in [`synth`], [`metrics`], and the
//! [`trainer`] that ties them together.

// Validation writes `!(x > 0.0)` on purpose so NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autograd;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod geometry;
pub mod gradcheck;
pub mod imaging;
pub mod lora;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod synth;
pub mod trainer;

pub use config::{ExperimentConfig, TrainConfig};
pub use error::{Error, Result};
pub use geometry::{CameraIntrinsics, DepthMap, Pose};
pub use imaging::Image;
pub use lora::{LoraInjectionSpec, ProjectionKind, RankVector};
pub use metrics::{Alignment, DepthMetrics};
pub use model::{Model, ModelConfig};
pub use synth::{SceneConfig, SceneKind, SyntheticScene};
