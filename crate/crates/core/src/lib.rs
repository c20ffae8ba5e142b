//! Task-integrated feature distillation for object detectors.
//!
//! Given one FPN level of teacher and student detector outputs (features,
//! per-cell class scores and predicted boxes) plus the image's ground truth,
//! the engine scores every feature cell by both detection sub-tasks,
//! finds the teacher's key areas and the student's weak areas, folds in a
//! spatial prior around the objects, and turns the result into a three-tier
//! mask for a feature-imitation loss.
//!
//! Stages, in pipeline order:
//!
//! - [`geometry`]: IoU, point-to-box distance, grid suppression.
//! - [`diem`]: regression/classification task scores.
//! - [`ldam`]: key and weak areas, output value.
//! - [`sfdm`]: information value, tiered mask, loss and gradient.
//! - [`pipeline`]: the composition, with ablation switches.
//! - [`harness`]: synthetic scenes and a descent simulation.

pub mod cli;
pub mod diem;
pub mod error;
pub mod geometry;
pub mod harness;
pub mod heatmap;
pub mod ldam;
pub mod pipeline;
pub mod select;
pub mod sfdm;
pub mod tensor;
pub mod tensorio;

pub use error::{Result, TidError};
pub use geometry::{BBox, GroundTruth};
pub use pipeline::{run_pipeline, AblationMode, TidConfig};
pub use tensor::{Cell, Grid, Tensor};
pub use tensorio::LevelBundle;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
