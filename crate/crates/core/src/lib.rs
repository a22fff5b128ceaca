//! Multi-pose virtual try-on pipeline.
//!
//! The pipeline runs in three learned stages over a shared conditioning
//! stack (pose heatmaps, body masks, clothes images):
//!
//! 1. **Conditional parsing** ([`parsing_stage`]) — synthesize the target
//!    human parsing map from body masks, clothes, and target pose.
//! 2. **Warp GAN** ([`warp_stage`]) — warp the clothes with a learned
//!    thin-plate-spline matcher ([`matching`]) and synthesize a coarse
//!    result aligned to the target pose.
//! 3. **Refinement render** ([`refine_stage`]) — predict a composition
//!    mask and blend warped clothes into the coarse result.
//!
//! Training, inference orchestration, and checkpoints live in [`train`];
//! the procedural dataset generator in [`synth`]; SSIM / inception-score
//! evaluation in [`metrics`]. All numerics are f64 and deterministic under
//! a fixed seed.

pub mod error;
pub mod image;
pub mod matching;
pub mod metrics;
pub mod nn;
pub mod parsing_stage;
pub mod refine_stage;
pub mod synth;
pub mod tps;
pub mod train;
pub mod warp_stage;

pub use error::{Error, Result};
