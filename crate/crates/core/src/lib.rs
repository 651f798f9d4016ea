//! Metric-scale joint reconstruction of a human and the surrounding scene
//! from monocular-video backbone outputs.
//!
//! The heavy pretrained networks (scene pointmap regressor, human mesh
//! regressor, segmenter, detector) are treated as data providers: their
//! outputs are read from files in the [`tensor_io`] container format. This
//! crate owns everything downstream of them:
//!
//! - [`geometry`]: pinhole camera, pose transforms, focal recovery from pointmaps
//! - [`roe`]: exact robust scale and scale-shift solvers
//! - [`body`]: a miniature parametric body model and z-buffer visibility
//! - [`losses`]: surface distillation, coarse and fine alignment objectives
//! - [`autodiff`]: a small tape-based reverse-mode engine with AdamW
//! - [`alignnet`]: the cross-attention fusion head and its rotary embeddings
//! - [`synthetic`] / [`train`]: an oracle world and the coarse-to-fine loop
//! - [`curation`]: shot splitting and subject filters over detection logs
//! - [`eval`]: motion and depth metrics
//! - [`pipeline`]: end-to-end reconstruction and PLY export
//! - [`cli`]: the `hsrecon` command-line front end

pub mod alignnet;
pub mod autodiff;
pub mod body;
pub mod chamfer;
pub mod cli;
pub mod config;
pub mod curation;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod gradcheck;
pub mod losses;
pub mod numfmt;
pub mod pipeline;
pub mod raster;
pub mod roe;
pub mod synthetic;
pub mod tensor_io;
pub mod train;

pub use error::{Error, Result};
