//! No-reference point cloud quality assessment with disentangled content
//! and distortion representations.
//!
//! The crate is organised bottom-up:
//!
//! - [`diff`]: dense tensors, reverse-mode differentiation, Adam.
//! - [`mi`]: variational conditional-Gaussian mutual-information upper bound.
//! - [`pointcloud`]: PLY I/O, normalization, rotations, synthetic corpora.
//! - [`render`]: orthographic multi-view point splatting.
//! - [`minipatch`]: grid mini-patch maps.
//! - [`mae`]: masked cross-reconstruction pretraining of the content encoder.
//! - [`model`]: the dual-branch quality model and its losses.
//! - [`train`]: alternating estimator / main-network optimization.
//! - [`eval`]: fold planning, Logistic-4 alignment, SROCC/PLCC/RMSE.

pub mod diff;
pub mod error;
pub mod eval;
pub mod mae;
pub mod manifest;
pub mod mi;
pub mod minipatch;
pub mod model;
pub mod pointcloud;
pub mod render;
pub mod rng;
pub mod train;

pub use error::{Error, Result};
