//! Joint denoising and dequantization of rectified two-view depth images,
//! followed by point cloud synthesis and quality evaluation.
//!
//! The enhancement runs row by row: a similarity graph over per-pixel
//! features supplies a smoothness prior, the sensor's noise-plus-quantizer
//! formation model supplies a likelihood, and the two views are tied together
//! through a linearized disparity warp. Each row is solved as an
//! unconstrained convex problem with an accelerated gradient method.

pub mod cli;
pub mod error;
pub mod formation;
pub mod graph;
pub mod noise_model;
pub mod pipeline;
pub mod scene_io;
pub mod solver;
pub mod synthesis;
pub mod warp;

pub use error::{Error, Result};
