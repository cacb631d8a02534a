//! Trajectory attention toolkit.
//!
//! - [`geom`]: pinhole cameras, rigid poses and depth-driven pixel translation.
//! - [`traj`]: trajectory sets from camera motion over images and tracked videos.
//! - [`attn`]: temporal, trajectory and spacetime attention with backward passes.
//! - [`metrics`]: ATE and RPE pose-trajectory metrics.
//! - [`synth`]: synthetic scenes, brute-force references and the self-test suite.
//! - [`io`]: binary and JSON file formats.

pub mod attn;
mod error;
pub mod geom;
pub mod io;
pub mod metrics;
pub mod synth;
pub mod traj;

pub use error::{Error, Result};
