//! Virtual fringe projection profilometry workbench.
//!
//! The crate renders fringe-illuminated captures of parametric scenes,
//! calibrates the camera/projector pair from those captures, triangulates
//! point clouds from unwrapped phase and scores them against ground truth.

pub mod geometry;
pub mod image;
pub mod patterns;
pub mod phase;
pub mod io;
pub mod mesh;
pub mod render;
pub mod calib;
pub mod recon;
pub mod pipeline;
pub mod metrology;
pub mod twin;
