//! Dual-camera raw image processing.
//!
//! Synthesizes raw Bayer pairs from stereo RGB data, warps the secondary
//! view onto the primary with a disparity map, and reconstructs a denoised
//! RGB image with a two-port demosaicking/denoising network trained in two
//! stages.

pub mod ablation;
pub mod checkpoint;
pub mod dataset;
mod error;
pub mod gradcheck;
pub mod model;
pub mod raw;
pub mod seed;
pub mod train;
pub mod warp;

pub use error::{Error, Result};
pub use stereoisp_tensor as tensor;
