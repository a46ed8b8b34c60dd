//! Keypoint-based monocular 3D object detection.
//!
//! The crate implements the full detection stack on a self-contained f64
//! reverse-mode differentiation engine: a plain-convolution backbone
//! stand-in, difficulty-ordered output groups associated through a
//! convolutional GRU, a row-wise depth hint module, the geometric
//! encode/decode pipeline, the disentangled training losses, KITTI-format
//! I/O with synthetic scene generation, and a KITTI-style evaluation suite
//! (rotated-box IoU, AP|R11 / AP|R40, AOS).

pub mod blocks;
pub mod checkpoint;
pub mod config;
pub mod decode;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod kitti;
pub mod losses;
pub mod model;
pub mod par;
pub mod params;
pub mod synthetic;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
