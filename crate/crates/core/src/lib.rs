//! Point-cloud odometry toolkit.
//!
//! The learned pipeline samples keypoints from two consecutive scans, abstracts
//! local geometry around them, builds a correspondence-free flow embedding from
//! Fourier-encoded keypoint positions, and regresses the relative motion as a
//! dual quaternion with a transformer encoder-decoder. Classic ICP baselines and
//! a KITTI-style relative-error evaluator sit alongside it.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cloud_io;
pub mod diff;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod icp;
pub mod net;
pub mod plots;
pub mod rigid;
pub mod rng;

pub use error::{Error, Result};
