//! Recurrent late-to-early temporal fusion for LiDAR 3D object detection.
//!
//! `no_std` + `alloc`. Everything here is pure computation: pillar encoding,
//! ego-pose inverse calibration of BEV maps, window attention fusion,
//! foreground-gated recurrence, the center-heatmap head, a synthetic LiDAR
//! world and the training loop. File formats, timing and the CLI live in the
//! `lef` crate.

#![no_std]

extern crate alloc;
#[cfg(any(feature = "std", test))]
extern crate std;

pub mod attention;
pub mod calibration;
pub mod detection;
mod error;
pub mod fusion;
pub mod geometry;
pub mod numerics;
pub mod pillars;
pub mod rng;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
