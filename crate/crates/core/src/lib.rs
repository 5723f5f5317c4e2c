//! Core library for joint RGB + pointmap generation at desk scale.
//!
//! Everything in here is pure, seeded computation over dense `f64` grids:
//! the invertible space-to-depth codec, rectified-flow noising and sampling,
//! the dual-branch adapter/control-link backbone, masked conditioning, the
//! pointmap -> (camera, depth) post-optimization, the synthetic scene oracle,
//! and depth/trajectory evaluation metrics. File formats and the CLI live in
//! the companion `flow4d-cli` crate.
//!
//! The crate is `no_std` (alloc required); all float math routes through
//! `libm` so results are identical across platforms.

#![no_std]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod backbone;
pub mod dlc;
pub mod error;
pub mod flow;
mod fmath;
pub mod grids;
pub mod mat;
pub mod metrics;
pub mod optim;
pub mod postopt;
pub mod rng;
pub mod synth;
pub mod tape;
pub mod umc;

pub use error::{Error, Result};
