//! Haze-robust vision pipeline for unmanned surface vessel target tracking:
//! procedural marine rendering, atmospheric haze synthesis, GAN dehazing,
//! grid-anchor detection and PID visual servoing.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]
pub mod checkpoint;
pub mod detector;
pub mod error;
pub mod gan;
pub mod harness;
pub mod haze;
pub mod imaging;
pub mod scene;
pub mod servo;

pub use error::{Error, Result};
