//! Decoupled cell counting for microscopy images.
//!
//! A counter network estimates cell counts from intermediate features (an
//! l1-norm head over a coarse density map, with a global message passing
//! context module), and a separate localizer reconstructs fine-grained
//! density maps conditioned on the image and the counter's coarse map.

pub mod config;
pub mod counter;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod gmp;
pub mod interp;
pub mod localizer;
pub mod nn;
pub mod training;
pub mod viz;

pub use error::{Error, Result};
