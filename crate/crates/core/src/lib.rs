//! Graphical contrastive losses for visual relationship detection.

pub mod ablate;
pub mod config;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod losses;
pub mod model;
pub mod rng;
pub mod sampler;
pub mod scene;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
