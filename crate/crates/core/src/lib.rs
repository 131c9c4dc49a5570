//! Subject-driven video customization at toy scale.

pub mod datapipe;
pub mod diffusion;
pub mod embed;
pub mod error;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod sampler;
pub mod training;

pub use error::{Error, ErrorKind, Result};
