//! Pose-aware cartoon face generation: a latent mapper over a frozen
//! face generator, followed by an image-space cartooniser.

pub mod backbone;
pub mod cartooniser;
pub mod config;
pub mod dataset;
pub mod domain;
pub mod error;
pub mod eval;
pub mod imageio;
pub mod losses;
pub mod mapper;
pub mod nn;
pub mod pipeline;
pub mod trainer;

pub use error::{Error, Result};
