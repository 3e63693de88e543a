//! Latent video diffusion conditioned on text plus first/last-frame image
//! instructions, with a synthetic moving-shapes corpus and desk-scale
//! evaluation tooling.

pub mod archive;
pub mod cli;
pub mod conditioning;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod evalkit;
pub mod model;
pub mod nn;
pub mod noise;
pub mod sampler;
pub mod synthdata;
pub mod trainer;
pub mod video;

pub use error::{Error, Result};
