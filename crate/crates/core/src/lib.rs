pub mod autoencoder;
pub mod checkpoint;
pub mod config;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod harness;
pub mod imageio;
pub mod lpl;
pub mod nn;
pub mod outlier;
pub mod probes;
pub mod samplers;
pub mod toydata;
pub mod trainer;

pub use error::{LabError, Result};
