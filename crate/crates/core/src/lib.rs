//! Masked diffusion for auto-regressive video generation on a toy latent world.

pub mod ablation;
pub mod config;
pub mod denoiser;
mod error;
pub mod flops;
pub mod masked_noise;
pub mod metrics;
pub mod report;
pub mod rollout;
pub mod sampler;
pub mod schedule;
pub mod toyworld;
pub mod trainer;

pub use error::{Error, Result};
