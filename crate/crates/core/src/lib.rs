//! Progressive autoregressive video diffusion on small latent sequences.
//!
//! Frames inside a sliding window carry their own noise levels, rising from the
//! oldest frame to the newest; each sampling step denoises the whole window one grid
//! step and every `C` steps the window drops a finished chunk and takes in fresh noise.
//! Alongside the sampler the crate has the replacement baselines, an exact Gaussian
//! denoiser for checking, a small trainable denoiser, synthetic data and metrics.

pub mod baselines;
pub mod data;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod par;
pub mod run;
pub mod schedule;
pub mod training;
pub mod window;

pub use error::{Error, Result};
