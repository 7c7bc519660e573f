//! Unsupervised restoration of artifact-corrupted retinal fundus images
//! with a latent-conditioned diffusion autoencoder.
//!
//! The pipeline trains a clean-image denoiser jointly with a semantic
//! context encoder on procedurally generated fundus phantoms, then
//! restores degraded images by mask-conditioned reverse diffusion:
//! unknown pixels are regenerated while known pixels are re-imposed at
//! every timestep and copied exactly into the final output.

pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod error;
pub mod image;
pub mod inpaint;
pub mod io;
pub mod masks;
pub mod metrics;
pub mod model;
pub mod phantom;
pub mod rng;
pub mod schedule;
pub mod train;

pub use error::{Error, Result};
