//! Diffusion autoencoder model: a context encoder producing a global
//! latent from the clean image, and a latent- and timestep-conditioned
//! U-Net that predicts the clean image from a noised one.
//!
//! Training minimizes the mean per-pixel squared error between the
//! prediction and the clean image, averaged over the batch. The noise
//! draws are explicit values, so a loss evaluation is a pure function of
//! parameters and data — which is what both the finite-difference
//! gradient check and bit-exact training resume rely on.

pub mod nn;
pub mod net;
pub mod params;
pub mod scalar;

use ndarray::{Array2, Array4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::model::params::ParamSet;
use crate::model::scalar::Scalar;
use crate::rng::{streams, Pcg32};
use crate::schedule::NoiseSchedule;

/// Architecture hyperparameters. `depth` counts U-Net resolution levels;
/// the feature width doubles per level starting from `base_width`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub image_size: usize,
    pub channels: usize,
    pub latent_dim: usize,
    pub base_width: usize,
    pub depth: usize,
    pub timestep_embed_dim: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            image_size: 64,
            channels: 3,
            latent_dim: 64,
            base_width: 16,
            depth: 3,
            timestep_embed_dim: 64,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        fn bad(field: &str, message: String) -> Error {
            Error::Validation(format!("{field}: {message}"))
        }
        if self.channels == 0 {
            return Err(bad("channels", "must be at least 1".into()));
        }
        if self.latent_dim == 0 {
            return Err(bad("latent_dim", "must be at least 1".into()));
        }
        if self.base_width == 0 {
            return Err(bad("base_width", "must be at least 1".into()));
        }
        if self.depth == 0 || self.depth > 6 {
            return Err(bad("depth", format!("must be in 1..=6, got {}", self.depth)));
        }
        if self.timestep_embed_dim < 2 || self.timestep_embed_dim % 2 != 0 {
            return Err(bad(
                "timestep_embed_dim",
                format!("must be even and >= 2, got {}", self.timestep_embed_dim),
            ));
        }
        let divisor = 1usize << (self.depth - 1);
        if self.image_size < 4 || self.image_size % divisor != 0 {
            return Err(bad(
                "image_size",
                format!(
                    "must be >= 4 and divisible by {divisor} (2^(depth-1)), got {}",
                    self.image_size
                ),
            ));
        }
        Ok(())
    }
}

/// Explicit per-item noise draws for one training batch: a timestep and a
/// standard-normal noise field per item.
pub struct BatchDraws<S: Scalar> {
    pub ts: Vec<usize>,
    pub eps: Array4<S>,
}

/// Draw timesteps and noise for a batch. Draw order is fixed: per item,
/// first the timestep, then the noise field in row-major order.
pub fn sample_draws<S: Scalar>(
    cfg: &ModelConfig,
    n: usize,
    timesteps: usize,
    rng: &mut Pcg32,
) -> BatchDraws<S> {
    let mut ts = Vec::with_capacity(n);
    let mut eps = Array4::zeros((n, cfg.channels, cfg.image_size, cfg.image_size));
    for item in 0..n {
        ts.push(rng.next_below(timesteps));
        for c in 0..cfg.channels {
            for y in 0..cfg.image_size {
                for x in 0..cfg.image_size {
                    eps[[item, c, y, x]] = S::from_f64_exact(rng.next_gaussian());
                }
            }
        }
    }
    BatchDraws { ts, eps }
}

/// Apply per-item forward diffusion with the given draws.
pub fn noisy_batch<S: Scalar>(
    x0: &Array4<S>,
    draws: &BatchDraws<S>,
    sched: &NoiseSchedule,
) -> Array4<S> {
    let (n, c, h, w) = x0.dim();
    let mut xt = Array4::zeros((n, c, h, w));
    for item in 0..n {
        let ab = sched.alpha_bar[draws.ts[item]];
        let signal = S::from_f64_exact(ab.sqrt());
        let noise = S::from_f64_exact((1.0 - ab).sqrt());
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    xt[[item, ch, y, x]] =
                        signal * x0[[item, ch, y, x]] + noise * draws.eps[[item, ch, y, x]];
                }
            }
        }
    }
    xt
}

fn prediction_loss<S: Scalar>(pred: &Array4<S>, target: &Array4<S>) -> (f64, Array4<S>) {
    let (n, c, h, w) = pred.dim();
    let per_item = (c * h * w) as f64;
    let scale = S::from_f64_exact(2.0 / (per_item * n as f64));
    let mut loss = 0.0;
    let mut grad = Array4::zeros(pred.raw_dim());
    for item in 0..n {
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let d = pred[[item, ch, y, x]] - target[[item, ch, y, x]];
                    loss += d.to_f64_exact() * d.to_f64_exact();
                    grad[[item, ch, y, x]] = scale * d;
                }
            }
        }
    }
    (loss / (per_item * n as f64), grad)
}

/// Loss of one batch under explicit draws — forward only.
pub fn loss_forward<S: Scalar>(
    params: &ParamSet<S>,
    cfg: &ModelConfig,
    sched: &NoiseSchedule,
    x0: &Array4<S>,
    draws: &BatchDraws<S>,
) -> f64 {
    let xt = noisy_batch(x0, draws, sched);
    let (z, _) = net::encoder_forward(x0, params);
    let (pred, _) = net::denoiser_forward(&xt, &draws.ts, &z, cfg, params);
    prediction_loss(&pred, x0).0
}

/// Loss and parameter gradients of one batch under explicit draws.
pub fn loss_and_grad<S: Scalar>(
    params: &ParamSet<S>,
    cfg: &ModelConfig,
    sched: &NoiseSchedule,
    x0: &Array4<S>,
    draws: &BatchDraws<S>,
) -> (f64, ParamSet<S>) {
    let xt = noisy_batch(x0, draws, sched);
    let (z, enc_cache) = net::encoder_forward(x0, params);
    let (pred, den_cache) = net::denoiser_forward(&xt, &draws.ts, &z, cfg, params);
    let (loss, dpred) = prediction_loss(&pred, x0);
    let mut grads = params.zeros_like();
    let dz = net::denoiser_backward(&dpred, cfg, params, &den_cache, &mut grads);
    net::encoder_backward(&dz, params, &enc_cache, &mut grads);
    (loss, grads)
}

/// Convert a slice of equally shaped images (HWC in [0,1]) to an NCHW batch.
pub fn images_to_batch(images: &[&Image]) -> Result<Array4<f32>> {
    let first = images
        .first()
        .ok_or_else(|| Error::Validation("images: batch must contain at least one image".into()))?;
    let (h, w, c) = (first.height, first.width, first.channels);
    let mut batch = Array4::zeros((images.len(), c, h, w));
    for (n, img) in images.iter().enumerate() {
        if img.height != h || img.width != w || img.channels != c {
            return Err(Error::Validation(format!(
                "images: image {n} has shape {}x{}x{}, expected {h}x{w}x{c}",
                img.height, img.width, img.channels
            )));
        }
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    batch[[n, ch, y, x]] = img.get(y, x, ch);
                }
            }
        }
    }
    Ok(batch)
}

/// Convert an NCHW batch back into HWC images.
pub fn batch_to_images(batch: &Array4<f32>) -> Vec<Image> {
    let (n, c, h, w) = batch.dim();
    (0..n)
        .map(|item| {
            let mut img = Image::zeros(h, w, c);
            for ch in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        img.set(y, x, ch, batch[[item, ch, y, x]]);
                    }
                }
            }
            img
        })
        .collect()
}

/// A trained (or training) model: configuration plus f32 parameters.
#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamSet<f32>,
}

impl Model {
    /// Fresh model with seeded deterministic initialization.
    pub fn init(config: &ModelConfig) -> Result<Model> {
        config.validate()?;
        let mut rng = Pcg32::new(config.seed, streams::MODEL_INIT);
        let params = net::init_params(config, &mut rng);
        Ok(Model {
            config: config.clone(),
            params,
        })
    }

    pub fn param_count(&self) -> usize {
        self.params.flat_len()
    }

    /// Encode clean images into latent codes.
    pub fn encode(&self, images: &[&Image]) -> Result<Array2<f32>> {
        let batch = images_to_batch(images)?;
        self.check_batch(&batch)?;
        let (z, _) = net::encoder_forward(&batch, &self.params);
        Ok(z)
    }

    /// Predict clean images from noisy input, timesteps and latents.
    pub fn predict_x0(
        &self,
        x_t: &Array4<f32>,
        ts: &[usize],
        z: &Array2<f32>,
    ) -> Result<Array4<f32>> {
        self.check_batch(x_t)?;
        if z.dim().1 != self.config.latent_dim {
            return Err(Error::Validation(format!(
                "latent: dim {} does not match model latent_dim {}",
                z.dim().1,
                self.config.latent_dim
            )));
        }
        let (pred, _) = net::denoiser_forward(x_t, ts, z, &self.config, &self.params);
        Ok(pred)
    }

    fn check_batch(&self, batch: &Array4<f32>) -> Result<()> {
        let (_, c, h, w) = batch.dim();
        if c != self.config.channels || h != self.config.image_size || w != self.config.image_size
        {
            return Err(Error::Validation(format!(
                "batch: shape {c}x{h}x{w} does not match model {}x{}x{}",
                self.config.channels, self.config.image_size, self.config.image_size
            )));
        }
        Ok(())
    }
}
