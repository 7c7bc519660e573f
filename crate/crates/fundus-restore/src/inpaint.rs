//! Mask-conditioned restoration by reverse diffusion.
//!
//! Unknown (artifact) pixels are regenerated by running the reverse
//! process; known pixels are re-imposed at every level by replacing them
//! with a fresh forward-noised copy of the input, so the generated
//! content stays consistent with its surroundings. The final output
//! copies known pixels from the input verbatim — restoration never
//! alters a pixel outside the mask.
//!
//! The noise sequence is driven by a single seeded generator, so a
//! (model, input, options) triple always produces the same output.

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::image::{Image, Mask};
use crate::model::{batch_to_images, images_to_batch, Model};
use crate::rng::{streams, Pcg32};
use crate::schedule::{forward_diffuse, posterior_step_strided, NoiseSchedule};

/// Where the conditioning latent comes from.
#[derive(Debug, Clone)]
pub enum LatentSource {
    /// Encode the degraded input itself — the fully unsupervised default.
    FromArtifact,
    /// Use a caller-supplied latent row vector of shape (1, latent_dim).
    Provided(Array2<f32>),
    /// Blend the latents of two reference images:
    /// `(1 - lambda) * encode(a) + lambda * encode(b)`.
    Interpolated {
        a: Image,
        b: Image,
        lambda: f32,
    },
}

/// Reverse-process variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SamplerKind {
    /// Standard posterior step (the default).
    Posterior,
    /// Naive alternative that jumps straight to the prediction plus
    /// level noise: `x_prev = x0_hat + sigma_t * eps`. Kept for
    /// side-by-side comparison; expect worse results.
    Direct,
}

#[derive(Debug, Clone)]
pub struct RestoreOptions {
    /// Number of reverse steps to execute (an evenly spaced descending
    /// subset of the schedule; capped at the schedule length).
    pub steps: usize,
    /// Repetitions per step: after each reverse step the result is
    /// renoised back up and stepped again, giving the sampler extra
    /// chances to harmonize generated content with known pixels.
    pub resample_count: usize,
    pub latent: LatentSource,
    pub sampler: SamplerKind,
    pub seed: u64,
}

impl Default for RestoreOptions {
    fn default() -> Self {
        RestoreOptions {
            steps: 50,
            resample_count: 1,
            latent: LatentSource::FromArtifact,
            sampler: SamplerKind::Posterior,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RestoreResult {
    pub image: Image,
    /// The latent that conditioned the denoiser, for reuse or inspection.
    pub latent: Array2<f32>,
}

/// Evenly spaced descending timestep subset covering both endpoints.
/// `steps = 1` yields just the top level; `steps >= t_total` yields every
/// level.
pub fn timestep_subset(t_total: usize, steps: usize) -> Vec<usize> {
    assert!(t_total >= 1 && steps >= 1);
    if steps == 1 {
        return vec![t_total - 1];
    }
    let mut ts = Vec::with_capacity(steps);
    for k in 0..steps {
        let frac = 1.0 - k as f64 / (steps - 1) as f64;
        let t = ((t_total - 1) as f64 * frac).round() as usize;
        if ts.last() != Some(&t) {
            ts.push(t);
        }
    }
    ts
}

/// Overlay: mask=1 pixels from `generated`, mask=0 pixels from `known`.
fn compose(generated: &Image, known: &Image, mask: &Mask) -> Image {
    let mut out = generated.clone();
    for y in 0..out.height {
        for x in 0..out.width {
            if mask.get(y, x) == 0 {
                for c in 0..out.channels {
                    out.set(y, x, c, known.get(y, x, c));
                }
            }
        }
    }
    out
}

/// Re-impose known pixels at noise level `t` (`None` = exact copy).
fn compose_known(
    generated: &Image,
    artifact: &Image,
    mask: &Mask,
    t: Option<usize>,
    sched: &NoiseSchedule,
    rng: &mut Pcg32,
) -> Result<Image> {
    let known = match t {
        Some(t) => {
            let eps = Image::gaussian(artifact.height, artifact.width, artifact.channels, rng);
            forward_diffuse(artifact, t, &eps, sched)?
        }
        None => artifact.clone(),
    };
    Ok(compose(generated, &known, mask))
}

/// Renoise from level `t_prev` back up to level `t` in one jump.
fn renoise(
    x_prev: &Image,
    t_prev: usize,
    t: usize,
    sched: &NoiseSchedule,
    rng: &mut Pcg32,
) -> Image {
    let alpha_eff = sched.alpha_bar[t] / sched.alpha_bar[t_prev];
    let c_sig = alpha_eff.sqrt() as f32;
    let c_noise = (1.0 - alpha_eff).sqrt() as f32;
    let eps = Image::gaussian(x_prev.height, x_prev.width, x_prev.channels, rng);
    let mut out = x_prev.clone();
    for (o, (&x, &e)) in out.data.iter_mut().zip(x_prev.data.iter().zip(&eps.data)) {
        *o = c_sig * x + c_noise * e;
    }
    out
}

/// Resolve the conditioning latent for a restoration call.
fn resolve_latent(
    model: &Model,
    artifact: &Image,
    source: &LatentSource,
) -> Result<Array2<f32>> {
    match source {
        LatentSource::FromArtifact => model.encode(&[artifact]),
        LatentSource::Provided(z) => {
            if z.dim() != (1, model.config.latent_dim) {
                return Err(Error::Validation(format!(
                    "latent: expected shape (1, {}), got ({}, {})",
                    model.config.latent_dim,
                    z.dim().0,
                    z.dim().1
                )));
            }
            Ok(z.clone())
        }
        LatentSource::Interpolated { a, b, lambda } => {
            if !(0.0..=1.0).contains(lambda) {
                return Err(Error::Validation(format!(
                    "lambda: must be in [0, 1], got {lambda}"
                )));
            }
            interpolate_latents(model, a, b, *lambda)
        }
    }
}

/// `(1 - lambda) * encode(a) + lambda * encode(b)`.
pub fn interpolate_latents(model: &Model, a: &Image, b: &Image, lambda: f32) -> Result<Array2<f32>> {
    let za = model.encode(&[a])?;
    let zb = model.encode(&[b])?;
    Ok(za.mapv(|v| v * (1.0 - lambda)) + zb.mapv(|v| v * lambda))
}

fn predict_x0(model: &Model, x: &Image, t: usize, z: &Array2<f32>) -> Result<Image> {
    let batch = images_to_batch(&[x])?;
    let pred = model.predict_x0(&batch, &[t], z)?;
    let mut img = batch_to_images(&pred).remove(0);
    img.clamp01();
    Ok(img)
}

/// Restore an artifact-corrupted image. `mask` marks corrupted pixels
/// with 1; every pixel where the mask is 0 is copied from `artifact`
/// bit-for-bit into the result.
pub fn restore(
    model: &Model,
    sched: &NoiseSchedule,
    artifact: &Image,
    mask: &Mask,
    opts: &RestoreOptions,
) -> Result<RestoreResult> {
    if opts.steps == 0 {
        return Err(Error::Validation("steps: must be at least 1".into()));
    }
    if opts.resample_count == 0 {
        return Err(Error::Validation(
            "resample_count: must be at least 1".into(),
        ));
    }
    if mask.height != artifact.height || mask.width != artifact.width {
        return Err(Error::Validation(format!(
            "mask: {}x{} does not match image {}x{}",
            mask.height, mask.width, artifact.height, artifact.width
        )));
    }
    let z = resolve_latent(model, artifact, &opts.latent)?;
    let t_total = sched.len();
    let ts = timestep_subset(t_total, opts.steps.min(t_total));

    let mut rng = Pcg32::new(opts.seed, streams::RESTORE);
    // Initial state at the top level: fresh noise in the unknown region,
    // noised input in the known region.
    let top = ts[0];
    let noise0 = Image::gaussian(artifact.height, artifact.width, artifact.channels, &mut rng);
    let mut x = compose_known(&noise0, artifact, mask, Some(top), sched, &mut rng)?;

    for k in 0..ts.len() {
        let t = ts[k];
        let t_prev = ts.get(k + 1).copied();
        for r in 0..opts.resample_count {
            let x0_hat = predict_x0(model, &x, t, &z)?;
            let noise =
                Image::gaussian(artifact.height, artifact.width, artifact.channels, &mut rng);
            let stepped = match opts.sampler {
                SamplerKind::Posterior => {
                    posterior_step_strided(&x, &x0_hat, t, t_prev, sched, &noise)?
                }
                SamplerKind::Direct => {
                    let sigma = sched.sigma[t] as f32;
                    let mut out = x0_hat.clone();
                    if t_prev.is_some() {
                        for (o, &e) in out.data.iter_mut().zip(&noise.data) {
                            *o += sigma * e;
                        }
                    }
                    out
                }
            };
            x = compose_known(&stepped, artifact, mask, t_prev, sched, &mut rng)?;
            // Renoise and repeat, unless this was the last pass or the
            // chain has already reached the clean level.
            if r + 1 < opts.resample_count {
                if let Some(tp) = t_prev {
                    x = renoise(&x, tp, t, sched, &mut rng);
                }
            }
        }
    }
    for v in x.data.iter_mut() {
        *v = v.clamp(0.0, 1.0);
    }
    // Exact known-pixel copy (compose_known already did this for the
    // final step, but the clamp above must not disturb it).
    let image = compose(&x, artifact, mask);
    Ok(RestoreResult { image, latent: z })
}
