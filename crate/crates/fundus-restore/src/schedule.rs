//! Diffusion-process numerics: noise-schedule tables, closed-form forward
//! noising, and reverse posterior steps.
//!
//! Timesteps are zero-based: `t` ranges over `0..T`. The cumulative
//! signal coefficient before the first step is 1 by convention, so the
//! reverse step at `t = 0` is deterministic and returns the predicted
//! clean image unchanged.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Linear,
}

/// Serializable recipe for a schedule; embedded in checkpoints and the
/// experiment config so a run can be reproduced from its artifacts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScheduleConfig {
    pub timesteps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
    pub kind: ScheduleKind,
}

impl Default for ScheduleConfig {
    /// Desk-scale default: 200 steps over the conventional linear
    /// endpoints 1e-4 to 0.02. Paper-fidelity runs use 1000 steps with
    /// the same endpoints.
    fn default() -> Self {
        ScheduleConfig {
            timesteps: 200,
            beta_min: 1e-4,
            beta_max: 0.02,
            kind: ScheduleKind::Linear,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        build_schedule(self.timesteps, self.beta_min, self.beta_max, self.kind)
    }
}

/// Per-timestep coefficient tables. All entries are f64; image arithmetic
/// downcasts the scalar coefficients to f32 at the point of use.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    pub beta: Vec<f64>,
    pub alpha: Vec<f64>,
    pub alpha_bar: Vec<f64>,
    /// Posterior standard deviation for the adjacent step t -> t-1:
    /// sigma[t]^2 = beta[t] * (1 - alpha_bar[t-1]) / (1 - alpha_bar[t]),
    /// with the before-first-step convention making sigma[0] = 0.
    pub sigma: Vec<f64>,
}

impl NoiseSchedule {
    pub fn len(&self) -> usize {
        self.beta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.beta.is_empty()
    }

    /// Cumulative signal coefficient at the level *before* `t`
    /// (1 when `t` is the first step).
    pub fn alpha_bar_before(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bar[t - 1]
        }
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t >= self.len() {
            return Err(Error::Index(format!(
                "timestep {t} out of range for schedule with {} steps",
                self.len()
            )));
        }
        Ok(())
    }
}

pub fn build_schedule(
    timesteps: usize,
    beta_min: f64,
    beta_max: f64,
    kind: ScheduleKind,
) -> Result<NoiseSchedule> {
    if timesteps < 1 {
        return Err(Error::Validation(
            "timesteps: must be at least 1".to_string(),
        ));
    }
    if !(beta_min > 0.0 && beta_min < 1.0) {
        return Err(Error::Validation(format!(
            "beta_min: {beta_min} outside (0, 1)"
        )));
    }
    if !(beta_max > 0.0 && beta_max < 1.0) {
        return Err(Error::Validation(format!(
            "beta_max: {beta_max} outside (0, 1)"
        )));
    }
    if beta_min > beta_max {
        return Err(Error::Validation(format!(
            "beta_min: {beta_min} exceeds beta_max {beta_max}"
        )));
    }
    let ScheduleKind::Linear = kind;
    let beta: Vec<f64> = if timesteps == 1 {
        vec![beta_min]
    } else {
        (0..timesteps)
            .map(|i| beta_min + (beta_max - beta_min) * i as f64 / (timesteps - 1) as f64)
            .collect()
    };
    let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
    let mut alpha_bar = Vec::with_capacity(timesteps);
    let mut prod = 1.0;
    for a in &alpha {
        prod *= a;
        alpha_bar.push(prod);
    }
    let mut sigma = Vec::with_capacity(timesteps);
    for t in 0..timesteps {
        let ab_prev = if t == 0 { 1.0 } else { alpha_bar[t - 1] };
        let var = beta[t] * (1.0 - ab_prev) / (1.0 - alpha_bar[t]);
        sigma.push(var.sqrt());
    }
    Ok(NoiseSchedule {
        beta,
        alpha,
        alpha_bar,
        sigma,
    })
}

fn check_same_shape(what: &str, a: &Image, b: &Image) -> Result<()> {
    if !a.same_shape(b) {
        return Err(Error::Validation(format!(
            "{what}: shape {}x{}x{} does not match {}x{}x{}",
            a.height, a.width, a.channels, b.height, b.width, b.channels
        )));
    }
    Ok(())
}

/// Closed-form forward noising: sqrt(alpha_bar[t]) * x0 +
/// sqrt(1 - alpha_bar[t]) * eps.
pub fn forward_diffuse(x0: &Image, t: usize, eps: &Image, sched: &NoiseSchedule) -> Result<Image> {
    sched.check_t(t)?;
    check_same_shape("forward_diffuse", x0, eps)?;
    let ab = sched.alpha_bar[t];
    let c_sig = (ab.sqrt()) as f32;
    let c_noise = ((1.0 - ab).sqrt()) as f32;
    let mut out = x0.clone();
    for (o, (&x, &e)) in out.data.iter_mut().zip(x0.data.iter().zip(&eps.data)) {
        *o = c_sig * x + c_noise * e;
    }
    Ok(out)
}

/// One reverse step from level `t` to level `t - 1` using the standard
/// posterior with the clean-image prediction substituted for x0:
///
///   mean  = (sqrt(ab_prev) * beta_t / (1 - ab_t)) * x0_hat
///         + (sqrt(alpha_t) * (1 - ab_prev) / (1 - ab_t)) * x_t
///   out   = mean + sigma_t * noise
///
/// At `t = 0` the posterior collapses: the output is `x0_hat` exactly and
/// the noise argument is ignored.
pub fn posterior_step(
    x_t: &Image,
    x0_hat: &Image,
    t: usize,
    sched: &NoiseSchedule,
    noise: &Image,
) -> Result<Image> {
    let t_prev = if t == 0 { None } else { Some(t - 1) };
    posterior_step_strided(x_t, x0_hat, t, t_prev, sched, noise)
}

/// Reverse step between two arbitrary levels `t -> t_prev` with
/// `t_prev < t` (`None` means "all the way to clean"). The stride is
/// folded into effective one-step coefficients
/// `alpha_eff = alpha_bar[t] / alpha_bar[t_prev]`, which reduces to the
/// adjacent-step posterior when `t_prev = t - 1`.
pub fn posterior_step_strided(
    x_t: &Image,
    x0_hat: &Image,
    t: usize,
    t_prev: Option<usize>,
    sched: &NoiseSchedule,
    noise: &Image,
) -> Result<Image> {
    sched.check_t(t)?;
    check_same_shape("posterior_step", x_t, x0_hat)?;
    check_same_shape("posterior_step", x_t, noise)?;
    let ab_prev = match t_prev {
        None => return Ok(x0_hat.clone()),
        Some(s) => {
            if s >= t {
                return Err(Error::Index(format!(
                    "strided step requires t_prev < t, got {s} >= {t}"
                )));
            }
            sched.alpha_bar[s]
        }
    };
    let ab_t = sched.alpha_bar[t];
    let alpha_eff = ab_t / ab_prev;
    let beta_eff = 1.0 - alpha_eff;
    let denom = 1.0 - ab_t;
    let coef_x0 = (ab_prev.sqrt() * beta_eff / denom) as f32;
    let coef_xt = (alpha_eff.sqrt() * (1.0 - ab_prev) / denom) as f32;
    let sigma = (beta_eff * (1.0 - ab_prev) / denom).sqrt() as f32;
    let mut out = x_t.clone();
    for i in 0..out.data.len() {
        out.data[i] = coef_x0 * x0_hat.data[i] + coef_xt * x_t.data[i] + sigma * noise.data[i];
    }
    Ok(out)
}
