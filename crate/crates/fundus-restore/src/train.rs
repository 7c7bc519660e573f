//! Training loop: Adam with global-norm gradient clipping and a linearly
//! decaying learning rate.
//!
//! All randomness is stateless: epoch `e` shuffles with stream
//! `TRAIN_SHUFFLE_BASE + e`, and the batch at global step index `s` draws
//! timesteps and noise with stream `TRAIN_DRAW_BASE + s`. A resumed run
//! therefore replays exactly the batches and draws the uninterrupted run
//! would have seen, and matches it checkpoint-for-checkpoint.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::model::params::ParamSet;
use crate::model::scalar::Scalar;
use crate::model::{images_to_batch, loss_and_grad, sample_draws, Model};
use crate::rng::{streams, Pcg32};
use crate::schedule::NoiseSchedule;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;
/// Gradients are rescaled when their global L2 norm exceeds this.
pub const GRAD_CLIP_NORM: f64 = 1.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Initial learning rate; decays linearly to zero over `epochs`.
    pub lr: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 750,
            batch_size: 4,
            lr: 2e-3,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Validation("epochs: must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Validation("batch_size: must be at least 1".into()));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Validation(format!(
                "lr: must be finite and positive, got {}",
                self.lr
            )));
        }
        Ok(())
    }
}

/// Learning rate for a zero-based epoch index: `lr * (1 - epoch/epochs)`.
pub fn lr_at(cfg: &TrainConfig, epoch: usize) -> Result<f64> {
    if epoch >= cfg.epochs {
        return Err(Error::Index(format!(
            "epoch {epoch} out of range for {} epochs",
            cfg.epochs
        )));
    }
    Ok(cfg.lr * (1.0 - epoch as f64 / cfg.epochs as f64))
}

/// Adam first/second moment estimates plus the update counter.
#[derive(Debug, Clone)]
pub struct OptimizerState<S: Scalar> {
    pub m: ParamSet<S>,
    pub v: ParamSet<S>,
    pub step: u64,
}

impl<S: Scalar> OptimizerState<S> {
    pub fn new(params: &ParamSet<S>) -> Self {
        OptimizerState {
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
        }
    }
}

/// Rescale gradients in place if their global norm exceeds `max_norm`.
/// Returns the pre-clip norm.
pub fn clip_global_norm<S: Scalar>(grads: &mut ParamSet<S>, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if norm > max_norm {
        grads.scale(S::from_f64_exact(max_norm / norm));
    }
    norm
}

/// One bias-corrected Adam update.
pub fn adam_update<S: Scalar>(
    params: &mut ParamSet<S>,
    grads: &ParamSet<S>,
    opt: &mut OptimizerState<S>,
    lr: f64,
) {
    opt.step += 1;
    let t = opt.step as i32;
    let b1 = S::from_f64_exact(ADAM_BETA1);
    let b2 = S::from_f64_exact(ADAM_BETA2);
    let one_minus_b1 = S::from_f64_exact(1.0 - ADAM_BETA1);
    let one_minus_b2 = S::from_f64_exact(1.0 - ADAM_BETA2);
    let bc1 = S::from_f64_exact(1.0 - ADAM_BETA1.powi(t));
    let bc2 = S::from_f64_exact(1.0 - ADAM_BETA2.powi(t));
    let lr_s = S::from_f64_exact(lr);
    let eps = S::from_f64_exact(ADAM_EPS);
    let names: Vec<String> = params.names().map(String::from).collect();
    for name in &names {
        let g = grads.get(name).clone();
        let m = opt.m.get_mut(name);
        ndarray::Zip::from(&mut *m).and(&g).for_each(|m, &g| {
            *m = b1 * *m + one_minus_b1 * g;
        });
        let m = m.clone();
        let v = opt.v.get_mut(name);
        ndarray::Zip::from(&mut *v).and(&g).for_each(|v, &g| {
            *v = b2 * *v + one_minus_b2 * g * g;
        });
        let v = v.clone();
        let p = params.get_mut(name);
        ndarray::Zip::from(&mut *p)
            .and(&m)
            .and(&v)
            .for_each(|p, &m, &v| {
                let m_hat = m / bc1;
                let v_hat = v / bc2;
                *p -= lr_s * m_hat / (v_hat.sqrt() + eps);
            });
    }
}

/// One logged training step.
#[derive(Debug, Clone, Serialize)]
pub struct LogRow {
    pub global_step: u64,
    pub epoch: usize,
    pub step_in_epoch: usize,
    pub lr: f64,
    pub loss: f64,
}

/// CSV rendering of a training log, one row per optimizer step.
pub fn log_to_csv(rows: &[LogRow]) -> String {
    let mut out = String::from("global_step,epoch,step_in_epoch,lr,loss\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.global_step, r.epoch, r.step_in_epoch, r.lr, r.loss
        ));
    }
    out
}

#[derive(Debug)]
pub struct TrainReport {
    pub initial_loss: f64,
    pub final_loss: f64,
    pub rows: Vec<LogRow>,
}

/// Run (or resume) training over `[start_epoch, cfg.epochs)`.
///
/// `on_epoch_end` fires after each completed epoch with the number of
/// epochs now completed — the place to persist checkpoints. On a
/// non-finite loss or gradient the loop aborts with a numeric error
/// without invoking the callback again, so the last saved state is the
/// last good one.
pub fn train<F>(
    model: &mut Model,
    opt: &mut OptimizerState<f32>,
    sched: &NoiseSchedule,
    images: &[&Image],
    cfg: &TrainConfig,
    start_epoch: usize,
    mut on_epoch_end: F,
) -> Result<TrainReport>
where
    F: FnMut(&Model, &OptimizerState<f32>, usize) -> Result<()>,
{
    cfg.validate()?;
    if images.is_empty() {
        return Err(Error::Validation("images: training set is empty".into()));
    }
    if start_epoch > cfg.epochs {
        return Err(Error::Index(format!(
            "start epoch {start_epoch} beyond configured {} epochs",
            cfg.epochs
        )));
    }
    let n = images.len();
    let steps_per_epoch = n.div_ceil(cfg.batch_size);
    let mut rows = Vec::new();
    for epoch in start_epoch..cfg.epochs {
        let lr = lr_at(cfg, epoch)?;
        let mut order: Vec<usize> = (0..n).collect();
        let mut shuffle_rng = Pcg32::new(cfg.seed, streams::TRAIN_SHUFFLE_BASE + epoch as u64);
        shuffle_rng.shuffle(&mut order);
        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let global_index = (epoch * steps_per_epoch + step) as u64;
            let mut draw_rng = Pcg32::new(cfg.seed, streams::TRAIN_DRAW_BASE + global_index);
            let batch_imgs: Vec<&Image> = chunk.iter().map(|&i| images[i]).collect();
            let x0 = images_to_batch(&batch_imgs)?;
            let draws = sample_draws::<f32>(&model.config, chunk.len(), sched.len(), &mut draw_rng);
            let (loss, mut grads) = loss_and_grad(&model.params, &model.config, sched, &x0, &draws);
            if !loss.is_finite() || !grads.all_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite loss or gradient at epoch {epoch}, step {step}"
                )));
            }
            clip_global_norm(&mut grads, GRAD_CLIP_NORM);
            adam_update(&mut model.params, &grads, opt, lr);
            if !model.params.all_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite parameter after update at epoch {epoch}, step {step}"
                )));
            }
            rows.push(LogRow {
                global_step: opt.step,
                epoch,
                step_in_epoch: step,
                lr,
                loss,
            });
        }
        on_epoch_end(model, opt, epoch + 1)?;
    }
    let initial_loss = rows.first().map_or(f64::NAN, |r| r.loss);
    let final_loss = rows.last().map_or(f64::NAN, |r| r.loss);
    Ok(TrainReport {
        initial_loss,
        final_loss,
        rows,
    })
}
