//! Experiment configuration: one TOML file describing a full run —
//! phantom generation, noise schedule, model, training and restoration
//! defaults. Every section falls back to its defaults, so a minimal file
//! (even an empty one) is a complete experiment.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::masks::SynthParams;
use crate::model::ModelConfig;
use crate::phantom::PhantomSpec;
use crate::schedule::ScheduleConfig;
use crate::train::TrainConfig;

/// Restoration defaults carried in the experiment file. The latent source
/// is a runtime choice (it may reference other images), so it is not part
/// of the static config.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RestoreSettings {
    pub steps: usize,
    pub resample_count: usize,
    pub seed: u64,
}

impl Default for RestoreSettings {
    fn default() -> Self {
        RestoreSettings {
            steps: 50,
            resample_count: 1,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    /// Root directory for generated datasets, checkpoints and reports.
    pub output_root: PathBuf,
    /// Number of clean phantoms to generate for training.
    pub dataset_size: usize,
    /// Number of synthetic artifact pairs to generate for evaluation.
    pub eval_pairs: usize,
    /// Master seed; per-item seeds derive from it.
    pub seed: u64,
    pub phantom: PhantomSpec,
    pub schedule: ScheduleConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub synth: SynthParams,
    pub restore: RestoreSettings,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            output_root: PathBuf::from("runs/default"),
            dataset_size: 8,
            eval_pairs: 8,
            seed: 0,
            phantom: PhantomSpec::default(),
            schedule: ScheduleConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            synth: SynthParams::default(),
            restore: RestoreSettings::default(),
        }
    }
}

impl ExperimentConfig {
    /// Validate every section plus cross-section consistency.
    pub fn validate(&self) -> Result<()> {
        if self.dataset_size == 0 {
            return Err(Error::Validation("dataset_size: must be at least 1".into()));
        }
        self.phantom.validate()?;
        self.schedule.build()?;
        self.model.validate()?;
        self.train.validate()?;
        if self.phantom.size != self.model.image_size {
            return Err(Error::Validation(format!(
                "model.image_size {} does not match phantom.size {}",
                self.model.image_size, self.phantom.size
            )));
        }
        if self.restore.steps == 0 || self.restore.steps > self.schedule.timesteps {
            return Err(Error::Validation(format!(
                "restore.steps: must be in 1..={}, got {}",
                self.schedule.timesteps, self.restore.steps
            )));
        }
        if self.restore.resample_count == 0 {
            return Err(Error::Validation(
                "restore.resample_count: must be at least 1".into(),
            ));
        }
        // TOML integers are signed 64-bit, so seeds above i64::MAX would not
        // survive a save/load round trip of the resolved config.
        for (name, seed) in [
            ("seed", self.seed),
            ("phantom.seed", self.phantom.seed),
            ("model.seed", self.model.seed),
            ("train.seed", self.train.seed),
            ("restore.seed", self.restore.seed),
        ] {
            if seed > i64::MAX as u64 {
                return Err(Error::Validation(format!(
                    "{name}: must fit in a TOML integer (at most {})",
                    i64::MAX
                )));
            }
        }
        Ok(())
    }
}

/// Parse an experiment config from TOML text.
pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let cfg: ExperimentConfig =
        toml::from_str(text).map_err(|e| Error::Validation(format!("config: {e}")))?;
    cfg.validate()?;
    Ok(cfg)
}

/// Load an experiment config file.
pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config(&text)
}

/// Render a config to TOML (used to emit the resolved config of a run).
pub fn to_toml(cfg: &ExperimentConfig) -> Result<String> {
    toml::to_string_pretty(cfg).map_err(|e| Error::Validation(format!("config: {e}")))
}

/// Write the resolved config alongside a run's outputs.
pub fn save_config(path: &Path, cfg: &ExperimentConfig) -> Result<()> {
    crate::io::atomic_write(path, to_toml(cfg)?.as_bytes())
}
