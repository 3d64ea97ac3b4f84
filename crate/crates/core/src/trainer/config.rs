use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backbone::{AblationFlags, ModelConfig};
use crate::degrade::NoiseKind;
use crate::error::{MindError, Result};
use crate::objective::{LossWeightsConfig, PERCEPTUAL_SEED};

/// How each training sample is degraded.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum NoiseCurriculum {
    /// Family uniform over all four, level uniform in the family's range.
    Mixed,
    Fixed { kind: NoiseKind, level: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub input_size: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub patches_per_epoch: usize,
    pub lr0: f64,
    pub lr_min: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    pub perceptual_seed: u64,
    pub augment: bool,
    pub noise: NoiseCurriculum,
    pub loss: LossWeightsConfig,
    pub model: ModelConfig,
    pub flags: AblationFlags,
    pub dataset_root: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            input_size: 64,
            batch_size: 8,
            epochs: 30,
            patches_per_epoch: 128,
            lr0: 1e-4,
            lr_min: 1e-6,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            seed: 42,
            perceptual_seed: PERCEPTUAL_SEED,
            augment: true,
            noise: NoiseCurriculum::Mixed,
            loss: LossWeightsConfig::default(),
            model: ModelConfig::default(),
            flags: AblationFlags::full(),
            dataset_root: PathBuf::from("data"),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(MindError::Config(m.to_string()));
        if self.epochs < 1 {
            return bad("epochs must be >= 1");
        }
        if self.batch_size < 1 || self.patches_per_epoch < 1 {
            return bad("batch_size and patches_per_epoch must be >= 1");
        }
        if !(self.lr_min >= 0.0 && self.lr_min < self.lr0 && self.lr0.is_finite()) {
            return bad("learning rates must satisfy 0 <= lr_min < lr0");
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) || !(self.adam_eps > 0.0) {
            return bad("adam betas must lie in [0, 1) and eps must be positive");
        }
        if let NoiseCurriculum::Fixed { level, .. } = self.noise {
            if !(level > 0.0 && level.is_finite()) {
                return bad("fixed noise level must be positive");
            }
        }
        self.loss.validate()?;
        self.model.validate()?;
        self.model.check_dims(self.input_size, self.input_size)?;
        if self.input_size < 16 {
            return bad("input_size must be at least 16");
        }
        Ok(())
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.patches_per_epoch.div_ceil(self.batch_size)
    }

    pub fn total_steps(&self) -> usize {
        self.epochs * self.steps_per_epoch()
    }

    pub fn load(path: impl AsRef<Path>) -> Result<RunConfig> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        let cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| MindError::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Relative dataset roots resolve against the config file's directory.
    pub fn load_resolved(path: impl AsRef<Path>) -> Result<RunConfig> {
        let path = path.as_ref();
        let mut cfg = Self::load(path)?;
        if cfg.dataset_root.is_relative() {
            if let Some(dir) = path.parent() {
                cfg.dataset_root = dir.join(&cfg.dataset_root);
            }
        }
        Ok(cfg)
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }
}

/// lr_min + (lr0 − lr_min)·(1 + cos(π·step/total))/2.
pub fn cosine_lr(step: usize, total_steps: usize, lr0: f64, lr_min: f64) -> Result<f64> {
    if step > total_steps || total_steps == 0 {
        return Err(MindError::Parameter(format!(
            "step {step} outside [0, {total_steps}]"
        )));
    }
    let t = step as f64 / total_steps as f64;
    Ok(lr_min + (lr0 - lr_min) * (1.0 + (std::f64::consts::PI * t).cos()) / 2.0)
}
