//! Run configuration: one JSON document covering dataset, model, losses,
//! and training. Validation errors name the offending field path.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::losses::LossWeights;
use crate::model::{FeatureSet, ModelConfig};
use crate::training::TrainConfig;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DatasetConfig {
    /// Directory holding train/val/test.jsonl manifests. When absent, the
    /// synthetic generator supplies data from (n, scene_signal, seed).
    #[serde(default)]
    pub dir: Option<PathBuf>,
    #[serde(default = "default_n")]
    pub n: usize,
    #[serde(default = "default_scene_signal")]
    pub scene_signal: f32,
    #[serde(default = "default_data_seed")]
    pub seed: u64,
}

fn default_n() -> usize {
    200
}
fn default_scene_signal() -> f32 {
    0.5
}
fn default_data_seed() -> u64 {
    7
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            dir: None,
            n: default_n(),
            scene_signal: default_scene_signal(),
            seed: default_data_seed(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Default)]
pub struct RunConfig {
    #[serde(default)]
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub losses: LossWeights,
    #[serde(default)]
    pub training: TrainConfig,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, String> {
        let bytes =
            std::fs::read(path).map_err(|e| format!("cannot read {}: {e}", path.display()))?;
        let cfg: RunConfig =
            serde_json::from_slice(&bytes).map_err(|e| format!("{}: {e}", path.display()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Checks every block, reporting the first violation with its field path.
    pub fn validate(&self) -> Result<(), String> {
        if self.dataset.n == 0 {
            return Err("dataset.n: must be >= 1".into());
        }
        if !(0.0..=1.0).contains(&self.dataset.scene_signal) {
            return Err("dataset.scene_signal: must lie in [0, 1]".into());
        }

        self.model
            .validate()
            .map_err(|e| format!("model: {e}"))?;

        if self.losses.lambda_disc < 0.0 || !self.losses.lambda_disc.is_finite() {
            return Err("losses.lambda_disc: must be finite and >= 0".into());
        }
        if self.losses.lambda_cont < 0.0 || !self.losses.lambda_cont.is_finite() {
            return Err("losses.lambda_cont: must be finite and >= 0".into());
        }
        if self.losses.huber_delta <= 0.0 {
            return Err("losses.huber_delta: must be > 0".into());
        }
        if self.losses.v.iter().any(|v| *v < 0.0) {
            return Err("losses.v: entries must be >= 0".into());
        }
        self.losses
            .validate()
            .map_err(|e| format!("losses: {e}"))?;

        if self.training.batch_size == 0 {
            return Err("training.batch_size: must be >= 1".into());
        }
        if self.training.lr_every == 0 {
            return Err("training.lr_every: must be >= 1".into());
        }
        if !(self.training.lr.is_finite() && self.training.lr >= 0.0) {
            return Err("training.lr: must be finite and >= 0".into());
        }
        if !(self.training.lr_decay.is_finite() && self.training.lr_decay > 0.0) {
            return Err("training.lr_decay: must be > 0".into());
        }
        FeatureSet::from_ids(&self.training.feature_set)
            .map_err(|e| format!("training.feature_set: {e}"))?;
        Ok(())
    }
}
