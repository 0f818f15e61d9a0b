//! Run configuration, read from and echoed as TOML.
//!
//! `RunConfig::default()` carries the full-scale hyperparameters
//! (D = 64, M = 32, N = 3, S = 3, lr 1e-4 with 1e-5 for the last epoch,
//! batch 1). [`RunConfig::desk`] is the reduced configuration used for
//! single-core experiments; every field it changes is listed there.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::FusionMode;
use crate::head::LossWeights;
use crate::metrics::THRESHOLDS;
use crate::model::ModelConfig;
use crate::sim::SimConfig;
use crate::tensor::{FocalParams, Precision};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Base seed; sequence `i` uses a seed derived from `(seed, i)`.
    pub seed: u64,
    pub sequences: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig { seed: 0, sequences: 100 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Learning rate of the last epoch.
    pub final_learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    /// Share of the training sequences held out for early stopping when no
    /// separate validation set is given.
    pub validation_fraction: f64,
    pub loss_lambda: f64,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
    /// Stop after this many optimiser steps (0 = no limit).
    pub max_steps: usize,
    /// Global gradient-norm clip (0 = off).
    pub grad_clip: f64,
    pub precision: Precision,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            final_learning_rate: 1e-5,
            epochs: 30,
            batch_size: 1,
            seed: 0,
            patience: 3,
            validation_fraction: 0.1,
            loss_lambda: 1.0,
            focal_alpha: 0.25,
            focal_gamma: 2.0,
            max_steps: 0,
            grad_clip: 0.0,
            precision: Precision::F64,
        }
    }
}

impl TrainConfig {
    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            focal: FocalParams {
                alpha: self.focal_alpha,
                gamma: self.focal_gamma,
                ..FocalParams::default()
            },
            lambda: self.loss_lambda,
            smooth_l1_beta: 1.0,
        }
    }

    /// Learning rate used throughout `epoch` (0-based).
    pub fn lr_for_epoch(&self, epoch: usize) -> f64 {
        if epoch + 1 >= self.epochs {
            self.final_learning_rate
        } else {
            self.learning_rate
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub thresholds: Vec<f64>,
    pub k: usize,
    pub score_threshold: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            thresholds: THRESHOLDS.to_vec(),
            k: 100,
            score_threshold: 0.05,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub sim: SimConfig,
    pub data: DataConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    /// Reduced configuration: 32x32 grid, D = 16, M = 4, N = 2, T = 4, k = 50,
    /// one deformable convolution per block, and a larger learning rate with
    /// fewer epochs so a run fits in minutes on one core.
    pub fn desk() -> Self {
        let mut c = RunConfig::default();
        c.model.frames = 4;
        c.model.fusion.channels = 16;
        c.model.fusion.queries = 4;
        c.model.fusion.block_strides = vec![1, 1];
        c.model.fusion.mode = FusionMode::SparseFast;
        c.eval.k = 50;
        c.train.learning_rate = 2e-3;
        c.train.final_learning_rate = 2e-4;
        c.train.epochs = 8;
        c.train.grad_clip = 5.0;
        c
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.sim.validate()?;
        if self.sim.frames < 1 {
            return Err(Error::Config("sim.frames must be positive".into()));
        }
        let t = &self.train;
        if t.batch_size == 0 || t.epochs == 0 {
            return Err(Error::Config("train.batch_size and train.epochs must be positive".into()));
        }
        if !(t.learning_rate > 0.0 && t.final_learning_rate > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if !(0.0..1.0).contains(&t.validation_fraction) {
            return Err(Error::Config("train.validation_fraction must lie in [0, 1)".into()));
        }
        if t.grad_clip < 0.0 || t.loss_lambda < 0.0 {
            return Err(Error::Config("train.grad_clip and train.loss_lambda must be non-negative".into()));
        }
        if self.eval.thresholds != THRESHOLDS {
            return Err(Error::Config(format!(
                "eval.thresholds must be {THRESHOLDS:?}, got {:?}",
                self.eval.thresholds
            )));
        }
        if self.eval.k == 0 {
            return Err(Error::Config("eval.k must be at least 1".into()));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let c: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    /// Fully resolved TOML rendering.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serialises")
    }

    /// Writes the resolved config as `config.toml` inside `dir`.
    pub fn echo(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("config.toml");
        fs::write(&path, self.to_toml()).map_err(|e| Error::io(&path, e))
    }
}
