//! Experiment configuration, read from and written to TOML.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{config_err, MagnetError, Result};
use crate::losses::{CalForm, CalTerms};
use crate::maskgrounding::MaskInput;
use crate::metrics::ProbeConfig;
use crate::segmenter::{ModelConfig, OptimConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub train_count: usize,
    pub val_count: usize,
    pub grid: usize,
    pub train_seed: u64,
    pub val_seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train_count: 2000,
            val_count: 400,
            grid: 2,
            train_seed: 1,
            val_seed: 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub data: DataConfig,
    pub train: TrainConfig,
    pub optim: OptimConfig,
    pub model: ModelConfig,
    pub probe: ProbeConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("runs/default"),
            data: DataConfig::default(),
            train: TrainConfig::default(),
            optim: OptimConfig::default(),
            model: ModelConfig::default(),
            probe: ProbeConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.data.train_count == 0 || self.data.val_count == 0 {
            return config_err("train and validation splits must be non-empty");
        }
        if self.data.train_seed == self.data.val_seed {
            return config_err("train and validation splits need different seeds");
        }
        if self.train.batch_size == 0 {
            return config_err("batch size must be positive");
        }
        if !(self.optim.lr > 0.0) || self.optim.weight_decay < 0.0 || self.optim.grad_clip < 0.0 {
            return config_err("lr must be positive, weight decay and grad clip nonnegative");
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| MagnetError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| MagnetError::Serde(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| MagnetError::io(path, e))?;
        Self::from_toml(&text)
    }

    /// Applies one `key=value` override; keys name the command-line flags.
    pub fn apply_flag(&mut self, key: &str, value: &str) -> Result<()> {
        fn parse<V: std::str::FromStr>(key: &str, value: &str) -> Result<V>
        where
            V::Err: std::fmt::Display,
        {
            value
                .parse()
                .map_err(|e: V::Err| MagnetError::Config(format!("--{key} {value}: {e}")))
        }
        let m = &mut self.model;
        match key {
            "grounding" => {
                m.grounding_enabled = match value {
                    "on" => true,
                    "off" => false,
                    _ => return config_err(format!("--grounding expects on/off, got `{value}`")),
                }
            }
            "cam" => {
                m.cam_enabled = match value {
                    "on" => true,
                    "off" => false,
                    _ => return config_err(format!("--cam expects on/off, got `{value}`")),
                }
            }
            "mask-rate" => m.grounding.mask_rate = parse(key, value)?,
            "predictor-depth" => m.grounding.depth = parse(key, value)?,
            "mask-input" => m.grounding.mask_input = parse::<MaskInput>(key, value)?,
            "tau1" => m.losses.tau1 = parse(key, value)?,
            "tau2" => m.losses.tau2 = parse(key, value)?,
            "cal-form" => m.losses.cal_form = parse::<CalForm>(key, value)?,
            "cal" => m.losses.cal = parse::<CalTerms>(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "epochs" => self.train.epochs = parse(key, value)?,
            "batch-size" => self.train.batch_size = parse(key, value)?,
            "lr" => self.optim.lr = parse(key, value)?,
            "train-count" => self.data.train_count = parse(key, value)?,
            "val-count" => self.data.val_count = parse(key, value)?,
            "out" => self.out_dir = PathBuf::from(value),
            _ => return config_err(format!("unknown option `{key}`")),
        }
        Ok(())
    }
}
