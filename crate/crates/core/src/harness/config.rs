use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::training::{TrainConfig, DEFAULT_PAIRS};

/// Corpus sizes and seeds for the synthetic data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub corpus_seed: u64,
    pub corpus_pairs: usize,
    pub eval_seed: u64,
    pub eval_pairs: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            corpus_seed: 1,
            corpus_pairs: DEFAULT_PAIRS,
            eval_seed: 2,
            eval_pairs: 200,
        }
    }
}

/// Contents of a TOML run configuration file.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
}

impl RunConfig {
    /// Training settings that fit the toy model in one epoch.
    pub fn toy() -> Self {
        Self {
            train: TrainConfig {
                lr: 5e-3,
                temperature: 0.3,
                ..TrainConfig::default()
            },
            ..Self::default()
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()
    }
}
