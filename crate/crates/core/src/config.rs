// SPDX-License-Identifier: Apache-2.0

//! Top-level experiment configuration: one JSON file per run or sweep base.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::aux_losses::{builtin_names, AuxLossConfig};
use crate::dispatch::builtin_priorities;
use crate::model::ModelConfig;
use crate::training::data::DataConfig;
use crate::training::TrainConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Parse { path: PathBuf, source: serde_json::Error },
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub aux: AuxLossConfig,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            aux: AuxLossConfig::default(),
            data: DataConfig::default(),
            train: TrainConfig::default(),
            seeds: default_seeds(),
            out_dir: None,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.into(), source })?;
        let cfg = Self::from_json(&text).map_err(|source| ConfigError::Parse { path: path.into(), source })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Every cross-field check; run before any training starts.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |what: &str, e: String| ConfigError::Invalid(format!("{what}: {e}"));
        self.model.validate(builtin_priorities()).map_err(|e| bad("model", e.to_string()))?;
        if !self.aux.active.is_empty() {
            self.aux
                .validate(self.model.num_experts(), self.model.top_k())
                .map_err(|e| bad("aux", e.to_string()))?;
        }
        self.data.validate().map_err(|e| bad("data", e))?;
        if self.data.text_purity < 1.0 && self.model.vocab_size < 2 {
            return Err(bad("data", "caption noise needs a vocabulary of at least two ids".into()));
        }
        self.train.validate().map_err(|e| bad("train", e))?;
        if self.seeds.is_empty() {
            return Err(bad("seeds", "at least one seed is required".into()));
        }
        Ok(())
    }

    /// Applies a dotted-path override such as `model.router.top_k = 2`,
    /// going through the JSON form so the usual schema checks apply.
    pub fn with_override(&self, path: &str, value: serde_json::Value) -> Result<Self, ConfigError> {
        let mut json = serde_json::to_value(self).expect("config serializes");
        let mut node = &mut json;
        let parts: Vec<&str> = path.split('.').collect();
        for (i, part) in parts.iter().enumerate() {
            let obj = node
                .as_object_mut()
                .ok_or_else(|| ConfigError::Invalid(format!("{path}: {part:?} is not inside an object")))?;
            if i + 1 == parts.len() {
                obj.insert(part.to_string(), value.clone());
                break;
            }
            node = obj.entry(part.to_string()).or_insert_with(|| serde_json::json!({}));
        }
        let cfg: Self =
            serde_json::from_value(json).map_err(|e| ConfigError::Invalid(format!("override {path}: {e}")))?;
        Ok(cfg)
    }
}

/// Names accepted in `aux.active`.
pub fn known_aux_losses() -> Vec<String> {
    builtin_names()
}
