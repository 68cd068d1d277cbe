//! TOML run configuration. Every table is optional; unknown keys are
//! rejected and the error lists the accepted ones.

use std::path::Path;

use anyhow::{Context, Result};
use kgt_core::{KgeConfig, ModelConfig, TrainConfig};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TextConfig {
    /// Output width of the offline encoder (remote encoders must match).
    pub dim: usize,
    pub seed: u64,
}

impl Default for TextConfig {
    fn default() -> Self {
        Self { dim: 64, seed: 0 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub kge: KgeConfig,
    pub text: TextConfig,
}

/// Raised for malformed config files; maps to the usage exit code.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| ConfigError(e.to_string()))?;
        cfg.model.validate().map_err(|e| ConfigError(e.to_string()))?;
        cfg.train.validate().map_err(|e| ConfigError(e.to_string()))?;
        cfg.kge.validate().map_err(|e| ConfigError(e.to_string()))?;
        if cfg.text.dim == 0 {
            return Err(ConfigError("text.dim must be positive".into()));
        }
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                Ok(Self::parse(&text).with_context(|| format!("in config {}", p.display()))?)
            }
        }
    }

    /// `--seed` reseeds every stage.
    pub fn reseed(&mut self, seed: u64) {
        self.train.seed = seed;
        self.kge.seed = seed;
        self.text.seed = seed;
    }
}
