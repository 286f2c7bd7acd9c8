//! Run configuration shared by every command, and the config hash embedded in outputs.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::eval::EvalConfig;
use crate::synth::GenConfig;
use crate::trainer::{GradCheckConfig, TrainConfig};

/// Hex SHA-256 of the compact JSON form of `value`.
pub fn hash_json<T: Serialize>(value: &T) -> String {
    let json = serde_json::to_string(value).expect("config serialization is infallible");
    hex::encode(Sha256::digest(json.as_bytes()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    /// Dataset directory read by `train`, `eval` and `ablate` (written by `gen`).
    pub data: Option<PathBuf>,
    /// Checkpoint read by `eval`.
    pub checkpoint: Option<PathBuf>,
    /// Split evaluated by `eval`.
    pub split: String,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            data: None,
            checkpoint: None,
            split: "test".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblateConfig {
    /// Seeds averaged over; each seed generates its own dataset and initialization.
    pub seeds: Vec<u64>,
    pub margins: Vec<f64>,
    /// Run the eight loss-combination rows.
    pub grid: bool,
    /// Run the margin sweep with all three margin losses enabled.
    pub sweep: bool,
}

impl Default for AblateConfig {
    fn default() -> Self {
        Self {
            seeds: vec![0, 1, 2, 3, 4],
            margins: vec![0.1, 0.2, 0.5, 1.0],
            grid: true,
            sweep: true,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Copied into every section that draws random numbers.
    pub seed: u64,
    pub paths: PathsConfig,
    pub gen: GenConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub gradcheck: GradCheckConfig,
    pub ablate: AblateConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serialization is infallible")
    }

    /// Applies the top-level seed (or `seed_override`) to every section.
    pub fn resolved(mut self, seed_override: Option<u64>) -> Result<Self> {
        if let Some(s) = seed_override {
            self.seed = s;
        }
        self.gen.seed = self.seed;
        self.train.seed = self.seed;
        self.gradcheck.seed = self.seed;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        self.gen.validate()?;
        self.train.validate()?;
        self.eval.validate()?;
        self.gradcheck.validate()?;
        if !["train", "val", "test"].contains(&self.paths.split.as_str()) {
            return Err(Error::InvalidConfig(format!("unknown split {:?}", self.paths.split)));
        }
        if self.ablate.seeds.is_empty() {
            return Err(Error::InvalidConfig("ablate.seeds must not be empty".into()));
        }
        for &m in &self.ablate.margins {
            if !(m > 0.0 && m <= 1.0) {
                return Err(Error::InvalidConfig(format!("margin {m} outside (0, 1]")));
            }
        }
        Ok(())
    }

    pub fn hash(&self) -> String {
        hash_json(self)
    }
}
