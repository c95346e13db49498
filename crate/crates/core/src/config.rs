//! Experiment configuration documents and their content hash.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::analysis::{PgdConfig, PowerConfig, DEFAULT_SIGMAS};
use crate::data::DatasetSpec;
use crate::error::{Error, Result};
use crate::training::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisConfig {
    pub sigmas: Vec<f64>,
    pub flatness_runs: usize,
    /// Samples drawn from the evaluation set for each probe; 0 uses all.
    pub probe_samples: usize,
    pub landscape_extent: f64,
    pub landscape_grid: usize,
    pub power: PowerConfig,
    pub attack: PgdConfig,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            sigmas: DEFAULT_SIGMAS.to_vec(),
            flatness_runs: 100,
            probe_samples: 256,
            landscape_extent: 1.0,
            landscape_grid: 21,
            power: PowerConfig::default(),
            attack: PgdConfig::default(),
        }
    }
}

impl AnalysisConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.sigmas.contains(&0.0) {
            return Err(Error::param("analysis.sigmas", "must include 0"));
        }
        if self.sigmas.iter().any(|s| !(*s >= 0.0) || !s.is_finite()) {
            return Err(Error::param("analysis.sigmas", "noise levels must be finite and >= 0"));
        }
        if self.flatness_runs == 0 {
            return Err(Error::param("analysis.flatness_runs", "must be at least 1"));
        }
        if !(self.landscape_extent > 0.0) {
            return Err(Error::param("analysis.landscape_extent", "must be > 0"));
        }
        if self.landscape_grid % 2 == 0 {
            return Err(Error::param("analysis.landscape_grid", "must be odd"));
        }
        if !(self.attack.epsilon >= 0.0) || self.attack.steps == 0 {
            return Err(Error::param("analysis.attack", "needs epsilon >= 0 and steps >= 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetSpec,
    pub train: TrainConfig,
    pub analysis: AnalysisConfig,
    /// Output root; excluded from the config hash.
    pub output_dir: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        self.train.validate()?;
        self.analysis.validate()
    }

    /// SHA-256 hex digest of the canonical JSON (sorted keys) of everything
    /// except `output_dir`.
    pub fn hash(&self) -> String {
        let mut value = serde_json::to_value(self).expect("config serialises");
        if let serde_json::Value::Object(map) = &mut value {
            map.remove("output_dir");
        }
        let canonical = serde_json::to_string(&value).expect("value serialises");
        let digest = Sha256::digest(canonical.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}
