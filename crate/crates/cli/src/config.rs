//! Run configuration: one JSON file composing every module's settings,
//! overridable by command-line flags (flags > file > defaults).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use hetseg_core::metrics::report::EvalOptions;
use hetseg_core::model::ModelConfig;
use hetseg_core::phantom::PhantomConfig;
use hetseg_core::trainer::TrainConfig;
use hetseg_core::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub phantom: PhantomConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalOptions,
    /// Subjects generated per dataset by `synth`.
    pub subjects_per_dataset: usize,
    /// Multi-timepoint trajectory subjects generated by `synth`.
    pub trajectory_subjects: usize,
    pub trajectory_timepoints: usize,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            phantom: PhantomConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            eval: EvalOptions::default(),
            subjects_per_dataset: 4,
            trajectory_subjects: 2,
            trajectory_timepoints: 4,
            seed: 0,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    #[allow(dead_code)] // exercised by tests; handy for generating templates
    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)
            .map_err(|e| Error::io(path, e))
    }

    /// Push the run seed into every seeded component.
    pub fn apply_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.phantom.seed = seed;
        self.train.seed = seed;
    }
}

/// Artifact directory resolution: explicit flag, then the SEGHEH_CACHE
/// environment variable, then ./hetseg-out.
pub fn artifacts_dir(flag: Option<PathBuf>) -> PathBuf {
    if let Some(dir) = flag {
        return dir;
    }
    if let Ok(cache) = std::env::var("SEGHEH_CACHE") {
        if !cache.is_empty() {
            return PathBuf::from(cache);
        }
    }
    PathBuf::from("hetseg-out")
}
