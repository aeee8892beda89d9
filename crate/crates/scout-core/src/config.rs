//! Run configuration: one JSON document holds every knob the pipeline and
//! its ablations vary. The only thing read from the environment is the API
//! credential.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::dataset::ColumnNames;
use crate::gateway::RetryPolicy;
use crate::memory::{MemoryBudget, MemoryScope};
use crate::scoring::RewardTable;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("cannot parse config {path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendMode {
    Live,
    Mock,
}

/// Backend selection: exactly one of live or mock.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackendConfig {
    pub mode: BackendMode,
    pub endpoint: String,
    pub model: String,
    /// Environment variable holding the API credential.
    pub credential_env: String,
    pub mock_script: Option<PathBuf>,
}

impl Default for BackendConfig {
    fn default() -> Self {
        BackendConfig {
            mode: BackendMode::Mock,
            endpoint: "https://api.openai.com/v1/chat/completions".to_string(),
            model: "o3-mini".to_string(),
            credential_env: "RAISE_API_KEY".to_string(),
            mock_script: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    pub path: PathBuf,
    pub columns: ColumnNames,
    pub chunk_size: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            path: PathBuf::from("founders.csv"),
            columns: ColumnNames::default(),
            chunk_size: 500,
        }
    }
}

/// Requested per-class counts; the split seed is the run seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitCounts {
    pub train_success: usize,
    pub train_failure: usize,
    pub test_success: usize,
    pub test_failure: usize,
}

impl Default for SplitCounts {
    fn default() -> Self {
        SplitCounts {
            train_success: 100,
            train_failure: 100,
            test_success: 10,
            test_failure: 50,
        }
    }
}

/// Stage toggles: every enhancement the ablations compare.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct StageToggles {
    /// Strict-evaluator refinement of the voted prediction.
    pub two_step: bool,
    /// Candidates per founder; 1 disables the ensemble.
    pub ensemble_k: usize,
    /// RL scoring plus policy refinement rounds.
    pub rl_scoring: bool,
    pub memory_scope: MemoryScope,
    pub refine_rounds: u32,
}

impl Default for StageToggles {
    fn default() -> Self {
        StageToggles {
            two_step: false,
            ensemble_k: 1,
            rl_scoring: false,
            memory_scope: MemoryScope::Run,
            refine_rounds: 1,
        }
    }
}

/// Per-stage sampling temperatures. Generation stages default to 1 for
/// diverse chains of thought; judging and extraction stages default to 0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Temperatures {
    pub reasoning: f64,
    pub extraction: f64,
    pub policy: f64,
    pub scoring: f64,
    pub prediction: f64,
    pub refinement: f64,
}

impl Default for Temperatures {
    fn default() -> Self {
        Temperatures {
            reasoning: 1.0,
            extraction: 0.0,
            policy: 1.0,
            scoring: 0.0,
            prediction: 1.0,
            refinement: 0.0,
        }
    }
}

/// Currency per token, split by direction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct CostRates {
    pub prompt: f64,
    pub completion: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub backend: BackendConfig,
    pub dataset: DatasetConfig,
    pub split: SplitCounts,
    pub stages: StageToggles,
    pub rl_rewards: RewardTable,
    pub memory: MemoryBudget,
    pub temperatures: Temperatures,
    pub checkpoint_every: usize,
    pub cost_rates: CostRates,
    pub max_output_tokens: u32,
    pub max_inflight: usize,
    pub retry: RetryPolicy,
    /// F-beta parameter for the metric report.
    pub beta: f64,
    pub out_dir: PathBuf,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            backend: BackendConfig::default(),
            dataset: DatasetConfig::default(),
            split: SplitCounts::default(),
            stages: StageToggles::default(),
            rl_rewards: RewardTable::default(),
            memory: MemoryBudget::default(),
            temperatures: Temperatures::default(),
            checkpoint_every: 10,
            cost_rates: CostRates::default(),
            max_output_tokens: 2048,
            max_inflight: 1,
            retry: RetryPolicy::default(),
            beta: 0.5,
            out_dir: PathBuf::from("out"),
            seed: 42,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig, ConfigError> {
        let body = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let config: RunConfig =
            serde_json::from_str(&body).map_err(|e| ConfigError::Parse {
                path: path.to_path_buf(),
                message: e.to_string(),
            })?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.backend.mode == BackendMode::Mock && self.backend.mock_script.is_none() {
            return Err(ConfigError::Invalid(
                "mock backend selected but no mock_script given".into(),
            ));
        }
        if self.backend.mode == BackendMode::Live && self.backend.mock_script.is_some() {
            return Err(ConfigError::Invalid(
                "live backend selected together with a mock_script; pick one mode".into(),
            ));
        }
        if self.stages.ensemble_k < 1 {
            return Err(ConfigError::Invalid("ensemble_k must be at least 1".into()));
        }
        if self.dataset.chunk_size < 1 {
            return Err(ConfigError::Invalid("chunk_size must be positive".into()));
        }
        if self.max_inflight < 1 {
            return Err(ConfigError::Invalid("max_inflight must be at least 1".into()));
        }
        if self.beta <= 0.0 {
            return Err(ConfigError::Invalid("beta must be positive".into()));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        let body = serde_json::to_string_pretty(self).expect("config serializes");
        std::fs::write(path, body)
    }

    /// Hash of the semantic configuration. Paths are replaced by content
    /// digests (dataset, mock script) or dropped (out_dir), so relocating a
    /// run does not invalidate its checkpoints while editing data or config
    /// does.
    pub fn config_hash(&self) -> String {
        let mut normalized = self.clone();
        normalized.out_dir = PathBuf::new();
        normalized.dataset.path = PathBuf::from(content_digest(&self.dataset.path));
        if let Some(script) = &self.backend.mock_script {
            normalized.backend.mock_script = Some(PathBuf::from(content_digest(script)));
        }
        let body = serde_json::to_string(&normalized).expect("config serializes");
        hex::encode(Sha256::digest(body.as_bytes()))
    }
}

fn content_digest(path: &Path) -> String {
    match std::fs::read(path) {
        Ok(bytes) => format!("sha256:{}", hex::encode(Sha256::digest(&bytes))),
        Err(_) => format!("path:{}", path.display()),
    }
}
