//! Run artifacts: the stage journal that makes runs resumable and the
//! manifest that makes completed runs verifiable.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ArtifactError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("corrupt file {path}: {message}")]
    Corrupt { path: PathBuf, message: String },
    #[error("config hash mismatch: journal has {journal}, current config is {current}")]
    ConfigMismatch { journal: String, current: String },
    #[error("manifest validation failed for {name}: {reason}")]
    ManifestMismatch { name: String, reason: String },
}

fn read(path: &Path) -> Result<String, ArtifactError> {
    std::fs::read_to_string(path).map_err(|source| ArtifactError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn write(path: &Path, body: String) -> Result<(), ArtifactError> {
    std::fs::write(path, body).map_err(|source| ArtifactError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn sha256_file(path: &Path) -> Result<String, ArtifactError> {
    let bytes = std::fs::read(path).map_err(|source| ArtifactError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

// ---------------------------------------------------------------------------
// Stage journal
// ---------------------------------------------------------------------------

/// Usage recorded for one completed stage.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageRecord {
    pub name: String,
    pub calls: u64,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    pub estimated: bool,
}

/// `run_state.json`: which stages completed under which config, with their
/// backend usage. Usage survives interruption so a resumed run's cost report
/// equals an uninterrupted one.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunJournal {
    pub config_hash: String,
    pub completed: Vec<StageRecord>,
}

impl RunJournal {
    pub fn new(config_hash: String) -> Self {
        RunJournal {
            config_hash,
            completed: Vec::new(),
        }
    }

    pub fn is_complete(&self, stage_name: &str) -> bool {
        self.completed.iter().any(|s| s.name == stage_name)
    }

    pub fn record(&mut self, record: StageRecord) {
        if !self.is_complete(&record.name) {
            self.completed.push(record);
        }
    }

    pub fn total_calls(&self) -> u64 {
        self.completed.iter().map(|s| s.calls).sum()
    }

    pub fn path(out_dir: &Path) -> PathBuf {
        out_dir.join("run_state.json")
    }

    pub fn save(&self, out_dir: &Path) -> Result<(), ArtifactError> {
        write(
            &Self::path(out_dir),
            serde_json::to_string_pretty(self).expect("journal serializes"),
        )
    }

    pub fn load(out_dir: &Path) -> Result<Option<RunJournal>, ArtifactError> {
        let path = Self::path(out_dir);
        if !path.exists() {
            return Ok(None);
        }
        let body = read(&path)?;
        serde_json::from_str(&body)
            .map(Some)
            .map_err(|e| ArtifactError::Corrupt {
                path,
                message: e.to_string(),
            })
    }
}

// ---------------------------------------------------------------------------
// Manifest
// ---------------------------------------------------------------------------

/// `run_manifest.json`: config hash plus a checksum for every artifact a
/// completed run produced.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub artifacts: BTreeMap<String, String>,
}

impl RunManifest {
    pub fn path(out_dir: &Path) -> PathBuf {
        out_dir.join("run_manifest.json")
    }

    /// Checksum the named files (relative to `out_dir`); missing files are
    /// simply absent from the manifest.
    pub fn collect(
        config_hash: String,
        out_dir: &Path,
        names: &[&str],
    ) -> Result<RunManifest, ArtifactError> {
        let mut artifacts = BTreeMap::new();
        for name in names {
            let path = out_dir.join(name);
            if path.exists() {
                artifacts.insert(name.to_string(), sha256_file(&path)?);
            }
        }
        Ok(RunManifest {
            config_hash,
            artifacts,
        })
    }

    pub fn save(&self, out_dir: &Path) -> Result<(), ArtifactError> {
        write(
            &Self::path(out_dir),
            serde_json::to_string_pretty(self).expect("manifest serializes"),
        )
    }

    pub fn load(out_dir: &Path) -> Result<RunManifest, ArtifactError> {
        let path = Self::path(out_dir);
        let body = read(&path)?;
        serde_json::from_str(&body).map_err(|e| ArtifactError::Corrupt {
            path,
            message: e.to_string(),
        })
    }

    /// Re-checksum every listed artifact and fail on any difference.
    pub fn validate(&self, out_dir: &Path) -> Result<(), ArtifactError> {
        for (name, expected) in &self.artifacts {
            let path = out_dir.join(name);
            if !path.exists() {
                return Err(ArtifactError::ManifestMismatch {
                    name: name.clone(),
                    reason: "file missing".into(),
                });
            }
            let actual = sha256_file(&path)?;
            if &actual != expected {
                return Err(ArtifactError::ManifestMismatch {
                    name: name.clone(),
                    reason: format!("checksum changed ({expected} -> {actual})"),
                });
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn journal_tracks_stage_completion_and_usage() {
        let dir = tempfile::tempdir().unwrap();
        let mut journal = RunJournal::new("abc".into());
        assert!(!journal.is_complete("ingest"));
        journal.record(StageRecord {
            name: "ingest".into(),
            calls: 0,
            prompt_tokens: 0,
            completion_tokens: 0,
            estimated: false,
        });
        journal.record(StageRecord {
            name: "reason".into(),
            calls: 5,
            prompt_tokens: 100,
            completion_tokens: 40,
            estimated: false,
        });
        journal.save(dir.path()).unwrap();

        let loaded = RunJournal::load(dir.path()).unwrap().unwrap();
        assert!(loaded.is_complete("reason"));
        assert_eq!(loaded.total_calls(), 5);
    }

    #[test]
    fn manifest_detects_post_run_edits() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("metrics.json"), "{}").unwrap();
        let manifest =
            RunManifest::collect("h".into(), dir.path(), &["metrics.json", "absent.csv"])
                .unwrap();
        assert_eq!(manifest.artifacts.len(), 1);
        manifest.save(dir.path()).unwrap();
        manifest.validate(dir.path()).unwrap();

        std::fs::write(dir.path().join("metrics.json"), "{tampered}").unwrap();
        let err = RunManifest::load(dir.path())
            .unwrap()
            .validate(dir.path())
            .unwrap_err();
        assert!(matches!(err, ArtifactError::ManifestMismatch { .. }));
    }
}
