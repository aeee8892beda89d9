//! Founder CSV ingestion, profile-text assembly, and stratified splitting.
//!
//! The loader reads the CSV in chunks of `chunk_size` rows so very large
//! files never sit in memory twice. Rows with a missing or unparseable
//! outcome label are never coerced: they are skipped and reported, and the
//! caller may persist the report as a `<input>.skipped.csv` sidecar.

use std::fmt;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Stable identifier for one founder within a [`ProfileSet`].
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FounderId(pub String);

impl FounderId {
    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for FounderId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for FounderId {
    fn from(s: &str) -> Self {
        FounderId(s.to_string())
    }
}

/// Ground-truth outcome of a founder's startup.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum OutcomeLabel {
    Success,
    Failure,
}

impl OutcomeLabel {
    /// Parse a raw outcome cell. Accepts case-insensitive
    /// `success`/`1`/`true` and `failure`/`0`/`false`; anything else is
    /// rejected so mislabeled rows can never corrupt the ground truth.
    pub fn parse(raw: &str) -> Option<OutcomeLabel> {
        match raw.trim().to_ascii_lowercase().as_str() {
            "success" | "1" | "true" => Some(OutcomeLabel::Success),
            "failure" | "0" | "false" => Some(OutcomeLabel::Failure),
            _ => None,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            OutcomeLabel::Success => "SUCCESS",
            OutcomeLabel::Failure => "FAILURE",
        }
    }
}

impl fmt::Display for OutcomeLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One founder's textual evidence plus the ground-truth outcome.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FounderRecord {
    pub id: FounderId,
    pub linkedin_text: String,
    pub crunchbase_text: String,
    pub company_description: String,
    pub outcome: OutcomeLabel,
}

/// An ordered collection of founder records, as loaded from one source file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProfileSet {
    pub records: Vec<FounderRecord>,
    pub source_path: String,
    pub chunk_count: usize,
}

impl ProfileSet {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn count_by_outcome(&self, outcome: OutcomeLabel) -> usize {
        self.records.iter().filter(|r| r.outcome == outcome).count()
    }
}

/// Requested class counts for a train/test split.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_success: usize,
    pub train_failure: usize,
    pub test_success: usize,
    pub test_failure: usize,
    pub seed: u64,
}

/// CSV column names, overridable in config.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ColumnNames {
    pub id: String,
    pub linkedin: String,
    pub crunchbase: String,
    pub description: String,
    pub outcome: String,
}

impl Default for ColumnNames {
    fn default() -> Self {
        ColumnNames {
            id: "id".to_string(),
            linkedin: "clean_linkedin_profile".to_string(),
            crunchbase: "clean_cb_profile".to_string(),
            description: "company_description".to_string(),
            outcome: "success".to_string(),
        }
    }
}

/// A row the loader refused, with the 1-based data-row number and why.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkippedRow {
    pub row_number: usize,
    pub reason: String,
}

/// Loader result: the clean records plus the skip report.
#[derive(Debug, Clone)]
pub struct LoadOutcome {
    pub profiles: ProfileSet,
    pub skipped: Vec<SkippedRow>,
}

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("input file not found: {0}")]
    FileNotFound(PathBuf),
    #[error("malformed header: missing column `{0}`")]
    MalformedHeader(String),
    #[error("dataset contains zero valid rows")]
    EmptyDataset,
    #[error("insufficient `{class}` records: requested {requested}, available {available}")]
    InsufficientClassCount {
        class: &'static str,
        requested: usize,
        available: usize,
    },
    #[error("corrupt profile artifact: {0}")]
    CorruptArtifact(PathBuf),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Load founder profiles from a CSV file, reading `chunk_size` rows at a time.
///
/// Row order is preserved regardless of `chunk_size`. Missing text cells
/// become empty strings; rows whose outcome cell is absent or unparseable are
/// skipped and reported. When no `id` column exists, ids are synthesized from
/// the 1-based data-row number (`row-<n>`).
pub fn load_profiles(
    path: &Path,
    chunk_size: usize,
    columns: &ColumnNames,
) -> Result<LoadOutcome, DatasetError> {
    assert!(chunk_size >= 1, "chunk_size must be positive");
    if !path.exists() {
        return Err(DatasetError::FileNotFound(path.to_path_buf()));
    }

    let mut reader = csv::ReaderBuilder::new()
        .flexible(true)
        .from_path(path)?;
    let headers = reader.headers()?.clone();
    let col = |name: &str| headers.iter().position(|h| h == name);

    let linkedin_idx = col(&columns.linkedin)
        .ok_or_else(|| DatasetError::MalformedHeader(columns.linkedin.clone()))?;
    let crunchbase_idx = col(&columns.crunchbase)
        .ok_or_else(|| DatasetError::MalformedHeader(columns.crunchbase.clone()))?;
    let description_idx = col(&columns.description)
        .ok_or_else(|| DatasetError::MalformedHeader(columns.description.clone()))?;
    let outcome_idx = col(&columns.outcome)
        .ok_or_else(|| DatasetError::MalformedHeader(columns.outcome.clone()))?;
    let id_idx = col(&columns.id);

    let mut records = Vec::new();
    let mut skipped = Vec::new();
    let mut row_number = 0usize;
    let mut rows_in_chunk = 0usize;
    let mut chunk_count = 0usize;

    for row in reader.records() {
        row_number += 1;
        rows_in_chunk += 1;
        if rows_in_chunk == chunk_size {
            chunk_count += 1;
            rows_in_chunk = 0;
            log::debug!("ingested chunk {chunk_count} ({row_number} rows so far)");
        }
        let row = match row {
            Ok(row) => row,
            Err(err) => {
                skipped.push(SkippedRow {
                    row_number,
                    reason: format!("unreadable row: {err}"),
                });
                continue;
            }
        };
        let cell = |idx: usize| row.get(idx).unwrap_or("").to_string();
        let outcome_raw = cell(outcome_idx);
        let Some(outcome) = OutcomeLabel::parse(&outcome_raw) else {
            let reason = if outcome_raw.trim().is_empty() {
                "missing outcome".to_string()
            } else {
                format!("invalid outcome `{}`", outcome_raw.trim())
            };
            skipped.push(SkippedRow { row_number, reason });
            continue;
        };
        let id = match id_idx {
            Some(idx) if !cell(idx).trim().is_empty() => FounderId(cell(idx).trim().to_string()),
            _ => FounderId(format!("row-{row_number}")),
        };
        records.push(FounderRecord {
            id,
            linkedin_text: cell(linkedin_idx),
            crunchbase_text: cell(crunchbase_idx),
            company_description: cell(description_idx),
            outcome,
        });
    }
    if rows_in_chunk > 0 {
        chunk_count += 1;
    }

    if records.is_empty() {
        return Err(DatasetError::EmptyDataset);
    }
    if !skipped.is_empty() {
        log::warn!("skipped {} row(s) with missing or invalid outcome", skipped.len());
    }

    Ok(LoadOutcome {
        profiles: ProfileSet {
            records,
            source_path: path.display().to_string(),
            chunk_count,
        },
        skipped,
    })
}

/// Write the skip report as a `<input>.skipped.csv` sidecar next to the
/// input. No file is written when nothing was skipped.
pub fn write_skipped_report(input: &Path, skipped: &[SkippedRow]) -> Result<(), DatasetError> {
    if skipped.is_empty() {
        return Ok(());
    }
    let mut sidecar = input.as_os_str().to_owned();
    sidecar.push(".skipped.csv");
    let mut writer = csv::Writer::from_path(PathBuf::from(sidecar))?;
    writer.write_record(["row_number", "reason"])?;
    for row in skipped {
        writer.write_record([row.row_number.to_string().as_str(), row.reason.as_str()])?;
    }
    writer.flush()?;
    Ok(())
}

pub const PROFILES_CSV_HEADER: [&str; 5] =
    ["id", "linkedin_text", "crunchbase_text", "company_description", "outcome"];

/// Persist a profile set in the internal five-column layout used for the
/// train/test artifacts.
pub fn write_profiles_csv(path: &Path, set: &ProfileSet) -> Result<(), DatasetError> {
    let mut writer = csv::Writer::from_path(path)?;
    writer.write_record(PROFILES_CSV_HEADER)?;
    for r in &set.records {
        writer.write_record([
            r.id.as_str(),
            r.linkedin_text.as_str(),
            r.crunchbase_text.as_str(),
            r.company_description.as_str(),
            r.outcome.as_str(),
        ])?;
    }
    writer.flush()?;
    Ok(())
}

pub fn read_profiles_csv(path: &Path) -> Result<ProfileSet, DatasetError> {
    if !path.exists() {
        return Err(DatasetError::FileNotFound(path.to_path_buf()));
    }
    let mut reader = csv::Reader::from_path(path)?;
    let mut records = Vec::new();
    for record in reader.records() {
        let record = record?;
        let outcome = OutcomeLabel::parse(record.get(4).unwrap_or_default())
            .ok_or_else(|| DatasetError::CorruptArtifact(path.to_path_buf()))?;
        records.push(FounderRecord {
            id: FounderId(record.get(0).unwrap_or_default().to_string()),
            linkedin_text: record.get(1).unwrap_or_default().to_string(),
            crunchbase_text: record.get(2).unwrap_or_default().to_string(),
            company_description: record.get(3).unwrap_or_default().to_string(),
            outcome,
        });
    }
    Ok(ProfileSet {
        records,
        source_path: path.display().to_string(),
        chunk_count: 1,
    })
}

/// Render the two-line profile block used inside prompts:
///
/// ```text
/// Founder Profile: <linkedin> | <crunchbase>
/// Startup Description: <description>
/// ```
///
/// Fields are inserted verbatim; a field containing the ` | ` separator is
/// not escaped because prompt text is never re-parsed.
pub fn render_profile_prompt_block(record: &FounderRecord) -> String {
    format!(
        "Founder Profile: {} | {}\nStartup Description: {}",
        record.linkedin_text, record.crunchbase_text, record.company_description
    )
}

/// Split a profile set into disjoint train and test sets with exact per-class
/// counts. Selection is a deterministic function of `spec.seed`; both outputs
/// preserve the source-row order of their members.
pub fn stratified_split(
    set: &ProfileSet,
    spec: &SplitSpec,
) -> Result<(ProfileSet, ProfileSet), DatasetError> {
    let class_indices = |outcome: OutcomeLabel| -> Vec<usize> {
        set.records
            .iter()
            .enumerate()
            .filter(|(_, r)| r.outcome == outcome)
            .map(|(i, _)| i)
            .collect()
    };
    let successes = class_indices(OutcomeLabel::Success);
    let failures = class_indices(OutcomeLabel::Failure);

    let need_success = spec.train_success + spec.test_success;
    let need_failure = spec.train_failure + spec.test_failure;
    if successes.len() < need_success {
        return Err(DatasetError::InsufficientClassCount {
            class: "success",
            requested: need_success,
            available: successes.len(),
        });
    }
    if failures.len() < need_failure {
        return Err(DatasetError::InsufficientClassCount {
            class: "failure",
            requested: need_failure,
            available: failures.len(),
        });
    }

    // Per-class shuffle under a seeded RNG; train takes the head, test the
    // following slice. The RNG is consumed in a fixed order (successes first)
    // so the same seed always yields the same assignment.
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut shuffled_success = successes;
    shuffled_success.shuffle(&mut rng);
    let mut shuffled_failure = failures;
    shuffled_failure.shuffle(&mut rng);

    let mut train_idx: Vec<usize> = shuffled_success[..spec.train_success].to_vec();
    train_idx.extend_from_slice(&shuffled_failure[..spec.train_failure]);
    let mut test_idx: Vec<usize> =
        shuffled_success[spec.train_success..spec.train_success + spec.test_success].to_vec();
    test_idx.extend_from_slice(
        &shuffled_failure[spec.train_failure..spec.train_failure + spec.test_failure],
    );
    train_idx.sort_unstable();
    test_idx.sort_unstable();

    let subset = |indices: &[usize]| ProfileSet {
        records: indices.iter().map(|&i| set.records[i].clone()).collect(),
        source_path: set.source_path.clone(),
        chunk_count: set.chunk_count,
    };
    Ok((subset(&train_idx), subset(&test_idx)))
}
