//! Chain-of-thought reasoning-log generation with periodic checkpointing.
//!
//! Each training founder is shown to the backend together with the
//! ground-truth outcome; the reply is stored verbatim as that founder's
//! reasoning log. The batch driver checkpoints to CSV so a crashed run
//! re-queries only the founders that are missing.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{render_profile_prompt_block, FounderId, FounderRecord, OutcomeLabel};
use crate::gateway::{ChatBackend, ChatRequest, GatewayError, TokenUsage};
use crate::memory::{MemoryError, MemorySessions};

/// System context for reasoning-log generation.
pub const REASONING_CONTEXT: &str = "You are an expert startup analyst. Given a founder's \
background and startup description, provide a concise, clear, structured reflection explaining \
the key reason(s) for founder success or failure.";

const TASK_INSTRUCTION: &str =
    "Task: Provide a step-by-step explanation of the factors contributing to this outcome.";

/// One founder's reasoning trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReasoningLog {
    pub founder_id: FounderId,
    pub text: String,
    pub outcome: OutcomeLabel,
    pub usage: TokenUsage,
}

#[derive(Debug, Error)]
pub enum ReasoningError {
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Memory(#[from] MemoryError),
    #[error("backend returned a whitespace-only reply for founder {0}")]
    EmptyReply(FounderId),
    #[error("checkpoint error: {0}")]
    Checkpoint(#[from] csv::Error),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// The four prompt blocks, assembled in a fixed order. Byte-identical across
/// runs for a fixed record; conversation memory travels in the system
/// context, never inside this prompt.
pub fn build_reasoning_prompt(record: &FounderRecord) -> String {
    format!(
        "{}\nOutcome: {}\n{}",
        render_profile_prompt_block(record),
        record.outcome.as_str(),
        TASK_INSTRUCTION
    )
}

/// Compose the system context with the rendered memory context, when any.
pub fn compose_system_context(base: &str, memory_context: &str) -> String {
    if memory_context.is_empty() {
        base.to_string()
    } else {
        format!("{base}\n\n{memory_context}")
    }
}

/// Generation knobs shared by the batch driver.
#[derive(Debug, Clone, Copy)]
pub struct ReasoningOptions {
    pub temperature: f64,
    pub max_output_tokens: u32,
    pub checkpoint_every: usize,
    pub max_inflight: usize,
}

impl Default for ReasoningOptions {
    fn default() -> Self {
        ReasoningOptions {
            temperature: 1.0,
            max_output_tokens: 2048,
            checkpoint_every: 10,
            max_inflight: 1,
        }
    }
}

/// Generate one reasoning log. The exchange is appended to the founder's
/// conversation memory when memory is enabled.
pub fn generate_reasoning(
    record: &FounderRecord,
    backend: &dyn ChatBackend,
    sessions: &MemorySessions,
    options: &ReasoningOptions,
) -> Result<ReasoningLog, ReasoningError> {
    let memory_context = sessions.context_for(&record.id)?;
    let user_message = build_reasoning_prompt(record);
    let request = ChatRequest {
        conversation_id: format!("reason-{}", record.id),
        system_context: compose_system_context(REASONING_CONTEXT, &memory_context),
        user_message: user_message.clone(),
        temperature: options.temperature,
        max_output_tokens: options.max_output_tokens,
    };
    let response = backend.complete(&request)?;
    if response.text.trim().is_empty() {
        return Err(ReasoningError::EmptyReply(record.id.clone()));
    }
    sessions.record_exchange(&record.id, &user_message, &response.text, backend)?;
    Ok(ReasoningLog {
        founder_id: record.id.clone(),
        text: response.text,
        outcome: record.outcome,
        usage: response.usage,
    })
}

/// One row of the reasoning checkpoint CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub founder_id: FounderId,
    pub outcome: OutcomeLabel,
    pub reasoning_text: String,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    pub status: String,
}

impl LogRow {
    pub fn is_ok(&self) -> bool {
        self.status == "ok"
    }

    pub fn into_log(self) -> Option<ReasoningLog> {
        if !self.is_ok() {
            return None;
        }
        Some(ReasoningLog {
            founder_id: self.founder_id,
            text: self.reasoning_text,
            outcome: self.outcome,
            usage: TokenUsage {
                prompt_tokens: self.prompt_tokens,
                completion_tokens: self.completion_tokens,
                estimated: false,
            },
        })
    }
}

/// True on the rows after which a checkpoint must be written: every
/// `every`-th completion and the final one.
pub fn should_checkpoint(done: usize, total: usize, every: usize) -> bool {
    done == total || (every > 0 && done % every == 0)
}

/// Generate reasoning logs for every record, in record order.
///
/// Founders already present in the checkpoint with an `ok` row are skipped;
/// per-founder failures become `error:` rows and never abort the batch. When
/// memory is per-founder, up to `max_inflight` founders are processed
/// concurrently (a single run-wide conversation forces sequential order).
pub fn generate_all(
    records: &[FounderRecord],
    backend: &dyn ChatBackend,
    sessions: &MemorySessions,
    options: &ReasoningOptions,
    checkpoint_path: &Path,
) -> Result<Vec<LogRow>, ReasoningError> {
    let existing: BTreeMap<FounderId, LogRow> = if checkpoint_path.exists() {
        read_log_rows(checkpoint_path)?
            .into_iter()
            .map(|row| (row.founder_id.clone(), row))
            .collect()
    } else {
        BTreeMap::new()
    };

    let mut rows: Vec<Option<LogRow>> = records
        .iter()
        .map(|r| existing.get(&r.id).filter(|row| row.is_ok()).cloned())
        .collect();

    let pending: Vec<usize> = (0..records.len()).filter(|&i| rows[i].is_none()).collect();
    let parallel = options.max_inflight > 1
        && sessions.scope() == crate::memory::MemoryScope::Founder
        && pending.len() > 1;

    let run_one = |idx: usize| -> LogRow {
        let record = &records[idx];
        match generate_reasoning(record, backend, sessions, options) {
            Ok(log) => LogRow {
                founder_id: log.founder_id,
                outcome: log.outcome,
                reasoning_text: log.text,
                prompt_tokens: log.usage.prompt_tokens,
                completion_tokens: log.usage.completion_tokens,
                status: "ok".to_string(),
            },
            Err(err) => {
                log::warn!("reasoning failed for founder {}: {err}", record.id);
                LogRow {
                    founder_id: record.id.clone(),
                    outcome: record.outcome,
                    reasoning_text: String::new(),
                    prompt_tokens: 0,
                    completion_tokens: 0,
                    status: format!("error: {err}"),
                }
            }
        }
    };

    let mut done = records.len() - pending.len();
    if parallel {
        for chunk in pending.chunks(options.max_inflight) {
            let produced: Vec<(usize, LogRow)> = std::thread::scope(|scope| {
                let run_one = &run_one;
                let handles: Vec<_> = chunk
                    .iter()
                    .map(|&idx| (idx, scope.spawn(move || run_one(idx))))
                    .collect();
                handles
                    .into_iter()
                    .map(|(idx, h)| (idx, h.join().expect("reasoning worker panicked")))
                    .collect()
            });
            for (idx, row) in produced {
                rows[idx] = Some(row);
                done += 1;
            }
            if should_checkpoint(done, records.len(), options.checkpoint_every) {
                write_partial_checkpoint(checkpoint_path, &rows)?;
            }
        }
    } else {
        for idx in pending {
            rows[idx] = Some(run_one(idx));
            done += 1;
            if should_checkpoint(done, records.len(), options.checkpoint_every) {
                write_partial_checkpoint(checkpoint_path, &rows)?;
            }
        }
    }

    let rows: Vec<LogRow> = rows.into_iter().flatten().collect();
    write_log_rows(checkpoint_path, &rows)?;
    Ok(rows)
}

fn write_partial_checkpoint(path: &Path, rows: &[Option<LogRow>]) -> Result<(), ReasoningError> {
    let complete: Vec<LogRow> = rows.iter().flatten().cloned().collect();
    write_log_rows(path, &complete)?;
    Ok(())
}

pub const LOGS_CSV_HEADER: [&str; 6] = [
    "founder_id",
    "outcome",
    "reasoning_text",
    "prompt_tokens",
    "completion_tokens",
    "status",
];

pub fn write_log_rows(path: &Path, rows: &[LogRow]) -> Result<(), csv::Error> {
    let mut writer = csv::Writer::from_path(path)?;
    writer.write_record(LOGS_CSV_HEADER)?;
    for row in rows {
        writer.write_record([
            row.founder_id.as_str(),
            row.outcome.as_str(),
            row.reasoning_text.as_str(),
            row.prompt_tokens.to_string().as_str(),
            row.completion_tokens.to_string().as_str(),
            row.status.as_str(),
        ])?;
    }
    writer.flush()?;
    Ok(())
}

pub fn read_log_rows(path: &Path) -> Result<Vec<LogRow>, csv::Error> {
    let mut reader = csv::Reader::from_path(path)?;
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record?;
        rows.push(LogRow {
            founder_id: FounderId(record.get(0).unwrap_or_default().to_string()),
            outcome: OutcomeLabel::parse(record.get(1).unwrap_or_default())
                .unwrap_or(OutcomeLabel::Failure),
            reasoning_text: record.get(2).unwrap_or_default().to_string(),
            prompt_tokens: record.get(3).and_then(|v| v.parse().ok()).unwrap_or(0),
            completion_tokens: record.get(4).and_then(|v| v.parse().ok()).unwrap_or(0),
            status: record.get(5).unwrap_or("ok").to_string(),
        });
    }
    Ok(rows)
}
