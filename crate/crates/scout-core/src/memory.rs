//! Per-conversation memory with dynamic summarization under a token budget.
//!
//! A conversation keeps a compressed `summary` plus the most recent turns.
//! When the estimated token count exceeds the configured threshold, the
//! oldest turns are evicted and a backend call merges them into the summary.
//! States are immutable snapshots; every operation returns a new state.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::FounderId;
use crate::gateway::{estimate_tokens, ChatBackend, ChatRequest, GatewayError};

/// Prompt used to merge evicted turns into the running summary.
pub const SUMMARIZE_PROMPT: &str = "Summarise the following conversation excerpts into a concise \
paragraph preserving all decision-relevant facts:";

/// Speaker role of a remembered turn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    User,
    Assistant,
}

impl Role {
    pub fn as_str(&self) -> &'static str {
        match self {
            Role::User => "user",
            Role::Assistant => "assistant",
        }
    }
}

/// One remembered exchange turn.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub role: Role,
    pub text: String,
}

/// Snapshot of one conversation's memory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryState {
    pub conversation_id: String,
    pub summary: String,
    pub recent_turns: Vec<Turn>,
    pub token_estimate: usize,
}

/// Budget knobs for compression.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct MemoryBudget {
    /// Compression trigger and post-compression ceiling, in estimated tokens.
    pub threshold: usize,
    /// Number of most-recent turns that survive a compression pass.
    pub keep_window: usize,
}

impl Default for MemoryBudget {
    fn default() -> Self {
        MemoryBudget {
            threshold: 3000,
            keep_window: 4,
        }
    }
}

#[derive(Debug, Error)]
pub enum MemoryError {
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("corrupt memory checkpoint {path}: {message}")]
    CorruptCheckpoint { path: PathBuf, message: String },
}

impl MemoryState {
    pub fn new(conversation_id: impl Into<String>) -> Self {
        MemoryState {
            conversation_id: conversation_id.into(),
            summary: String::new(),
            recent_turns: Vec::new(),
            token_estimate: 0,
        }
    }

    /// Append one turn. No summarization happens here.
    pub fn append_turn(&self, role: Role, text: impl Into<String>) -> MemoryState {
        let mut next = self.clone();
        next.recent_turns.push(Turn {
            role,
            text: text.into(),
        });
        next.token_estimate = next.recompute_estimate();
        next
    }

    /// Estimator over the summary plus every remembered turn text.
    fn recompute_estimate(&self) -> usize {
        estimate_tokens(&self.summary) as usize
            + self
                .recent_turns
                .iter()
                .map(|t| estimate_tokens(&t.text) as usize)
                .sum::<usize>()
    }

    pub fn over_budget(&self, budget: &MemoryBudget) -> bool {
        self.token_estimate > budget.threshold
    }

    /// Compress until the estimate fits the budget. Evicted turns are merged
    /// into the summary by the backend; the keep window shrinks on each pass
    /// if one summarization is not enough, and as a last resort the summary
    /// itself is truncated with a logged warning.
    pub fn compress(
        &self,
        backend: &dyn ChatBackend,
        budget: &MemoryBudget,
    ) -> Result<MemoryState, MemoryError> {
        let mut state = self.clone();
        let mut keep = budget.keep_window;
        while state.token_estimate > budget.threshold {
            let kept_from = state.recent_turns.len().saturating_sub(keep);
            if kept_from == 0 {
                if keep == 0 || state.recent_turns.is_empty() {
                    // Nothing left to evict; the summary alone is too large.
                    state.summary = truncate_to_budget(&state.summary, budget.threshold);
                    state.token_estimate = state.recompute_estimate();
                    log::warn!(
                        "memory summary for `{}` exceeded the budget and was truncated",
                        state.conversation_id
                    );
                    break;
                }
                keep /= 2;
                continue;
            }
            let evicted: Vec<Turn> = state.recent_turns.drain(..kept_from).collect();
            let mut excerpt = String::new();
            if !state.summary.is_empty() {
                excerpt.push_str("summary: ");
                excerpt.push_str(&state.summary);
                excerpt.push('\n');
            }
            for turn in &evicted {
                excerpt.push_str(turn.role.as_str());
                excerpt.push_str(": ");
                excerpt.push_str(&turn.text);
                excerpt.push('\n');
            }
            let request = ChatRequest {
                conversation_id: state.conversation_id.clone(),
                system_context: String::new(),
                user_message: format!("{SUMMARIZE_PROMPT}\n{excerpt}"),
                temperature: 0.0,
                max_output_tokens: 1024,
            };
            let response = backend.complete(&request)?;
            state.summary = response.text;
            state.token_estimate = state.recompute_estimate();
            // Next pass, if needed, evicts deeper into the kept turns.
            keep /= 2;
        }
        Ok(state)
    }

    /// Deterministic context rendering: the summary block (when present)
    /// followed by the remembered turns in append order.
    pub fn render_context(&self) -> String {
        let mut out = String::new();
        if !self.summary.is_empty() {
            out.push_str("Conversation summary: ");
            out.push_str(&self.summary);
        }
        for turn in &self.recent_turns {
            if !out.is_empty() {
                out.push('\n');
            }
            out.push_str(turn.role.as_str());
            out.push_str(": ");
            out.push_str(&turn.text);
        }
        out
    }
}

fn truncate_to_budget(summary: &str, threshold: usize) -> String {
    let max_chars = threshold.saturating_mul(4);
    summary.chars().take(max_chars).collect()
}

// ---------------------------------------------------------------------------
// Persistence and scope handling
// ---------------------------------------------------------------------------

/// How memory is keyed across the pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum MemoryScope {
    /// Memory disabled entirely.
    Off,
    /// One conversation spans the whole run.
    #[default]
    Run,
    /// One conversation per founder.
    Founder,
}

/// File-backed conversation memory: each conversation checkpoints to
/// `memory/<conversation_id>.json` so interrupted runs resume with context.
///
/// Single writer per conversation id; distinct conversations may be used
/// concurrently.
#[derive(Debug, Clone)]
pub struct MemorySessions {
    dir: PathBuf,
    scope: MemoryScope,
    budget: MemoryBudget,
}

impl MemorySessions {
    pub fn new(out_dir: &Path, scope: MemoryScope, budget: MemoryBudget) -> Self {
        MemorySessions {
            dir: out_dir.join("memory"),
            scope,
            budget,
        }
    }

    pub fn scope(&self) -> MemoryScope {
        self.scope
    }

    pub fn enabled(&self) -> bool {
        self.scope != MemoryScope::Off
    }

    fn conversation_id(&self, founder: &FounderId) -> Option<String> {
        match self.scope {
            MemoryScope::Off => None,
            MemoryScope::Run => Some("run".to_string()),
            MemoryScope::Founder => Some(format!("founder-{founder}")),
        }
    }

    fn checkpoint_path(&self, conversation_id: &str) -> PathBuf {
        self.dir.join(format!("{conversation_id}.json"))
    }

    pub fn load(&self, founder: &FounderId) -> Result<Option<MemoryState>, MemoryError> {
        let Some(id) = self.conversation_id(founder) else {
            return Ok(None);
        };
        let path = self.checkpoint_path(&id);
        if !path.exists() {
            return Ok(Some(MemoryState::new(id)));
        }
        let body = std::fs::read_to_string(&path)?;
        let state = serde_json::from_str(&body).map_err(|e| MemoryError::CorruptCheckpoint {
            path: path.clone(),
            message: e.to_string(),
        })?;
        Ok(Some(state))
    }

    pub fn save(&self, state: &MemoryState) -> Result<(), MemoryError> {
        std::fs::create_dir_all(&self.dir)?;
        let path = self.checkpoint_path(&state.conversation_id);
        let body = serde_json::to_string_pretty(state).expect("memory state serializes");
        std::fs::write(path, body)?;
        Ok(())
    }

    /// Rendered context for the founder's conversation, empty when disabled.
    pub fn context_for(&self, founder: &FounderId) -> Result<String, MemoryError> {
        Ok(self
            .load(founder)?
            .map(|s| s.render_context())
            .unwrap_or_default())
    }

    /// Record one exchange, compressing and checkpointing as needed.
    pub fn record_exchange(
        &self,
        founder: &FounderId,
        user_text: &str,
        assistant_text: &str,
        backend: &dyn ChatBackend,
    ) -> Result<(), MemoryError> {
        let Some(state) = self.load(founder)? else {
            return Ok(());
        };
        let mut state = state
            .append_turn(Role::User, user_text)
            .append_turn(Role::Assistant, assistant_text);
        if state.over_budget(&self.budget) {
            state = state.compress(backend, &self.budget)?;
        }
        self.save(&state)
    }

    /// Remove all checkpoints, for fresh runs.
    pub fn reset(&self) -> Result<(), MemoryError> {
        if self.dir.exists() {
            std::fs::remove_dir_all(&self.dir)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::ScriptedBackend;

    #[test]
    fn append_preserves_order_and_updates_estimate() {
        let state = MemoryState::new("c");
        let state = state.append_turn(Role::User, "hi");
        assert_eq!(state.recent_turns.len(), 1);
        let state = state.append_turn(Role::Assistant, "hello there");
        assert_eq!(state.recent_turns[0].text, "hi");
        assert_eq!(state.recent_turns[1].text, "hello there");

        // Recompute the estimator independently of the implementation path.
        let expected = ["hi", "hello there"]
            .iter()
            .map(|t| (t.chars().count() + 3) / 4)
            .sum::<usize>();
        assert_eq!(state.token_estimate, expected);
    }

    #[test]
    fn compress_keeps_window_and_absorbs_evicted_turns() {
        let mut state = MemoryState::new("c");
        for i in 0..10 {
            state = state.append_turn(Role::User, format!("turn number {i} padded out"));
        }
        let budget = MemoryBudget {
            threshold: 40,
            keep_window: 4,
        };
        assert!(state.over_budget(&budget));
        let mock = ScriptedBackend::from_replies(vec!["S"]);
        let compressed = state.compress(&mock, &budget).unwrap();
        assert_eq!(compressed.recent_turns.len(), 4);
        assert!(compressed.summary.contains('S'));
        assert!(compressed.token_estimate <= budget.threshold);

        // Every evicted turn's text went into the summarization prompt.
        let calls = mock.calls();
        assert_eq!(calls.len(), 1);
        for i in 0..6 {
            assert!(calls[0].user_message.contains(&format!("turn number {i}")));
        }
        assert!(calls[0].user_message.starts_with(SUMMARIZE_PROMPT));
        // The kept turns were not sent for summarization.
        assert!(!calls[0].user_message.contains("turn number 9"));
    }

    #[test]
    fn compress_absorbs_existing_summary() {
        let mut state = MemoryState::new("c");
        state.summary = "earlier facts".into();
        state.token_estimate = 100;
        state = state.append_turn(Role::User, "a very long turn that overflows the budget");
        let budget = MemoryBudget {
            threshold: 3,
            keep_window: 0,
        };
        let mock = ScriptedBackend::from_replies(vec!["ok"]);
        let compressed = state.compress(&mock, &budget).unwrap();
        let calls = mock.calls();
        assert!(calls[0].user_message.contains("summary: earlier facts"));
        assert!(compressed.token_estimate <= budget.threshold);
    }

    #[test]
    fn oversized_summary_reply_is_truncated_to_budget() {
        let mut state = MemoryState::new("c");
        for i in 0..8 {
            state = state.append_turn(Role::User, format!("long filler text number {i}"));
        }
        let budget = MemoryBudget {
            threshold: 8,
            keep_window: 2,
        };
        let huge = "x".repeat(4000);
        let mock = ScriptedBackend::new(vec![crate::gateway::ScriptEntry {
            matcher: "Summarise".into(),
            response: huge,
            prompt_tokens: 0,
            completion_tokens: 0,
        }]);
        let compressed = state.compress(&mock, &budget).unwrap();
        assert!(compressed.token_estimate <= budget.threshold);
    }

    #[test]
    fn render_layout() {
        let empty = MemoryState::new("c");
        assert_eq!(empty.render_context(), "");

        let mut state = MemoryState::new("c");
        state.summary = "S".into();
        let state = state.append_turn(Role::User, "q");
        assert_eq!(state.render_context(), "Conversation summary: S\nuser: q");
        // Pure function: repeated rendering is byte-identical.
        assert_eq!(state.render_context(), state.render_context());
    }

    #[test]
    fn sessions_isolate_conversations_and_persist() {
        let dir = tempfile::tempdir().unwrap();
        let sessions =
            MemorySessions::new(dir.path(), MemoryScope::Founder, MemoryBudget::default());
        let mock = ScriptedBackend::from_replies(Vec::<String>::new());
        let a = FounderId("a".into());
        let b = FounderId("b".into());
        sessions
            .record_exchange(&a, "question a", "answer a", &mock)
            .unwrap();
        sessions
            .record_exchange(&b, "question b", "answer b", &mock)
            .unwrap();

        let ctx_a = sessions.context_for(&a).unwrap();
        let ctx_b = sessions.context_for(&b).unwrap();
        assert!(ctx_a.contains("question a") && !ctx_a.contains("question b"));
        assert!(ctx_b.contains("answer b") && !ctx_b.contains("answer a"));
        assert!(dir.path().join("memory/founder-a.json").exists());
    }

    #[test]
    fn off_scope_is_a_no_op() {
        let dir = tempfile::tempdir().unwrap();
        let sessions = MemorySessions::new(dir.path(), MemoryScope::Off, MemoryBudget::default());
        let mock = ScriptedBackend::from_replies(Vec::<String>::new());
        let f = FounderId("x".into());
        sessions.record_exchange(&f, "u", "a", &mock).unwrap();
        assert_eq!(sessions.context_for(&f).unwrap(), "");
        assert!(!dir.path().join("memory").exists());
    }
}
