//! Chat-completion gateway: one trait, two backends.
//!
//! [`HttpBackend`] talks to any OpenAI-compatible chat-completions endpoint
//! with bounded retry on transient failures. [`ScriptedBackend`] replays a
//! JSON script deterministically and records every request, which is what
//! makes golden-file pipeline tests possible.
//!
//! The gateway never rewrites prompt text: whatever the caller puts in
//! [`ChatRequest::system_context`] and [`ChatRequest::user_message`] is what
//! the backend sees.

use std::path::Path;
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// A single chat-completion request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub conversation_id: String,
    pub system_context: String,
    pub user_message: String,
    pub temperature: f64,
    pub max_output_tokens: u32,
}

/// Token counts for one call. `estimated` is set when the backend did not
/// report usage and the gateway fell back to `ceil(chars / 4)`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenUsage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    #[serde(default)]
    pub estimated: bool,
}

/// The backend's full reply plus its usage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub text: String,
    pub usage: TokenUsage,
}

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("authentication failed: {0}")]
    Auth(String),
    #[error("transport error after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },
    #[error("mock script exhausted at call {call_index} (no entry matches the prompt)")]
    ScriptExhausted { call_index: usize },
    #[error("malformed backend reply: {0}")]
    MalformedReply(String),
}

/// Abstraction over chat-completion backends. Implementations must be safe
/// to share across threads; call ordering for a given conversation is the
/// caller's responsibility.
pub trait ChatBackend: Send + Sync {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, GatewayError>;

    fn name(&self) -> &'static str {
        "backend"
    }
}

/// Token estimate used whenever a backend omits usage data.
pub fn estimate_tokens(text: &str) -> u64 {
    (text.chars().count() as u64).div_ceil(4)
}

// ---------------------------------------------------------------------------
// Cost accounting
// ---------------------------------------------------------------------------

/// Cumulative token usage and estimated spend across calls.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub total_prompt_tokens: u64,
    pub total_completion_tokens: u64,
    pub call_count: u64,
    pub estimated_cost: f64,
    /// True when any contributing usage was estimated rather than reported.
    pub estimated: bool,
    pub prompt_rate: f64,
    pub completion_rate: f64,
}

impl CostReport {
    pub fn new(prompt_rate: f64, completion_rate: f64) -> Self {
        CostReport {
            total_prompt_tokens: 0,
            total_completion_tokens: 0,
            call_count: 0,
            estimated_cost: 0.0,
            estimated: false,
            prompt_rate,
            completion_rate,
        }
    }
}

/// Fold one call's usage into the report. Totals are additive and the cost is
/// recomputed from the totals, so the fold is order-independent.
pub fn accumulate_usage(report: CostReport, usage: TokenUsage) -> CostReport {
    let total_prompt_tokens = report.total_prompt_tokens + usage.prompt_tokens;
    let total_completion_tokens = report.total_completion_tokens + usage.completion_tokens;
    CostReport {
        total_prompt_tokens,
        total_completion_tokens,
        call_count: report.call_count + 1,
        estimated_cost: report.prompt_rate * total_prompt_tokens as f64
            + report.completion_rate * total_completion_tokens as f64,
        estimated: report.estimated || usage.estimated,
        ..report
    }
}

// ---------------------------------------------------------------------------
// Scripted mock backend
// ---------------------------------------------------------------------------

/// One entry of a mock script.
///
/// `match` is either the literal string `next` (sequence mode: the entry
/// answers whatever call reaches it first and is then consumed) or a literal
/// substring the user message must contain (content mode: the entry is
/// reusable). Entries are scanned in script order on every call.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScriptEntry {
    #[serde(rename = "match")]
    pub matcher: String,
    pub response: String,
    #[serde(default)]
    pub prompt_tokens: u64,
    #[serde(default)]
    pub completion_tokens: u64,
}

#[derive(Debug, Default)]
struct ScriptState {
    consumed: Vec<bool>,
    calls: Vec<ChatRequest>,
}

/// Deterministic scripted backend. Identical script + identical call
/// sequence always produces a byte-identical response sequence.
#[derive(Debug)]
pub struct ScriptedBackend {
    entries: Vec<ScriptEntry>,
    state: Mutex<ScriptState>,
}

impl ScriptedBackend {
    pub fn new(entries: Vec<ScriptEntry>) -> Self {
        let consumed = vec![false; entries.len()];
        ScriptedBackend {
            entries,
            state: Mutex::new(ScriptState {
                consumed,
                calls: Vec::new(),
            }),
        }
    }

    /// Load a script from a JSON file: a list of
    /// `{match, response, prompt_tokens, completion_tokens}` objects.
    pub fn from_script_file(path: &Path) -> Result<Self, GatewayError> {
        let body = std::fs::read_to_string(path).map_err(|e| {
            GatewayError::MalformedReply(format!("cannot read mock script {}: {e}", path.display()))
        })?;
        let entries: Vec<ScriptEntry> = serde_json::from_str(&body).map_err(|e| {
            GatewayError::MalformedReply(format!("bad mock script {}: {e}", path.display()))
        })?;
        Ok(ScriptedBackend::new(entries))
    }

    /// Convenience constructor: a pure sequence script with zero usage.
    pub fn from_replies<S: Into<String>>(replies: Vec<S>) -> Self {
        ScriptedBackend::new(
            replies
                .into_iter()
                .map(|r| ScriptEntry {
                    matcher: "next".to_string(),
                    response: r.into(),
                    prompt_tokens: 0,
                    completion_tokens: 0,
                })
                .collect(),
        )
    }

    /// All requests received so far, in call order.
    pub fn calls(&self) -> Vec<ChatRequest> {
        self.state.lock().unwrap().calls.clone()
    }

    pub fn call_count(&self) -> usize {
        self.state.lock().unwrap().calls.len()
    }
}

impl ChatBackend for ScriptedBackend {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        let mut state = self.state.lock().unwrap();
        state.calls.push(request.clone());
        let call_index = state.calls.len();
        for (i, entry) in self.entries.iter().enumerate() {
            let hit = if entry.matcher == "next" {
                if state.consumed[i] {
                    continue;
                }
                state.consumed[i] = true;
                true
            } else {
                request.user_message.contains(&entry.matcher)
            };
            if hit {
                return Ok(ChatResponse {
                    text: entry.response.clone(),
                    usage: TokenUsage {
                        prompt_tokens: entry.prompt_tokens,
                        completion_tokens: entry.completion_tokens,
                        estimated: false,
                    },
                });
            }
        }
        Err(GatewayError::ScriptExhausted { call_index })
    }

    fn name(&self) -> &'static str {
        "mock"
    }
}

// ---------------------------------------------------------------------------
// Live HTTP backend (OpenAI-compatible)
// ---------------------------------------------------------------------------

/// Retry policy for the live backend. Only transport failures, HTTP 5xx, and
/// HTTP 429 are retried; auth failures are surfaced immediately.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub base_delay_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_retries: 3,
            base_delay_ms: 1000,
        }
    }
}

impl RetryPolicy {
    /// Delay before retry `attempt` (0-based): base, 2x base, 4x base, ...
    pub fn delay_for(&self, attempt: u32) -> Duration {
        Duration::from_millis(self.base_delay_ms.saturating_mul(1u64 << attempt.min(16)))
    }
}

/// Live backend for OpenAI-compatible `/chat/completions` endpoints.
pub struct HttpBackend {
    endpoint: String,
    model: String,
    api_key: String,
    retry: RetryPolicy,
    client: reqwest::blocking::Client,
}

#[derive(Serialize)]
struct WireMessage<'a> {
    role: &'static str,
    content: &'a str,
}

#[derive(Serialize)]
struct WireRequest<'a> {
    model: &'a str,
    messages: Vec<WireMessage<'a>>,
    temperature: f64,
    max_tokens: u32,
}

#[derive(Deserialize)]
struct WireChoiceMessage {
    content: Option<String>,
}

#[derive(Deserialize)]
struct WireChoice {
    message: WireChoiceMessage,
}

#[derive(Deserialize)]
struct WireUsage {
    prompt_tokens: Option<u64>,
    completion_tokens: Option<u64>,
}

#[derive(Deserialize)]
struct WireResponse {
    choices: Vec<WireChoice>,
    usage: Option<WireUsage>,
}

impl HttpBackend {
    pub fn new(endpoint: String, model: String, api_key: String, retry: RetryPolicy) -> Self {
        HttpBackend {
            endpoint,
            model,
            api_key,
            retry,
            client: reqwest::blocking::Client::new(),
        }
    }

    fn attempt(&self, request: &ChatRequest) -> Result<ChatResponse, AttemptError> {
        let body = WireRequest {
            model: &self.model,
            messages: vec![
                WireMessage {
                    role: "system",
                    content: &request.system_context,
                },
                WireMessage {
                    role: "user",
                    content: &request.user_message,
                },
            ],
            temperature: request.temperature,
            max_tokens: request.max_output_tokens,
        };
        let response = self
            .client
            .post(&self.endpoint)
            .bearer_auth(&self.api_key)
            .json(&body)
            .send()
            .map_err(|e| AttemptError::Retryable(e.to_string()))?;

        let status = response.status();
        if status.as_u16() == 401 || status.as_u16() == 403 {
            return Err(AttemptError::Auth(format!("endpoint returned {status}")));
        }
        if status.as_u16() == 429 || status.is_server_error() {
            return Err(AttemptError::Retryable(format!("endpoint returned {status}")));
        }
        if !status.is_success() {
            return Err(AttemptError::Fatal(format!("endpoint returned {status}")));
        }

        let wire: WireResponse = response
            .json()
            .map_err(|e| AttemptError::Fatal(format!("unparsable response body: {e}")))?;
        let text = wire
            .choices
            .first()
            .and_then(|c| c.message.content.clone())
            .ok_or_else(|| AttemptError::Fatal("response carries no message content".into()))?;

        let usage = match wire.usage {
            Some(WireUsage {
                prompt_tokens: Some(p),
                completion_tokens: Some(c),
            }) => TokenUsage {
                prompt_tokens: p,
                completion_tokens: c,
                estimated: false,
            },
            _ => TokenUsage {
                prompt_tokens: estimate_tokens(&request.system_context)
                    + estimate_tokens(&request.user_message),
                completion_tokens: estimate_tokens(&text),
                estimated: true,
            },
        };
        Ok(ChatResponse { text, usage })
    }
}

enum AttemptError {
    Auth(String),
    Retryable(String),
    Fatal(String),
}

impl ChatBackend for HttpBackend {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        let mut attempts = 0u32;
        loop {
            attempts += 1;
            match self.attempt(request) {
                Ok(response) => return Ok(response),
                Err(AttemptError::Auth(message)) => return Err(GatewayError::Auth(message)),
                Err(AttemptError::Fatal(message)) => {
                    return Err(GatewayError::Transport { attempts, message })
                }
                Err(AttemptError::Retryable(message)) => {
                    if attempts > self.retry.max_retries {
                        return Err(GatewayError::Transport { attempts, message });
                    }
                    let delay = self.retry.delay_for(attempts - 1);
                    log::warn!(
                        "transient backend failure (attempt {attempts}): {message}; retrying in {delay:?}"
                    );
                    std::thread::sleep(delay);
                }
            }
        }
    }

    fn name(&self) -> &'static str {
        "http"
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn request(user: &str) -> ChatRequest {
        ChatRequest {
            conversation_id: "c".into(),
            system_context: "sys".into(),
            user_message: user.into(),
            temperature: 0.0,
            max_output_tokens: 64,
        }
    }

    #[test]
    fn sequence_mode_replays_in_order_then_exhausts() {
        let mock = ScriptedBackend::from_replies(vec!["one", "two"]);
        assert_eq!(mock.complete(&request("a")).unwrap().text, "one");
        assert_eq!(mock.complete(&request("b")).unwrap().text, "two");
        let err = mock.complete(&request("c")).unwrap_err();
        assert!(matches!(err, GatewayError::ScriptExhausted { call_index: 3 }));
    }

    #[test]
    fn content_mode_entries_are_reusable() {
        let mock = ScriptedBackend::new(vec![ScriptEntry {
            matcher: "ping".into(),
            response: "pong".into(),
            prompt_tokens: 3,
            completion_tokens: 1,
        }]);
        for _ in 0..3 {
            let resp = mock.complete(&request("please ping now")).unwrap();
            assert_eq!(resp.text, "pong");
            assert_eq!(resp.usage.prompt_tokens, 3);
        }
        assert!(mock.complete(&request("no match")).is_err());
        assert_eq!(mock.call_count(), 4);
    }

    #[test]
    fn mock_passes_prompts_through_verbatim() {
        let mock = ScriptedBackend::from_replies(vec!["HELLO"]);
        let req = request("exact prompt bytes\nwith newline");
        mock.complete(&req).unwrap();
        let calls = mock.calls();
        assert_eq!(calls.len(), 1);
        assert_eq!(calls[0].user_message, "exact prompt bytes\nwith newline");
        assert_eq!(calls[0].system_context, "sys");
    }

    #[test]
    fn identical_scripts_yield_identical_response_sequences() {
        let script = vec![
            ScriptEntry {
                matcher: "alpha".into(),
                response: "A".into(),
                prompt_tokens: 1,
                completion_tokens: 1,
            },
            ScriptEntry {
                matcher: "next".into(),
                response: "B".into(),
                prompt_tokens: 2,
                completion_tokens: 2,
            },
        ];
        let run = |entries: Vec<ScriptEntry>| {
            let mock = ScriptedBackend::new(entries);
            vec![
                mock.complete(&request("alpha one")).unwrap(),
                mock.complete(&request("beta")).unwrap(),
            ]
        };
        assert_eq!(run(script.clone()), run(script));
    }

    #[test]
    fn usage_accumulation_counts_and_costs() {
        let report = CostReport::new(0.5, 2.0);
        let report = accumulate_usage(
            report,
            TokenUsage {
                prompt_tokens: 10,
                completion_tokens: 5,
                estimated: false,
            },
        );
        assert_eq!(report.total_prompt_tokens, 10);
        assert_eq!(report.total_completion_tokens, 5);
        assert_eq!(report.call_count, 1);
        assert!((report.estimated_cost - (0.5 * 10.0 + 2.0 * 5.0)).abs() < 1e-12);

        let report = accumulate_usage(report, TokenUsage::default());
        assert_eq!(report.call_count, 2);
        assert_eq!(report.total_prompt_tokens, 10);
    }

    #[test]
    fn estimated_usage_taints_the_report() {
        let report = accumulate_usage(
            CostReport::new(0.0, 0.0),
            TokenUsage {
                prompt_tokens: 1,
                completion_tokens: 1,
                estimated: true,
            },
        );
        assert!(report.estimated);
    }

    #[test]
    fn token_estimator_rounds_up() {
        assert_eq!(estimate_tokens(""), 0);
        assert_eq!(estimate_tokens("abcd"), 1);
        assert_eq!(estimate_tokens("abcde"), 2);
    }

    #[test]
    fn retry_delays_double() {
        let retry = RetryPolicy {
            max_retries: 3,
            base_delay_ms: 1000,
        };
        assert_eq!(retry.delay_for(0), Duration::from_millis(1000));
        assert_eq!(retry.delay_for(1), Duration::from_millis(2000));
        assert_eq!(retry.delay_for(2), Duration::from_millis(4000));
    }
}
