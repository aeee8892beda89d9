//! Decision-policy compilation and refinement.
//!
//! Extracted rules are split into success and failure groups; one backend
//! call per group compiles the policy text. Refinement re-prompts with the
//! current policy, a deduplicated rules summary, and test performance, and
//! bumps the version with full lineage tracking.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock::Clock;
use crate::dataset::{FounderId, OutcomeLabel};
use crate::gateway::{ChatBackend, ChatRequest, GatewayError};
use crate::rules::{Rule, RuleOutcome};

pub const SUCCESS_EMPTY_SENTINEL: &str = "NO SUCCESS RULES AVAILABLE";
pub const FAILURE_EMPTY_SENTINEL: &str = "NO FAILURE RULES AVAILABLE";

/// System context for refinement calls.
pub const REFINE_CONTEXT: &str =
    "You are an expert evaluator of startup success decision policies.";

/// Rules embedded in a refinement prompt are capped to bound prompt size.
const RULES_SUMMARY_CAP: usize = 200;

/// Versioned two-part decision policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionPolicy {
    pub version: u32,
    pub success_text: String,
    pub failure_text: String,
    pub lineage: Vec<LineageEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LineageEntry {
    pub version: u32,
    pub trigger: String,
    pub timestamp: String,
}

impl DecisionPolicy {
    /// The unified policy document embedded in prediction prompts.
    pub fn combined_text(&self) -> String {
        format!("{}\n\n{}", self.success_text, self.failure_text)
    }
}

/// One sampled prediction inside a performance summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplePrediction {
    pub founder_id: FounderId,
    pub predicted: RuleOutcome,
    pub actual: OutcomeLabel,
    pub excerpt: String,
}

/// Feedback block fed into policy refinement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerformanceSummary {
    pub average_rl_score: f64,
    pub accuracy: f64,
    pub sample_predictions: Vec<SamplePrediction>,
}

impl PerformanceSummary {
    /// Deterministic rendering; scores formatted to three decimal places.
    pub fn render(&self) -> String {
        let mut out = format!(
            "Average RL score: {:.3}\nAccuracy: {:.3}\nSample predictions:",
            self.average_rl_score, self.accuracy
        );
        for s in &self.sample_predictions {
            out.push_str(&format!(
                "\n- {}: predicted {}, actual {}: {}",
                s.founder_id,
                s.predicted,
                s.actual.as_str(),
                s.excerpt
            ));
        }
        out
    }
}

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("corrupt policy file {path}: {message}")]
    CorruptFile { path: PathBuf, message: String },
    #[error("no policy file found in {0}")]
    NoPolicy(PathBuf),
    #[error("malformed policy export: {0}")]
    MalformedExport(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Group {
    Success,
    Failure,
}

impl Group {
    fn noun(self) -> &'static str {
        match self {
            Group::Success => "success",
            Group::Failure => "failure",
        }
    }

    fn adjective(self) -> &'static str {
        match self {
            Group::Success => "successful",
            Group::Failure => "unsuccessful",
        }
    }

    fn outcome(self) -> RuleOutcome {
        match self {
            Group::Success => RuleOutcome::High,
            Group::Failure => RuleOutcome::Low,
        }
    }
}

fn compile_prompt(group: Group, rules_block: &str) -> String {
    format!(
        "Analyse the following extracted rules from {adj} founder profiles and compile a concise \
decision policy that clearly summarises the key conditions which predict startup {noun}.\n\
Rules:\n{rules_block}\nYour output should be in the following format:\nIF <conditions> THEN \
likelihood_of_success = {outcome}.",
        adj = group.adjective(),
        noun = group.noun(),
        outcome = group.outcome()
    )
}

fn rules_block(rules: &[&Rule]) -> String {
    rules
        .iter()
        .map(|r| r.canonical_text())
        .collect::<Vec<_>>()
        .join("\n")
}

/// Compile version 1 of the policy from extracted rules. An empty group gets
/// the documented sentinel text and costs no backend call.
pub fn compile_policy(
    rules: &[Rule],
    backend: &dyn ChatBackend,
    temperature: f64,
    max_output_tokens: u32,
    clock: &dyn Clock,
) -> Result<DecisionPolicy, PolicyError> {
    let mut texts = [
        SUCCESS_EMPTY_SENTINEL.to_string(),
        FAILURE_EMPTY_SENTINEL.to_string(),
    ];
    for (slot, group) in [(0, Group::Success), (1, Group::Failure)] {
        let members: Vec<&Rule> = rules
            .iter()
            .filter(|r| r.outcome == group.outcome())
            .collect();
        if members.is_empty() {
            log::warn!("no {} rules available; using sentinel policy text", group.noun());
            continue;
        }
        let request = ChatRequest {
            conversation_id: format!("policy-{}", group.noun()),
            system_context: String::new(),
            user_message: compile_prompt(group, &rules_block(&members)),
            temperature,
            max_output_tokens,
        };
        texts[slot] = backend.complete(&request)?.text;
    }
    let [success_text, failure_text] = texts;
    Ok(DecisionPolicy {
        version: 1,
        success_text,
        failure_text,
        lineage: vec![LineageEntry {
            version: 1,
            trigger: "compiled".to_string(),
            timestamp: clock.now_rfc3339(),
        }],
    })
}

fn refine_prompt(group: Group, current: &str, rules_summary: &str, perf: &str) -> String {
    format!(
        "Refine the following decision policy for predicting startup {noun} outcomes, improving \
detail, with a strong focus on precision (minimise false positives).\nIntegrate all key signals \
from the extracted rules below without contradicting the data.\nIncorporate insights from our \
RL-based scoring mechanism: ensure that the refined policy emphasises the importance of \
high-quality reasoning that earns high RL scores by rewarding true positives and penalising \
false positives.\nUse this scoring feedback to enhance the robustness and interpretability of \
the final decision policy.\n\nCurrent decision policy:\n{current}\n\nExtracted rules:\n\
{rules_summary}\n\nTest performance:\n{perf}",
        noun = group.noun()
    )
}

/// Canonical rule texts, deduplicated exactly, ordered by founder id, capped.
fn rules_summary(rules: &[Rule], outcome: RuleOutcome) -> String {
    let mut members: Vec<&Rule> = rules.iter().filter(|r| r.outcome == outcome).collect();
    members.sort_by(|a, b| a.founder_id.cmp(&b.founder_id));
    let mut seen = std::collections::HashSet::new();
    let mut lines = Vec::new();
    for rule in members {
        let text = rule.canonical_text();
        if seen.insert(text.clone()) {
            lines.push(text);
            if lines.len() == RULES_SUMMARY_CAP {
                break;
            }
        }
    }
    lines.join("\n")
}

/// Refine both policy texts using RL feedback. Empty (refusal-shaped) replies
/// leave the policy unchanged with a logged warning; sentinel texts are never
/// sent for refinement.
pub fn refine_policy(
    policy: &DecisionPolicy,
    rules: &[Rule],
    perf: &PerformanceSummary,
    backend: &dyn ChatBackend,
    temperature: f64,
    max_output_tokens: u32,
    clock: &dyn Clock,
) -> Result<DecisionPolicy, PolicyError> {
    let perf_block = perf.render();
    let mut next_success = policy.success_text.clone();
    let mut next_failure = policy.failure_text.clone();
    let mut changed = false;

    for group in [Group::Success, Group::Failure] {
        let (current, slot): (&str, &mut String) = match group {
            Group::Success => (&policy.success_text, &mut next_success),
            Group::Failure => (&policy.failure_text, &mut next_failure),
        };
        if current == SUCCESS_EMPTY_SENTINEL || current == FAILURE_EMPTY_SENTINEL {
            continue;
        }
        let request = ChatRequest {
            conversation_id: format!("refine-{}", group.noun()),
            system_context: REFINE_CONTEXT.to_string(),
            user_message: refine_prompt(
                group,
                current,
                &rules_summary(rules, group.outcome()),
                &perf_block,
            ),
            temperature,
            max_output_tokens,
        };
        let reply = backend.complete(&request)?.text;
        if reply.trim().is_empty() {
            log::warn!(
                "refinement reply for the {} policy was empty; keeping the current policy",
                group.noun()
            );
            return Ok(policy.clone());
        }
        *slot = reply;
        changed = true;
    }

    if !changed {
        log::warn!("nothing to refine; policy unchanged");
        return Ok(policy.clone());
    }
    let mut lineage = policy.lineage.clone();
    lineage.push(LineageEntry {
        version: policy.version + 1,
        trigger: "rl_feedback".to_string(),
        timestamp: clock.now_rfc3339(),
    });
    Ok(DecisionPolicy {
        version: policy.version + 1,
        success_text: next_success,
        failure_text: next_failure,
        lineage,
    })
}

// ---------------------------------------------------------------------------
// Persistence, export, import
// ---------------------------------------------------------------------------

pub fn policy_path(dir: &Path, version: u32) -> PathBuf {
    dir.join(format!("policy_v{version}.json"))
}

pub fn save_policy(dir: &Path, policy: &DecisionPolicy) -> Result<PathBuf, PolicyError> {
    let path = policy_path(dir, policy.version);
    let body = serde_json::to_string_pretty(policy).expect("policy serializes");
    std::fs::write(&path, body)?;
    Ok(path)
}

pub fn load_policy(path: &Path) -> Result<DecisionPolicy, PolicyError> {
    let body = std::fs::read_to_string(path)?;
    serde_json::from_str(&body).map_err(|e| PolicyError::CorruptFile {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// Load the highest-versioned `policy_v<N>.json` in the directory.
pub fn load_latest_policy(dir: &Path) -> Result<DecisionPolicy, PolicyError> {
    let mut best: Option<(u32, PathBuf)> = None;
    if dir.exists() {
        for entry in std::fs::read_dir(dir)? {
            let path = entry?.path();
            let Some(name) = path.file_name().and_then(|n| n.to_str()) else {
                continue;
            };
            if let Some(version) = name
                .strip_prefix("policy_v")
                .and_then(|rest| rest.strip_suffix(".json"))
                .and_then(|v| v.parse::<u32>().ok())
            {
                if best.as_ref().is_none_or(|(b, _)| version > *b) {
                    best = Some((version, path));
                }
            }
        }
    }
    match best {
        Some((_, path)) => load_policy(&path),
        None => Err(PolicyError::NoPolicy(dir.to_path_buf())),
    }
}

const EXPORT_SUCCESS_MARKER: &str = "=== SUCCESS POLICY ===";
const EXPORT_FAILURE_MARKER: &str = "=== FAILURE POLICY ===";

/// Render the editable export format consumed by `policy import`.
pub fn export_policy_text(policy: &DecisionPolicy) -> String {
    format!(
        "{EXPORT_SUCCESS_MARKER}\n{}\n{EXPORT_FAILURE_MARKER}\n{}\n",
        policy.success_text, policy.failure_text
    )
}

/// Parse an edited export and produce the next policy version with an
/// `expert_edit` lineage entry.
pub fn import_policy_text(
    policy: &DecisionPolicy,
    edited: &str,
    clock: &dyn Clock,
) -> Result<DecisionPolicy, PolicyError> {
    let start_success = edited
        .find(EXPORT_SUCCESS_MARKER)
        .ok_or_else(|| PolicyError::MalformedExport("missing success marker".into()))?;
    let start_failure = edited
        .find(EXPORT_FAILURE_MARKER)
        .ok_or_else(|| PolicyError::MalformedExport("missing failure marker".into()))?;
    if start_failure < start_success {
        return Err(PolicyError::MalformedExport(
            "failure section precedes success section".into(),
        ));
    }
    let success_text = edited[start_success + EXPORT_SUCCESS_MARKER.len()..start_failure]
        .trim()
        .to_string();
    let failure_text = edited[start_failure + EXPORT_FAILURE_MARKER.len()..]
        .trim()
        .to_string();
    let mut lineage = policy.lineage.clone();
    lineage.push(LineageEntry {
        version: policy.version + 1,
        trigger: "expert_edit".to_string(),
        timestamp: clock.now_rfc3339(),
    });
    Ok(DecisionPolicy {
        version: policy.version + 1,
        success_text,
        failure_text,
        lineage,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clock::FixedClock;
    use crate::gateway::{ScriptEntry, ScriptedBackend};
    use crate::rules::ConditionBranch;

    fn rule(id: &str, outcome: RuleOutcome, condition: &str) -> Rule {
        Rule {
            founder_id: FounderId(id.into()),
            branches: vec![ConditionBranch {
                conditions: vec![condition.into()],
            }],
            outcome,
            raw_text: String::new(),
            via_fallback: false,
        }
    }

    fn content(matcher: &str, response: &str) -> ScriptEntry {
        ScriptEntry {
            matcher: matcher.into(),
            response: response.into(),
            prompt_tokens: 0,
            completion_tokens: 0,
        }
    }

    #[test]
    fn compile_routes_rules_to_their_group_prompt() {
        let rules = vec![
            rule("a", RuleOutcome::High, "ships fast"),
            rule("b", RuleOutcome::High, "strong network"),
            rule("c", RuleOutcome::Low, "no runway"),
            rule("d", RuleOutcome::Low, "no team"),
        ];
        // Note: "from successful" cannot match the failure prompt, whose text
        // reads "from unsuccessful".
        let mock = ScriptedBackend::new(vec![
            content("rules from successful founder profiles", "PS"),
            content("rules from unsuccessful founder profiles", "PF"),
        ]);
        let clock = FixedClock::default();
        let policy = compile_policy(&rules, &mock, 1.0, 512, &clock).unwrap();
        assert_eq!(policy.success_text, "PS");
        assert_eq!(policy.failure_text, "PF");
        assert_eq!(policy.version, 1);
        assert_eq!(policy.lineage.len(), 1);

        let calls = mock.calls();
        assert_eq!(calls.len(), 2);
        let success_prompt = &calls[0].user_message;
        assert!(success_prompt.contains("ships fast"));
        assert!(success_prompt.contains("strong network"));
        assert!(!success_prompt.contains("no runway"));
        assert!(success_prompt.contains("predict startup success"));
        let failure_prompt = &calls[1].user_message;
        assert!(failure_prompt.contains("no runway"));
        assert!(!failure_prompt.contains("ships fast"));
    }

    #[test]
    fn compile_with_empty_group_uses_sentinel_and_one_call() {
        let rules = vec![rule("a", RuleOutcome::High, "ships fast")];
        let mock = ScriptedBackend::from_replies(vec!["PS"]);
        let clock = FixedClock::default();
        let policy = compile_policy(&rules, &mock, 1.0, 512, &clock).unwrap();
        assert_eq!(policy.success_text, "PS");
        assert_eq!(policy.failure_text, FAILURE_EMPTY_SENTINEL);
        assert_eq!(mock.call_count(), 1);
    }

    fn perf() -> PerformanceSummary {
        PerformanceSummary {
            average_rl_score: 0.042,
            accuracy: 0.567,
            sample_predictions: vec![SamplePrediction {
                founder_id: FounderId("s1".into()),
                predicted: RuleOutcome::High,
                actual: OutcomeLabel::Failure,
                excerpt: "overconfident reasoning".into(),
            }],
        }
    }

    fn v1() -> DecisionPolicy {
        DecisionPolicy {
            version: 1,
            success_text: "PS".into(),
            failure_text: "PF".into(),
            lineage: vec![LineageEntry {
                version: 1,
                trigger: "compiled".into(),
                timestamp: "t".into(),
            }],
        }
    }

    #[test]
    fn refine_embeds_performance_fields_to_three_decimals() {
        let rules = vec![
            rule("a", RuleOutcome::High, "ships fast"),
            rule("c", RuleOutcome::Low, "no runway"),
        ];
        let mock = ScriptedBackend::new(vec![
            content("startup success outcomes", "PS2"),
            content("startup failure outcomes", "PF2"),
        ]);
        let clock = FixedClock::default();
        let refined = refine_policy(&v1(), &rules, &perf(), &mock, 0.0, 512, &clock).unwrap();
        assert_eq!(refined.version, 2);
        assert_eq!(refined.success_text, "PS2");
        assert_eq!(refined.failure_text, "PF2");
        assert_eq!(refined.lineage.len(), 2);
        assert_eq!(refined.lineage[1].trigger, "rl_feedback");

        for call in mock.calls() {
            assert!(call.user_message.contains("0.042"));
            assert!(call.user_message.contains("0.567"));
            assert!(call.user_message.contains("Sample predictions:"));
            assert!(call.user_message.contains("s1"));
            assert_eq!(call.system_context, REFINE_CONTEXT);
        }
        // Current policy and group rules are embedded.
        let calls = mock.calls();
        assert!(calls[0].user_message.contains("PS"));
        assert!(calls[0].user_message.contains("ships fast"));
        assert!(!calls[0].user_message.contains("no runway"));
        assert!(calls[1].user_message.contains("PF"));
    }

    #[test]
    fn refine_keeps_policy_on_empty_reply() {
        let rules = vec![rule("a", RuleOutcome::High, "x")];
        let mock = ScriptedBackend::from_replies(vec![""]);
        let clock = FixedClock::default();
        let refined = refine_policy(&v1(), &rules, &perf(), &mock, 0.0, 512, &clock).unwrap();
        assert_eq!(refined.version, 1);
        assert_eq!(refined.success_text, "PS");
    }

    #[test]
    fn two_refinements_reach_version_three() {
        let rules = vec![
            rule("a", RuleOutcome::High, "x"),
            rule("c", RuleOutcome::Low, "y"),
        ];
        let mock = ScriptedBackend::from_replies(vec!["s2", "f2", "s3", "f3"]);
        let clock = FixedClock::default();
        let p2 = refine_policy(&v1(), &rules, &perf(), &mock, 0.0, 512, &clock).unwrap();
        let p3 = refine_policy(&p2, &rules, &perf(), &mock, 0.0, 512, &clock).unwrap();
        assert_eq!(p3.version, 3);
        assert_eq!(p3.lineage.len(), 3);
        assert_eq!(p3.success_text, "s3");
    }

    #[test]
    fn rules_summary_dedupes_and_orders() {
        let rules = vec![
            rule("b", RuleOutcome::High, "same"),
            rule("a", RuleOutcome::High, "same"),
            rule("c", RuleOutcome::High, "other"),
        ];
        let summary = rules_summary(&rules, RuleOutcome::High);
        let lines: Vec<&str> = summary.lines().collect();
        assert_eq!(lines.len(), 2);
        assert!(lines[0].contains("same"));
        assert!(lines[1].contains("other"));
    }

    #[test]
    fn save_load_and_latest() {
        let dir = tempfile::tempdir().unwrap();
        let clock = FixedClock::default();
        let p1 = v1();
        save_policy(dir.path(), &p1).unwrap();
        let p2 = import_policy_text(
            &p1,
            "=== SUCCESS POLICY ===\nedited success\n=== FAILURE POLICY ===\nedited failure\n",
            &clock,
        )
        .unwrap();
        save_policy(dir.path(), &p2).unwrap();

        let latest = load_latest_policy(dir.path()).unwrap();
        assert_eq!(latest.version, 2);
        assert_eq!(latest.success_text, "edited success");
        assert_eq!(latest.lineage[1].trigger, "expert_edit");
    }

    #[test]
    fn export_import_round_trip() {
        let clock = FixedClock::default();
        let exported = export_policy_text(&v1());
        let imported = import_policy_text(&v1(), &exported, &clock).unwrap();
        assert_eq!(imported.success_text, "PS");
        assert_eq!(imported.failure_text, "PF");
        assert_eq!(imported.version, 2);

        assert!(import_policy_text(&v1(), "no markers at all", &clock).is_err());
    }
}
