//! The rule DSL: `IF <conditions> THEN likelihood_of_success = HIGH|LOW`.
//!
//! Replies from the extraction prompt arrive in many shapes: lowercase
//! keywords, bold markers, surrounding quotes, `Refined rule:` prefixes,
//! multi-line layouts, parenthetical asides. The parser is tolerant of all of
//! those but strict about structure, and extraction falls back to a regex
//! salvage pass that forces the outcome to agree with the ground truth.
//!
//! Splitting notes:
//! - conditions are separated by capitalized `AND` tokens; a lowercase `and`
//!   is prose inside a condition ("medical and entrepreneurial expertise"),
//! - `AND` inside parentheses is literal text, never a separator,
//! - an `OR` directly followed by `IF` starts a new branch; any other `OR`
//!   stays inside the condition text.

use std::fmt;
use std::path::Path;

use once_cell::sync::Lazy;
use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{FounderId, OutcomeLabel};
use crate::gateway::{ChatBackend, ChatRequest, GatewayError};
use crate::reasoning::ReasoningLog;

/// System context for the extraction call.
pub const EXTRACTION_CONTEXT: &str = "Convert the reasoning log into a single concise logical \
rule about the founder, and founder only, using the specified format.";

const EXTRACTION_EXAMPLE: &str = "Example:\nIF founder has a top-tier university background AND \
previous experience at a successful startup AND startup idea targets a rapidly growing industry \
THEN likelihood_of_success = HIGH.\nOR\nIF founder has no documented professional experience AND \
no previous entrepreneurial ventures AND lacks relevant industry knowledge THEN \
likelihood_of_success = LOW.";

/// Predicted likelihood in a rule or prediction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum RuleOutcome {
    High,
    Low,
}

impl RuleOutcome {
    pub fn as_str(&self) -> &'static str {
        match self {
            RuleOutcome::High => "HIGH",
            RuleOutcome::Low => "LOW",
        }
    }

    pub fn parse(raw: &str) -> Option<RuleOutcome> {
        match raw.trim().to_ascii_uppercase().as_str() {
            "HIGH" => Some(RuleOutcome::High),
            "LOW" => Some(RuleOutcome::Low),
            _ => None,
        }
    }

    /// The outcome implied by a ground-truth label.
    pub fn from_label(label: OutcomeLabel) -> RuleOutcome {
        match label {
            OutcomeLabel::Success => RuleOutcome::High,
            OutcomeLabel::Failure => RuleOutcome::Low,
        }
    }

    pub fn agrees_with(&self, label: OutcomeLabel) -> bool {
        *self == RuleOutcome::from_label(label)
    }
}

impl fmt::Display for RuleOutcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// AND-joined conditions; branches are OR-joined within a rule.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConditionBranch {
    pub conditions: Vec<String>,
}

/// Parse result before founder binding.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParsedRule {
    pub branches: Vec<ConditionBranch>,
    pub outcome: RuleOutcome,
}

/// A rule bound to the founder it was extracted from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rule {
    pub founder_id: FounderId,
    pub branches: Vec<ConditionBranch>,
    pub outcome: RuleOutcome,
    pub raw_text: String,
    pub via_fallback: bool,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ParseError {
    #[error("no IF clause found in `{0}`")]
    MissingIf(String),
    #[error("no THEN clause found in `{0}`")]
    MissingThen(String),
    #[error("no HIGH/LOW outcome found in `{0}`")]
    MissingOutcome(String),
    #[error("empty condition list in `{0}`")]
    EmptyConditions(String),
}

fn span(text: &str) -> String {
    let trimmed = text.trim();
    if trimmed.chars().count() <= 60 {
        trimmed.to_string()
    } else {
        let head: String = trimmed.chars().take(57).collect();
        format!("{head}...")
    }
}

/// Strip markdown bold markers, surrounding quotes, escaped underscores, and
/// `Refined rule:` prefixes before parsing.
pub fn strip_markup(text: &str) -> String {
    let mut s = text.trim().replace("**", "");
    s = s.replace("\\_", "_");
    loop {
        let t = s.trim();
        let stripped = t
            .strip_prefix('"')
            .and_then(|rest| rest.strip_suffix('"'))
            .or_else(|| {
                t.strip_prefix('\u{201c}')
                    .and_then(|r| r.strip_suffix('\u{201d}'))
            })
            .or_else(|| t.strip_prefix('`').and_then(|r| r.strip_suffix('`')));
        match stripped {
            Some(inner) => s = inner.to_string(),
            None => {
                s = t.to_string();
                break;
            }
        }
    }
    static REFINED_PREFIX: Lazy<Regex> =
        Lazy::new(|| Regex::new(r"(?i)^\s*refined\s+rule\s*:\s*").unwrap());
    REFINED_PREFIX.replace(&s, "").into_owned()
}

/// Word-token spans (byte offsets) with the paren depth at each token. Depth
/// never goes negative so an unbalanced `)` cannot swallow the rest of the
/// rule.
fn tokens_with_depth(text: &str) -> Vec<(usize, usize, usize)> {
    let mut out = Vec::new();
    let mut depth = 0usize;
    let bytes = text.as_bytes();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i];
        if c == b'(' {
            depth += 1;
            i += 1;
        } else if c == b')' {
            depth = depth.saturating_sub(1);
            i += 1;
        } else if c.is_ascii_alphabetic() {
            let start = i;
            while i < bytes.len() && bytes[i].is_ascii_alphabetic() {
                i += 1;
            }
            out.push((start, i, depth));
        } else {
            i += 1;
        }
    }
    out
}

/// Parse free text into a rule structure (without founder binding).
pub fn parse_rule(text: &str) -> Result<ParsedRule, ParseError> {
    let cleaned = strip_markup(text);
    let tokens = tokens_with_depth(&cleaned);
    let word = |t: &(usize, usize, usize)| &cleaned[t.0..t.1];

    // Anchor at the first IF token; leading prose before it is ignored.
    let first_if = tokens
        .iter()
        .position(|t| word(t).eq_ignore_ascii_case("if"))
        .ok_or_else(|| ParseError::MissingIf(span(&cleaned)))?;

    // Branch boundaries: a top-level OR whose next token is IF.
    let mut or_positions = Vec::new();
    let mut branch_starts = vec![first_if];
    for (i, tok) in tokens.iter().enumerate().skip(first_if + 1) {
        if tok.2 == 0
            && word(tok).eq_ignore_ascii_case("or")
            && tokens
                .get(i + 1)
                .is_some_and(|next| word(next).eq_ignore_ascii_case("if"))
        {
            or_positions.push(i);
            branch_starts.push(i + 1);
        }
    }

    let mut branches = Vec::new();
    let mut outcome = None;
    for (b, &start_tok) in branch_starts.iter().enumerate() {
        // Branch tokens run up to (not including) the next branch's OR.
        let end_tok = or_positions.get(b).copied().unwrap_or(tokens.len());
        let branch_tokens = &tokens[start_tok..end_tok];
        let branch_text_end = or_positions
            .get(b)
            .map(|&or_tok| tokens[or_tok].0)
            .unwrap_or(cleaned.len());
        let branch_span = &cleaned[branch_tokens[0].0..branch_text_end];

        let then_pos = branch_tokens
            .iter()
            .position(|t| t.2 == 0 && word(t).eq_ignore_ascii_case("then"))
            .ok_or_else(|| ParseError::MissingThen(span(branch_span)))?;

        // Conditions live between IF and THEN; split at top-level
        // capitalized AND tokens.
        let cond_start = branch_tokens[0].1; // byte offset just past IF
        let cond_end = branch_tokens[then_pos].0;
        let mut pieces = Vec::new();
        let mut piece_start = cond_start;
        for tok in &branch_tokens[1..then_pos] {
            if tok.2 == 0 && word(tok) == "AND" {
                pieces.push(cleaned[piece_start..tok.0].to_string());
                piece_start = tok.1;
            }
        }
        pieces.push(cleaned[piece_start..cond_end].to_string());
        let conditions: Vec<String> = pieces
            .iter()
            .map(|c| trim_condition(c))
            .filter(|c| !c.is_empty())
            .collect();
        if conditions.is_empty() {
            return Err(ParseError::EmptyConditions(span(branch_span)));
        }

        // Outcome: first HIGH/LOW token after THEN.
        let branch_outcome = branch_tokens[then_pos + 1..]
            .iter()
            .find_map(|t| RuleOutcome::parse(word(t)))
            .ok_or_else(|| ParseError::MissingOutcome(span(branch_span)))?;
        if outcome.is_none() {
            outcome = Some(branch_outcome);
        }

        branches.push(ConditionBranch { conditions });
    }

    Ok(ParsedRule {
        branches,
        outcome: outcome.expect("at least one branch parsed"),
    })
}

fn trim_condition(raw: &str) -> String {
    raw.trim_matches(|c: char| {
        c.is_whitespace() || matches!(c, ',' | ';' | '\u{2013}' | '\u{2014}')
    })
    .to_string()
}

/// Canonical single-line rendering. `parse_rule(render_rule(r))` is
/// structurally equal to `r` for canonical rules.
pub fn render_rule(branches: &[ConditionBranch], outcome: RuleOutcome) -> String {
    branches
        .iter()
        .map(|b| {
            format!(
                "IF {} THEN likelihood_of_success = {}",
                b.conditions.join(" AND "),
                outcome
            )
        })
        .collect::<Vec<_>>()
        .join(" OR ")
}

impl Rule {
    pub fn canonical_text(&self) -> String {
        render_rule(&self.branches, self.outcome)
    }
}

/// Salvage a rule from arbitrary text, forcing the outcome to the ground
/// truth. Total: garbled input yields a placeholder condition.
pub fn fallback_extract(text: &str, actual: OutcomeLabel) -> ParsedRule {
    static IF_THEN: Lazy<Regex> = Lazy::new(|| Regex::new(r"(?is)\bIF\b(.*?)\bTHEN\b").unwrap());
    let cleaned = strip_markup(text);
    let conditions: Vec<String> = IF_THEN
        .captures(&cleaned)
        .and_then(|cap| cap.get(1))
        .map(|m| {
            let body = m.as_str();
            let tokens = tokens_with_depth(body);
            let mut pieces = Vec::new();
            let mut start = 0usize;
            for tok in &tokens {
                if tok.2 == 0 && &body[tok.0..tok.1] == "AND" {
                    pieces.push(body[start..tok.0].to_string());
                    start = tok.1;
                }
            }
            pieces.push(body[start..].to_string());
            pieces
                .iter()
                .map(|c| trim_condition(c))
                .filter(|c| !c.is_empty())
                .collect()
        })
        .unwrap_or_default();
    let conditions = if conditions.is_empty() {
        vec!["see reasoning log".to_string()]
    } else {
        conditions
    };
    ParsedRule {
        branches: vec![ConditionBranch { conditions }],
        outcome: RuleOutcome::from_label(actual),
    }
}

pub fn build_extraction_prompt(reasoning_text: &str) -> String {
    format!(
        "Convert the following reasoning log into a structured logical rule explaining why the \
founder SUCCEEDED or FAILED using the format:\nIF <conditions> THEN likelihood_of_success = \
<result>.\n\n{EXTRACTION_EXAMPLE}\n\nReasoning log:\n{reasoning_text}"
    )
}

/// Extract a rule from a reasoning log via the backend. Parsing is total:
/// a malformed or ground-truth-contradicting reply routes through
/// [`fallback_extract`], so only gateway errors propagate.
pub fn extract_rule(
    log: &ReasoningLog,
    backend: &dyn ChatBackend,
    temperature: f64,
    max_output_tokens: u32,
) -> Result<Rule, GatewayError> {
    let request = ChatRequest {
        conversation_id: format!("extract-{}", log.founder_id),
        system_context: EXTRACTION_CONTEXT.to_string(),
        user_message: build_extraction_prompt(&log.text),
        temperature,
        max_output_tokens,
    };
    let reply = backend.complete(&request)?.text;
    let (parsed, via_fallback) = match parse_rule(&reply) {
        Ok(parsed) if parsed.outcome.agrees_with(log.outcome) => (parsed, false),
        Ok(disagreeing) => {
            log::debug!(
                "extracted outcome {} contradicts ground truth for {}; applying fallback",
                disagreeing.outcome,
                log.founder_id
            );
            (fallback_extract(&reply, log.outcome), true)
        }
        Err(err) => {
            log::debug!(
                "rule parse failed for {}: {err}; applying fallback",
                log.founder_id
            );
            (fallback_extract(&reply, log.outcome), true)
        }
    };
    Ok(Rule {
        founder_id: log.founder_id.clone(),
        branches: parsed.branches,
        outcome: parsed.outcome,
        raw_text: reply,
        via_fallback,
    })
}

// ---------------------------------------------------------------------------
// CSV persistence
// ---------------------------------------------------------------------------

pub const RULES_CSV_HEADER: [&str; 5] = [
    "founder_id",
    "outcome_actual",
    "rule_canonical",
    "via_fallback",
    "raw_reply",
];

pub fn write_rules_csv(path: &Path, rows: &[(Rule, OutcomeLabel)]) -> Result<(), csv::Error> {
    let mut writer = csv::Writer::from_path(path)?;
    writer.write_record(RULES_CSV_HEADER)?;
    for (rule, actual) in rows {
        writer.write_record([
            rule.founder_id.as_str(),
            actual.as_str(),
            rule.canonical_text().as_str(),
            if rule.via_fallback { "true" } else { "false" },
            rule.raw_text.as_str(),
        ])?;
    }
    writer.flush()?;
    Ok(())
}

pub fn read_rules_csv(path: &Path) -> Result<Vec<(Rule, OutcomeLabel)>, csv::Error> {
    let mut reader = csv::Reader::from_path(path)?;
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record?;
        let actual = OutcomeLabel::parse(record.get(1).unwrap_or_default())
            .unwrap_or(OutcomeLabel::Failure);
        let canonical = record.get(2).unwrap_or_default();
        let parsed =
            parse_rule(canonical).unwrap_or_else(|_| fallback_extract(canonical, actual));
        rows.push((
            Rule {
                founder_id: FounderId(record.get(0).unwrap_or_default().to_string()),
                branches: parsed.branches,
                outcome: parsed.outcome,
                raw_text: record.get(4).unwrap_or_default().to_string(),
                via_fallback: record.get(3) == Some("true"),
            },
            actual,
        ));
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::{ScriptedBackend, TokenUsage};

    fn conditions(rule: &ParsedRule) -> &[String] {
        &rule.branches[0].conditions
    }

    #[test]
    fn parses_the_three_condition_exemplar() {
        let text = "IF founder has a top-tier university background AND previous experience at \
a successful startup AND startup idea targets a rapidly growing industry THEN \
likelihood_of_success = HIGH.";
        let rule = parse_rule(text).unwrap();
        assert_eq!(rule.branches.len(), 1);
        assert_eq!(conditions(&rule).len(), 3);
        assert_eq!(rule.outcome, RuleOutcome::High);
        assert_eq!(
            conditions(&rule)[0],
            "founder has a top-tier university background"
        );
    }

    #[test]
    fn keywords_are_case_insensitive_and_spacing_tolerant() {
        let rule = parse_rule("if x then likelihood_of_success=low").unwrap();
        assert_eq!(rule.branches.len(), 1);
        assert_eq!(conditions(&rule), ["x".to_string()]);
        assert_eq!(rule.outcome, RuleOutcome::Low);
    }

    #[test]
    fn missing_if_is_reported() {
        let err = parse_rule("Founders usually succeed.").unwrap_err();
        assert!(matches!(err, ParseError::MissingIf(_)));
    }

    #[test]
    fn missing_then_and_outcome_are_reported() {
        assert!(matches!(
            parse_rule("IF x likelihood_of_success = HIGH").unwrap_err(),
            ParseError::MissingThen(_)
        ));
        assert!(matches!(
            parse_rule("IF x THEN nothing conclusive").unwrap_err(),
            ParseError::MissingOutcome(_)
        ));
    }

    #[test]
    fn blank_conditions_are_reported() {
        assert!(matches!(
            parse_rule("IF THEN likelihood_of_success = HIGH").unwrap_err(),
            ParseError::EmptyConditions(_)
        ));
    }

    #[test]
    fn lowercase_and_stays_inside_a_condition() {
        let text = "IF founder lacks professional credentials AND lacks relevant medical and \
entrepreneurial expertise AND has limited industry networking THEN likelihood_of_success = LOW.";
        let rule = parse_rule(text).unwrap();
        assert_eq!(conditions(&rule).len(), 3);
        assert_eq!(
            conditions(&rule)[1],
            "lacks relevant medical and entrepreneurial expertise"
        );
        assert_eq!(rule.outcome, RuleOutcome::Low);
    }

    #[test]
    fn parenthesized_and_is_literal() {
        let text = "IF founder attended top-tier institutions (e.g., MIT, Harvard) AND held \
leadership roles in major tech companies (e.g., CTO at Stripe) THEN likelihood_of_success = HIGH";
        let rule = parse_rule(text).unwrap();
        assert_eq!(conditions(&rule).len(), 2);
        assert!(conditions(&rule)[0].contains("(e.g., MIT, Harvard)"));

        // Even a capitalized AND is literal inside parentheses.
        let text = "IF founder has deep expertise (in AI AND robotics) AND a strong team THEN \
likelihood_of_success = HIGH";
        let rule = parse_rule(text).unwrap();
        assert_eq!(conditions(&rule).len(), 2);
        assert_eq!(
            conditions(&rule)[0],
            "founder has deep expertise (in AI AND robotics)"
        );
    }

    #[test]
    fn or_followed_by_if_starts_a_branch() {
        let text = "IF a AND b THEN likelihood_of_success = HIGH. OR IF c THEN \
likelihood_of_success = HIGH";
        let rule = parse_rule(text).unwrap();
        assert_eq!(rule.branches.len(), 2);
        assert_eq!(rule.branches[0].conditions, ["a", "b"]);
        assert_eq!(rule.branches[1].conditions, ["c"]);
    }

    #[test]
    fn bare_or_stays_inside_the_condition() {
        let text = "IF background is misaligned OR the vision is unfocused AND execution is weak \
THEN likelihood_of_success = LOW";
        let rule = parse_rule(text).unwrap();
        assert_eq!(rule.branches.len(), 1);
        assert_eq!(conditions(&rule).len(), 2);
        assert!(conditions(&rule)[0].contains("OR the vision is unfocused"));
    }

    #[test]
    fn markup_and_escapes_are_stripped() {
        let rule = parse_rule(
            "\"Refined rule:\nIF founder ships fast\nAND listens to users\nTHEN \
likelihood\\_of\\_success = **HIGH**\"",
        )
        .unwrap();
        assert_eq!(conditions(&rule).len(), 2);
        assert_eq!(rule.outcome, RuleOutcome::High);
    }

    #[test]
    fn leading_prose_before_if_is_ignored() {
        let rule = parse_rule(
            "Here is the rule with each condition clearly stated: IF founder has grit THEN \
likelihood_of_success = HIGH.",
        )
        .unwrap();
        assert_eq!(conditions(&rule), ["founder has grit".to_string()]);
    }

    #[test]
    fn render_is_canonical_and_round_trips() {
        let branches = vec![ConditionBranch {
            conditions: vec!["a".into(), "b".into()],
        }];
        let text = render_rule(&branches, RuleOutcome::High);
        assert_eq!(text, "IF a AND b THEN likelihood_of_success = HIGH");
        let reparsed = parse_rule(&text).unwrap();
        assert_eq!(reparsed.branches, branches);
        assert_eq!(reparsed.outcome, RuleOutcome::High);

        let two = vec![
            ConditionBranch {
                conditions: vec!["a".into()],
            },
            ConditionBranch {
                conditions: vec!["c".into(), "d".into()],
            },
        ];
        let text = render_rule(&two, RuleOutcome::Low);
        assert_eq!(
            text,
            "IF a THEN likelihood_of_success = LOW OR IF c AND d THEN likelihood_of_success = LOW"
        );
        assert_eq!(parse_rule(&text).unwrap().branches, two);
    }

    #[test]
    fn fallback_forces_ground_truth() {
        let salvaged = fallback_extract(
            "some prose IF a THEN likelihood_of_success = HIGH",
            OutcomeLabel::Failure,
        );
        assert_eq!(salvaged.outcome, RuleOutcome::Low);
        assert_eq!(salvaged.branches[0].conditions, ["a"]);

        let garbled = fallback_extract("no structure at all", OutcomeLabel::Failure);
        assert_eq!(garbled.outcome, RuleOutcome::Low);
        assert_eq!(garbled.branches[0].conditions, ["see reasoning log"]);

        let empty = fallback_extract("", OutcomeLabel::Success);
        assert_eq!(empty.outcome, RuleOutcome::High);
        assert_eq!(empty.branches[0].conditions, ["see reasoning log"]);
    }

    fn log(outcome: OutcomeLabel) -> ReasoningLog {
        ReasoningLog {
            founder_id: FounderId("f1".into()),
            text: "reasoning body".into(),
            outcome,
            usage: TokenUsage::default(),
        }
    }

    #[test]
    fn extraction_parses_clean_replies() {
        let mock = ScriptedBackend::from_replies(vec![
            "IF founder has extensive industry and operational experience AND a robust network \
THEN likelihood_of_success = HIGH.",
        ]);
        let rule = extract_rule(&log(OutcomeLabel::Success), &mock, 0.0, 512).unwrap();
        assert!(!rule.via_fallback);
        assert_eq!(rule.outcome, RuleOutcome::High);
        assert_eq!(rule.branches[0].conditions.len(), 2);

        // Prompt carries both exemplars and the log text.
        let prompt = &mock.calls()[0].user_message;
        assert!(prompt.contains("top-tier university background"));
        assert!(prompt.contains("no documented professional experience"));
        assert!(prompt.contains("reasoning body"));
        assert_eq!(mock.calls()[0].system_context, EXTRACTION_CONTEXT);
    }

    #[test]
    fn extraction_falls_back_on_prose() {
        let mock = ScriptedBackend::from_replies(vec!["The founder simply failed."]);
        let rule = extract_rule(&log(OutcomeLabel::Failure), &mock, 0.0, 512).unwrap();
        assert!(rule.via_fallback);
        assert_eq!(rule.outcome, RuleOutcome::Low);
        assert_eq!(rule.raw_text, "The founder simply failed.");
    }

    #[test]
    fn extraction_falls_back_on_ground_truth_mismatch() {
        let mock =
            ScriptedBackend::from_replies(vec!["IF strong team THEN likelihood_of_success = HIGH"]);
        let rule = extract_rule(&log(OutcomeLabel::Failure), &mock, 0.0, 512).unwrap();
        assert!(rule.via_fallback);
        assert_eq!(rule.outcome, RuleOutcome::Low);
        // Conditions salvaged from the reply survive the override.
        assert_eq!(rule.branches[0].conditions, ["strong team"]);
    }

    #[test]
    fn rules_csv_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rules.csv");
        let rule = Rule {
            founder_id: FounderId("f9".into()),
            branches: vec![ConditionBranch {
                conditions: vec!["has momentum".into()],
            }],
            outcome: RuleOutcome::High,
            raw_text: "raw, with commas\nand newline".into(),
            via_fallback: false,
        };
        write_rules_csv(&path, &[(rule.clone(), OutcomeLabel::Success)]).unwrap();
        let rows = read_rules_csv(&path).unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].0, rule);
        assert_eq!(rows[0].1, OutcomeLabel::Success);
    }
}
