//! Final HIGH/LOW predictions: candidate generation, ensemble majority
//! voting, and the strict-evaluator refinement pass.

use std::path::Path;

use once_cell::sync::Lazy;
use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{render_profile_prompt_block, FounderId, FounderRecord, OutcomeLabel};
use crate::gateway::{ChatBackend, ChatRequest, GatewayError};
use crate::policy::DecisionPolicy;
use crate::reasoning::compose_system_context;
use crate::rules::RuleOutcome;

/// System context for candidate generation.
pub const PREDICTION_CONTEXT: &str = "Predict the likelihood of success (HIGH or LOW) based on \
the provided founder profile and decision policy, and provide a brief explanation of your \
reasoning.";

/// System context for the two-step refinement pass.
pub const REFINEMENT_CONTEXT: &str =
    "You are a strict evaluator of startup success predictions.";

/// One candidate reply, parsed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Candidate {
    pub label: RuleOutcome,
    pub explanation: String,
    pub raw_reply: String,
}

/// The voted (and possibly refined) prediction for one founder.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FinalPrediction {
    pub founder_id: FounderId,
    pub label: RuleOutcome,
    pub explanation: String,
    pub candidates: Vec<Candidate>,
    pub refined: bool,
}

#[derive(Debug, Error)]
pub enum PredictionError {
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error("no prediction found in reply `{0}`")]
    UnparsablePrediction(String),
    #[error("all {0} candidate replies were unparsable")]
    PredictionFailed(usize),
}

/// Prompt for one candidate: profile block, policy document, and the fixed
/// return-format instruction.
pub fn build_prediction_prompt(record: &FounderRecord, policy: &DecisionPolicy) -> String {
    format!(
        "{}\nBased on the following decision policy, predict whether the founder is likely to \
succeed.\nDecision Policy: {}\nReturn your prediction in the following format:\nPrediction: \
<HIGH or LOW>\nExplanation: <brief explanation>",
        render_profile_prompt_block(record),
        policy.combined_text()
    )
}

static PREDICTION_LINE: Lazy<Regex> = Lazy::new(|| Regex::new(r"(?i)prediction\s*:").unwrap());
static LABEL_TOKEN: Lazy<Regex> = Lazy::new(|| Regex::new(r"(?i)\b(high|low)\b").unwrap());
static EXPLANATION_MARKER: Lazy<Regex> =
    Lazy::new(|| Regex::new(r"(?i)explanation\s*:").unwrap());
static STRICT_LABEL: Lazy<Regex> = Lazy::new(|| Regex::new(r"\b(HIGH|LOW)\b").unwrap());

/// Parse a candidate reply.
///
/// Primary path: a `Prediction:` line (case-insensitive, bold markers
/// tolerated) containing HIGH or LOW; the explanation is whatever follows an
/// `Explanation:` marker, or the remainder after the label when the marker is
/// absent. Fallback path: exactly one of the uppercase tokens HIGH/LOW
/// appears standalone, taken with the full reply as explanation.
pub fn parse_candidate(reply: &str) -> Result<Candidate, PredictionError> {
    let cleaned = reply.replace("**", "");

    for line in cleaned.lines() {
        let Some(m) = PREDICTION_LINE.find(line) else {
            continue;
        };
        let after = &line[m.end()..];
        let Some(label_match) = LABEL_TOKEN.find(after) else {
            continue;
        };
        let label = RuleOutcome::parse(label_match.as_str()).expect("regex guarantees label");

        let explanation = if let Some(marker) = EXPLANATION_MARKER.find(&cleaned) {
            cleaned[marker.end()..].trim().to_string()
        } else {
            // Remainder of the reply after the label token.
            let line_offset = line.as_ptr() as usize - cleaned.as_ptr() as usize;
            let after_label = line_offset + m.end() + label_match.end();
            cleaned[after_label..].trim().to_string()
        };
        return Ok(Candidate {
            label,
            explanation,
            raw_reply: reply.to_string(),
        });
    }

    let mut found = std::collections::BTreeSet::new();
    for m in STRICT_LABEL.find_iter(&cleaned) {
        found.insert(m.as_str());
    }
    if found.len() == 1 {
        let label = RuleOutcome::parse(found.iter().next().unwrap()).unwrap();
        return Ok(Candidate {
            label,
            explanation: reply.trim().to_string(),
            raw_reply: reply.to_string(),
        });
    }
    Err(PredictionError::UnparsablePrediction(span(reply)))
}

fn span(text: &str) -> String {
    let t = text.trim();
    if t.chars().count() <= 80 {
        t.to_string()
    } else {
        let head: String = t.chars().take(77).collect();
        format!("{head}...")
    }
}

/// Generation knobs for prediction calls.
#[derive(Debug, Clone, Copy)]
pub struct PredictionOptions {
    pub temperature: f64,
    pub refinement_temperature: f64,
    pub max_output_tokens: u32,
}

impl Default for PredictionOptions {
    fn default() -> Self {
        PredictionOptions {
            temperature: 1.0,
            refinement_temperature: 0.0,
            max_output_tokens: 2048,
        }
    }
}

/// One candidate call. The memory context is read-only here: candidate
/// exchanges are never written back, keeping candidates independent.
pub fn predict_once(
    record: &FounderRecord,
    policy: &DecisionPolicy,
    backend: &dyn ChatBackend,
    memory_context: &str,
    options: &PredictionOptions,
) -> Result<Candidate, PredictionError> {
    let request = ChatRequest {
        conversation_id: format!("predict-{}", record.id),
        system_context: compose_system_context(PREDICTION_CONTEXT, memory_context),
        user_message: build_prediction_prompt(record, policy),
        temperature: options.temperature,
        max_output_tokens: options.max_output_tokens,
    };
    let reply = backend.complete(&request)?.text;
    parse_candidate(&reply)
}

/// Majority label over candidates; an exact tie resolves to LOW, the
/// precision-conservative choice.
pub fn majority_vote(candidates: &[Candidate]) -> RuleOutcome {
    assert!(!candidates.is_empty(), "majority_vote needs candidates");
    let highs = candidates
        .iter()
        .filter(|c| c.label == RuleOutcome::High)
        .count();
    let lows = candidates.len() - highs;
    if highs > lows {
        RuleOutcome::High
    } else {
        RuleOutcome::Low
    }
}

/// Generate `k` independent candidates and resolve them by majority vote.
/// The explanation comes from the first candidate carrying the winning
/// label. Unparsable candidates are dropped; if all `k` fail, the founder
/// gets a [`PredictionError::PredictionFailed`].
pub fn predict_ensemble(
    record: &FounderRecord,
    policy: &DecisionPolicy,
    k: usize,
    backend: &dyn ChatBackend,
    memory_context: &str,
    options: &PredictionOptions,
) -> Result<FinalPrediction, PredictionError> {
    assert!(k >= 1, "ensemble size must be at least 1");
    let mut candidates = Vec::with_capacity(k);
    for _ in 0..k {
        match predict_once(record, policy, backend, memory_context, options) {
            Ok(candidate) => candidates.push(candidate),
            Err(PredictionError::UnparsablePrediction(reply)) => {
                log::warn!("unparsable candidate for founder {}: {reply}", record.id);
            }
            Err(other) => return Err(other),
        }
    }
    if candidates.is_empty() {
        return Err(PredictionError::PredictionFailed(k));
    }
    let label = majority_vote(&candidates);
    let explanation = candidates
        .iter()
        .find(|c| c.label == label)
        .expect("majority label exists among candidates")
        .explanation
        .clone();
    Ok(FinalPrediction {
        founder_id: record.id.clone(),
        label,
        explanation,
        candidates,
        refined: false,
    })
}

/// Prompt for the strict-evaluator pass, embedding the initial label and
/// explanation alongside the founder data and policy.
pub fn build_refinement_prompt(
    final_prediction: &FinalPrediction,
    record: &FounderRecord,
    policy: &DecisionPolicy,
) -> String {
    format!(
        "{}\nDecision Policy: {}\n\nYour task is to review an initial prediction and its \
reasoning, and then provide a final, refined prediction that is logically consistent with the \
data and decision policy.\n\nThe AI initially predicted: {} with the following reasoning: {}\n\
Double-check if the reasoning follows the decision policy and all provided data.\nIf there are \
any errors or omissions, correct them.\nFinally, output the final correct outcome as either \
'HIGH' or 'LOW', followed by a brief explanation of your corrections.",
        render_profile_prompt_block(record),
        policy.combined_text(),
        final_prediction.label,
        final_prediction.explanation
    )
}

/// Two-step refinement: the first standalone uppercase HIGH/LOW in the reply
/// becomes the final label and the remainder becomes the explanation. An
/// empty or unparsable reply keeps the original prediction.
pub fn refine_prediction(
    final_prediction: &FinalPrediction,
    record: &FounderRecord,
    policy: &DecisionPolicy,
    backend: &dyn ChatBackend,
    options: &PredictionOptions,
) -> Result<FinalPrediction, GatewayError> {
    let request = ChatRequest {
        conversation_id: format!("refine-predict-{}", record.id),
        system_context: REFINEMENT_CONTEXT.to_string(),
        user_message: build_refinement_prompt(final_prediction, record, policy),
        temperature: options.refinement_temperature,
        max_output_tokens: options.max_output_tokens,
    };
    let reply = backend.complete(&request)?.text;
    let Some(m) = STRICT_LABEL.find(&reply) else {
        log::warn!(
            "refinement reply for founder {} carried no HIGH/LOW; keeping the voted label",
            record.id
        );
        return Ok(final_prediction.clone());
    };
    let label = RuleOutcome::parse(m.as_str()).expect("regex guarantees label");
    Ok(FinalPrediction {
        founder_id: final_prediction.founder_id.clone(),
        label,
        explanation: reply[m.end()..].trim().to_string(),
        candidates: final_prediction.candidates.clone(),
        refined: true,
    })
}

// ---------------------------------------------------------------------------
// CSV persistence
// ---------------------------------------------------------------------------

/// One row of `predictions.csv`. `predicted` is `None` for founders whose
/// candidates were all unparsable; such rows carry the error text in
/// `explanation` and are excluded from evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRow {
    pub founder_id: FounderId,
    pub actual: OutcomeLabel,
    pub predicted: Option<RuleOutcome>,
    pub refined: bool,
    pub explanation: String,
    pub candidate_labels: Vec<RuleOutcome>,
}

pub const PREDICTIONS_CSV_HEADER: [&str; 6] = [
    "founder_id",
    "actual",
    "predicted",
    "refined",
    "explanation",
    "candidate_labels",
];

pub fn write_predictions_csv(path: &Path, rows: &[PredictionRow]) -> Result<(), csv::Error> {
    let mut writer = csv::Writer::from_path(path)?;
    writer.write_record(PREDICTIONS_CSV_HEADER)?;
    for row in rows {
        let labels = row
            .candidate_labels
            .iter()
            .map(|l| l.as_str())
            .collect::<Vec<_>>()
            .join("|");
        writer.write_record([
            row.founder_id.as_str(),
            row.actual.as_str(),
            row.predicted.map(|p| p.as_str()).unwrap_or("ERROR"),
            if row.refined { "true" } else { "false" },
            row.explanation.as_str(),
            labels.as_str(),
        ])?;
    }
    writer.flush()?;
    Ok(())
}

pub fn read_predictions_csv(path: &Path) -> Result<Vec<PredictionRow>, csv::Error> {
    let mut reader = csv::Reader::from_path(path)?;
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record?;
        rows.push(PredictionRow {
            founder_id: FounderId(record.get(0).unwrap_or_default().to_string()),
            actual: OutcomeLabel::parse(record.get(1).unwrap_or_default())
                .unwrap_or(OutcomeLabel::Failure),
            predicted: RuleOutcome::parse(record.get(2).unwrap_or_default()),
            refined: record.get(3) == Some("true"),
            explanation: record.get(4).unwrap_or_default().to_string(),
            candidate_labels: record
                .get(5)
                .unwrap_or_default()
                .split('|')
                .filter_map(RuleOutcome::parse)
                .collect(),
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::ScriptedBackend;
    use crate::policy::{DecisionPolicy, LineageEntry};

    fn record(id: &str) -> FounderRecord {
        FounderRecord {
            id: id.into(),
            linkedin_text: format!("li-{id}"),
            crunchbase_text: format!("cb-{id}"),
            company_description: format!("desc-{id}"),
            outcome: OutcomeLabel::Success,
        }
    }

    fn policy() -> DecisionPolicy {
        DecisionPolicy {
            version: 1,
            success_text: "SUCCESS-POLICY".into(),
            failure_text: "FAILURE-POLICY".into(),
            lineage: vec![LineageEntry {
                version: 1,
                trigger: "compiled".into(),
                timestamp: "t".into(),
            }],
        }
    }

    #[test]
    fn parses_the_declared_format() {
        let c = parse_candidate("Prediction: HIGH\nExplanation: strong team").unwrap();
        assert_eq!(c.label, RuleOutcome::High);
        assert_eq!(c.explanation, "strong team");
    }

    #[test]
    fn tolerates_case_bold_and_missing_explanation_marker() {
        let c = parse_candidate("prediction: low — weak fit").unwrap();
        assert_eq!(c.label, RuleOutcome::Low);
        assert_eq!(c.explanation, "— weak fit");

        let c = parse_candidate("**Prediction:** LOW\n**Explanation:** thin market").unwrap();
        assert_eq!(c.label, RuleOutcome::Low);
        assert_eq!(c.explanation, "thin market");
    }

    #[test]
    fn standalone_token_fallback() {
        let c = parse_candidate("After review the outcome is HIGH, full stop.").unwrap();
        assert_eq!(c.label, RuleOutcome::High);
        assert_eq!(c.explanation, "After review the outcome is HIGH, full stop.");

        // Both labels present: ambiguous.
        assert!(parse_candidate("could be HIGH or LOW").is_err());
        // Lowercase prose does not count as a standalone token.
        assert!(parse_candidate("the ceiling is low here").is_err());
        assert!(parse_candidate("Cannot decide.").is_err());
    }

    #[test]
    fn prompt_carries_profile_and_both_policy_texts() {
        let mock = ScriptedBackend::from_replies(vec!["Prediction: HIGH\nExplanation: ok"]);
        let c = predict_once(&record("f1"), &policy(), &mock, "", &Default::default()).unwrap();
        assert_eq!(c.label, RuleOutcome::High);
        let call = &mock.calls()[0];
        assert!(call.user_message.contains("Founder Profile: li-f1 | cb-f1"));
        assert!(call.user_message.contains("SUCCESS-POLICY"));
        assert!(call.user_message.contains("FAILURE-POLICY"));
        assert!(call.user_message.contains("Prediction: <HIGH or LOW>"));
        assert_eq!(call.system_context, PREDICTION_CONTEXT);
    }

    fn candidate(label: RuleOutcome, explanation: &str) -> Candidate {
        Candidate {
            label,
            explanation: explanation.into(),
            raw_reply: String::new(),
        }
    }

    #[test]
    fn vote_majority_and_tie_break() {
        use RuleOutcome::*;
        let vote = |labels: &[RuleOutcome]| {
            let cs: Vec<_> = labels.iter().map(|&l| candidate(l, "")).collect();
            majority_vote(&cs)
        };
        assert_eq!(vote(&[High, High, Low]), High);
        assert_eq!(vote(&[Low, Low, Low]), Low);
        assert_eq!(vote(&[High, Low]), Low); // exact tie
        assert_eq!(vote(&[High]), High);
    }

    #[test]
    fn ensemble_votes_and_selects_first_matching_explanation() {
        let mock = ScriptedBackend::from_replies(vec![
            "Prediction: HIGH\nExplanation: first high",
            "Prediction: HIGH\nExplanation: second high",
            "Prediction: LOW\nExplanation: the low one",
        ]);
        let fp = predict_ensemble(&record("f1"), &policy(), 3, &mock, "", &Default::default())
            .unwrap();
        assert_eq!(fp.label, RuleOutcome::High);
        assert_eq!(fp.explanation, "first high");
        assert_eq!(fp.candidates.len(), 3);
        assert!(!fp.refined);
        assert_eq!(mock.call_count(), 3);
    }

    #[test]
    fn ensemble_k1_equals_single_prediction() {
        let mock = ScriptedBackend::from_replies(vec!["Prediction: LOW\nExplanation: e"]);
        let fp = predict_ensemble(&record("f1"), &policy(), 1, &mock, "", &Default::default())
            .unwrap();
        assert_eq!(fp.label, RuleOutcome::Low);
        assert_eq!(fp.candidates.len(), 1);
    }

    #[test]
    fn ensemble_fails_only_when_all_candidates_fail() {
        let mock = ScriptedBackend::from_replies(vec![
            "no label here",
            "Prediction: LOW\nExplanation: ok",
            "still nothing",
        ]);
        let fp = predict_ensemble(&record("f1"), &policy(), 3, &mock, "", &Default::default())
            .unwrap();
        assert_eq!(fp.label, RuleOutcome::Low);
        assert_eq!(fp.candidates.len(), 1);

        let mock = ScriptedBackend::from_replies(vec!["nope", "nothing", "none"]);
        let err = predict_ensemble(&record("f1"), &policy(), 3, &mock, "", &Default::default())
            .unwrap_err();
        assert!(matches!(err, PredictionError::PredictionFailed(3)));
    }

    fn voted(label: RuleOutcome) -> FinalPrediction {
        FinalPrediction {
            founder_id: "f1".into(),
            label,
            explanation: "initial reasoning".into(),
            candidates: vec![candidate(label, "initial reasoning")],
            refined: false,
        }
    }

    #[test]
    fn refinement_can_override_the_label() {
        let mock =
            ScriptedBackend::from_replies(vec!["LOW — reasoning contradicted policy"]);
        let refined =
            refine_prediction(&voted(RuleOutcome::High), &record("f1"), &policy(), &mock,
                &Default::default())
            .unwrap();
        assert_eq!(refined.label, RuleOutcome::Low);
        assert_eq!(refined.explanation, "— reasoning contradicted policy");
        assert!(refined.refined);

        let prompt = &mock.calls()[0].user_message;
        assert!(prompt.contains("The AI initially predicted: HIGH"));
        assert!(prompt.contains("with the following reasoning: initial reasoning"));
        assert_eq!(mock.calls()[0].system_context, REFINEMENT_CONTEXT);
    }

    #[test]
    fn refinement_confirmation_keeps_label_but_marks_refined() {
        let mock = ScriptedBackend::from_replies(vec!["HIGH. Confirmed."]);
        let refined =
            refine_prediction(&voted(RuleOutcome::High), &record("f1"), &policy(), &mock,
                &Default::default())
            .unwrap();
        assert_eq!(refined.label, RuleOutcome::High);
        assert!(refined.refined);
    }

    #[test]
    fn empty_refinement_reply_keeps_the_original() {
        let mock = ScriptedBackend::from_replies(vec![""]);
        let refined =
            refine_prediction(&voted(RuleOutcome::High), &record("f1"), &policy(), &mock,
                &Default::default())
            .unwrap();
        assert_eq!(refined.label, RuleOutcome::High);
        assert!(!refined.refined);
    }

    #[test]
    fn predictions_csv_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("predictions.csv");
        let rows = vec![
            PredictionRow {
                founder_id: "a".into(),
                actual: OutcomeLabel::Success,
                predicted: Some(RuleOutcome::High),
                refined: true,
                explanation: "looks strong".into(),
                candidate_labels: vec![RuleOutcome::High, RuleOutcome::Low, RuleOutcome::High],
            },
            PredictionRow {
                founder_id: "b".into(),
                actual: OutcomeLabel::Failure,
                predicted: None,
                refined: false,
                explanation: "error: all candidates unparsable".into(),
                candidate_labels: vec![],
            },
        ];
        write_predictions_csv(&path, &rows).unwrap();
        let read = read_predictions_csv(&path).unwrap();
        assert_eq!(read, rows);
    }
}
