//! Simulated-RL scoring of reasoning quality.
//!
//! The backend judges a reasoning trace on a 0-to-1 scale; the base score is
//! then adjusted by the ground-truth case — +0.2 for a true positive, -0.2
//! for a false positive, -0.1 for a false negative, +0.05 for a true
//! negative — and clamped back into [0, 1]. Averages feed policy refinement.

use std::fmt;
use std::path::Path;

use once_cell::sync::Lazy;
use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{FounderId, OutcomeLabel};
use crate::gateway::{ChatBackend, ChatRequest, GatewayError};
use crate::policy::{PerformanceSummary, SamplePrediction};
use crate::rules::RuleOutcome;

/// Prompt sent to the judge; the reasoning trace follows on its own lines.
pub const SCORING_PROMPT: &str = "Score the following reasoning trace for predictive precision \
on a scale from 0 to 1, where 1 means perfect precision with no false positives. Reply with the \
number only.";

/// Outcome class of one (actual, predicted) pair. Positive class is
/// SUCCESS/HIGH.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CaseKind {
    TruePositive,
    FalsePositive,
    FalseNegative,
    TrueNegative,
}

impl CaseKind {
    pub fn classify(actual: OutcomeLabel, predicted: RuleOutcome) -> CaseKind {
        match (actual, predicted) {
            (OutcomeLabel::Success, RuleOutcome::High) => CaseKind::TruePositive,
            (OutcomeLabel::Failure, RuleOutcome::High) => CaseKind::FalsePositive,
            (OutcomeLabel::Success, RuleOutcome::Low) => CaseKind::FalseNegative,
            (OutcomeLabel::Failure, RuleOutcome::Low) => CaseKind::TrueNegative,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            CaseKind::TruePositive => "TP",
            CaseKind::FalsePositive => "FP",
            CaseKind::FalseNegative => "FN",
            CaseKind::TrueNegative => "TN",
        }
    }

    pub fn parse(raw: &str) -> Option<CaseKind> {
        match raw.trim() {
            "TP" => Some(CaseKind::TruePositive),
            "FP" => Some(CaseKind::FalsePositive),
            "FN" => Some(CaseKind::FalseNegative),
            "TN" => Some(CaseKind::TrueNegative),
            _ => None,
        }
    }
}

impl fmt::Display for CaseKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Reward/penalty constants per case.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RewardTable {
    pub true_positive: f64,
    pub false_positive: f64,
    pub false_negative: f64,
    pub true_negative: f64,
}

impl Default for RewardTable {
    fn default() -> Self {
        RewardTable {
            true_positive: 0.2,
            false_positive: -0.2,
            false_negative: -0.1,
            true_negative: 0.05,
        }
    }
}

impl RewardTable {
    pub fn adjustment(&self, case: CaseKind) -> f64 {
        match case {
            CaseKind::TruePositive => self.true_positive,
            CaseKind::FalsePositive => self.false_positive,
            CaseKind::FalseNegative => self.false_negative,
            CaseKind::TrueNegative => self.true_negative,
        }
    }
}

/// One founder's reward-adjusted reasoning score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RlScore {
    pub founder_id: FounderId,
    pub base: f64,
    pub adjustment: f64,
    pub final_score: f64,
    pub case: CaseKind,
}

#[derive(Debug, Error)]
pub enum ScoringError {
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error("no in-range score found in reply `{0}`")]
    UnparsableScore(String),
    #[error("base score {0} outside [0, 1]")]
    DomainError(f64),
    #[error("cannot summarize an empty score set")]
    EmptyInput,
}

/// Extract the first decimal number in [0, 1] from a judge reply. Accepts
/// the forms `0`, `1`, `0.x`, and `.x`; out-of-range numbers are skipped.
pub fn parse_score_reply(reply: &str) -> Option<f64> {
    static NUMBER: Lazy<Regex> = Lazy::new(|| Regex::new(r"\d+\.\d+|\.\d+|\d+").unwrap());
    NUMBER
        .find_iter(reply)
        .filter_map(|m| m.as_str().parse::<f64>().ok())
        .find(|v| (0.0..=1.0).contains(v))
}

/// Ask the backend to judge a reasoning trace; deterministic at temperature 0.
pub fn judge_base_score(
    reasoning: &str,
    backend: &dyn ChatBackend,
    max_output_tokens: u32,
) -> Result<f64, ScoringError> {
    let request = ChatRequest {
        conversation_id: "score".to_string(),
        system_context: String::new(),
        user_message: format!("{SCORING_PROMPT}\n\n{reasoning}"),
        temperature: 0.0,
        max_output_tokens,
    };
    let reply = backend.complete(&request)?.text;
    parse_score_reply(&reply).ok_or_else(|| ScoringError::UnparsableScore(reply))
}

fn clamp_unit(v: f64) -> f64 {
    v.clamp(0.0, 1.0)
}

/// Apply the ground-truth adjustment to a base score and clamp to [0, 1].
pub fn adjust_score(
    founder_id: &FounderId,
    base: f64,
    actual: OutcomeLabel,
    predicted: RuleOutcome,
    rewards: &RewardTable,
) -> Result<RlScore, ScoringError> {
    if !(0.0..=1.0).contains(&base) {
        return Err(ScoringError::DomainError(base));
    }
    let case = CaseKind::classify(actual, predicted);
    let adjustment = rewards.adjustment(case);
    Ok(RlScore {
        founder_id: founder_id.clone(),
        base,
        adjustment,
        final_score: clamp_unit(base + adjustment),
        case,
    })
}

/// A prediction joined with its ground truth and explanation, as needed to
/// summarize a test pass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionOutcome {
    pub founder_id: FounderId,
    pub predicted: RuleOutcome,
    pub actual: OutcomeLabel,
    pub explanation: String,
}

const SAMPLE_COUNT: usize = 10;
const EXCERPT_CHARS: usize = 120;

/// Aggregate scores and prediction outcomes into the feedback block consumed
/// by policy refinement. Samples are the first ten predictions by founder id.
pub fn summarize_scores(
    scores: &[RlScore],
    predictions: &[PredictionOutcome],
) -> Result<PerformanceSummary, ScoringError> {
    if scores.is_empty() || predictions.is_empty() {
        return Err(ScoringError::EmptyInput);
    }
    let average_rl_score =
        scores.iter().map(|s| s.final_score).sum::<f64>() / scores.len() as f64;
    let correct = predictions
        .iter()
        .filter(|p| p.predicted.agrees_with(p.actual))
        .count();
    let accuracy = correct as f64 / predictions.len() as f64;

    let mut ordered: Vec<&PredictionOutcome> = predictions.iter().collect();
    ordered.sort_by(|a, b| a.founder_id.cmp(&b.founder_id));
    let sample_predictions = ordered
        .into_iter()
        .take(SAMPLE_COUNT)
        .map(|p| SamplePrediction {
            founder_id: p.founder_id.clone(),
            predicted: p.predicted,
            actual: p.actual,
            excerpt: excerpt(&p.explanation),
        })
        .collect();

    Ok(PerformanceSummary {
        average_rl_score,
        accuracy,
        sample_predictions,
    })
}

fn excerpt(text: &str) -> String {
    if text.chars().count() <= EXCERPT_CHARS {
        text.to_string()
    } else {
        let head: String = text.chars().take(EXCERPT_CHARS).collect();
        format!("{head}...")
    }
}

// ---------------------------------------------------------------------------
// CSV persistence
// ---------------------------------------------------------------------------

pub const SCORES_CSV_HEADER: [&str; 5] = ["founder_id", "base", "case", "adjustment", "final"];

pub fn write_scores_csv(path: &Path, scores: &[RlScore]) -> Result<(), csv::Error> {
    let mut writer = csv::Writer::from_path(path)?;
    writer.write_record(SCORES_CSV_HEADER)?;
    for s in scores {
        writer.write_record([
            s.founder_id.as_str(),
            format!("{:.3}", s.base).as_str(),
            s.case.as_str(),
            format!("{:+.3}", s.adjustment).as_str(),
            format!("{:.3}", s.final_score).as_str(),
        ])?;
    }
    writer.flush()?;
    Ok(())
}
