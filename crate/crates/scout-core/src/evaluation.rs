//! Confusion-matrix construction and the metric suite.
//!
//! Positive class is SUCCESS/HIGH. Any 0/0 ratio evaluates to 0 by
//! convention so the metrics stay total over degenerate matrices.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::OutcomeLabel;
use crate::rules::RuleOutcome;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionMatrix {
    pub fn new(tp: u64, fp: u64, fn_: u64, tn: u64) -> Self {
        ConfusionMatrix { tp, fp, fn_, tn }
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub f_beta: f64,
    pub beta: f64,
    pub mcc: f64,
    pub accuracy: f64,
}

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("cannot evaluate an empty prediction list")]
    EmptyInput,
}

/// Count cases over (predicted, actual) pairs.
pub fn confusion(
    pairs: &[(RuleOutcome, OutcomeLabel)],
) -> Result<ConfusionMatrix, EvalError> {
    if pairs.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    let mut cm = ConfusionMatrix::new(0, 0, 0, 0);
    for &(predicted, actual) in pairs {
        match (predicted, actual) {
            (RuleOutcome::High, OutcomeLabel::Success) => cm.tp += 1,
            (RuleOutcome::High, OutcomeLabel::Failure) => cm.fp += 1,
            (RuleOutcome::Low, OutcomeLabel::Success) => cm.fn_ += 1,
            (RuleOutcome::Low, OutcomeLabel::Failure) => cm.tn += 1,
        }
    }
    Ok(cm)
}

fn ratio(num: f64, den: f64) -> f64 {
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

/// Compute the full metric suite from a confusion matrix:
///
/// - precision = TP / (TP + FP)
/// - recall    = TP / (TP + FN)
/// - F1        = 2PR / (P + R), F_beta = (1 + b^2)PR / (b^2 P + R)
/// - MCC       = (TP*TN - FP*FN) / sqrt((TP+FP)(TP+FN)(TN+FP)(TN+FN))
/// - accuracy  = (TP + TN) / total
pub fn compute_metrics(cm: &ConfusionMatrix, beta: f64) -> Result<Metrics, EvalError> {
    if cm.total() == 0 {
        return Err(EvalError::EmptyInput);
    }
    let (tp, fp, fn_, tn) = (cm.tp as f64, cm.fp as f64, cm.fn_ as f64, cm.tn as f64);
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    let f1 = ratio(2.0 * precision * recall, precision + recall);
    let b2 = beta * beta;
    let f_beta = ratio((1.0 + b2) * precision * recall, b2 * precision + recall);
    let mcc_den = ((tp + fp) * (tp + fn_) * (tn + fp) * (tn + fn_)).sqrt();
    let mcc = ratio(tp * tn - fp * fn_, mcc_den);
    let accuracy = ratio(tp + tn, cm.total() as f64);
    Ok(Metrics {
        precision,
        recall,
        f1,
        f_beta,
        beta,
        mcc,
        accuracy,
    })
}

/// Round to three decimals for reporting.
pub fn round3(v: f64) -> f64 {
    (v * 1000.0).round() / 1000.0
}

/// JSON report: counts plus metrics, metrics rounded to three decimals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub f_beta: f64,
    pub beta: f64,
    pub mcc: f64,
    pub accuracy: f64,
}

impl MetricsReport {
    pub fn new(cm: &ConfusionMatrix, metrics: &Metrics) -> Self {
        MetricsReport {
            tp: cm.tp,
            fp: cm.fp,
            fn_: cm.fn_,
            tn: cm.tn,
            precision: round3(metrics.precision),
            recall: round3(metrics.recall),
            f1: round3(metrics.f1),
            f_beta: round3(metrics.f_beta),
            beta: metrics.beta,
            mcc: round3(metrics.mcc),
            accuracy: round3(metrics.accuracy),
        }
    }
}

pub fn write_metrics_json(
    path: &Path,
    cm: &ConfusionMatrix,
    metrics: &Metrics,
) -> std::io::Result<()> {
    let report = MetricsReport::new(cm, metrics);
    let body = serde_json::to_string_pretty(&report).expect("metrics serialize");
    std::fs::write(path, body)
}

/// Text table mirroring the report layout used in write-ups: a confusion
/// matrix with Predicted columns and Actual rows, then one metric per line.
pub fn render_metrics_table(cm: &ConfusionMatrix, metrics: &Metrics) -> String {
    let mut out = String::new();
    out.push_str("                 Predicted Failure  Predicted Success\n");
    out.push_str(&format!(
        "Actual Failure   {:>17}  {:>17}\n",
        cm.tn, cm.fp
    ));
    out.push_str(&format!(
        "Actual Success   {:>17}  {:>17}\n\n",
        cm.fn_, cm.tp
    ));
    out.push_str(&format!("Precision  {:.3}\n", metrics.precision));
    out.push_str(&format!("Recall     {:.3}\n", metrics.recall));
    out.push_str(&format!("F1 Score   {:.3}\n", metrics.f1));
    out.push_str(&format!(
        "F{:.1} Score {:.3}\n",
        metrics.beta, metrics.f_beta
    ));
    out.push_str(&format!("MCC        {:.3}\n", metrics.mcc));
    out.push_str(&format!("Accuracy   {:.3}\n", metrics.accuracy));
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn confusion_counts_all_four_cases() {
        let pairs = vec![
            (RuleOutcome::High, OutcomeLabel::Success),
            (RuleOutcome::Low, OutcomeLabel::Failure),
        ];
        let cm = confusion(&pairs).unwrap();
        assert_eq!(cm, ConfusionMatrix::new(1, 0, 0, 1));

        let all_high: Vec<_> = (0..4)
            .map(|_| (RuleOutcome::High, OutcomeLabel::Failure))
            .collect();
        let cm = confusion(&all_high).unwrap();
        assert_eq!(cm, ConfusionMatrix::new(0, 4, 0, 0));
    }

    #[test]
    fn confusion_rejects_empty_input() {
        assert!(matches!(confusion(&[]), Err(EvalError::EmptyInput)));
    }

    #[test]
    fn zero_denominators_fall_back_to_zero() {
        let cm = ConfusionMatrix::new(0, 0, 0, 10);
        let m = compute_metrics(&cm, 1.0).unwrap();
        assert_eq!(m.precision, 0.0);
        assert_eq!(m.recall, 0.0);
        assert_eq!(m.f1, 0.0);
        assert_eq!(m.mcc, 0.0);
        assert_eq!(m.accuracy, 1.0);
    }

    #[test]
    fn f_beta_at_one_equals_f1() {
        let cm = ConfusionMatrix::new(9, 17, 1, 33);
        let m = compute_metrics(&cm, 1.0).unwrap();
        assert_eq!(m.f1, m.f_beta);
    }

    #[test]
    fn integer_identities_hold() {
        let cm = ConfusionMatrix::new(13, 7, 4, 29);
        let m = compute_metrics(&cm, 0.5).unwrap();
        assert!((m.accuracy * cm.total() as f64 - (cm.tp + cm.tn) as f64).abs() < 1e-9);
        assert!((m.precision * (cm.tp + cm.fp) as f64 - cm.tp as f64).abs() < 1e-12);
        assert!((m.recall * (cm.tp + cm.fn_) as f64 - cm.tp as f64).abs() < 1e-12);
    }

    #[test]
    fn swapping_predictions_negates_mcc() {
        let cm = ConfusionMatrix::new(9, 17, 1, 33);
        let swapped = ConfusionMatrix::new(cm.fn_, cm.tn, cm.tp, cm.fp);
        let m = compute_metrics(&cm, 1.0).unwrap();
        let s = compute_metrics(&swapped, 1.0).unwrap();
        assert!((m.mcc + s.mcc).abs() < 1e-12);
    }

    #[test]
    fn table_renders_counts_and_three_decimals() {
        let cm = ConfusionMatrix::new(9, 17, 1, 33);
        let m = compute_metrics(&cm, 0.5).unwrap();
        let table = render_metrics_table(&cm, &m);
        assert!(table.contains("Precision  0.346"));
        assert!(table.contains("Accuracy   0.700"));
        assert!(table.contains("Actual Success"));
    }
}
