use serde::{Deserialize, Serialize};

use super::MetricError;
use crate::model::SentimentLabel;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationReport {
    pub total: usize,
    pub accuracy: f64,
    pub weighted_f1: f64,
    pub macro_f1: f64,
    /// Indexed by label order: negative, neutral, positive.
    pub per_class: [ClassMetrics; 3],
    /// `confusion[gold][predicted]`.
    pub confusion: [[usize; 3]; 3],
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Accuracy, support-weighted F1 and macro F1 over the fixed three-label set.
/// Any zero division yields 0, including for labels absent from both sides.
pub fn classification_metrics(
    gold: &[SentimentLabel],
    pred: &[SentimentLabel],
) -> Result<ClassificationReport, MetricError> {
    if gold.len() != pred.len() {
        return Err(MetricError::Shape(format!(
            "{} gold labels vs {} predictions",
            gold.len(),
            pred.len()
        )));
    }
    if gold.is_empty() {
        return Err(MetricError::Invalid("no labels to score".into()));
    }
    let mut confusion = [[0usize; 3]; 3];
    for (g, p) in gold.iter().zip(pred) {
        confusion[g.index()][p.index()] += 1;
    }
    let total = gold.len();
    let correct: usize = (0..3).map(|i| confusion[i][i]).sum();
    let per_class = std::array::from_fn(|c| {
        let tp = confusion[c][c];
        let support: usize = confusion[c].iter().sum();
        let predicted: usize = (0..3).map(|g| confusion[g][c]).sum();
        let precision = ratio(tp, predicted);
        let recall = ratio(tp, support);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        ClassMetrics {
            precision,
            recall,
            f1,
            support,
        }
    });
    let per_class: [ClassMetrics; 3] = per_class;
    let weighted_f1 = per_class
        .iter()
        .map(|m| m.f1 * m.support as f64)
        .sum::<f64>()
        / total as f64;
    let macro_f1 = per_class.iter().map(|m| m.f1).sum::<f64>() / 3.0;
    Ok(ClassificationReport {
        total,
        accuracy: ratio(correct, total),
        weighted_f1,
        macro_f1,
        per_class,
        confusion,
    })
}
