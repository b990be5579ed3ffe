//! Classification metrics (Acc, weighted-F1, macro-F1) and reasoning
//! generation metrics (BLEU, ROUGE-L, METEOR-lite, Distinct-n, embedding
//! cosine similarity), plus percentage-formatted reports.

mod classification;
mod generation;

pub use classification::{classification_metrics, ClassMetrics, ClassificationReport};
pub use generation::{
    bleu, corpus_bleu, cosine, distinct_n, embedding_similarity, generation_metrics, meteor_lite,
    rouge_l, stem, GenerationReport, SampleScores, SimilarityResult,
};

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid input: {0}")]
    Invalid(String),
}

/// Canonical tokenizer shared by every text metric: lowercase, split on
/// whitespace, and emit each punctuation character as its own token.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    let mut word = String::new();
    for c in text.chars() {
        if c.is_alphanumeric() {
            word.extend(c.to_lowercase());
        } else {
            if !word.is_empty() {
                tokens.push(std::mem::take(&mut word));
            }
            if !c.is_whitespace() {
                tokens.push(c.to_lowercase().collect());
            }
        }
    }
    if !word.is_empty() {
        tokens.push(word);
    }
    tokens
}

/// Rounds a [0,1] score to a percentage with one decimal.
pub fn percent(x: f64) -> f64 {
    (x * 1000.0).round() / 10.0
}
