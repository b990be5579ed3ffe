//! Word-level vocabulary for training the toy model on reasoning datasets.

use std::collections::{BTreeMap, HashMap};

use crate::metrics::tokenize;
use crate::model::{DatasetEntry, Sample, SentimentLabel};
use crate::parser::format_chain;

use super::losses::TokenizedExample;
use super::synthetic::assemble;

pub const BOS: &str = "<bos>";
pub const SEP: &str = "<sep>";
pub const EOS: &str = "<eos>";
pub const UNK: &str = "<unk>";
const SPECIALS: [&str; 4] = [BOS, SEP, EOS, UNK];

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct TextLimits {
    pub max_vocab: usize,
    pub max_prompt: usize,
    pub max_reasoning: usize,
}

impl Default for TextLimits {
    fn default() -> Self {
        TextLimits {
            max_vocab: 400,
            max_prompt: 40,
            max_reasoning: 60,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

fn label_token(label: SentimentLabel) -> String {
    format!("<{}>", label.as_str())
}

impl Vocabulary {
    /// Specials and label tokens first, then words by descending frequency
    /// (ties alphabetical) up to `max_size` entries.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>, max_size: usize) -> Self {
        let mut freq: BTreeMap<String, usize> = BTreeMap::new();
        for t in texts {
            for tok in tokenize(t) {
                *freq.entry(tok).or_insert(0) += 1;
            }
        }
        let mut words: Vec<(String, usize)> = freq.into_iter().collect();
        words.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        tokens.extend(SentimentLabel::ALL.iter().map(|&l| label_token(l)));
        let room = max_size.saturating_sub(tokens.len());
        tokens.extend(words.into_iter().take(room).map(|(w, _)| w));
        Self::from_tokens(tokens)
    }

    pub fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Vocabulary { tokens, index }
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(self.index[UNK])
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        tokenize(text).iter().map(|t| self.id(t)).collect()
    }

    /// Joins word tokens with spaces, dropping specials and label tokens.
    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .filter_map(|&i| self.tokens.get(i))
            .filter(|t| !t.starts_with('<'))
            .cloned()
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// Texts a vocabulary is built from: sample text, aspect and reasoning.
pub fn entry_texts(entries: &[DatasetEntry]) -> Vec<String> {
    entries
        .iter()
        .flat_map(|e| {
            [
                e.sample.text.clone(),
                e.sample.aspect.clone().unwrap_or_default(),
                format_chain(&e.record.chain),
            ]
        })
        .collect()
}

pub fn prompt_ids(vocab: &Vocabulary, sample: &Sample, limits: &TextLimits) -> Vec<usize> {
    let mut body = vocab.encode(&sample.text);
    if let Some(a) = &sample.aspect {
        body.push(vocab.id(SEP));
        body.extend(vocab.encode(a));
    }
    body.truncate(limits.max_prompt);
    let mut ids = vec![vocab.id(BOS)];
    ids.extend(body);
    ids.push(vocab.id(SEP));
    ids
}

pub fn encode_entry(vocab: &Vocabulary, entry: &DatasetEntry, limits: &TextLimits) -> TokenizedExample {
    let prompt = prompt_ids(vocab, &entry.sample, limits);
    let mut reasoning = vocab.encode(&format_chain(&entry.record.chain));
    reasoning.truncate(limits.max_reasoning);
    reasoning.push(vocab.id(&label_token(entry.record.predicted_label)));
    assemble(&prompt, &reasoning, vocab.id(EOS), entry.sample.gold_label.index())
}
