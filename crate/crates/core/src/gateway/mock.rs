//! In-process transports: scripted responses for unit tests and a
//! deterministic lexicon-driven simulator that stands in for teacher and
//! assistant endpoints in fixture runs.

use std::collections::VecDeque;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde_json::{json, Value};

use super::{Endpoint, Transport, TransportError};
use crate::metrics::tokenize;
use crate::model::{ReasoningChain, SentimentLabel, NO_IMAGE_SENTINEL};
use crate::parser::format_response;

/// A minimal `/chat/completions` response body carrying `text`.
pub fn chat_response(text: &str) -> Value {
    let words = text.split_whitespace().count() as u64;
    json!({
        "object": "chat.completion",
        "choices": [{
            "index": 0,
            "message": {"role": "assistant", "content": text},
            "finish_reason": "stop",
        }],
        "usage": {"prompt_tokens": 0, "completion_tokens": words, "total_tokens": words},
    })
}

pub fn embeddings_response(vectors: &[Vec<f64>]) -> Value {
    let data: Vec<Value> = vectors
        .iter()
        .enumerate()
        .map(|(i, v)| json!({"object": "embedding", "index": i, "embedding": v}))
        .collect();
    json!({"object": "list", "data": data})
}

/// Plays back a fixed script of results, one per request. A repeating script
/// returns the same result forever.
pub struct ScriptedTransport {
    script: Mutex<VecDeque<Result<Value, TransportError>>>,
    repeat: Option<Result<Value, TransportError>>,
    calls: AtomicUsize,
}

impl ScriptedTransport {
    pub fn new(script: Vec<Result<Value, TransportError>>) -> Self {
        ScriptedTransport {
            script: Mutex::new(script.into()),
            repeat: None,
            calls: AtomicUsize::new(0),
        }
    }

    pub fn repeating(result: Result<Value, TransportError>) -> Self {
        ScriptedTransport {
            script: Mutex::new(VecDeque::new()),
            repeat: Some(result),
            calls: AtomicUsize::new(0),
        }
    }

    /// Chat responses with the given texts, in order.
    pub fn texts<S: AsRef<str>>(texts: &[S]) -> Self {
        Self::new(texts.iter().map(|t| Ok(chat_response(t.as_ref()))).collect())
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl Transport for ScriptedTransport {
    fn post(&self, _endpoint: Endpoint, _body: &Value) -> Result<Value, TransportError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let next = self.script.lock().expect("script lock").pop_front();
        match (next, &self.repeat) {
            (Some(r), _) => r,
            (None, Some(r)) => r.clone(),
            (None, None) => Err(TransportError::Protocol("script exhausted".into())),
        }
    }
}

/// Transport backed by a closure.
pub struct FnTransport<F> {
    f: F,
    calls: AtomicUsize,
}

impl<F> FnTransport<F>
where
    F: Fn(Endpoint, &Value) -> Result<Value, TransportError> + Send + Sync,
{
    pub fn new(f: F) -> Self {
        FnTransport {
            f,
            calls: AtomicUsize::new(0),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl<F> Transport for FnTransport<F>
where
    F: Fn(Endpoint, &Value) -> Result<Value, TransportError> + Send + Sync,
{
    fn post(&self, endpoint: Endpoint, body: &Value) -> Result<Value, TransportError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        (self.f)(endpoint, body)
    }
}

const POSITIVE_WORDS: &[&str] = &[
    "amazing", "awesome", "beautiful", "best", "congrats", "enjoy", "excited", "fun", "glad",
    "good", "great", "happy", "hope", "love", "lovely", "nice", "proud", "thanks", "win",
    "wonderful",
];

const NEGATIVE_WORDS: &[&str] = &[
    "angry", "awful", "bad", "broken", "crash", "cry", "dead", "death", "disaster", "fear",
    "hate", "killed", "lost", "sad", "scary", "sick", "terrible", "tragic", "worst", "wrong",
];

/// Marker that makes the simulator answer with unusable text on every
/// attempt, for exercising quarantine paths.
pub const GARBLE_MARKER: &str = "#garbled";

/// Deterministic stand-in for a multimodal chat model.
///
/// Predictions come from a small sentiment lexicon over the post text.
/// `flip_percent` of samples (chosen by a hash of the text) get a rotated
/// label, and `malformed_percent` of greedy (temperature 0) answers drop a
/// section so the retry controller has something to do.
#[derive(Debug, Clone)]
pub struct SimulatedModel {
    pub name: String,
    pub flip_percent: u64,
    pub malformed_percent: u64,
    pub embed_dim: usize,
}

impl SimulatedModel {
    pub fn teacher() -> Self {
        SimulatedModel {
            name: "sim-teacher".into(),
            flip_percent: 10,
            malformed_percent: 15,
            embed_dim: 32,
        }
    }

    pub fn assistant() -> Self {
        SimulatedModel {
            name: "sim-assistant".into(),
            flip_percent: 25,
            malformed_percent: 10,
            embed_dim: 32,
        }
    }

    fn respond_chat(&self, body: &Value) -> Value {
        let user = user_text(body);
        let has_image = body
            .pointer("/messages/1/content")
            .and_then(Value::as_array)
            .is_some_and(|parts| parts.iter().any(|p| p["type"] == "image_url"));
        let field = |name: &str| {
            user.lines()
                .find_map(|l| l.strip_prefix(name).map(|v| v.trim().to_string()))
        };
        let text = field("Text:").unwrap_or_else(|| user.clone());
        let aspect = field("Aspect:");
        let target = field("Target sentiment:").and_then(|l| l.parse::<SentimentLabel>().ok());
        let temperature = body["temperature"].as_f64().unwrap_or(0.0);

        if text.contains(GARBLE_MARKER) {
            return chat_response("I am unable to analyse this post.");
        }
        let (score, cues) = lexicon_score(&text);
        let label = match target {
            Some(l) => l,
            None => {
                let base = match score {
                    s if s > 0 => SentimentLabel::Positive,
                    s if s < 0 => SentimentLabel::Negative,
                    _ => SentimentLabel::Neutral,
                };
                if fnv1a(&format!("{}|flip|{text}", self.name)) % 100 < self.flip_percent {
                    SentimentLabel::from_index((base.index() + 1) % 3).expect("3 labels")
                } else {
                    base
                }
            }
        };
        let chain = ReasoningChain {
            text_analysis: if cues.is_empty() {
                "The wording is mostly factual with no strong emotional cue words.".into()
            } else {
                format!("The text uses the cue words {} which carry emotional weight.", cues.join(", "))
            },
            image_analysis: if has_image {
                "The attached image supports the mood suggested by the text.".into()
            } else {
                NO_IMAGE_SENTINEL.into()
            },
            conflict_resolution: match &aspect {
                Some(a) => format!("The opinion is read with respect to the aspect {a}, and the modalities agree."),
                None => "The text and the image do not conflict, so the text dominates.".into(),
            },
            conclusion: format!("Taken together the post reads as {label}."),
        };
        let mut out = format_response(&chain, label);
        let malformed_roll = fnv1a(&format!("{}|malformed|{text}", self.name)) % 100;
        if temperature == 0.0 && malformed_roll < self.malformed_percent {
            out = out
                .lines()
                .filter(|l| !l.starts_with("Conflict Resolution:"))
                .collect::<Vec<_>>()
                .join("\n");
        }
        chat_response(&out)
    }

    fn respond_embeddings(&self, body: &Value) -> Value {
        let inputs: Vec<String> = body["input"]
            .as_array()
            .map(|a| a.iter().filter_map(|v| v.as_str().map(String::from)).collect())
            .unwrap_or_default();
        let vectors: Vec<Vec<f64>> = inputs.iter().map(|t| hash_embedding(t, self.embed_dim)).collect();
        embeddings_response(&vectors)
    }
}

impl Transport for SimulatedModel {
    fn post(&self, endpoint: Endpoint, body: &Value) -> Result<Value, TransportError> {
        Ok(match endpoint {
            Endpoint::Chat => self.respond_chat(body),
            Endpoint::Embeddings => self.respond_embeddings(body),
        })
    }
}

fn user_text(body: &Value) -> String {
    match body.pointer("/messages/1/content") {
        Some(Value::String(s)) => s.clone(),
        Some(Value::Array(parts)) => parts
            .iter()
            .filter_map(|p| p.get("text").and_then(Value::as_str))
            .collect::<Vec<_>>()
            .join("\n"),
        _ => String::new(),
    }
}

fn lexicon_score(text: &str) -> (i64, Vec<String>) {
    let mut score = 0;
    let mut cues = Vec::new();
    for tok in tokenize(text) {
        if POSITIVE_WORDS.contains(&tok.as_str()) {
            score += 1;
            cues.push(tok);
        } else if NEGATIVE_WORDS.contains(&tok.as_str()) {
            score -= 1;
            cues.push(tok);
        }
    }
    (score, cues)
}

pub(crate) fn fnv1a(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

/// Feature-hashed bag-of-words vector, L2-normalised (zero for empty text).
pub fn hash_embedding(text: &str, dim: usize) -> Vec<f64> {
    let mut v = vec![0.0; dim];
    for tok in tokenize(text) {
        let h = fnv1a(&tok);
        let sign = if (h >> 63) & 1 == 1 { -1.0 } else { 1.0 };
        v[(h % dim as u64) as usize] += sign;
    }
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
    v
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::{chat_body, SamplingParams};
    use crate::parser::parse;
    use crate::prompt::TemplateSet;
    use crate::model::{Sample, Split};

    fn sample(text: &str, gold: SentimentLabel) -> Sample {
        Sample {
            id: "x".into(),
            text: text.into(),
            image_ref: None,
            aspect: None,
            gold_label: gold,
            split: Split::Train,
        }
    }

    #[test]
    fn simulator_is_deterministic_and_parseable() {
        let t = TemplateSet::builtin(false);
        let sim = SimulatedModel {
            malformed_percent: 0,
            flip_percent: 0,
            ..SimulatedModel::teacher()
        };
        let s = sample("what a great and happy day", SentimentLabel::Positive);
        let body = chat_body("m", &t.render_prediction(&s).unwrap(), &SamplingParams::default());
        let a = sim.post(Endpoint::Chat, &body).unwrap();
        assert_eq!(a, sim.post(Endpoint::Chat, &body).unwrap());
        let text = a.pointer("/choices/0/message/content").unwrap().as_str().unwrap();
        let (chain, label) = parse(text).into_result().unwrap();
        assert_eq!(label, SentimentLabel::Positive);
        assert_eq!(chain.image_analysis, "N/A");
    }

    #[test]
    fn explain_follows_target_label() {
        let t = TemplateSet::builtin(false);
        let sim = SimulatedModel {
            malformed_percent: 0,
            ..SimulatedModel::teacher()
        };
        let s = sample("what a great and happy day", SentimentLabel::Negative);
        let body = chat_body("m", &t.render_explain(&s).unwrap(), &SamplingParams::default());
        let r = sim.post(Endpoint::Chat, &body).unwrap();
        let text = r.pointer("/choices/0/message/content").unwrap().as_str().unwrap();
        assert_eq!(parse(text).into_result().unwrap().1, SentimentLabel::Negative);
    }

    #[test]
    fn hash_embedding_properties() {
        let a = hash_embedding("Good day", 16);
        assert_eq!(a, hash_embedding("good   DAY", 16));
        let norm: f64 = a.iter().map(|x| x * x).sum();
        assert!((norm - 1.0).abs() < 1e-12);
        assert!(hash_embedding("", 16).iter().all(|&x| x == 0.0));
    }
}
