//! Chat-completion and embedding client for OpenAI-compatible endpoints.
//!
//! A [`Gateway`] owns one endpoint configuration and a transport. Three modes
//! are supported:
//!
//! * `live`: HTTP through [`LiveTransport`], every exchange recorded in the
//!   replay cache when one is configured;
//! * `mock`: an in-process [`Transport`] (scripted or simulated), recorded the
//!   same way;
//! * `replay`: no transport at all, responses come from the cache by request
//!   hash.
//!
//! The request hash is the SHA-256 of the canonical JSON body plus the
//! endpoint kind, so it never depends on wall-clock state.

mod cache;
pub mod mock;
mod transport;

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::prompt::RenderedPrompt;

pub use cache::ReplayCache;
pub use transport::LiveTransport;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Endpoint {
    Chat,
    Embeddings,
}

impl Endpoint {
    pub fn path(self) -> &'static str {
        match self {
            Endpoint::Chat => "chat/completions",
            Endpoint::Embeddings => "embeddings",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TransportMode {
    Live,
    Mock,
    Replay,
}

impl FromStr for TransportMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "live" => Ok(TransportMode::Live),
            "mock" => Ok(TransportMode::Mock),
            "replay" => Ok(TransportMode::Replay),
            other => Err(format!("unknown transport {other:?} (live, mock or replay)")),
        }
    }
}

impl fmt::Display for TransportMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TransportMode::Live => "live",
            TransportMode::Mock => "mock",
            TransportMode::Replay => "replay",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub initial_backoff_secs: f64,
    pub multiplier: f64,
    pub max_attempts: u32,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            initial_backoff_secs: 1.0,
            multiplier: 2.0,
            max_attempts: 5,
        }
    }
}

impl RetryPolicy {
    fn backoff(&self, retry: u32) -> Duration {
        let secs = self.initial_backoff_secs * self.multiplier.powi(retry as i32);
        Duration::from_secs_f64(secs.clamp(0.0, 300.0))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EndpointConfig {
    pub base_url: String,
    pub model_name: String,
    #[serde(default = "default_key_env")]
    pub api_key_env: String,
    #[serde(default = "default_timeout")]
    pub timeout_secs: f64,
    #[serde(default = "default_in_flight")]
    pub max_in_flight: usize,
    #[serde(default)]
    pub retry: RetryPolicy,
}

fn default_key_env() -> String {
    "OPENAI_API_KEY".into()
}

fn default_timeout() -> f64 {
    120.0
}

fn default_in_flight() -> usize {
    4
}

impl EndpointConfig {
    pub fn new(base_url: impl Into<String>, model_name: impl Into<String>) -> Self {
        EndpointConfig {
            base_url: base_url.into(),
            model_name: model_name.into(),
            api_key_env: default_key_env(),
            timeout_secs: default_timeout(),
            max_in_flight: default_in_flight(),
            retry: RetryPolicy::default(),
        }
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        if self.max_in_flight < 1 {
            return Err(GatewayError::Config("max_in_flight must be >= 1".into()));
        }
        if !self.timeout_secs.is_finite() || self.timeout_secs <= 0.0 {
            return Err(GatewayError::Config("timeout must be finite and > 0".into()));
        }
        if self.retry.max_attempts < 1 {
            return Err(GatewayError::Config("retry max_attempts must be >= 1".into()));
        }
        if self.model_name.is_empty() {
            return Err(GatewayError::Config("model name is empty".into()));
        }
        Ok(())
    }
}

/// Decoding parameters sent with every chat request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplingParams {
    pub temperature: f64,
    pub seed: Option<u64>,
    pub max_tokens: Option<u32>,
}

impl Default for SamplingParams {
    fn default() -> Self {
        SamplingParams {
            temperature: 0.0,
            seed: Some(0),
            max_tokens: None,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TransportError {
    #[error("request timed out: {0}")]
    Timeout(String),
    #[error("http status {code}: {body}")]
    Status { code: u16, body: String },
    #[error("connection error: {0}")]
    Io(String),
    #[error("malformed response: {0}")]
    Protocol(String),
}

impl TransportError {
    /// Timeouts, connection failures, 408, 429 and 5xx are retried.
    pub fn is_transient(&self) -> bool {
        match self {
            TransportError::Timeout(_) | TransportError::Io(_) => true,
            TransportError::Status { code, .. } => {
                *code == 408 || *code == 429 || (500..600).contains(code)
            }
            TransportError::Protocol(_) => false,
        }
    }
}

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("transport failed after {attempts} attempt(s): {last}")]
    Transport { attempts: u32, last: TransportError },
    #[error("replay cache miss for request {0}")]
    CacheMiss(String),
    #[error("gateway configuration error: {0}")]
    Config(String),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("invalid request: {0}")]
    Validation(String),
    #[error("replay cache error: {0}")]
    Cache(String),
}

/// Anything that can carry one request body to an endpoint and return the
/// decoded JSON response.
pub trait Transport: Send + Sync {
    fn post(&self, endpoint: Endpoint, body: &Value) -> Result<Value, TransportError>;
}

impl<T: Transport + ?Sized> Transport for Arc<T> {
    fn post(&self, endpoint: Endpoint, body: &Value) -> Result<Value, TransportError> {
        (**self).post(endpoint, body)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    pub total_tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Completion {
    pub text: String,
    pub finish_reason: Option<String>,
    pub usage: Option<Usage>,
    pub request_hash: String,
}

/// Request body for `POST {base_url}/chat/completions`.
pub fn chat_body(model: &str, prompt: &RenderedPrompt, sampling: &SamplingParams) -> Value {
    let user = match &prompt.image_ref {
        Some(image) => json!([
            {"type": "text", "text": prompt.user_text},
            {"type": "image_url", "image_url": {"url": image}},
        ]),
        None => Value::String(prompt.user_text.clone()),
    };
    let mut body = json!({
        "model": model,
        "messages": [
            {"role": "system", "content": prompt.system_text},
            {"role": "user", "content": user},
        ],
        "temperature": sampling.temperature,
    });
    if let Some(seed) = sampling.seed {
        body["seed"] = json!(seed);
    }
    if let Some(max) = sampling.max_tokens {
        body["max_tokens"] = json!(max);
    }
    body
}

pub fn embeddings_body(model: &str, texts: &[String]) -> Value {
    json!({"model": model, "input": texts})
}

/// Content digest of a request: endpoint kind plus canonical JSON body.
pub fn request_hash(endpoint: Endpoint, body: &Value) -> String {
    let mut h = Sha256::new();
    h.update(endpoint.path().as_bytes());
    h.update(b"\n");
    // serde_json maps are ordered by key, so this is canonical.
    h.update(serde_json::to_string(body).expect("json serializes").as_bytes());
    hex::encode(h.finalize())
}

/// Counting semaphore bounding simultaneous outstanding requests.
struct InFlightLimiter {
    max: usize,
    current: Mutex<usize>,
    freed: Condvar,
}

struct InFlightGuard<'a>(&'a InFlightLimiter);

impl InFlightLimiter {
    fn new(max: usize) -> Self {
        InFlightLimiter {
            max,
            current: Mutex::new(0),
            freed: Condvar::new(),
        }
    }

    fn acquire(&self) -> InFlightGuard<'_> {
        let mut n = self.current.lock().expect("limiter lock");
        while *n >= self.max {
            n = self.freed.wait(n).expect("limiter lock");
        }
        *n += 1;
        InFlightGuard(self)
    }
}

impl Drop for InFlightGuard<'_> {
    fn drop(&mut self) {
        let mut n = self.0.current.lock().expect("limiter lock");
        *n -= 1;
        self.0.freed.notify_one();
    }
}

pub struct Gateway {
    config: EndpointConfig,
    mode: TransportMode,
    transport: Option<Box<dyn Transport>>,
    cache: Option<ReplayCache>,
    limiter: InFlightLimiter,
    sampling: SamplingParams,
    exchanges: AtomicU64,
    wire_requests: AtomicU64,
}

impl fmt::Debug for Gateway {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Gateway")
            .field("model", &self.config.model_name)
            .field("mode", &self.mode)
            .finish()
    }
}

impl Gateway {
    /// HTTP gateway. Fails when the API key variable is unset.
    pub fn live(config: EndpointConfig, cache_dir: Option<PathBuf>) -> Result<Self, GatewayError> {
        config.validate()?;
        let key = std::env::var(&config.api_key_env).map_err(|_| {
            GatewayError::Config(format!(
                "environment variable {} is not set",
                config.api_key_env
            ))
        })?;
        let transport = LiveTransport::new(&config, key);
        Self::build(config, TransportMode::Live, Some(Box::new(transport)), cache_dir)
    }

    /// Gateway over an in-process transport.
    pub fn with_transport(
        config: EndpointConfig,
        transport: impl Transport + 'static,
        cache_dir: Option<PathBuf>,
    ) -> Result<Self, GatewayError> {
        config.validate()?;
        Self::build(config, TransportMode::Mock, Some(Box::new(transport)), cache_dir)
    }

    /// Cache-only gateway; any request not in the cache is an error.
    pub fn replay(config: EndpointConfig, cache_dir: PathBuf) -> Result<Self, GatewayError> {
        config.validate()?;
        if !cache_dir.is_dir() {
            return Err(GatewayError::Config(format!(
                "replay cache directory {} does not exist",
                cache_dir.display()
            )));
        }
        Self::build(config, TransportMode::Replay, None, Some(cache_dir))
    }

    fn build(
        config: EndpointConfig,
        mode: TransportMode,
        transport: Option<Box<dyn Transport>>,
        cache_dir: Option<PathBuf>,
    ) -> Result<Self, GatewayError> {
        let cache = cache_dir.map(ReplayCache::open).transpose()?;
        Ok(Gateway {
            limiter: InFlightLimiter::new(config.max_in_flight),
            config,
            mode,
            transport,
            cache,
            sampling: SamplingParams::default(),
            exchanges: AtomicU64::new(0),
            wire_requests: AtomicU64::new(0),
        })
    }

    pub fn with_sampling(mut self, sampling: SamplingParams) -> Self {
        self.sampling = sampling;
        self
    }

    pub fn config(&self) -> &EndpointConfig {
        &self.config
    }

    pub fn mode(&self) -> TransportMode {
        self.mode
    }

    pub fn sampling(&self) -> &SamplingParams {
        &self.sampling
    }

    pub fn max_in_flight(&self) -> usize {
        self.config.max_in_flight
    }

    /// Logical requests served (cache hits included, retries not).
    pub fn exchange_count(&self) -> u64 {
        self.exchanges.load(Ordering::Relaxed)
    }

    /// Requests put on the transport, retries included.
    pub fn wire_request_count(&self) -> u64 {
        self.wire_requests.load(Ordering::Relaxed)
    }

    /// Completes a prompt with the gateway's default sampling parameters.
    pub fn complete(&self, prompt: &RenderedPrompt) -> Result<Completion, GatewayError> {
        self.complete_with(prompt, &self.sampling.clone())
    }

    pub fn complete_with(
        &self,
        prompt: &RenderedPrompt,
        sampling: &SamplingParams,
    ) -> Result<Completion, GatewayError> {
        let body = chat_body(&self.config.model_name, prompt, sampling);
        let (hash, response) = self.exchange(Endpoint::Chat, &body)?;
        let completion = parse_chat_response(&response, hash)?;
        if let Some(u) = &completion.usage {
            log::debug!(
                "{}: {} prompt + {} completion tokens",
                self.config.model_name,
                u.prompt_tokens,
                u.completion_tokens
            );
        }
        Ok(completion)
    }

    /// One embedding vector per input text, all of the same dimension.
    pub fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, GatewayError> {
        if texts.is_empty() {
            return Err(GatewayError::Validation("embed needs at least one text".into()));
        }
        let body = embeddings_body(&self.config.model_name, texts);
        let (_, response) = self.exchange(Endpoint::Embeddings, &body)?;
        let vectors = parse_embeddings_response(&response)?;
        if vectors.len() != texts.len() {
            return Err(GatewayError::Protocol(format!(
                "expected {} embeddings, got {}",
                texts.len(),
                vectors.len()
            )));
        }
        let dim = vectors[0].len();
        if vectors.iter().any(|v| v.len() != dim) {
            return Err(GatewayError::Protocol("embedding dimensions differ within a batch".into()));
        }
        Ok(vectors)
    }

    fn exchange(&self, endpoint: Endpoint, body: &Value) -> Result<(String, Value), GatewayError> {
        let hash = request_hash(endpoint, body);
        self.exchanges.fetch_add(1, Ordering::Relaxed);
        let Some(transport) = &self.transport else {
            let cache = self.cache.as_ref().expect("replay gateways have a cache");
            return match cache.get(&hash)? {
                Some(v) => Ok((hash, v)),
                None => Err(GatewayError::CacheMiss(hash)),
            };
        };
        let policy = &self.config.retry;
        let mut attempt = 0;
        let response = loop {
            attempt += 1;
            let result = {
                let _slot = self.limiter.acquire();
                self.wire_requests.fetch_add(1, Ordering::Relaxed);
                transport.post(endpoint, body)
            };
            match result {
                Ok(v) => break v,
                Err(e) if e.is_transient() && attempt < policy.max_attempts => {
                    let wait = policy.backoff(attempt - 1);
                    log::warn!(
                        "{} attempt {attempt} failed ({e}); retrying in {:.2}s",
                        endpoint.path(),
                        wait.as_secs_f64()
                    );
                    std::thread::sleep(wait);
                }
                Err(last) => {
                    return Err(GatewayError::Transport {
                        attempts: attempt,
                        last,
                    })
                }
            }
        };
        if let Some(cache) = &self.cache {
            cache.put(&hash, &response)?;
        }
        Ok((hash, response))
    }
}

fn parse_chat_response(v: &Value, request_hash: String) -> Result<Completion, GatewayError> {
    let choice = v
        .get("choices")
        .and_then(|c| c.get(0))
        .ok_or_else(|| GatewayError::Protocol("response has no choices".into()))?;
    let text = choice
        .pointer("/message/content")
        .and_then(Value::as_str)
        .ok_or_else(|| GatewayError::Protocol("choice has no message content".into()))?
        .to_string();
    let finish_reason = choice
        .get("finish_reason")
        .and_then(Value::as_str)
        .map(String::from);
    let usage = v
        .get("usage")
        .and_then(|u| serde_json::from_value::<Usage>(u.clone()).ok());
    Ok(Completion {
        text,
        finish_reason,
        usage,
        request_hash,
    })
}

fn parse_embeddings_response(v: &Value) -> Result<Vec<Vec<f64>>, GatewayError> {
    let data = v
        .get("data")
        .and_then(Value::as_array)
        .ok_or_else(|| GatewayError::Protocol("response has no data array".into()))?;
    let mut items = Vec::with_capacity(data.len());
    for (pos, item) in data.iter().enumerate() {
        let index = item
            .get("index")
            .and_then(Value::as_u64)
            .map_or(pos, |i| i as usize);
        let vector = item
            .get("embedding")
            .and_then(Value::as_array)
            .ok_or_else(|| GatewayError::Protocol("data item has no embedding".into()))?
            .iter()
            .map(|x| {
                x.as_f64()
                    .ok_or_else(|| GatewayError::Protocol("non-numeric embedding value".into()))
            })
            .collect::<Result<Vec<f64>, _>>()?;
        items.push((index, vector));
    }
    items.sort_by_key(|(i, _)| *i);
    Ok(items.into_iter().map(|(_, v)| v).collect())
}
