use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use super::PipelineError;
use crate::distill::text::TextLimits;
use crate::distill::{LossWeights, TrainConfig};
use crate::gateway::{EndpointConfig, TransportMode};
use crate::parser::ArcPolicy;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusPaths {
    pub name: String,
    pub train: PathBuf,
    pub dev: PathBuf,
    pub test: PathBuf,
    #[serde(default)]
    pub fine_grained: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSize {
    pub embed: usize,
    pub hidden: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSizes {
    pub assistant: ModelSize,
    pub student: ModelSize,
}

impl Default for ModelSizes {
    fn default() -> Self {
        ModelSizes {
            assistant: ModelSize { embed: 16, hidden: 32 },
            student: ModelSize { embed: 8, hidden: 16 },
        }
    }
}

/// Single JSON document driving a pipeline run. Relative paths are resolved
/// against the directory of the config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub schema_version: u32,
    pub corpus: CorpusPaths,
    pub teacher: EndpointConfig,
    pub assistant: EndpointConfig,
    /// Endpoint for sentence embeddings; Sim is reported as n/a without one.
    #[serde(default)]
    pub embedding: Option<EndpointConfig>,
    /// Directory of template files; built-in templates when absent.
    #[serde(default)]
    pub templates: Option<PathBuf>,
    #[serde(default)]
    pub arc: ArcPolicy,
    pub loss: LossWeights,
    #[serde(default = "TrainConfig::desk")]
    pub train: TrainConfig,
    #[serde(default)]
    pub models: ModelSizes,
    #[serde(default)]
    pub text: TextLimits,
    pub output_dir: PathBuf,
    pub transport: TransportMode,
    #[serde(default)]
    pub cache_dir: Option<PathBuf>,
    #[serde(default)]
    pub quarantine_path: Option<PathBuf>,
    #[serde(default)]
    pub seed: u64,
}

fn resolve(base: &Path, p: &mut PathBuf) {
    if p.is_relative() {
        *p = base.join(&*p);
    }
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = fs::read_to_string(path).map_err(|e| PipelineError::io(path, e))?;
        let mut cfg: PipelineConfig = serde_json::from_str(&text)
            .map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        for p in [&mut self.corpus.train, &mut self.corpus.dev, &mut self.corpus.test, &mut self.output_dir] {
            resolve(base, p);
        }
        for p in [&mut self.templates, &mut self.cache_dir, &mut self.quarantine_path]
            .into_iter()
            .flatten()
        {
            resolve(base, p);
        }
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(PipelineError::Config(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        for p in [&self.corpus.train, &self.corpus.dev, &self.corpus.test] {
            if !p.is_file() {
                return Err(PipelineError::Config(format!("corpus file {} does not exist", p.display())));
            }
        }
        if let Some(t) = &self.templates {
            if !t.is_dir() {
                return Err(PipelineError::Config(format!("template directory {} does not exist", t.display())));
            }
        }
        for e in [Some(&self.teacher), Some(&self.assistant), self.embedding.as_ref()].into_iter().flatten() {
            e.validate()?;
        }
        ArcPolicy::new(self.arc.max_attempts)?;
        self.loss.validate()?;
        self.train.validate()?;
        for m in [self.models.assistant, self.models.student] {
            if m.embed == 0 || m.hidden == 0 {
                return Err(PipelineError::Config("model sizes must be positive".into()));
            }
        }
        match (&self.transport, &self.cache_dir) {
            (TransportMode::Replay, None) => {
                return Err(PipelineError::Config("replay transport needs cache_dir".into()))
            }
            (TransportMode::Replay, Some(d)) if !d.is_dir() => {
                return Err(PipelineError::Config(format!("replay cache {} does not exist", d.display())))
            }
            _ => {}
        }
        Ok(())
    }

    /// Digest over the whole config minus run-location fields.
    pub fn digest(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        for k in ["output_dir", "transport", "cache_dir", "quarantine_path"] {
            v.as_object_mut().expect("object").remove(k);
        }
        for k in ["train", "dev", "test"] {
            v["corpus"][k] = Value::Null;
        }
        digest_of(&v)
    }

    /// Endpoint settings that affect responses (not secrets or timeouts).
    pub fn endpoint_identity(e: &EndpointConfig) -> Value {
        json!({"base_url": e.base_url, "model": e.model_name})
    }
}

/// First 16 hex chars of the SHA-256 of the canonical JSON of `v`.
pub fn digest_of(v: &Value) -> String {
    let bytes = serde_json::to_vec(v).expect("json serializes");
    let h = Sha256::digest(&bytes);
    hex::encode(h)[..16].to_string()
}

pub fn file_sha256(path: &Path) -> Result<String, PipelineError> {
    let bytes = fs::read(path).map_err(|e| PipelineError::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}
