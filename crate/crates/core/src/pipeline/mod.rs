//! Staged pipeline over one corpus: teacher synthesis, assistant
//! augmentation, dataset assembly, assistant and student training,
//! evaluation and reporting.
//!
//! Every stage writes into `out/<stage>/<digest>/`, where the digest covers
//! the stage's own settings and the digests of its inputs. A stage directory
//! is complete once its `manifest.json` exists; complete stages are reused.

mod config;
mod evaluate;
mod report;

pub use config::{
    digest_of, file_sha256, CorpusPaths, ModelSize, ModelSizes, PipelineConfig, SCHEMA_VERSION,
};
pub use evaluate::{evaluate_predictions, EvalReport, GoldRecord, MetricSet, Prediction, ScoreRow};
pub use report::{classification_table, generation_table, CorpusRow, Report, ReportRow};

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{de::DeserializeOwned, Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::builder::{
    augment_with_assistant, build_full, run_stage1, run_stage2, BuildError, BuildReport,
};
use crate::distill::text::{encode_entry, entry_texts, prompt_ids, TextLimits, Vocabulary, EOS};
use crate::distill::{
    load_model, save_model, train, DistillError, LossWeights, ModelHeader, Role, TokenizedExample,
    ToyDims, ToyModel,
};
use crate::gateway::mock::SimulatedModel;
use crate::gateway::{EndpointConfig, Gateway, GatewayError, SamplingParams, TransportMode};
use crate::metrics::MetricError;
use crate::model::{
    load_dataset, merge_datasets, read_jsonl, save_dataset, write_jsonl, Corpus, DatasetEntry,
    DatasetRole, ModelError, ReasoningDataset, Sample, SentimentLabel, Split,
};
use crate::parser::{append_quarantine, format_chain, ArcError, FailureReport};
use crate::prompt::{TemplateError, TemplateSet};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("stage {stage} needs {missing}; run the upstream stage first")]
    Dependency { stage: Stage, missing: PathBuf },
    #[error("nothing to report under {0}: no stage has completed")]
    NothingToReport(PathBuf),
    #[error("{0}")]
    Validation(String),
    #[error(transparent)]
    Build(#[from] BuildError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Arc(#[from] ArcError),
    #[error(transparent)]
    Distill(#[from] DistillError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Template(#[from] TemplateError),
}

impl PipelineError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        PipelineError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

type Result<T, E = PipelineError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stage {
    Synthesize,
    Augment,
    Build,
    Train,
    Distill,
    Ablate,
    Evaluate,
    Report,
}

impl Stage {
    /// Execution order.
    pub const ALL: [Stage; 8] = [
        Stage::Synthesize,
        Stage::Augment,
        Stage::Build,
        Stage::Train,
        Stage::Distill,
        Stage::Ablate,
        Stage::Evaluate,
        Stage::Report,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Synthesize => "synthesize",
            Stage::Augment => "augment",
            Stage::Build => "build",
            Stage::Train => "train",
            Stage::Distill => "distill",
            Stage::Ablate => "ablate",
            Stage::Evaluate => "evaluate",
            Stage::Report => "report",
        }
    }

    /// Parses `all` or a comma-separated list; the result is deduplicated and
    /// in execution order.
    pub fn parse_list(s: &str) -> Result<Vec<Stage>, String> {
        if s.trim() == "all" {
            return Ok(Stage::ALL.to_vec());
        }
        let mut stages = s
            .split(',')
            .map(str::trim)
            .filter(|p| !p.is_empty())
            .map(str::parse)
            .collect::<Result<Vec<Stage>, String>>()?;
        if stages.is_empty() {
            return Err("no stage selected".into());
        }
        stages.sort();
        stages.dedup();
        Ok(stages)
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| format!("unknown stage {s:?}"))
    }
}

/// Student training variants: the full method and the two ablations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Variant {
    Main,
    /// Soft-label branch switched off.
    Lambda0,
    /// Teacher data only and no soft labels.
    WithoutAssistant,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Main, Variant::Lambda0, Variant::WithoutAssistant];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Main => "main",
            Variant::Lambda0 => "lambda0",
            Variant::WithoutAssistant => "wo_asst",
        }
    }

    fn label(self) -> &'static str {
        match self {
            Variant::Main => "student",
            Variant::Lambda0 => "student (lambda=0)",
            Variant::WithoutAssistant => "student (w/o assistant)",
        }
    }

    fn weights(self, base: &LossWeights) -> LossWeights {
        match self {
            Variant::Main => *base,
            Variant::Lambda0 | Variant::WithoutAssistant => LossWeights {
                lambda_kd: 0.0,
                ..*base
            },
        }
    }
}

/// Which half of teacher synthesis to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SynthPart {
    Stage1,
    Stage2,
    Both,
}

impl FromStr for SynthPart {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "1" => Ok(SynthPart::Stage1),
            "2" => Ok(SynthPart::Stage2),
            "both" => Ok(SynthPart::Both),
            _ => Err(format!("unknown synthesis stage {s:?} (1, 2, both)")),
        }
    }
}

pub const MANIFEST: &str = "manifest.json";
const STAGE1_STATE: &str = "stage1_state.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub stage: String,
    pub digest: String,
    /// File name to SHA-256, for every other file in the directory.
    pub files: BTreeMap<String, String>,
}

fn write_manifest(dir: &Path, stage: Stage, digest: &str) -> Result<()> {
    let mut files = BTreeMap::new();
    for entry in fs::read_dir(dir).map_err(|e| PipelineError::io(dir, e))? {
        let path = entry.map_err(|e| PipelineError::io(dir, e))?.path();
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
        if path.is_file() && name != MANIFEST {
            files.insert(name, file_sha256(&path)?);
        }
    }
    let m = Manifest {
        stage: stage.name().into(),
        digest: digest.into(),
        files,
    };
    write_json(&dir.join(MANIFEST), &m)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("value serializes");
    text.push('\n');
    fs::write(path, text).map_err(|e| PipelineError::io(path, e))
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| PipelineError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| PipelineError::Validation(format!("{}: {e}", path.display())))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| PipelineError::io(path, e))
}

fn remove_if_present(path: &Path) -> Result<()> {
    match fs::remove_file(path) {
        Err(e) if e.kind() != std::io::ErrorKind::NotFound => Err(PipelineError::io(path, e)),
        _ => Ok(()),
    }
}

fn is_complete(dir: &Path) -> bool {
    dir.join(MANIFEST).is_file()
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| PipelineError::io(dir, e))
}

/// Reads all three split files; a path shared between splits is read once
/// and each split takes the samples tagged with it.
pub fn load_corpus_splits(paths: &CorpusPaths) -> Result<Corpus> {
    let mut files: HashMap<&Path, Vec<Sample>> = HashMap::new();
    let mut samples = Vec::new();
    for (split, path) in [(Split::Train, &paths.train), (Split::Dev, &paths.dev), (Split::Test, &paths.test)] {
        if !files.contains_key(path.as_path()) {
            files.insert(path, read_jsonl(path)?);
        }
        let all = &files[path.as_path()];
        let shared = [&paths.train, &paths.dev, &paths.test].iter().filter(|p| **p == path).count() > 1;
        let (mine, other): (Vec<&Sample>, Vec<&Sample>) = all.iter().partition(|s| s.split == split);
        if !shared && !other.is_empty() {
            return Err(PipelineError::Validation(format!(
                "{}: {} sample(s) are not tagged {split}, e.g. {:?}",
                path.display(),
                other.len(),
                other[0].id
            )));
        }
        samples.extend(mine.into_iter().cloned());
    }
    let corpus = Corpus::new(paths.fine_grained, samples)?;
    let c = corpus.counts();
    log::info!("corpus {}: train {}, dev {}, test {}", paths.name, c.train, c.dev, c.test);
    Ok(corpus)
}

/// Digests of the stages whose inputs are fixed by the config alone.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Digests {
    pub corpus: String,
    pub synthesize: String,
    pub augment: String,
    pub build: String,
    pub train: String,
    pub variants: BTreeMap<&'static str, String>,
}

impl Digests {
    fn compute(cfg: &PipelineConfig, templates: &TemplateSet) -> Result<Self> {
        let corpus = digest_of(&json!({
            "name": cfg.corpus.name,
            "fine_grained": cfg.corpus.fine_grained,
            "train": file_sha256(&cfg.corpus.train)?,
            "dev": file_sha256(&cfg.corpus.dev)?,
            "test": file_sha256(&cfg.corpus.test)?,
        }));
        let tpl = digest_of(&json!(templates.fingerprint()));
        let synthesize = digest_of(&json!({
            "corpus": corpus,
            "teacher": PipelineConfig::endpoint_identity(&cfg.teacher),
            "templates": tpl,
            "arc": cfg.arc,
            "seed": cfg.seed,
        }));
        let augment = digest_of(&json!({
            "corpus": corpus,
            "assistant": PipelineConfig::endpoint_identity(&cfg.assistant),
            "templates": tpl,
            "arc": cfg.arc,
            "seed": cfg.seed,
        }));
        let build = digest_of(&json!({"synthesize": synthesize, "augment": augment}));
        let train = digest_of(&json!({
            "build": build,
            "loss": cfg.loss,
            "train": cfg.train,
            "model": cfg.models.assistant,
            "text": cfg.text,
            "seed": cfg.seed,
        }));
        let variants = Variant::ALL
            .into_iter()
            .map(|v| {
                let d = digest_of(&json!({
                    "train": train,
                    "variant": v.name(),
                    "loss": v.weights(&cfg.loss),
                    "model": cfg.models.student,
                }));
                (v.name(), d)
            })
            .collect();
        Ok(Digests {
            corpus,
            synthesize,
            augment,
            build,
            train,
            variants,
        })
    }
}

/// Outcome of one stage in [`Pipeline::run`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StageRun {
    pub stage: Stage,
    pub dirs: Vec<PathBuf>,
    pub reused: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Stage1State {
    train_mispredicted: Vec<Sample>,
    train_failures: usize,
    train_calls: u64,
    eval_entries: Vec<DatasetEntry>,
    eval_mispredicted: Vec<Sample>,
    eval_calls: u64,
    /// Parsed stage-1 labels of dev and test samples.
    predictions: BTreeMap<String, SentimentLabel>,
}

/// Counts of teacher synthesis, over the training split and over the
/// dev and test splits used as references.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthReport {
    pub n: usize,
    pub n_t1: usize,
    pub n_t2: usize,
    pub quarantined_stage2: usize,
    pub stage1_failures: usize,
    pub gateway_calls: u64,
    pub eval_n: usize,
    pub eval_references: usize,
    pub eval_quarantined: usize,
    pub eval_gateway_calls: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentReport {
    pub n: usize,
    pub n_a: usize,
    pub train_accuracy: f64,
    pub failures: usize,
    pub gateway_calls: u64,
}

/// A loaded, validated pipeline configuration with its corpus.
pub struct Pipeline {
    cfg: PipelineConfig,
    templates: TemplateSet,
    corpus: Corpus,
    digests: Digests,
}

impl Pipeline {
    pub fn new(cfg: PipelineConfig) -> Result<Self> {
        cfg.validate()?;
        let templates = match &cfg.templates {
            Some(dir) => TemplateSet::from_dir(dir, cfg.corpus.fine_grained)?,
            None => TemplateSet::builtin(cfg.corpus.fine_grained),
        };
        let corpus = load_corpus_splits(&cfg.corpus)?;
        let digests = Digests::compute(&cfg, &templates)?;
        Ok(Pipeline {
            cfg,
            templates,
            corpus,
            digests,
        })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.cfg
    }

    pub fn digests(&self) -> &Digests {
        &self.digests
    }

    pub fn corpus(&self) -> &Corpus {
        &self.corpus
    }

    fn dir(&self, stage: &str, digest: &str) -> PathBuf {
        self.cfg.output_dir.join(stage).join(digest)
    }

    pub fn synth_dir(&self) -> PathBuf {
        self.dir("synthesize", &self.digests.synthesize)
    }

    pub fn augment_dir(&self) -> PathBuf {
        self.dir("augment", &self.digests.augment)
    }

    pub fn build_dir(&self) -> PathBuf {
        self.dir("build", &self.digests.build)
    }

    pub fn train_dir(&self) -> PathBuf {
        self.dir("train", &self.digests.train)
    }

    pub fn variant_dir(&self, v: Variant) -> PathBuf {
        self.dir("distill", &format!("{}-{}", v.name(), self.digests.variants[v.name()]))
    }

    fn present_variants(&self) -> Vec<Variant> {
        Variant::ALL
            .into_iter()
            .filter(|&v| is_complete(&self.variant_dir(v)))
            .collect()
    }

    fn evaluate_digest(&self) -> String {
        let variants: Vec<&str> = self
            .present_variants()
            .into_iter()
            .map(|v| self.digests.variants[v.name()].as_str())
            .collect();
        digest_of(&json!({
            "synthesize": self.digests.synthesize,
            "train": self.digests.train,
            "variants": variants,
            "embedding": self.cfg.embedding.as_ref().map(PipelineConfig::endpoint_identity),
        }))
    }

    pub fn evaluate_dir(&self) -> PathBuf {
        self.dir("evaluate", &self.evaluate_digest())
    }

    pub fn report_dir(&self) -> PathBuf {
        let d = digest_of(&json!({"build": self.digests.build, "evaluate": self.evaluate_digest()}));
        self.dir("report", &d)
    }

    /// Whether any stage has completed under the output root.
    pub fn has_outputs(&self) -> bool {
        any_manifest(&self.cfg.output_dir)
    }

    fn require(&self, stage: Stage, dir: &Path) -> Result<()> {
        if is_complete(dir) {
            Ok(())
        } else {
            Err(PipelineError::Dependency {
                stage,
                missing: dir.join(MANIFEST),
            })
        }
    }

    fn gateway(&self, endpoint: &EndpointConfig, preset: SimulatedModel) -> Result<Gateway> {
        gateway_for(&self.cfg, endpoint, preset)
    }

    /// Runs the given stages in order, reusing complete stage directories.
    pub fn run(&self, stages: &[Stage]) -> Result<Vec<StageRun>> {
        let mut ordered = stages.to_vec();
        ordered.sort();
        ordered.dedup();
        let mut runs = Vec::new();
        for stage in ordered {
            let run = match stage {
                Stage::Synthesize => self.stage_once(stage, self.synth_dir(), |d| self.synthesize_into(d, SynthPart::Both))?,
                Stage::Augment => self.stage_once(stage, self.augment_dir(), |d| self.augment_into(d))?,
                Stage::Build => self.stage_once(stage, self.build_dir(), |d| self.build_into(d))?,
                Stage::Train => self.stage_once(stage, self.train_dir(), |d| self.train_into(d))?,
                Stage::Distill => self.variants(stage, &[Variant::Main])?,
                Stage::Ablate => self.variants(stage, &[Variant::Lambda0, Variant::WithoutAssistant])?,
                Stage::Evaluate => self.stage_once(stage, self.evaluate_dir(), |d| self.evaluate_into(d))?,
                Stage::Report => self.report()?,
            };
            runs.push(run);
        }
        Ok(runs)
    }

    fn stage_once(&self, stage: Stage, dir: PathBuf, f: impl FnOnce(&Path) -> Result<()>) -> Result<StageRun> {
        let reused = is_complete(&dir);
        if reused {
            log::info!("{stage}: reusing {}", dir.display());
        } else {
            log::info!("{stage}: writing {}", dir.display());
            create_dir(&dir)?;
            f(&dir)?;
            let digest = dir.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
            write_manifest(&dir, stage, &digest)?;
        }
        Ok(StageRun {
            stage,
            dirs: vec![dir],
            reused,
        })
    }

    fn variants(&self, stage: Stage, variants: &[Variant]) -> Result<StageRun> {
        let mut dirs = Vec::new();
        let mut reused = true;
        for &v in variants {
            let run = self.stage_once(stage, self.variant_dir(v), |d| self.distill_into(d, v))?;
            reused &= run.reused;
            dirs.extend(run.dirs);
        }
        Ok(StageRun { stage, dirs, reused })
    }

    /// Teacher synthesis, optionally split into its two stages. Stage 1
    /// leaves its state in the stage directory for a later stage 2.
    pub fn synthesize(&self, part: SynthPart) -> Result<PathBuf> {
        let dir = self.synth_dir();
        if part != SynthPart::Stage1 && is_complete(&dir) {
            log::info!("synthesize: reusing {}", dir.display());
            return Ok(dir);
        }
        create_dir(&dir)?;
        self.synthesize_into(&dir, part)?;
        if part != SynthPart::Stage1 {
            write_manifest(&dir, Stage::Synthesize, &self.digests.synthesize)?;
        }
        Ok(dir)
    }

    fn provenance(&self, ds: ReasoningDataset, digest: &str) -> ReasoningDataset {
        ds.with_provenance("config_digest", digest)
            .with_provenance("corpus", self.cfg.corpus.name.clone())
    }

    fn synthesize_into(&self, dir: &Path, part: SynthPart) -> Result<()> {
        let state_path = dir.join(STAGE1_STATE);
        let run_stage1_now = match part {
            SynthPart::Stage1 => true,
            SynthPart::Both => !state_path.is_file(),
            SynthPart::Stage2 => false,
        };
        let gw = self.gateway(&self.cfg.teacher, SimulatedModel::teacher())?;
        let digest = &self.digests.synthesize;
        if run_stage1_now {
            let train = self.corpus.split(Split::Train);
            let mut eval = self.corpus.split(Split::Dev);
            eval.extend(self.corpus.split(Split::Test));
            let ck_train = dir.join("checkpoint_stage1_train.jsonl");
            let ck_eval = dir.join("checkpoint_stage1_eval.jsonl");
            let s1 = run_stage1(&train, &gw, &self.templates, &self.cfg.arc, Some(&ck_train))?;
            let s1_eval = run_stage1(&eval, &gw, &self.templates, &self.cfg.arc, Some(&ck_eval))?;
            save_dataset(&self.provenance(s1.dataset.clone(), digest), &dir.join("teacher_stage1.jsonl"))?;
            let state = Stage1State {
                train_mispredicted: s1.mispredicted,
                train_failures: s1.failures.len(),
                train_calls: s1.gateway_calls,
                eval_entries: s1_eval.dataset.entries().to_vec(),
                eval_mispredicted: s1_eval.mispredicted,
                eval_calls: s1_eval.gateway_calls,
                predictions: s1_eval.predictions,
            };
            write_json(&state_path, &state)?;
            remove_if_present(&ck_train)?;
            remove_if_present(&ck_eval)?;
        }
        if part == SynthPart::Stage1 {
            return Ok(());
        }
        if !state_path.is_file() {
            return Err(PipelineError::Dependency {
                stage: Stage::Synthesize,
                missing: state_path,
            });
        }
        let state: Stage1State = read_json(&state_path)?;
        let s1 = load_dataset(&dir.join("teacher_stage1.jsonl"))?;
        let ck_train = dir.join("checkpoint_stage2_train.jsonl");
        let ck_eval = dir.join("checkpoint_stage2_eval.jsonl");
        let s2 = run_stage2(&state.train_mispredicted, &gw, &self.templates, &self.cfg.arc, Some(&ck_train))?;
        let s2_eval = run_stage2(&state.eval_mispredicted, &gw, &self.templates, &self.cfg.arc, Some(&ck_eval))?;

        let s2_ds = self.provenance(s2.dataset.clone(), digest);
        save_dataset(&s2_ds, &dir.join("teacher_stage2.jsonl"))?;
        let full = merge_datasets(&s1, &s2_ds)?.retagged("teacher_full", DatasetRole::TeacherFull)?;
        save_dataset(&full, &dir.join("teacher_full.jsonl"))?;

        let mut references = state.eval_entries.clone();
        references.extend(s2_eval.dataset.entries().iter().cloned());
        references.sort_by(|a, b| a.sample.id.cmp(&b.sample.id));
        write_jsonl(&dir.join("references.jsonl"), &references)?;

        let by_id: HashMap<&str, &DatasetEntry> = references.iter().map(|e| (e.sample.id.as_str(), e)).collect();
        let test = self.corpus.split(Split::Test);
        let gold: Vec<GoldRecord> = test
            .iter()
            .map(|s| GoldRecord {
                id: s.id.clone(),
                gold_label: s.gold_label,
                reference: by_id.get(s.id.as_str()).map(|e| format_chain(&e.record.chain)),
            })
            .collect();
        write_jsonl(&dir.join("test_gold.jsonl"), &gold)?;
        let teacher_predictions: Vec<Prediction> = test
            .iter()
            .filter_map(|s| {
                state.predictions.get(&s.id).map(|&l| Prediction {
                    id: s.id.clone(),
                    predicted_label: l,
                    reasoning: String::new(),
                })
            })
            .collect();
        write_jsonl(&dir.join("teacher_predictions.jsonl"), &teacher_predictions)?;

        let mut quarantine: Vec<FailureReport> = s2.quarantined.clone();
        quarantine.extend(s2_eval.quarantined.iter().cloned());
        write_jsonl(&dir.join("quarantine.jsonl"), &quarantine)?;
        if let Some(q) = &self.cfg.quarantine_path {
            append_quarantine(q, &quarantine).map_err(|e| PipelineError::io(q, e))?;
        }
        let n = self.corpus.counts().train;
        let report = SynthReport {
            n,
            n_t1: s1.len(),
            n_t2: s2.dataset.len(),
            quarantined_stage2: s2.quarantined.len(),
            stage1_failures: state.train_failures,
            gateway_calls: state.train_calls + s2.gateway_calls,
            eval_n: self.corpus.len() - n,
            eval_references: references.len(),
            eval_quarantined: s2_eval.quarantined.len(),
            eval_gateway_calls: state.eval_calls + s2_eval.gateway_calls,
        };
        write_json(&dir.join("synth_report.json"), &report)?;
        remove_if_present(&ck_train)?;
        remove_if_present(&ck_eval)?;
        log::info!(
            "synthesize: {} stage 1, {} stage 2, {} quarantined of {n}",
            report.n_t1,
            report.n_t2,
            report.quarantined_stage2
        );
        Ok(())
    }

    fn augment_into(&self, dir: &Path) -> Result<()> {
        let gw = self.gateway(&self.cfg.assistant, SimulatedModel::assistant())?;
        let train = self.corpus.split(Split::Train);
        let ck = dir.join("checkpoint_augment.jsonl");
        let out = augment_with_assistant(&train, &gw, &self.templates, &self.cfg.arc, Some(&ck))?;
        save_dataset(&self.provenance(out.dataset.clone(), &self.digests.augment), &dir.join("assistant_aug.jsonl"))?;
        write_jsonl(&dir.join("assistant_failures.jsonl"), &out.failures)?;
        let report = AugmentReport {
            n: train.len(),
            n_a: out.dataset.len(),
            train_accuracy: out.train_accuracy,
            failures: out.failures.len(),
            gateway_calls: out.gateway_calls,
        };
        write_json(&dir.join("augment_report.json"), &report)?;
        remove_if_present(&ck)?;
        log::info!("augment: kept {} of {} (accuracy {:.3})", report.n_a, report.n, report.train_accuracy);
        Ok(())
    }

    fn build_into(&self, dir: &Path) -> Result<()> {
        let (sd, ad) = (self.synth_dir(), self.augment_dir());
        self.require(Stage::Build, &sd)?;
        self.require(Stage::Build, &ad)?;
        let teacher = load_dataset(&sd.join("teacher_full.jsonl"))?;
        let assistant = load_dataset(&ad.join("assistant_aug.jsonl"))?;
        let full = build_full(&teacher, &assistant)?.with_provenance("config_digest", self.digests.build.clone());
        save_dataset(&full, &dir.join("full.jsonl"))?;
        let s: SynthReport = read_json(&sd.join("synth_report.json"))?;
        let a: AugmentReport = read_json(&ad.join("augment_report.json"))?;
        let report = BuildReport::from_counts(
            s.n,
            s.n_t1,
            s.n_t2,
            s.quarantined_stage2,
            Some((a.n_a, a.train_accuracy)),
            s.gateway_calls + a.gateway_calls,
        )?;
        if report.full != full.len() {
            return Err(PipelineError::Validation(format!(
                "full dataset has {} entries, counts say {}",
                full.len(),
                report.full
            )));
        }
        write_json(&dir.join("build_report.json"), &report)?;
        write_text(&dir.join("build_report.txt"), &report.table())?;
        Ok(())
    }

    fn reference_examples(&self, vocab: &Vocabulary, split: Split) -> Result<Vec<TokenizedExample>> {
        let refs: Vec<DatasetEntry> = read_jsonl(&self.synth_dir().join("references.jsonl"))?;
        Ok(refs
            .iter()
            .filter(|e| e.sample.split == split)
            .map(|e| encode_entry(vocab, e, &self.cfg.text))
            .collect())
    }

    fn model_header(&self, dims: ToyDims, digest: &str, vocab: &Vocabulary) -> ModelHeader {
        let mut h = ModelHeader::new(dims, self.cfg.seed, digest);
        h.vocab = vocab.tokens().to_vec();
        h
    }

    fn train_into(&self, dir: &Path) -> Result<()> {
        self.require(Stage::Train, &self.build_dir())?;
        let full = load_dataset(&self.build_dir().join("full.jsonl"))?;
        let teacher = load_dataset(&self.synth_dir().join("teacher_full.jsonl"))?;
        let vocab = Vocabulary::build(entry_texts(full.entries()).iter().map(String::as_str), self.cfg.text.max_vocab);
        let data = encode_all(&vocab, teacher.entries(), &self.cfg.text);
        let dev = self.reference_examples(&vocab, Split::Dev)?;
        let size = self.cfg.models.assistant;
        let dims = ToyDims {
            vocab: vocab.len(),
            embed: size.embed,
            hidden: size.hidden,
        };
        let model = ToyModel::new(dims, self.cfg.seed)?;
        let out = train(model, &data, Some(&dev), &self.cfg.train, &self.cfg.loss, Role::Assistant, None)?;
        save_model(&dir.join("assistant.model"), &self.model_header(dims, &self.digests.train, &vocab), &out.model)?;
        write_jsonl(&dir.join("assistant_log.jsonl"), &out.log)?;
        let preds = predict(&out.model, &vocab, &self.corpus.split(Split::Test), &self.cfg.text);
        write_jsonl(&dir.join("assistant_predictions.jsonl"), &preds)?;
        log::info!("train: assistant on {} examples, {} updates", data.len(), out.updates);
        Ok(())
    }

    fn distill_into(&self, dir: &Path, variant: Variant) -> Result<()> {
        let stage = if variant == Variant::Main { Stage::Distill } else { Stage::Ablate };
        self.require(stage, &self.train_dir())?;
        let (header, assistant) = load_model(&self.train_dir().join("assistant.model"))?;
        let vocab = Vocabulary::from_tokens(header.vocab);
        let ds = match variant {
            Variant::Main | Variant::Lambda0 => load_dataset(&self.build_dir().join("full.jsonl"))?,
            Variant::WithoutAssistant => load_dataset(&self.synth_dir().join("teacher_full.jsonl"))?,
        };
        let data = encode_all(&vocab, ds.entries(), &self.cfg.text);
        let dev = self.reference_examples(&vocab, Split::Dev)?;
        let size = self.cfg.models.student;
        let dims = ToyDims {
            vocab: vocab.len(),
            embed: size.embed,
            hidden: size.hidden,
        };
        let model = ToyModel::new(dims, self.cfg.seed)?;
        let w = variant.weights(&self.cfg.loss);
        let out = train(model, &data, Some(&dev), &self.cfg.train, &w, Role::Student, Some(&assistant))?;
        let digest = &self.digests.variants[variant.name()];
        save_model(&dir.join("student.model"), &self.model_header(dims, digest, &vocab), &out.model)?;
        write_jsonl(&dir.join("student_log.jsonl"), &out.log)?;
        let preds = predict(&out.model, &vocab, &self.corpus.split(Split::Test), &self.cfg.text);
        write_jsonl(&dir.join("predictions.jsonl"), &preds)?;
        log::info!("{stage}: {} student on {} examples, {} updates", variant.name(), data.len(), out.updates);
        Ok(())
    }

    fn evaluate_into(&self, dir: &Path) -> Result<()> {
        let sd = self.synth_dir();
        self.require(Stage::Evaluate, &sd)?;
        self.require(Stage::Evaluate, &self.train_dir())?;
        self.require(Stage::Evaluate, &self.variant_dir(Variant::Main))?;
        let gold: Vec<GoldRecord> = read_jsonl(&sd.join("test_gold.jsonl"))?;
        let embedder = match &self.cfg.embedding {
            Some(e) => Some(self.gateway(e, SimulatedModel::teacher())?),
            None => None,
        };
        let mut reports = Vec::new();

        // The teacher is scored on the test samples whose stage-1 answer
        // parsed; its reasoning is the reference, so no generation metrics.
        let teacher: Vec<Prediction> = read_jsonl(&sd.join("teacher_predictions.jsonl"))?;
        let answered: Vec<GoldRecord> = gold
            .iter()
            .filter(|g| teacher.iter().any(|p| p.id == g.id))
            .cloned()
            .collect();
        if !answered.is_empty() {
            let cls = MetricSet { cls: true, gen: false };
            reports.push(evaluate_predictions(&self.cfg.teacher.model_name, &teacher, &answered, cls, None)?);
        }
        let mut sources = vec![("assistant", self.train_dir().join("assistant_predictions.jsonl"))];
        for v in self.present_variants() {
            sources.push((v.label(), self.variant_dir(v).join("predictions.jsonl")));
        }
        for (name, path) in sources {
            let preds: Vec<Prediction> = read_jsonl(&path)?;
            reports.push(evaluate_predictions(name, &preds, &gold, MetricSet::ALL, embedder.as_ref())?);
        }
        write_json(&dir.join("eval_report.json"), &reports)
    }

    fn report(&self) -> Result<StageRun> {
        let (bd, ed) = (self.build_dir(), self.evaluate_dir());
        if !is_complete(&bd) && !is_complete(&ed) && !any_manifest(&self.cfg.output_dir) {
            return Err(PipelineError::NothingToReport(self.cfg.output_dir.clone()));
        }
        self.require(Stage::Report, &bd)?;
        self.require(Stage::Report, &ed)?;
        self.stage_once(Stage::Report, self.report_dir(), |dir| {
            let build: BuildReport = read_json(&bd.join("build_report.json"))?;
            let evals: Vec<EvalReport> = read_json(&ed.join("eval_report.json"))?;
            let c = self.corpus.counts();
            let report = Report {
                corpus: CorpusRow {
                    dataset: self.cfg.corpus.name.clone(),
                    train: c.train,
                    dev: c.dev,
                    test: c.test,
                    train_plus: build.full,
                },
                build,
                rows: evals
                    .iter()
                    .map(|e| ReportRow {
                        model: e.model.clone(),
                        count: e.count,
                        scores: e.scores,
                    })
                    .collect(),
            };
            write_json(&dir.join("report.json"), &report)?;
            write_text(&dir.join("report.txt"), &report.render())
        })
    }
}

/// Gateway for `endpoint` under the config's transport. In mock mode the
/// simulator `preset` answers under the endpoint's model name.
pub fn gateway_for(cfg: &PipelineConfig, endpoint: &EndpointConfig, preset: SimulatedModel) -> Result<Gateway> {
    let gw = match cfg.transport {
        TransportMode::Mock => {
            let sim = SimulatedModel {
                name: endpoint.model_name.clone(),
                ..preset
            };
            Gateway::with_transport(endpoint.clone(), sim, cfg.cache_dir.clone())?
        }
        TransportMode::Replay => {
            let dir = cfg
                .cache_dir
                .clone()
                .ok_or_else(|| PipelineError::Config("replay transport needs cache_dir".into()))?;
            Gateway::replay(endpoint.clone(), dir)?
        }
        TransportMode::Live => Gateway::live(endpoint.clone(), cfg.cache_dir.clone())?,
    };
    Ok(gw.with_sampling(SamplingParams {
        seed: Some(cfg.seed),
        ..SamplingParams::default()
    }))
}

fn any_manifest(root: &Path) -> bool {
    let Ok(stages) = fs::read_dir(root) else {
        return false;
    };
    stages.flatten().any(|s| {
        fs::read_dir(s.path())
            .map(|ds| ds.flatten().any(|d| is_complete(&d.path())))
            .unwrap_or(false)
    })
}

fn encode_all(vocab: &Vocabulary, entries: &[DatasetEntry], limits: &TextLimits) -> Vec<TokenizedExample> {
    entries.iter().map(|e| encode_entry(vocab, e, limits)).collect()
}

/// Greedy reasoning and class-head label for each sample.
pub fn predict(model: &ToyModel, vocab: &Vocabulary, samples: &[Sample], limits: &TextLimits) -> Vec<Prediction> {
    let stop = vocab.id(EOS);
    samples
        .iter()
        .map(|s| {
            let prompt = prompt_ids(vocab, s, limits);
            let generated = model.greedy_decode(&prompt, stop, limits.max_reasoning + 2);
            let class = model.predict_class(&prompt, prompt.len());
            Prediction {
                id: s.id.clone(),
                predicted_label: SentimentLabel::from_index(class).expect("three class logits"),
                reasoning: vocab.decode(&generated),
            }
        })
        .collect()
}

/// Validates `cfg`, loads the corpus and runs the requested stages.
pub fn run_pipeline(cfg: PipelineConfig, stages: &[Stage]) -> Result<Vec<StageRun>> {
    Pipeline::new(cfg)?.run(stages)
}

/// Standalone form of the evaluate stage over two JSON Lines files.
pub fn evaluate_files(
    model: &str,
    predictions: &Path,
    gold: &Path,
    metrics: MetricSet,
    embedder: Option<&Gateway>,
) -> Result<EvalReport> {
    let preds: Vec<Prediction> = read_jsonl(predictions)?;
    let gold: Vec<GoldRecord> = read_jsonl(gold)?;
    evaluate_predictions(model, &preds, &gold, metrics, embedder)
}
