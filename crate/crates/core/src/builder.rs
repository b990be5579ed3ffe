//! Teacher stage 1 and 2 synthesis, assistant augmentation, and assembly of
//! the full training set, with count accounting.

use std::collections::{BTreeMap, HashMap};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gateway::Gateway;
use crate::model::{
    merge_datasets, DatasetEntry, DatasetRole, ModelError, ReasoningDataset, ReasoningRecord,
    Sample, SentimentLabel, Source, Split,
};
use crate::parser::{generate_with_arc, ArcError, ArcOutcome, ArcPolicy, FailureReport};
use crate::prompt::TemplateSet;

/// Samples processed between checkpoint flushes.
pub const CHECKPOINT_EVERY: usize = 100;

#[derive(Debug, Error)]
pub enum BuildError {
    #[error(transparent)]
    Arc(#[from] ArcError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{0}")]
    Validation(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> BuildError + '_ {
    move |source| BuildError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// One processed sample as persisted in a checkpoint file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "outcome", rename_all = "snake_case")]
enum Processed {
    Success {
        record: ReasoningRecord,
        warnings: Vec<String>,
    },
    Failure {
        report: FailureReport,
    },
}

impl Processed {
    fn sample_id(&self) -> &str {
        match self {
            Processed::Success { record, .. } => &record.sample_id,
            Processed::Failure { report } => &report.sample_id,
        }
    }

    fn calls(&self) -> u64 {
        match self {
            Processed::Success { record, .. } => record.attempts as u64,
            Processed::Failure { report } => report.attempts.len() as u64,
        }
    }
}

impl From<ArcOutcome> for Processed {
    fn from(o: ArcOutcome) -> Self {
        match o {
            ArcOutcome::Success { record, warnings } => Processed::Success { record, warnings },
            ArcOutcome::Failure(report) => Processed::Failure { report },
        }
    }
}

fn load_checkpoint(path: &Path) -> Result<HashMap<String, Processed>, BuildError> {
    let mut done = HashMap::new();
    let file = match File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(done),
        Err(e) => return Err(io_err(path)(e)),
    };
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<Processed>(&line) {
            Ok(p) => {
                done.insert(p.sample_id().to_string(), p);
            }
            // A torn final line from an interrupted write is dropped.
            Err(e) => log::warn!("{}:{}: skipping unreadable checkpoint line: {e}", path.display(), i + 1),
        }
    }
    Ok(done)
}

fn append_checkpoint(path: &Path, items: &[&Processed]) -> Result<(), BuildError> {
    if items.is_empty() {
        return Ok(());
    }
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(io_err(path))?;
    let mut buf = String::new();
    for p in items {
        buf.push_str(&serde_json::to_string(p).expect("checkpoint serializes"));
        buf.push('\n');
    }
    f.write_all(buf.as_bytes()).map_err(io_err(path))?;
    f.flush().map_err(io_err(path))
}

/// Runs ARC generation for every sample, concurrently up to the gateway's
/// in-flight cap. Samples are dispatched in ascending id order and results
/// come back in that order.
fn run_samples(
    samples: &[Sample],
    source: Source,
    gateway: &Gateway,
    templates: &TemplateSet,
    policy: &ArcPolicy,
    checkpoint: Option<&Path>,
) -> Result<(Vec<(Sample, Processed)>, u64), BuildError> {
    let mut ordered: Vec<&Sample> = samples.iter().collect();
    ordered.sort_by(|a, b| a.id.cmp(&b.id));
    let mut resumed = match checkpoint {
        Some(p) => load_checkpoint(p)?,
        None => HashMap::new(),
    };
    if !resumed.is_empty() {
        log::info!("resuming {source}: {} samples already processed", resumed.len());
    }
    let pending: Vec<&Sample> = ordered
        .iter()
        .copied()
        .filter(|s| !resumed.contains_key(&s.id))
        .collect();

    let mut fresh: HashMap<String, Processed> = HashMap::new();
    let mut calls = 0u64;
    for chunk in pending.chunks(CHECKPOINT_EVERY) {
        let results: Vec<Mutex<Option<Result<Processed, ArcError>>>> =
            chunk.iter().map(|_| Mutex::new(None)).collect();
        let next = AtomicUsize::new(0);
        let workers = gateway.max_in_flight().clamp(1, chunk.len());
        std::thread::scope(|scope| {
            for _ in 0..workers {
                scope.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::SeqCst);
                    let Some(sample) = chunk.get(i) else { break };
                    let r = generate_with_arc(sample, source, gateway, templates, policy)
                        .map(Processed::from);
                    let failed = r.is_err();
                    *results[i].lock().expect("result slot") = Some(r);
                    if failed {
                        // Stop handing out new work; in-flight samples finish.
                        next.store(chunk.len(), Ordering::SeqCst);
                    }
                });
            }
        });
        let mut done: Vec<Processed> = Vec::new();
        let mut first_err = None;
        for slot in results {
            match slot.into_inner().expect("result slot") {
                Some(Ok(p)) => done.push(p),
                Some(Err(e)) if first_err.is_none() => first_err = Some(e),
                _ => {}
            }
        }
        calls += done.iter().map(Processed::calls).sum::<u64>();
        if let Some(p) = checkpoint {
            append_checkpoint(p, &done.iter().collect::<Vec<_>>())?;
        }
        if let Some(e) = first_err {
            return Err(e.into());
        }
        for p in done {
            fresh.insert(p.sample_id().to_string(), p);
        }
    }
    let out = ordered
        .into_iter()
        .map(|s| {
            let p = fresh
                .remove(&s.id)
                .or_else(|| resumed.remove(&s.id))
                .expect("every sample processed");
            (s.clone(), p)
        })
        .collect();
    Ok((out, calls))
}

fn stage_provenance(gateway: &Gateway, templates: &TemplateSet, policy: &ArcPolicy) -> BTreeMap<String, String> {
    BTreeMap::from([
        ("arc_max_attempts".to_string(), policy.max_attempts.to_string()),
        ("model".to_string(), gateway.config().model_name.clone()),
        ("templates".to_string(), templates.fingerprint()),
    ])
}

fn log_warnings(warnings: &[String]) {
    for w in warnings {
        log::warn!("{w}");
    }
}

#[derive(Debug, Clone)]
pub struct Stage1Output {
    pub dataset: ReasoningDataset,
    /// Wrong predictions and ARC failures, in id order; the stage-2 input.
    pub mispredicted: Vec<Sample>,
    pub failures: Vec<FailureReport>,
    /// Label of every response that parsed, right or wrong.
    pub predictions: BTreeMap<String, SentimentLabel>,
    pub gateway_calls: u64,
}

/// Label-free reasoning generation. Records whose predicted label matches the
/// gold label form the stage-1 dataset; everything else is handed to stage 2.
pub fn run_stage1(
    samples: &[Sample],
    gateway: &Gateway,
    templates: &TemplateSet,
    policy: &ArcPolicy,
    checkpoint: Option<&Path>,
) -> Result<Stage1Output, BuildError> {
    let (processed, gateway_calls) =
        run_samples(samples, Source::TeacherStage1, gateway, templates, policy, checkpoint)?;
    let mut entries = Vec::new();
    let mut mispredicted = Vec::new();
    let mut failures = Vec::new();
    let mut predictions = BTreeMap::new();
    for (sample, p) in processed {
        match p {
            Processed::Success { record, warnings } => {
                log_warnings(&warnings);
                predictions.insert(sample.id.clone(), record.predicted_label);
                if record.predicted_label == sample.gold_label {
                    entries.push(DatasetEntry { sample, record });
                } else {
                    mispredicted.push(sample);
                }
            }
            Processed::Failure { report } => {
                failures.push(report);
                mispredicted.push(sample);
            }
        }
    }
    let dataset = ReasoningDataset::new(
        "teacher_stage1",
        DatasetRole::TeacherStage1,
        entries,
        stage_provenance(gateway, templates, policy),
    )?;
    Ok(Stage1Output {
        dataset,
        mispredicted,
        failures,
        predictions,
        gateway_calls,
    })
}

#[derive(Debug, Clone)]
pub struct Stage2Output {
    pub dataset: ReasoningDataset,
    pub quarantined: Vec<FailureReport>,
    pub gateway_calls: u64,
}

/// Label-conditioned explanation of the stage-1 rejects. ARC failures are
/// quarantined.
pub fn run_stage2(
    mispredicted: &[Sample],
    gateway: &Gateway,
    templates: &TemplateSet,
    policy: &ArcPolicy,
    checkpoint: Option<&Path>,
) -> Result<Stage2Output, BuildError> {
    let (processed, gateway_calls) =
        run_samples(mispredicted, Source::TeacherStage2, gateway, templates, policy, checkpoint)?;
    let mut entries = Vec::new();
    let mut quarantined = Vec::new();
    for (sample, p) in processed {
        match p {
            Processed::Success { record, warnings } => {
                log_warnings(&warnings);
                entries.push(DatasetEntry { sample, record });
            }
            Processed::Failure { report } => quarantined.push(report),
        }
    }
    let dataset = ReasoningDataset::new(
        "teacher_stage2",
        DatasetRole::TeacherStage2,
        entries,
        stage_provenance(gateway, templates, policy),
    )?;
    Ok(Stage2Output {
        dataset,
        quarantined,
        gateway_calls,
    })
}

#[derive(Debug, Clone)]
pub struct AugmentOutput {
    pub dataset: ReasoningDataset,
    /// Correct predictions over all inputs; ARC failures count as wrong.
    pub train_accuracy: f64,
    pub failures: Vec<FailureReport>,
    pub gateway_calls: u64,
}

/// Refuses any sample outside the training split.
pub fn check_train_only(samples: &[Sample]) -> Result<(), BuildError> {
    let leaked: Vec<String> = samples
        .iter()
        .filter(|s| s.split != Split::Train)
        .map(|s| format!("{} ({})", s.id, s.split))
        .collect();
    if leaked.is_empty() {
        Ok(())
    } else {
        Err(BuildError::Validation(format!(
            "augmentation input must be train-split only; found {}",
            leaked.join(", ")
        )))
    }
}

/// Assistant inference over the training split, keeping only correctly
/// predicted samples. Non-train input is rejected before any request.
pub fn augment_with_assistant(
    train: &[Sample],
    gateway: &Gateway,
    templates: &TemplateSet,
    policy: &ArcPolicy,
    checkpoint: Option<&Path>,
) -> Result<AugmentOutput, BuildError> {
    check_train_only(train)?;
    let (processed, gateway_calls) =
        run_samples(train, Source::Assistant, gateway, templates, policy, checkpoint)?;
    let total = processed.len();
    let mut entries = Vec::new();
    let mut failures = Vec::new();
    for (sample, p) in processed {
        match p {
            Processed::Success { record, warnings } => {
                log_warnings(&warnings);
                if record.predicted_label == sample.gold_label {
                    entries.push(DatasetEntry { sample, record });
                }
            }
            Processed::Failure { report } => failures.push(report),
        }
    }
    let train_accuracy = if total == 0 {
        0.0
    } else {
        entries.len() as f64 / total as f64
    };
    let dataset = ReasoningDataset::new(
        "assistant_aug",
        DatasetRole::AssistantAug,
        entries,
        stage_provenance(gateway, templates, policy),
    )?
    .with_provenance("assistant_train_accuracy", format!("{train_accuracy:.6}"));
    Ok(AugmentOutput {
        dataset,
        train_accuracy,
        failures,
        gateway_calls,
    })
}

/// Union of the teacher dataset and the assistant augmentation.
pub fn build_full(
    teacher: &ReasoningDataset,
    assistant: &ReasoningDataset,
) -> Result<ReasoningDataset, BuildError> {
    if teacher.role() != DatasetRole::TeacherFull {
        return Err(BuildError::Validation(format!(
            "teacher dataset has role {}, expected teacher_full",
            teacher.role()
        )));
    }
    if assistant.role() != DatasetRole::AssistantAug {
        return Err(BuildError::Validation(format!(
            "assistant dataset has role {}, expected assistant_aug",
            assistant.role()
        )));
    }
    let full = if assistant.is_empty() {
        teacher.retagged("full", DatasetRole::Full)?
    } else {
        merge_datasets(teacher, assistant)?
    };
    full.check_no_leakage()?;
    Ok(full)
}

/// Stage counts of one build.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BuildReport {
    pub n: usize,
    pub n_t1: usize,
    pub n_t2: usize,
    pub quarantined_stage2: usize,
    pub teacher_total: usize,
    pub n_a: usize,
    pub full: usize,
    pub assistant_train_accuracy: Option<f64>,
    pub quarantine_count: usize,
    pub gateway_calls: u64,
    /// Excluded from serialized artifacts so replays stay byte-identical.
    #[serde(skip)]
    pub wall_clock_secs: f64,
}

impl BuildReport {
    pub fn new(
        n: usize,
        stage1: &Stage1Output,
        stage2: &Stage2Output,
        augment: Option<&AugmentOutput>,
        started: Option<Instant>,
    ) -> Result<Self, BuildError> {
        let mut report = Self::from_counts(
            n,
            stage1.dataset.len(),
            stage2.dataset.len(),
            stage2.quarantined.len(),
            augment.map(|a| (a.dataset.len(), a.train_accuracy)),
            stage1.gateway_calls + stage2.gateway_calls + augment.map_or(0, |a| a.gateway_calls),
        )?;
        report.wall_clock_secs = started.map_or(0.0, |t| t.elapsed().as_secs_f64());
        Ok(report)
    }

    /// Report from stage counts; `augment` is `(N_a, assistant accuracy)`.
    pub fn from_counts(
        n: usize,
        n_t1: usize,
        n_t2: usize,
        quarantined_stage2: usize,
        augment: Option<(usize, f64)>,
        gateway_calls: u64,
    ) -> Result<Self, BuildError> {
        let n_a = augment.map_or(0, |a| a.0);
        let report = BuildReport {
            n,
            n_t1,
            n_t2,
            quarantined_stage2,
            teacher_total: n_t1 + n_t2,
            n_a,
            full: n_t1 + n_t2 + n_a,
            assistant_train_accuracy: augment.map(|a| a.1),
            quarantine_count: quarantined_stage2,
            gateway_calls,
            wall_clock_secs: 0.0,
        };
        report.check()?;
        Ok(report)
    }

    pub fn check(&self) -> Result<(), BuildError> {
        if self.n_t1 + self.n_t2 + self.quarantined_stage2 != self.n {
            return Err(BuildError::Validation(format!(
                "partition broken: {} + {} + {} != {}",
                self.n_t1, self.n_t2, self.quarantined_stage2, self.n
            )));
        }
        if self.teacher_total + self.n_a != self.full {
            return Err(BuildError::Validation(format!(
                "full count {} != teacher {} + assistant {}",
                self.full, self.teacher_total, self.n_a
            )));
        }
        Ok(())
    }

    pub fn table(&self) -> String {
        let acc = self
            .assistant_train_accuracy
            .map_or("n/a".to_string(), |a| format!("{:.1}", a * 100.0));
        let rows = [
            ("N", self.n.to_string()),
            ("Stage 1", self.n_t1.to_string()),
            ("Stage 2", self.n_t2.to_string()),
            ("Quarantined", self.quarantined_stage2.to_string()),
            ("Teacher", self.teacher_total.to_string()),
            ("Assistant", self.n_a.to_string()),
            ("Assistant acc", acc),
            ("Full", self.full.to_string()),
            ("Calls", self.gateway_calls.to_string()),
        ];
        let mut out = String::new();
        for (k, v) in rows {
            out.push_str(&format!("{k:<14}{v:>10}\n"));
        }
        out
    }
}

/// Published split sizes of one benchmark, with the assistant's train-set
/// accuracy under one teacher and the resulting training-set size.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PublishedCounts {
    pub corpus: &'static str,
    pub teacher: &'static str,
    pub train: usize,
    pub dev: usize,
    pub test: usize,
    pub assistant_accuracy_pct: f64,
    pub reported_full: usize,
}

const fn pc(
    corpus: &'static str,
    teacher: &'static str,
    split: (usize, usize, usize),
    assistant_accuracy_pct: f64,
    reported_full: usize,
) -> PublishedCounts {
    PublishedCounts {
        corpus,
        teacher,
        train: split.0,
        dev: split.1,
        test: split.2,
        assistant_accuracy_pct,
        reported_full,
    }
}

pub const PUBLISHED_COUNTS: [PublishedCounts; 8] = [
    pc("MVSA-Single", "GPT-4o-mini", (3608, 451, 452), 79.7, 6483),
    pc("MVSA-Single", "Qwen2.5-VL-72B", (3608, 451, 452), 76.0, 6350),
    pc("MVSA-Multiple", "GPT-4o-mini", (13619, 1702, 1702), 72.0, 23424),
    pc("MVSA-Multiple", "Qwen2.5-VL-72B", (13619, 1702, 1702), 74.0, 23697),
    pc("Twitter-2015", "GPT-4o-mini", (3179, 1122, 1037), 94.0, 6166),
    pc("Twitter-2015", "Qwen2.5-VL-72B", (3179, 1122, 1037), 95.6, 6218),
    pc("Twitter-2017", "GPT-4o-mini", (3562, 1176, 1234), 86.8, 6652),
    pc("Twitter-2017", "Qwen2.5-VL-72B", (3562, 1176, 1234), 92.9, 6871),
];

/// Tolerance of the count check, absorbing rounding of the published
/// one-decimal accuracies.
pub const COUNT_TOLERANCE: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CountCheck {
    pub expected: usize,
    pub reported: usize,
    pub diff: usize,
    pub ok: bool,
}

/// `N + round(acc * N)`: the teacher set covers every train sample and the
/// assistant adds one record per correct prediction.
pub fn expected_full_count(n: usize, accuracy: f64) -> usize {
    n + (accuracy * n as f64).round() as usize
}

pub fn count_consistency(n: usize, accuracy: f64, reported: usize, tolerance: usize) -> CountCheck {
    let expected = expected_full_count(n, accuracy);
    let diff = expected.abs_diff(reported);
    CountCheck {
        expected,
        reported,
        diff,
        ok: diff <= tolerance,
    }
}

impl PublishedCounts {
    pub fn check(&self) -> CountCheck {
        count_consistency(
            self.train,
            self.assistant_accuracy_pct / 100.0,
            self.reported_full,
            COUNT_TOLERANCE,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::mock::{chat_response, FnTransport, ScriptedTransport};
    use crate::gateway::{EndpointConfig, TransportError};
    use crate::model::fixtures::{chain, sample};
    use crate::model::SentimentLabel::{self, *};
    use crate::parser::format_response;
    use serde_json::Value;
    use std::sync::Arc;

    fn cfg() -> EndpointConfig {
        EndpointConfig::new("http://mock", "mock-model")
    }

    fn gateway_from(f: impl Fn(&Value) -> Result<Value, TransportError> + Send + Sync + 'static) -> Gateway {
        Gateway::with_transport(cfg(), FnTransport::new(move |_, body| f(body)), None).unwrap()
    }

    fn answer(label: SentimentLabel) -> Value {
        chat_response(&format_response(&chain(), label))
    }

    fn user_text(body: &Value) -> String {
        let content = &body["messages"][1]["content"];
        match content {
            Value::String(s) => s.clone(),
            Value::Array(parts) => parts[0]["text"].as_str().unwrap_or_default().to_string(),
            _ => String::new(),
        }
    }

    fn corpus(n: usize, label: SentimentLabel) -> Vec<Sample> {
        (0..n).map(|i| sample(&format!("s{i:02}"), label, Split::Train)).collect()
    }

    #[test]
    fn published_counts_are_consistent() {
        for row in PUBLISHED_COUNTS {
            let c = row.check();
            assert!(c.ok, "{} / {}: {c:?}", row.corpus, row.teacher);
        }
        assert_eq!(expected_full_count(3608, 0.797), 6484);
        assert_eq!(expected_full_count(3179, 0.940), 6167);
        assert!(!count_consistency(3608, 0.797, 6480, 3).ok);
    }

    #[test]
    fn stage1_oracle_teacher_keeps_everything() {
        let samples = corpus(5, Positive);
        let gw = gateway_from(|_| Ok(answer(Positive)));
        let out = run_stage1(&samples, &gw, &TemplateSet::builtin(false), &ArcPolicy::default(), None).unwrap();
        assert_eq!(out.dataset.len(), 5);
        assert!(out.mispredicted.is_empty());
    }

    #[test]
    fn stage1_constant_neutral_keeps_nothing() {
        let samples = corpus(4, Positive);
        let gw = gateway_from(|_| Ok(answer(Neutral)));
        let out = run_stage1(&samples, &gw, &TemplateSet::builtin(false), &ArcPolicy::default(), None).unwrap();
        assert_eq!(out.dataset.len(), 0);
        assert_eq!(out.mispredicted.len(), 4);
    }

    #[test]
    fn stage1_partitions_scripted_outcomes() {
        // Fixture texts are "post <id>"; s07..s09 are answered wrongly.
        let samples = corpus(10, Positive);
        let gw = gateway_from(|body| {
            let t = user_text(body);
            let wrong = ["s07", "s08", "s09"].iter().any(|id| t.contains(&format!("post {id}")));
            Ok(answer(if wrong { Negative } else { Positive }))
        });
        let out = run_stage1(&samples, &gw, &TemplateSet::builtin(false), &ArcPolicy::default(), None).unwrap();
        assert_eq!(out.dataset.len(), 7);
        assert_eq!(
            out.mispredicted.iter().map(|s| s.id.as_str()).collect::<Vec<_>>(),
            ["s07", "s08", "s09"]
        );
    }

    #[test]
    fn stage2_pins_gold_and_quarantines() {
        let samples = corpus(3, Negative);
        let gw = gateway_from(|body| {
            if user_text(body).contains("post s01") {
                Ok(chat_response("nothing useful"))
            } else {
                Ok(answer(Positive))
            }
        });
        let out = run_stage2(&samples, &gw, &TemplateSet::builtin(false), &ArcPolicy::default(), None).unwrap();
        assert_eq!(out.dataset.len(), 2);
        assert_eq!(out.quarantined.len(), 1);
        assert_eq!(out.quarantined[0].attempts.len(), 3);
        assert!(out.dataset.entries().iter().all(|e| e.record.predicted_label == Negative));

        let empty = run_stage2(&[], &gw, &TemplateSet::builtin(false), &ArcPolicy::default(), None).unwrap();
        assert!(empty.dataset.is_empty());
    }

    #[test]
    fn augment_rejects_dev_sample_without_calls() {
        let mut samples = corpus(3, Positive);
        samples.push(sample("leak", Positive, Split::Dev));
        let transport = Arc::new(ScriptedTransport::repeating(Ok(answer(Positive))));
        let gw = Gateway::with_transport(cfg(), transport.clone(), None).unwrap();
        let err = augment_with_assistant(&samples, &gw, &TemplateSet::builtin(false), &ArcPolicy::default(), None)
            .unwrap_err();
        assert!(err.to_string().contains("leak"));
        assert_eq!(transport.calls(), 0);
    }

    #[test]
    fn augment_accuracy_and_always_wrong() {
        let samples = corpus(4, Positive);
        let gw = gateway_from(|_| Ok(answer(Negative)));
        let out = augment_with_assistant(&samples, &gw, &TemplateSet::builtin(false), &ArcPolicy::default(), None)
            .unwrap();
        assert!(out.dataset.is_empty());
        assert_eq!(out.train_accuracy, 0.0);
    }

    #[test]
    fn full_build_and_report_invariants() {
        let samples = corpus(4, Positive);
        let templates = TemplateSet::builtin(false);
        let policy = ArcPolicy::default();
        let gw = gateway_from(|_| Ok(answer(Positive)));
        let s1 = run_stage1(&samples[..3], &gw, &templates, &policy, None).unwrap();
        let wrong = gateway_from(|_| Ok(answer(Negative)));
        let s1b = run_stage1(&samples[3..], &wrong, &templates, &policy, None).unwrap();
        let s2 = run_stage2(&s1b.mispredicted, &gw, &templates, &policy, None).unwrap();
        let teacher = merge_datasets(&s1.dataset, &s2.dataset).unwrap();
        let aug = augment_with_assistant(&samples, &gw, &templates, &policy, None).unwrap();
        let full = build_full(&teacher, &aug.dataset).unwrap();
        assert_eq!(full.len(), teacher.len() + aug.dataset.len());
        assert_eq!(full.role(), DatasetRole::Full);

        let empty_aug = ReasoningDataset::empty("assistant_aug", DatasetRole::AssistantAug);
        let retagged = build_full(&teacher, &empty_aug).unwrap();
        assert_eq!(retagged.entries(), teacher.entries());
        assert!(build_full(&aug.dataset, &teacher).is_err());

        assert!(BuildReport::new(5, &s1, &s2, Some(&aug), None).is_err());
        let r = BuildReport::new(4, &s1, &s2, Some(&aug), None).unwrap();
        assert_eq!((r.n_t1, r.n_t2, r.n_a, r.full), (3, 1, 4, 8));
        assert!(r.table().contains("100.0"));
        let json = serde_json::to_string(&r).unwrap();
        assert!(!json.contains("wall_clock"));
    }

    #[test]
    fn checkpoint_resume_skips_processed_samples() {
        let dir = tempfile::tempdir().unwrap();
        let ckpt = dir.path().join("stage1.ckpt.jsonl");
        let samples = corpus(6, Positive);
        let templates = TemplateSet::builtin(false);
        let policy = ArcPolicy::default();

        let first = Arc::new(ScriptedTransport::repeating(Ok(answer(Positive))));
        let gw = Gateway::with_transport(cfg(), first.clone(), None).unwrap();
        run_stage1(&samples[..4], &gw, &templates, &policy, Some(&ckpt)).unwrap();
        assert_eq!(first.calls(), 4);

        let second = Arc::new(ScriptedTransport::repeating(Ok(answer(Positive))));
        let gw = Gateway::with_transport(cfg(), second.clone(), None).unwrap();
        let out = run_stage1(&samples, &gw, &templates, &policy, Some(&ckpt)).unwrap();
        assert_eq!(second.calls(), 2);
        assert_eq!(out.dataset.len(), 6);
    }

    #[test]
    fn gateway_error_aborts_but_keeps_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        let ckpt = dir.path().join("ck.jsonl");
        let samples = corpus(3, Positive);
        let transport = ScriptedTransport::new(vec![
            Ok(answer(Positive)),
            Err(TransportError::Status {
                code: 400,
                body: "bad".into(),
            }),
        ]);
        let cfg = EndpointConfig {
            max_in_flight: 1,
            ..cfg()
        };
        let gw = Gateway::with_transport(cfg, transport, None).unwrap();
        let err = run_stage1(&samples, &gw, &TemplateSet::builtin(false), &ArcPolicy::default(), Some(&ckpt));
        assert!(err.is_err());
        assert_eq!(load_checkpoint(&ckpt).unwrap().len(), 1);
    }
}
