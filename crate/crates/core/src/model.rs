//! Shared domain types and flat-file persistence for corpora and reasoning
//! datasets.
//!
//! Corpora and datasets are stored as JSON Lines with a fixed field order.
//! A dataset additionally carries a `<path>.meta.json` sidecar holding its
//! name, role and provenance.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

/// Literal allowed in `image_analysis` when a sample has no image.
pub const NO_IMAGE_SENTINEL: &str = "N/A";

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: malformed record: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("duplicate sample id {0:?}")]
    DuplicateId(String),
    #[error("invalid label {0:?} (expected negative, neutral or positive)")]
    InvalidLabel(String),
    #[error("validation failed: {0}")]
    Validation(String),
    #[error("conflicting (sample_id, source) pairs: {}", format_collisions(.0))]
    Conflict(Vec<(String, Source)>),
}

fn format_collisions(pairs: &[(String, Source)]) -> String {
    pairs
        .iter()
        .map(|(id, src)| format!("({id}, {src})"))
        .collect::<Vec<_>>()
        .join(", ")
}

impl ModelError {
    fn io(path: &Path, source: std::io::Error) -> Self {
        ModelError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

/// Three-way sentiment label. The derived order (negative < neutral <
/// positive) is only used for deterministic tie-breaking.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum SentimentLabel {
    Negative,
    Neutral,
    Positive,
}

impl SentimentLabel {
    pub const ALL: [SentimentLabel; 3] = [
        SentimentLabel::Negative,
        SentimentLabel::Neutral,
        SentimentLabel::Positive,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            SentimentLabel::Negative => "negative",
            SentimentLabel::Neutral => "neutral",
            SentimentLabel::Positive => "positive",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }
}

impl fmt::Display for SentimentLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SentimentLabel {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "negative" => Ok(SentimentLabel::Negative),
            "neutral" => Ok(SentimentLabel::Neutral),
            "positive" => Ok(SentimentLabel::Positive),
            _ => Err(ModelError::InvalidLabel(s.to_string())),
        }
    }
}

impl Serialize for SentimentLabel {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for SentimentLabel {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        })
    }
}

/// One multimodal instance: text, optional image reference, optional aspect
/// term and its gold label.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sample {
    pub id: String,
    pub text: String,
    pub image_ref: Option<String>,
    pub aspect: Option<String>,
    pub gold_label: SentimentLabel,
    pub split: Split,
}

impl Sample {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.id.is_empty() {
            return Err(ModelError::Validation("sample id is empty".into()));
        }
        if self.text.trim().is_empty() {
            return Err(ModelError::Validation(format!(
                "sample {:?} has empty text",
                self.id
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ReasoningChain {
    pub text_analysis: String,
    pub image_analysis: String,
    pub conflict_resolution: String,
    pub conclusion: String,
}

impl ReasoningChain {
    /// Checks the section invariants against the sample the chain explains.
    pub fn validate_for(&self, sample: &Sample) -> Result<(), ModelError> {
        let sections = [
            ("text_analysis", &self.text_analysis),
            ("image_analysis", &self.image_analysis),
            ("conflict_resolution", &self.conflict_resolution),
            ("conclusion", &self.conclusion),
        ];
        for (name, body) in sections {
            if body.trim().is_empty() {
                return Err(ModelError::Validation(format!(
                    "sample {:?}: section {name} is empty",
                    sample.id
                )));
            }
        }
        if self.image_analysis.trim() == NO_IMAGE_SENTINEL && sample.image_ref.is_some() {
            return Err(ModelError::Validation(format!(
                "sample {:?}: image analysis is {NO_IMAGE_SENTINEL} but the sample has an image",
                sample.id
            )));
        }
        Ok(())
    }
}

/// Who produced a reasoning record. Order matters: entries sort by
/// `(sample_id, source)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    TeacherStage1,
    TeacherStage2,
    Assistant,
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Source::TeacherStage1 => "teacher_stage1",
            Source::TeacherStage2 => "teacher_stage2",
            Source::Assistant => "assistant",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReasoningRecord {
    pub sample_id: String,
    pub chain: ReasoningChain,
    pub predicted_label: SentimentLabel,
    pub source: Source,
    pub attempts: u32,
    pub raw_response: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetRole {
    TeacherStage1,
    TeacherStage2,
    TeacherFull,
    AssistantAug,
    Full,
}

impl fmt::Display for DatasetRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = serde_json::to_value(self).expect("role serializes");
        f.write_str(s.as_str().unwrap_or_default())
    }
}

impl DatasetRole {
    /// Role of the union of two datasets, if the pair is a valid merge.
    pub fn union(a: DatasetRole, b: DatasetRole) -> Option<DatasetRole> {
        use DatasetRole::*;
        match (a.min(b), a.max(b)) {
            // Shards of the same stage concatenate.
            (x, y) if x == y && x != Full => Some(x),
            (TeacherStage1, TeacherStage2) => Some(TeacherFull),
            (TeacherFull, AssistantAug) => Some(Full),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetEntry {
    pub sample: Sample,
    pub record: ReasoningRecord,
}

/// A named, role-tagged collection of `(Sample, ReasoningRecord)` pairs.
///
/// Entries are kept sorted by `(sample_id, source)`; construction goes
/// through [`ReasoningDataset::new`], which enforces the role invariants.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReasoningDataset {
    name: String,
    role: DatasetRole,
    entries: Vec<DatasetEntry>,
    provenance: BTreeMap<String, String>,
}

impl ReasoningDataset {
    pub fn new(
        name: impl Into<String>,
        role: DatasetRole,
        mut entries: Vec<DatasetEntry>,
        provenance: BTreeMap<String, String>,
    ) -> Result<Self, ModelError> {
        entries.sort_by(|a, b| {
            (&a.record.sample_id, a.record.source).cmp(&(&b.record.sample_id, b.record.source))
        });
        let ds = ReasoningDataset {
            name: name.into(),
            role,
            entries,
            provenance,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn empty(name: impl Into<String>, role: DatasetRole) -> Self {
        ReasoningDataset {
            name: name.into(),
            role,
            entries: Vec::new(),
            provenance: BTreeMap::new(),
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn role(&self) -> DatasetRole {
        self.role
    }

    pub fn entries(&self) -> &[DatasetEntry] {
        &self.entries
    }

    pub fn provenance(&self) -> &BTreeMap<String, String> {
        &self.provenance
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn with_provenance(mut self, key: impl Into<String>, value: impl Into<String>) -> Self {
        self.provenance.insert(key.into(), value.into());
        self
    }

    /// Same entries under another name and role, re-validated.
    pub fn retagged(&self, name: &str, role: DatasetRole) -> Result<Self, ModelError> {
        let mut provenance = self.provenance.clone();
        provenance.insert("retagged_from".into(), self.name.clone());
        if role == DatasetRole::Full {
            provenance
                .entry("merge.left_count".into())
                .or_insert_with(|| self.len().to_string());
            provenance
                .entry("merge.right_count".into())
                .or_insert_with(|| "0".into());
        }
        ReasoningDataset::new(name, role, self.entries.clone(), provenance)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let mut seen = HashSet::new();
        let max_attempts = self
            .provenance
            .get("arc_max_attempts")
            .and_then(|v| v.parse::<u32>().ok());
        for (i, e) in self.entries.iter().enumerate() {
            let rec = &e.record;
            if rec.sample_id != e.sample.id {
                return Err(ModelError::Validation(format!(
                    "entry {i}: record sample_id {:?} does not match sample id {:?}",
                    rec.sample_id, e.sample.id
                )));
            }
            e.sample.validate()?;
            if !seen.insert((rec.sample_id.as_str(), rec.source)) {
                return Err(ModelError::Conflict(vec![(rec.sample_id.clone(), rec.source)]));
            }
            if rec.attempts < 1 || max_attempts.is_some_and(|m| rec.attempts > m) {
                return Err(ModelError::Validation(format!(
                    "sample {:?}: attempts {} outside [1, {}]",
                    rec.sample_id,
                    rec.attempts,
                    max_attempts.map_or("inf".into(), |m| m.to_string())
                )));
            }
            rec.chain.validate_for(&e.sample)?;
            let correct = rec.predicted_label == e.sample.gold_label;
            if rec.source == Source::TeacherStage2 && !correct {
                return Err(ModelError::Validation(format!(
                    "sample {:?}: stage-2 record label differs from gold",
                    rec.sample_id
                )));
            }
            match self.role {
                DatasetRole::TeacherStage1 if !correct => {
                    return Err(ModelError::Validation(format!(
                        "sample {:?}: teacher_stage1 entries must be correctly predicted",
                        rec.sample_id
                    )));
                }
                DatasetRole::AssistantAug if !correct || e.sample.split != Split::Train => {
                    return Err(ModelError::Validation(format!(
                        "sample {:?}: assistant_aug entries must be correct train-split predictions",
                        rec.sample_id
                    )));
                }
                _ => {}
            }
            let allowed = match self.role {
                DatasetRole::TeacherStage1 => rec.source == Source::TeacherStage1,
                DatasetRole::TeacherStage2 => rec.source == Source::TeacherStage2,
                DatasetRole::TeacherFull => rec.source != Source::Assistant,
                DatasetRole::AssistantAug => rec.source == Source::Assistant,
                DatasetRole::Full => true,
            };
            if !allowed {
                return Err(ModelError::Validation(format!(
                    "sample {:?}: source {} not allowed in a {} dataset",
                    rec.sample_id, rec.source, self.role
                )));
            }
        }
        if self.role == DatasetRole::Full {
            let parts = ["merge.left_count", "merge.right_count"]
                .map(|k| self.provenance.get(k).and_then(|v| v.parse::<usize>().ok()));
            match parts {
                [Some(l), Some(r)] if l + r == self.entries.len() => {}
                _ => {
                    return Err(ModelError::Validation(format!(
                        "full dataset {:?}: entry count {} does not match recorded parent counts",
                        self.name,
                        self.entries.len()
                    )))
                }
            }
        }
        Ok(())
    }

    /// Refuses datasets containing dev or test samples.
    pub fn check_no_leakage(&self) -> Result<(), ModelError> {
        if let Some(e) = self.entries.iter().find(|e| e.sample.split != Split::Train) {
            return Err(ModelError::Validation(format!(
                "leakage: sample {:?} from split {} in training dataset {:?}",
                e.sample.id, e.sample.split, self.name
            )));
        }
        Ok(())
    }
}

/// Union of two datasets (teacher stage 1 with stage 2, or teacher with
/// assistant augmentation).
pub fn merge_datasets(
    a: &ReasoningDataset,
    b: &ReasoningDataset,
) -> Result<ReasoningDataset, ModelError> {
    let role = DatasetRole::union(a.role, b.role).ok_or_else(|| {
        ModelError::Validation(format!("cannot merge roles {} and {}", a.role, b.role))
    })?;
    let left: BTreeSet<(&str, Source)> = a
        .entries
        .iter()
        .map(|e| (e.record.sample_id.as_str(), e.record.source))
        .collect();
    let collisions: Vec<(String, Source)> = b
        .entries
        .iter()
        .map(|e| (e.record.sample_id.as_str(), e.record.source))
        .filter(|k| left.contains(k))
        .map(|(id, s)| (id.to_string(), s))
        .collect();
    if !collisions.is_empty() {
        return Err(ModelError::Conflict(collisions));
    }

    let mut provenance = BTreeMap::new();
    for (prefix, ds) in [("left", a), ("right", b)] {
        provenance.insert(format!("merge.{prefix}"), ds.name.clone());
        provenance.insert(format!("merge.{prefix}_role"), ds.role.to_string());
        provenance.insert(format!("merge.{prefix}_count"), ds.len().to_string());
        for (k, v) in &ds.provenance {
            if !k.starts_with("merge.") {
                provenance.insert(format!("{prefix}.{k}"), v.clone());
            }
        }
    }
    let entries = a.entries.iter().chain(&b.entries).cloned().collect();
    let name = match role {
        DatasetRole::TeacherFull => "teacher_full".to_string(),
        DatasetRole::Full => "full".to_string(),
        _ => a.name.clone(),
    };
    ReasoningDataset::new(name, role, entries, provenance)
}

/// Samples of a corpus, all sharing one granularity.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Corpus {
    pub fine_grained: bool,
    pub samples: Vec<Sample>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: usize,
    pub dev: usize,
    pub test: usize,
}

impl Corpus {
    pub fn new(fine_grained: bool, samples: Vec<Sample>) -> Result<Self, ModelError> {
        let mut ids = HashSet::new();
        for s in &samples {
            s.validate()?;
            if !ids.insert(s.id.as_str()) {
                return Err(ModelError::DuplicateId(s.id.clone()));
            }
            if s.aspect.is_some() != fine_grained {
                return Err(ModelError::Validation(format!(
                    "sample {:?}: aspect {} but corpus is {}",
                    s.id,
                    if s.aspect.is_some() { "present" } else { "missing" },
                    if fine_grained { "fine-grained" } else { "coarse-grained" }
                )));
            }
        }
        Ok(Corpus {
            fine_grained,
            samples,
        })
    }

    pub fn counts(&self) -> SplitCounts {
        let mut c = SplitCounts::default();
        for s in &self.samples {
            match s.split {
                Split::Train => c.train += 1,
                Split::Dev => c.dev += 1,
                Split::Test => c.test += 1,
            }
        }
        c
    }

    pub fn split(&self, split: Split) -> Vec<Sample> {
        self.samples
            .iter()
            .filter(|s| s.split == split)
            .cloned()
            .collect()
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Reads a JSON Lines corpus. Blank lines are skipped.
pub fn load_corpus(path: &Path, fine_grained: bool) -> Result<Corpus, ModelError> {
    let samples: Vec<Sample> = read_jsonl(path)?;
    let corpus = Corpus::new(fine_grained, samples)?;
    let c = corpus.counts();
    log::info!(
        "loaded {} samples from {} (train {}, dev {}, test {})",
        corpus.len(),
        path.display(),
        c.train,
        c.dev,
        c.test
    );
    Ok(corpus)
}

pub fn save_corpus(samples: &[Sample], path: &Path) -> Result<u64, ModelError> {
    write_jsonl(path, samples)
}

/// Generic JSON Lines reader with 1-based line numbers in errors.
pub fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>, ModelError> {
    let file = File::open(path).map_err(|e| ModelError::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| ModelError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let value = serde_json::from_str(&line).map_err(|e| ModelError::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(value);
    }
    Ok(out)
}

/// Writes one JSON object per line; returns the number of bytes written.
pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<u64, ModelError> {
    let file = File::create(path).map_err(|e| ModelError::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut bytes = 0u64;
    for item in items {
        let line = serde_json::to_string(item).expect("record serializes");
        w.write_all(line.as_bytes())
            .and_then(|_| w.write_all(b"\n"))
            .map_err(|e| ModelError::io(path, e))?;
        bytes += line.len() as u64 + 1;
    }
    w.flush().map_err(|e| ModelError::io(path, e))?;
    Ok(bytes)
}

#[derive(Debug, Serialize, Deserialize)]
struct DatasetHeader {
    schema_version: u32,
    name: String,
    role: DatasetRole,
    count: usize,
    provenance: BTreeMap<String, String>,
}

const DATASET_SCHEMA_VERSION: u32 = 1;

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta.json");
    PathBuf::from(s)
}

/// Writes the entries as JSON Lines plus a `.meta.json` sidecar. Returns the
/// size of the entries file. Invalid or leaking datasets are refused before
/// anything is written.
pub fn save_dataset(ds: &ReasoningDataset, path: &Path) -> Result<u64, ModelError> {
    ds.validate()?;
    ds.check_no_leakage()?;
    let header = DatasetHeader {
        schema_version: DATASET_SCHEMA_VERSION,
        name: ds.name.clone(),
        role: ds.role,
        count: ds.len(),
        provenance: ds.provenance.clone(),
    };
    let bytes = write_jsonl(path, &ds.entries)?;
    let meta = sidecar_path(path);
    let mut text = serde_json::to_string_pretty(&header).expect("header serializes");
    text.push('\n');
    fs::write(&meta, text).map_err(|e| ModelError::io(&meta, e))?;
    Ok(bytes)
}

pub fn load_dataset(path: &Path) -> Result<ReasoningDataset, ModelError> {
    let meta = sidecar_path(path);
    let text = fs::read_to_string(&meta).map_err(|e| ModelError::io(&meta, e))?;
    let header: DatasetHeader = serde_json::from_str(&text).map_err(|e| ModelError::Parse {
        path: meta.clone(),
        line: e.line(),
        message: e.to_string(),
    })?;
    if header.schema_version != DATASET_SCHEMA_VERSION {
        return Err(ModelError::Validation(format!(
            "{}: unsupported schema version {}",
            meta.display(),
            header.schema_version
        )));
    }
    let entries: Vec<DatasetEntry> = read_jsonl(path)?;
    if entries.len() != header.count {
        return Err(ModelError::Validation(format!(
            "{}: header declares {} entries, found {}",
            path.display(),
            header.count,
            entries.len()
        )));
    }
    ReasoningDataset::new(header.name, header.role, entries, header.provenance)
}


#[cfg(test)]
mod tests {
    use super::fixtures::*;
    use super::*;
    use SentimentLabel::*;

    #[test]
    fn label_parsing_is_case_insensitive_and_closed() {
        assert_eq!("POSITIVE".parse::<SentimentLabel>().unwrap(), Positive);
        assert_eq!(" Neutral ".parse::<SentimentLabel>().unwrap(), Neutral);
        assert!("happy".parse::<SentimentLabel>().is_err());
        assert_eq!(serde_json::to_string(&Negative).unwrap(), "\"negative\"");
        assert!(Negative < Neutral && Neutral < Positive);
    }

    #[test]
    fn corpus_rejects_duplicates_and_mixed_granularity() {
        let a = sample("s1", Positive, Split::Train);
        let err = Corpus::new(false, vec![a.clone(), a.clone()]).unwrap_err();
        assert!(matches!(err, ModelError::DuplicateId(ref id) if id == "s1"));
        assert!(err.to_string().contains("s1"));

        let mut fine = sample("s2", Neutral, Split::Dev);
        fine.aspect = Some("MERS".into());
        assert!(Corpus::new(false, vec![a, fine.clone()]).is_err());
        assert!(Corpus::new(true, vec![fine]).is_ok());
    }

    #[test]
    fn blank_text_rejected() {
        let mut s = sample("s1", Positive, Split::Train);
        s.text = "   ".into();
        assert!(Corpus::new(false, vec![s]).is_err());
    }

    #[test]
    fn load_corpus_reports_line_numbers() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.jsonl");
        let good = serde_json::to_string(&sample("a", Positive, Split::Train)).unwrap();
        fs::write(&p, format!("{good}\n{{not json\n")).unwrap();
        match load_corpus(&p, false).unwrap_err() {
            ModelError::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected {other}"),
        }
        fs::write(&p, "").unwrap();
        let c = load_corpus(&p, false).unwrap();
        assert!(c.is_empty());
        assert_eq!(c.counts(), SplitCounts::default());
    }

    #[test]
    fn stage1_dataset_requires_correct_predictions() {
        let bad = entry("s1", Positive, Negative, Source::TeacherStage1);
        assert!(ReasoningDataset::new("t1", DatasetRole::TeacherStage1, vec![bad], BTreeMap::new()).is_err());
    }

    #[test]
    fn assistant_dataset_requires_train_split() {
        let mut e = entry("s1", Positive, Positive, Source::Assistant);
        e.sample.split = Split::Dev;
        assert!(ReasoningDataset::new("a", DatasetRole::AssistantAug, vec![e], BTreeMap::new()).is_err());
    }

    #[test]
    fn image_sentinel_only_without_image() {
        let mut e = entry("s1", Positive, Positive, Source::TeacherStage1);
        e.record.chain.image_analysis = "N/A".into();
        assert!(ReasoningDataset::new("t1", DatasetRole::TeacherStage1, vec![e.clone()], BTreeMap::new()).is_err());
        e.sample.image_ref = None;
        assert!(ReasoningDataset::new("t1", DatasetRole::TeacherStage1, vec![e], BTreeMap::new()).is_ok());
    }

    #[test]
    fn entries_are_sorted() {
        let ds = ReasoningDataset::new(
            "t",
            DatasetRole::TeacherFull,
            vec![
                entry("b", Neutral, Neutral, Source::TeacherStage1),
                entry("a", Neutral, Neutral, Source::TeacherStage2),
            ],
            BTreeMap::new(),
        )
        .unwrap();
        let ids: Vec<_> = ds.entries().iter().map(|e| e.sample.id.as_str()).collect();
        assert_eq!(ids, ["a", "b"]);
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.jsonl");
        let ds = ReasoningDataset::new(
            "t1",
            DatasetRole::TeacherStage1,
            vec![
                entry("s1", Positive, Positive, Source::TeacherStage1),
                entry("s2", Negative, Negative, Source::TeacherStage1),
            ],
            BTreeMap::from([("teacher".to_string(), "mock".to_string())]),
        )
        .unwrap();
        let bytes = save_dataset(&ds, &p).unwrap();
        let text = fs::read_to_string(&p).unwrap();
        assert_eq!(text.lines().count(), 2);
        assert_eq!(bytes, text.len() as u64);
        let back = load_dataset(&p).unwrap();
        assert_eq!(back, ds);

        let empty = ReasoningDataset::empty("none", DatasetRole::TeacherStage2);
        let pe = dir.path().join("e.jsonl");
        assert_eq!(save_dataset(&empty, &pe).unwrap(), 0);
        assert!(sidecar_path(&pe).exists());
        assert_eq!(load_dataset(&pe).unwrap(), empty);
    }

    #[test]
    fn entry_field_order_is_fixed() {
        let e = entry("s1", Positive, Positive, Source::TeacherStage1);
        let line = serde_json::to_string(&e).unwrap();
        assert!(line.starts_with(r#"{"sample":{"id":"s1","text":"post s1","image_ref":"img/s1.jpg","aspect":null,"gold_label":"positive","split":"train"},"record":{"sample_id":"s1","chain":{"text_analysis""#));
        assert!(line.ends_with(r#""predicted_label":"positive","source":"teacher_stage1","attempts":1,"raw_response":"raw"}}"#));
    }

    #[test]
    fn save_refuses_leakage_before_writing() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.jsonl");
        let mut e = entry("s1", Positive, Positive, Source::TeacherStage1);
        e.sample.split = Split::Test;
        let ds = ReasoningDataset::new("t1", DatasetRole::TeacherStage1, vec![e], BTreeMap::new()).unwrap();
        assert!(save_dataset(&ds, &p).is_err());
        assert!(!p.exists());
    }

    #[test]
    fn merge_roles_and_conflicts() {
        let t1 = ReasoningDataset::new(
            "t1",
            DatasetRole::TeacherStage1,
            vec![entry("s1", Positive, Positive, Source::TeacherStage1)],
            BTreeMap::new(),
        )
        .unwrap();
        let t2 = ReasoningDataset::new(
            "t2",
            DatasetRole::TeacherStage2,
            vec![entry("s2", Negative, Negative, Source::TeacherStage2)],
            BTreeMap::new(),
        )
        .unwrap();
        let full_t = merge_datasets(&t1, &t2).unwrap();
        assert_eq!(full_t.role(), DatasetRole::TeacherFull);
        assert_eq!(full_t.len(), 2);
        assert_eq!(full_t.provenance()["merge.left"], "t1");

        let a = ReasoningDataset::new(
            "a",
            DatasetRole::AssistantAug,
            vec![entry("s1", Positive, Positive, Source::Assistant)],
            BTreeMap::new(),
        )
        .unwrap();
        let all = merge_datasets(&full_t, &a).unwrap();
        assert_eq!(all.role(), DatasetRole::Full);
        assert_eq!(all.len(), 3);
        assert!(merge_datasets(&t1, &a).is_err());
    }

    #[test]
    fn merge_conflict_lists_collisions() {
        let mk = |ids: &[&str]| {
            ReasoningDataset::new(
                "t1",
                DatasetRole::TeacherStage1,
                ids.iter()
                    .map(|id| entry(id, Positive, Positive, Source::TeacherStage1))
                    .collect(),
                BTreeMap::new(),
            )
            .unwrap()
        };
        match merge_datasets(&mk(&["s1", "s2"]), &mk(&["s1", "s3"])).unwrap_err() {
            ModelError::Conflict(c) => assert_eq!(c, vec![("s1".to_string(), Source::TeacherStage1)]),
            other => panic!("unexpected {other}"),
        }
        assert_eq!(merge_datasets(&mk(&["s1"]), &mk(&["s2"])).unwrap().len(), 2);
    }

    #[test]
    fn merge_with_empty_is_identity_on_entries() {
        let t = ReasoningDataset::new(
            "tf",
            DatasetRole::TeacherFull,
            vec![entry("s1", Positive, Positive, Source::TeacherStage2)],
            BTreeMap::new(),
        )
        .unwrap();
        let asst = ReasoningDataset::empty("a", DatasetRole::AssistantAug);
        let all = merge_datasets(&asst, &t).unwrap();
        assert_eq!(all.entries(), t.entries());
        assert_eq!(all.provenance()["merge.left_count"], "0");
    }
}
