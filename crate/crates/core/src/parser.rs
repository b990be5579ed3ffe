//! Parsing of raw model responses into a four-section reasoning chain plus a
//! terminal `Sentiment: <label>` line, and the bounded regeneration loop
//! (adaptive replay controller) built on top of it.

use std::fmt;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gateway::{Gateway, GatewayError, SamplingParams};
use crate::model::{
    ReasoningChain, ReasoningRecord, Sample, SentimentLabel, Source, NO_IMAGE_SENTINEL,
};
use crate::prompt::{Stage, TemplateError, TemplateSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Section {
    TextAnalysis,
    ImageAnalysis,
    ConflictResolution,
    Conclusion,
}

impl Section {
    pub const ALL: [Section; 4] = [
        Section::TextAnalysis,
        Section::ImageAnalysis,
        Section::ConflictResolution,
        Section::Conclusion,
    ];

    pub fn header(self) -> &'static str {
        match self {
            Section::TextAnalysis => "Text Analysis",
            Section::ImageAnalysis => "Image Analysis",
            Section::ConflictResolution => "Conflict Resolution",
            Section::Conclusion => "Conclusion",
        }
    }
}

impl fmt::Display for Section {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Section::TextAnalysis => "text_analysis",
            Section::ImageAnalysis => "image_analysis",
            Section::ConflictResolution => "conflict_resolution",
            Section::Conclusion => "conclusion",
        })
    }
}

const LABEL_KEY: &str = "Sentiment";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "detail", rename_all = "snake_case")]
pub enum Defect {
    MissingSection(Section),
    DuplicateSection(Section),
    OutOfOrder(Section),
    EmptySection(Section),
    MissingLabel,
    InvalidLabel(String),
    MultipleLabelLines(usize),
    LabelNotTerminal,
    /// `N/A` image analysis for a sample that has an image.
    ImageNotAnalysed,
}

impl fmt::Display for Defect {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Defect::MissingSection(s) => write!(f, "missing-section({s})"),
            Defect::DuplicateSection(s) => write!(f, "duplicate-section({s})"),
            Defect::OutOfOrder(s) => write!(f, "out-of-order({s})"),
            Defect::EmptySection(s) => write!(f, "empty-section({s})"),
            Defect::MissingLabel => f.write_str("missing-label"),
            Defect::InvalidLabel(v) => write!(f, "invalid-label({v:?})"),
            Defect::MultipleLabelLines(n) => write!(f, "multiple-label-lines({n})"),
            Defect::LabelNotTerminal => f.write_str("label-not-terminal"),
            Defect::ImageNotAnalysed => f.write_str("image-not-analysed"),
        }
    }
}

/// Either a parsed chain and label, or the full list of defects.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParseOutcome {
    pub result: Result<(ReasoningChain, SentimentLabel), Vec<Defect>>,
}

impl ParseOutcome {
    pub fn is_success(&self) -> bool {
        self.result.is_ok()
    }

    pub fn defects(&self) -> &[Defect] {
        match &self.result {
            Ok(_) => &[],
            Err(d) => d,
        }
    }

    pub fn into_result(self) -> Result<(ReasoningChain, SentimentLabel), Vec<Defect>> {
        self.result
    }
}

fn strip_decoration(s: &str) -> &str {
    let s = s.trim_start_matches(|c: char| c.is_whitespace() || matches!(c, '#' | '*' | '_' | '>' | '-'));
    // "1. Text Analysis:" / "2) ..."
    let digits = s.len() - s.trim_start_matches(|c: char| c.is_ascii_digit()).len();
    if digits > 0 {
        let rest = &s[digits..];
        if let Some(r) = rest.strip_prefix('.').or_else(|| rest.strip_prefix(')')) {
            return r.trim_start_matches(|c: char| c.is_whitespace() || matches!(c, '*' | '_'));
        }
    }
    s
}

/// If `line` is `<key>:` (with markdown decoration around the key), returns
/// the text after the colon.
fn match_key<'a>(line: &'a str, key: &str) -> Option<&'a str> {
    let s = strip_decoration(line);
    let head = s.get(..key.len())?;
    if !head.eq_ignore_ascii_case(key) {
        return None;
    }
    let rest = s[key.len()..].trim_start_matches(['*', '_', ' ', '\t']);
    let rest = rest.strip_prefix(':')?;
    Some(rest.trim_start_matches(['*', '_']).trim())
}

fn clean_label_value(v: &str) -> &str {
    v.trim_matches(|c: char| {
        c.is_whitespace() || matches!(c, '*' | '_' | '`' | '"' | '\'' | '.' | '[' | ']' | '<' | '>')
    })
}

/// Parses a raw response. Never fails: problems are returned as defects.
///
/// A response is valid when the four section headers appear once each, in
/// order, with non-empty bodies, and exactly one `Sentiment:` line closes
/// the response with a valid label. Header matching ignores case and
/// leading markdown decoration.
pub fn parse(raw: &str) -> ParseOutcome {
    let mut sections: Vec<(Section, Vec<&str>)> = Vec::new();
    let mut current: Option<usize> = None;
    let mut labels: Vec<&str> = Vec::new();
    let mut after_label = false;
    let mut trailing = false;

    for line in raw.lines() {
        if let Some((section, first)) = Section::ALL
            .iter()
            .find_map(|&s| match_key(line, s.header()).map(|body| (s, body)))
        {
            sections.push((section, vec![first]));
            current = Some(sections.len() - 1);
            after_label = false;
        } else if let Some(value) = match_key(line, LABEL_KEY) {
            labels.push(clean_label_value(value));
            current = None;
            after_label = true;
        } else if let Some(i) = current {
            sections[i].1.push(line);
        } else if after_label && !line.trim().is_empty() {
            trailing = true;
        }
    }

    let mut defects = Vec::new();
    for s in Section::ALL {
        match sections.iter().filter(|(x, _)| *x == s).count() {
            0 => defects.push(Defect::MissingSection(s)),
            1 => {}
            _ => defects.push(Defect::DuplicateSection(s)),
        }
    }
    let mut last = None;
    for (s, _) in &sections {
        if last.is_some_and(|l| *s < l) {
            defects.push(Defect::OutOfOrder(*s));
        }
        last = Some(last.map_or(*s, |l: Section| l.max(*s)));
    }
    for (s, body) in &sections {
        if body.join("\n").trim().is_empty() {
            defects.push(Defect::EmptySection(*s));
        }
    }

    let label = match labels.as_slice() {
        [] => {
            defects.push(Defect::MissingLabel);
            None
        }
        [one] => match one.parse::<SentimentLabel>() {
            Ok(l) => Some(l),
            Err(_) => {
                defects.push(Defect::InvalidLabel(one.to_string()));
                None
            }
        },
        many => {
            defects.push(Defect::MultipleLabelLines(many.len()));
            None
        }
    };
    if trailing && labels.len() == 1 {
        defects.push(Defect::LabelNotTerminal);
    }

    if !defects.is_empty() {
        return ParseOutcome {
            result: Err(defects),
        };
    }
    let body = |s: Section| {
        sections
            .iter()
            .find(|(x, _)| *x == s)
            .map(|(_, b)| b.join("\n").trim().to_string())
            .unwrap_or_default()
    };
    ParseOutcome {
        result: Ok((
            ReasoningChain {
                text_analysis: body(Section::TextAnalysis),
                image_analysis: body(Section::ImageAnalysis),
                conflict_resolution: body(Section::ConflictResolution),
                conclusion: body(Section::Conclusion),
            },
            label.expect("label present when no defects"),
        )),
    }
}

/// Canonical rendering of a chain and label; `parse` inverts it.
pub fn format_response(chain: &ReasoningChain, label: SentimentLabel) -> String {
    format!(
        "{}: {}\n{}: {}\n{}: {}\n{}: {}\n{LABEL_KEY}: {label}",
        Section::TextAnalysis.header(),
        chain.text_analysis,
        Section::ImageAnalysis.header(),
        chain.image_analysis,
        Section::ConflictResolution.header(),
        chain.conflict_resolution,
        Section::Conclusion.header(),
        chain.conclusion,
    )
}

/// The chain alone (no label line), used as reasoning text for training and
/// evaluation.
pub fn format_chain(chain: &ReasoningChain) -> String {
    let full = format_response(chain, SentimentLabel::Neutral);
    full.rsplit_once('\n').map(|(c, _)| c.to_string()).unwrap_or(full)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArcPolicy {
    pub max_attempts: u32,
}

impl Default for ArcPolicy {
    fn default() -> Self {
        ArcPolicy { max_attempts: 3 }
    }
}

impl ArcPolicy {
    pub fn new(max_attempts: u32) -> Result<Self, ArcError> {
        if max_attempts < 1 {
            return Err(ArcError::Config("ARC max_attempts must be >= 1".into()));
        }
        Ok(ArcPolicy { max_attempts })
    }
}

/// Temperature used for regeneration when the first attempt was greedy.
pub const RETRY_TEMPERATURE: f64 = 0.7;

#[derive(Debug, Error)]
pub enum ArcError {
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error("{0}")]
    Config(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttemptLog {
    pub attempt: u32,
    pub raw_response: String,
    pub defects: Vec<Defect>,
}

/// Every response and defect list of a sample that never parsed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FailureReport {
    pub sample_id: String,
    pub stage: Stage,
    pub source: Source,
    pub attempts: Vec<AttemptLog>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ArcOutcome {
    Success {
        record: ReasoningRecord,
        warnings: Vec<String>,
    },
    Failure(FailureReport),
}

impl ArcOutcome {
    pub fn gateway_calls(&self) -> u32 {
        match self {
            ArcOutcome::Success { record, .. } => record.attempts,
            ArcOutcome::Failure(r) => r.attempts.len() as u32,
        }
    }
}

/// Sampling for the n-th attempt (1-based). Greedy first attempts are
/// followed by sampled ones; the seed moves so each retry is a distinct,
/// replayable request.
pub fn attempt_sampling(base: &SamplingParams, attempt: u32) -> SamplingParams {
    if attempt <= 1 {
        return base.clone();
    }
    SamplingParams {
        temperature: if base.temperature == 0.0 {
            RETRY_TEMPERATURE
        } else {
            base.temperature
        },
        seed: base.seed.map(|s| s.wrapping_add(attempt as u64 - 1)),
        max_tokens: base.max_tokens,
    }
}

/// Generates reasoning for one sample, regenerating until the response
/// parses or `policy.max_attempts` calls have been made.
///
/// `source` selects the stage: `TeacherStage2` renders the label-conditioned
/// explain prompt and pins the record's label to the gold label; the others
/// render the prediction prompt.
pub fn generate_with_arc(
    sample: &Sample,
    source: Source,
    gateway: &Gateway,
    templates: &TemplateSet,
    policy: &ArcPolicy,
) -> Result<ArcOutcome, ArcError> {
    let stage = match source {
        Source::TeacherStage2 => Stage::Explain,
        Source::TeacherStage1 | Source::Assistant => Stage::Predict,
    };
    let prompt = templates.render(sample, stage)?;
    let mut log = Vec::new();
    for attempt in 1..=policy.max_attempts {
        let sampling = attempt_sampling(gateway.sampling(), attempt);
        let completion = gateway.complete_with(&prompt, &sampling)?;
        let mut outcome = parse(&completion.text).into_result();
        if let Ok((chain, _)) = &outcome {
            if chain.image_analysis.trim() == NO_IMAGE_SENTINEL && sample.image_ref.is_some() {
                outcome = Err(vec![Defect::ImageNotAnalysed]);
            }
        }
        match outcome {
            Ok((chain, label)) => {
                let mut warnings = Vec::new();
                let predicted_label = if stage == Stage::Explain {
                    if label != sample.gold_label {
                        warnings.push(format!(
                            "sample {:?}: explain answer {label} differs from gold {}; gold kept",
                            sample.id, sample.gold_label
                        ));
                    }
                    sample.gold_label
                } else {
                    label
                };
                return Ok(ArcOutcome::Success {
                    record: ReasoningRecord {
                        sample_id: sample.id.clone(),
                        chain,
                        predicted_label,
                        source,
                        attempts: attempt,
                        raw_response: completion.text,
                    },
                    warnings,
                });
            }
            Err(defects) => {
                log::debug!(
                    "sample {:?} attempt {attempt}: {}",
                    sample.id,
                    defects.iter().map(|d| d.to_string()).collect::<Vec<_>>().join(", ")
                );
                log.push(AttemptLog {
                    attempt,
                    raw_response: completion.text,
                    defects,
                });
            }
        }
    }
    Ok(ArcOutcome::Failure(FailureReport {
        sample_id: sample.id.clone(),
        stage,
        source,
        attempts: log,
    }))
}

/// Appends failure reports to a JSON Lines quarantine file.
pub fn append_quarantine(path: &Path, reports: &[FailureReport]) -> std::io::Result<()> {
    if reports.is_empty() {
        return Ok(());
    }
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    for r in reports {
        writeln!(f, "{}", serde_json::to_string(r).expect("report serializes"))?;
    }
    f.flush()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::mock::ScriptedTransport;
    use crate::gateway::EndpointConfig;
    use crate::model::Split;
    use proptest::prelude::*;
    use std::sync::Arc;

    const GOOD: &str = "Text Analysis: upbeat words\nImage Analysis: a beach\n\
                        Conflict Resolution: none\nConclusion: happy post\nSentiment: positive";

    #[test]
    fn well_formed_response() {
        let (chain, label) = parse(GOOD).into_result().unwrap();
        assert_eq!(label, SentimentLabel::Positive);
        assert_eq!(chain.image_analysis, "a beach");
        assert_eq!(chain.conclusion, "happy post");
    }

    #[test]
    fn markdown_decoration_and_case() {
        let raw = "Here is my analysis.\n\n## **Text analysis:**\nline one\nline two\n\
                   **IMAGE ANALYSIS**: sunset\n3. Conflict Resolution: they agree\n\
                   - conclusion: fine\n\n**Sentiment:** Negative.\n";
        let (chain, label) = parse(raw).into_result().unwrap();
        assert_eq!(chain.text_analysis, "line one\nline two");
        assert_eq!(chain.image_analysis, "sunset");
        assert_eq!(label, SentimentLabel::Negative);
    }

    #[test]
    fn missing_section() {
        let raw = GOOD.replace("Conflict Resolution: none\n", "");
        assert_eq!(
            parse(&raw).defects(),
            &[Defect::MissingSection(Section::ConflictResolution)]
        );
    }

    #[test]
    fn invalid_label() {
        let raw = GOOD.replace("Sentiment: positive", "Sentiment: happy");
        assert_eq!(parse(&raw).defects(), &[Defect::InvalidLabel("happy".into())]);
    }

    #[test]
    fn multiple_label_lines_are_ambiguous() {
        let raw = format!("{GOOD}\nSentiment: negative");
        assert_eq!(parse(&raw).defects(), &[Defect::MultipleLabelLines(2)]);
    }

    #[test]
    fn other_defects() {
        let raw = GOOD.replace("Image Analysis: a beach", "Image Analysis:   ");
        assert_eq!(parse(&raw).defects(), &[Defect::EmptySection(Section::ImageAnalysis)]);
        let raw = format!("{GOOD}\nbye");
        assert_eq!(parse(&raw).defects(), &[Defect::LabelNotTerminal]);
        let raw = GOOD.replace("\nSentiment: positive", "");
        assert_eq!(parse(&raw).defects(), &[Defect::MissingLabel]);
        let swapped = "Image Analysis: a\nText Analysis: b\nConflict Resolution: c\nConclusion: d\nSentiment: neutral";
        assert_eq!(parse(swapped).defects(), &[Defect::OutOfOrder(Section::TextAnalysis)]);
        assert!(!parse("").is_success());
    }

    #[test]
    fn format_chain_drops_label_line() {
        let (chain, _) = parse(GOOD).into_result().unwrap();
        let text = format_chain(&chain);
        assert!(text.ends_with("Conclusion: happy post"));
        assert!(!text.contains("Sentiment"));
    }

    fn body() -> impl Strategy<Value = String> {
        let word = "[a-z]{1,8}".prop_filter("no header words", |w| {
            !["text", "image", "conflict", "conclusion", "sentiment"].contains(&w.as_str())
        });
        prop::collection::vec(prop::collection::vec(word, 1..6).prop_map(|w| w.join(" ")), 1..3)
            .prop_map(|lines| lines.join("\n"))
    }

    proptest! {
        #[test]
        fn format_parse_round_trip(
            t in body(), i in body(), c in body(), k in body(), l in 0usize..3
        ) {
            let chain = ReasoningChain {
                text_analysis: t, image_analysis: i, conflict_resolution: c, conclusion: k,
            };
            let label = SentimentLabel::from_index(l).unwrap();
            let (back, back_label) = parse(&format_response(&chain, label)).into_result().unwrap();
            prop_assert_eq!(back, chain);
            prop_assert_eq!(back_label, label);
        }

        #[test]
        fn parse_never_panics(raw in "\\PC{0,300}") {
            let out = parse(&raw);
            prop_assert_eq!(out.is_success(), out.defects().is_empty());
        }
    }

    fn sample(gold: SentimentLabel) -> Sample {
        Sample {
            id: "s1".into(),
            text: "sunny".into(),
            image_ref: Some("img.jpg".into()),
            aspect: None,
            gold_label: gold,
            split: Split::Train,
        }
    }

    fn gateway(t: Arc<ScriptedTransport>) -> Gateway {
        let mut cfg = EndpointConfig::new("http://mock", "m");
        cfg.retry.initial_backoff_secs = 0.0;
        Gateway::with_transport(cfg, t, None).unwrap()
    }

    #[test]
    fn arc_counts_calls() {
        let templates = TemplateSet::builtin(false);
        let policy = ArcPolicy::default();
        let bad = GOOD.replace("Sentiment: positive", "Sentiment: happy");

        let t = Arc::new(ScriptedTransport::texts(&[GOOD]));
        let out = generate_with_arc(&sample(SentimentLabel::Positive), Source::TeacherStage1, &gateway(t.clone()), &templates, &policy).unwrap();
        assert_eq!(out.gateway_calls(), 1);
        assert_eq!(t.calls(), 1);

        let t = Arc::new(ScriptedTransport::texts(&[bad.as_str(), bad.as_str(), GOOD]));
        let out = generate_with_arc(&sample(SentimentLabel::Positive), Source::TeacherStage1, &gateway(t.clone()), &templates, &policy).unwrap();
        match out {
            ArcOutcome::Success { record, .. } => assert_eq!(record.attempts, 3),
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(t.calls(), 3);

        let t = Arc::new(ScriptedTransport::repeating(Ok(crate::gateway::mock::chat_response(&bad))));
        let out = generate_with_arc(&sample(SentimentLabel::Positive), Source::TeacherStage1, &gateway(t.clone()), &templates, &policy).unwrap();
        match out {
            ArcOutcome::Failure(r) => {
                assert_eq!(r.attempts.len(), 3);
                assert!(r.attempts.iter().all(|a| a.raw_response == bad));
            }
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(t.calls(), 3);
    }

    #[test]
    fn explain_pins_gold_label() {
        let templates = TemplateSet::builtin(false);
        let t = Arc::new(ScriptedTransport::texts(&[GOOD]));
        let out = generate_with_arc(&sample(SentimentLabel::Negative), Source::TeacherStage2, &gateway(t), &templates, &ArcPolicy::default()).unwrap();
        match out {
            ArcOutcome::Success { record, warnings } => {
                assert_eq!(record.predicted_label, SentimentLabel::Negative);
                assert_eq!(warnings.len(), 1);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn image_sentinel_triggers_regeneration() {
        let templates = TemplateSet::builtin(false);
        let na = GOOD.replace("a beach", "N/A");
        let t = Arc::new(ScriptedTransport::texts(&[na.as_str(), GOOD]));
        let out = generate_with_arc(&sample(SentimentLabel::Positive), Source::TeacherStage1, &gateway(t), &templates, &ArcPolicy::default()).unwrap();
        assert_eq!(out.gateway_calls(), 2);
    }

    #[test]
    fn retry_sampling() {
        let base = SamplingParams::default();
        assert_eq!(attempt_sampling(&base, 1), base);
        let second = attempt_sampling(&base, 2);
        assert_eq!(second.temperature, RETRY_TEMPERATURE);
        assert_ne!(second.seed, attempt_sampling(&base, 3).seed);
        assert!(ArcPolicy::new(0).is_err());
    }
}
