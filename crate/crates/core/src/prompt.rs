//! Two-stage prompt construction: a shared basic template (task description,
//! sentiment definition, reasoning format) followed by a predict- or
//! explain-specific instruction.
//!
//! Templates are plain text with `{text}`, `{aspect}` and `{gold_label}`
//! placeholders. The defaults are compiled in from `assets/templates/` and
//! can be replaced by a directory holding files with the same names.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::Sample;
use crate::parser::Section;

#[derive(Debug, Error)]
pub enum TemplateError {
    #[error("cannot read template {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("template {name}: {message}")]
    Invalid { name: String, message: String },
    #[error("configuration error: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Predict,
    Explain,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BasicTemplate {
    pub task_description: String,
    pub sentiment_definition: String,
    pub reasoning_format: String,
}

impl BasicTemplate {
    fn validate(&self) -> Result<(), TemplateError> {
        let lower = self.reasoning_format.to_lowercase();
        let mut cursor = 0;
        for section in Section::ALL {
            let header = section.header().to_lowercase();
            let count = lower.matches(&header).count();
            if count != 1 {
                return Err(invalid(
                    "reasoning_format",
                    format!("must name {:?} exactly once (found {count})", section.header()),
                ));
            }
            let at = lower.find(&header).unwrap_or_default();
            if at < cursor {
                return Err(invalid(
                    "reasoning_format",
                    format!("section {:?} is out of order", section.header()),
                ));
            }
            cursor = at;
        }
        Ok(())
    }

    /// The shared prefix of both stages.
    pub fn render(&self) -> String {
        format!(
            "{}\n\n{}\n\n{}",
            self.task_description.trim_end(),
            self.sentiment_definition.trim_end(),
            self.reasoning_format.trim_end()
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RenderedPrompt {
    pub system_text: String,
    pub user_text: String,
    pub image_ref: Option<String>,
    pub stage: Stage,
}

/// Basic template plus the two stage instructions for one granularity.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TemplateSet {
    fine_grained: bool,
    base: BasicTemplate,
    predict: String,
    explain: String,
}

const IMAGE_NOTE: &str = "An image is attached to this post.";
const NO_IMAGE_NOTE: &str = "This post has no image; write N/A under Image Analysis.";

impl TemplateSet {
    pub fn new(
        fine_grained: bool,
        base: BasicTemplate,
        predict: String,
        explain: String,
    ) -> Result<Self, TemplateError> {
        base.validate()?;
        check_placeholders("predict", &predict, fine_grained, false)?;
        check_placeholders("explain", &explain, fine_grained, true)?;
        for (name, text) in [
            ("task_description", &base.task_description),
            ("sentiment_definition", &base.sentiment_definition),
            ("reasoning_format", &base.reasoning_format),
        ] {
            if PLACEHOLDERS.iter().any(|p| text.contains(p)) {
                return Err(invalid(name, "the basic template must not contain placeholders".into()));
            }
        }
        Ok(TemplateSet {
            fine_grained,
            base,
            predict,
            explain,
        })
    }

    /// The compiled-in default templates.
    pub fn builtin(fine_grained: bool) -> Self {
        let base = BasicTemplate {
            task_description: if fine_grained {
                include_str!("../assets/templates/task_description_fine.txt")
            } else {
                include_str!("../assets/templates/task_description.txt")
            }
            .to_string(),
            sentiment_definition: include_str!("../assets/templates/sentiment_definition.txt")
                .to_string(),
            reasoning_format: include_str!("../assets/templates/reasoning_format.txt").to_string(),
        };
        let (predict, explain) = if fine_grained {
            (
                include_str!("../assets/templates/predict_fine.txt"),
                include_str!("../assets/templates/explain_fine.txt"),
            )
        } else {
            (
                include_str!("../assets/templates/predict.txt"),
                include_str!("../assets/templates/explain.txt"),
            )
        };
        TemplateSet::new(fine_grained, base, predict.into(), explain.into())
            .expect("builtin templates are valid")
    }

    /// Loads templates from a directory laid out like `assets/templates/`.
    /// Fine-grained sets read the `*_fine.txt` variants where they differ.
    pub fn from_dir(dir: &Path, fine_grained: bool) -> Result<Self, TemplateError> {
        let read = |name: &str| -> Result<String, TemplateError> {
            let path = dir.join(name);
            fs::read_to_string(&path).map_err(|source| TemplateError::Io {
                path: path.display().to_string(),
                source,
            })
        };
        let suffix = if fine_grained { "_fine" } else { "" };
        let base = BasicTemplate {
            task_description: read(&format!("task_description{suffix}.txt"))?,
            sentiment_definition: read("sentiment_definition.txt")?,
            reasoning_format: read("reasoning_format.txt")?,
        };
        let predict = read(&format!("predict{suffix}.txt"))?;
        let explain = read(&format!("explain{suffix}.txt"))?;
        TemplateSet::new(fine_grained, base, predict, explain)
    }

    pub fn fine_grained(&self) -> bool {
        self.fine_grained
    }

    pub fn base(&self) -> &BasicTemplate {
        &self.base
    }

    /// All template text, for digests.
    pub fn fingerprint(&self) -> String {
        format!("{}\u{0}{}\u{0}{}", self.base.render(), self.predict, self.explain)
    }

    pub fn render_prediction(&self, sample: &Sample) -> Result<RenderedPrompt, TemplateError> {
        self.render(sample, Stage::Predict)
    }

    pub fn render_explain(&self, sample: &Sample) -> Result<RenderedPrompt, TemplateError> {
        self.render(sample, Stage::Explain)
    }

    pub fn render(&self, sample: &Sample, stage: Stage) -> Result<RenderedPrompt, TemplateError> {
        match (&sample.aspect, self.fine_grained) {
            (Some(_), false) => {
                return Err(TemplateError::Config(format!(
                    "sample {:?} has an aspect term but the templates are coarse-grained",
                    sample.id
                )))
            }
            (None, true) => {
                return Err(TemplateError::Config(format!(
                    "sample {:?} has no aspect term but the templates are fine-grained",
                    sample.id
                )))
            }
            _ => {}
        }
        let gold = sample.gold_label.as_str();
        let aspect = sample.aspect.as_deref().unwrap_or("");
        let instruction = match stage {
            Stage::Predict => fill(&self.predict, &[("text", &sample.text), ("aspect", aspect)]),
            Stage::Explain => fill(
                &self.explain,
                &[("text", &sample.text), ("aspect", aspect), ("gold_label", gold)],
            ),
        };
        let note = if sample.image_ref.is_some() {
            IMAGE_NOTE
        } else {
            NO_IMAGE_NOTE
        };
        Ok(RenderedPrompt {
            system_text: self.base.render(),
            user_text: format!("{}\n{note}", instruction.trim_end()),
            image_ref: sample.image_ref.clone(),
            stage,
        })
    }
}

const PLACEHOLDERS: [&str; 3] = ["{text}", "{aspect}", "{gold_label}"];

fn invalid(name: &str, message: String) -> TemplateError {
    TemplateError::Invalid {
        name: name.to_string(),
        message,
    }
}

fn check_placeholders(
    name: &str,
    text: &str,
    fine_grained: bool,
    needs_label: bool,
) -> Result<(), TemplateError> {
    if text.matches("{text}").count() != 1 {
        return Err(invalid(name, "must contain {text} exactly once".into()));
    }
    let aspects = text.matches("{aspect}").count();
    if fine_grained && aspects != 1 {
        return Err(invalid(name, "fine-grained templates need {aspect} exactly once".into()));
    }
    if !fine_grained && aspects != 0 {
        return Err(invalid(name, "coarse-grained templates must not use {aspect}".into()));
    }
    let labels = text.matches("{gold_label}").count();
    match (needs_label, labels) {
        (true, 1) | (false, 0) => Ok(()),
        (true, _) => Err(invalid(name, "must contain {gold_label} exactly once".into())),
        (false, _) => Err(invalid(name, "must not contain {gold_label}".into())),
    }
}

/// Single-pass placeholder substitution, so values that happen to contain
/// placeholder syntax are inserted verbatim.
fn fill(template: &str, values: &[(&str, &str)]) -> String {
    let mut out = String::with_capacity(template.len() + 64);
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let tail = &rest[open + 1..];
        let hit = tail.find('}').and_then(|close| {
            let key = &tail[..close];
            values
                .iter()
                .find(|(k, _)| *k == key)
                .map(|(_, v)| (close, *v))
        });
        match hit {
            Some((close, value)) => {
                out.push_str(value);
                rest = &tail[close + 1..];
            }
            None => {
                out.push('{');
                rest = tail;
            }
        }
    }
    out.push_str(rest);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{SentimentLabel, Split};

    fn sample(text: &str, aspect: Option<&str>, gold: SentimentLabel) -> Sample {
        Sample {
            id: "s1".into(),
            text: text.into(),
            image_ref: Some("img/s1.jpg".into()),
            aspect: aspect.map(String::from),
            gold_label: gold,
            split: Split::Train,
        }
    }

    fn label_mentions(s: &str) -> usize {
        ["negative", "neutral", "positive"]
            .iter()
            .map(|l| s.to_lowercase().matches(l).count())
            .sum()
    }

    #[test]
    fn prediction_embeds_text_without_label() {
        let t = TemplateSet::builtin(false);
        let p = t.render_prediction(&sample("great day", None, SentimentLabel::Positive)).unwrap();
        assert!(p.user_text.contains("great day"));
        assert_eq!(label_mentions(&p.user_text), 0);
        assert_eq!(p.stage, Stage::Predict);
        assert_eq!(p.image_ref.as_deref(), Some("img/s1.jpg"));
    }

    #[test]
    fn aspect_slot_is_filled() {
        let t = TemplateSet::builtin(true);
        let s = sample("new MERS case reported", Some("MERS"), SentimentLabel::Negative);
        let p = t.render_prediction(&s).unwrap();
        assert!(p.user_text.contains("Aspect: MERS"));
    }

    #[test]
    fn rendering_is_deterministic() {
        let t = TemplateSet::builtin(false);
        let s = sample("great day", None, SentimentLabel::Positive);
        assert_eq!(t.render_prediction(&s).unwrap(), t.render_prediction(&s).unwrap());
    }

    #[test]
    fn explain_contains_gold_label_once() {
        let t = TemplateSet::builtin(false);
        let p = t.render_explain(&sample("rain again", None, SentimentLabel::Negative)).unwrap();
        assert_eq!(p.user_text.matches("negative").count(), 1);
        assert_eq!(label_mentions(&p.user_text), 1);
        assert_eq!(p.stage, Stage::Explain);
    }

    #[test]
    fn stages_share_the_basic_template() {
        for fine in [false, true] {
            let t = TemplateSet::builtin(fine);
            let s = sample("x y", fine.then_some("x"), SentimentLabel::Neutral);
            let a = t.render_prediction(&s).unwrap();
            let b = t.render_explain(&s).unwrap();
            assert_eq!(a.system_text, b.system_text);
            assert_eq!(a.system_text, t.base().render());
        }
    }

    #[test]
    fn coarse_and_fine_explain_differ_in_aspect_and_task_only() {
        let coarse = TemplateSet::builtin(false);
        let fine = TemplateSet::builtin(true);
        let a = coarse.render_explain(&sample("x", None, SentimentLabel::Neutral)).unwrap();
        let b = fine.render_explain(&sample("x", Some("x"), SentimentLabel::Neutral)).unwrap();
        assert_ne!(a.system_text, b.system_text);
        assert_eq!(
            a.system_text.split_once("\n\n").unwrap().1,
            b.system_text.split_once("\n\n").unwrap().1
        );
        assert!(b.user_text.contains("Aspect: x"));
        assert!(!a.user_text.contains("Aspect:"));
    }

    #[test]
    fn granularity_mismatch_is_a_config_error() {
        let coarse = TemplateSet::builtin(false);
        let err = coarse
            .render_prediction(&sample("x", Some("x"), SentimentLabel::Neutral))
            .unwrap_err();
        assert!(matches!(err, TemplateError::Config(_)));
        let fine = TemplateSet::builtin(true);
        assert!(fine.render_explain(&sample("x", None, SentimentLabel::Neutral)).is_err());
    }

    #[test]
    fn placeholder_values_are_not_re_expanded() {
        let t = TemplateSet::builtin(false);
        let p = t
            .render_explain(&sample("literal {gold_label} here", None, SentimentLabel::Positive))
            .unwrap();
        assert!(p.user_text.contains("literal {gold_label} here"));
    }

    #[test]
    fn missing_placeholders_fail_validation() {
        let base = TemplateSet::builtin(false).base().clone();
        assert!(TemplateSet::new(false, base.clone(), "no slot".into(), "{text} {gold_label}".into()).is_err());
        assert!(TemplateSet::new(false, base.clone(), "{text}".into(), "{text}".into()).is_err());
        assert!(TemplateSet::new(false, base.clone(), "{text} {gold_label}".into(), "{text} {gold_label}".into()).is_err());
        assert!(TemplateSet::new(true, base.clone(), "{text}".into(), "{text} {gold_label}".into()).is_err());
        let mut broken = base;
        broken.reasoning_format = "Text Analysis: Conclusion: Image Analysis: Conflict Resolution:".into();
        assert!(TemplateSet::new(false, broken, "{text}".into(), "{text} {gold_label}".into()).is_err());
    }

    #[test]
    fn loads_from_directory() {
        let dir = tempfile::tempdir().unwrap();
        let src = Path::new(env!("CARGO_MANIFEST_DIR")).join("assets/templates");
        for entry in fs::read_dir(&src).unwrap() {
            let entry = entry.unwrap();
            fs::copy(entry.path(), dir.path().join(entry.file_name())).unwrap();
        }
        assert_eq!(TemplateSet::from_dir(dir.path(), true).unwrap(), TemplateSet::builtin(true));
        fs::write(dir.path().join("predict.txt"), "nothing here").unwrap();
        assert!(TemplateSet::from_dir(dir.path(), false).is_err());
    }
}
