use std::collections::HashMap;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use super::PipelineError;
use crate::gateway::Gateway;
use crate::metrics::{
    classification_metrics, embedding_similarity, generation_metrics, percent, ClassificationReport,
    GenerationReport,
};
use crate::model::SentimentLabel;

/// One model output on an evaluation sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub id: String,
    pub predicted_label: SentimentLabel,
    #[serde(default)]
    pub reasoning: String,
}

/// Gold label and optional reference reasoning. Corpus sample lines parse as
/// gold records too.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GoldRecord {
    pub id: String,
    pub gold_label: SentimentLabel,
    #[serde(default)]
    pub reference: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MetricSet {
    pub cls: bool,
    pub gen: bool,
}

impl MetricSet {
    pub const ALL: MetricSet = MetricSet { cls: true, gen: true };
}

impl FromStr for MetricSet {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut set = MetricSet { cls: false, gen: false };
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            match part {
                "cls" => set.cls = true,
                "gen" => set.gen = true,
                other => return Err(format!("unknown metric group {other:?} (cls, gen)")),
            }
        }
        if !set.cls && !set.gen {
            return Err("no metric group selected".into());
        }
        Ok(set)
    }
}

fn cell<S: Serializer>(v: &Option<f64>, s: S) -> Result<S::Ok, S::Error> {
    match v {
        Some(x) => s.serialize_f64(*x),
        None => s.serialize_str("n/a"),
    }
}

fn cell_de<'de, D: Deserializer<'de>>(d: D) -> Result<Option<f64>, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Cell {
        Num(f64),
        Text(String),
    }
    match Cell::deserialize(d)? {
        Cell::Num(x) => Ok(Some(x)),
        Cell::Text(t) if t == "n/a" => Ok(None),
        Cell::Text(t) => Err(serde::de::Error::custom(format!("bad score cell {t:?}"))),
    }
}

/// Percentages with one decimal under the usual table headings.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    #[serde(rename = "Acc", serialize_with = "cell", deserialize_with = "cell_de")]
    pub acc: Option<f64>,
    #[serde(rename = "w-F1", serialize_with = "cell", deserialize_with = "cell_de")]
    pub weighted_f1: Option<f64>,
    #[serde(rename = "m-F1", serialize_with = "cell", deserialize_with = "cell_de")]
    pub macro_f1: Option<f64>,
    #[serde(rename = "Sim", serialize_with = "cell", deserialize_with = "cell_de")]
    pub sim: Option<f64>,
    #[serde(rename = "Meteor", serialize_with = "cell", deserialize_with = "cell_de")]
    pub meteor: Option<f64>,
    #[serde(rename = "Bleu", serialize_with = "cell", deserialize_with = "cell_de")]
    pub bleu: Option<f64>,
    #[serde(rename = "Rouge-L", serialize_with = "cell", deserialize_with = "cell_de")]
    pub rouge_l: Option<f64>,
    #[serde(rename = "Dist-1", serialize_with = "cell", deserialize_with = "cell_de")]
    pub dist1: Option<f64>,
    #[serde(rename = "Dist-2", serialize_with = "cell", deserialize_with = "cell_de")]
    pub dist2: Option<f64>,
}

impl ScoreRow {
    pub fn from_reports(cls: Option<&ClassificationReport>, gen: Option<&GenerationReport>) -> Self {
        ScoreRow {
            acc: cls.map(|c| percent(c.accuracy)),
            weighted_f1: cls.map(|c| percent(c.weighted_f1)),
            macro_f1: cls.map(|c| percent(c.macro_f1)),
            sim: gen.and_then(|g| g.sim).map(percent),
            meteor: gen.map(|g| percent(g.meteor_lite)),
            bleu: gen.map(|g| percent(g.bleu)),
            rouge_l: gen.map(|g| percent(g.rouge_l)),
            dist1: gen.map(|g| percent(g.dist1)),
            dist2: gen.map(|g| percent(g.dist2)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model: String,
    pub count: usize,
    pub scores: ScoreRow,
    pub classification: Option<ClassificationReport>,
    pub generation: Option<GenerationReport>,
}

const EMBED_BATCH: usize = 64;

fn embed_all(gw: &Gateway, texts: &[String]) -> Result<Vec<Vec<f64>>, PipelineError> {
    let mut out = Vec::with_capacity(texts.len());
    for chunk in texts.chunks(EMBED_BATCH) {
        out.extend(gw.embed(chunk)?);
    }
    Ok(out)
}

/// Scores predictions against gold records matched by id. Every gold record
/// needs a prediction. Generation metrics use the gold records that carry a
/// reference; Sim needs an embedding gateway.
pub fn evaluate_predictions(
    model: &str,
    predictions: &[Prediction],
    gold: &[GoldRecord],
    metrics: MetricSet,
    embedder: Option<&Gateway>,
) -> Result<EvalReport, PipelineError> {
    if gold.is_empty() {
        return Err(PipelineError::Validation("no gold records to evaluate against".into()));
    }
    let by_id: HashMap<&str, &Prediction> = predictions.iter().map(|p| (p.id.as_str(), p)).collect();
    let mut pairs = Vec::with_capacity(gold.len());
    for g in gold {
        let p = by_id
            .get(g.id.as_str())
            .ok_or_else(|| PipelineError::Validation(format!("no prediction for sample {:?}", g.id)))?;
        pairs.push((g, *p));
    }
    let classification = if metrics.cls {
        let gl: Vec<SentimentLabel> = pairs.iter().map(|(g, _)| g.gold_label).collect();
        let pl: Vec<SentimentLabel> = pairs.iter().map(|(_, p)| p.predicted_label).collect();
        Some(classification_metrics(&gl, &pl)?)
    } else {
        None
    };
    let generation = if metrics.gen {
        let with_ref: Vec<(String, String)> = pairs
            .iter()
            .filter_map(|(g, p)| g.reference.as_ref().map(|r| (p.reasoning.clone(), r.clone())))
            .collect();
        if with_ref.is_empty() {
            log::warn!("{model}: no reference reasoning; generation metrics skipped");
            None
        } else {
            let (hyps, refs): (Vec<String>, Vec<String>) = with_ref.into_iter().unzip();
            let sim = match embedder {
                Some(gw) => Some(embedding_similarity(&embed_all(gw, &hyps)?, &embed_all(gw, &refs)?)?),
                None => None,
            };
            Some(generation_metrics(&hyps, &refs, sim.as_ref())?)
        }
    } else {
        None
    };
    Ok(EvalReport {
        model: model.to_string(),
        count: pairs.len(),
        scores: ScoreRow::from_reports(classification.as_ref(), generation.as_ref()),
        classification,
        generation,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use SentimentLabel::*;

    fn gold(id: &str, l: SentimentLabel, r: Option<&str>) -> GoldRecord {
        GoldRecord {
            id: id.into(),
            gold_label: l,
            reference: r.map(String::from),
        }
    }

    fn pred(id: &str, l: SentimentLabel, r: &str) -> Prediction {
        Prediction {
            id: id.into(),
            predicted_label: l,
            reasoning: r.into(),
        }
    }

    #[test]
    fn scores_and_na_cells() {
        let g = [gold("a", Positive, None), gold("b", Positive, None), gold("c", Negative, None)];
        let p = [pred("c", Negative, ""), pred("a", Positive, ""), pred("b", Negative, "")];
        let r = evaluate_predictions("m", &p, &g, MetricSet::ALL, None).unwrap();
        assert_eq!(r.scores.acc, Some(66.7));
        assert_eq!(r.scores.macro_f1, Some(44.4));
        assert!(r.generation.is_none());
        let json = serde_json::to_value(r.scores).unwrap();
        assert_eq!(json["Bleu"], "n/a");
        assert_eq!(json["w-F1"], 66.7);
        let back: ScoreRow = serde_json::from_value(json).unwrap();
        assert_eq!(back, r.scores);
    }

    #[test]
    fn generation_uses_references() {
        let g = [gold("a", Positive, Some("the cat sat"))];
        let p = [pred("a", Positive, "the cat sat")];
        let r = evaluate_predictions("m", &p, &g, "gen".parse().unwrap(), None).unwrap();
        assert!(r.classification.is_none());
        assert_eq!(r.scores.bleu, Some(100.0));
        assert_eq!(r.scores.sim, None);
    }

    #[test]
    fn missing_prediction_is_an_error() {
        let g = [gold("a", Positive, None)];
        assert!(evaluate_predictions("m", &[], &g, MetricSet::ALL, None).is_err());
        assert!("cls,xyz".parse::<MetricSet>().is_err());
        assert!("".parse::<MetricSet>().is_err());
    }
}
