use serde::{Deserialize, Serialize};

use super::evaluate::ScoreRow;
use crate::builder::BuildReport;

/// Split sizes plus the size of the assembled training set.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusRow {
    #[serde(rename = "Dataset")]
    pub dataset: String,
    #[serde(rename = "Train")]
    pub train: usize,
    #[serde(rename = "Dev")]
    pub dev: usize,
    #[serde(rename = "Test")]
    pub test: usize,
    #[serde(rename = "Train+")]
    pub train_plus: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub model: String,
    pub count: usize,
    pub scores: ScoreRow,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub corpus: CorpusRow,
    pub build: BuildReport,
    pub rows: Vec<ReportRow>,
}

fn fmt_cell(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.1}"))
}

fn table(headers: &[&str], rows: &[(String, Vec<String>)]) -> String {
    let first = rows.iter().map(|r| r.0.len()).max().unwrap_or(0).max(headers[0].len());
    let mut out = format!("{:<first$}", headers[0]);
    for h in &headers[1..] {
        out.push_str(&format!("  {h:>8}"));
    }
    out.push('\n');
    for (name, cells) in rows {
        out.push_str(&format!("{name:<first$}"));
        for c in cells {
            out.push_str(&format!("  {c:>8}"));
        }
        out.push('\n');
    }
    out
}

pub fn classification_table(rows: &[ReportRow]) -> String {
    let body: Vec<(String, Vec<String>)> = rows
        .iter()
        .map(|r| {
            let s = &r.scores;
            (r.model.clone(), vec![fmt_cell(s.acc), fmt_cell(s.weighted_f1), fmt_cell(s.macro_f1)])
        })
        .collect();
    table(&["Model", "Acc", "w-F1", "m-F1"], &body)
}

pub fn generation_table(rows: &[ReportRow]) -> String {
    let body: Vec<(String, Vec<String>)> = rows
        .iter()
        .map(|r| {
            let s = &r.scores;
            let cells = [s.sim, s.meteor, s.bleu, s.rouge_l, s.dist1, s.dist2];
            (r.model.clone(), cells.into_iter().map(fmt_cell).collect())
        })
        .collect();
    table(&["Model", "Sim", "Meteor", "Bleu", "Rouge-L", "Dist-1", "Dist-2"], &body)
}

impl Report {
    pub fn render(&self) -> String {
        let c = &self.corpus;
        let counts = table(
            &["Dataset", "Train", "Dev", "Test", "Train+"],
            &[(
                c.dataset.clone(),
                [c.train, c.dev, c.test, c.train_plus].iter().map(usize::to_string).collect(),
            )],
        );
        format!(
            "Dataset statistics\n{counts}\nBuild\n{}\nClassification (test)\n{}\nReasoning generation (test)\n{}",
            self.build.table(),
            classification_table(&self.rows),
            generation_table(&self.rows)
        )
    }
}
