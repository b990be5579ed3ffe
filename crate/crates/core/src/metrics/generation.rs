use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};

use super::{tokenize, MetricError};

const BLEU_ORDER: usize = 4;

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
struct BleuStats {
    matches: [usize; BLEU_ORDER],
    totals: [usize; BLEU_ORDER],
    hyp_len: usize,
    ref_len: usize,
}

impl BleuStats {
    fn sentence(hyp: &[String], refs: &[Vec<String>]) -> Self {
        let mut s = BleuStats {
            hyp_len: hyp.len(),
            ..Default::default()
        };
        // Closest reference length, ties to the shorter one.
        s.ref_len = refs
            .iter()
            .map(Vec::len)
            .min_by_key(|&r| (r.abs_diff(hyp.len()), r))
            .unwrap_or(0);
        for n in 1..=BLEU_ORDER {
            let hyp_counts = ngram_counts(hyp, n);
            let mut max_ref: HashMap<&[String], usize> = HashMap::new();
            for r in refs {
                for (g, c) in ngram_counts(r, n) {
                    let e = max_ref.entry(g).or_insert(0);
                    *e = (*e).max(c);
                }
            }
            s.matches[n - 1] = hyp_counts
                .iter()
                .map(|(g, c)| (*c).min(max_ref.get(g).copied().unwrap_or(0)))
                .sum();
            s.totals[n - 1] = hyp.len().saturating_sub(n - 1);
        }
        s
    }

    fn add(&mut self, o: &BleuStats) {
        for i in 0..BLEU_ORDER {
            self.matches[i] += o.matches[i];
            self.totals[i] += o.totals[i];
        }
        self.hyp_len += o.hyp_len;
        self.ref_len += o.ref_len;
    }

    /// BLEU-4 with brevity penalty. Zero higher-order matches are smoothed
    /// to `1 / (total + 1)`; zero unigram matches give 0.
    fn score(&self) -> f64 {
        if self.hyp_len == 0 || self.matches[0] == 0 {
            return 0.0;
        }
        let mut log_sum = 0.0;
        for n in 0..BLEU_ORDER {
            let p = if self.matches[n] == 0 {
                1.0 / (self.totals[n] as f64 + 1.0)
            } else {
                self.matches[n] as f64 / self.totals[n] as f64
            };
            log_sum += p.ln() / BLEU_ORDER as f64;
        }
        let bp = if self.hyp_len < self.ref_len {
            (1.0 - self.ref_len as f64 / self.hyp_len as f64).exp()
        } else {
            1.0
        };
        bp * log_sum.exp()
    }
}

/// Sentence-level BLEU-4 of a tokenized hypothesis against references.
pub fn bleu(hypothesis: &[String], references: &[Vec<String>]) -> f64 {
    BleuStats::sentence(hypothesis, references).score()
}

/// Corpus-level BLEU-4: n-gram statistics summed over all pairs first.
pub fn corpus_bleu(pairs: &[(Vec<String>, Vec<Vec<String>>)]) -> f64 {
    let mut total = BleuStats::default();
    for (h, r) in pairs {
        total.add(&BleuStats::sentence(h, r));
    }
    total.score()
}

fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// ROUGE-L F-measure (beta = 1) from the longest common subsequence.
pub fn rouge_l(hypothesis: &[String], reference: &[String]) -> f64 {
    if hypothesis.is_empty() && reference.is_empty() {
        log::warn!("rouge_l: both hypothesis and reference are empty");
        return 0.0;
    }
    let lcs = lcs_len(hypothesis, reference);
    if lcs == 0 {
        return 0.0;
    }
    let p = lcs as f64 / hypothesis.len() as f64;
    let r = lcs as f64 / reference.len() as f64;
    2.0 * p * r / (p + r)
}

/// Light suffix-stripping stemmer used by METEOR-lite.
pub fn stem(word: &str) -> &str {
    for suffix in ["ingly", "edly", "ing", "ed", "es", "ly", "s"] {
        if let Some(base) = word.strip_suffix(suffix) {
            if base.chars().count() >= 3 {
                return base;
            }
        }
    }
    word
}

const METEOR_ALPHA: f64 = 0.9;
const METEOR_BETA: f64 = 3.0;
const METEOR_GAMMA: f64 = 0.5;

/// METEOR without the synonym stage: unigrams aligned on exact matches,
/// then on stems, scored with a recall-weighted harmonic mean and a
/// fragmentation penalty.
pub fn meteor_lite(hypothesis: &[String], reference: &[String]) -> f64 {
    if reference.is_empty() {
        log::warn!("meteor_lite: empty reference");
        return 0.0;
    }
    let mut hyp_to_ref: Vec<Option<usize>> = vec![None; hypothesis.len()];
    let mut ref_used = vec![false; reference.len()];
    let stages: [fn(&str, &str) -> bool; 2] = [|a, b| a == b, |a, b| stem(a) == stem(b)];
    for same in stages {
        for (i, h) in hypothesis.iter().enumerate() {
            if hyp_to_ref[i].is_some() {
                continue;
            }
            if let Some(j) = (0..reference.len()).find(|&j| !ref_used[j] && same(h, &reference[j])) {
                hyp_to_ref[i] = Some(j);
                ref_used[j] = true;
            }
        }
    }
    let pairs: Vec<(usize, usize)> = hyp_to_ref
        .iter()
        .enumerate()
        .filter_map(|(i, j)| j.map(|j| (i, j)))
        .collect();
    let m = pairs.len();
    if m == 0 {
        return 0.0;
    }
    let chunks = 1 + pairs
        .windows(2)
        .filter(|w| !(w[1].0 == w[0].0 + 1 && w[1].1 == w[0].1 + 1))
        .count();
    let p = m as f64 / hypothesis.len() as f64;
    let r = m as f64 / reference.len() as f64;
    let fmean = p * r / (METEOR_ALPHA * p + (1.0 - METEOR_ALPHA) * r);
    let penalty = METEOR_GAMMA * (chunks as f64 / m as f64).powf(METEOR_BETA);
    fmean * (1.0 - penalty)
}

/// Unique n-grams over total n-grams, pooled across all hypotheses.
pub fn distinct_n(hypotheses: &[Vec<String>], n: usize) -> Result<f64, MetricError> {
    if !(1..=2).contains(&n) {
        return Err(MetricError::Invalid(format!("distinct-n supports n = 1 or 2, got {n}")));
    }
    let mut unique: HashSet<&[String]> = HashSet::new();
    let mut total = 0usize;
    for h in hypotheses {
        if h.len() >= n {
            for w in h.windows(n) {
                unique.insert(w);
                total += 1;
            }
        }
    }
    if total == 0 {
        log::warn!("distinct-{n}: no {n}-grams in the pool");
        return Ok(0.0);
    }
    Ok(unique.len() as f64 / total as f64)
}

/// Cosine similarity; `None` when either vector is all zeros.
pub fn cosine(a: &[f64], b: &[f64]) -> Result<Option<f64>, MetricError> {
    if a.len() != b.len() {
        return Err(MetricError::Shape(format!("vector dims {} vs {}", a.len(), b.len())));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Ok(None);
    }
    Ok(Some((dot / (na * nb)).clamp(-1.0, 1.0)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityResult {
    pub mean: Option<f64>,
    pub per_sample: Vec<Option<f64>>,
    pub skipped: usize,
}

/// Pairwise cosine of hypothesis and reference embeddings. Pairs with a zero
/// vector are skipped with a warning.
pub fn embedding_similarity(
    hypotheses: &[Vec<f64>],
    references: &[Vec<f64>],
) -> Result<SimilarityResult, MetricError> {
    if hypotheses.len() != references.len() {
        return Err(MetricError::Shape(format!(
            "{} hypothesis vectors vs {} reference vectors",
            hypotheses.len(),
            references.len()
        )));
    }
    let per_sample = hypotheses
        .iter()
        .zip(references)
        .map(|(h, r)| cosine(h, r))
        .collect::<Result<Vec<_>, _>>()?;
    let valid: Vec<f64> = per_sample.iter().flatten().copied().collect();
    let skipped = per_sample.len() - valid.len();
    if skipped > 0 {
        log::warn!("similarity: skipped {skipped} pair(s) with a zero vector");
    }
    let mean = (!valid.is_empty()).then(|| valid.iter().sum::<f64>() / valid.len() as f64);
    Ok(SimilarityResult {
        mean,
        per_sample,
        skipped,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleScores {
    pub bleu: f64,
    pub rouge_l: f64,
    pub meteor_lite: f64,
    pub sim: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationReport {
    pub count: usize,
    pub sim: Option<f64>,
    pub meteor_lite: f64,
    /// Corpus-level BLEU-4.
    pub bleu: f64,
    /// Mean sentence-level BLEU-4.
    pub bleu_sentence: f64,
    pub rouge_l: f64,
    pub dist1: f64,
    pub dist2: f64,
    pub per_sample: Vec<SampleScores>,
}

/// Scores generated reasoning against single references, with optional
/// precomputed embedding similarities.
pub fn generation_metrics(
    hypotheses: &[String],
    references: &[String],
    similarity: Option<&SimilarityResult>,
) -> Result<GenerationReport, MetricError> {
    if hypotheses.len() != references.len() {
        return Err(MetricError::Shape(format!(
            "{} hypotheses vs {} references",
            hypotheses.len(),
            references.len()
        )));
    }
    if hypotheses.is_empty() {
        return Err(MetricError::Invalid("no hypotheses to score".into()));
    }
    if let Some(s) = similarity {
        if s.per_sample.len() != hypotheses.len() {
            return Err(MetricError::Shape("similarity count differs from hypotheses".into()));
        }
    }
    let hyp_tokens: Vec<Vec<String>> = hypotheses.iter().map(|h| tokenize(h)).collect();
    let ref_tokens: Vec<Vec<String>> = references.iter().map(|r| tokenize(r)).collect();
    let per_sample: Vec<SampleScores> = hyp_tokens
        .iter()
        .zip(&ref_tokens)
        .enumerate()
        .map(|(i, (h, r))| SampleScores {
            bleu: bleu(h, std::slice::from_ref(r)),
            rouge_l: rouge_l(h, r),
            meteor_lite: meteor_lite(h, r),
            sim: similarity.and_then(|s| s.per_sample[i]),
        })
        .collect();
    let n = per_sample.len() as f64;
    let mean = |f: fn(&SampleScores) -> f64| per_sample.iter().map(f).sum::<f64>() / n;
    let pairs: Vec<(Vec<String>, Vec<Vec<String>>)> = hyp_tokens
        .iter()
        .cloned()
        .zip(ref_tokens.iter().map(|r| vec![r.clone()]))
        .collect();
    Ok(GenerationReport {
        count: per_sample.len(),
        sim: similarity.and_then(|s| s.mean),
        meteor_lite: mean(|s| s.meteor_lite),
        bleu: corpus_bleu(&pairs),
        bleu_sentence: mean(|s| s.bleu),
        rouge_l: mean(|s| s.rouge_l),
        dist1: distinct_n(&hyp_tokens, 1)?,
        dist2: distinct_n(&hyp_tokens, 2)?,
        per_sample,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(s: &str) -> Vec<String> {
        tokenize(s)
    }

    #[test]
    fn bleu_identity_and_empty() {
        let h = t("the cat sat on the mat");
        assert!((bleu(&h, std::slice::from_ref(&h)) - 1.0).abs() < 1e-12);
        assert_eq!(bleu(&[], std::slice::from_ref(&h)), 0.0);
        let short = t("a");
        assert!((bleu(&short, std::slice::from_ref(&short)) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn bleu_hand_enumerated_example() {
        // p1 = 3/4, p2 = 2/3, p3 = 1/2, p4 = 0 matches of 1 -> 1/2, BP = 1.
        let expected = (0.75f64 * (2.0 / 3.0) * 0.5 * 0.5).powf(0.25);
        let got = bleu(&t("a b c d"), &[t("a b c e")]);
        assert!((got - expected).abs() < 1e-12, "{got} vs {expected}");
        assert!((got - 0.594_603_557_501_360_5).abs() < 1e-12);
    }

    #[test]
    fn bleu_brevity_penalty_and_clipping() {
        let got = bleu(&t("a b"), &[t("a b c d")]);
        assert!((got - (1.0f64 - 2.0).exp()).abs() < 1e-12);
        // "the the the" against "the cat": unigram matches clipped to 1.
        let s = BleuStats::sentence(&t("the the the"), &[t("the cat")]);
        assert_eq!(s.matches[0], 1);
    }

    #[test]
    fn corpus_bleu_pools_statistics() {
        let pairs = vec![
            (t("a b c d"), vec![t("a b c e")]),
            (t("x y"), vec![t("x y")]),
        ];
        let c = corpus_bleu(&pairs);
        // 1-grams 5/6, 2-grams 3/4, 3-grams 1/2, 4-grams 0/1 smoothed to 1/2.
        let expected = ((5.0 / 6.0f64) * 0.75 * 0.5 * 0.5).powf(0.25);
        assert!((c - expected).abs() < 1e-12);
    }

    #[test]
    fn rouge_examples() {
        assert!((rouge_l(&t("a b c"), &t("a c b")) - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(rouge_l(&t("a b"), &t("a b")), 1.0);
        assert_eq!(rouge_l(&t("a b"), &t("c d")), 0.0);
        assert_eq!(rouge_l(&[], &[]), 0.0);
    }

    #[test]
    fn meteor_examples() {
        // P = 1, R = 3/4, one chunk of three matches.
        let fmean = 0.75 / (0.9 + 0.1 * 0.75);
        let expected = fmean * (1.0 - 0.5 * (1.0f64 / 3.0).powi(3));
        let got = meteor_lite(&t("the cat sat"), &t("the cat sat down"));
        assert!((got - expected).abs() < 1e-12);
        assert!((got - 0.754_985_754_985_755).abs() < 1e-12);

        let same = t("one two three four five");
        assert!(meteor_lite(&same, &same) >= 0.99);
        assert_eq!(meteor_lite(&t("x y"), &t("a b")), 0.0);
        assert_eq!(meteor_lite(&t("x"), &[]), 0.0);
        // Stem stage aligns "cats" with "cat".
        assert_eq!(stem("cats"), "cat");
        assert!(meteor_lite(&t("cats"), &t("cat")) > 0.0);
        assert!(meteor_lite(&t("walked home"), &t("walking home")) > 0.4);
    }

    #[test]
    fn meteor_fragmentation_penalty() {
        // Reordered matches form more chunks and score lower.
        let ordered = meteor_lite(&t("a b c d"), &t("a b c d"));
        let shuffled = meteor_lite(&t("d c b a"), &t("a b c d"));
        assert!(shuffled < ordered);
    }

    #[test]
    fn distinct_examples() {
        assert!((distinct_n(&[t("a a b")], 1).unwrap() - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(distinct_n(&[t("a b")], 2).unwrap(), 1.0);
        assert_eq!(distinct_n(&[], 1).unwrap(), 0.0);
        assert!(distinct_n(&[t("a")], 3).is_err());
        let mut last = f64::INFINITY;
        for copies in 1..6 {
            let pool = vec![t("a b c b"); copies];
            let d = distinct_n(&pool, 1).unwrap();
            assert!(d < last);
            last = d;
        }
    }

    #[test]
    fn cosine_examples() {
        assert!((cosine(&[1.0, 2.0], &[1.0, 2.0]).unwrap().unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 3.0]).unwrap(), Some(0.0));
        assert!((cosine(&[1.0, 2.0], &[-2.0, -4.0]).unwrap().unwrap() + 1.0).abs() < 1e-12);
        assert_eq!(cosine(&[0.0, 0.0], &[1.0, 1.0]).unwrap(), None);
        assert!(cosine(&[1.0], &[1.0, 2.0]).is_err());
        let s = embedding_similarity(&[vec![1.0, 0.0], vec![0.0, 0.0]], &[vec![1.0, 0.0], vec![1.0, 1.0]]).unwrap();
        assert_eq!(s.mean, Some(1.0));
        assert_eq!(s.skipped, 1);
    }

    #[test]
    fn generation_report_is_case_and_whitespace_invariant() {
        let a = generation_metrics(&["The cat sat.  ".into()], &["the cat sat down".into()], None).unwrap();
        let b = generation_metrics(&["the CAT sat.".into()], &["The cat sat down   ".into()], None).unwrap();
        assert_eq!(a, b);
        assert!(a.bleu > 0.0 && a.bleu <= 1.0);
        assert!(generation_metrics(&[], &[], None).is_err());
    }
}
