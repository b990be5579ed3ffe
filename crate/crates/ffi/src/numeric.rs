use std::ffi::c_char;

use cotforge::builder::count_consistency;
use cotforge::distill::losses::{kl_divergence, temp_softmax};
use cotforge::metrics::{bleu, classification_metrics, meteor_lite, rouge_l, tokenize};
use cotforge::model::SentimentLabel;

use crate::{cstr, guard, out, slice, CfStatus, FfiError, FfiResult};

#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct CfClassification {
    pub total: usize,
    pub accuracy: f64,
    pub weighted_f1: f64,
    pub macro_f1: f64,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CfCountCheck {
    pub expected: usize,
    pub reported: usize,
    pub diff: usize,
    pub ok: bool,
}

/// `softmax(z / tau)` into `out_probs`, which holds `n` values.
///
/// # Safety
/// `z` and `out_probs` must point to `n` doubles.
#[no_mangle]
pub unsafe extern "C" fn cf_softmax(z: *const f64, n: usize, tau: f64, out_probs: *mut f64) -> CfStatus {
    guard(|| {
        let z = slice(z, n, "z")?;
        if n > 0 && out_probs.is_null() {
            return Err(FfiError::new(CfStatus::NullArgument, "out_probs is null"));
        }
        let p = temp_softmax(z, tau)?;
        if n > 0 {
            std::slice::from_raw_parts_mut(out_probs, n).copy_from_slice(&p);
        }
        Ok(())
    })
}

/// `KL(p || q)` in nats over `n` outcomes.
///
/// # Safety
/// `p` and `q` must point to `n` doubles and `out_kl` be writable.
#[no_mangle]
pub unsafe extern "C" fn cf_kl_divergence(p: *const f64, q: *const f64, n: usize, out_kl: *mut f64) -> CfStatus {
    guard(|| {
        let slot = out(out_kl, "out_kl")?;
        *slot = kl_divergence(slice(p, n, "p")?, slice(q, n, "q")?)?;
        Ok(())
    })
}

unsafe fn text_metric(
    hyp: *const c_char,
    reference: *const c_char,
    out_score: *mut f64,
    f: impl FnOnce(&[String], &[String]) -> f64,
) -> CfStatus {
    guard(|| {
        let slot = out(out_score, "out_score")?;
        let h = tokenize(cstr(hyp, "hypothesis")?);
        let r = tokenize(cstr(reference, "reference")?);
        *slot = f(&h, &r);
        Ok(())
    })
}

/// Sentence BLEU-4 of two texts after the library's tokenization.
///
/// # Safety
/// Both strings must be NUL-terminated and `out_score` writable.
#[no_mangle]
pub unsafe extern "C" fn cf_bleu(hyp: *const c_char, reference: *const c_char, out_score: *mut f64) -> CfStatus {
    text_metric(hyp, reference, out_score, |h, r| bleu(h, &[r.to_vec()]))
}

/// # Safety
/// Both strings must be NUL-terminated and `out_score` writable.
#[no_mangle]
pub unsafe extern "C" fn cf_rouge_l(hyp: *const c_char, reference: *const c_char, out_score: *mut f64) -> CfStatus {
    text_metric(hyp, reference, out_score, rouge_l)
}

/// # Safety
/// Both strings must be NUL-terminated and `out_score` writable.
#[no_mangle]
pub unsafe extern "C" fn cf_meteor(hyp: *const c_char, reference: *const c_char, out_score: *mut f64) -> CfStatus {
    text_metric(hyp, reference, out_score, meteor_lite)
}

fn labels(raw: &[i32], name: &str) -> FfiResult<Vec<SentimentLabel>> {
    raw.iter()
        .enumerate()
        .map(|(i, &v)| {
            usize::try_from(v)
                .ok()
                .and_then(SentimentLabel::from_index)
                .ok_or_else(|| FfiError::new(CfStatus::Domain, format!("{name}[{i}] = {v} is not a label")))
        })
        .collect()
}

/// Accuracy and F1 scores over labels given as `CfLabel` values.
///
/// # Safety
/// `gold` and `pred` must point to `n` ints and `out_report` be writable.
#[no_mangle]
pub unsafe extern "C" fn cf_classification(
    gold: *const i32,
    pred: *const i32,
    n: usize,
    out_report: *mut CfClassification,
) -> CfStatus {
    guard(|| {
        let slot = out(out_report, "out_report")?;
        let g = labels(slice(gold, n, "gold")?, "gold")?;
        let p = labels(slice(pred, n, "pred")?, "pred")?;
        let r = classification_metrics(&g, &p)?;
        *slot = CfClassification {
            total: r.total,
            accuracy: r.accuracy,
            weighted_f1: r.weighted_f1,
            macro_f1: r.macro_f1,
        };
        Ok(())
    })
}

/// Compares a reported training-set size with `n + round(accuracy * n)`.
///
/// # Safety
/// `out_check` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cf_count_consistency(
    n: usize,
    accuracy: f64,
    reported: usize,
    tolerance: usize,
    out_check: *mut CfCountCheck,
) -> CfStatus {
    guard(|| {
        let slot = out(out_check, "out_check")?;
        if !(0.0..=1.0).contains(&accuracy) {
            return Err(FfiError::new(CfStatus::Domain, format!("accuracy {accuracy} is outside [0, 1]")));
        }
        let c = count_consistency(n, accuracy, reported, tolerance);
        *slot = CfCountCheck {
            expected: c.expected,
            reported: c.reported,
            diff: c.diff,
            ok: c.ok,
        };
        Ok(())
    })
}
