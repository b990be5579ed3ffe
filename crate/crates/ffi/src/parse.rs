use std::ffi::c_char;

use cotforge::model::{ReasoningChain, SentimentLabel};
use cotforge::parser::{parse, Defect};

use crate::{cstr, guard, handle, out, owned_string, CfLabel, CfStatus, FfiError};

/// Opaque result of parsing one model response.
pub struct CfParse(Result<(ReasoningChain, SentimentLabel), Vec<Defect>>);

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CfSection {
    TextAnalysis = 0,
    ImageAnalysis = 1,
    ConflictResolution = 2,
    Conclusion = 3,
}

/// Parses a raw response. Malformed text is not an error: the handle then
/// reports its defects.
///
/// # Safety
/// `raw` must be a NUL-terminated string and `out_parse` writable.
#[no_mangle]
pub unsafe extern "C" fn cf_parse(raw: *const c_char, out_parse: *mut *mut CfParse) -> CfStatus {
    guard(|| {
        let slot = out(out_parse, "out_parse")?;
        let outcome = parse(cstr(raw, "raw")?);
        *slot = Box::into_raw(Box::new(CfParse(outcome.into_result())));
        Ok(())
    })
}

/// True when the response parsed into a chain and a label.
///
/// # Safety
/// `p` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn cf_parse_ok(p: *const CfParse) -> bool {
    p.as_ref().is_some_and(|p| p.0.is_ok())
}

unsafe fn parsed<'a>(p: *const CfParse) -> Result<&'a (ReasoningChain, SentimentLabel), FfiError> {
    handle(p, "parse")?
        .0
        .as_ref()
        .map_err(|d| FfiError::new(CfStatus::Validation, format!("response did not parse ({} defects)", d.len())))
}

/// # Safety
/// `p` must be a live handle and `out_label` writable.
#[no_mangle]
pub unsafe extern "C" fn cf_parse_label(p: *const CfParse, out_label: *mut CfLabel) -> CfStatus {
    guard(|| {
        let slot = out(out_label, "out_label")?;
        *slot = parsed(p)?.1.into();
        Ok(())
    })
}

/// Copies one section's text; free it with `cf_string_free`.
///
/// # Safety
/// `p` must be a live handle and `out_text` writable.
#[no_mangle]
pub unsafe extern "C" fn cf_parse_section(p: *const CfParse, section: CfSection, out_text: *mut *mut c_char) -> CfStatus {
    guard(|| {
        let slot = out(out_text, "out_text")?;
        let chain = &parsed(p)?.0;
        let text = match section {
            CfSection::TextAnalysis => &chain.text_analysis,
            CfSection::ImageAnalysis => &chain.image_analysis,
            CfSection::ConflictResolution => &chain.conflict_resolution,
            CfSection::Conclusion => &chain.conclusion,
        };
        *slot = owned_string(text);
        Ok(())
    })
}

/// Number of defects; 0 for a successful parse or a null handle.
///
/// # Safety
/// `p` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn cf_parse_defect_count(p: *const CfParse) -> usize {
    p.as_ref().map_or(0, |p| p.0.as_ref().err().map_or(0, Vec::len))
}

/// Short description of defect `index`, such as `missing-section(conclusion)`.
///
/// # Safety
/// `p` must be a live handle and `out_text` writable.
#[no_mangle]
pub unsafe extern "C" fn cf_parse_defect(p: *const CfParse, index: usize, out_text: *mut *mut c_char) -> CfStatus {
    guard(|| {
        let slot = out(out_text, "out_text")?;
        let defects = handle(p, "parse")?.0.as_ref().err().map_or(&[][..], Vec::as_slice);
        let d = defects.get(index).ok_or_else(|| {
            FfiError::new(CfStatus::Shape, format!("defect {index} out of range ({} defects)", defects.len()))
        })?;
        *slot = owned_string(&d.to_string());
        Ok(())
    })
}

/// Releases a parse handle. Null is ignored.
///
/// # Safety
/// `p` must come from this library and must not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn cf_parse_free(p: *mut CfParse) {
    if !p.is_null() {
        drop(Box::from_raw(p));
    }
}
