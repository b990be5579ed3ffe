//! C ABI over the cotforge library.
//!
//! Every fallible function returns a [`CfStatus`]. On failure the message is
//! kept per thread and read back with [`cf_last_error`]. Objects cross the
//! boundary as opaque handles that the caller releases with the matching
//! `*_free` function. Strings handed out by the library are released with
//! [`cf_string_free`]. Panics never unwind into C; they become
//! [`CfStatus::Panic`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};

mod dataset;
mod numeric;
mod parse;

pub use dataset::*;
pub use numeric::*;
pub use parse::*;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CfStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    Io = 3,
    Format = 4,
    Validation = 5,
    Conflict = 6,
    Shape = 7,
    Domain = 8,
    Panic = 99,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CfLabel {
    Negative = 0,
    Neutral = 1,
    Positive = 2,
}

impl From<cotforge::model::SentimentLabel> for CfLabel {
    fn from(l: cotforge::model::SentimentLabel) -> Self {
        use cotforge::model::SentimentLabel as L;
        match l {
            L::Negative => CfLabel::Negative,
            L::Neutral => CfLabel::Neutral,
            L::Positive => CfLabel::Positive,
        }
    }
}

pub(crate) struct FfiError {
    status: CfStatus,
    message: String,
}

impl FfiError {
    pub(crate) fn new(status: CfStatus, message: impl Into<String>) -> Self {
        FfiError {
            status,
            message: message.into(),
        }
    }
}

impl From<cotforge::model::ModelError> for FfiError {
    fn from(e: cotforge::model::ModelError) -> Self {
        use cotforge::model::ModelError as E;
        let status = match &e {
            E::Io { .. } => CfStatus::Io,
            E::Parse { .. } | E::InvalidLabel(_) => CfStatus::Format,
            E::DuplicateId(_) | E::Validation(_) => CfStatus::Validation,
            E::Conflict(_) => CfStatus::Conflict,
        };
        FfiError::new(status, e.to_string())
    }
}

impl From<cotforge::distill::DistillError> for FfiError {
    fn from(e: cotforge::distill::DistillError) -> Self {
        use cotforge::distill::DistillError as E;
        let status = match &e {
            E::Shape(_) => CfStatus::Shape,
            E::Io(_) => CfStatus::Io,
            E::Format(_) => CfStatus::Format,
            E::Domain(_) | E::NonFinite { .. } => CfStatus::Domain,
        };
        FfiError::new(status, e.to_string())
    }
}

impl From<cotforge::metrics::MetricError> for FfiError {
    fn from(e: cotforge::metrics::MetricError) -> Self {
        use cotforge::metrics::MetricError as E;
        let status = match &e {
            E::Shape(_) => CfStatus::Shape,
            E::Invalid(_) => CfStatus::Domain,
        };
        FfiError::new(status, e.to_string())
    }
}

pub(crate) type FfiResult<T> = Result<T, FfiError>;

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(message: &str) {
    // Interior NULs would truncate the message on the C side anyway.
    let c = CString::new(message.replace('\0', " ")).expect("no interior nul");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

/// Runs `f`, records any error or panic, and maps it to a status.
pub(crate) fn guard(f: impl FnOnce() -> FfiResult<()>) -> CfStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => CfStatus::Ok,
        Ok(Err(e)) => {
            set_last_error(&e.message);
            e.status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_last_error(&format!("panic: {msg}"));
            CfStatus::Panic
        }
    }
}

pub(crate) unsafe fn cstr<'a>(p: *const c_char, name: &str) -> FfiResult<&'a str> {
    if p.is_null() {
        return Err(FfiError::new(CfStatus::NullArgument, format!("{name} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| FfiError::new(CfStatus::InvalidUtf8, format!("{name} is not valid UTF-8")))
}

/// A null pointer is accepted for an empty slice.
pub(crate) unsafe fn slice<'a, T>(p: *const T, len: usize, name: &str) -> FfiResult<&'a [T]> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(FfiError::new(CfStatus::NullArgument, format!("{name} is null")));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

pub(crate) unsafe fn out<'a, T>(p: *mut T, name: &str) -> FfiResult<&'a mut T> {
    p.as_mut()
        .ok_or_else(|| FfiError::new(CfStatus::NullArgument, format!("{name} is null")))
}

pub(crate) unsafe fn handle<'a, T>(p: *const T, name: &str) -> FfiResult<&'a T> {
    p.as_ref()
        .ok_or_else(|| FfiError::new(CfStatus::NullArgument, format!("{name} is null")))
}

pub(crate) fn owned_string(s: &str) -> *mut c_char {
    CString::new(s.replace('\0', " ")).expect("no interior nul").into_raw()
}

/// Message of the last failed call on this thread, or null. The pointer
/// stays valid until the next `cf_` call on the same thread.
#[no_mangle]
pub extern "C" fn cf_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

/// Static name of a status code.
#[no_mangle]
pub extern "C" fn cf_status_name(status: CfStatus) -> *const c_char {
    let s: &'static CStr = match status {
        CfStatus::Ok => c"ok",
        CfStatus::NullArgument => c"null_argument",
        CfStatus::InvalidUtf8 => c"invalid_utf8",
        CfStatus::Io => c"io",
        CfStatus::Format => c"format",
        CfStatus::Validation => c"validation",
        CfStatus::Conflict => c"conflict",
        CfStatus::Shape => c"shape",
        CfStatus::Domain => c"domain",
        CfStatus::Panic => c"panic",
    };
    s.as_ptr()
}

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn cf_version() -> *const c_char {
    static VERSION: &CStr = match CStr::from_bytes_with_nul(concat!(env!("CARGO_PKG_VERSION"), "\0").as_bytes()) {
        Ok(v) => v,
        Err(_) => panic!("version has no interior nul"),
    };
    VERSION.as_ptr()
}

/// Releases a string returned by this library. Null is ignored.
///
/// # Safety
/// `s` must come from this library and must not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn cf_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}
