use std::ffi::c_char;
use std::path::Path;

use cotforge::model::{load_dataset, merge_datasets, save_dataset, DatasetRole, ReasoningDataset};

use crate::{cstr, guard, handle, out, CfStatus};

/// Opaque reasoning dataset.
pub struct CfDataset(ReasoningDataset);

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CfRole {
    TeacherStage1 = 0,
    TeacherStage2 = 1,
    TeacherFull = 2,
    AssistantAug = 3,
    Full = 4,
}

impl From<DatasetRole> for CfRole {
    fn from(r: DatasetRole) -> Self {
        match r {
            DatasetRole::TeacherStage1 => CfRole::TeacherStage1,
            DatasetRole::TeacherStage2 => CfRole::TeacherStage2,
            DatasetRole::TeacherFull => CfRole::TeacherFull,
            DatasetRole::AssistantAug => CfRole::AssistantAug,
            DatasetRole::Full => CfRole::Full,
        }
    }
}

/// Loads a JSON Lines dataset and its `.meta.json` sidecar.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out_dataset` writable.
#[no_mangle]
pub unsafe extern "C" fn cf_dataset_load(path: *const c_char, out_dataset: *mut *mut CfDataset) -> CfStatus {
    guard(|| {
        let slot = out(out_dataset, "out_dataset")?;
        let ds = load_dataset(Path::new(cstr(path, "path")?))?;
        *slot = Box::into_raw(Box::new(CfDataset(ds)));
        Ok(())
    })
}

/// Union of two datasets. The inputs are left untouched.
///
/// # Safety
/// `a` and `b` must be live handles and `out_dataset` writable.
#[no_mangle]
pub unsafe extern "C" fn cf_dataset_merge(
    a: *const CfDataset,
    b: *const CfDataset,
    out_dataset: *mut *mut CfDataset,
) -> CfStatus {
    guard(|| {
        let slot = out(out_dataset, "out_dataset")?;
        let merged = merge_datasets(&handle(a, "a")?.0, &handle(b, "b")?.0)?;
        *slot = Box::into_raw(Box::new(CfDataset(merged)));
        Ok(())
    })
}

/// Writes the dataset and its sidecar.
///
/// # Safety
/// `dataset` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn cf_dataset_save(dataset: *const CfDataset, path: *const c_char) -> CfStatus {
    guard(|| {
        save_dataset(&handle(dataset, "dataset")?.0, Path::new(cstr(path, "path")?))?;
        Ok(())
    })
}

/// Number of entries; 0 for a null handle.
///
/// # Safety
/// `dataset` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn cf_dataset_len(dataset: *const CfDataset) -> usize {
    dataset.as_ref().map_or(0, |d| d.0.len())
}

/// # Safety
/// `dataset` must be a live handle and `out_role` writable.
#[no_mangle]
pub unsafe extern "C" fn cf_dataset_role(dataset: *const CfDataset, out_role: *mut CfRole) -> CfStatus {
    guard(|| {
        let slot = out(out_role, "out_role")?;
        *slot = handle(dataset, "dataset")?.0.role().into();
        Ok(())
    })
}

/// Releases a dataset handle. Null is ignored.
///
/// # Safety
/// `dataset` must come from this library and must not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn cf_dataset_free(dataset: *mut CfDataset) {
    if !dataset.is_null() {
        drop(Box::from_raw(dataset));
    }
}
