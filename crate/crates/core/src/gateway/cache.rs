use std::fs;
use std::io::ErrorKind;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};

use serde_json::Value;

use super::GatewayError;

/// Directory of `<request_hash>.json` files, each holding the raw response
/// body of one exchange.
#[derive(Debug)]
pub struct ReplayCache {
    dir: PathBuf,
    tmp_counter: AtomicU64,
}

impl ReplayCache {
    pub fn open(dir: PathBuf) -> Result<Self, GatewayError> {
        fs::create_dir_all(&dir)
            .map_err(|e| GatewayError::Cache(format!("{}: {e}", dir.display())))?;
        Ok(ReplayCache {
            dir,
            tmp_counter: AtomicU64::new(0),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn entry_path(&self, hash: &str) -> PathBuf {
        self.dir.join(format!("{hash}.json"))
    }

    pub fn get(&self, hash: &str) -> Result<Option<Value>, GatewayError> {
        let path = self.entry_path(hash);
        match fs::read_to_string(&path) {
            Ok(text) => serde_json::from_str(&text)
                .map(Some)
                .map_err(|e| GatewayError::Cache(format!("{}: {e}", path.display()))),
            Err(e) if e.kind() == ErrorKind::NotFound => Ok(None),
            Err(e) => Err(GatewayError::Cache(format!("{}: {e}", path.display()))),
        }
    }

    /// Writes through a temporary file and a rename, so concurrent writers of
    /// the same hash never leave a torn entry.
    pub fn put(&self, hash: &str, response: &Value) -> Result<(), GatewayError> {
        let n = self.tmp_counter.fetch_add(1, Ordering::Relaxed);
        let tmp = self
            .dir
            .join(format!(".{hash}.{}.{n}.tmp", std::process::id()));
        let mut text = serde_json::to_string_pretty(response).expect("json serializes");
        text.push('\n');
        fs::write(&tmp, text)
            .and_then(|_| fs::rename(&tmp, self.entry_path(hash)))
            .map_err(|e| GatewayError::Cache(format!("{}: {e}", tmp.display())))
    }

    pub fn len(&self) -> usize {
        fs::read_dir(&self.dir)
            .map(|rd| {
                rd.filter_map(Result::ok)
                    .filter(|e| e.file_name().to_string_lossy().ends_with(".json"))
                    .count()
            })
            .unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}
