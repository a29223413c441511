//! Append-only JSON-Lines caches for WER vectors and quality targets.
//!
//! Each line is one record; when a key appears more than once the last line
//! wins, so interrupted sweeps resume by skipping keys already present.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Environment variable that overrides the cache root.
pub const CACHE_DIR_ENV: &str = "BRIDGE_OA_CACHE_DIR";
pub const WER_CACHE_FILE: &str = "wer_vectors.jsonl";
pub const PQ_CACHE_FILE: &str = "pq_targets.jsonl";
pub const FEATURE_CACHE_DIR: &str = "features";

/// Cache root: `BRIDGE_OA_CACHE_DIR` if set, else `fallback`.
pub fn cache_root(fallback: impl Into<PathBuf>) -> PathBuf {
    std::env::var_os(CACHE_DIR_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| fallback.into())
}

pub trait CacheRecord: Serialize + DeserializeOwned + Clone + Send {
    fn key(&self) -> String;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendIds {
    pub enhancer: String,
    pub recognizer: String,
}

/// One utterance's WERs over the grid, index 0 at ω = 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WerRecord {
    pub utt_id: String,
    pub backend_ids: BackendIds,
    /// Grid coefficients in descending order.
    pub grid: Vec<f64>,
    pub grid_hash: String,
    pub values: Vec<f64>,
    pub created_at: String,
}

impl WerRecord {
    pub fn cache_key(utt_id: &str, grid_hash: &str, ids: &BackendIds) -> String {
        format!("{utt_id}|{grid_hash}|{}|{}", ids.enhancer, ids.recognizer)
    }
}

impl CacheRecord for WerRecord {
    fn key(&self) -> String {
        Self::cache_key(&self.utt_id, &self.grid_hash, &self.backend_ids)
    }
}

/// Quality target of one utterance, or the reason scoring failed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PqRecord {
    pub utt_id: String,
    pub scorer_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sig: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bak: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub created_at: String,
}

impl PqRecord {
    pub fn cache_key(utt_id: &str, scorer_id: &str) -> String {
        format!("{utt_id}|{scorer_id}")
    }
}

impl CacheRecord for PqRecord {
    fn key(&self) -> String {
        Self::cache_key(&self.utt_id, &self.scorer_id)
    }
}

pub fn timestamp() -> String {
    chrono::Utc::now().to_rfc3339()
}

struct Inner<R> {
    entries: HashMap<String, R>,
    file: File,
}

/// A JSON-Lines file mirrored in memory; appends go through one lock.
pub struct JsonlCache<R: CacheRecord> {
    path: PathBuf,
    inner: Mutex<Inner<R>>,
}

impl<R: CacheRecord> JsonlCache<R> {
    /// Opens or creates the cache. A truncated final line left by an
    /// interrupted write is dropped; other malformed lines are errors.
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let mut entries = HashMap::new();
        let mut keep_len = None;
        if path.exists() {
            let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            let complete = text.rfind('\n').map_or(0, |i| i + 1);
            if complete < text.len() {
                log::warn!("{}: dropping truncated final line", path.display());
                keep_len = Some(complete as u64);
            }
            for (n, line) in text[..complete].lines().enumerate() {
                if line.trim().is_empty() {
                    continue;
                }
                let r: R = serde_json::from_str(line)
                    .map_err(|e| Error::Manifest(format!("{}:{}: {e}", path.display(), n + 1)))?;
                entries.insert(r.key(), r);
            }
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        if let Some(len) = keep_len {
            file.set_len(len).map_err(|e| Error::io(&path, e))?;
        }
        Ok(Self {
            path,
            inner: Mutex::new(Inner { entries, file }),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn get(&self, key: &str) -> Option<R> {
        self.inner.lock().expect("cache lock").entries.get(key).cloned()
    }

    pub fn contains(&self, key: &str) -> bool {
        self.inner.lock().expect("cache lock").entries.contains_key(key)
    }

    pub fn len(&self) -> usize {
        self.inner.lock().expect("cache lock").entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Appends `record` and makes it visible to `get`.
    pub fn put(&self, record: R) -> Result<()> {
        let mut line = serde_json::to_string(&record)?;
        line.push('\n');
        let mut inner = self.inner.lock().expect("cache lock");
        inner
            .file
            .write_all(line.as_bytes())
            .and_then(|_| inner.file.flush())
            .map_err(|e| Error::io(&self.path, e))?;
        inner.entries.insert(record.key(), record);
        Ok(())
    }

    /// Snapshot of all live records, sorted by key.
    pub fn records(&self) -> Vec<R> {
        let inner = self.inner.lock().expect("cache lock");
        let mut keyed: Vec<(&String, &R)> = inner.entries.iter().collect();
        keyed.sort_by(|a, b| a.0.cmp(b.0));
        keyed.into_iter().map(|(_, r)| r.clone()).collect()
    }
}

pub type WerCache = JsonlCache<WerRecord>;
pub type PqCache = JsonlCache<PqRecord>;
