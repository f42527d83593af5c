//! Append-only report cache.
//!
//! Layout (format version 1):
//!
//! ```text
//! <cache_dir>/CACHE_FORMAT            "refqual-cache 1"
//! <cache_dir>/<namespace>/entries.jsonl
//! ```
//!
//! Each line of `entries.jsonl` is one [`CacheEntry`]. Lookups use
//! `(model_id, prompt_sha256, run_index)`; the namespace separates backends
//! (live vs. mock, and mock seeds) that answer the same prompt differently.
//! Only one process should append to a namespace at a time.

use std::collections::{BTreeMap, HashMap};
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Mutex, RwLock};

use serde::{Deserialize, Serialize};

use super::RawReport;

pub const CACHE_FORMAT: &str = "refqual-cache 1";
const FORMAT_FILE: &str = "CACHE_FORMAT";
const ENTRIES_FILE: &str = "entries.jsonl";

#[derive(Debug, thiserror::Error)]
pub enum CacheError {
    #[error("cache I/O on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: corrupt cache entry: {message}")]
    Corrupt {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("{path}: unsupported cache format `{found}`, expected `{CACHE_FORMAT}`")]
    Format { path: PathBuf, found: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheEntry {
    pub model_id: String,
    pub prompt_sha256: String,
    pub run_index: u32,
    /// Article that first produced the entry (informational).
    pub article_id: String,
    pub report_text: String,
    pub received_at: String,
    #[serde(default)]
    pub backend_meta: BTreeMap<String, String>,
}

type Key = (String, String, u32);

#[derive(Debug)]
pub struct ScoreCache {
    entries: RwLock<HashMap<Key, CacheEntry>>,
    writer: Option<Mutex<File>>,
    path: Option<PathBuf>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CacheError + '_ {
    move |source| CacheError::Io {
        path: path.to_owned(),
        source,
    }
}

impl ScoreCache {
    /// A cache that lives only as long as the value.
    pub fn in_memory() -> Self {
        Self {
            entries: RwLock::new(HashMap::new()),
            writer: None,
            path: None,
        }
    }

    /// Opens (creating when needed) `<dir>/<namespace>/entries.jsonl`.
    ///
    /// A truncated final line, as left by an interrupted append, is cut off
    /// with a warning; corruption anywhere else is an error.
    pub fn open(dir: &Path, namespace: &str) -> Result<Self, CacheError> {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
        let format_path = dir.join(FORMAT_FILE);
        match std::fs::read_to_string(&format_path) {
            Ok(found) if found.trim() == CACHE_FORMAT => {}
            Ok(found) => {
                return Err(CacheError::Format {
                    path: format_path,
                    found: found.trim().to_owned(),
                })
            }
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                std::fs::write(&format_path, format!("{CACHE_FORMAT}\n")).map_err(io_err(&format_path))?;
            }
            Err(e) => return Err(io_err(&format_path)(e)),
        }

        let ns_dir = dir.join(namespace);
        std::fs::create_dir_all(&ns_dir).map_err(io_err(&ns_dir))?;
        let path = ns_dir.join(ENTRIES_FILE);
        let mut entries = HashMap::new();
        if path.exists() {
            let text = std::fs::read_to_string(&path).map_err(io_err(&path))?;
            let mut offset = 0usize;
            let mut keep = text.len();
            let lines: Vec<&str> = text.split_inclusive('\n').collect();
            for (i, raw) in lines.iter().enumerate() {
                let start = offset;
                offset += raw.len();
                let line = raw.trim_end_matches(['\n', '\r']);
                if line.trim().is_empty() {
                    continue;
                }
                match serde_json::from_str::<CacheEntry>(line) {
                    Ok(entry) => {
                        let key = (entry.model_id.clone(), entry.prompt_sha256.clone(), entry.run_index);
                        entries.entry(key).or_insert(entry);
                    }
                    Err(e) if i + 1 == lines.len() => {
                        log::warn!("{}:{}: dropping truncated cache entry ({e})", path.display(), i + 1);
                        keep = start;
                    }
                    Err(e) => {
                        return Err(CacheError::Corrupt {
                            path,
                            line: i + 1,
                            message: e.to_string(),
                        })
                    }
                }
            }
            if keep < text.len() {
                let file = OpenOptions::new().write(true).open(&path).map_err(io_err(&path))?;
                file.set_len(keep as u64).map_err(io_err(&path))?;
            } else if !text.is_empty() && !text.ends_with('\n') {
                let mut file = OpenOptions::new().append(true).open(&path).map_err(io_err(&path))?;
                file.write_all(b"\n").map_err(io_err(&path))?;
            }
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(io_err(&path))?;
        Ok(Self {
            entries: RwLock::new(entries),
            writer: Some(Mutex::new(file)),
            path: Some(path),
        })
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    pub fn len(&self) -> usize {
        self.entries.read().expect("cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, model_id: &str, prompt_sha256: &str, run_index: u32) -> Option<CacheEntry> {
        let key = (model_id.to_owned(), prompt_sha256.to_owned(), run_index);
        self.entries.read().expect("cache lock").get(&key).cloned()
    }

    /// Appends and flushes one entry, then makes it visible to lookups.
    pub fn put(&self, report: &RawReport, prompt_sha256: &str) -> Result<(), CacheError> {
        let entry = CacheEntry {
            model_id: report.key.model_id.clone(),
            prompt_sha256: prompt_sha256.to_owned(),
            run_index: report.key.run_index,
            article_id: report.key.article_id.clone(),
            report_text: report.report_text.clone(),
            received_at: report.received_at.clone(),
            backend_meta: report.backend_meta.clone(),
        };
        let key = (entry.model_id.clone(), entry.prompt_sha256.clone(), entry.run_index);
        if let (Some(writer), Some(path)) = (&self.writer, &self.path) {
            let mut line = serde_json::to_string(&entry).expect("cache entry serialises");
            line.push('\n');
            let mut file = writer.lock().expect("cache writer lock");
            file.write_all(line.as_bytes()).map_err(io_err(path))?;
            file.flush().map_err(io_err(path))?;
        }
        self.entries.write().expect("cache lock").entry(key).or_insert(entry);
        Ok(())
    }
}
