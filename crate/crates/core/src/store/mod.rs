//! Corpus of publication records and the on-disk snapshot of every model
//! derived from it.
//!
//! The corpus lives in a newline-delimited JSON file (`corpus.jsonl`, one
//! [`Document`] per line). Derived models are bundled into a
//! [`ModelSnapshot`] directory that is written atomically and validated on
//! load; see [`save_snapshot`] and [`load_snapshot`].

pub mod binfmt;
mod snapshot;

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use chrono::{DateTime, Datelike, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use snapshot::{
    load_snapshot, load_snapshot_with_manifest, read_manifest, save_snapshot, snapshot_checksum,
    vocabulary_checksum, Manifest, ModelSnapshot, MANIFEST_FILE, SNAPSHOT_FILES, SNAPSHOT_FORMAT,
};

/// File name of the corpus inside a store or snapshot directory.
pub const CORPUS_FILE: &str = "corpus.jsonl";

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("invalid document {doc_id:?}: {reason}")]
    InvalidDocument { doc_id: String, reason: String },
    #[error("I/O failure on {path}: {source}")]
    IoFailure {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("corrupt snapshot: {0}")]
    CorruptSnapshot(String),
    #[error("no snapshot at {0}")]
    MissingSnapshot(PathBuf),
}

impl StoreError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        StoreError::IoFailure {
            path: path.into(),
            source,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Pubmed,
    Arxiv,
    Custom,
}

impl Source {
    pub fn as_str(self) -> &'static str {
        match self {
            Source::Pubmed => "pubmed",
            Source::Arxiv => "arxiv",
            Source::Custom => "custom",
        }
    }
}

/// One publication record as scraped from a source API.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    /// Source-prefixed identifier, e.g. `pubmed:12345`.
    pub doc_id: String,
    pub source: Source,
    pub title: String,
    pub abstract_text: String,
    #[serde(default)]
    pub authors: Vec<String>,
    /// Journal title or arXiv primary category.
    #[serde(default)]
    pub venue: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub published_year: Option<i32>,
    #[serde(default)]
    pub url: String,
    pub fetched_at: DateTime<Utc>,
}

pub const MIN_PUBLISHED_YEAR: i32 = 1800;

impl Document {
    pub fn validate(&self) -> Result<(), StoreError> {
        let invalid = |reason: &str| StoreError::InvalidDocument {
            doc_id: self.doc_id.clone(),
            reason: reason.to_string(),
        };
        if self.doc_id.trim().is_empty() {
            return Err(invalid("empty doc_id"));
        }
        if self.abstract_text.trim().is_empty() {
            return Err(invalid("empty abstract"));
        }
        if let Some(year) = self.published_year {
            let max_year = Utc::now().year() + 1;
            if !(MIN_PUBLISHED_YEAR..=max_year).contains(&year) {
                return Err(invalid(&format!(
                    "published_year {year} outside [{MIN_PUBLISHED_YEAR}, {max_year}]"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct UpsertCounts {
    pub inserted: usize,
    pub updated: usize,
}

/// In-memory corpus keyed by `doc_id`. Iteration order is `doc_id` order.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Corpus {
    docs: BTreeMap<String, Document>,
}

impl Corpus {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }

    pub fn get(&self, doc_id: &str) -> Option<&Document> {
        self.docs.get(doc_id)
    }

    pub fn contains(&self, doc_id: &str) -> bool {
        self.docs.contains_key(doc_id)
    }

    pub fn documents(&self) -> impl Iterator<Item = &Document> {
        self.docs.values()
    }

    pub fn doc_ids(&self) -> impl Iterator<Item = &str> {
        self.docs.keys().map(String::as_str)
    }

    pub fn remove(&mut self, doc_id: &str) -> Option<Document> {
        self.docs.remove(doc_id)
    }

    /// Inserts or overwrites every document of the batch. The whole batch is
    /// rejected if any document is invalid.
    pub fn upsert(&mut self, docs: Vec<Document>) -> Result<UpsertCounts, StoreError> {
        for doc in &docs {
            doc.validate()?;
        }
        let mut counts = UpsertCounts::default();
        for doc in docs {
            match self.docs.insert(doc.doc_id.clone(), doc) {
                Some(_) => counts.updated += 1,
                None => counts.inserted += 1,
            }
        }
        Ok(counts)
    }

    pub fn to_jsonl(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for doc in self.docs.values() {
            serde_json::to_writer(&mut out, doc).expect("document serializes");
            out.push(b'\n');
        }
        out
    }

    pub fn from_jsonl(reader: impl BufRead) -> Result<Self, String> {
        let mut docs = BTreeMap::new();
        for (lineno, line) in reader.lines().enumerate() {
            let line = line.map_err(|e| format!("line {}: {e}", lineno + 1))?;
            if line.trim().is_empty() {
                continue;
            }
            let doc: Document =
                serde_json::from_str(&line).map_err(|e| format!("line {}: {e}", lineno + 1))?;
            doc.validate().map_err(|e| format!("line {}: {e}", lineno + 1))?;
            if docs.insert(doc.doc_id.clone(), doc).is_some() {
                return Err(format!("line {}: duplicate doc_id", lineno + 1));
            }
        }
        Ok(Corpus { docs })
    }
}

impl FromIterator<Document> for Corpus {
    fn from_iter<I: IntoIterator<Item = Document>>(iter: I) -> Self {
        Corpus {
            docs: iter.into_iter().map(|d| (d.doc_id.clone(), d)).collect(),
        }
    }
}

/// A store directory holding the ingested corpus. Writers are expected to be
/// serialized by the caller (single-writer contract).
#[derive(Debug)]
pub struct CorpusStore {
    dir: PathBuf,
    corpus: Corpus,
}

impl CorpusStore {
    /// Opens (or lazily creates) the store at `dir`.
    pub fn open(dir: impl AsRef<Path>) -> Result<Self, StoreError> {
        let dir = dir.as_ref().to_path_buf();
        let path = dir.join(CORPUS_FILE);
        let corpus = match fs::File::open(&path) {
            Ok(file) => Corpus::from_jsonl(BufReader::new(file)).map_err(|detail| {
                StoreError::io(
                    &path,
                    std::io::Error::new(std::io::ErrorKind::InvalidData, detail),
                )
            })?,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Corpus::new(),
            Err(e) => return Err(StoreError::io(&path, e)),
        };
        Ok(CorpusStore { dir, corpus })
    }

    pub fn corpus(&self) -> &Corpus {
        &self.corpus
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    /// Upserts and persists the batch. Nothing is written if the batch is
    /// rejected.
    pub fn upsert(&mut self, docs: Vec<Document>) -> Result<UpsertCounts, StoreError> {
        let mut next = self.corpus.clone();
        let counts = next.upsert(docs)?;
        fs::create_dir_all(&self.dir).map_err(|e| StoreError::io(&self.dir, e))?;
        write_file_atomic(&self.dir.join(CORPUS_FILE), &next.to_jsonl())?;
        self.corpus = next;
        Ok(counts)
    }
}

/// Writes `bytes` to a sibling temp file, syncs it and renames it over `path`.
pub fn write_file_atomic(path: &Path, bytes: &[u8]) -> Result<(), StoreError> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    let file_name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let tmp = dir.join(format!(".{file_name}.tmp-{}", std::process::id()));
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if let Err(e) = result {
        let _ = fs::remove_file(&tmp);
        return Err(StoreError::io(path, e));
    }
    Ok(())
}
