use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::binfmt::{self, ArrayData, Decoded, Header, NamedArray};
use super::{Corpus, StoreError, CORPUS_FILE};
use crate::lsa::{DenseVector, LsaDiagnostics, LsaModel};
use crate::pipeline::PipelineConfig;
use crate::search::{InvertedIndex, Posting, VocabularyRef};
use crate::similarity::SimilarityGraph;
use crate::textpipe::Vocabulary;
use crate::tsne::{EmbeddingDiagnostics, EmbeddingResult};

pub const SNAPSHOT_FORMAT: &str = "litatlas-snapshot/1";
pub const MANIFEST_FILE: &str = "manifest.json";

/// Every file of a snapshot directory besides the manifest, in checksum order.
pub const SNAPSHOT_FILES: [&str; 11] = [
    CORPUS_FILE,
    "vocabulary.json",
    "lsa.bin",
    "lsa.json",
    "vectors.bin",
    "vectors.json",
    "graph.jsonl",
    "index.bin",
    "index.json",
    "embedding.csv",
    "embedding_diag.json",
];

/// Corpus plus every model derived from it, built from one corpus version.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSnapshot {
    pub corpus_version: u64,
    pub corpus: Corpus,
    pub vocabulary: Vocabulary,
    pub lsa_model: LsaModel,
    pub lsa_diagnostics: LsaDiagnostics,
    pub doc_vectors: BTreeMap<String, DenseVector>,
    pub similarity_graph: SimilarityGraph,
    pub inverted_index: InvertedIndex,
    pub embedding: EmbeddingResult,
    pub build_config: PipelineConfig,
    pub build_notes: Vec<String>,
    pub build_timestamp: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub corpus_version: u64,
    pub build_timestamp: DateTime<Utc>,
    pub document_count: usize,
    pub graph_k_neighbors: usize,
    pub build_config: PipelineConfig,
    pub build_notes: Vec<String>,
    pub lsa_diagnostics: LsaDiagnostics,
    /// sha256 of each file in [`SNAPSHOT_FILES`].
    pub checksums: BTreeMap<String, String>,
    /// sha256 over the per-file checksums; identifies the snapshot content.
    pub content_checksum: String,
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn vocabulary_json(v: &Vocabulary) -> Vec<u8> {
    serde_json::to_vec_pretty(v).expect("vocabulary serializes")
}

/// Checksum the inverted index records for the vocabulary it was built from.
pub fn vocabulary_checksum(v: &Vocabulary) -> String {
    sha256_hex(&vocabulary_json(v))
}

fn header_json(h: &Header) -> Vec<u8> {
    serde_json::to_vec_pretty(h).expect("header serializes")
}

fn encode_files(s: &ModelSnapshot) -> Vec<(&'static str, Vec<u8>)> {
    let v = s.corpus_version;
    let lsa = &s.lsa_model;
    let (lsa_h, lsa_b) = binfmt::encode(
        v,
        vec![
            NamedArray {
                name: "components",
                shape: vec![lsa.n_components(), lsa.vocabulary_size()],
                data: ArrayData::F64(lsa.components().to_vec()),
            },
            NamedArray {
                name: "singular_values",
                shape: vec![lsa.n_components()],
                data: ArrayData::F64(lsa.singular_values().to_vec()),
            },
        ],
        None,
        serde_json::Value::Null,
    );

    let dim = s.doc_vectors.values().next().map_or(0, DenseVector::dim);
    let flat: Vec<f64> = s.doc_vectors.values().flat_map(|d| d.0.iter().copied()).collect();
    let (vec_h, vec_b) = binfmt::encode(
        v,
        vec![NamedArray {
            name: "vectors",
            shape: vec![s.doc_vectors.len(), dim],
            data: ArrayData::F64(flat),
        }],
        Some(s.doc_vectors.keys().cloned().collect()),
        serde_json::Value::Null,
    );

    let idx = &s.inverted_index;
    let mut terms = Vec::new();
    let mut term_ptr = vec![0u64];
    let (mut docs, mut weights) = (Vec::new(), Vec::new());
    for (&t, list) in idx.postings() {
        terms.push(t as u64);
        for p in list {
            docs.push(p.doc);
            weights.push(p.weight);
        }
        term_ptr.push(docs.len() as u64);
    }
    let nnz = docs.len();
    let (idx_h, idx_b) = binfmt::encode(
        v,
        vec![
            NamedArray {
                name: "terms",
                shape: vec![terms.len()],
                data: ArrayData::U64(terms),
            },
            NamedArray {
                name: "term_ptr",
                shape: vec![term_ptr.len()],
                data: ArrayData::U64(term_ptr),
            },
            NamedArray {
                name: "docs",
                shape: vec![nnz],
                data: ArrayData::U32(docs),
            },
            NamedArray {
                name: "weights",
                shape: vec![nnz],
                data: ArrayData::F64(weights),
            },
        ],
        Some(idx.doc_ids().to_vec()),
        serde_json::json!({
            "dimensionality": idx.dimensionality(),
            "vocabulary_ref": idx.vocabulary_ref,
        }),
    );

    vec![
        (CORPUS_FILE, s.corpus.to_jsonl()),
        ("vocabulary.json", vocabulary_json(&s.vocabulary)),
        ("lsa.bin", lsa_b),
        ("lsa.json", header_json(&lsa_h)),
        ("vectors.bin", vec_b),
        ("vectors.json", header_json(&vec_h)),
        ("graph.jsonl", s.similarity_graph.to_jsonl()),
        ("index.bin", idx_b),
        ("index.json", header_json(&idx_h)),
        ("embedding.csv", s.embedding.coords_csv()),
        (
            "embedding_diag.json",
            serde_json::to_vec_pretty(&s.embedding.diagnostics()).expect("diagnostics serialize"),
        ),
    ]
}

fn content_checksum(checksums: &BTreeMap<String, String>) -> String {
    let mut h = Sha256::new();
    for name in SNAPSHOT_FILES {
        h.update(name.as_bytes());
        h.update([0]);
        h.update(checksums.get(name).map_or("", String::as_str).as_bytes());
        h.update(b"\n");
    }
    hex::encode(h.finalize())
}

fn manifest_for(s: &ModelSnapshot, files: &[(&'static str, Vec<u8>)]) -> Manifest {
    let checksums: BTreeMap<String, String> = files
        .iter()
        .map(|(n, b)| (n.to_string(), sha256_hex(b)))
        .collect();
    Manifest {
        format: SNAPSHOT_FORMAT.to_string(),
        corpus_version: s.corpus_version,
        build_timestamp: s.build_timestamp,
        document_count: s.corpus.len(),
        graph_k_neighbors: s.similarity_graph.k_neighbors,
        build_config: s.build_config.clone(),
        build_notes: s.build_notes.clone(),
        lsa_diagnostics: s.lsa_diagnostics.clone(),
        content_checksum: content_checksum(&checksums),
        checksums,
    }
}

/// Content checksum the snapshot would have on disk.
pub fn snapshot_checksum(s: &ModelSnapshot) -> String {
    manifest_for(s, &encode_files(s)).content_checksum
}

static TMP_COUNTER: AtomicU64 = AtomicU64::new(0);

fn sibling_tmp(target: &Path, tag: &str) -> PathBuf {
    let parent = target.parent().unwrap_or_else(|| Path::new("."));
    let name = target
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "snapshot".into());
    parent.join(format!(
        ".{name}.{tag}-{}-{}",
        std::process::id(),
        TMP_COUNTER.fetch_add(1, Ordering::Relaxed)
    ))
}

fn sync_dir(dir: &Path) -> std::io::Result<()> {
    fs::File::open(dir)?.sync_all()
}

#[cfg(target_os = "linux")]
fn exchange(a: &Path, b: &Path) -> std::io::Result<()> {
    use std::ffi::CString;
    use std::os::unix::ffi::OsStrExt;
    let ca = CString::new(a.as_os_str().as_bytes())?;
    let cb = CString::new(b.as_os_str().as_bytes())?;
    // SAFETY: both paths are valid NUL-terminated strings for the duration of the call.
    let rc = unsafe {
        libc::syscall(
            libc::SYS_renameat2,
            libc::AT_FDCWD,
            ca.as_ptr(),
            libc::AT_FDCWD,
            cb.as_ptr(),
            libc::RENAME_EXCHANGE,
        )
    };
    if rc == 0 {
        Ok(())
    } else {
        Err(std::io::Error::last_os_error())
    }
}

#[cfg(not(target_os = "linux"))]
fn exchange(_: &Path, _: &Path) -> std::io::Result<()> {
    Err(std::io::Error::from(std::io::ErrorKind::Unsupported))
}

/// Moves the complete directory `staged` to `target`, replacing any
/// existing directory there.
fn install(staged: &Path, target: &Path) -> std::io::Result<()> {
    if !target.exists() {
        return fs::rename(staged, target);
    }
    match exchange(staged, target) {
        // `staged` now holds the previous snapshot.
        Ok(()) => {
            if let Err(e) = fs::remove_dir_all(staged) {
                tracing::warn!(path = %staged.display(), error = %e, "could not remove old snapshot");
            }
            Ok(())
        }
        Err(_) => {
            // Two renames; the old directory is restored if the second fails.
            let backup = sibling_tmp(target, "old");
            fs::rename(target, &backup)?;
            if let Err(e) = fs::rename(staged, target) {
                let _ = fs::rename(&backup, target);
                return Err(e);
            }
            let _ = fs::remove_dir_all(&backup);
            Ok(())
        }
    }
}

/// Writes the snapshot into a staging directory next to `path` and swaps it
/// into place. Readers see either the previous snapshot or the new one.
pub fn save_snapshot(s: &ModelSnapshot, path: &Path) -> Result<(), StoreError> {
    let files = encode_files(s);
    let manifest = manifest_for(s, &files);
    let parent = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    fs::create_dir_all(&parent).map_err(|e| StoreError::io(&parent, e))?;
    let staged = sibling_tmp(path, "tmp");
    let write_all = || -> std::io::Result<()> {
        fs::create_dir(&staged)?;
        let manifest_bytes = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
        for (name, bytes) in files.iter().map(|(n, b)| (*n, b)).chain([(MANIFEST_FILE, &manifest_bytes)]) {
            let mut f = fs::File::create(staged.join(name))?;
            f.write_all(bytes)?;
            f.sync_all()?;
        }
        sync_dir(&staged)?;
        install(&staged, path)?;
        sync_dir(&parent)
    };
    write_all().map_err(|e| {
        let _ = fs::remove_dir_all(&staged);
        StoreError::io(path, e)
    })
}

fn corrupt(detail: impl Into<String>) -> StoreError {
    StoreError::CorruptSnapshot(detail.into())
}

fn read_header(files: &BTreeMap<&str, Vec<u8>>, name: &str, version: u64) -> Result<Header, StoreError> {
    let h: Header =
        serde_json::from_slice(&files[name]).map_err(|e| corrupt(format!("{name}: {e}")))?;
    if h.corpus_version != version {
        return Err(corrupt(format!(
            "{name} built from corpus version {}, manifest says {version}",
            h.corpus_version
        )));
    }
    Ok(h)
}

pub fn read_manifest(path: &Path) -> Result<Manifest, StoreError> {
    if !path.is_dir() {
        return Err(StoreError::MissingSnapshot(path.to_path_buf()));
    }
    let mpath = path.join(MANIFEST_FILE);
    let bytes = match fs::read(&mpath) {
        Ok(b) => b,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            return Err(StoreError::MissingSnapshot(path.to_path_buf()))
        }
        Err(e) => return Err(StoreError::io(&mpath, e)),
    };
    let m: Manifest =
        serde_json::from_slice(&bytes).map_err(|e| corrupt(format!("{MANIFEST_FILE}: {e}")))?;
    if m.format != SNAPSHOT_FORMAT {
        return Err(corrupt(format!("unknown snapshot format {:?}", m.format)));
    }
    Ok(m)
}

pub fn load_snapshot(path: &Path) -> Result<ModelSnapshot, StoreError> {
    load_snapshot_with_manifest(path).map(|(s, _)| s)
}

/// Loads and fully validates a snapshot: checksums, corpus versions and
/// cross-references between every derived structure and the corpus.
pub fn load_snapshot_with_manifest(path: &Path) -> Result<(ModelSnapshot, Manifest), StoreError> {
    let manifest = read_manifest(path)?;
    let mut files = BTreeMap::new();
    for name in SNAPSHOT_FILES {
        let fpath = path.join(name);
        let bytes = match fs::read(&fpath) {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                return Err(corrupt(format!("missing {name}")))
            }
            Err(e) => return Err(StoreError::io(&fpath, e)),
        };
        if manifest.checksums.get(name) != Some(&sha256_hex(&bytes)) {
            return Err(corrupt(format!("checksum mismatch for {name}")));
        }
        files.insert(name, bytes);
    }
    if content_checksum(&manifest.checksums) != manifest.content_checksum {
        return Err(corrupt("content checksum mismatch"));
    }
    let version = manifest.corpus_version;

    let corpus = Corpus::from_jsonl(&files[CORPUS_FILE][..]).map_err(|e| corrupt(format!("{CORPUS_FILE}: {e}")))?;
    let vocabulary: Vocabulary = serde_json::from_slice(&files["vocabulary.json"])
        .map_err(|e| corrupt(format!("vocabulary.json: {e}")))?;

    let lsa_h = read_header(&files, "lsa.json", version)?;
    let lsa_d = Decoded::new(&lsa_h, &files["lsa.bin"]).map_err(corrupt)?;
    let shape = lsa_d.shape("components").ok_or_else(|| corrupt("lsa: no components"))?;
    let (k, vsize) = match shape {
        [k, v] => (*k, *v),
        _ => return Err(corrupt("lsa: components must be 2-D")),
    };
    let lsa_model = LsaModel::from_parts(
        k,
        vsize,
        lsa_d.f64("components").map_err(corrupt)?,
        lsa_d.f64("singular_values").map_err(corrupt)?,
    )
    .map_err(|e| corrupt(format!("lsa: {e}")))?;

    let vec_h = read_header(&files, "vectors.json", version)?;
    let vec_d = Decoded::new(&vec_h, &files["vectors.bin"]).map_err(corrupt)?;
    let ids = vec_h.doc_ids.clone().ok_or_else(|| corrupt("vectors: no doc_ids"))?;
    let (rows, dim) = match vec_d.shape("vectors") {
        Some([r, d]) => (*r, *d),
        _ => return Err(corrupt("vectors: missing or not 2-D")),
    };
    if rows != ids.len() || (rows > 0 && dim != k) {
        return Err(corrupt("vectors: shape does not match doc_ids or LSA components"));
    }
    let flat = vec_d.f64("vectors").map_err(corrupt)?;
    let doc_vectors: BTreeMap<String, DenseVector> = ids
        .into_iter()
        .zip(flat.chunks(dim.max(1)).map(|c| DenseVector(c.to_vec())))
        .collect();
    if doc_vectors.len() != rows {
        return Err(corrupt("vectors: duplicate doc_ids"));
    }

    let graph_text = &files["graph.jsonl"];
    let similarity_graph = SimilarityGraph::from_jsonl(graph_text, manifest.graph_k_neighbors)
        .map_err(|e| corrupt(format!("graph.jsonl: {e}")))?;
    similarity_graph
        .check_structure()
        .map_err(|e| corrupt(format!("graph.jsonl: {e}")))?;

    let idx_h = read_header(&files, "index.json", version)?;
    let idx_d = Decoded::new(&idx_h, &files["index.bin"]).map_err(corrupt)?;
    let terms = idx_d.u64("terms").map_err(corrupt)?;
    let term_ptr = idx_d.u64("term_ptr").map_err(corrupt)?;
    let docs = idx_d.u32("docs").map_err(corrupt)?;
    let weights = idx_d.f64("weights").map_err(corrupt)?;
    if term_ptr.len() != terms.len() + 1
        || docs.len() != weights.len()
        || term_ptr.first() != Some(&0)
        || term_ptr.last() != Some(&(docs.len() as u64))
        || term_ptr.windows(2).any(|w| w[0] > w[1])
    {
        return Err(corrupt("index: inconsistent posting layout"));
    }
    let mut postings = BTreeMap::new();
    for (i, &t) in terms.iter().enumerate() {
        let r = term_ptr[i] as usize..term_ptr[i + 1] as usize;
        let list: Vec<Posting> = docs[r.clone()]
            .iter()
            .zip(&weights[r])
            .map(|(&doc, &weight)| Posting { doc, weight })
            .collect();
        postings.insert(t as usize, list);
    }
    let meta = &idx_h.meta;
    let dimensionality = meta["dimensionality"]
        .as_u64()
        .ok_or_else(|| corrupt("index: missing dimensionality"))? as usize;
    let vocabulary_ref: VocabularyRef = serde_json::from_value(meta["vocabulary_ref"].clone())
        .map_err(|e| corrupt(format!("index: {e}")))?;
    let inverted_index = InvertedIndex::from_parts(
        idx_h.doc_ids.clone().unwrap_or_default(),
        dimensionality,
        postings,
        vocabulary_ref,
    )
    .map_err(|e| corrupt(format!("index: {e}")))?;

    let coords = EmbeddingResult::parse_coords_csv(&files["embedding.csv"])
        .map_err(|e| corrupt(format!("embedding.csv: {e}")))?;
    let diag: EmbeddingDiagnostics = serde_json::from_slice(&files["embedding_diag.json"])
        .map_err(|e| corrupt(format!("embedding_diag.json: {e}")))?;
    let embedding = EmbeddingResult::from_parts(coords, diag);

    let snapshot = ModelSnapshot {
        corpus_version: version,
        corpus,
        vocabulary,
        lsa_model,
        lsa_diagnostics: manifest.lsa_diagnostics.clone(),
        doc_vectors,
        similarity_graph,
        inverted_index,
        embedding,
        build_config: manifest.build_config.clone(),
        build_notes: manifest.build_notes.clone(),
        build_timestamp: manifest.build_timestamp,
    };
    check_references(&snapshot, &files["vocabulary.json"])?;
    Ok((snapshot, manifest))
}

fn check_same_ids<'a>(
    what: &str,
    ids: impl Iterator<Item = &'a str>,
    corpus: &Corpus,
) -> Result<(), StoreError> {
    let mut seen = 0;
    for id in ids {
        if !corpus.contains(id) {
            return Err(corrupt(format!("{what} references {id:?}, which is not in the corpus")));
        }
        seen += 1;
    }
    if seen != corpus.len() {
        return Err(corrupt(format!("{what} covers {seen} of {} documents", corpus.len())));
    }
    Ok(())
}

fn check_references(s: &ModelSnapshot, vocabulary_bytes: &[u8]) -> Result<(), StoreError> {
    let corpus = &s.corpus;
    for (id, list) in &s.similarity_graph.neighbors {
        for (n, _) in list {
            if !corpus.contains(n) {
                return Err(corrupt(format!(
                    "graph entry {id:?} references {n:?}, which is not in the corpus"
                )));
            }
        }
    }
    check_same_ids("graph", s.similarity_graph.neighbors.keys().map(String::as_str), corpus)?;
    check_same_ids("vectors", s.doc_vectors.keys().map(String::as_str), corpus)?;
    check_same_ids("embedding", s.embedding.coords.keys().map(String::as_str), corpus)?;
    check_same_ids("index", s.inverted_index.doc_ids().iter().map(String::as_str), corpus)?;

    let v = s.vocabulary.len();
    if s.lsa_model.vocabulary_size() != v || s.inverted_index.dimensionality() != v {
        return Err(corrupt("vocabulary size disagrees with LSA model or index"));
    }
    let vref = &s.inverted_index.vocabulary_ref;
    if vref.corpus_version != s.corpus_version {
        return Err(corrupt("index built from a different corpus version"));
    }
    if vref.vocabulary_checksum != sha256_hex(vocabulary_bytes) {
        return Err(corrupt("index built against a different vocabulary"));
    }
    let ks: BTreeSet<usize> = s.doc_vectors.values().map(DenseVector::dim).collect();
    if ks.iter().any(|&d| d != s.lsa_model.n_components()) {
        return Err(corrupt("document vectors do not match LSA dimensionality"));
    }
    Ok(())
}
