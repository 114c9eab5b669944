//! The `ingest` and `build` stages. Each one either completes or leaves the
//! store exactly as it found it.

use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use litatlas_core::pipeline::build_snapshot;
use litatlas_core::store::{read_manifest, save_snapshot, CorpusStore, ModelSnapshot, StoreError, UpsertCounts};
use litatlas_ingest::{FetchReport, Harvester, Pacer, Transport};
use serde::Serialize;

use crate::config::{AppConfig, StoreLocation, SNAPSHOT_DIR};
use crate::remote::{pack_snapshot, RemoteStore};
use crate::state::SnapshotInfo;
use crate::CommandError;

#[derive(Debug, Clone, Serialize)]
pub struct IngestReport {
    pub sources: Vec<FetchReport>,
    pub inserted: usize,
    pub updated: usize,
    pub corpus_size: usize,
}

/// Fetches every configured source, then upserts all documents in one
/// write. A failing source aborts the run before anything is written.
pub fn run_ingest(
    config: &AppConfig,
    transport: &dyn Transport,
    pacer: &dyn Pacer,
    fetched_at: DateTime<Utc>,
) -> Result<IngestReport, CommandError> {
    if config.sources.is_empty() {
        return Err(CommandError::Config("no [[sources]] configured".into()));
    }
    let mut store = CorpusStore::open(&config.data_dir)?;
    let mut harvester = Harvester::new(transport, pacer);
    harvester.endpoints = config.ingest.endpoints();
    let mut reports = Vec::new();
    let mut documents = Vec::new();
    for query in &config.sources {
        let outcome = harvester.fetch(query, fetched_at)?;
        tracing::info!(
            source = %outcome.report.source,
            documents = outcome.report.documents,
            skipped = outcome.report.skipped.len(),
            "source fetched"
        );
        documents.extend(outcome.documents);
        reports.push(outcome.report);
    }
    let UpsertCounts { inserted, updated } = store.upsert(documents)?;
    Ok(IngestReport {
        sources: reports,
        inserted,
        updated,
        corpus_size: store.corpus().len(),
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct BuildReport {
    pub destination: String,
    pub snapshot: SnapshotInfo,
    pub build_notes: Vec<String>,
}

pub fn snapshot_dir(store_dir: &Path) -> PathBuf {
    store_dir.join(SNAPSHOT_DIR)
}

/// Builds a snapshot of the corpus in `data_dir` and publishes it to
/// `store`. The corpus version is one above the version already published
/// there.
pub fn run_build(
    config: &AppConfig,
    store: &StoreLocation,
    admin_token: Option<String>,
    build_timestamp: DateTime<Utc>,
) -> Result<BuildReport, CommandError> {
    let corpus = CorpusStore::open(&config.data_dir)?;
    match store {
        StoreLocation::Dir(dir) => {
            let target = snapshot_dir(dir);
            let version = match read_manifest(&target) {
                Ok(m) => m.corpus_version + 1,
                Err(StoreError::MissingSnapshot(_)) => 1,
                Err(e) => return Err(e.into()),
            };
            let snapshot = build_snapshot(corpus.corpus(), &config.pipeline, version, build_timestamp)?;
            save_snapshot(&snapshot, &target)?;
            let manifest = read_manifest(&target)?;
            Ok(BuildReport {
                destination: target.display().to_string(),
                snapshot: SnapshotInfo {
                    corpus_version: manifest.corpus_version,
                    content_checksum: manifest.content_checksum,
                    document_count: manifest.document_count,
                    build_timestamp: manifest.build_timestamp,
                },
                build_notes: snapshot.build_notes,
            })
        }
        StoreLocation::Remote(base) => {
            let remote = RemoteStore::new(base, admin_token)?;
            let version = remote.health()?.corpus_version + 1;
            let snapshot = build_snapshot(corpus.corpus(), &config.pipeline, version, build_timestamp)?;
            let staging = tempdir_in(&config.data_dir)?;
            let result = publish(&remote, &snapshot, &staging);
            let _ = std::fs::remove_dir_all(&staging);
            Ok(BuildReport {
                destination: base.clone(),
                snapshot: result?,
                build_notes: snapshot.build_notes,
            })
        }
    }
}

fn publish(remote: &RemoteStore, snapshot: &ModelSnapshot, staging: &Path) -> Result<SnapshotInfo, CommandError> {
    let dir = staging.join(SNAPSHOT_DIR);
    save_snapshot(snapshot, &dir)?;
    remote.upload(pack_snapshot(&dir)?)
}

fn tempdir_in(parent: &Path) -> Result<PathBuf, CommandError> {
    std::fs::create_dir_all(parent).map_err(|e| CommandError::Io(format!("{}: {e}", parent.display())))?;
    let dir = parent.join(format!(".publish-{}-{}", std::process::id(), rand::random::<u64>()));
    std::fs::create_dir(&dir).map_err(|e| CommandError::Io(format!("{}: {e}", dir.display())))?;
    Ok(dir)
}
