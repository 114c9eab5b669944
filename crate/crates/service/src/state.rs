//! The snapshot being served and the mutable per-user state around it.

use std::path::{Path, PathBuf};
use std::sync::{Arc, RwLock};

use litatlas_core::recommend::ProfileStore;
use litatlas_core::store::{load_snapshot_with_manifest, save_snapshot, Manifest, ModelSnapshot, StoreError};
use serde::{Deserialize, Serialize};

/// An immutable loaded snapshot. Handlers clone the `Arc` once per request,
/// so a reload never changes the view of a request already running.
#[derive(Debug)]
pub struct Served {
    pub snapshot: ModelSnapshot,
    pub manifest: Manifest,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SnapshotInfo {
    pub corpus_version: u64,
    pub content_checksum: String,
    pub document_count: usize,
    pub build_timestamp: chrono::DateTime<chrono::Utc>,
}

impl Served {
    pub fn load(path: &Path) -> Result<Self, StoreError> {
        let (snapshot, manifest) = load_snapshot_with_manifest(path)?;
        Ok(Served { snapshot, manifest })
    }

    pub fn info(&self) -> SnapshotInfo {
        SnapshotInfo {
            corpus_version: self.manifest.corpus_version,
            content_checksum: self.manifest.content_checksum.clone(),
            document_count: self.manifest.document_count,
            build_timestamp: self.manifest.build_timestamp,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum StartupError {
    #[error("cannot serve snapshot: {0}")]
    Snapshot(#[from] StoreError),
    #[error("cannot open user profiles: {0}")]
    Profiles(#[from] litatlas_core::recommend::RecommendError),
}

#[derive(Debug, thiserror::Error)]
pub enum ReloadError {
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("snapshot version {offered} is not newer than the served version {served}")]
    StaleVersion { offered: u64, served: u64 },
}

pub struct AppState {
    current: RwLock<Arc<Served>>,
    snapshot_path: PathBuf,
    /// Serializes profile writes; held across the file rewrite.
    pub profiles: tokio::sync::Mutex<ProfileStore>,
    /// Serializes reloads and uploads with each other.
    install: tokio::sync::Mutex<()>,
    pub admin_token: Option<String>,
}

impl AppState {
    pub fn new(served: Served, snapshot_path: PathBuf, profiles: ProfileStore, admin_token: Option<String>) -> Self {
        AppState {
            current: RwLock::new(Arc::new(served)),
            snapshot_path,
            profiles: tokio::sync::Mutex::new(profiles),
            install: tokio::sync::Mutex::new(()),
            admin_token: admin_token.filter(|t| !t.is_empty()),
        }
    }

    /// Loads the snapshot at `snapshot_path` (refusing a corrupt one) and
    /// opens `users.jsonl` in `users_dir`.
    pub fn open(snapshot_path: &Path, users_dir: &Path, admin_token: Option<String>) -> Result<Self, StartupError> {
        let served = Served::load(snapshot_path)?;
        let profiles = ProfileStore::open(users_dir)?;
        Ok(Self::new(served, snapshot_path.to_path_buf(), profiles, admin_token))
    }

    pub fn current(&self) -> Arc<Served> {
        Arc::clone(&self.current.read().expect("snapshot lock poisoned"))
    }

    pub fn snapshot_path(&self) -> &Path {
        &self.snapshot_path
    }

    fn swap(&self, served: Served) -> SnapshotInfo {
        let info = served.info();
        *self.current.write().expect("snapshot lock poisoned") = Arc::new(served);
        tracing::info!(version = info.corpus_version, checksum = %info.content_checksum, "snapshot installed");
        info
    }

    /// Re-reads the snapshot directory and swaps it in. On failure the
    /// served snapshot is left as it was.
    pub async fn reload(self: &Arc<Self>) -> Result<SnapshotInfo, ReloadError> {
        let _guard = self.install.lock().await;
        let path = self.snapshot_path.clone();
        let served = tokio::task::spawn_blocking(move || Served::load(&path))
            .await
            .expect("reload task panicked")?;
        Ok(self.swap(served))
    }

    /// Validates an uploaded snapshot, persists it over the served
    /// directory and swaps it in. Versions must increase.
    pub async fn install_upload(self: &Arc<Self>, staged: PathBuf) -> Result<SnapshotInfo, ReloadError> {
        let _guard = self.install.lock().await;
        let served_version = self.current().manifest.corpus_version;
        let target = self.snapshot_path.clone();
        let served = tokio::task::spawn_blocking(move || -> Result<Served, ReloadError> {
            let offered = Served::load(&staged)?;
            if offered.manifest.corpus_version <= served_version {
                return Err(ReloadError::StaleVersion {
                    offered: offered.manifest.corpus_version,
                    served: served_version,
                });
            }
            save_snapshot(&offered.snapshot, &target)?;
            // Serve exactly what is now on disk.
            Ok(Served::load(&target)?)
        })
        .await
        .expect("install task panicked")?;
        Ok(self.swap(served))
    }
}
