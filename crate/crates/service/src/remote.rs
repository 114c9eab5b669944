//! Publishing a locally built snapshot to a running service.
//!
//! The snapshot directory travels as a flat tar archive. The receiving side
//! accepts only the known snapshot file names, then validates checksums and
//! references by loading the result before installing it.

use std::io::Read;
use std::path::Path;
use std::time::Duration;

use litatlas_core::store::{MANIFEST_FILE, SNAPSHOT_FILES};

use crate::state::SnapshotInfo;
use crate::CommandError;

/// Archives the files of a snapshot directory.
pub fn pack_snapshot(dir: &Path) -> Result<Vec<u8>, CommandError> {
    let mut builder = tar::Builder::new(Vec::new());
    for name in SNAPSHOT_FILES.iter().copied().chain([MANIFEST_FILE]) {
        builder
            .append_path_with_name(dir.join(name), name)
            .map_err(|e| CommandError::Io(format!("{}: {e}", dir.join(name).display())))?;
    }
    builder.into_inner().map_err(|e| CommandError::Io(e.to_string()))
}

/// Extracts an uploaded archive into `dir`. Anything other than a regular
/// file with a known snapshot file name is rejected.
pub fn unpack_snapshot(archive: &[u8], dir: &Path) -> Result<(), String> {
    let mut tar = tar::Archive::new(archive);
    let mut seen = std::collections::BTreeSet::new();
    for entry in tar.entries().map_err(|e| e.to_string())? {
        let mut entry = entry.map_err(|e| e.to_string())?;
        let path = entry.path().map_err(|e| e.to_string())?.into_owned();
        let name = path.to_str().unwrap_or_default().to_string();
        let known = name == MANIFEST_FILE || SNAPSHOT_FILES.contains(&name.as_str());
        if !known || !entry.header().entry_type().is_file() {
            return Err(format!("unexpected archive entry {}", path.display()));
        }
        if !seen.insert(name.clone()) {
            return Err(format!("duplicate archive entry {name}"));
        }
        let mut bytes = Vec::new();
        entry.read_to_end(&mut bytes).map_err(|e| e.to_string())?;
        std::fs::write(dir.join(&name), bytes).map_err(|e| e.to_string())?;
    }
    Ok(())
}

/// Blocking client for the admin endpoints of a running service.
pub struct RemoteStore {
    base: String,
    token: Option<String>,
    client: reqwest::blocking::Client,
}

impl RemoteStore {
    pub fn new(base: &str, token: Option<String>) -> Result<Self, CommandError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(600))
            .build()
            .map_err(|e| CommandError::Remote(e.to_string()))?;
        Ok(RemoteStore {
            base: base.trim_end_matches('/').to_string(),
            token,
            client,
        })
    }

    fn decode(resp: reqwest::blocking::Response) -> Result<SnapshotInfo, CommandError> {
        let status = resp.status();
        let body = resp.text().map_err(|e| CommandError::Remote(e.to_string()))?;
        if !status.is_success() {
            return Err(CommandError::Remote(format!("{status}: {body}")));
        }
        serde_json::from_str(&body).map_err(|e| CommandError::Remote(format!("bad response {body:?}: {e}")))
    }

    /// The served snapshot's version and checksum.
    pub fn health(&self) -> Result<SnapshotInfo, CommandError> {
        let resp = self
            .client
            .get(format!("{}/api/health", self.base))
            .send()
            .map_err(|e| CommandError::Remote(e.to_string()))?;
        Self::decode(resp)
    }

    pub fn upload(&self, archive: Vec<u8>) -> Result<SnapshotInfo, CommandError> {
        let mut req = self
            .client
            .put(format!("{}/api/admin/snapshot", self.base))
            .header("content-type", "application/x-tar")
            .body(archive);
        if let Some(t) = &self.token {
            req = req.bearer_auth(t);
        }
        Self::decode(req.send().map_err(|e| CommandError::Remote(e.to_string()))?)
    }
}
