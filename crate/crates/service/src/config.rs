//! The TOML file read by `ingest` and `build`.

use std::path::{Path, PathBuf};

use litatlas_core::pipeline::PipelineConfig;
use litatlas_ingest::{Endpoints, SourceQuery};
use serde::Deserialize;

use crate::CommandError;

/// Overrides where `build` publishes snapshots and where `serve` looks for one.
pub const STORE_ENV: &str = "LITATLAS_STORE";
/// Bearer token for the admin endpoints and for remote publishing.
pub const ADMIN_TOKEN_ENV: &str = "LITATLAS_ADMIN_TOKEN";
/// Snapshot directory name inside a store directory.
pub const SNAPSHOT_DIR: &str = "snapshot";

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AppConfig {
    /// Holds `corpus.jsonl`; also the default snapshot store.
    pub data_dir: PathBuf,
    /// Snapshot destination: a directory, or the base URL of a running
    /// service. Defaults to `data_dir`.
    #[serde(default)]
    pub store: Option<String>,
    #[serde(default)]
    pub pipeline: PipelineConfig,
    #[serde(default)]
    pub ingest: IngestSettings,
    #[serde(default)]
    pub sources: Vec<SourceQuery>,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IngestSettings {
    pub eutils_base: String,
    pub arxiv_base: String,
    pub timeout_secs: u64,
}

impl Default for IngestSettings {
    fn default() -> Self {
        let e = Endpoints::default();
        IngestSettings {
            eutils_base: e.eutils,
            arxiv_base: e.arxiv,
            timeout_secs: 30,
        }
    }
}

impl IngestSettings {
    pub fn endpoints(&self) -> Endpoints {
        Endpoints {
            eutils: self.eutils_base.clone(),
            arxiv: self.arxiv_base.clone(),
        }
    }
}

impl AppConfig {
    /// Reads the file; a relative `data_dir` is taken relative to the file.
    pub fn load(path: &Path) -> Result<Self, CommandError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CommandError::Config(format!("{}: {e}", path.display())))?;
        let mut config: AppConfig =
            toml::from_str(&text).map_err(|e| CommandError::Config(format!("{}: {e}", path.display())))?;
        if config.data_dir.is_relative() {
            let base = path.parent().unwrap_or(Path::new("."));
            config.data_dir = base.join(&config.data_dir);
        }
        config
            .pipeline
            .validate()
            .map_err(|e| CommandError::Config(e.to_string()))?;
        Ok(config)
    }
}

/// Where a snapshot is published.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum StoreLocation {
    /// Store directory; the snapshot lives in `<dir>/snapshot`.
    Dir(PathBuf),
    /// Base URL of a running service.
    Remote(String),
}

impl StoreLocation {
    pub fn parse(s: &str) -> Self {
        if s.starts_with("http://") || s.starts_with("https://") {
            StoreLocation::Remote(s.trim_end_matches('/').to_string())
        } else {
            StoreLocation::Dir(PathBuf::from(s))
        }
    }

    /// Command-line flag, then the environment, then the config file.
    pub fn resolve(flag: Option<&str>, env: Option<&str>, config: &AppConfig) -> Self {
        match flag.or(env).or(config.store.as_deref()) {
            Some(s) => Self::parse(s),
            None => StoreLocation::Dir(config.data_dir.clone()),
        }
    }
}
