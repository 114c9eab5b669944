//! REST back-end and pipeline commands for the literature atlas.

pub mod api;
pub mod commands;
pub mod config;
pub mod remote;
pub mod state;

use std::future::Future;
use std::path::PathBuf;
use std::sync::Arc;

use thiserror::Error;

pub use api::router;
pub use state::{AppState, Served, SnapshotInfo};

#[derive(Debug, Error)]
pub enum CommandError {
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Ingest(#[from] litatlas_ingest::IngestError),
    #[error(transparent)]
    Store(#[from] litatlas_core::store::StoreError),
    #[error(transparent)]
    Pipeline(#[from] litatlas_core::pipeline::PipelineError),
    #[error("remote store: {0}")]
    Remote(String),
    #[error("i/o: {0}")]
    Io(String),
}

/// Serves `state` on `listener` until `shutdown` resolves. SIGHUP reloads
/// the snapshot from disk.
pub async fn serve(
    listener: tokio::net::TcpListener,
    state: Arc<AppState>,
    ui_dir: Option<PathBuf>,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    #[cfg(unix)]
    {
        let state = Arc::clone(&state);
        let mut hup = tokio::signal::unix::signal(tokio::signal::unix::SignalKind::hangup())?;
        tokio::spawn(async move {
            while hup.recv().await.is_some() {
                if let Err(e) = state.reload().await {
                    tracing::error!(error = %e, "reload on SIGHUP failed; keeping the served snapshot");
                }
            }
        });
    }
    let app = router(state, ui_dir.as_deref());
    tracing::info!(addr = %listener.local_addr()?, "serving");
    axum::serve(listener, app).with_graceful_shutdown(shutdown).await
}
