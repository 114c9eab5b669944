use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use chrono::Utc;
use clap::{Parser, Subcommand};
use litatlas::commands::{run_build, run_ingest, snapshot_dir};
use litatlas::config::{AppConfig, StoreLocation, ADMIN_TOKEN_ENV, STORE_ENV};
use litatlas::{AppState, CommandError};
use litatlas_ingest::{CassetteTransport, HttpTransport, ThreadSleep, Transport};
use serde::Serialize;

#[derive(Parser)]
#[command(name = "litatlas", version, about = "Literature map: harvest, build and serve")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fetch the configured sources into the corpus.
    Ingest {
        #[arg(long)]
        config: PathBuf,
        /// Replay recorded responses from this directory instead of the network.
        #[arg(long)]
        cassette: Option<PathBuf>,
    },
    /// Build a snapshot from the corpus and publish it.
    Build {
        #[arg(long)]
        config: PathBuf,
        /// Store directory or base URL of a running service.
        #[arg(long, env = STORE_ENV)]
        store: Option<String>,
    },
    /// Serve a snapshot over HTTP.
    Serve {
        /// Snapshot directory; defaults to `$LITATLAS_STORE/snapshot`.
        #[arg(long)]
        snapshot: Option<PathBuf>,
        #[arg(long, default_value = "127.0.0.1:8080")]
        bind: String,
        /// Directory holding users.jsonl; defaults to the snapshot's parent.
        #[arg(long)]
        users: Option<PathBuf>,
        /// Static web client served under `/`.
        #[arg(long)]
        ui: Option<PathBuf>,
    },
}

fn print_json(value: &impl Serialize) {
    println!("{}", serde_json::to_string_pretty(value).expect("reports serialize"));
}

fn admin_token() -> Option<String> {
    std::env::var(ADMIN_TOKEN_ENV).ok().filter(|t| !t.is_empty())
}

fn ingest(config: PathBuf, cassette: Option<PathBuf>) -> Result<(), CommandError> {
    let config = AppConfig::load(&config)?;
    let transport: Box<dyn Transport> = match cassette {
        Some(dir) => Box::new(CassetteTransport::load(&dir).map_err(CommandError::Io)?),
        None => Box::new(
            HttpTransport::new(Duration::from_secs(config.ingest.timeout_secs)).map_err(CommandError::Io)?,
        ),
    };
    print_json(&run_ingest(&config, transport.as_ref(), &ThreadSleep, Utc::now())?);
    Ok(())
}

fn build(config: PathBuf, store: Option<String>) -> Result<(), CommandError> {
    let config = AppConfig::load(&config)?;
    let location = StoreLocation::resolve(store.as_deref(), None, &config);
    print_json(&run_build(&config, &location, admin_token(), Utc::now())?);
    Ok(())
}

fn serve(snapshot: Option<PathBuf>, bind: String, users: Option<PathBuf>, ui: Option<PathBuf>) -> Result<(), String> {
    let snapshot = snapshot
        .or_else(|| std::env::var_os(STORE_ENV).map(|s| snapshot_dir(&PathBuf::from(s))))
        .ok_or_else(|| format!("pass --snapshot or set {STORE_ENV}"))?;
    let users = users
        .or_else(|| snapshot.parent().map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("."));
    let state = Arc::new(AppState::open(&snapshot, &users, admin_token()).map_err(|e| e.to_string())?);
    let runtime = tokio::runtime::Runtime::new().map_err(|e| e.to_string())?;
    runtime.block_on(async move {
        let listener = tokio::net::TcpListener::bind(&bind)
            .await
            .map_err(|e| format!("cannot bind {bind}: {e}"))?;
        let shutdown = async {
            let _ = tokio::signal::ctrl_c().await;
        };
        litatlas::serve(listener, state, ui, shutdown).await.map_err(|e| e.to_string())
    })
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()),
        )
        .with_writer(std::io::stderr)
        .init();
    let result = match Cli::parse().command {
        Command::Ingest { config, cassette } => ingest(config, cassette).map_err(|e| e.to_string()),
        Command::Build { config, store } => build(config, store).map_err(|e| e.to_string()),
        Command::Serve {
            snapshot,
            bind,
            users,
            ui,
        } => serve(snapshot, bind, users, ui),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("litatlas: {e}");
            ExitCode::FAILURE
        }
    }
}
