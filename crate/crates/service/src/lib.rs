//! Trial-conduct service: create a trial, record outcomes patient by patient,
//! and read the next recommended dose with posterior summaries.
//!
//! Every trial is an append-only event log; sessions are rebuilt by replay on
//! startup. Stochastic designs draw from a per-trial seed stored in the
//! creation event, so replays reproduce every recommendation.
//!
//! Environment:
//!
//! - `DOSEFIND_BIND`: listen address (default `127.0.0.1:8080`)
//! - `DOSEFIND_DATA_DIR`: event log directory (default `./dosefind-data`)
//! - `DOSEFIND_TOKEN`: optional static bearer token

pub mod api;
pub mod error;
pub mod registry;
pub mod session;
pub mod store;

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;

pub use error::ServiceError;
pub use registry::Registry;
pub use session::{decision_rng, OutcomeInput, PosteriorSummary, TrialConfig, TrialSession, TrialView};
pub use store::{EventStore, FileStore, MemoryStore};

pub const DEFAULT_BIND: &str = "127.0.0.1:8080";
pub const DEFAULT_DATA_DIR: &str = "dosefind-data";

#[derive(Debug, Clone, PartialEq)]
pub struct Settings {
    pub bind: SocketAddr,
    pub data_dir: PathBuf,
    pub token: Option<String>,
}

impl Settings {
    pub fn from_env() -> Result<Self, ServiceError> {
        let bind = std::env::var("DOSEFIND_BIND").unwrap_or_else(|_| DEFAULT_BIND.to_string());
        let bind = bind
            .parse()
            .map_err(|e| ServiceError::field("DOSEFIND_BIND", format!("{bind:?}: {e}")))?;
        let data_dir = std::env::var_os("DOSEFIND_DATA_DIR")
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from(DEFAULT_DATA_DIR));
        let token = std::env::var("DOSEFIND_TOKEN").ok().filter(|t| !t.is_empty());
        Ok(Self { bind, data_dir, token })
    }
}

/// Binds, serves until `shutdown` resolves, then returns.
pub async fn serve<F>(settings: Settings, shutdown: F) -> Result<(), ServiceError>
where
    F: std::future::Future<Output = ()> + Send + 'static,
{
    let registry = Registry::open(Box::new(FileStore::open(&settings.data_dir)?))?;
    let state = api::AppState {
        registry: Arc::new(registry),
        token: settings.token.map(Arc::from),
    };
    let listener = tokio::net::TcpListener::bind(settings.bind)
        .await
        .map_err(|e| ServiceError::Storage(format!("cannot bind {}: {e}", settings.bind)))?;
    log::info!("listening on {}", settings.bind);
    axum::serve(listener, api::router(state))
        .with_graceful_shutdown(shutdown)
        .await
        .map_err(|e| ServiceError::Storage(format!("server error: {e}")))
}

/// Resolves on Ctrl-C or SIGTERM.
pub async fn shutdown_signal() {
    let ctrl_c = async {
        let _ = tokio::signal::ctrl_c().await;
    };
    #[cfg(unix)]
    let term = async {
        match tokio::signal::unix::signal(tokio::signal::unix::SignalKind::terminate()) {
            Ok(mut s) => {
                s.recv().await;
            }
            Err(_) => std::future::pending::<()>().await,
        }
    };
    #[cfg(not(unix))]
    let term = std::future::pending::<()>();
    tokio::select! {
        _ = ctrl_c => {}
        _ = term => {}
    }
    log::info!("shutting down");
}
