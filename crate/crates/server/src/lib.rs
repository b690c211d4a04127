//! HTTP service over a loaded [`Engine`]: search, votes, stats and the
//! static `/ui` mount.

mod app;
pub mod config;
pub mod stats;
pub mod votes;

use std::future::{Future, IntoFuture};
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use annserve_core::engine::Engine;
use tokio::net::TcpListener;

pub use app::{ErrorBody, StatsResponse, CacheSummary};
pub use config::ServeConfig;

#[derive(Debug, thiserror::Error)]
pub enum ServeError {
    #[error("config {path}: {message}")]
    Config { path: PathBuf, message: String },

    #[error("invalid config: {0}")]
    Invalid(String),

    #[error(transparent)]
    Engine(#[from] annserve_core::Error),

    #[error("vote log {path}: {source}")]
    VoteLog {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("cannot listen on {addr}: {source}")]
    Bind {
        addr: String,
        #[source]
        source: std::io::Error,
    },

    #[error("server I/O: {0}")]
    Io(#[from] std::io::Error),
}

/// A bound, ready service. Artifacts are already open, so `/healthz`
/// answers ready from the first accepted connection.
pub struct Server {
    listener: TcpListener,
    state: Arc<app::AppState>,
    ui_dir: Option<PathBuf>,
    drain: Duration,
}

impl Server {
    /// Opens the engine named by `config` and binds its listen address.
    pub async fn bind(config: &ServeConfig) -> Result<Self, ServeError> {
        config.validate()?;
        let engine_config = config.engine.clone();
        let engine = tokio::task::spawn_blocking(move || Engine::open(&engine_config))
            .await
            .map_err(|e| ServeError::Io(std::io::Error::other(e)))??;
        Self::with_engine(engine, config).await
    }

    /// Serves an already opened engine; `config.engine` is ignored.
    pub async fn with_engine(engine: Engine, config: &ServeConfig) -> Result<Self, ServeError> {
        config.validate()?;
        let votes = votes::VoteLog::open(&config.vote_log).map_err(|source| ServeError::VoteLog {
            path: config.vote_log.clone(),
            source,
        })?;
        let listener = TcpListener::bind(&config.listen)
            .await
            .map_err(|source| ServeError::Bind {
                addr: config.listen.clone(),
                source,
            })?;
        let state = Arc::new(app::AppState::new(engine, votes, config));
        Ok(Self {
            listener,
            state,
            ui_dir: config.ui_dir.clone(),
            drain: Duration::from_millis(config.drain_ms),
        })
    }

    pub fn local_addr(&self) -> std::io::Result<SocketAddr> {
        self.listener.local_addr()
    }

    /// Serves until `shutdown` resolves, then stops accepting and gives
    /// in-flight requests up to the drain window before returning.
    pub async fn run(self, shutdown: impl Future<Output = ()> + Send + 'static) -> Result<(), ServeError> {
        let router = app::router(self.state.clone(), self.ui_dir.as_deref());
        let (signalled_tx, signalled_rx) = tokio::sync::oneshot::channel::<()>();
        let serve = axum::serve(self.listener, router).with_graceful_shutdown(async move {
            shutdown.await;
            tracing::info!("shutting down, draining in-flight requests");
            let _ = signalled_tx.send(());
        });
        let mut handle = tokio::spawn(serve.into_future());
        let served = tokio::select! {
            biased;
            r = &mut handle => Some(r),
            _ = signalled_rx => None,
        };
        let served = match served {
            Some(r) => r,
            None => match tokio::time::timeout(self.drain, &mut handle).await {
                Ok(r) => r,
                Err(_) => {
                    tracing::warn!(drain_ms = self.drain.as_millis() as u64, "drain window elapsed, aborting");
                    handle.abort();
                    Ok(Ok(()))
                }
            },
        };
        let sync = self.state.votes.sync();
        served.map_err(|e| ServeError::Io(std::io::Error::other(e)))??;
        sync.map_err(|source| ServeError::VoteLog {
            path: self.state.votes.path().to_path_buf(),
            source,
        })
    }
}

/// Resolves on SIGTERM or Ctrl-C.
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
}
