//! HTTP gateway for the cluster: token auth, the single command queue,
//! event-log persistence with replay on startup, and telemetry streaming.

pub mod config;
pub mod error;
pub mod gateway;
pub mod http;
pub mod store;

use std::net::SocketAddr;
use std::sync::Arc;
use std::time::Duration;

use pubcluster_core::world::Command;
use tokio::net::TcpListener;
use tokio::sync::oneshot;
use tokio::task::JoinHandle;

pub use config::{FsyncPolicy, Mode, ServerConfig, SetupError};
pub use error::{ApiError, ErrorBody};
pub use gateway::{Gateway, Handle, TelemetryFrame};
pub use store::{EventStore, FileStore, FlakyStore, MemoryStore};

/// A running gateway.
pub struct Server {
    addr: SocketAddr,
    handle: Handle,
    shutdown: Option<oneshot::Sender<()>>,
    task: JoinHandle<std::io::Result<()>>,
    ticker: Option<JoinHandle<()>>,
}

impl Server {
    /// Opens the configured store (the data dir's log, or memory) and starts
    /// serving.
    pub async fn start(cfg: ServerConfig) -> Result<Server, SetupError> {
        let store: Box<dyn EventStore> = match &cfg.data_dir {
            Some(dir) => Box::new(FileStore::open(dir, cfg.fsync)?),
            None => Box::new(MemoryStore::new()),
        };
        Self::start_with_store(cfg, store).await
    }

    pub async fn start_with_store(cfg: ServerConfig, store: Box<dyn EventStore>) -> Result<Server, SetupError> {
        let (gateway, log) = Gateway::recover(&cfg, store)?;
        tracing::info!(events = log.len(), tick = gateway.world().tick(), "recovered world");
        let handle = Handle::spawn(gateway, log);
        let state = http::AppState {
            gateway: handle.clone(),
            admin_secret: cfg.admin_secret.as_deref().map(Arc::from),
        };
        let app = http::router(state, cfg.console_dir.as_deref());
        let listener = TcpListener::bind(cfg.addr).await?;
        let addr = listener.local_addr()?;
        let (tx, rx) = oneshot::channel::<()>();
        let task = tokio::spawn(async move {
            axum::serve(listener, app)
                .with_graceful_shutdown(async {
                    let _ = rx.await;
                })
                .await
        });
        let ticker = (cfg.mode == Mode::Realtime).then(|| {
            let h = handle.clone();
            let period = Duration::from_secs_f64(cfg.cluster.tick_seconds);
            tokio::spawn(async move {
                let mut interval = tokio::time::interval(period);
                interval.tick().await;
                loop {
                    interval.tick().await;
                    if let Err(e) = h.execute(Command::Tick { n: 1 }).await {
                        tracing::error!(code = e.code(), "timer tick failed");
                        if e.code() == "Unavailable" {
                            break;
                        }
                    }
                }
            })
        });
        tracing::info!(%addr, mode = ?cfg.mode, "listening");
        Ok(Server {
            addr,
            handle,
            shutdown: Some(tx),
            task,
            ticker,
        })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    /// Base URL of the API, e.g. `http://127.0.0.1:8080/api/v1`.
    pub fn api_url(&self) -> String {
        format!("http://{}/api/v1", self.addr)
    }

    pub fn handle(&self) -> &Handle {
        &self.handle
    }

    /// Stops accepting connections and waits for in-flight requests.
    pub async fn shutdown(mut self) {
        if let Some(t) = self.ticker.take() {
            t.abort();
        }
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        let _ = (&mut self.task).await;
    }
}

/// Runs until ctrl-c.
pub async fn serve(cfg: ServerConfig) -> Result<(), SetupError> {
    let server = Server::start(cfg).await?;
    tokio::signal::ctrl_c().await?;
    server.shutdown().await;
    Ok(())
}
