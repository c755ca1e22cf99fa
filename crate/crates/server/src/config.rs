use std::net::SocketAddr;
use std::path::PathBuf;

use pubcluster_core::domain::{parse_cluster_config, ClusterConfig, ConfigError};
use serde::{Deserialize, Serialize};

pub const DEFAULT_ADDR: &str = "127.0.0.1:8080";

/// How the clock advances.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Ticks advance only through the admin tick route.
    #[default]
    Sim,
    /// A timer enqueues one tick every `tick_seconds`.
    Realtime,
}

impl Mode {
    pub fn parse(s: &str) -> Option<Mode> {
        match s {
            "sim" => Some(Mode::Sim),
            "realtime" => Some(Mode::Realtime),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FsyncPolicy {
    /// fsync after every appended command group.
    #[default]
    Always,
    /// Leave flushing to the OS.
    Never,
}

impl FsyncPolicy {
    pub fn parse(s: &str) -> Option<FsyncPolicy> {
        match s {
            "always" => Some(FsyncPolicy::Always),
            "never" => Some(FsyncPolicy::Never),
            _ => None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ServerConfig {
    pub cluster: ClusterConfig,
    pub seed: u64,
    pub addr: SocketAddr,
    pub mode: Mode,
    pub admin_secret: Option<String>,
    /// Holds `events.jsonl`. Without it the log lives in memory only.
    pub data_dir: Option<PathBuf>,
    pub fsync: FsyncPolicy,
    /// Built console assets served at `/`.
    pub console_dir: Option<PathBuf>,
}

#[derive(Debug, thiserror::Error)]
pub enum SetupError {
    #[error("config: {0}")]
    Config(#[from] ConfigError),
    #[error("{name}: {message}")]
    Env { name: &'static str, message: String },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("event log: {0}")]
    Replay(#[from] pubcluster_core::ReplayError),
}

impl ServerConfig {
    pub fn new(cluster: ClusterConfig, seed: u64) -> Self {
        Self {
            cluster,
            seed,
            addr: DEFAULT_ADDR.parse().expect("valid default"),
            mode: Mode::Sim,
            admin_secret: None,
            data_dir: None,
            fsync: FsyncPolicy::Always,
            console_dir: None,
        }
    }

    /// Reads the PUBCLUSTER_* environment. `config_path`, when given,
    /// overrides PUBCLUSTER_CONFIG.
    pub fn from_env(config_path: Option<PathBuf>) -> Result<Self, SetupError> {
        let var = |name: &str| std::env::var(name).ok().filter(|v| !v.is_empty());
        let path = config_path
            .or_else(|| var("PUBCLUSTER_CONFIG").map(PathBuf::from))
            .ok_or(SetupError::Env {
                name: "PUBCLUSTER_CONFIG",
                message: "no cluster config given".into(),
            })?;
        let cluster = parse_cluster_config(&std::fs::read(&path)?)?;
        let seed = match var("PUBCLUSTER_SEED") {
            Some(s) => s.parse().map_err(|_| SetupError::Env {
                name: "PUBCLUSTER_SEED",
                message: format!("not a 64-bit unsigned integer: {s}"),
            })?,
            None => 0,
        };
        let mut cfg = Self::new(cluster, seed);
        if let Some(a) = var("PUBCLUSTER_ADDR") {
            cfg.addr = a.parse().map_err(|_| SetupError::Env {
                name: "PUBCLUSTER_ADDR",
                message: format!("not a socket address: {a}"),
            })?;
        }
        if let Some(m) = var("PUBCLUSTER_MODE") {
            cfg.mode = Mode::parse(&m).ok_or(SetupError::Env {
                name: "PUBCLUSTER_MODE",
                message: format!("expected sim or realtime, got {m}"),
            })?;
        }
        if let Some(f) = var("PUBCLUSTER_FSYNC") {
            cfg.fsync = FsyncPolicy::parse(&f).ok_or(SetupError::Env {
                name: "PUBCLUSTER_FSYNC",
                message: format!("expected always or never, got {f}"),
            })?;
        }
        cfg.admin_secret = var("PUBCLUSTER_ADMIN_SECRET");
        cfg.data_dir = var("PUBCLUSTER_DATA_DIR").map(PathBuf::from);
        cfg.console_dir = var("PUBCLUSTER_CONSOLE_DIR").map(PathBuf::from);
        Ok(cfg)
    }
}
