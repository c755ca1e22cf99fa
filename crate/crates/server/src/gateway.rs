//! The single writer. Every mutation goes through one queue, is applied to
//! a scratch copy of the world, persisted, and only then made visible.

use std::sync::{Arc, RwLock};

use pubcluster_core::auth::{Role, Token};
use pubcluster_core::domain::{AllocationMode, BlockId, NodeId};
use pubcluster_core::registry::PowerState;
use pubcluster_core::world::{Command, Reply, Trigger, World};
use pubcluster_core::{replay, CommandError, Event, EventKind};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tokio::sync::{broadcast, mpsc, oneshot, watch};

use crate::config::{Mode, ServerConfig, SetupError};
use crate::error::ApiError;
use crate::store::EventStore;

/// Separates the token stream from the world's sensor stream.
const TOKEN_STREAM: u64 = 0x746f_6b65_6e73;

/// Per-node reading in a telemetry frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeTelemetry {
    pub node_id: NodeId,
    pub power: PowerState,
    pub temperature_c: f64,
    pub humidity_pct: f64,
    pub block_id: Option<BlockId>,
}

/// One frame per tick on the `nodes` telemetry scope.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TelemetryFrame {
    pub tick: u64,
    pub overheat_trip_c: f64,
    pub nodes: Vec<NodeTelemetry>,
}

impl TelemetryFrame {
    pub fn of(world: &World) -> Self {
        Self {
            tick: world.tick(),
            overheat_trip_c: world.config().thermal.overheat_trip_c,
            nodes: world
                .registry()
                .records()
                .map(|r| NodeTelemetry {
                    node_id: r.id(),
                    power: r.power,
                    temperature_c: r.temperature_c,
                    humidity_pct: r.humidity_pct,
                    block_id: r.block_id,
                })
                .collect(),
        }
    }
}

enum TokenSource {
    /// Reproducible values for sim mode.
    Seeded(Box<ChaCha8Rng>),
    Os,
}

impl TokenSource {
    fn next(&mut self) -> String {
        let mut bytes = [0u8; 16];
        match self {
            TokenSource::Seeded(rng) => rng.fill_bytes(&mut bytes),
            TokenSource::Os => rand::rngs::OsRng.fill_bytes(&mut bytes),
        }
        hex::encode(bytes)
    }
}

/// What a caller asks of the gateway.
#[derive(Debug, Clone)]
pub enum Op {
    Execute(Command),
    IssueToken(Role),
}

#[derive(Debug, Clone)]
pub struct Outcome {
    pub reply: Reply,
    pub events: Vec<Event>,
}

pub struct Gateway {
    world: World,
    store: Box<dyn EventStore>,
    tokens: TokenSource,
    mode: Mode,
}

impl Gateway {
    /// Rebuilds the world from whatever the store already holds.
    pub fn recover(cfg: &ServerConfig, store: Box<dyn EventStore>) -> Result<(Self, Vec<Event>), SetupError> {
        let log = store.load()?;
        let world = replay(cfg.cluster.clone(), cfg.seed, &log)?;
        let tokens = match cfg.mode {
            Mode::Sim => {
                let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ TOKEN_STREAM);
                let mut skip = [0u8; 16];
                for _ in log.iter().filter(|e| e.kind == EventKind::TokenIssued) {
                    rng.fill_bytes(&mut skip);
                }
                TokenSource::Seeded(Box::new(rng))
            }
            Mode::Realtime => TokenSource::Os,
        };
        Ok((
            Self {
                world,
                store,
                tokens,
                mode: cfg.mode,
            },
            log,
        ))
    }

    pub fn world(&self) -> &World {
        &self.world
    }

    pub fn apply(&mut self, op: Op) -> Result<(Outcome, Vec<TelemetryFrame>), ApiError> {
        let mut next = self.world.clone();
        let mut events = Vec::new();
        let mut frames = Vec::new();
        let reply = match op {
            Op::IssueToken(role) => loop {
                let value = self.tokens.next();
                if next.token(&value).is_none() {
                    let applied = next.execute(Command::IssueToken { value, role })?;
                    events.extend(applied.events);
                    break applied.reply;
                }
            },
            Op::Execute(Command::Tick { n }) => {
                if n < 1 {
                    return Err(CommandError::InvalidRequest("n must be >= 1".into()).into());
                }
                for _ in 0..n {
                    let applied = next.execute(Command::Tick { n: 1 })?;
                    events.extend(applied.events);
                    if next.config().allocation_mode == AllocationMode::Auto {
                        auto_allocate(&mut next, &mut events);
                    }
                    frames.push(TelemetryFrame::of(&next));
                }
                Reply::Ticked { tick: next.tick() }
            }
            Op::Execute(cmd) => {
                let applied = next.execute(cmd)?;
                events.extend(applied.events);
                applied.reply
            }
        };
        if !events.is_empty() {
            self.store.append(&events).map_err(|e| ApiError::storage(&e))?;
        }
        self.world = next;
        Ok((Outcome { reply, events }, frames))
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }
}

/// Auto mode: plan and activate right after a tick.
fn auto_allocate(world: &mut World, events: &mut Vec<Event>) {
    if world.allocatable_requests().is_empty() || world.eligible_pool().is_empty() {
        return;
    }
    let Ok(applied) = world.execute(Command::RunAllocation {
        trigger: Trigger::Auto,
    }) else {
        return;
    };
    events.extend(applied.events);
    if let Reply::Plan {
        plan_id: Some(plan_id),
        plan,
    } = applied.reply
    {
        if !plan.is_empty() {
            if let Ok(activated) = world.execute(Command::ActivatePlan { plan_id }) {
                events.extend(activated.events);
            }
        }
    }
}

struct Msg {
    op: Op,
    reply: oneshot::Sender<Result<Outcome, ApiError>>,
}

/// Cheap, cloneable access to the gateway from request handlers.
#[derive(Clone)]
pub struct Handle {
    tx: mpsc::Sender<Msg>,
    snapshot: watch::Receiver<Arc<World>>,
    log: Arc<RwLock<Vec<Event>>>,
    events: broadcast::Sender<Event>,
    frames: broadcast::Sender<Arc<TelemetryFrame>>,
    mode: Mode,
}

impl Handle {
    /// Starts the writer thread.
    pub fn spawn(gateway: Gateway, log: Vec<Event>) -> Handle {
        let (tx, mut rx) = mpsc::channel::<Msg>(1024);
        let (snap_tx, snapshot) = watch::channel(Arc::new(gateway.world().clone()));
        let log = Arc::new(RwLock::new(log));
        let (events, _) = broadcast::channel(4096);
        let (frames, _) = broadcast::channel(1024);
        let handle = Handle {
            tx,
            snapshot,
            log: log.clone(),
            events: events.clone(),
            frames: frames.clone(),
            mode: gateway.mode(),
        };
        let mut gateway = gateway;
        std::thread::Builder::new()
            .name("gateway".into())
            .spawn(move || {
                while let Some(msg) = rx.blocking_recv() {
                    let result = gateway.apply(msg.op);
                    let result = result.map(|(outcome, tick_frames)| {
                        if !outcome.events.is_empty() {
                            log.write().expect("log lock").extend(outcome.events.iter().cloned());
                            snap_tx.send_replace(Arc::new(gateway.world().clone()));
                            for e in &outcome.events {
                                let _ = events.send(e.clone());
                            }
                        }
                        for f in tick_frames {
                            let _ = frames.send(Arc::new(f));
                        }
                        outcome
                    });
                    let _ = msg.reply.send(result);
                }
            })
            .expect("spawn gateway thread");
        handle
    }

    pub async fn call(&self, op: Op) -> Result<Outcome, ApiError> {
        let (reply, rx) = oneshot::channel();
        self.tx
            .send(Msg { op, reply })
            .await
            .map_err(|_| ApiError::unavailable())?;
        rx.await.map_err(|_| ApiError::unavailable())?
    }

    pub async fn execute(&self, command: Command) -> Result<Outcome, ApiError> {
        self.call(Op::Execute(command)).await
    }

    pub async fn issue_token(&self, role: Role) -> Result<Token, ApiError> {
        match self.call(Op::IssueToken(role)).await?.reply {
            Reply::Token(t) => Ok(t),
            other => unreachable!("token issuance replied {other:?}"),
        }
    }

    /// Latest committed world.
    pub fn world(&self) -> Arc<World> {
        self.snapshot.borrow().clone()
    }

    /// Committed events with `seq > since`.
    pub fn events_since(&self, since: u64) -> Vec<Event> {
        let log = self.log.read().expect("log lock");
        // seq starts at 1 and is gapless
        let start = (since as usize).min(log.len());
        log[start..].to_vec()
    }

    /// Sequence number of the newest committed event, 0 for an empty log.
    pub fn last_seq(&self) -> u64 {
        self.log.read().expect("log lock").len() as u64
    }

    pub fn subscribe_events(&self) -> broadcast::Receiver<Event> {
        self.events.subscribe()
    }

    pub fn subscribe_frames(&self) -> broadcast::Receiver<Arc<TelemetryFrame>> {
        self.frames.subscribe()
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }
}
