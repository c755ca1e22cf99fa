//! Rebuilding a world from its event log.
//!
//! The log is a sequence of command groups. The leading event of each group
//! is decoded back into the command that produced it; re-executing that
//! command against the partially rebuilt world must yield exactly the events
//! that follow in the log. Anything else means the log is corrupt.

use thiserror::Error;

use crate::auth::Actor;
use crate::domain::{ClusterConfig, ConfigError};
use crate::event::{self, Event, EventKind, PowerCause};
use crate::world::{Command, World};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ReplayError {
    #[error("corrupt log at seq {seq}: {reason}")]
    CorruptLog { seq: u64, reason: String },
    #[error(transparent)]
    Config(#[from] ConfigError),
}

impl ReplayError {
    pub fn code(&self) -> &'static str {
        match self {
            ReplayError::CorruptLog { .. } => "CorruptLog",
            ReplayError::Config(e) => e.code(),
        }
    }
}

fn corrupt(seq: u64, reason: impl Into<String>) -> ReplayError {
    ReplayError::CorruptLog {
        seq,
        reason: reason.into(),
    }
}

/// Parses a JSON-lines log. Blank lines are ignored; `seq` in errors is the
/// 1-based line number for lines that do not parse.
pub fn parse_log(text: &str) -> Result<Vec<Event>, ReplayError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            Event::from_json_line(l).map_err(|e| corrupt(i as u64 + 1, format!("line {}: {e}", i + 1)))
        })
        .collect()
}

impl Command {
    /// The command whose execution led with `ev`, or None if `ev` can only
    /// appear as a consequence of some other command.
    pub fn from_event(ev: &Event) -> Option<Command> {
        Some(match ev.kind {
            EventKind::TokenIssued => {
                let p: event::TokenIssued = ev.decode()?;
                Command::IssueToken {
                    value: p.token,
                    role: p.role,
                }
            }
            EventKind::NodeRegistered => {
                let p: event::NodeRegistered = ev.decode()?;
                Command::RegisterNode { spec: p.spec }
            }
            EventKind::RequestSubmitted => {
                let p: event::RequestSubmitted = ev.decode()?;
                Command::SubmitRequest(p.submission)
            }
            EventKind::RequestRejected => {
                let p: event::RequestRejected = ev.decode()?;
                match p.submission {
                    Some(sub) => Command::SubmitRequest(sub),
                    None => Command::DenyRequest {
                        request_id: p.request_id,
                    },
                }
            }
            EventKind::PlanProduced => {
                let p: event::PlanProduced = ev.decode()?;
                Command::RunAllocation { trigger: p.trigger }
            }
            EventKind::BlockActivated => {
                let p: event::BlockActivated = ev.decode()?;
                Command::ActivatePlan { plan_id: p.plan_id }
            }
            EventKind::JobSubmitted => {
                let p: event::JobSubmitted = ev.decode()?;
                Command::SubmitJob {
                    actor: Actor::User(p.owner),
                    block_id: p.block_id,
                    width: p.width,
                    duration_ticks: p.duration_ticks,
                }
            }
            EventKind::BlockReleased => {
                let p: event::BlockReleased = ev.decode()?;
                Command::ReleaseBlock {
                    actor: p.actor?,
                    block_id: p.block_id,
                }
            }
            EventKind::PowerChanged => {
                let p: event::PowerChanged = ev.decode()?;
                match p.cause {
                    PowerCause::Command { desired, forced } => Command::PowerCommand {
                        node_id: p.node_id,
                        desired,
                        forced,
                    },
                    PowerCause::Reset => Command::ResetNode { node_id: p.node_id },
                    _ => return None,
                }
            }
            EventKind::FaultInjected => {
                let p: event::FaultInjected = ev.decode()?;
                Command::InjectFault {
                    node_id: p.node_id,
                    kind: p.fault.kind,
                }
            }
            EventKind::TickAdvanced => Command::Tick { n: 1 },
            _ => return None,
        })
    }
}

/// Rebuilds the world described by `events`, starting from the initial
/// world for `config` and `seed`.
pub fn replay(config: ClusterConfig, seed: u64, events: &[Event]) -> Result<World, ReplayError> {
    let mut world = World::new(config, seed)?;
    let mut i = 0;
    while i < events.len() {
        let lead = &events[i];
        if lead.seq != world.next_seq() {
            return Err(corrupt(
                lead.seq,
                format!("expected seq {}, found {}", world.next_seq(), lead.seq),
            ));
        }
        let command = Command::from_event(lead)
            .ok_or_else(|| corrupt(lead.seq, format!("{} cannot start a command", lead.kind)))?;
        // ticks are re-derived, so the leading tick must match the clock
        let expected_tick = match command {
            Command::Tick { .. } => world.tick() + 1,
            _ => world.tick(),
        };
        if lead.tick != expected_tick {
            return Err(corrupt(lead.seq, "event tick does not match the clock"));
        }
        let applied = world
            .execute(command)
            .map_err(|e| corrupt(lead.seq, format!("command no longer applies: {e}")))?;
        let n = applied.events.len();
        if n == 0 || events.len() < i + n || applied.events[..] != events[i..i + n] {
            return Err(corrupt(lead.seq, "recorded consequences differ from re-execution"));
        }
        i += n;
    }
    Ok(world)
}
