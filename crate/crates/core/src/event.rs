//! The append-only event record and its payloads.
//!
//! Every mutating command produces a group of events whose first entry
//! describes the command itself; the rest are its consequences. Replay
//! re-executes the leading event of each group and checks that the rest of
//! the group is reproduced exactly.

use std::collections::BTreeSet;
use std::fmt;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::allocator::{AllocationPlan, LeaseRequest};
use crate::auth::{Actor, Role};
use crate::domain::{BlockId, JobId, NodeId, NodeSpec, PlanId, RequestId};
use crate::registry::{PowerState, PowerTarget};
use crate::thermal::{Alarm, Fault, ProtectiveAction};
use crate::world::{BlockState, Submission, Trigger};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EventKind {
    NodeRegistered,
    PowerChanged,
    RequestSubmitted,
    RequestRejected,
    PlanProduced,
    BlockActivated,
    JobSubmitted,
    JobCompleted,
    JobDegraded,
    JobCancelled,
    BlockExpired,
    BlockReleased,
    AlarmRaised,
    FaultInjected,
    TokenIssued,
    TickAdvanced,
}

impl fmt::Display for EventKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

/// One log line. Field order is the on-disk order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub seq: u64,
    pub tick: u64,
    pub kind: EventKind,
    pub payload: serde_json::Value,
}

impl Event {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("event serializes")
    }

    pub fn from_json_line(line: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(line)
    }

    pub fn decode<T: DeserializeOwned>(&self) -> Option<T> {
        serde_json::from_value(self.payload.clone()).ok()
    }

    /// Block this event concerns, if any.
    pub fn block_id(&self) -> Option<BlockId> {
        self.payload
            .get("block_id")
            .and_then(|v| v.as_u64())
            .map(BlockId)
    }

    pub fn node_id(&self) -> Option<NodeId> {
        self.payload
            .get("node_id")
            .and_then(|v| v.as_u64())
            .map(NodeId)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenIssued {
    pub token: String,
    pub role: Role,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeRegistered {
    pub node_id: NodeId,
    pub spec: NodeSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "cause", rename_all = "snake_case")]
pub enum PowerCause {
    Command { desired: PowerTarget, forced: bool },
    Reset,
    Tick,
    Protection,
    Activation,
    Provision,
    JobStart,
    JobEnd,
    Teardown,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerChanged {
    pub node_id: NodeId,
    pub from: PowerState,
    pub to: PowerState,
    #[serde(flatten)]
    pub cause: PowerCause,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RequestSubmitted {
    pub request_id: RequestId,
    pub submission: Submission,
    pub request: LeaseRequest,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RequestRejected {
    pub request_id: RequestId,
    /// Error code: an admission limit, or "Denied".
    pub reason: String,
    /// Present when rejected at admission; absent for an administrator deny.
    pub submission: Option<Submission>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanProduced {
    pub plan_id: PlanId,
    pub trigger: Trigger,
    pub seed: u64,
    pub plan: AllocationPlan,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockActivated {
    pub plan_id: PlanId,
    pub block_id: BlockId,
    pub request_id: RequestId,
    pub owner: String,
    pub node_ids: BTreeSet<NodeId>,
    pub head_node: NodeId,
    pub expires_at_tick: u64,
    pub state: BlockState,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobSubmitted {
    pub job_id: JobId,
    pub block_id: BlockId,
    pub owner: String,
    pub width: u32,
    pub duration_ticks: u64,
    pub node_ids: BTreeSet<NodeId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobCompleted {
    pub job_id: JobId,
    pub block_id: BlockId,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobDegraded {
    pub job_id: JobId,
    pub block_id: BlockId,
    pub lost_nodes: BTreeSet<NodeId>,
    pub remaining_nodes: BTreeSet<NodeId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobCancelled {
    pub job_id: JobId,
    pub block_id: BlockId,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockExpired {
    pub block_id: BlockId,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockReleased {
    pub block_id: BlockId,
    /// Absent when the release closes out an expired lease.
    pub actor: Option<Actor>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlarmRaised {
    pub node_id: NodeId,
    pub alarm: Alarm,
    pub action: ProtectiveAction,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaultInjected {
    pub node_id: NodeId,
    pub fault: Fault,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TickAdvanced {
    pub tick: u64,
}

/// Typed payloads that know their event kind.
pub trait Payload: Serialize {
    const KIND: EventKind;
}

macro_rules! payload_kind {
    ($($ty:ident),* $(,)?) => {
        $(impl Payload for $ty {
            const KIND: EventKind = EventKind::$ty;
        })*
    };
}

payload_kind!(
    TokenIssued,
    NodeRegistered,
    PowerChanged,
    RequestSubmitted,
    RequestRejected,
    PlanProduced,
    BlockActivated,
    JobSubmitted,
    JobCompleted,
    JobDegraded,
    JobCancelled,
    BlockExpired,
    BlockReleased,
    AlarmRaised,
    FaultInjected,
    TickAdvanced,
);

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn line_field_order() {
        let ev = Event {
            seq: 1,
            tick: 0,
            kind: EventKind::TickAdvanced,
            payload: serde_json::to_value(TickAdvanced { tick: 1 }).unwrap(),
        };
        assert_eq!(
            ev.to_json_line(),
            r#"{"seq":1,"tick":0,"kind":"TickAdvanced","payload":{"tick":1}}"#
        );
        assert_eq!(Event::from_json_line(&ev.to_json_line()).unwrap(), ev);
    }

    #[test]
    fn power_cause_is_flattened() {
        let p = PowerChanged {
            node_id: NodeId(3),
            from: PowerState::Loaded,
            to: PowerState::Draining,
            cause: PowerCause::Command {
                desired: PowerTarget::Off,
                forced: true,
            },
        };
        let v = serde_json::to_value(&p).unwrap();
        assert_eq!(v["cause"], "command");
        assert_eq!(v["forced"], true);
        assert_eq!(serde_json::from_value::<PowerChanged>(v).unwrap(), p);
    }
}
