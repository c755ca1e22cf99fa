use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::allocator::{AllocationPlan, LeaseRequest};
use crate::domain::{BlockId, JobId, NodeId, PlanId, RequestId};
use crate::registry::PowerState;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BlockState {
    Provisioning,
    Active,
    Expired,
    Released,
}

impl BlockState {
    /// Provisioning or Active: the lease is in force.
    pub fn is_live(self) -> bool {
        matches!(self, BlockState::Provisioning | BlockState::Active)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Block {
    pub block_id: BlockId,
    pub request_id: RequestId,
    pub owner: String,
    pub node_ids: BTreeSet<NodeId>,
    /// Lowest node id of the block.
    pub head_node: NodeId,
    pub created_at_tick: u64,
    pub expires_at_tick: u64,
    pub state: BlockState,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum JobState {
    Running,
    /// Lost at least one node but still running on the rest.
    Degraded,
    Done,
    Cancelled,
}

impl JobState {
    pub fn is_running(self) -> bool {
        matches!(self, JobState::Running | JobState::Degraded)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Job {
    pub job_id: JobId,
    pub block_id: BlockId,
    pub owner: String,
    pub width: u32,
    pub duration_ticks: u64,
    pub remaining_ticks: u64,
    pub state: JobState,
    /// Nodes the job is still running on.
    pub nodes: BTreeSet<NodeId>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status")]
pub enum RequestStatus {
    Pending,
    Rejected { reason: String },
    Allocated { block_id: BlockId },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RequestEntry {
    pub request: LeaseRequest,
    pub status: RequestStatus,
    pub submitted_at_tick: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Trigger {
    Admin,
    Auto,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PlanStatus {
    Proposed,
    Activated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanEntry {
    pub plan_id: PlanId,
    pub plan: AllocationPlan,
    pub trigger: Trigger,
    pub produced_at_tick: u64,
    /// Power state of every planned node at planning time; activation
    /// refuses the plan if any of them moved.
    pub node_states: BTreeMap<NodeId, PowerState>,
    pub status: PlanStatus,
}
