//! The multi-block world: admission, plan activation, jobs, leases and the
//! tick engine. All mutation goes through [`World::execute`], which is
//! transactional: on error the world is left untouched.

mod block;
mod tick;

use std::collections::{BTreeMap, BTreeSet};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use block::{
    Block, BlockState, Job, JobState, PlanEntry, PlanStatus, RequestEntry, RequestStatus, Trigger,
};

use crate::allocator::{evolve, AllocError, AllocationPlan, GaParams, LeaseRequest, PoolNode};
use crate::auth::{Actor, Role, Token};
use crate::domain::{
    BlockId, ClusterConfig, ConfigError, JobId, NodeClass, NodeId, NodeSpec, PlanId, RequestId,
    MAX_CLASS_LEVEL,
};
use crate::event::{self, Event, Payload, PowerCause};
use crate::registry::{NodeRecord, PowerState, PowerTarget, Registry, RegistryError};
use crate::thermal::{Fault, FaultKind, Monitor};

/// A lease request as submitted through the gateway.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Submission {
    pub user: String,
    pub node_count: u32,
    pub min_class: u8,
    pub duration_hours: u32,
    #[serde(default)]
    pub priority: Option<u8>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Command {
    IssueToken { value: String, role: Role },
    RegisterNode { spec: NodeSpec },
    SubmitRequest(Submission),
    DenyRequest { request_id: RequestId },
    RunAllocation { trigger: Trigger },
    ActivatePlan { plan_id: PlanId },
    SubmitJob {
        actor: Actor,
        block_id: BlockId,
        width: u32,
        duration_ticks: u64,
    },
    ReleaseBlock { actor: Actor, block_id: BlockId },
    PowerCommand {
        node_id: NodeId,
        desired: PowerTarget,
        forced: bool,
    },
    ResetNode { node_id: NodeId },
    InjectFault { node_id: NodeId, kind: FaultKind },
    Tick { n: u64 },
}

#[derive(Debug, Clone, PartialEq)]
pub enum Reply {
    Token(Token),
    Node(Box<NodeRecord>),
    Request(RequestId),
    /// Admission refused the request; it is recorded as Rejected.
    Rejected {
        request_id: RequestId,
        error: CommandError,
    },
    Denied(RequestId),
    Plan {
        plan_id: Option<PlanId>,
        plan: AllocationPlan,
    },
    Blocks(Vec<BlockId>),
    Job(JobId),
    Power(PowerState),
    Released(BlockId),
    FaultInjected,
    Ticked { tick: u64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Applied {
    pub events: Vec<Event>,
    pub reply: Reply,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CommandError {
    #[error(transparent)]
    Registry(#[from] RegistryError),
    #[error(transparent)]
    Alloc(#[from] AllocError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("unauthorized: {0}")]
    Unauthorized(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("anonymous users may lease at most {limit} nodes (asked for {requested})")]
    LimitNodes { requested: u32, limit: u32 },
    #[error("anonymous leases are limited to {limit} hours (asked for {requested})")]
    LimitDuration { requested: u32, limit: u32 },
    #[error("user already holds {limit} active block(s)")]
    LimitConcurrentBlocks { limit: u32 },
    #[error("unknown request {0}")]
    UnknownRequest(RequestId),
    #[error("request {0} is not pending")]
    RequestNotPending(RequestId),
    #[error("unknown plan {0}")]
    UnknownPlan(PlanId),
    #[error("stale plan: {0}")]
    StalePlan(String),
    #[error("unknown block {0}")]
    UnknownBlock(BlockId),
    #[error("block {0} belongs to another user")]
    NotOwner(BlockId),
    #[error("block {0} is not active")]
    BlockNotActive(BlockId),
    #[error("job width {width} exceeds block size {size}")]
    WidthExceedsBlock { width: u32, size: usize },
    #[error("only {free} of the block's nodes are free for a width-{width} job")]
    NodesBusy { width: u32, free: usize },
    #[error("unknown job {0}")]
    UnknownJob(JobId),
}

impl CommandError {
    /// Stable machine-readable code.
    pub fn code(&self) -> &'static str {
        match self {
            CommandError::Registry(e) => e.code(),
            CommandError::Alloc(e) => e.code(),
            CommandError::Config(e) => e.code(),
            CommandError::Unauthorized(_) => "Unauthorized",
            CommandError::InvalidRequest(_) => "InvalidRequest",
            CommandError::LimitNodes { .. } => "LimitNodes",
            CommandError::LimitDuration { .. } => "LimitDuration",
            CommandError::LimitConcurrentBlocks { .. } => "LimitConcurrentBlocks",
            CommandError::UnknownRequest(_) => "UnknownRequest",
            CommandError::RequestNotPending(_) => "RequestNotPending",
            CommandError::UnknownPlan(_) => "UnknownPlan",
            CommandError::StalePlan(_) => "StalePlan",
            CommandError::UnknownBlock(_) => "UnknownBlock",
            CommandError::NotOwner(_) => "NotOwner",
            CommandError::BlockNotActive(_) => "BlockNotActive",
            CommandError::WidthExceedsBlock { .. } => "WidthExceedsBlock",
            CommandError::NodesBusy { .. } => "NodesBusy",
            CommandError::UnknownJob(_) => "UnknownJob",
        }
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct World {
    config: ClusterConfig,
    seed: u64,
    tick: u64,
    next_seq: u64,
    registry: Registry,
    monitors: BTreeMap<NodeId, Monitor>,
    tokens: BTreeMap<String, Token>,
    requests: BTreeMap<RequestId, RequestEntry>,
    plans: BTreeMap<PlanId, PlanEntry>,
    blocks: BTreeMap<BlockId, Block>,
    jobs: BTreeMap<JobId, Job>,
    /// Sensor noise stream (humidity draws).
    rng: ChaCha8Rng,
}

impl World {
    /// Initial world at tick 0. Configured nodes are part of the initial
    /// state and produce no events.
    pub fn new(config: ClusterConfig, seed: u64) -> Result<Self, ConfigError> {
        config.validate()?;
        let mut registry = Registry::new();
        let mut monitors = BTreeMap::new();
        for spec in &config.nodes {
            let id = spec.node_id;
            registry
                .register_node(spec.clone(), &config.thermal)
                .map_err(|e| match e {
                    RegistryError::DuplicateNodeId(id) => ConfigError::DuplicateNodeId(id),
                    RegistryError::ControllerOverCapacity(c) => {
                        ConfigError::ControllerOverCapacity(c)
                    }
                    other => ConfigError::InvalidParameter(other.to_string()),
                })?;
            monitors.insert(id, Monitor::default());
        }
        Ok(Self {
            config,
            seed,
            tick: 0,
            next_seq: 1,
            registry,
            monitors,
            tokens: BTreeMap::new(),
            requests: BTreeMap::new(),
            plans: BTreeMap::new(),
            blocks: BTreeMap::new(),
            jobs: BTreeMap::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn config(&self) -> &ClusterConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn tick(&self) -> u64 {
        self.tick
    }

    /// Sequence number the next event will carry.
    pub fn next_seq(&self) -> u64 {
        self.next_seq
    }

    pub fn registry(&self) -> &Registry {
        &self.registry
    }

    pub fn node(&self, id: NodeId) -> Option<&NodeRecord> {
        self.registry.get(id).ok()
    }

    pub fn monitor(&self, id: NodeId) -> Option<&Monitor> {
        self.monitors.get(&id)
    }

    pub fn token(&self, value: &str) -> Option<&Token> {
        self.tokens.get(value)
    }

    pub fn tokens(&self) -> impl Iterator<Item = &Token> {
        self.tokens.values()
    }

    pub fn request(&self, id: RequestId) -> Option<&RequestEntry> {
        self.requests.get(&id)
    }

    pub fn requests(&self) -> impl Iterator<Item = &RequestEntry> {
        self.requests.values()
    }

    pub fn plan(&self, id: PlanId) -> Option<&PlanEntry> {
        self.plans.get(&id)
    }

    pub fn plans(&self) -> impl Iterator<Item = &PlanEntry> {
        self.plans.values()
    }

    pub fn block(&self, id: BlockId) -> Option<&Block> {
        self.blocks.get(&id)
    }

    pub fn blocks(&self) -> impl Iterator<Item = &Block> {
        self.blocks.values()
    }

    pub fn job(&self, id: JobId) -> Option<&Job> {
        self.jobs.get(&id)
    }

    pub fn jobs(&self) -> impl Iterator<Item = &Job> {
        self.jobs.values()
    }

    /// Canonical serialization used for equality between live and replayed
    /// worlds.
    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("world serializes")
    }

    pub fn active_block_count(&self, user: &str) -> usize {
        self.blocks
            .values()
            .filter(|b| b.owner == user && b.state.is_live())
            .count()
    }

    /// Nodes a new plan may use: Idle or Off and not claimed by a block.
    pub fn eligible_pool(&self) -> Vec<PoolNode> {
        self.registry
            .records()
            .filter(|r| r.is_eligible())
            .map(|r| PoolNode {
                node_id: r.id(),
                class: r.spec.class.clone(),
                powered_off: r.power == PowerState::Off,
            })
            .collect()
    }

    /// Pending requests offered to the allocator: oldest first, at most as
    /// many per user as the user still has free block slots.
    pub fn allocatable_requests(&self) -> Vec<LeaseRequest> {
        let cap = self.config.admission.max_active_blocks_per_user as usize;
        let mut taken: BTreeMap<&str, usize> = BTreeMap::new();
        let mut out = Vec::new();
        for entry in self.requests.values() {
            if entry.status != RequestStatus::Pending {
                continue;
            }
            let user = entry.request.user_token.as_str();
            let used = taken.entry(user).or_insert_with(|| self.active_block_count(user));
            if *used < cap {
                *used += 1;
                out.push(entry.request.clone());
            }
        }
        out
    }

    /// GA seed for an allocation run at the current tick; repeated runs
    /// within one tick see the same seed.
    pub fn allocation_seed(&self) -> u64 {
        splitmix64(self.config.ga.seed ^ splitmix64(self.seed ^ self.tick))
    }

    pub fn lease_ticks(&self, duration_hours: u32) -> u64 {
        let ticks = (f64::from(duration_hours) * 3600.0 / self.config.tick_seconds).ceil();
        (ticks as u64).max(1)
    }

    /// Applies one command. On error nothing changes.
    pub fn execute(&mut self, command: Command) -> Result<Applied, CommandError> {
        let mut next = self.clone();
        let applied = next.apply(command)?;
        *self = next;
        Ok(applied)
    }

    fn emit<P: Payload>(&mut self, out: &mut Vec<Event>, payload: P) {
        out.push(Event {
            seq: self.next_seq,
            tick: self.tick,
            kind: P::KIND,
            payload: serde_json::to_value(&payload).expect("payload serializes"),
        });
        self.next_seq += 1;
    }

    fn emit_power(
        &mut self,
        out: &mut Vec<Event>,
        node_id: NodeId,
        from: PowerState,
        to: PowerState,
        cause: PowerCause,
    ) {
        self.emit(
            out,
            event::PowerChanged {
                node_id,
                from,
                to,
                cause,
            },
        );
    }

    fn apply(&mut self, command: Command) -> Result<Applied, CommandError> {
        let mut events = Vec::new();
        let reply = match command {
            Command::IssueToken { value, role } => self.issue_token(&mut events, value, role)?,
            Command::RegisterNode { spec } => self.register_node(&mut events, spec)?,
            Command::SubmitRequest(sub) => self.submit_request(&mut events, sub)?,
            Command::DenyRequest { request_id } => self.deny_request(&mut events, request_id)?,
            Command::RunAllocation { trigger } => self.run_allocation(&mut events, trigger)?,
            Command::ActivatePlan { plan_id } => self.activate_plan(&mut events, plan_id)?,
            Command::SubmitJob {
                actor,
                block_id,
                width,
                duration_ticks,
            } => self.submit_job(&mut events, actor, block_id, width, duration_ticks)?,
            Command::ReleaseBlock { actor, block_id } => {
                self.release_block(&mut events, actor, block_id)?
            }
            Command::PowerCommand {
                node_id,
                desired,
                forced,
            } => self.power_command(&mut events, node_id, desired, forced)?,
            Command::ResetNode { node_id } => self.reset_node(&mut events, node_id)?,
            Command::InjectFault { node_id, kind } => {
                self.inject_fault(&mut events, node_id, kind)?
            }
            Command::Tick { n } => {
                if n < 1 {
                    return Err(CommandError::InvalidRequest("tick count must be >= 1".into()));
                }
                for _ in 0..n {
                    self.tick_once(&mut events);
                }
                Reply::Ticked { tick: self.tick }
            }
        };
        Ok(Applied { events, reply })
    }

    fn issue_token(
        &mut self,
        out: &mut Vec<Event>,
        value: String,
        role: Role,
    ) -> Result<Reply, CommandError> {
        if value.is_empty() || self.tokens.contains_key(&value) {
            return Err(CommandError::InvalidRequest(
                "token value must be unique and non-empty".into(),
            ));
        }
        let token = Token {
            value: value.clone(),
            role,
            issued_at_tick: self.tick,
        };
        self.tokens.insert(value.clone(), token.clone());
        self.emit(out, event::TokenIssued { token: value, role });
        Ok(Reply::Token(token))
    }

    fn register_node(&mut self, out: &mut Vec<Event>, spec: NodeSpec) -> Result<Reply, CommandError> {
        spec.validate()?;
        let id = spec.node_id;
        let record = self
            .registry
            .register_node(spec.clone(), &self.config.thermal)?
            .clone();
        self.monitors.insert(id, Monitor::default());
        self.emit(out, event::NodeRegistered { node_id: id, spec });
        Ok(Reply::Node(Box::new(record)))
    }

    fn submit_request(&mut self, out: &mut Vec<Event>, sub: Submission) -> Result<Reply, CommandError> {
        let role = self
            .tokens
            .get(&sub.user)
            .map(|t| t.role)
            .ok_or_else(|| CommandError::Unauthorized("unknown token".into()))?;
        if sub.node_count < 1 {
            return Err(CommandError::InvalidRequest("nodes must be >= 1".into()));
        }
        if sub.duration_hours < 1 {
            return Err(CommandError::InvalidRequest("duration_hours must be >= 1".into()));
        }
        if sub.min_class > MAX_CLASS_LEVEL {
            return Err(CommandError::InvalidRequest(format!(
                "min_class must be in 0..={MAX_CLASS_LEVEL}"
            )));
        }
        let priority = sub.priority.unwrap_or(1);
        if !(1..=10).contains(&priority) {
            return Err(CommandError::InvalidRequest("priority must be in 1..=10".into()));
        }

        let policy = &self.config.admission;
        let verdict = if !role.bypasses_limits() && sub.node_count > policy.max_nodes_anonymous {
            Err(CommandError::LimitNodes {
                requested: sub.node_count,
                limit: policy.max_nodes_anonymous,
            })
        } else if !role.bypasses_limits() && sub.duration_hours > policy.max_lease_hours_anonymous {
            Err(CommandError::LimitDuration {
                requested: sub.duration_hours,
                limit: policy.max_lease_hours_anonymous,
            })
        } else if self.active_block_count(&sub.user) >= policy.max_active_blocks_per_user as usize {
            Err(CommandError::LimitConcurrentBlocks {
                limit: policy.max_active_blocks_per_user,
            })
        } else {
            Ok(())
        };

        let request_id = RequestId(self.requests.len() as u64 + 1);
        let request = LeaseRequest {
            request_id,
            user_token: sub.user.clone(),
            node_count: sub.node_count,
            min_class: NodeClass::level(sub.min_class),
            // anonymous users cannot jump the queue
            priority: if role.bypasses_limits() { priority } else { 1 },
            duration_hours: sub.duration_hours,
        };
        match verdict {
            Ok(()) => {
                self.requests.insert(
                    request_id,
                    RequestEntry {
                        request: request.clone(),
                        status: RequestStatus::Pending,
                        submitted_at_tick: self.tick,
                    },
                );
                self.emit(
                    out,
                    event::RequestSubmitted {
                        request_id,
                        submission: sub,
                        request,
                    },
                );
                Ok(Reply::Request(request_id))
            }
            Err(error) => {
                let reason = error.code().to_string();
                self.requests.insert(
                    request_id,
                    RequestEntry {
                        request,
                        status: RequestStatus::Rejected {
                            reason: reason.clone(),
                        },
                        submitted_at_tick: self.tick,
                    },
                );
                self.emit(
                    out,
                    event::RequestRejected {
                        request_id,
                        reason,
                        submission: Some(sub),
                    },
                );
                Ok(Reply::Rejected { request_id, error })
            }
        }
    }

    fn deny_request(&mut self, out: &mut Vec<Event>, id: RequestId) -> Result<Reply, CommandError> {
        let entry = self
            .requests
            .get_mut(&id)
            .ok_or(CommandError::UnknownRequest(id))?;
        if entry.status != RequestStatus::Pending {
            return Err(CommandError::RequestNotPending(id));
        }
        entry.status = RequestStatus::Rejected {
            reason: "Denied".into(),
        };
        self.emit(
            out,
            event::RequestRejected {
                request_id: id,
                reason: "Denied".into(),
                submission: None,
            },
        );
        Ok(Reply::Denied(id))
    }

    fn run_allocation(&mut self, out: &mut Vec<Event>, trigger: Trigger) -> Result<Reply, CommandError> {
        let requests = self.allocatable_requests();
        if requests.is_empty() {
            return Ok(Reply::Plan {
                plan_id: None,
                plan: AllocationPlan::default(),
            });
        }
        let pool = self.eligible_pool();
        let seed = self.allocation_seed();
        let params = GaParams {
            seed,
            ..self.config.ga.clone()
        };
        let plan = evolve(&pool, &requests, &params, &self.config.fitness)?;
        let plan_id = PlanId(self.plans.len() as u64 + 1);
        let node_states = plan
            .node_ids()
            .map(|n| (n, self.registry.get(n).expect("pool node exists").power))
            .collect();
        self.plans.insert(
            plan_id,
            PlanEntry {
                plan_id,
                plan: plan.clone(),
                trigger,
                produced_at_tick: self.tick,
                node_states,
                status: PlanStatus::Proposed,
            },
        );
        self.emit(
            out,
            event::PlanProduced {
                plan_id,
                trigger,
                seed,
                plan: plan.clone(),
            },
        );
        Ok(Reply::Plan {
            plan_id: Some(plan_id),
            plan,
        })
    }

    fn activate_plan(&mut self, out: &mut Vec<Event>, plan_id: PlanId) -> Result<Reply, CommandError> {
        let entry = self
            .plans
            .get(&plan_id)
            .ok_or(CommandError::UnknownPlan(plan_id))?
            .clone();
        if entry.status != PlanStatus::Proposed {
            return Err(CommandError::StalePlan(format!("plan {plan_id} already activated")));
        }
        if entry.plan.is_empty() {
            return Ok(Reply::Blocks(Vec::new()));
        }

        let cap = self.config.admission.max_active_blocks_per_user as usize;
        let mut per_user: BTreeMap<String, usize> = BTreeMap::new();
        for rid in entry.plan.assignments.keys() {
            let req = self
                .requests
                .get(rid)
                .ok_or(CommandError::UnknownRequest(*rid))?;
            if req.status != RequestStatus::Pending {
                return Err(CommandError::StalePlan(format!("request {rid} is no longer pending")));
            }
            let user = req.request.user_token.clone();
            let count = per_user
                .entry(user.clone())
                .or_insert_with(|| self.active_block_count(&user));
            *count += 1;
            if *count > cap {
                return Err(CommandError::StalePlan(format!(
                    "request {rid} would exceed the owner's block limit"
                )));
            }
        }
        for (node, planned) in &entry.node_states {
            let rec = self.registry.get(*node)?;
            if rec.power != *planned || !rec.is_eligible() {
                return Err(CommandError::StalePlan(format!(
                    "node {node} changed state since planning"
                )));
            }
        }

        let mut created = Vec::new();
        for (rid, nodes) in &entry.plan.assignments {
            let block_id = BlockId(self.blocks.len() as u64 + 1);
            let request = self.requests[rid].request.clone();
            let head_node = *nodes.iter().next().expect("satisfied requests are nonempty");
            let expires_at_tick = self.tick + self.lease_ticks(request.duration_hours);
            let needs_boot = nodes
                .iter()
                .any(|n| self.registry.get(*n).map(|r| r.power) == Ok(PowerState::Off));
            let state = if needs_boot {
                BlockState::Provisioning
            } else {
                BlockState::Active
            };
            self.blocks.insert(
                block_id,
                Block {
                    block_id,
                    request_id: *rid,
                    owner: request.user_token.clone(),
                    node_ids: nodes.clone(),
                    head_node,
                    created_at_tick: self.tick,
                    expires_at_tick,
                    state,
                },
            );
            if let Some(req) = self.requests.get_mut(rid) {
                req.status = RequestStatus::Allocated { block_id };
            }
            self.emit(
                out,
                event::BlockActivated {
                    plan_id,
                    block_id,
                    request_id: *rid,
                    owner: request.user_token,
                    node_ids: nodes.clone(),
                    head_node,
                    expires_at_tick,
                    state,
                },
            );
            for &node in nodes {
                let from = self.registry.get(node)?.power;
                if from == PowerState::Off {
                    let to = self.registry.power_command(node, PowerTarget::On, false)?;
                    self.registry.get_mut(node)?.claim = Some(block_id);
                    self.emit_power(out, node, from, to, PowerCause::Activation);
                } else {
                    self.registry.reserve(node, block_id)?;
                    self.emit_power(out, node, from, PowerState::Reserved, PowerCause::Activation);
                }
            }
            created.push(block_id);
        }
        if let Some(p) = self.plans.get_mut(&plan_id) {
            p.status = PlanStatus::Activated;
        }
        Ok(Reply::Blocks(created))
    }

    fn submit_job(
        &mut self,
        out: &mut Vec<Event>,
        actor: Actor,
        block_id: BlockId,
        width: u32,
        duration_ticks: u64,
    ) -> Result<Reply, CommandError> {
        self.authorize(&actor, block_id)?;
        let block = &self.blocks[&block_id];
        if block.state != BlockState::Active {
            return Err(CommandError::BlockNotActive(block_id));
        }
        if width < 1 || duration_ticks < 1 {
            return Err(CommandError::InvalidRequest(
                "width and duration_ticks must be >= 1".into(),
            ));
        }
        if width as usize > block.node_ids.len() {
            return Err(CommandError::WidthExceedsBlock {
                width,
                size: block.node_ids.len(),
            });
        }
        let free: Vec<NodeId> = block
            .node_ids
            .iter()
            .copied()
            .filter(|n| {
                self.registry
                    .get(*n)
                    .map(|r| r.power == PowerState::Reserved && r.block_id == Some(block_id))
                    .unwrap_or(false)
            })
            .collect();
        if free.len() < width as usize {
            return Err(CommandError::NodesBusy {
                width,
                free: free.len(),
            });
        }
        let owner = block.owner.clone();
        let nodes: BTreeSet<NodeId> = free.into_iter().take(width as usize).collect();
        let job_id = JobId(self.jobs.len() as u64 + 1);
        self.jobs.insert(
            job_id,
            Job {
                job_id,
                block_id,
                owner: owner.clone(),
                width,
                duration_ticks,
                remaining_ticks: duration_ticks,
                state: JobState::Running,
                nodes: nodes.clone(),
            },
        );
        self.emit(
            out,
            event::JobSubmitted {
                job_id,
                block_id,
                owner,
                width,
                duration_ticks,
                node_ids: nodes.clone(),
            },
        );
        for node in nodes {
            self.registry.transition(node, PowerState::Loaded)?;
            self.emit_power(out, node, PowerState::Reserved, PowerState::Loaded, PowerCause::JobStart);
        }
        Ok(Reply::Job(job_id))
    }

    fn release_block(
        &mut self,
        out: &mut Vec<Event>,
        actor: Actor,
        block_id: BlockId,
    ) -> Result<Reply, CommandError> {
        self.authorize(&actor, block_id)?;
        if !self.blocks[&block_id].state.is_live() {
            return Err(CommandError::BlockNotActive(block_id));
        }
        self.emit(
            out,
            event::BlockReleased {
                block_id,
                actor: Some(actor),
            },
        );
        self.cancel_jobs(out, block_id, "released");
        self.teardown_nodes(out, block_id)?;
        if let Some(b) = self.blocks.get_mut(&block_id) {
            b.state = BlockState::Released;
        }
        Ok(Reply::Released(block_id))
    }

    /// Checks that `actor` may operate `block_id`: its owner or an admin.
    fn authorize(&self, actor: &Actor, block_id: BlockId) -> Result<(), CommandError> {
        let role = match actor {
            Actor::Admin => Role::Admin,
            Actor::User(token) => self
                .tokens
                .get(token)
                .map(|t| t.role)
                .ok_or_else(|| CommandError::Unauthorized("unknown token".into()))?,
        };
        let block = self
            .blocks
            .get(&block_id)
            .ok_or(CommandError::UnknownBlock(block_id))?;
        match actor {
            Actor::User(token) if &block.owner != token && role != Role::Admin => {
                Err(CommandError::NotOwner(block_id))
            }
            _ => Ok(()),
        }
    }

    /// Cancels running jobs of a block, returning their nodes to Reserved.
    fn cancel_jobs(&mut self, out: &mut Vec<Event>, block_id: BlockId, reason: &str) {
        let ids: Vec<JobId> = self
            .jobs
            .values()
            .filter(|j| j.block_id == block_id && j.state.is_running())
            .map(|j| j.job_id)
            .collect();
        for job_id in ids {
            let nodes = {
                let job = self.jobs.get_mut(&job_id).expect("job exists");
                job.state = JobState::Cancelled;
                std::mem::take(&mut job.nodes)
            };
            self.emit(
                out,
                event::JobCancelled {
                    job_id,
                    block_id,
                    reason: reason.to_string(),
                },
            );
            self.unload(out, &nodes, block_id, PowerCause::JobEnd);
        }
    }

    /// Loaded -> Reserved for the nodes still attached to the block.
    fn unload(&mut self, out: &mut Vec<Event>, nodes: &BTreeSet<NodeId>, block_id: BlockId, cause: PowerCause) {
        for &node in nodes {
            let attached = self
                .registry
                .get(node)
                .map(|r| r.power == PowerState::Loaded && r.block_id == Some(block_id))
                .unwrap_or(false);
            if attached && self.registry.transition(node, PowerState::Reserved).is_ok() {
                self.emit_power(out, node, PowerState::Loaded, PowerState::Reserved, cause.clone());
            }
        }
    }

    /// Drops the block's claims; powered nodes drain, booting nodes power
    /// down once their boot completes.
    fn teardown_nodes(&mut self, out: &mut Vec<Event>, block_id: BlockId) -> Result<(), CommandError> {
        let nodes = self.blocks[&block_id].node_ids.clone();
        for node in nodes {
            let rec = self.registry.get_mut(node)?;
            if rec.claim != Some(block_id) {
                continue;
            }
            rec.claim = None;
            let from = rec.power;
            match from {
                PowerState::Reserved | PowerState::Idle => {
                    self.registry.transition(node, PowerState::Draining)?;
                    self.emit_power(out, node, from, PowerState::Draining, PowerCause::Teardown);
                }
                PowerState::Booting(_) => rec.off_after_boot = true,
                _ => {}
            }
        }
        Ok(())
    }

    fn power_command(
        &mut self,
        out: &mut Vec<Event>,
        node_id: NodeId,
        desired: PowerTarget,
        forced: bool,
    ) -> Result<Reply, CommandError> {
        let before = self.registry.get(node_id)?.clone();
        let after = self.registry.power_command(node_id, desired, forced)?;
        if after == before.power {
            return Ok(Reply::Power(after));
        }
        self.registry.get_mut(node_id)?.off_after_boot = false;
        self.emit_power(out, node_id, before.power, after, PowerCause::Command { desired, forced });
        if before.power == PowerState::Loaded {
            self.detach_lost_nodes(out, Some(node_id));
        }
        Ok(Reply::Power(after))
    }

    /// Removes nodes that stopped running their job (power loss or forced
    /// off) from running jobs, degrading or cancelling the job. With
    /// `only`, just that node is checked.
    fn detach_lost_nodes(&mut self, out: &mut Vec<Event>, only: Option<NodeId>) {
        let ids: Vec<JobId> = self
            .jobs
            .values()
            .filter(|j| j.state.is_running())
            .map(|j| j.job_id)
            .collect();
        for job_id in ids {
            let job = &self.jobs[&job_id];
            let block_id = job.block_id;
            let lost: BTreeSet<NodeId> = job
                .nodes
                .iter()
                .copied()
                .filter(|n| only.is_none_or(|o| o == *n))
                .filter(|n| {
                    self.registry
                        .get(*n)
                        .map(|r| r.power != PowerState::Loaded || r.block_id != Some(block_id))
                        .unwrap_or(true)
                })
                .collect();
            if lost.is_empty() {
                continue;
            }
            let job = self.jobs.get_mut(&job_id).expect("job exists");
            job.nodes.retain(|n| !lost.contains(n));
            if job.nodes.is_empty() {
                job.state = JobState::Cancelled;
                self.emit(
                    out,
                    event::JobCancelled {
                        job_id,
                        block_id,
                        reason: "no_nodes".into(),
                    },
                );
            } else {
                job.state = JobState::Degraded;
                let remaining_nodes = job.nodes.clone();
                self.emit(
                    out,
                    event::JobDegraded {
                        job_id,
                        block_id,
                        lost_nodes: lost,
                        remaining_nodes,
                    },
                );
            }
        }
    }

    fn reset_node(&mut self, out: &mut Vec<Event>, node_id: NodeId) -> Result<Reply, CommandError> {
        let from = self.registry.get(node_id)?.power;
        let to = self.registry.reset(node_id)?;
        if let Some(m) = self.monitors.get_mut(&node_id) {
            m.clear_faults();
        }
        self.emit_power(out, node_id, from, to, PowerCause::Reset);
        Ok(Reply::Power(to))
    }

    fn inject_fault(
        &mut self,
        out: &mut Vec<Event>,
        node_id: NodeId,
        kind: FaultKind,
    ) -> Result<Reply, CommandError> {
        self.registry.get(node_id)?;
        let fault = Fault {
            kind,
            node_id,
            active: true,
        };
        fault.validate(&self.config.thermal)?;
        let monitor = self.monitors.entry(node_id).or_default();
        if matches!(kind, FaultKind::FanDegraded { .. }) {
            for f in &mut monitor.faults {
                if matches!(f.kind, FaultKind::FanDegraded { .. }) {
                    f.active = false;
                }
            }
        }
        monitor.faults.push(fault.clone());
        self.emit(out, event::FaultInjected { node_id, fault });
        Ok(Reply::FaultInjected)
    }

    /// Structural invariants that must hold between commands. Returns a
    /// description of every violation found.
    pub fn check_invariants(&self) -> Vec<String> {
        let mut violations = Vec::new();
        let mut owner_of: BTreeMap<NodeId, BlockId> = BTreeMap::new();
        for b in self.blocks.values() {
            if b.state.is_live() {
                for n in &b.node_ids {
                    if let Some(other) = owner_of.insert(*n, b.block_id) {
                        violations.push(format!(
                            "node {n} shared by blocks {other} and {}",
                            b.block_id
                        ));
                    }
                }
            }
            if !b.node_ids.contains(&b.head_node) {
                violations.push(format!("block {}: head node outside block", b.block_id));
            }
            if b.state != BlockState::Released && self.tick > b.expires_at_tick + 1 {
                violations.push(format!(
                    "block {} still {:?} at tick {} (expiry {})",
                    b.block_id, b.state, self.tick, b.expires_at_tick
                ));
            }
        }
        for r in self.registry.records() {
            if r.block_id.is_some() != r.power.holds_block() {
                violations.push(format!("node {}: block binding vs {}", r.id(), r.power));
            }
            for bound in [r.block_id, r.claim].into_iter().flatten() {
                match self.blocks.get(&bound) {
                    Some(b) if b.state.is_live() && b.node_ids.contains(&r.id()) => {}
                    _ => violations.push(format!("node {} bound to dead block {bound}", r.id())),
                }
            }
            if let (Some(b), c) = (r.block_id, r.claim) {
                if c != Some(b) {
                    violations.push(format!("node {}: block_id without matching claim", r.id()));
                }
            }
            if !(crate::thermal::MIN_TEMPERATURE_C..=crate::thermal::MAX_TEMPERATURE_C)
                .contains(&r.temperature_c)
            {
                violations.push(format!("node {}: temperature out of range", r.id()));
            }
        }
        let mut per_controller: BTreeMap<u16, usize> = BTreeMap::new();
        for r in self.registry.records() {
            *per_controller.entry(r.spec.controller_id).or_default() += 1;
        }
        for (c, n) in per_controller {
            if n > crate::domain::CONTROLLER_CAPACITY {
                violations.push(format!("controller {c} binds {n} nodes"));
            }
        }
        for j in self.jobs.values() {
            let Some(b) = self.blocks.get(&j.block_id) else {
                violations.push(format!("job {} in unknown block", j.job_id));
                continue;
            };
            if j.width as usize > b.node_ids.len() || !j.nodes.is_subset(&b.node_ids) {
                violations.push(format!("job {} escapes block {}", j.job_id, b.block_id));
            }
            if j.state.is_running() {
                for n in &j.nodes {
                    let ok = self
                        .registry
                        .get(*n)
                        .map(|r| r.power == PowerState::Loaded && r.block_id == Some(b.block_id))
                        .unwrap_or(false);
                    if !ok {
                        violations.push(format!("job {} running on unloaded node {n}", j.job_id));
                    }
                }
            }
        }
        violations
    }
}
