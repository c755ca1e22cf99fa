//! Seeded random workload generator for soak runs and fuzzing.
//!
//! A workload is a stream of commands drawn against the current world:
//! requests from a small user population, admin allocation rounds, jobs,
//! releases, power commands, faults and resets, interleaved with ticks.
//! Many of the generated commands are deliberately invalid (foreign blocks,
//! busy nodes); the world is expected to reject those without side effects.

use rand::seq::IteratorRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::auth::{Actor, Role};
use crate::registry::{PowerState, PowerTarget};
use crate::thermal::FaultKind;
use crate::world::{Command, PlanStatus, Reply, RequestStatus, Submission, Trigger, World};

/// Tally of what a run exercised.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RunStats {
    pub commands: u64,
    pub rejected: u64,
    pub blocks: u64,
    pub jobs: u64,
    pub releases: u64,
    pub faults: u64,
}

pub struct Workload {
    rng: ChaCha8Rng,
    users: Vec<String>,
}

impl Workload {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            users: Vec::new(),
        }
    }

    /// Token commands for the user population; run these first.
    pub fn setup(&mut self) -> Vec<Command> {
        let roles = [Role::Anonymous, Role::Anonymous, Role::Anonymous, Role::Privileged, Role::Admin];
        self.users = (0..roles.len()).map(|i| format!("user-{i}")).collect();
        self.users
            .iter()
            .zip(roles)
            .map(|(value, role)| Command::IssueToken {
                value: value.clone(),
                role,
            })
            .collect()
    }

    fn user(&mut self) -> String {
        self.users
            .iter()
            .choose(&mut self.rng)
            .cloned()
            .unwrap_or_default()
    }

    /// Commands to run before the next tick, ending with the tick itself.
    pub fn next_batch(&mut self, world: &World) -> Vec<Command> {
        let mut out = Vec::new();
        let rng = &mut self.rng;
        if rng.gen_bool(0.25) {
            let sub = Submission {
                user: String::new(),
                node_count: rng.gen_range(1..=4),
                min_class: rng.gen_range(0..=3),
                duration_hours: rng.gen_range(1..=80),
                priority: Some(rng.gen_range(1..=5)),
            };
            out.push(Command::SubmitRequest(Submission {
                user: self.user(),
                ..sub
            }));
        }
        let rng = &mut self.rng;
        if rng.gen_bool(0.15) {
            out.push(Command::RunAllocation {
                trigger: Trigger::Admin,
            });
        }
        // only the newest plan is worth trying; older ones are usually stale
        if let Some(plan) = world.plans().last() {
            if plan.status == PlanStatus::Proposed && rng.gen_bool(0.8) {
                out.push(Command::ActivatePlan {
                    plan_id: plan.plan_id,
                });
            }
        }
        let live: Vec<_> = world
            .blocks()
            .filter(|b| b.state.is_live())
            .map(|b| (b.block_id, b.owner.clone(), b.node_ids.len() as u32))
            .collect();
        if !live.is_empty() && self.rng.gen_bool(0.3) {
            let (block_id, owner, size) = live[self.rng.gen_range(0..live.len())].clone();
            let actor = Actor::User(if self.rng.gen_bool(0.8) { owner } else { self.user() });
            out.push(Command::SubmitJob {
                actor,
                block_id,
                width: self.rng.gen_range(1..=size + 1),
                duration_ticks: self.rng.gen_range(1..=40),
            });
        }
        if !live.is_empty() && self.rng.gen_bool(0.04) {
            let (block_id, owner, _) = live[self.rng.gen_range(0..live.len())].clone();
            let actor = match self.rng.gen_range(0..3) {
                0 => Actor::Admin,
                1 => Actor::User(self.user()),
                _ => Actor::User(owner),
            };
            out.push(Command::ReleaseBlock { actor, block_id });
        }
        let ids = world.registry().ids();
        if !ids.is_empty() {
            let rng = &mut self.rng;
            let node_id = ids[rng.gen_range(0..ids.len())];
            let roll = rng.gen_range(0..100);
            if roll < 3 {
                let kind = if rng.gen_bool(0.5) {
                    FaultKind::NodeFailure
                } else {
                    FaultKind::FanDegraded {
                        cooling_coeff: rng.gen_range(0.01..=world.config().thermal.cooling_coeff),
                    }
                };
                out.push(Command::InjectFault { node_id, kind });
            } else if roll < 12 {
                let broken = world
                    .registry()
                    .records()
                    .filter(|r| matches!(r.power, PowerState::Overheated | PowerState::Failed))
                    .map(|r| r.id())
                    .choose(rng);
                if let Some(node_id) = broken {
                    out.push(Command::ResetNode { node_id });
                }
            } else if roll < 18 {
                out.push(Command::PowerCommand {
                    node_id,
                    desired: if rng.gen_bool(0.6) { PowerTarget::On } else { PowerTarget::Off },
                    forced: rng.gen_bool(0.3),
                });
            } else if roll < 20 {
                let pending = world
                    .requests()
                    .filter(|r| r.status == RequestStatus::Pending)
                    .map(|r| r.request.request_id)
                    .choose(rng);
                if let Some(request_id) = pending {
                    out.push(Command::DenyRequest { request_id });
                }
            }
        }
        out.push(Command::Tick { n: 1 });
        out
    }
}

/// Applies `command`, folding the outcome into `stats`. Rejected commands
/// leave the world untouched.
pub fn apply(world: &mut World, command: Command, stats: &mut RunStats) -> Vec<crate::event::Event> {
    stats.commands += 1;
    let is_fault = matches!(command, Command::InjectFault { .. });
    match world.execute(command) {
        Ok(applied) => {
            match &applied.reply {
                Reply::Blocks(b) => stats.blocks += b.len() as u64,
                Reply::Job(_) => stats.jobs += 1,
                Reply::Released(_) => stats.releases += 1,
                Reply::Rejected { .. } => stats.rejected += 1,
                _ => {}
            }
            if is_fault {
                stats.faults += 1;
            }
            applied.events
        }
        Err(_) => {
            stats.rejected += 1;
            Vec::new()
        }
    }
}
