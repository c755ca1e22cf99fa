use rand::Rng;

use super::{BlockState, JobState, World};
use crate::domain::{BlockId, JobId};
use crate::event::{self, Event, PowerCause};
use crate::registry::PowerState;
use crate::thermal::{evaluate_protection, step_humidity, step_temperature};

impl World {
    /// Advances the clock by one tick. Sub-steps run in a fixed order:
    /// power countdowns, sensors, protection, jobs, lease expiry.
    pub(super) fn tick_once(&mut self, out: &mut Vec<Event>) {
        self.tick += 1;
        let tick = self.tick;
        self.emit(out, event::TickAdvanced { tick });
        self.step_power_all(out);
        self.step_sensors();
        self.step_protection(out);
        self.step_jobs(out);
        self.step_leases(out);
    }

    fn step_power_all(&mut self, out: &mut Vec<Event>) {
        for id in self.registry.ids() {
            let from = self.registry.get(id).expect("listed").power;
            let to = self.registry.step_power(id).expect("countdown edges are legal");
            if std::mem::discriminant(&from) != std::mem::discriminant(&to) {
                self.emit_power(out, id, from, to, PowerCause::Tick);
            }
            if to != PowerState::Idle || from == PowerState::Idle {
                continue;
            }
            let rec = self.registry.get_mut(id).expect("listed");
            if rec.off_after_boot {
                rec.off_after_boot = false;
                self.registry
                    .transition(id, PowerState::Draining)
                    .expect("Idle -> Draining");
                self.emit_power(out, id, PowerState::Idle, PowerState::Draining, PowerCause::Teardown);
            } else if let Some(block_id) = rec.claim {
                if self.blocks.get(&block_id).is_some_and(|b| b.state.is_live()) {
                    self.registry.reserve(id, block_id).expect("Idle -> Reserved");
                    self.emit_power(out, id, PowerState::Idle, PowerState::Reserved, PowerCause::Provision);
                }
            }
        }
        let ready: Vec<BlockId> = self
            .blocks
            .values()
            .filter(|b| b.state == BlockState::Provisioning)
            .filter(|b| {
                b.node_ids.iter().all(|n| {
                    self.registry
                        .get(*n)
                        .is_ok_and(|r| r.power == PowerState::Reserved && r.block_id == Some(b.block_id))
                })
            })
            .map(|b| b.block_id)
            .collect();
        for id in ready {
            if let Some(b) = self.blocks.get_mut(&id) {
                b.state = BlockState::Active;
            }
        }
    }

    fn step_sensors(&mut self) {
        let params = self.config.thermal.clone();
        for id in self.registry.ids() {
            // one draw per node per tick, whatever its state
            let draw: f64 = self.rng.gen_range(-1.0..=1.0);
            let fault = self.monitors.get(&id).and_then(|m| m.active_fan_fault()).cloned();
            let rec = self.registry.get_mut(id).expect("listed");
            rec.temperature_c = step_temperature(
                rec.temperature_c,
                rec.power.is_powered(),
                rec.power == PowerState::Loaded,
                &params,
                fault.as_ref(),
            );
            rec.humidity_pct = step_humidity(rec.humidity_pct, draw);
        }
    }

    fn step_protection(&mut self, out: &mut Vec<Event>) {
        let params = self.config.thermal.clone();
        for id in self.registry.ids() {
            let monitor = self.monitors.entry(id).or_default().clone();
            let rec = self.registry.get(id).expect("listed");
            let verdict = evaluate_protection(rec, &monitor, &params, self.tick);
            self.monitors.get_mut(&id).expect("inserted").flags = verdict.flags;
            for (alarm, action) in verdict.alarms {
                self.emit(out, event::AlarmRaised { node_id: id, alarm, action });
            }
            if !verdict.cut_power {
                continue;
            }
            let target = if monitor.node_failure_active() {
                PowerState::Failed
            } else {
                PowerState::Overheated
            };
            let from = self.registry.get(id).expect("listed").power;
            if from != target && self.registry.transition(id, target).is_ok() {
                self.registry.get_mut(id).expect("listed").off_after_boot = false;
                self.emit_power(out, id, from, target, PowerCause::Protection);
            }
        }
    }

    fn step_jobs(&mut self, out: &mut Vec<Event>) {
        self.detach_lost_nodes(out, None);
        let running: Vec<JobId> = self
            .jobs
            .values()
            .filter(|j| j.state.is_running())
            .map(|j| j.job_id)
            .collect();
        for job_id in running {
            let job = self.jobs.get_mut(&job_id).expect("listed");
            job.remaining_ticks = job.remaining_ticks.saturating_sub(1);
            if job.remaining_ticks > 0 {
                continue;
            }
            job.state = JobState::Done;
            let block_id = job.block_id;
            let nodes = std::mem::take(&mut job.nodes);
            self.emit(out, event::JobCompleted { job_id, block_id });
            self.unload(out, &nodes, block_id, PowerCause::JobEnd);
        }
    }

    fn step_leases(&mut self, out: &mut Vec<Event>) {
        let closing: Vec<BlockId> = self
            .blocks
            .values()
            .filter(|b| b.state == BlockState::Expired)
            .map(|b| b.block_id)
            .collect();
        for block_id in closing {
            self.blocks.get_mut(&block_id).expect("listed").state = BlockState::Released;
            self.emit(out, event::BlockReleased { block_id, actor: None });
        }

        let now = self.tick;
        let expiring: Vec<BlockId> = self
            .blocks
            .values()
            .filter(|b| b.state.is_live() && b.expires_at_tick <= now)
            .map(|b| b.block_id)
            .collect();
        for block_id in expiring {
            self.cancel_jobs(out, block_id, "lease_expired");
            self.emit(out, event::BlockExpired { block_id });
            self.teardown_nodes(out, block_id).expect("block nodes are registered");
            self.blocks.get_mut(&block_id).expect("listed").state = BlockState::Expired;
        }
    }
}
