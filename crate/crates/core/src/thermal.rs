//! Simulated sensor subsystem: a first-order thermal model, a humidity
//! random walk, and the protection rules that cut power to misbehaving nodes.

use serde::{Deserialize, Serialize};

use crate::domain::{ConfigError, NodeId};
use crate::registry::NodeRecord;

pub const MIN_TEMPERATURE_C: f64 = -20.0;
pub const MAX_TEMPERATURE_C: f64 = 200.0;

/// Humidity moves by at most this many percentage points per tick.
pub const HUMIDITY_STEP_PCT: f64 = 0.2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ThermalParams {
    pub ambient_c: f64,
    /// Heating per tick while powered but not loaded.
    pub heat_idle: f64,
    /// Heating per tick while running a job.
    pub heat_loaded: f64,
    pub cooling_coeff: f64,
    pub overheat_trip_c: f64,
    pub humidity_low_pct: f64,
    pub humidity_high_pct: f64,
}

impl Default for ThermalParams {
    fn default() -> Self {
        Self {
            ambient_c: 25.0,
            heat_idle: 0.5,
            heat_loaded: 2.0,
            cooling_coeff: 0.1,
            overheat_trip_c: 70.0,
            humidity_low_pct: 30.0,
            humidity_high_pct: 70.0,
        }
    }
}

impl ThermalParams {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |msg: &str| Err(ConfigError::InvalidParameter(format!("thermal: {msg}")));
        if !(self.cooling_coeff > 0.0 && self.cooling_coeff <= 1.0) {
            return bad("cooling_coeff must be in (0, 1]");
        }
        if self.overheat_trip_c.partial_cmp(&self.ambient_c) != Some(std::cmp::Ordering::Greater) {
            return bad("overheat_trip_c must exceed ambient_c");
        }
        if !(self.heat_idle >= 0.0 && self.heat_loaded >= 0.0) {
            return bad("heat rates must be >= 0");
        }
        if !(self.ambient_c >= MIN_TEMPERATURE_C && self.ambient_c <= MAX_TEMPERATURE_C) {
            return bad("ambient_c outside representable range");
        }
        if !(0.0..=100.0).contains(&self.humidity_low_pct)
            || !(0.0..=100.0).contains(&self.humidity_high_pct)
            || self.humidity_low_pct > self.humidity_high_pct
        {
            return bad("humidity band must satisfy 0 <= low <= high <= 100");
        }
        Ok(())
    }

    /// Steady-state temperature of a powered node.
    pub fn fixed_point(&self, loaded: bool) -> f64 {
        let heat = if loaded { self.heat_loaded } else { self.heat_idle };
        self.ambient_c + heat / self.cooling_coeff
    }

    pub fn initial_humidity(&self) -> f64 {
        (self.humidity_low_pct + self.humidity_high_pct) / 2.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FaultKind {
    FanDegraded { cooling_coeff: f64 },
    NodeFailure,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fault {
    pub kind: FaultKind,
    pub node_id: NodeId,
    pub active: bool,
}

impl Fault {
    pub fn validate(&self, params: &ThermalParams) -> Result<(), ConfigError> {
        if let FaultKind::FanDegraded { cooling_coeff } = self.kind {
            if !(cooling_coeff > 0.0 && cooling_coeff <= params.cooling_coeff) {
                return Err(ConfigError::InvalidParameter(format!(
                    "fan-degraded coefficient must be in (0, {}]",
                    params.cooling_coeff
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum AlarmKind {
    Overheat,
    HumidityOutOfRange,
    NodeFailed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Alarm {
    pub kind: AlarmKind,
    pub node_id: NodeId,
    pub tick: u64,
    pub reading: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ProtectiveAction {
    None,
    CutPower,
}

/// Which excursions are currently open for a node. An alarm is raised on
/// entry into an excursion and not again until it closes.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AlarmFlags {
    pub overheat: bool,
    pub humidity: bool,
    pub failed: bool,
}

/// Per-node sensor-side state kept by the world alongside the registry.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Monitor {
    pub faults: Vec<Fault>,
    pub flags: AlarmFlags,
}

impl Monitor {
    pub fn active_fan_fault(&self) -> Option<&Fault> {
        self.faults
            .iter()
            .rev()
            .find(|f| f.active && matches!(f.kind, FaultKind::FanDegraded { .. }))
    }

    pub fn node_failure_active(&self) -> bool {
        self.faults
            .iter()
            .any(|f| f.active && f.kind == FaultKind::NodeFailure)
    }

    pub fn clear_faults(&mut self) {
        for fault in &mut self.faults {
            fault.active = false;
        }
        self.flags.failed = false;
    }
}

/// One tick of the first-order thermal model.
pub fn step_temperature(
    t_c: f64,
    powered: bool,
    loaded: bool,
    params: &ThermalParams,
    active_fault: Option<&Fault>,
) -> f64 {
    let cooling = match active_fault {
        Some(Fault {
            kind: FaultKind::FanDegraded { cooling_coeff },
            active: true,
            ..
        }) => *cooling_coeff,
        _ => params.cooling_coeff,
    };
    let heat = match (powered, loaded) {
        (false, _) => 0.0,
        (true, true) => params.heat_loaded,
        (true, false) => params.heat_idle,
    };
    let next = t_c + heat - cooling * (t_c - params.ambient_c);
    next.clamp(MIN_TEMPERATURE_C, MAX_TEMPERATURE_C)
}

/// `rng_draw` is a uniform sample in [-1, 1] from the world's PRNG stream.
pub fn step_humidity(h_pct: f64, rng_draw: f64) -> f64 {
    (h_pct + HUMIDITY_STEP_PCT * rng_draw).clamp(0.0, 100.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Protection {
    pub alarms: Vec<(Alarm, ProtectiveAction)>,
    pub flags: AlarmFlags,
    /// Power must be cut this tick. Set on every tick a powered node is at or
    /// above the trip point, even when the alarm itself is de-duplicated.
    pub cut_power: bool,
}

/// Evaluates the protection rules against a node's current readings.
pub fn evaluate_protection(
    node: &NodeRecord,
    monitor: &Monitor,
    params: &ThermalParams,
    tick: u64,
) -> Protection {
    let mut flags = monitor.flags;
    let mut alarms = Vec::new();
    let mut cut_power = false;
    let powered = node.power.is_powered();
    let node_id = node.spec.node_id;

    if monitor.node_failure_active() && !node.power.is_failed() {
        cut_power = true;
        if !flags.failed {
            flags.failed = true;
            alarms.push((
                Alarm {
                    kind: AlarmKind::NodeFailed,
                    node_id,
                    tick,
                    reading: node.temperature_c,
                },
                ProtectiveAction::CutPower,
            ));
        }
    }

    let hot = node.temperature_c >= params.overheat_trip_c;
    if hot && powered {
        cut_power = true;
        if !flags.overheat {
            flags.overheat = true;
            alarms.push((
                Alarm {
                    kind: AlarmKind::Overheat,
                    node_id,
                    tick,
                    reading: node.temperature_c,
                },
                ProtectiveAction::CutPower,
            ));
        }
    } else if !hot {
        flags.overheat = false;
    }

    let h = node.humidity_pct;
    let humid = h < params.humidity_low_pct || h > params.humidity_high_pct;
    if humid {
        if !flags.humidity {
            flags.humidity = true;
            alarms.push((
                Alarm {
                    kind: AlarmKind::HumidityOutOfRange,
                    node_id,
                    tick,
                    reading: h,
                },
                ProtectiveAction::None,
            ));
        }
    } else {
        flags.humidity = false;
    }

    Protection {
        alarms,
        flags,
        cut_power,
    }
}
