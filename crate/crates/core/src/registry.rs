//! Live node state: the power state machine, controller bindings and
//! reservation marks.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{BlockId, NodeId, NodeSpec, CONTROLLER_CAPACITY};
use crate::thermal::ThermalParams;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PowerState {
    Off,
    Booting(u32),
    Idle,
    Reserved,
    Loaded,
    Draining,
    Overheated,
    Failed,
}

impl PowerState {
    /// Whether the node draws power (and therefore heats).
    pub fn is_powered(self) -> bool {
        matches!(
            self,
            PowerState::Booting(_)
                | PowerState::Idle
                | PowerState::Reserved
                | PowerState::Loaded
                | PowerState::Draining
        )
    }

    pub fn is_failed(self) -> bool {
        self == PowerState::Failed
    }

    pub fn holds_block(self) -> bool {
        matches!(self, PowerState::Reserved | PowerState::Loaded)
    }

    pub fn name(self) -> &'static str {
        match self {
            PowerState::Off => "Off",
            PowerState::Booting(_) => "Booting",
            PowerState::Idle => "Idle",
            PowerState::Reserved => "Reserved",
            PowerState::Loaded => "Loaded",
            PowerState::Draining => "Draining",
            PowerState::Overheated => "Overheated",
            PowerState::Failed => "Failed",
        }
    }
}

impl fmt::Display for PowerState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PowerState::Booting(k) => write!(f, "Booting({k})"),
            other => f.write_str(other.name()),
        }
    }
}

/// The full edge list of the power state machine. `Loaded -> Draining` is
/// only reachable through a forced power-off.
pub fn is_legal_transition(from: PowerState, to: PowerState) -> bool {
    use PowerState::*;
    match (from, to) {
        (_, Failed) => from != Failed,
        (f, Overheated) => f.is_powered(),
        (Off, Booting(_)) => true,
        (Booting(a), Booting(b)) => b + 1 == a,
        (Booting(1), Idle) => true,
        (Idle, Reserved) => true,
        (Reserved, Loaded) => true,
        (Loaded, Reserved) => true,
        (Idle | Reserved | Loaded, Draining) => true,
        (Draining, Off) => true,
        (Overheated | Failed, Off) => true,
        _ => false,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PowerTarget {
    On,
    Off,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeRecord {
    pub spec: NodeSpec,
    pub power: PowerState,
    pub temperature_c: f64,
    pub humidity_pct: f64,
    /// Set exactly while the node is Reserved or Loaded for a block.
    pub block_id: Option<BlockId>,
    /// Block membership mark. Survives power loss so the node is not
    /// re-offered to another tenant while its block is alive.
    pub claim: Option<BlockId>,
    /// Power the node down as soon as a pending boot completes.
    pub off_after_boot: bool,
}

impl NodeRecord {
    pub fn new(spec: NodeSpec, thermal: &ThermalParams) -> Self {
        Self {
            spec,
            power: PowerState::Off,
            temperature_c: thermal.ambient_c,
            humidity_pct: thermal.initial_humidity(),
            block_id: None,
            claim: None,
            off_after_boot: false,
        }
    }

    pub fn id(&self) -> NodeId {
        self.spec.node_id
    }

    /// Free for a new allocation plan.
    pub fn is_eligible(&self) -> bool {
        self.claim.is_none() && matches!(self.power, PowerState::Idle | PowerState::Off)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RegistryError {
    #[error("unknown node {0}")]
    UnknownNode(NodeId),
    #[error("duplicate node id {0}")]
    DuplicateNodeId(NodeId),
    #[error("controller {0} already binds {CONTROLLER_CAPACITY} nodes")]
    ControllerOverCapacity(u16),
    #[error("node {node}: illegal transition {from} -> {to}")]
    IllegalTransition {
        node: NodeId,
        from: PowerState,
        to: String,
    },
    #[error("node {0} is running a job; use forced power-off")]
    RefusedBusy(NodeId),
}

impl RegistryError {
    pub fn code(&self) -> &'static str {
        match self {
            RegistryError::UnknownNode(_) => "UnknownNode",
            RegistryError::DuplicateNodeId(_) => "DuplicateNodeId",
            RegistryError::ControllerOverCapacity(_) => "ControllerOverCapacity",
            RegistryError::IllegalTransition { .. } => "IllegalTransition",
            RegistryError::RefusedBusy(_) => "RefusedBusy",
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Registry {
    nodes: BTreeMap<NodeId, NodeRecord>,
}

impl Registry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register_node(
        &mut self,
        spec: NodeSpec,
        thermal: &ThermalParams,
    ) -> Result<&NodeRecord, RegistryError> {
        let id = spec.node_id;
        if self.nodes.contains_key(&id) {
            return Err(RegistryError::DuplicateNodeId(id));
        }
        if self.controller_load(spec.controller_id) >= CONTROLLER_CAPACITY {
            return Err(RegistryError::ControllerOverCapacity(spec.controller_id));
        }
        self.nodes.insert(id, NodeRecord::new(spec, thermal));
        Ok(&self.nodes[&id])
    }

    pub fn controller_load(&self, controller_id: u16) -> usize {
        self.nodes
            .values()
            .filter(|r| r.spec.controller_id == controller_id)
            .count()
    }

    pub fn get(&self, id: NodeId) -> Result<&NodeRecord, RegistryError> {
        self.nodes.get(&id).ok_or(RegistryError::UnknownNode(id))
    }

    pub(crate) fn get_mut(&mut self, id: NodeId) -> Result<&mut NodeRecord, RegistryError> {
        self.nodes.get_mut(&id).ok_or(RegistryError::UnknownNode(id))
    }

    pub fn records(&self) -> impl Iterator<Item = &NodeRecord> {
        self.nodes.values()
    }

    pub fn ids(&self) -> Vec<NodeId> {
        self.nodes.keys().copied().collect()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Moves a node along one edge of the state machine. Leaving
    /// Reserved/Loaded clears the block binding. Returns the previous state.
    pub(crate) fn transition(&mut self, id: NodeId, to: PowerState) -> Result<PowerState, RegistryError> {
        let rec = self.get_mut(id)?;
        let from = rec.power;
        // entering a block-holding state needs a binding; see `reserve`
        if !is_legal_transition(from, to) || (to.holds_block() && rec.block_id.is_none()) {
            return Err(RegistryError::IllegalTransition {
                node: id,
                from,
                to: to.to_string(),
            });
        }
        rec.power = to;
        if !to.holds_block() {
            rec.block_id = None;
        }
        Ok(from)
    }

    /// Idle -> Reserved, binding the node to `block`.
    pub fn reserve(&mut self, id: NodeId, block: BlockId) -> Result<(), RegistryError> {
        let rec = self.get_mut(id)?;
        if rec.power != PowerState::Idle {
            return Err(RegistryError::IllegalTransition {
                node: id,
                from: rec.power,
                to: PowerState::Reserved.to_string(),
            });
        }
        rec.power = PowerState::Reserved;
        rec.block_id = Some(block);
        rec.claim = Some(block);
        Ok(())
    }

    /// Administrative power command.
    pub fn power_command(
        &mut self,
        id: NodeId,
        desired: PowerTarget,
        forced: bool,
    ) -> Result<PowerState, RegistryError> {
        let rec = self.get(id)?;
        let current = rec.power;
        let illegal = |to: &str| RegistryError::IllegalTransition {
            node: id,
            from: current,
            to: to.to_string(),
        };
        let next = match (desired, current) {
            (PowerTarget::On, PowerState::Off) => PowerState::Booting(rec.spec.boot_ticks),
            (
                PowerTarget::On,
                PowerState::Booting(_) | PowerState::Idle | PowerState::Reserved | PowerState::Loaded,
            ) => return Ok(current),
            (PowerTarget::On, _) => return Err(illegal("On")),
            (PowerTarget::Off, PowerState::Off | PowerState::Draining) => return Ok(current),
            (PowerTarget::Off, PowerState::Idle | PowerState::Reserved) => PowerState::Draining,
            (PowerTarget::Off, PowerState::Loaded) if forced => PowerState::Draining,
            (PowerTarget::Off, PowerState::Loaded) => return Err(RegistryError::RefusedBusy(id)),
            (PowerTarget::Off, _) => return Err(illegal("Off")),
        };
        self.transition(id, next)?;
        Ok(next)
    }

    /// Per-tick countdown: Booting(k) -> Booting(k-1), Booting(1) -> Idle,
    /// Draining -> Off. Other states are untouched.
    pub fn step_power(&mut self, id: NodeId) -> Result<PowerState, RegistryError> {
        let current = self.get(id)?.power;
        let next = match current {
            PowerState::Booting(k) if k > 1 => PowerState::Booting(k - 1),
            PowerState::Booting(_) => PowerState::Idle,
            PowerState::Draining => PowerState::Off,
            other => return Ok(other),
        };
        self.transition(id, next)?;
        Ok(next)
    }

    /// Administrative reset of a tripped or failed node.
    pub fn reset(&mut self, id: NodeId) -> Result<PowerState, RegistryError> {
        let current = self.get(id)?.power;
        match current {
            PowerState::Overheated | PowerState::Failed => {
                self.transition(id, PowerState::Off)?;
                Ok(PowerState::Off)
            }
            _ => Err(RegistryError::IllegalTransition {
                node: id,
                from: current,
                to: "Off (reset)".into(),
            }),
        }
    }
}
