//! Shared domain types and cluster-configuration ingestion.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::allocator::{FitnessWeights, GaParams};
use crate::thermal::ThermalParams;

/// Maximum number of physical nodes one monitoring controller can serve.
pub const CONTROLLER_CAPACITY: usize = 45;

/// Highest ordinal performance level.
pub const MAX_CLASS_LEVEL: u8 = 9;

macro_rules! id_newtype {
    ($(#[$meta:meta])* $name:ident) => {
        $(#[$meta])*
        #[derive(
            Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
        )]
        #[serde(transparent)]
        pub struct $name(pub u64);

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                write!(f, "{}", self.0)
            }
        }

        impl From<u64> for $name {
            fn from(v: u64) -> Self {
                Self(v)
            }
        }
    };
}

id_newtype!(
    /// Cluster-wide unique node identifier.
    NodeId
);
id_newtype!(RequestId);
id_newtype!(BlockId);
id_newtype!(JobId);
id_newtype!(PlanId);

/// Ordinal performance rank of a node. Only `level` takes part in comparisons;
/// the label is descriptive ("i486", "athlon", ...).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NodeClass {
    pub level: u8,
    #[serde(default)]
    pub label: String,
}

impl NodeClass {
    pub fn new(level: u8, label: impl Into<String>) -> Self {
        Self {
            level,
            label: label.into(),
        }
    }

    pub fn level(level: u8) -> Self {
        Self::new(level, "")
    }
}

impl PartialEq for NodeClass {
    fn eq(&self, other: &Self) -> bool {
        self.level == other.level
    }
}

impl Eq for NodeClass {}

impl PartialOrd for NodeClass {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for NodeClass {
    fn cmp(&self, other: &Self) -> Ordering {
        self.level.cmp(&other.level)
    }
}

fn default_boot_ticks() -> u32 {
    3
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeSpec {
    pub node_id: NodeId,
    pub class: NodeClass,
    pub controller_id: u16,
    #[serde(default = "default_boot_ticks")]
    pub boot_ticks: u32,
}

impl NodeSpec {
    pub fn new(node_id: u64, level: u8, controller_id: u16) -> Self {
        Self {
            node_id: NodeId(node_id),
            class: NodeClass::level(level),
            controller_id,
            boot_ticks: default_boot_ticks(),
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.node_id.0 == 0 {
            return Err(ConfigError::InvalidParameter(
                "node_id must be positive".into(),
            ));
        }
        if self.class.level > MAX_CLASS_LEVEL {
            return Err(ConfigError::InvalidParameter(format!(
                "node {}: class level {} exceeds {MAX_CLASS_LEVEL}",
                self.node_id, self.class.level
            )));
        }
        if self.boot_ticks == 0 {
            return Err(ConfigError::InvalidParameter(format!(
                "node {}: boot_ticks must be positive",
                self.node_id
            )));
        }
        Ok(())
    }
}

/// Limits applied to anonymous users at admission.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdmissionPolicy {
    pub max_nodes_anonymous: u32,
    pub max_lease_hours_anonymous: u32,
    pub max_active_blocks_per_user: u32,
}

impl Default for AdmissionPolicy {
    fn default() -> Self {
        Self {
            max_nodes_anonymous: 3,
            max_lease_hours_anonymous: 72,
            max_active_blocks_per_user: 1,
        }
    }
}

impl AdmissionPolicy {
    fn validate(&self) -> Result<(), ConfigError> {
        if self.max_nodes_anonymous < 1
            || self.max_lease_hours_anonymous < 1
            || self.max_active_blocks_per_user < 1
        {
            return Err(ConfigError::InvalidParameter(
                "admission limits must all be >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// Whether allocation plans wait for an administrator or are activated by
/// the gateway after every tick.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AllocationMode {
    #[default]
    Admin,
    Auto,
}

fn default_tick_seconds() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterConfig {
    pub nodes: Vec<NodeSpec>,
    #[serde(default)]
    pub thermal: ThermalParams,
    #[serde(default)]
    pub ga: GaParams,
    #[serde(default)]
    pub fitness: FitnessWeights,
    #[serde(default)]
    pub admission: AdmissionPolicy,
    #[serde(default = "default_tick_seconds")]
    pub tick_seconds: f64,
    #[serde(default)]
    pub allocation_mode: AllocationMode,
}

impl ClusterConfig {
    pub fn with_nodes(nodes: Vec<NodeSpec>) -> Self {
        Self {
            nodes,
            thermal: ThermalParams::default(),
            ga: GaParams::default(),
            fitness: FitnessWeights::default(),
            admission: AdmissionPolicy::default(),
            tick_seconds: default_tick_seconds(),
            allocation_mode: AllocationMode::default(),
        }
    }

    /// Checks every configuration invariant.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let mut seen = BTreeSet::new();
        let mut per_controller: BTreeMap<u16, usize> = BTreeMap::new();
        for spec in &self.nodes {
            spec.validate()?;
            if !seen.insert(spec.node_id) {
                return Err(ConfigError::DuplicateNodeId(spec.node_id));
            }
            let bound = per_controller.entry(spec.controller_id).or_default();
            *bound += 1;
            if *bound > CONTROLLER_CAPACITY {
                return Err(ConfigError::ControllerOverCapacity(spec.controller_id));
            }
        }
        self.thermal.validate()?;
        self.ga.validate().map_err(|e| ConfigError::InvalidParameter(e.to_string()))?;
        self.admission.validate()?;
        if !(self.tick_seconds.is_finite() && self.tick_seconds > 0.0) {
            return Err(ConfigError::InvalidParameter(
                "tick_seconds must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ConfigError {
    #[error("malformed input: {0}")]
    MalformedInput(String),
    #[error("duplicate node id {0}")]
    DuplicateNodeId(NodeId),
    #[error("controller {0} would bind more than {CONTROLLER_CAPACITY} nodes")]
    ControllerOverCapacity(u16),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
}

impl ConfigError {
    pub fn code(&self) -> &'static str {
        match self {
            ConfigError::MalformedInput(_) => "MalformedInput",
            ConfigError::DuplicateNodeId(_) => "DuplicateNodeId",
            ConfigError::ControllerOverCapacity(_) => "ControllerOverCapacity",
            ConfigError::InvalidParameter(_) => "InvalidParameter",
        }
    }
}

/// Parses and validates a JSON cluster configuration.
pub fn parse_cluster_config(raw: &[u8]) -> Result<ClusterConfig, ConfigError> {
    let config: ClusterConfig =
        serde_json::from_slice(raw).map_err(|e| ConfigError::MalformedInput(e.to_string()))?;
    config.validate()?;
    Ok(config)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_parses() {
        let raw = br#"{"nodes":[
            {"node_id":1,"class":{"level":0,"label":"i486"},"controller_id":1},
            {"node_id":2,"class":{"level":7,"label":"athlon"},"controller_id":1}
        ]}"#;
        let cfg = parse_cluster_config(raw).unwrap();
        assert_eq!(cfg.nodes.len(), 2);
        assert_eq!(cfg.nodes[0].boot_ticks, 3);
        assert_eq!(cfg.admission, AdmissionPolicy::default());
        assert_eq!(cfg.tick_seconds, 1.0);
        assert!(cfg.nodes[0].class < cfg.nodes[1].class);
    }

    #[test]
    fn forty_six_nodes_on_one_controller_rejected() {
        let nodes: Vec<_> = (1..=46).map(|i| NodeSpec::new(i, 1, 1)).collect();
        let raw = ClusterConfig::with_nodes(nodes).to_json();
        assert_eq!(
            parse_cluster_config(raw.as_bytes()),
            Err(ConfigError::ControllerOverCapacity(1))
        );

        let nodes: Vec<_> = (1..=45).map(|i| NodeSpec::new(i, 1, 1)).collect();
        let raw = ClusterConfig::with_nodes(nodes).to_json();
        assert!(parse_cluster_config(raw.as_bytes()).is_ok());
    }

    #[test]
    fn duplicate_ids_rejected() {
        let raw = br#"{"nodes":[
            {"node_id":1,"class":{"level":1},"controller_id":1},
            {"node_id":1,"class":{"level":2},"controller_id":2}
        ]}"#;
        assert_eq!(
            parse_cluster_config(raw),
            Err(ConfigError::DuplicateNodeId(NodeId(1)))
        );
    }

    #[test]
    fn malformed_and_out_of_range() {
        assert!(matches!(
            parse_cluster_config(b"{nodes: oops"),
            Err(ConfigError::MalformedInput(_))
        ));
        let raw = br#"{"nodes":[{"node_id":1,"class":{"level":12},"controller_id":1}]}"#;
        assert!(matches!(
            parse_cluster_config(raw),
            Err(ConfigError::InvalidParameter(_))
        ));
        let raw = br#"{"nodes":[],"tick_seconds":0}"#;
        assert!(matches!(
            parse_cluster_config(raw),
            Err(ConfigError::InvalidParameter(_))
        ));
        let raw = br#"{"nodes":[],"admission":{"max_nodes_anonymous":0}}"#;
        assert!(matches!(
            parse_cluster_config(raw),
            Err(ConfigError::InvalidParameter(_))
        ));
    }

    #[test]
    fn class_compares_by_level_only() {
        assert_eq!(NodeClass::new(3, "p2"), NodeClass::new(3, "k6"));
        assert!(NodeClass::new(0, "i486") < NodeClass::new(7, "athlon"));
    }
}
