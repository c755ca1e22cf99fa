//! Core model of a shared, leased compute cluster: configuration, the node
//! registry and power state machine, the genetic block allocator, the
//! thermal monitor, and the event-sourced world that ties them together.

pub mod allocator;
pub mod auth;
pub mod domain;
pub mod event;
pub mod registry;
pub mod replay;
pub mod thermal;
pub mod workload;
pub mod world;

pub use domain::{BlockId, ClusterConfig, JobId, NodeId, PlanId, RequestId};
pub use event::{Event, EventKind};
pub use replay::{parse_log, replay, ReplayError};
pub use world::{Command, CommandError, Reply, World};
