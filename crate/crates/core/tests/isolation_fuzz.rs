use std::collections::BTreeMap;

use proptest::prelude::*;

use pubcluster_core::auth::{Actor, Role};
use pubcluster_core::domain::{ClusterConfig, NodeSpec};
use pubcluster_core::workload::{apply, RunStats, Workload};
use pubcluster_core::world::{BlockState, Command, World};
use pubcluster_core::{replay, BlockId};

fn config(nodes: u64) -> ClusterConfig {
    let mut c = ClusterConfig::with_nodes(
        (1..=nodes)
            .map(|i| NodeSpec::new(i, (i % 4) as u8, (i % 2) as u16))
            .collect(),
    );
    // ten minutes per tick keeps leases within a short run
    c.tick_seconds = 600.0;
    c.ga.generations = 40;
    c
}

/// Node-level ownership view: which block holds each node.
fn holders(world: &World) -> BTreeMap<u64, BlockId> {
    world
        .registry()
        .records()
        .filter_map(|r| r.claim.map(|b| (r.id().0, b)))
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn random_runs_keep_invariants(seed in any::<u64>(), wseed in any::<u64>()) {
        let cfg = config(8);
        let mut world = World::new(cfg.clone(), wseed).unwrap();
        let mut workload = Workload::new(seed);
        let mut stats = RunStats::default();
        let mut log = Vec::new();
        for cmd in workload.setup() {
            log.extend(apply(&mut world, cmd, &mut stats));
        }
        for _ in 0..150 {
            for cmd in workload.next_batch(&world) {
                let before = holders(&world);
                let owner_of: BTreeMap<BlockId, String> =
                    world.blocks().map(|b| (b.block_id, b.owner.clone())).collect();
                let actor = match &cmd {
                    Command::SubmitJob { actor, .. } => Some(actor.clone()),
                    Command::ReleaseBlock { actor, .. } => Some(actor.clone()),
                    _ => None,
                };
                log.extend(apply(&mut world, cmd, &mut stats));
                // ownership: a non-admin user never changes someone else's block
                if let Some(Actor::User(user)) = actor {
                    let admin = world.token(&user).is_some_and(|t| t.role == Role::Admin);
                    if !admin {
                        let after = holders(&world);
                        for (node, block) in &before {
                            if owner_of.get(block) != Some(&user) {
                                prop_assert_eq!(after.get(node), Some(block));
                            }
                        }
                    }
                }
                let v = world.check_invariants();
                prop_assert!(v.is_empty(), "{:?}", v);
            }
        }
        let rebuilt = replay(cfg, wseed, &log).unwrap();
        prop_assert_eq!(rebuilt.canonical_json(), world.canonical_json());
    }
}

#[test]
fn nothing_outlives_its_lease() {
    let cfg = config(10);
    let mut world = World::new(cfg, 5).unwrap();
    let mut workload = Workload::new(99);
    let mut stats = RunStats::default();
    for cmd in workload.setup() {
        apply(&mut world, cmd, &mut stats);
    }
    for _ in 0..600 {
        for cmd in workload.next_batch(&world) {
            apply(&mut world, cmd, &mut stats);
        }
        for b in world.blocks() {
            if b.state != BlockState::Released {
                assert!(world.tick() <= b.expires_at_tick + 1, "block {} overstays", b.block_id);
            }
        }
    }
    assert!(stats.blocks > 3, "{stats:?}");
    assert!(stats.jobs > 3, "{stats:?}");
}
