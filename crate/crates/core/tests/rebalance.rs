use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use swarmnet_core::registry::{MembershipEvent, SwarmParams, SwarmRegistry};
use swarmnet_core::store::{apply_migration, NodeStore, Placement};
use swarmnet_core::{Envelope, NodeId, PublicKey, RecordHash, Ring};

const NOW: u64 = 1_000;

fn registry(nodes: u32) -> SwarmRegistry {
    let mut reg = SwarmRegistry::new(Ring::default(), SwarmParams::default());
    for n in 0..nodes {
        reg.apply(MembershipEvent::Join(NodeId(n)));
    }
    reg
}

/// Store `count` random records on every member of each record's swarm.
fn populate(
    reg: &SwarmRegistry,
    count: usize,
    rng: &mut ChaCha20Rng,
) -> (BTreeMap<NodeId, NodeStore>, Vec<(RecordHash, PublicKey)>) {
    let mut stores: BTreeMap<NodeId, NodeStore> =
        reg.swarms().flat_map(|(_, m)| m.to_vec()).map(|n| (n, NodeStore::new())).collect();
    let swarms = reg.swarm_ids();
    let ring = *reg.ring();
    let mut records = Vec::new();
    for i in 0..count {
        let recipient = PublicKey(rng.gen());
        let env = Envelope::new(recipient, 3600, 0, 0, format!("record {i}").into_bytes()).unwrap();
        let own = reg.assign(&recipient).unwrap();
        let placement = Placement { ring: &ring, swarms: &swarms, own };
        for m in reg.members(own).unwrap() {
            assert!(stores.get_mut(m).unwrap().accept_replica(env.clone(), NOW, placement, None).is_accepted());
        }
        records.push((env.record_hash(), recipient));
    }
    (stores, records)
}

fn assert_sizes(reg: &SwarmRegistry) {
    let p = reg.params();
    for (id, members) in reg.swarms() {
        assert!((p.min..=p.max).contains(&members.len()), "swarm {id} has {} members", members.len());
    }
}

#[test]
fn joins_build_swarms_within_bounds() {
    for nodes in [5, 7, 12, 30, 75, 140] {
        let reg = registry(nodes);
        assert_sizes(&reg);
        let placed: usize = reg.swarms().map(|(_, m)| m.len()).sum();
        assert_eq!(placed + reg.pool().len(), nodes as usize);
    }
}

#[test]
fn records_follow_their_owner_through_departures() {
    let mut rng = ChaCha20Rng::seed_from_u64(41);
    let mut reg = registry(40);
    let (mut stores, records) = populate(&reg, 300, &mut rng);
    let mut dissolved = false;
    while reg.node_count() > 12 {
        let members: Vec<NodeId> = reg.swarms().flat_map(|(_, m)| m.to_vec()).collect();
        let leaving = members[rng.gen_range(0..members.len())];
        let swarms_before = reg.swarm_ids();
        let plan = reg.apply(MembershipEvent::Leave(leaving));
        stores.remove(&leaving);
        for (_, m) in reg.swarms() {
            for n in m {
                stores.entry(*n).or_default();
            }
        }
        let report = apply_migration(&plan, &reg, &mut stores, NOW);
        assert!(report.flagged.is_empty());
        dissolved |= reg.swarm_ids() != swarms_before;
        assert_sizes(&reg);
        for (hash, recipient) in &records {
            let owner = reg.assign(recipient).unwrap();
            for m in reg.members(owner).unwrap() {
                assert!(stores[m].contains(hash), "n{m} in swarm {owner} lacks {}", hash.to_hex());
            }
        }
    }
    assert!(dissolved, "no departure ever changed the swarm set");
}

#[test]
fn snapshot_round_trip() {
    let reg = registry(33);
    let text = reg.to_snapshot();
    let back = SwarmRegistry::from_snapshot(&text, Ring::default(), SwarmParams::default()).unwrap();
    assert_eq!(back.swarm_ids(), reg.swarm_ids());
    for (id, members) in reg.swarms() {
        assert_eq!(back.members(id).unwrap(), members);
    }
    let ids: BTreeSet<_> = reg.swarm_ids();
    assert!(ids.len() >= 3);
}
