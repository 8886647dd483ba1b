//! Per-node replicated message store.
//!
//! Entry nodes admit envelopes through [`NodeStore::store`], which checks
//! proof of work and that the recipient belongs to this node's swarm. Swarm
//! peers then receive copies through [`NodeStore::accept_replica`], which skips
//! the work check (unless strict) but still enforces TTL and ownership.
//! Nothing expired is ever returned or re-admitted.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use crate::envelope::{Envelope, RecordHash, MAX_TTL_SECS};
use crate::keys::{NodeId, PublicKey};
use crate::pow::{self, RejectReason, Verdict};
use crate::registry::{Migration, MigrationPlan, SwarmRegistry};
use crate::ring::{Ring, SwarmId};

/// Default page size for [`NodeStore::retrieve`].
pub const DEFAULT_PAGE_SIZE: usize = 64;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StoredRecord {
    pub hash: RecordHash,
    pub envelope: Envelope,
    pub expiry_ms: u64,
    pub origin_swarm: SwarmId,
}

impl StoredRecord {
    pub fn new(envelope: Envelope, origin_swarm: SwarmId) -> Self {
        Self { hash: envelope.record_hash(), expiry_ms: envelope.expiry_ms(), envelope, origin_swarm }
    }

    pub fn size_bytes(&self) -> usize {
        8 + crate::envelope::PAYLOAD_HEADER_LEN + self.envelope.ciphertext.len()
    }
}

/// Where records belong: the ring, current swarm ids, and this node's swarm.
#[derive(Clone, Copy, Debug)]
pub struct Placement<'a> {
    pub ring: &'a Ring,
    pub swarms: &'a BTreeSet<SwarmId>,
    pub own: SwarmId,
}

impl<'a> Placement<'a> {
    pub fn owner(&self, pk: &PublicKey) -> Option<SwarmId> {
        self.ring.assign_pubkey(pk, self.swarms).ok()
    }

    pub fn is_own(&self, pk: &PublicKey) -> bool {
        self.owner(pk) == Some(self.own)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StoreRejection {
    /// Work did not meet the threshold at this difficulty.
    PowInvalid {
        difficulty: u64,
    },
    /// Recipient maps to another swarm.
    WrongSwarm {
        correct: SwarmId,
    },
    TtlExceeded,
    Expired,
    ClockSkew,
    Malformed,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StoreOutcome {
    Stored(RecordHash),
    Duplicate(RecordHash),
    Rejected(StoreRejection),
}

impl StoreOutcome {
    pub fn is_accepted(&self) -> bool {
        matches!(self, StoreOutcome::Stored(_) | StoreOutcome::Duplicate(_))
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Page {
    pub records: Vec<StoredRecord>,
    /// Pass back to fetch the next page; `None` when this was the last.
    pub next_cursor: Option<RecordHash>,
}

#[derive(Clone, Debug, Default)]
pub struct NodeStore {
    records: BTreeMap<RecordHash, StoredRecord>,
    by_recipient: HashMap<PublicKey, BTreeSet<RecordHash>>,
}

impl NodeStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn contains(&self, hash: &RecordHash) -> bool {
        self.records.contains_key(hash)
    }

    pub fn get(&self, hash: &RecordHash) -> Option<&StoredRecord> {
        self.records.get(hash)
    }

    /// Unexpired record by hash.
    pub fn get_live(&self, hash: &RecordHash, now_ms: u64) -> Option<&StoredRecord> {
        self.records.get(hash).filter(|r| r.expiry_ms > now_ms)
    }

    pub fn records(&self) -> impl Iterator<Item = &StoredRecord> {
        self.records.values()
    }

    pub fn hashes(&self) -> BTreeSet<RecordHash> {
        self.records.keys().copied().collect()
    }

    pub fn size_bytes(&self) -> usize {
        self.records.values().map(StoredRecord::size_bytes).sum()
    }

    /// Admit a client-submitted envelope at an entry node.
    pub fn store(
        &mut self,
        envelope: Envelope,
        difficulty: u64,
        now_ms: u64,
        placement: Placement<'_>,
    ) -> StoreOutcome {
        match pow::verify(&envelope, difficulty, now_ms) {
            Verdict::Accepted => {}
            Verdict::Rejected { reason, difficulty } => {
                return StoreOutcome::Rejected(match reason {
                    RejectReason::InsufficientWork => StoreRejection::PowInvalid { difficulty },
                    RejectReason::TtlExceeded => StoreRejection::TtlExceeded,
                    RejectReason::ClockSkew => StoreRejection::ClockSkew,
                    RejectReason::EmptyCiphertext => StoreRejection::Malformed,
                })
            }
        }
        self.insert_checked(envelope, now_ms, placement)
    }

    /// Accept a copy from a swarm peer. `strict_difficulty` re-runs the work check.
    pub fn accept_replica(
        &mut self,
        envelope: Envelope,
        now_ms: u64,
        placement: Placement<'_>,
        strict_difficulty: Option<u64>,
    ) -> StoreOutcome {
        if let Some(d) = strict_difficulty {
            if !pow::has_valid_work(&envelope, d) {
                return StoreOutcome::Rejected(StoreRejection::PowInvalid { difficulty: d });
            }
        }
        if envelope.ttl_secs > MAX_TTL_SECS {
            return StoreOutcome::Rejected(StoreRejection::TtlExceeded);
        }
        if envelope.ciphertext.is_empty() {
            return StoreOutcome::Rejected(StoreRejection::Malformed);
        }
        self.insert_checked(envelope, now_ms, placement)
    }

    fn insert_checked(&mut self, envelope: Envelope, now_ms: u64, placement: Placement<'_>) -> StoreOutcome {
        match placement.owner(&envelope.recipient) {
            Some(s) if s == placement.own => {}
            Some(correct) => return StoreOutcome::Rejected(StoreRejection::WrongSwarm { correct }),
            None => return StoreOutcome::Rejected(StoreRejection::WrongSwarm { correct: SwarmId::UNKNOWN }),
        }
        if envelope.expiry_ms() <= now_ms {
            return StoreOutcome::Rejected(StoreRejection::Expired);
        }
        let record = StoredRecord::new(envelope, placement.own);
        let hash = record.hash;
        if self.records.contains_key(&hash) {
            return StoreOutcome::Duplicate(hash);
        }
        self.by_recipient.entry(record.envelope.recipient).or_default().insert(hash);
        self.records.insert(hash, record);
        StoreOutcome::Stored(hash)
    }

    /// Unexpired records for `recipient` in hash order, starting after `cursor`.
    pub fn retrieve(&self, recipient: &PublicKey, cursor: Option<RecordHash>, limit: usize, now_ms: u64) -> Page {
        let Some(hashes) = self.by_recipient.get(recipient) else {
            return Page::default();
        };
        let start = match cursor {
            Some(c) => std::ops::Bound::Excluded(c),
            None => std::ops::Bound::Unbounded,
        };
        let mut records = Vec::new();
        let mut more = false;
        for h in hashes.range((start, std::ops::Bound::Unbounded)) {
            let r = &self.records[h];
            if r.expiry_ms <= now_ms {
                continue;
            }
            if records.len() == limit {
                more = true;
                break;
            }
            records.push(r.clone());
        }
        let next_cursor = if more { records.last().map(|r| r.hash) } else { None };
        Page { records, next_cursor }
    }

    /// Drop everything with `expiry <= now`. Returns how many went.
    pub fn expire(&mut self, now_ms: u64) -> usize {
        let dead: Vec<RecordHash> = self.records.values().filter(|r| r.expiry_ms <= now_ms).map(|r| r.hash).collect();
        for h in &dead {
            self.remove(h);
        }
        dead.len()
    }

    pub fn remove(&mut self, hash: &RecordHash) -> Option<StoredRecord> {
        let r = self.records.remove(hash)?;
        if let Some(set) = self.by_recipient.get_mut(&r.envelope.recipient) {
            set.remove(hash);
            if set.is_empty() {
                self.by_recipient.remove(&r.envelope.recipient);
            }
        }
        Some(r)
    }

    pub fn clear(&mut self) {
        self.records.clear();
        self.by_recipient.clear();
    }

    /// Remove and return every record matching `take`.
    pub fn drain_where(&mut self, mut take: impl FnMut(&StoredRecord) -> bool) -> Vec<StoredRecord> {
        let hashes: Vec<RecordHash> = self.records.values().filter(|r| take(r)).map(|r| r.hash).collect();
        hashes.iter().filter_map(|h| self.remove(h)).collect()
    }

    /// Records whose recipient maps to `swarm` under `ring`/`swarms`.
    pub fn records_for(
        &self,
        ring: &Ring,
        swarms: &BTreeSet<SwarmId>,
        swarm: SwarmId,
        now_ms: u64,
    ) -> Vec<StoredRecord> {
        self.records
            .values()
            .filter(|r| r.expiry_ms > now_ms && ring.assign_pubkey(&r.envelope.recipient, swarms).ok() == Some(swarm))
            .cloned()
            .collect()
    }

    /// Anti-entropy: which of our hashes the peer lacks, and which of theirs we lack.
    pub fn reconcile(&self, peer_hashes: &BTreeSet<RecordHash>) -> (Vec<RecordHash>, Vec<RecordHash>) {
        let ours = self.hashes();
        let they_lack = ours.difference(peer_hashes).copied().collect();
        let we_lack = peer_hashes.difference(&ours).copied().collect();
        (they_lack, we_lack)
    }
}

/// Offer `record` to every peer store. Returns the peers that ended up holding it.
pub fn propagate<'a>(
    record: &StoredRecord,
    peers: impl IntoIterator<Item = (NodeId, &'a mut NodeStore)>,
    now_ms: u64,
    placement: Placement<'_>,
) -> BTreeSet<NodeId> {
    peers
        .into_iter()
        .filter_map(|(id, store)| {
            store.accept_replica(record.envelope.clone(), now_ms, placement, None).is_accepted().then_some(id)
        })
        .collect()
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct MigrationReport {
    pub pushed: usize,
    pub redistributed: usize,
    pub erased: usize,
    /// Records whose destination swarm is unknown; left where they were.
    pub flagged: Vec<RecordHash>,
}

/// Execute `plan` directly against in-memory stores. `registry` is the
/// post-rebalance membership. Stores missing from `stores` are treated as offline.
pub fn apply_migration(
    plan: &MigrationPlan,
    registry: &SwarmRegistry,
    stores: &mut BTreeMap<NodeId, NodeStore>,
    now_ms: u64,
) -> MigrationReport {
    let ring = *registry.ring();
    let swarms = registry.swarm_ids();
    let mut report = MigrationReport::default();
    for step in &plan.steps {
        match step {
            Migration::Redistribute { sources, from_swarm, dest } => {
                let Some(dest_members) = registry.members(*dest) else {
                    for s in sources {
                        if let Some(store) = stores.get(s) {
                            report.flagged.extend(store.records().map(|r| r.hash));
                        }
                    }
                    continue;
                };
                let dest_members = dest_members.to_vec();
                for src in sources {
                    let Some(store) = stores.get_mut(src) else { continue };
                    let moving = store.drain_where(|r| {
                        r.origin_swarm == *from_swarm
                            && ring.assign_pubkey(&r.envelope.recipient, &swarms).ok() == Some(*dest)
                    });
                    for record in moving {
                        report.redistributed += 1;
                        for m in &dest_members {
                            if let Some(dst) = stores.get_mut(m) {
                                let placement = Placement { ring: &ring, swarms: &swarms, own: *dest };
                                dst.accept_replica(record.envelope.clone(), now_ms, placement, None);
                            }
                        }
                    }
                }
            }
            Migration::Erase { node, .. } => {
                if let Some(store) = stores.get_mut(node) {
                    let current = registry.swarm_of(*node);
                    // Keep only what the node's current swarm is responsible for.
                    let dropped = store.drain_where(|r| {
                        current.is_none() || ring.assign_pubkey(&r.envelope.recipient, &swarms).ok() != current
                    });
                    report.erased += dropped.len();
                }
            }
            Migration::PushAll { swarm, to } => {
                let Some(members) = registry.members(*swarm) else { continue };
                let records: Vec<StoredRecord> = members
                    .iter()
                    .filter(|m| *m != to)
                    .filter_map(|m| stores.get(m))
                    .flat_map(|s| s.records_for(&ring, &swarms, *swarm, now_ms))
                    .collect();
                if let Some(dst) = stores.get_mut(to) {
                    let placement = Placement { ring: &ring, swarms: &swarms, own: *swarm };
                    for r in records {
                        if matches!(dst.accept_replica(r.envelope, now_ms, placement, None), StoreOutcome::Stored(_)) {
                            report.pushed += 1;
                        }
                    }
                }
            }
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pow::{mine_envelope, DEFAULT_ATTEMPT_CAP};
    use crate::registry::{MembershipEvent, SwarmParams};

    const NOW: u64 = 1_000_000;

    fn single_swarm() -> (Ring, BTreeSet<SwarmId>) {
        (Ring::default(), BTreeSet::from([SwarmId(0)]))
    }

    fn env(recipient: [u8; 32], ttl: u64, body: &[u8]) -> Envelope {
        let mut e = Envelope::new(PublicKey(recipient), ttl, NOW, 0, body.to_vec()).unwrap();
        mine_envelope(&mut e, 1, DEFAULT_ATTEMPT_CAP).unwrap();
        e
    }

    #[test]
    fn store_then_retrieve_and_duplicate() {
        let (ring, swarms) = single_swarm();
        let pl = Placement { ring: &ring, swarms: &swarms, own: SwarmId(0) };
        let mut s = NodeStore::new();
        let e = env([1; 32], 60, b"hi");
        let h = e.record_hash();
        assert_eq!(s.store(e.clone(), 1, NOW, pl), StoreOutcome::Stored(h));
        assert_eq!(s.store(e.clone(), 1, NOW, pl), StoreOutcome::Duplicate(h));
        assert_eq!(s.len(), 1);
        let page = s.retrieve(&PublicKey([1; 32]), None, 10, NOW);
        assert_eq!(page.records.len(), 1);
        assert_eq!(page.records[0].envelope, e);
        assert!(s.retrieve(&PublicKey([2; 32]), None, 10, NOW).records.is_empty());
    }

    #[test]
    fn wrong_swarm_names_owner() {
        let ring = Ring::default();
        let swarms = BTreeSet::from([SwarmId(0), SwarmId(1 << 63)]);
        // Key whose XOR fold lands at 2^63 belongs to the second swarm.
        let mut key = [0u8; 32];
        key[0] = 0x80;
        assert_eq!(ring.assign_pubkey(&PublicKey(key), &swarms), Ok(SwarmId(1 << 63)));
        let pl = Placement { ring: &ring, swarms: &swarms, own: SwarmId(0) };
        let mut s = NodeStore::new();
        assert_eq!(
            s.store(env(key, 60, b"x"), 1, NOW, pl),
            StoreOutcome::Rejected(StoreRejection::WrongSwarm { correct: SwarmId(1 << 63) })
        );
    }

    #[test]
    fn pow_rejection_reports_difficulty() {
        let (ring, swarms) = single_swarm();
        let pl = Placement { ring: &ring, swarms: &swarms, own: SwarmId(0) };
        let mut e = env([1; 32], 60, b"hi");
        e.nonce = e.nonce.wrapping_add(1);
        let mut s = NodeStore::new();
        let huge = u64::MAX / 4;
        assert_eq!(s.store(e, huge, NOW, pl), StoreOutcome::Rejected(StoreRejection::PowInvalid { difficulty: huge }));
    }

    #[test]
    fn expiry_hides_and_purges() {
        let (ring, swarms) = single_swarm();
        let pl = Placement { ring: &ring, swarms: &swarms, own: SwarmId(0) };
        let mut s = NodeStore::new();
        for i in 0..3u8 {
            s.store(env([1; 32], 10, &[i]), 1, NOW, pl);
        }
        for i in 0..2u8 {
            s.store(env([1; 32], 1000, &[10 + i]), 1, NOW, pl);
        }
        assert_eq!(s.expire(NOW), 0);
        assert_eq!(s.retrieve(&PublicKey([1; 32]), None, 10, NOW + 10_000).records.len(), 2);
        assert_eq!(s.expire(NOW + 10_000), 3);
        assert_eq!(s.len(), 2);
        assert_eq!(s.expire(NOW + 10_000), 0);
        assert_eq!(s.expire(NOW + 1_000_000), 2);
        assert!(s.retrieve(&PublicKey([1; 32]), None, 10, NOW + 1_000_000).records.is_empty());
    }

    #[test]
    fn expired_record_is_not_resurrected() {
        let (ring, swarms) = single_swarm();
        let pl = Placement { ring: &ring, swarms: &swarms, own: SwarmId(0) };
        let e = env([1; 32], 10, b"short");
        let mut s = NodeStore::new();
        s.store(e.clone(), 1, NOW, pl);
        s.expire(NOW + 10_000);
        assert_eq!(s.accept_replica(e, NOW + 10_000, pl, None), StoreOutcome::Rejected(StoreRejection::Expired));
        assert!(s.is_empty());
    }

    #[test]
    fn pagination_is_stable_in_hash_order() {
        let (ring, swarms) = single_swarm();
        let pl = Placement { ring: &ring, swarms: &swarms, own: SwarmId(0) };
        let mut s = NodeStore::new();
        let mut expected = Vec::new();
        for i in 0..5u8 {
            let e = env([4; 32], 100, &[i, i]);
            expected.push(e.record_hash());
            s.store(e, 1, NOW, pl);
        }
        expected.sort();
        let mut seen = Vec::new();
        let mut sizes = Vec::new();
        let mut cursor = None;
        loop {
            let page = s.retrieve(&PublicKey([4; 32]), cursor, 2, NOW);
            sizes.push(page.records.len());
            seen.extend(page.records.iter().map(|r| r.hash));
            match page.next_cursor {
                Some(c) => cursor = Some(c),
                None => break,
            }
        }
        assert_eq!(sizes, vec![2, 2, 1]);
        assert_eq!(seen, expected);
    }

    #[test]
    fn propagation_fills_swarm() {
        let (ring, swarms) = single_swarm();
        let pl = Placement { ring: &ring, swarms: &swarms, own: SwarmId(0) };
        let mut stores: BTreeMap<NodeId, NodeStore> = (0..7).map(|i| (NodeId(i), NodeStore::new())).collect();
        let e = env([9; 32], 100, b"fan out");
        for entry in 0..3 {
            stores.get_mut(&NodeId(entry)).unwrap().store(e.clone(), 1, NOW, pl);
        }
        let record = stores[&NodeId(0)].get(&e.record_hash()).unwrap().clone();
        let holders = propagate(&record, stores.iter_mut().map(|(id, s)| (*id, s)), NOW, pl);
        assert_eq!(holders.len(), 7);
        let reference = stores[&NodeId(0)].hashes();
        assert!(stores.values().all(|s| s.hashes() == reference));
        assert!(propagate(&record, std::iter::empty(), NOW, pl).is_empty());
    }

    #[test]
    fn reconcile_finds_differences() {
        let (ring, swarms) = single_swarm();
        let pl = Placement { ring: &ring, swarms: &swarms, own: SwarmId(0) };
        let mut a = NodeStore::new();
        let mut b = NodeStore::new();
        let (x, y, z) = (env([1; 32], 60, b"x"), env([1; 32], 60, b"y"), env([1; 32], 60, b"z"));
        a.store(x.clone(), 1, NOW, pl);
        a.store(y.clone(), 1, NOW, pl);
        b.store(y, 1, NOW, pl);
        b.store(z.clone(), 1, NOW, pl);
        let (they_lack, we_lack) = a.reconcile(&b.hashes());
        assert_eq!(they_lack, vec![x.record_hash()]);
        assert_eq!(we_lack, vec![z.record_hash()]);
    }

    fn registry_from(text: &str) -> SwarmRegistry {
        SwarmRegistry::from_snapshot(text, Ring::default(), SwarmParams::default()).unwrap()
    }

    #[test]
    fn join_push_copies_full_store() {
        let mut reg = registry_from("swarm 0: 0,1,2,3,4,5\n");
        let (ring, swarms) = (*reg.ring(), reg.swarm_ids());
        let pl = Placement { ring: &ring, swarms: &swarms, own: SwarmId(0) };
        let mut stores: BTreeMap<NodeId, NodeStore> = (0..6).map(|i| (NodeId(i), NodeStore::new())).collect();
        for i in 0..4u8 {
            let e = env([i; 32], 100, &[i]);
            for s in stores.values_mut() {
                s.store(e.clone(), 1, NOW, pl);
            }
        }
        let plan = reg.apply(MembershipEvent::Join(NodeId(6)));
        stores.insert(NodeId(6), NodeStore::new());
        let report = apply_migration(&plan, &reg, &mut stores, NOW);
        assert_eq!(report.pushed, 4);
        assert_eq!(stores[&NodeId(6)].hashes(), stores[&NodeId(0)].hashes());
    }

    #[test]
    fn leave_erases_departing_store() {
        let mut reg = registry_from("swarm 0: 0,1,2,3,4,5\n");
        let (ring, swarms) = (*reg.ring(), reg.swarm_ids());
        let pl = Placement { ring: &ring, swarms: &swarms, own: SwarmId(0) };
        let mut stores: BTreeMap<NodeId, NodeStore> = (0..6).map(|i| (NodeId(i), NodeStore::new())).collect();
        let e = env([3; 32], 100, b"bye");
        for s in stores.values_mut() {
            s.store(e.clone(), 1, NOW, pl);
        }
        let plan = reg.apply(MembershipEvent::Leave(NodeId(5)));
        apply_migration(&plan, &reg, &mut stores, NOW);
        assert!(stores[&NodeId(5)].is_empty());
        assert_eq!(stores[&NodeId(0)].len(), 1);
    }

    #[test]
    fn dissolve_routes_every_record_to_its_new_owner() {
        let ring = Ring::default();
        // Three swarms; the middle one (2^63) starves and must dissolve.
        let mut reg = registry_from(
            "swarm 0: 0,1,2,3,4\nswarm 9223372036854775808: 10,11,12,13,14\nswarm 13835058055282163712: 20,21,22,23,24\n",
        );
        let before_ids = reg.swarm_ids();
        let dying = SwarmId(1 << 63);
        let pl = Placement { ring: &ring, swarms: &before_ids, own: dying };
        let mut stores: BTreeMap<NodeId, NodeStore> = [0, 1, 2, 3, 4, 10, 11, 12, 13, 14, 20, 21, 22, 23, 24]
            .iter()
            .map(|&i| (NodeId(i), NodeStore::new()))
            .collect();

        // Ten recipients spread across the dying swarm's whole range.
        let mut hashes = Vec::new();
        let mut k = 0u64;
        while hashes.len() < 10 {
            k += 1;
            let mut key = [0u8; 32];
            let point = (1u64 << 62) + k * (1u64 << 59);
            key[..8].copy_from_slice(&point.to_be_bytes());
            let pk = PublicKey(key);
            if ring.assign_pubkey(&pk, &before_ids) != Ok(dying) {
                continue;
            }
            let e = env(key, 1000, &[k as u8]);
            hashes.push((e.record_hash(), pk));
            for n in [10, 11, 12, 13, 14] {
                stores.get_mut(&NodeId(n)).unwrap().store(e.clone(), 1, NOW, pl);
            }
        }

        let plan = reg.apply(MembershipEvent::Leave(NodeId(14)));
        stores.remove(&NodeId(14));
        assert!(!reg.swarm_ids().contains(&dying));
        apply_migration(&plan, &reg, &mut stores, NOW);

        let after_ids = reg.swarm_ids();
        let mut destinations = BTreeSet::new();
        for (h, pk) in &hashes {
            // Oracle: route each record by nearest-swarm lookup on the new swarm set.
            let owner = ring.assign_pubkey(pk, &after_ids).unwrap();
            destinations.insert(owner);
            for m in reg.members(owner).unwrap() {
                assert!(stores[m].contains(h), "record missing at {m} in {owner}");
            }
            for (other, members) in reg.swarms() {
                if other != owner {
                    for m in members {
                        assert!(!stores[m].contains(h), "stray copy at {m}");
                    }
                }
            }
        }
        assert_eq!(destinations.len(), 2);
    }
}
