//! Swarm membership and rebalancing.
//!
//! The registry maps each swarm id to its members and keeps a pool of excess
//! nodes waiting for a new swarm. Every membership event is followed by a
//! settling pass that restores the size bounds where the node count allows:
//!
//! * pool nodes fill the smallest swarm below `max`;
//! * `target` pooled nodes form a new swarm once every swarm is full;
//! * a swarm below `min` steals one node from the largest swarm above `min`,
//!   or, failing that, is dissolved and its nodes rejoin elsewhere.
//!
//! Each pass yields a [`MigrationPlan`] saying which records have to move.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::crypto::sha512;
use crate::keys::{NodeId, PublicKey};
use crate::ring::{Ring, RingError, SwarmId};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SwarmParams {
    pub min: usize,
    pub target: usize,
    pub max: usize,
}

impl Default for SwarmParams {
    fn default() -> Self {
        Self { min: 5, target: 7, max: 10 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MembershipEvent {
    Join(NodeId),
    Leave(NodeId),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum RebalanceAction {
    Joined { node: NodeId, swarm: SwarmId },
    Pooled { node: NodeId },
    Left { node: NodeId, swarm: Option<SwarmId> },
    Stole { node: NodeId, from: SwarmId, to: SwarmId },
    Dissolved { swarm: SwarmId },
    Created { swarm: SwarmId, members: Vec<NodeId> },
}

/// One step of record movement.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Migration {
    /// Existing members of `swarm` push every record they hold for it to `to`.
    PushAll { swarm: SwarmId, to: NodeId },
    /// `node` is no longer in `swarm` and erases that swarm's records.
    Erase { node: NodeId, swarm: SwarmId },
    /// Records held by `sources` (formerly `from_swarm`) whose recipient now
    /// maps to `dest` are sent to `dest` and dropped locally.
    Redistribute { sources: Vec<NodeId>, from_swarm: SwarmId, dest: SwarmId },
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct MigrationPlan {
    pub steps: Vec<Migration>,
}

impl MigrationPlan {
    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RegistryError {
    #[error("node {0} is already registered")]
    DuplicateNode(NodeId),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error(transparent)]
    Ring(#[from] RingError),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SwarmRegistry {
    ring: Ring,
    params: SwarmParams,
    swarms: BTreeMap<SwarmId, Vec<NodeId>>,
    pool: Vec<NodeId>,
    blockhash: [u8; 32],
    log: Vec<RebalanceAction>,
}

impl Default for SwarmRegistry {
    fn default() -> Self {
        Self::new(Ring::default(), SwarmParams::default())
    }
}

fn tiebreak_hash(tag: &[u8], a: u64, b: u64, blockhash: &[u8; 32]) -> u64 {
    let mut buf = Vec::with_capacity(tag.len() + 48);
    buf.extend_from_slice(tag);
    buf.extend_from_slice(&a.to_be_bytes());
    buf.extend_from_slice(&b.to_be_bytes());
    buf.extend_from_slice(blockhash);
    let d = sha512(&buf);
    u64::from_be_bytes(d[..8].try_into().expect("8 bytes"))
}

impl SwarmRegistry {
    pub fn new(ring: Ring, params: SwarmParams) -> Self {
        assert!(params.min < params.target && params.target < params.max, "need min < target < max");
        Self { ring, params, swarms: BTreeMap::new(), pool: Vec::new(), blockhash: [0; 32], log: Vec::new() }
    }

    pub fn ring(&self) -> &Ring {
        &self.ring
    }

    pub fn params(&self) -> SwarmParams {
        self.params
    }

    /// Blockhash seeding placement tie-breaks; the node being placed cannot predict it.
    pub fn set_blockhash(&mut self, blockhash: [u8; 32]) {
        self.blockhash = blockhash;
    }

    pub fn swarm_ids(&self) -> BTreeSet<SwarmId> {
        self.swarms.keys().copied().collect()
    }

    pub fn swarms(&self) -> impl Iterator<Item = (SwarmId, &[NodeId])> {
        self.swarms.iter().map(|(id, m)| (*id, m.as_slice()))
    }

    pub fn members(&self, swarm: SwarmId) -> Option<&[NodeId]> {
        self.swarms.get(&swarm).map(Vec::as_slice)
    }

    pub fn pool(&self) -> &[NodeId] {
        &self.pool
    }

    pub fn log(&self) -> &[RebalanceAction] {
        &self.log
    }

    pub fn swarm_of(&self, node: NodeId) -> Option<SwarmId> {
        self.swarms.iter().find(|(_, m)| m.contains(&node)).map(|(id, _)| *id)
    }

    pub fn contains(&self, node: NodeId) -> bool {
        self.pool.contains(&node) || self.swarm_of(node).is_some()
    }

    pub fn node_count(&self) -> usize {
        self.pool.len() + self.swarms.values().map(Vec::len).sum::<usize>()
    }

    /// Swarm responsible for `pk`.
    pub fn assign(&self, pk: &PublicKey) -> Result<SwarmId, RingError> {
        self.ring.assign_pubkey(pk, &self.swarm_ids())
    }

    /// Pure form: the registry after `event` and the plan that gets records there.
    pub fn rebalance(&self, event: Option<MembershipEvent>) -> (SwarmRegistry, MigrationPlan) {
        let mut next = self.clone();
        let plan = match event {
            Some(e) => next.apply(e),
            None => next.settle(),
        };
        (next, plan)
    }

    /// Apply one membership event and settle. Joins of known nodes and leaves
    /// of unknown nodes are no-ops.
    pub fn apply(&mut self, event: MembershipEvent) -> MigrationPlan {
        let mut plan = MigrationPlan::default();
        match event {
            MembershipEvent::Join(node) => {
                if self.contains(node) {
                    return plan;
                }
                self.pool.push(node);
                plan.steps.extend(self.settle().steps);
                if self.pool.contains(&node) {
                    self.log.push(RebalanceAction::Pooled { node });
                }
                return plan;
            }
            MembershipEvent::Leave(node) => {
                if let Some(pos) = self.pool.iter().position(|n| *n == node) {
                    self.pool.remove(pos);
                    self.log.push(RebalanceAction::Left { node, swarm: None });
                } else if let Some(swarm) = self.swarm_of(node) {
                    self.swarms.get_mut(&swarm).expect("swarm exists").retain(|n| *n != node);
                    self.log.push(RebalanceAction::Left { node, swarm: Some(swarm) });
                    plan.steps.push(Migration::Erase { node, swarm });
                } else {
                    return plan;
                }
            }
        }
        plan.steps.extend(self.settle().steps);
        plan
    }

    /// Run placement, creation, stealing and dissolution until nothing changes.
    pub fn settle(&mut self) -> MigrationPlan {
        let mut plan = MigrationPlan::default();
        loop {
            if self.place_pool(&mut plan) {
                continue;
            }
            if self.pool.len() >= self.params.target && self.create_swarm(&mut plan) {
                continue;
            }
            if self.fix_starving(&mut plan) {
                continue;
            }
            break;
        }
        plan
    }

    /// Move one pooled node into the smallest swarm with room.
    fn place_pool(&mut self, plan: &mut MigrationPlan) -> bool {
        let Some(&node) = self.pool.first() else {
            return false;
        };
        let Some(swarm) = self.placement_for(node) else {
            return false;
        };
        self.pool.remove(0);
        self.insert_member(swarm, node);
        self.log.push(RebalanceAction::Joined { node, swarm });
        plan.steps.push(Migration::PushAll { swarm, to: node });
        true
    }

    fn placement_for(&self, node: NodeId) -> Option<SwarmId> {
        let smallest = self.swarms.values().map(Vec::len).filter(|&n| n < self.params.max).min()?;
        let candidates: Vec<SwarmId> =
            self.swarms.iter().filter(|(_, m)| m.len() == smallest).map(|(id, _)| *id).collect();
        let pick = tiebreak_hash(b"place", node.0 as u64, 0, &self.blockhash) % candidates.len() as u64;
        Some(candidates[pick as usize])
    }

    fn insert_member(&mut self, swarm: SwarmId, node: NodeId) {
        let members = self.swarms.get_mut(&swarm).expect("swarm exists");
        let pos = members.binary_search(&node).unwrap_or_else(|p| p);
        members.insert(pos, node);
    }

    fn create_swarm(&mut self, plan: &mut MigrationPlan) -> bool {
        let Ok(id) = self.ring.next_swarm_id(&self.swarm_ids()) else {
            return false;
        };
        let mut ranked: Vec<(u64, NodeId)> =
            self.pool.iter().map(|n| (tiebreak_hash(b"create", n.0 as u64, id.0, &self.blockhash), *n)).collect();
        ranked.sort();
        let mut chosen: Vec<NodeId> = ranked.into_iter().take(self.params.target).map(|(_, n)| n).collect();
        chosen.sort();
        self.pool.retain(|n| !chosen.contains(n));

        let before = self.swarm_ids();
        if let Some((pred, succ)) = self.ring.neighbours(id, &{
            let mut s = before.clone();
            s.insert(id);
            s
        }) {
            for neighbour in if pred == succ { vec![pred] } else { vec![pred, succ] } {
                plan.steps.push(Migration::Redistribute {
                    sources: self.swarms[&neighbour].clone(),
                    from_swarm: neighbour,
                    dest: id,
                });
            }
        }
        self.swarms.insert(id, chosen.clone());
        self.log.push(RebalanceAction::Created { swarm: id, members: chosen });
        true
    }

    fn fix_starving(&mut self, plan: &mut MigrationPlan) -> bool {
        let Some(starving) = self.swarms.iter().find(|(_, m)| m.len() < self.params.min).map(|(id, _)| *id) else {
            return false;
        };

        let donor = self
            .swarms
            .iter()
            .filter(|(id, m)| **id != starving && m.len() > self.params.min)
            .max_by(|(ia, a), (ib, b)| a.len().cmp(&b.len()).then(ib.cmp(ia)))
            .map(|(id, _)| *id);

        if let Some(donor) = donor {
            let members = &self.swarms[&donor];
            let pick = tiebreak_hash(b"steal", donor.0, starving.0, &self.blockhash) % members.len() as u64;
            let node = members[pick as usize];
            self.swarms.get_mut(&donor).expect("donor exists").retain(|n| *n != node);
            self.insert_member(starving, node);
            self.log.push(RebalanceAction::Stole { node, from: donor, to: starving });
            plan.steps.push(Migration::Erase { node, swarm: donor });
            plan.steps.push(Migration::PushAll { swarm: starving, to: node });
            return true;
        }

        if self.swarms.len() < 2 {
            // Nowhere to send the records; the last swarm stays undersized.
            return false;
        }
        let ids = self.swarm_ids();
        let (pred, succ) = self.ring.neighbours(starving, &ids).expect("at least two swarms");
        let members = self.swarms.remove(&starving).expect("starving swarm exists");
        for dest in if pred == succ { vec![pred] } else { vec![pred, succ] } {
            plan.steps.push(Migration::Redistribute { sources: members.clone(), from_swarm: starving, dest });
        }
        for node in &members {
            plan.steps.push(Migration::Erase { node: *node, swarm: starving });
        }
        self.log.push(RebalanceAction::Dissolved { swarm: starving });
        self.pool.splice(0..0, members);
        true
    }

    /// `swarm <id>: <node>,<node>,...` per swarm, then `pool: ...` if non-empty.
    pub fn to_snapshot(&self) -> String {
        let mut out = String::new();
        for (id, members) in &self.swarms {
            out.push_str(&format!("swarm {id}: {}\n", join_nodes(members)));
        }
        if !self.pool.is_empty() {
            out.push_str(&format!("pool: {}\n", join_nodes(&self.pool)));
        }
        out
    }

    pub fn from_snapshot(text: &str, ring: Ring, params: SwarmParams) -> Result<Self, RegistryError> {
        let mut reg = SwarmRegistry::new(ring, params);
        let mut seen = BTreeSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |msg: &str| RegistryError::Parse { line: i + 1, msg: msg.to_string() };
            let (head, rest) = line.split_once(':').ok_or_else(|| err("missing ':'"))?;
            let nodes = parse_nodes(rest).map_err(|_| err("bad node id"))?;
            for n in &nodes {
                if !seen.insert(*n) {
                    return Err(RegistryError::DuplicateNode(*n));
                }
            }
            if head.trim() == "pool" {
                reg.pool.extend(nodes);
            } else if let Some(id) = head.trim().strip_prefix("swarm ") {
                let id: u64 = id.trim().parse().map_err(|_| err("bad swarm id"))?;
                if id >= ring.size() {
                    return Err(RingError::InvalidPoint(id).into());
                }
                let mut nodes = nodes;
                nodes.sort();
                reg.swarms.insert(SwarmId(id), nodes);
            } else {
                return Err(err("expected 'swarm <id>' or 'pool'"));
            }
        }
        Ok(reg)
    }
}

fn join_nodes(nodes: &[NodeId]) -> String {
    nodes.iter().map(|n| n.to_string()).collect::<Vec<_>>().join(",")
}

fn parse_nodes(s: &str) -> Result<Vec<NodeId>, std::num::ParseIntError> {
    s.split(',').map(str::trim).filter(|t| !t.is_empty()).map(NodeId::from_str).collect()
}

impl fmt::Display for SwarmRegistry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_snapshot())
    }
}
