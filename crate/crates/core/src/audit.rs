//! Peer storage testing.
//!
//! Every block, each swarm derives a verifier `V` and a tested node `T` from
//! the blockhash. `V` picks one of its unexpired records that still belongs to
//! the swarm and asks `T` for it by hash; `T` checks the pair and height,
//! waits a grace period for a record that has not propagated yet, then answers
//! with the record or `not_found`. Failures go to a shared ledger and a
//! [`DecommissionPolicy`] decides when a node is removed.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use rand::seq::IteratorRandom;
use rand::RngCore;

use crate::crypto::sha512;
use crate::envelope::RecordHash;
use crate::keys::NodeId;
use crate::ring::SwarmId;
use crate::store::{NodeStore, Placement, StoredRecord};

/// How far a challenge height may be from the tested node's current height.
pub const HEIGHT_TOLERANCE: u64 = 2;

/// How long the tested node waits for a missing record before answering.
pub const GRACE_MS: u64 = 10_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TestPair {
    pub height: u64,
    pub swarm: SwarmId,
    pub tested: NodeId,
    pub verifier: NodeId,
}

/// Derive `(T, V)` for one swarm. `members` must be sorted by node id.
///
/// With `d = hash512(blockhash || swarm_id BE)`, `i = d[0..8] mod n` picks the
/// verifier and `k = d[8..16] mod (n - 1)` the offset to the tested node, so
/// every node can be tested by every other.
pub fn derive_pair(blockhash: &[u8; 32], height: u64, swarm: SwarmId, members: &[NodeId]) -> Option<TestPair> {
    let n = members.len();
    if n < 2 {
        return None;
    }
    debug_assert!(members.windows(2).all(|w| w[0] < w[1]), "members must be sorted");
    let mut input = [0u8; 40];
    input[..32].copy_from_slice(blockhash);
    input[32..].copy_from_slice(&swarm.0.to_be_bytes());
    let d = sha512(&input);
    let i = (u64::from_be_bytes(d[..8].try_into().expect("8 bytes")) % n as u64) as usize;
    let k = (u64::from_be_bytes(d[8..16].try_into().expect("8 bytes")) % (n as u64 - 1)) as usize;
    Some(TestPair { height, swarm, verifier: members[i], tested: members[(i + 1 + k) % n] })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Challenge {
    pub record: RecordHash,
    pub height: u64,
}

/// Verifier side: a random unexpired record this swarm is responsible for.
/// Records that will expire inside the grace window are not chosen.
pub fn issue_challenge(
    store: &NodeStore,
    placement: Placement<'_>,
    height: u64,
    now_ms: u64,
    rng: &mut dyn RngCore,
) -> Option<Challenge> {
    store
        .records()
        .filter(|r| r.expiry_ms > now_ms + GRACE_MS && placement.is_own(&r.envelope.recipient))
        .map(|r| r.hash)
        .choose(rng)
        .map(|record| Challenge { record, height })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Refusal {
    /// Height too far from the tested node's view.
    Height { challenge: u64, current: u64 },
    /// `(T, V)` does not match the derivation at that height.
    WrongPair,
}

/// Tested side: is this challenge legitimate?
pub fn check_challenge(
    challenge: &Challenge,
    from: NodeId,
    me: NodeId,
    current_height: u64,
    expected: Option<TestPair>,
) -> Result<(), Refusal> {
    if challenge.height.abs_diff(current_height) > HEIGHT_TOLERANCE {
        return Err(Refusal::Height { challenge: challenge.height, current: current_height });
    }
    match expected {
        Some(p) if p.tested == me && p.verifier == from && p.height == challenge.height => Ok(()),
        _ => Err(Refusal::WrongPair),
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Answer {
    Record(Box<StoredRecord>),
    NotFound,
    Refused(Refusal),
}

/// Verifier side: did `answer` prove storage of `expected`?
pub fn judge(expected: &StoredRecord, answer: Option<&Answer>) -> TestResult {
    match answer {
        Some(Answer::Record(r)) if r.envelope == expected.envelope => TestResult::Pass,
        _ => TestResult::Fail,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TestResult {
    Pass,
    Fail,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LedgerEntry {
    pub height: u64,
    pub swarm: SwarmId,
    pub tested: NodeId,
    pub verifier: NodeId,
    pub result: TestResult,
}

impl fmt::Display for LedgerEntry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let r = match self.result {
            TestResult::Pass => "pass",
            TestResult::Fail => "fail",
        };
        write!(f, "{}, {}, {}, {}, {r}", self.height, self.swarm, self.tested, self.verifier)
    }
}

/// When repeated failures remove a node.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DecommissionPolicy {
    pub min_failures: usize,
    pub min_reporters: usize,
    /// Only failures at heights `> current - window` count.
    pub window_blocks: u64,
}

impl Default for DecommissionPolicy {
    fn default() -> Self {
        Self { min_failures: 2, min_reporters: 2, window_blocks: 50 }
    }
}

impl DecommissionPolicy {
    pub fn should_decommission(&self, failures: &[(u64, NodeId)], current_height: u64) -> bool {
        let recent: Vec<&(u64, NodeId)> =
            failures.iter().filter(|(h, _)| *h + self.window_blocks > current_height).collect();
        let reporters: BTreeSet<NodeId> = recent.iter().map(|(_, v)| *v).collect();
        recent.len() >= self.min_failures && reporters.len() >= self.min_reporters
    }
}

/// Append-only record of test outcomes plus node status.
#[derive(Clone, Debug, Default)]
pub struct ReputationLedger {
    entries: Vec<LedgerEntry>,
    failures: BTreeMap<NodeId, Vec<(u64, NodeId)>>,
    decommissioned: BTreeMap<NodeId, u64>,
    policy: DecommissionPolicy,
}

impl ReputationLedger {
    pub fn new(policy: DecommissionPolicy) -> Self {
        Self { policy, ..Default::default() }
    }

    pub fn policy(&self) -> DecommissionPolicy {
        self.policy
    }

    pub fn entries(&self) -> &[LedgerEntry] {
        &self.entries
    }

    pub fn is_active(&self, node: NodeId) -> bool {
        !self.decommissioned.contains_key(&node)
    }

    /// Nodes removed so far, with the height of removal.
    pub fn decommissioned(&self) -> &BTreeMap<NodeId, u64> {
        &self.decommissioned
    }

    /// Record a result. Returns `true` if this entry decommissions the tested node.
    pub fn record(&mut self, entry: LedgerEntry) -> bool {
        let tested = entry.tested;
        let height = entry.height;
        let failed = entry.result == TestResult::Fail;
        if failed {
            self.failures.entry(tested).or_default().push((height, entry.verifier));
        }
        self.entries.push(entry);
        if !failed || !self.is_active(tested) {
            return false;
        }
        if self.policy.should_decommission(&self.failures[&tested], height) {
            self.decommissioned.insert(tested, height);
            return true;
        }
        false
    }

    /// `height, swarm, tested, verifier, result` lines.
    pub fn to_csv(&self) -> String {
        self.entries.iter().map(|e| format!("{e}\n")).collect()
    }
}
