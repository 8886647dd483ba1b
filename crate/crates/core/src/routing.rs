//! Client-side routing policy.
//!
//! Node lists are bootstrapped from a seed node and only replaced when every
//! queried node returns the same list. Recipient swarms are resolved through a
//! random node and cached until a wrong-swarm error. Asynchronous messages go
//! to three members of the recipient's swarm; synchronous ones go straight to
//! the peer's listening node and fall back to the swarm when unacknowledged.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::index::sample;
use rand::RngCore;
use thiserror::Error;

use crate::envelope::RecordHash;
use crate::keys::{NodeId, PublicKey};
use crate::onion::HopInfo;
use crate::ring::SwarmId;
use crate::store::{StoreOutcome, StoreRejection, StoredRecord};

/// Nodes asked for a fresh list; all must agree.
pub const REFRESH_QUORUM: usize = 3;
/// Nodes tried before a lookup gives up.
pub const MAX_ATTEMPTS: usize = 3;
/// Swarm members an asynchronous message is stored on.
pub const ASYNC_TARGETS: usize = 3;
/// Swarm members polled for new messages.
pub const POLL_TARGETS: usize = 3;
/// How long a synchronous send waits for its acknowledgement.
pub const ACK_TIMEOUT_MS: u64 = 10_000;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RoutingError {
    #[error("seed node unreachable")]
    SeedUnreachable,
    #[error("node list is empty")]
    EmptyList,
    #[error("no node answered after {0} attempts")]
    Unresolved(usize),
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeEntry {
    pub id: NodeId,
    pub address: String,
    pub port: u16,
    pub key: PublicKey,
}

impl NodeEntry {
    pub fn hop(&self) -> HopInfo {
        HopInfo { id: self.id, key: self.key }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ListSource {
    Seed,
    Consensus,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NodeList {
    entries: Vec<NodeEntry>,
    pub source: ListSource,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Rejection {
    TooFewResponses(usize),
    Unreachable,
    EmptyResponse,
    Disagreement,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum RefreshOutcome {
    Adopted(NodeList),
    Kept(Rejection),
}

fn normalise(mut entries: Vec<NodeEntry>) -> Vec<NodeEntry> {
    entries.sort();
    entries.dedup();
    entries
}

impl NodeList {
    /// First list, straight from a seed node.
    pub fn bootstrap(seed_response: Option<Vec<NodeEntry>>) -> Result<NodeList, RoutingError> {
        let entries = normalise(seed_response.ok_or(RoutingError::SeedUnreachable)?);
        if entries.is_empty() {
            return Err(RoutingError::EmptyList);
        }
        Ok(NodeList { entries, source: ListSource::Seed })
    }

    pub fn entries(&self) -> &[NodeEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> Vec<NodeId> {
        self.entries.iter().map(|e| e.id).collect()
    }

    pub fn get(&self, id: NodeId) -> Option<&NodeEntry> {
        self.entries.binary_search_by_key(&id, |e| e.id).ok().map(|i| &self.entries[i])
    }

    pub fn hops(&self) -> Vec<HopInfo> {
        self.entries.iter().map(NodeEntry::hop).collect()
    }

    /// Random distinct nodes to ask for a new list.
    pub fn refresh_targets(&self, rng: &mut dyn RngCore) -> Vec<NodeId> {
        pick(&self.ids(), REFRESH_QUORUM, rng)
    }

    /// Adopt the responses only if there are at least [`REFRESH_QUORUM`] of
    /// them, all answered, none empty, and all identical.
    pub fn refresh(&self, responses: &[Option<Vec<NodeEntry>>]) -> RefreshOutcome {
        if responses.len() < REFRESH_QUORUM {
            return RefreshOutcome::Kept(Rejection::TooFewResponses(responses.len()));
        }
        let mut lists = Vec::with_capacity(responses.len());
        for r in responses {
            match r {
                None => return RefreshOutcome::Kept(Rejection::Unreachable),
                Some(l) if l.is_empty() => return RefreshOutcome::Kept(Rejection::EmptyResponse),
                Some(l) => lists.push(normalise(l.clone())),
            }
        }
        if lists.windows(2).any(|w| w[0] != w[1]) {
            return RefreshOutcome::Kept(Rejection::Disagreement);
        }
        RefreshOutcome::Adopted(NodeList { entries: lists.swap_remove(0), source: ListSource::Consensus })
    }
}

/// Up to `n` distinct random elements of `from`.
pub fn pick(from: &[NodeId], n: usize, rng: &mut dyn RngCore) -> Vec<NodeId> {
    let n = n.min(from.len());
    sample(rng, from.len(), n).into_iter().map(|i| from[i]).collect()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SwarmInfo {
    pub swarm: SwarmId,
    pub members: Vec<NodeId>,
}

#[derive(Clone, Debug, Default)]
pub struct SwarmCache {
    entries: BTreeMap<PublicKey, SwarmInfo>,
}

impl SwarmCache {
    pub fn get(&self, pk: &PublicKey) -> Option<&SwarmInfo> {
        self.entries.get(pk)
    }

    pub fn insert(&mut self, pk: PublicKey, info: SwarmInfo) {
        self.entries.insert(pk, info);
    }

    pub fn invalidate(&mut self, pk: &PublicKey) -> bool {
        self.entries.remove(pk).is_some()
    }
}

/// Find `pk`'s swarm, asking up to [`MAX_ATTEMPTS`] distinct random nodes.
/// `query` returns `None` when the node does not answer.
pub fn resolve_swarm(
    pk: &PublicKey,
    list: &NodeList,
    cache: &mut SwarmCache,
    rng: &mut dyn RngCore,
    mut query: impl FnMut(NodeId) -> Option<SwarmInfo>,
) -> Result<SwarmInfo, RoutingError> {
    if let Some(hit) = cache.get(pk) {
        return Ok(hit.clone());
    }
    let targets = pick(&list.ids(), MAX_ATTEMPTS, rng);
    for node in &targets {
        if let Some(info) = query(*node) {
            cache.insert(*pk, info.clone());
            return Ok(info);
        }
    }
    Err(RoutingError::Unresolved(targets.len()))
}

/// What a sender should do after hearing back from its store targets.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum SendVerdict {
    Delivered {
        acceptors: Vec<NodeId>,
    },
    /// Every answer rejected the work; re-mine at this difficulty.
    Remine {
        difficulty: u64,
    },
    /// The swarm view is stale; drop the cache and resolve again.
    WrongSwarm {
        correct: SwarmId,
    },
    Failed,
}

pub fn judge_store(responses: &[(NodeId, Option<StoreOutcome>)]) -> SendVerdict {
    let acceptors: Vec<NodeId> =
        responses.iter().filter(|(_, r)| r.is_some_and(|o| o.is_accepted())).map(|(n, _)| *n).collect();
    if !acceptors.is_empty() {
        return SendVerdict::Delivered { acceptors };
    }
    let rejections: Vec<StoreRejection> = responses
        .iter()
        .filter_map(|(_, r)| match r {
            Some(StoreOutcome::Rejected(x)) => Some(*x),
            _ => None,
        })
        .collect();
    if let Some(correct) = rejections.iter().find_map(|r| match r {
        StoreRejection::WrongSwarm { correct } => Some(*correct),
        _ => None,
    }) {
        return SendVerdict::WrongSwarm { correct };
    }
    let pow: Vec<u64> = rejections
        .iter()
        .filter_map(|r| match r {
            StoreRejection::PowInvalid { difficulty } => Some(*difficulty),
            _ => None,
        })
        .collect();
    if !pow.is_empty() && pow.len() == rejections.len() {
        return SendVerdict::Remine { difficulty: pow.into_iter().max().expect("non-empty") };
    }
    SendVerdict::Failed
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TransportMode {
    Async,
    Sync { listening: NodeId },
}

/// Per-conversation delivery mode.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConversationTransport {
    pub peer: PublicKey,
    pub mode: TransportMode,
    pub last_ack: Option<u64>,
}

impl ConversationTransport {
    pub fn new(peer: PublicKey) -> Self {
        Self { peer, mode: TransportMode::Async, last_ack: None }
    }

    pub fn is_sync(&self) -> bool {
        matches!(self.mode, TransportMode::Sync { .. })
    }

    pub fn listening_node(&self) -> Option<NodeId> {
        match self.mode {
            TransportMode::Sync { listening } => Some(listening),
            TransportMode::Async => None,
        }
    }

    /// The peer advertised (or withdrew) a listening node.
    pub fn on_peer_status(&mut self, listening: Option<NodeId>) {
        self.mode = match listening {
            Some(listening) => TransportMode::Sync { listening },
            None => TransportMode::Async,
        };
    }

    pub fn on_ack(&mut self, msg_id: u64) {
        self.last_ack = Some(self.last_ack.map_or(msg_id, |a| a.max(msg_id)));
    }

    /// No ack in time: go back to swarm storage until the peer advertises again.
    pub fn fall_back(&mut self) {
        self.mode = TransportMode::Async;
    }
}

/// Messages seen so far across polls.
#[derive(Clone, Debug, Default)]
pub struct Inbox {
    seen: BTreeSet<RecordHash>,
}

impl Inbox {
    pub fn seen(&self) -> usize {
        self.seen.len()
    }

    /// Union of the polled pages minus anything already seen, oldest first.
    pub fn merge(&mut self, pages: impl IntoIterator<Item = Vec<StoredRecord>>) -> Vec<StoredRecord> {
        let mut fresh: BTreeMap<(u64, RecordHash), StoredRecord> = BTreeMap::new();
        for r in pages.into_iter().flatten() {
            if !self.seen.contains(&r.hash) {
                fresh.insert((r.envelope.timestamp_ms, r.hash), r);
            }
        }
        self.seen.extend(fresh.values().map(|r| r.hash));
        fresh.into_values().collect()
    }
}

/// Plaintext carried inside a session message.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ChatPayload {
    /// The sender's listening node, if it accepts synchronous messages.
    pub listening: Option<NodeId>,
    pub body: ChatBody,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ChatBody {
    Text { msg_id: u64, text: Vec<u8> },
    Ack { msg_id: u64 },
}

impl ChatPayload {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        match self.listening {
            Some(n) => {
                out.push(1);
                out.extend_from_slice(&n.0.to_be_bytes());
            }
            None => out.push(0),
        }
        match &self.body {
            ChatBody::Text { msg_id, text } => {
                out.push(b'T');
                out.extend_from_slice(&msg_id.to_be_bytes());
                out.extend_from_slice(text);
            }
            ChatBody::Ack { msg_id } => {
                out.push(b'A');
                out.extend_from_slice(&msg_id.to_be_bytes());
            }
        }
        out
    }

    pub fn decode(b: &[u8]) -> Option<Self> {
        let (listening, rest) = match b.first()? {
            0 => (None, &b[1..]),
            1 if b.len() >= 5 => (Some(NodeId(u32::from_be_bytes(b[1..5].try_into().ok()?))), &b[5..]),
            _ => return None,
        };
        let (&tag, rest) = rest.split_first()?;
        if rest.len() < 8 {
            return None;
        }
        let msg_id = u64::from_be_bytes(rest[..8].try_into().ok()?);
        let body = match tag {
            b'T' => ChatBody::Text { msg_id, text: rest[8..].to_vec() },
            b'A' if rest.len() == 8 => ChatBody::Ack { msg_id },
            _ => return None,
        };
        Some(ChatPayload { listening, body })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envelope::Envelope;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn entry(i: u32) -> NodeEntry {
        NodeEntry {
            id: NodeId(i),
            address: format!("10.0.0.{i}"),
            port: 22000 + i as u16,
            key: PublicKey([i as u8; 32]),
        }
    }

    fn list(ids: &[u32]) -> Vec<NodeEntry> {
        ids.iter().map(|&i| entry(i)).collect()
    }

    #[test]
    fn bootstrap_requires_a_seed() {
        assert_eq!(NodeList::bootstrap(None), Err(RoutingError::SeedUnreachable));
        assert_eq!(NodeList::bootstrap(Some(vec![])), Err(RoutingError::EmptyList));
        let l = NodeList::bootstrap(Some(list(&[3, 1, 2, 1]))).unwrap();
        assert_eq!(l.ids(), vec![NodeId(1), NodeId(2), NodeId(3)]);
        assert_eq!(l.source, ListSource::Seed);
    }

    #[test]
    fn refresh_needs_unanimity() {
        let old = NodeList::bootstrap(Some(list(&[1, 2, 3]))).unwrap();
        let new = list(&[1, 2, 3, 4]);
        let mut shuffled = new.clone();
        shuffled.reverse();
        match old.refresh(&[Some(new.clone()), Some(shuffled), Some(new.clone())]) {
            RefreshOutcome::Adopted(l) => {
                assert_eq!(l.ids().len(), 4);
                assert_eq!(l.source, ListSource::Consensus);
            }
            other => panic!("unanimous refresh rejected: {other:?}"),
        }
        let minority = list(&[1, 2, 3, 666]);
        assert_eq!(
            old.refresh(&[Some(new.clone()), Some(new.clone()), Some(minority)]),
            RefreshOutcome::Kept(Rejection::Disagreement)
        );
        assert_eq!(
            old.refresh(&[Some(new.clone()), Some(vec![]), Some(new.clone())]),
            RefreshOutcome::Kept(Rejection::EmptyResponse)
        );
        assert_eq!(
            old.refresh(&[Some(new.clone()), None, Some(new.clone())]),
            RefreshOutcome::Kept(Rejection::Unreachable)
        );
        assert_eq!(old.refresh(&[Some(new.clone()), Some(new)]), RefreshOutcome::Kept(Rejection::TooFewResponses(2)));
    }

    #[test]
    fn refresh_never_adopts_a_split_view() {
        let old = NodeList::bootstrap(Some(list(&[1, 2, 3]))).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let honest = list(&[1, 2, 3, 4, 5]);
        for _ in 0..1000 {
            // At least one liar returns its own list.
            let liar_slot = (rng.next_u32() % 3) as usize;
            let responses: Vec<Option<Vec<NodeEntry>>> = (0..3)
                .map(|i| {
                    if i == liar_slot || rng.next_u32() % 2 == 0 {
                        Some(list(&[1, 2, 100 + (rng.next_u32() % 50)]))
                    } else {
                        Some(honest.clone())
                    }
                })
                .collect();
            let distinct: BTreeSet<Vec<NodeEntry>> = responses.iter().flatten().cloned().map(normalise).collect();
            let outcome = old.refresh(&responses);
            if distinct.len() > 1 {
                assert_eq!(outcome, RefreshOutcome::Kept(Rejection::Disagreement));
            }
        }
    }

    #[test]
    fn resolve_uses_cache_and_retries() {
        let l = NodeList::bootstrap(Some(list(&[1, 2, 3, 4, 5]))).unwrap();
        let mut cache = SwarmCache::default();
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        let pk = PublicKey([9; 32]);
        let info = SwarmInfo { swarm: SwarmId(42), members: vec![NodeId(1), NodeId(2)] };

        let mut asked = Vec::new();
        let got = resolve_swarm(&pk, &l, &mut cache, &mut rng, |n| {
            asked.push(n);
            (asked.len() == 3).then(|| info.clone())
        })
        .unwrap();
        assert_eq!(got, info);
        assert_eq!(asked.iter().collect::<BTreeSet<_>>().len(), 3);

        // Cached: no query.
        let got = resolve_swarm(&pk, &l, &mut cache, &mut rng, |_| panic!("cache miss")).unwrap();
        assert_eq!(got, info);

        // Stale after a rebalance: invalidate and look up again.
        assert!(cache.invalidate(&pk));
        let fresh = SwarmInfo { swarm: SwarmId(7), members: vec![NodeId(3)] };
        assert_eq!(resolve_swarm(&pk, &l, &mut cache, &mut rng, |_| Some(fresh.clone())).unwrap(), fresh);

        cache.invalidate(&pk);
        assert_eq!(resolve_swarm(&pk, &l, &mut cache, &mut rng, |_| None), Err(RoutingError::Unresolved(3)));
    }

    #[test]
    fn target_counts() {
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let seven: Vec<NodeId> = (0..7).map(NodeId).collect();
        let t = pick(&seven, ASYNC_TARGETS, &mut rng);
        assert_eq!(t.len(), 3);
        assert_eq!(t.iter().collect::<BTreeSet<_>>().len(), 3);
        assert_eq!(pick(&seven[..2], ASYNC_TARGETS, &mut rng).len(), 2);
        assert!(pick(&[], ASYNC_TARGETS, &mut rng).is_empty());
    }

    #[test]
    fn store_verdicts() {
        let h = RecordHash([1; 32]);
        let ok = Some(StoreOutcome::Stored(h));
        let pow = |d| Some(StoreOutcome::Rejected(StoreRejection::PowInvalid { difficulty: d }));
        assert_eq!(
            judge_store(&[(NodeId(1), ok), (NodeId(2), None), (NodeId(3), pow(5))]),
            SendVerdict::Delivered { acceptors: vec![NodeId(1)] }
        );
        assert_eq!(judge_store(&[(NodeId(1), pow(5)), (NodeId(2), pow(8))]), SendVerdict::Remine { difficulty: 8 });
        assert_eq!(
            judge_store(&[(
                NodeId(1),
                Some(StoreOutcome::Rejected(StoreRejection::WrongSwarm { correct: SwarmId(4) }))
            )]),
            SendVerdict::WrongSwarm { correct: SwarmId(4) }
        );
        assert_eq!(judge_store(&[(NodeId(1), None)]), SendVerdict::Failed);
        assert_eq!(judge_store(&[]), SendVerdict::Failed);
    }

    #[test]
    fn transport_modes() {
        let mut t = ConversationTransport::new(PublicKey([1; 32]));
        assert!(!t.is_sync());
        t.on_peer_status(Some(NodeId(4)));
        assert_eq!(t.listening_node(), Some(NodeId(4)));
        t.on_ack(3);
        t.on_ack(2);
        assert_eq!(t.last_ack, Some(3));
        t.fall_back();
        assert_eq!(t.mode, TransportMode::Async);
        t.on_peer_status(Some(NodeId(9)));
        t.on_peer_status(None);
        assert!(!t.is_sync());
    }

    #[test]
    fn inbox_dedupes_across_polls() {
        let rec = |ts: u64, b: u8| {
            let e = Envelope::new(PublicKey([1; 32]), 60, ts, 0, vec![b]).unwrap();
            StoredRecord::new(e, SwarmId(0))
        };
        let (a, b, c) = (rec(5, 1), rec(3, 2), rec(9, 3));
        let mut inbox = Inbox::default();
        let got = inbox.merge([vec![a.clone(), b.clone()], vec![a.clone()], vec![]]);
        assert_eq!(got, vec![b.clone(), a.clone()]);
        assert!(inbox.merge([vec![a.clone()], vec![b]]).is_empty());
        assert_eq!(inbox.seen(), 2);
        assert_eq!(inbox.merge([vec![], vec![c.clone(), a]]), vec![c]);
        assert!(inbox.merge(Vec::<Vec<StoredRecord>>::new()).is_empty());
    }

    #[test]
    fn payload_round_trip() {
        for p in [
            ChatPayload { listening: Some(NodeId(17)), body: ChatBody::Text { msg_id: 5, text: b"hi".to_vec() } },
            ChatPayload { listening: None, body: ChatBody::Text { msg_id: 0, text: vec![] } },
            ChatPayload { listening: None, body: ChatBody::Ack { msg_id: u64::MAX } },
        ] {
            assert_eq!(ChatPayload::decode(&p.encode()), Some(p));
        }
        assert_eq!(ChatPayload::decode(&[]), None);
        assert_eq!(ChatPayload::decode(&[2, b'T']), None);
        assert_eq!(ChatPayload::decode(&[0, b'A', 0, 0]), None);
    }
}
