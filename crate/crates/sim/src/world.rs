//! Event loop, network model, blocks, audits, churn and service-node behaviour.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use swarmnet_core::audit::{self, Answer, Challenge, DecommissionPolicy, LedgerEntry, ReputationLedger, TestResult};
use swarmnet_core::crypto::sha512;
use swarmnet_core::onion::{self, Direction, Endpoint, Observation, PeelAction};
use swarmnet_core::pow;
use swarmnet_core::registry::{MembershipEvent, Migration, MigrationPlan, SwarmRegistry};
use swarmnet_core::routing::{NodeEntry, SwarmInfo};
use swarmnet_core::store::{NodeStore, Placement, StoreOutcome, StoredRecord};
use swarmnet_core::{
    CryptoProvider, Envelope, FastProvider, Keypair, NodeId, PublicKey, RecordHash, StandardProvider, SwarmId,
};

use crate::client::{Client, ClientEvent};
use crate::scenario::{ChurnAction, CryptoChoice, SimConfig};
use crate::wire::{Request, Response};

/// Mailbox depth per recipient at a listening node.
const MAILBOX_CAP: usize = 256;
/// Forwarding limit for replicas that reach a node outside their swarm.
const REPLICA_HOPS: u8 = 3;
/// Extra time a verifier waits beyond the tested node's grace window.
const AUDIT_SLACK_MS: u64 = 5_000;
/// Onion return state older than this is dropped.
const LINK_TTL_MS: u64 = 30_000;
/// Block heights kept for challenge checks.
const SNAPSHOT_DEPTH: u64 = 8;
/// Envelopes per anti-entropy or migration message.
const BATCH: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Profile {
    Honest,
    /// Accepts stores, keeps nothing, fails every audit.
    Cheater,
    /// Drops every onion packet it should relay.
    Dropper,
    /// Behaves honestly and keeps every blob it relays.
    Observer,
    /// Serves a forged node list.
    Liar,
}

impl fmt::Display for Profile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Profile::Honest => "honest",
            Profile::Cheater => "cheater",
            Profile::Dropper => "dropper",
            Profile::Observer => "observer",
            Profile::Liar => "liar",
        })
    }
}

pub(crate) struct Link {
    prev: Endpoint,
    prev_link: u64,
    hop_key: [u8; 32],
    reply_key: Option<PublicKey>,
    created: u64,
}

pub struct Node {
    pub id: NodeId,
    pub keys: Keypair,
    pub profile: Profile,
    pub store: NodeStore,
    pub alive: bool,
    links: BTreeMap<u64, Link>,
    next_link: u64,
    mailbox: BTreeMap<PublicKey, VecDeque<Vec<u8>>>,
    lies: u32,
}

impl Node {
    fn link_id(&mut self) -> u64 {
        self.next_link += 1;
        self.next_link
    }
}

#[derive(Clone, Debug)]
pub(crate) enum Msg {
    Onion { link: u64, blob: Vec<u8>, trace: u64 },
    OnionReply { link: u64, blob: Vec<u8>, trace: u64 },
    Exec { link: u64, request: Vec<u8>, trace: u64 },
    ExecReply { link: u64, response: Vec<u8>, trace: u64 },
    Replicate { envelopes: Vec<Envelope>, hops: u8 },
    Digest { hashes: BTreeSet<RecordHash> },
    Fetch { hashes: Vec<RecordHash> },
    Challenge { challenge: Challenge, swarm: SwarmId },
    Answer { challenge: Challenge, swarm: SwarmId, answer: Answer },
    ListRequest { round: u64 },
    ListResponse { round: u64, entries: Vec<NodeEntry> },
}

pub(crate) enum Event {
    Deliver { from: Endpoint, to: Endpoint, msg: Msg },
    Block,
    AntiEntropy(NodeId),
    Churn(ChurnAction),
    Background(u32),
    AuditRecheck { node: NodeId, verifier: NodeId, challenge: Challenge, swarm: SwarmId },
    AuditTimeout { height: u64, swarm: SwarmId },
    PruneLinks,
    Client(u32, ClientEvent),
}

struct PendingAudit {
    tested: NodeId,
    verifier: NodeId,
    expected: StoredRecord,
}

/// Who carried one onion request, for checking what each hop could learn.
#[derive(Clone, Debug)]
pub(crate) struct Trace {
    pub client: u32,
    pub guard: NodeId,
    pub exit: NodeId,
    pub destination: NodeId,
    pub request: Vec<u8>,
}

#[derive(Clone, Debug)]
pub(crate) struct MessageTruth {
    pub sent_at: u64,
    pub delivered_at: Option<u64>,
}

#[derive(Clone, Debug, Default)]
pub(crate) struct Stats {
    pub messages: BTreeMap<u64, MessageTruth>,
    pub duplicates: u64,
    pub send_failures: u64,
    pub remines: u64,
    pub sync_sent: u64,
    pub sync_acked: u64,
    pub fell_back: u64,
    /// Hashes of data handed to listening nodes, and of data sent to swarms.
    pub sync_data: BTreeSet<[u8; 8]>,
    /// Every record accepted by some node: hash, recipient, first acceptance time, data hash.
    pub accepted: BTreeMap<RecordHash, (PublicKey, u64, u64, [u8; 8])>,
    pub audits: u64,
    pub audit_failures: u64,
    pub decommissioned: Vec<(NodeId, u64)>,
    pub refresh_attempts: u64,
    pub refresh_adopted: u64,
    pub refresh_rejected: u64,
    pub refresh_nonunanimous: u64,
    pub refresh_minority: u64,
    pub onion_requests: u64,
    pub path_builds: u64,
    pub path_failures: u64,
    pub first_churn: Option<u64>,
    pub pre_churn_swarms: BTreeMap<SwarmId, Vec<NodeId>>,
}

pub struct World {
    pub(crate) cfg: SimConfig,
    pub(crate) now: u64,
    seq: u64,
    queue: BTreeMap<(u64, u64), Event>,
    pub(crate) rng: ChaCha20Rng,
    pub(crate) provider: &'static dyn CryptoProvider,
    pub(crate) registry: SwarmRegistry,
    pub(crate) difficulty: u64,
    pub(crate) height: u64,
    snapshots: BTreeMap<u64, BTreeMap<SwarmId, Vec<NodeId>>>,
    pub(crate) nodes: BTreeMap<NodeId, Node>,
    next_node: u32,
    pub(crate) clients: Vec<Client>,
    pub(crate) ledger: ReputationLedger,
    audits: BTreeMap<(u64, SwarmId), PendingAudit>,
    pub(crate) log: Vec<String>,
    pub(crate) observations: Vec<(u64, Observation)>,
    pub(crate) traces: BTreeMap<u64, Trace>,
    pub(crate) observed_blobs: BTreeMap<u64, Vec<Vec<u8>>>,
    pub(crate) stats: Stats,
    next_trace: u64,
}

pub fn blockhash(seed: u64, height: u64) -> [u8; 32] {
    let mut input = [0u8; 16];
    input[..8].copy_from_slice(&seed.to_be_bytes());
    input[8..].copy_from_slice(&height.to_be_bytes());
    sha512(&input)[..32].try_into().expect("32 bytes")
}

fn derive_seed(seed: u64, label: &str, index: u32) -> [u8; 32] {
    let mut input = seed.to_be_bytes().to_vec();
    input.extend_from_slice(label.as_bytes());
    input.extend_from_slice(&index.to_be_bytes());
    sha512(&input)[..32].try_into().expect("32 bytes")
}

pub(crate) fn data_hash(data: &[u8]) -> [u8; 8] {
    onion::blob_hash(data)
}

impl World {
    pub fn new(cfg: SimConfig) -> World {
        let provider: &'static dyn CryptoProvider = match cfg.crypto {
            CryptoChoice::Fast => &FastProvider,
            CryptoChoice::Standard => &StandardProvider,
        };
        let policy = DecommissionPolicy {
            min_failures: cfg.min_failures,
            min_reporters: cfg.min_reporters,
            window_blocks: cfg.window_blocks,
        };
        let mut w = World {
            now: 0,
            seq: 0,
            queue: BTreeMap::new(),
            rng: ChaCha20Rng::seed_from_u64(cfg.seed),
            provider,
            registry: SwarmRegistry::default(),
            difficulty: cfg.difficulty,
            height: 0,
            snapshots: BTreeMap::new(),
            nodes: BTreeMap::new(),
            next_node: 0,
            clients: Vec::new(),
            ledger: ReputationLedger::new(policy),
            audits: BTreeMap::new(),
            log: Vec::new(),
            observations: Vec::new(),
            traces: BTreeMap::new(),
            observed_blobs: BTreeMap::new(),
            stats: Stats::default(),
            next_trace: 0,
            cfg,
        };
        w.setup();
        w
    }

    fn setup(&mut self) {
        self.registry.set_blockhash(blockhash(self.cfg.seed, 0));
        for _ in 0..self.cfg.nodes {
            self.add_node(Profile::Honest);
        }
        let mut candidates: Vec<NodeId> =
            (0..self.cfg.nodes).map(NodeId).filter(|n| n.0 != self.cfg.seed_node).collect();
        candidates.shuffle(&mut self.rng);
        let roles = [
            (Profile::Cheater, self.cfg.cheaters),
            (Profile::Dropper, self.cfg.droppers),
            (Profile::Observer, self.cfg.observers),
            (Profile::Liar, self.cfg.liars),
        ];
        let mut it = candidates.into_iter();
        for (profile, count) in roles {
            for node in it.by_ref().take(count as usize) {
                self.nodes.get_mut(&node).expect("node exists").profile = profile;
                self.emit(format!("n{node} profile {profile}"));
            }
        }
        for (swarm, members) in self.registry.swarms() {
            let ids: Vec<String> = members.iter().map(|m| m.to_string()).collect();
            self.log.push(format!("t=0 swarm {swarm} members {}", ids.join(",")));
        }

        for c in 0..self.cfg.clients {
            let keys = self.provider.keypair_from_seed(derive_seed(self.cfg.seed, "client", c));
            let client = Client::new(keys, self.cfg.sync, self.provider, &mut self.rng);
            self.clients.push(client);
            self.schedule(10 * c as u64, Event::Client(c, ClientEvent::Start));
        }
        for i in 0..self.cfg.background {
            self.schedule(100 + 10 * i as u64, Event::Background(i));
        }
        self.schedule(self.cfg.block_interval_ms, Event::Block);
        let ids: Vec<NodeId> = self.nodes.keys().copied().collect();
        for id in ids {
            let offset = self.rng.gen_range(0..self.cfg.anti_entropy_ms.max(1));
            self.schedule(self.cfg.anti_entropy_ms + offset, Event::AntiEntropy(id));
        }
        for ev in self.cfg.churn.clone() {
            self.schedule(ev.at_ms, Event::Churn(ev.action));
        }
        self.schedule(LINK_TTL_MS, Event::PruneLinks);
    }

    fn add_node(&mut self, profile: Profile) -> NodeId {
        let id = NodeId(self.next_node);
        self.next_node += 1;
        let keys = self.provider.keypair_from_seed(derive_seed(self.cfg.seed, "node", id.0));
        self.nodes.insert(
            id,
            Node {
                id,
                keys,
                profile,
                store: NodeStore::new(),
                alive: true,
                links: BTreeMap::new(),
                next_link: 0,
                mailbox: BTreeMap::new(),
                lies: 0,
            },
        );
        let plan = self.registry.apply(MembershipEvent::Join(id));
        self.execute_plan(&plan);
        id
    }

    pub(crate) fn schedule(&mut self, at: u64, ev: Event) {
        self.seq += 1;
        self.queue.insert((at, self.seq), ev);
    }

    pub(crate) fn emit(&mut self, line: String) {
        self.log.push(format!("t={} {line}", self.now));
    }

    pub(crate) fn new_trace(&mut self) -> u64 {
        self.next_trace += 1;
        self.next_trace
    }

    /// Queue `msg` on the simulated network.
    pub(crate) fn send(&mut self, from: Endpoint, to: Endpoint, msg: Msg) {
        if self.cfg.drop_rate > 0.0 && self.rng.gen_bool(self.cfg.drop_rate) {
            return;
        }
        let delay = self.cfg.latency_ms + self.rng.gen_range(0..=self.cfg.jitter_ms);
        self.schedule(self.now + delay, Event::Deliver { from, to, msg });
    }

    pub fn run(&mut self) {
        while let Some(((at, _), ev)) = self.queue.pop_first() {
            if at > self.cfg.duration_ms {
                break;
            }
            self.now = at;
            self.dispatch(ev);
        }
        self.now = self.cfg.duration_ms;
    }

    fn dispatch(&mut self, ev: Event) {
        match ev {
            Event::Deliver { from, to, msg } => match to {
                Endpoint::Node(n) => {
                    if self.nodes.get(&n).is_some_and(|x| x.alive) {
                        self.node_receive(n, from, msg);
                    }
                }
                Endpoint::Client(c) => {
                    if self.clients.get(c as usize).is_some_and(|x| x.alive) {
                        self.client_receive(c, from, msg);
                    }
                }
            },
            Event::Block => self.on_block(),
            Event::AntiEntropy(n) => self.anti_entropy(n),
            Event::Churn(action) => self.churn(action),
            Event::Background(i) => self.background(i),
            Event::AuditRecheck { node, verifier, challenge, swarm } => {
                if self.is_live(node) {
                    let answer = self.answer_for(node, &challenge);
                    self.send(Endpoint::Node(node), Endpoint::Node(verifier), Msg::Answer { challenge, swarm, answer });
                }
            }
            Event::AuditTimeout { height, swarm } => {
                if let Some(p) = self.audits.remove(&(height, swarm)) {
                    self.finish_audit(height, swarm, p, TestResult::Fail, "timeout");
                }
            }
            Event::PruneLinks => {
                let cutoff = self.now.saturating_sub(LINK_TTL_MS);
                for node in self.nodes.values_mut() {
                    node.links.retain(|_, l| l.created >= cutoff);
                }
                self.schedule(self.now + LINK_TTL_MS, Event::PruneLinks);
            }
            Event::Client(c, ev) => self.client_event(c, ev),
        }
    }

    pub(crate) fn is_live(&self, n: NodeId) -> bool {
        self.nodes.get(&n).is_some_and(|x| x.alive)
    }

    fn profile(&self, n: NodeId) -> Profile {
        self.nodes[&n].profile
    }

    /// Swarm of `n`, or the sentinel for pooled nodes.
    fn own_swarm(&self, n: NodeId) -> SwarmId {
        self.registry.swarm_of(n).unwrap_or(SwarmId::UNKNOWN)
    }

    pub(crate) fn honest_list(&self) -> Vec<NodeEntry> {
        self.nodes
            .values()
            .filter(|n| n.alive && self.registry.contains(n.id))
            .map(|n| entry_for(n.id, n.keys.public))
            .collect()
    }

    // ----- blocks and audits -----

    fn on_block(&mut self) {
        self.height += 1;
        let h = self.height;
        let bh = blockhash(self.cfg.seed, h);
        self.registry.set_blockhash(bh);
        let snap: BTreeMap<SwarmId, Vec<NodeId>> = self
            .registry
            .swarms()
            .map(|(s, m)| {
                let mut m = m.to_vec();
                m.sort();
                (s, m)
            })
            .collect();
        self.snapshots.insert(h, snap.clone());
        self.snapshots.retain(|k, _| k + SNAPSHOT_DEPTH > h);
        self.emit(format!("block {h} swarms {} nodes {}", snap.len(), self.registry.node_count()));
        let now = self.now;
        for node in self.nodes.values_mut() {
            node.store.expire(now);
        }
        let swarms = self.registry.swarm_ids();
        let ring = *self.registry.ring();
        for (swarm, members) in &snap {
            let Some(pair) = audit::derive_pair(&bh, h, *swarm, members) else { continue };
            let v = pair.verifier;
            if !self.is_live(v) || self.profile(v) == Profile::Cheater {
                continue;
            }
            let placement = Placement { ring: &ring, swarms: &swarms, own: *swarm };
            let challenge = audit::issue_challenge(&self.nodes[&v].store, placement, h, now, &mut self.rng);
            self.stats.audits += 1;
            match challenge {
                None => {
                    let entry = LedgerEntry {
                        height: h,
                        swarm: *swarm,
                        tested: pair.tested,
                        verifier: v,
                        result: TestResult::Pass,
                    };
                    self.ledger.record(entry);
                    self.emit(format!("audit {swarm} n{v} tests n{} vacuous", pair.tested));
                }
                Some(challenge) => {
                    let expected = self.nodes[&v].store.get(&challenge.record).expect("chosen from store").clone();
                    self.audits.insert((h, *swarm), PendingAudit { tested: pair.tested, verifier: v, expected });
                    self.emit(format!(
                        "audit {swarm} n{v} challenges n{} {}",
                        pair.tested,
                        &challenge.record.to_hex()[..16]
                    ));
                    self.send(
                        Endpoint::Node(v),
                        Endpoint::Node(pair.tested),
                        Msg::Challenge { challenge, swarm: *swarm },
                    );
                    self.schedule(
                        now + audit::GRACE_MS + AUDIT_SLACK_MS,
                        Event::AuditTimeout { height: h, swarm: *swarm },
                    );
                }
            }
        }
        self.schedule(self.now + self.cfg.block_interval_ms, Event::Block);
    }

    fn answer_for(&self, node: NodeId, challenge: &Challenge) -> Answer {
        match self.nodes[&node].store.get_live(&challenge.record, self.now) {
            Some(r) if self.profile(node) != Profile::Cheater => Answer::Record(Box::new(r.clone())),
            _ => Answer::NotFound,
        }
    }

    fn on_challenge(&mut self, me: NodeId, from: NodeId, challenge: Challenge, swarm: SwarmId) {
        let expected =
            self.snapshots.get(&challenge.height).and_then(|s| s.get(&swarm)).and_then(|m| {
                audit::derive_pair(&blockhash(self.cfg.seed, challenge.height), challenge.height, swarm, m)
            });
        let answer = match audit::check_challenge(&challenge, from, me, self.height, expected) {
            Err(r) => Answer::Refused(r),
            Ok(()) => match self.answer_for(me, &challenge) {
                Answer::NotFound if self.profile(me) != Profile::Cheater => {
                    let ev = Event::AuditRecheck { node: me, verifier: from, challenge, swarm };
                    self.schedule(self.now + audit::GRACE_MS, ev);
                    return;
                }
                a => a,
            },
        };
        self.send(Endpoint::Node(me), Endpoint::Node(from), Msg::Answer { challenge, swarm, answer });
    }

    fn on_answer(&mut self, me: NodeId, from: NodeId, challenge: Challenge, swarm: SwarmId, answer: Answer) {
        let key = (challenge.height, swarm);
        match self.audits.get(&key) {
            Some(p) if p.verifier == me && p.tested == from && p.expected.hash == challenge.record => {}
            _ => return,
        }
        let p = self.audits.remove(&key).expect("checked above");
        let result = audit::judge(&p.expected, Some(&answer));
        let why = match &answer {
            Answer::Record(_) => "record",
            Answer::NotFound => "not-found",
            Answer::Refused(_) => "refused",
        };
        self.finish_audit(challenge.height, swarm, p, result, why);
    }

    fn finish_audit(&mut self, height: u64, swarm: SwarmId, p: PendingAudit, result: TestResult, why: &str) {
        if result == TestResult::Fail {
            self.stats.audit_failures += 1;
        }
        let verdict = if result == TestResult::Pass { "pass" } else { "fail" };
        self.emit(format!("audit {swarm} n{} result n{} {verdict} {why}", p.verifier, p.tested));
        let entry = LedgerEntry { height, swarm, tested: p.tested, verifier: p.verifier, result };
        if self.ledger.record(entry) {
            self.decommission(p.tested);
        }
    }

    fn decommission(&mut self, node: NodeId) {
        let profile = self.profile(node);
        self.emit(format!("decommission n{node} ({profile}) at height {}", self.height));
        self.stats.decommissioned.push((node, self.height));
        self.remove_node(node);
    }

    fn remove_node(&mut self, node: NodeId) {
        if let Some(n) = self.nodes.get_mut(&node) {
            n.alive = false;
            n.store.clear();
            n.links.clear();
            n.mailbox.clear();
        }
        let plan = self.registry.apply(MembershipEvent::Leave(node));
        self.execute_plan(&plan);
    }

    // ----- membership and migration -----

    fn log_plan(&mut self, plan: &MigrationPlan) {
        for step in &plan.steps {
            let line = match step {
                Migration::PushAll { swarm, to } => format!("migrate push-all {swarm} -> n{to}"),
                Migration::Erase { node, swarm } => format!("migrate erase n{node} {swarm}"),
                Migration::Redistribute { sources, from_swarm, dest } => {
                    format!("migrate redistribute {from_swarm} -> {dest} from {} nodes", sources.len())
                }
            };
            self.emit(line);
        }
    }

    /// Carry out a plan against the post-change registry, moving records by message.
    fn execute_plan(&mut self, plan: &MigrationPlan) {
        if plan.is_empty() {
            return;
        }
        self.log_plan(plan);
        let ring = *self.registry.ring();
        let swarms = self.registry.swarm_ids();
        let now = self.now;
        for step in &plan.steps {
            match step {
                Migration::PushAll { swarm, to } => {
                    let Some(members) = self.registry.members(*swarm) else { continue };
                    let members: Vec<NodeId> = members.iter().copied().filter(|m| m != to).collect();
                    for m in members {
                        if !self.is_live(m) || self.profile(m) == Profile::Cheater {
                            continue;
                        }
                        let records = self.nodes[&m].store.records_for(&ring, &swarms, *swarm, now);
                        self.send_replicas(m, *to, records.into_iter().map(|r| r.envelope).collect(), 0);
                    }
                }
                Migration::Erase { node, .. } => {
                    let current = self.registry.swarm_of(*node);
                    if let Some(n) = self.nodes.get_mut(node) {
                        n.store.drain_where(|r| {
                            current.is_none() || ring.assign_pubkey(&r.envelope.recipient, &swarms).ok() != current
                        });
                    }
                }
                Migration::Redistribute { sources, from_swarm, dest } => {
                    let dest_members = self.registry.members(*dest).map(<[NodeId]>::to_vec).unwrap_or_default();
                    for src in sources {
                        if !self.is_live(*src) {
                            continue;
                        }
                        let moving = self.nodes.get_mut(src).expect("live").store.drain_where(|r| {
                            r.origin_swarm == *from_swarm
                                && ring.assign_pubkey(&r.envelope.recipient, &swarms).ok() == Some(*dest)
                        });
                        let envs: Vec<Envelope> = moving.into_iter().map(|r| r.envelope).collect();
                        for m in &dest_members {
                            if m != src {
                                self.send_replicas(*src, *m, envs.clone(), 0);
                            }
                        }
                    }
                }
            }
        }
    }

    fn send_replicas(&mut self, from: NodeId, to: NodeId, envelopes: Vec<Envelope>, hops: u8) {
        for chunk in envelopes.chunks(BATCH) {
            self.send(Endpoint::Node(from), Endpoint::Node(to), Msg::Replicate { envelopes: chunk.to_vec(), hops });
        }
    }

    fn churn(&mut self, action: ChurnAction) {
        let first = matches!(action, ChurnAction::Leave { .. } | ChurnAction::LeaveNode(_));
        if first && self.stats.first_churn.is_none() {
            self.stats.first_churn = Some(self.now);
            self.stats.pre_churn_swarms = self.registry.swarms().map(|(s, m)| (s, m.to_vec())).collect();
        }
        match action {
            ChurnAction::Leave { per_mille, over_ms } => {
                let victims = self.pick_leavers(per_mille);
                self.emit(format!("churn leave {} nodes over {over_ms}ms", victims.len()));
                let n = victims.len().max(1) as u64;
                for (i, v) in victims.into_iter().enumerate() {
                    let at = self.now + over_ms * i as u64 / n;
                    self.schedule(at, Event::Churn(ChurnAction::LeaveNode(v.0)));
                }
            }
            ChurnAction::LeaveNode(id) => {
                let id = NodeId(id);
                if self.is_live(id) {
                    self.emit(format!("churn n{id} leaves"));
                    self.remove_node(id);
                }
            }
            ChurnAction::Join(k) => {
                for _ in 0..k {
                    let id = self.add_node(Profile::Honest);
                    self.emit(format!("churn n{id} joins"));
                    let offset = self.rng.gen_range(0..self.cfg.anti_entropy_ms.max(1));
                    self.schedule(self.now + offset, Event::AntiEntropy(id));
                }
            }
            ChurnAction::KillClient(c) => {
                if let Some(cl) = self.clients.get_mut(c as usize) {
                    cl.alive = false;
                    self.emit(format!("c{c} killed"));
                }
            }
            ChurnAction::ReviveClient(c) => {
                if self.clients.get(c as usize).is_some_and(|x| !x.alive) {
                    self.emit(format!("c{c} revived"));
                    self.revive_client(c);
                }
            }
            ChurnAction::Difficulty(d) => {
                self.difficulty = d;
                self.emit(format!("difficulty now {d}"));
            }
        }
    }

    /// Pick live nodes to remove, never emptying a swarm of its current members.
    fn pick_leavers(&mut self, per_mille: u32) -> Vec<NodeId> {
        let mut live: Vec<NodeId> =
            self.nodes.values().filter(|n| n.alive && n.id.0 != self.cfg.seed_node).map(|n| n.id).collect();
        live.shuffle(&mut self.rng);
        let total = self.nodes.values().filter(|n| n.alive).count();
        let want = (total as u64 * per_mille as u64 / 1000) as usize;
        let mut remaining: BTreeMap<SwarmId, usize> = self.registry.swarms().map(|(s, m)| (s, m.len())).collect();
        let mut out = Vec::new();
        for n in live {
            if out.len() == want {
                break;
            }
            if let Some(s) = self.registry.swarm_of(n) {
                let left = remaining.get_mut(&s).expect("swarm listed");
                if *left <= 1 {
                    continue;
                }
                *left -= 1;
            }
            out.push(n);
        }
        out.sort();
        out
    }

    fn anti_entropy(&mut self, id: NodeId) {
        if !self.is_live(id) {
            return;
        }
        self.schedule(self.now + self.cfg.anti_entropy_ms, Event::AntiEntropy(id));
        if self.profile(id) == Profile::Cheater {
            return;
        }
        let Some(swarm) = self.registry.swarm_of(id) else { return };
        let peers: Vec<NodeId> =
            self.registry.members(swarm).unwrap_or(&[]).iter().copied().filter(|m| *m != id).collect();
        let Some(&peer) = peers.choose(&mut self.rng) else { return };
        let hashes = self.own_hashes(id);
        self.send(Endpoint::Node(id), Endpoint::Node(peer), Msg::Digest { hashes });
    }

    /// Live record hashes this node holds for its own swarm.
    fn own_hashes(&self, id: NodeId) -> BTreeSet<RecordHash> {
        let swarms = self.registry.swarm_ids();
        let ring = self.registry.ring();
        let own = self.registry.swarm_of(id);
        self.nodes[&id]
            .store
            .records()
            .filter(|r| r.expiry_ms > self.now && ring.assign_pubkey(&r.envelope.recipient, &swarms).ok() == own)
            .map(|r| r.hash)
            .collect()
    }

    fn background(&mut self, i: u32) {
        let mut pk = [0u8; 32];
        self.rng.fill_bytes(&mut pk);
        let recipient = PublicKey(pk);
        let mut data = vec![0u8; 48];
        self.rng.fill_bytes(&mut data);
        let ttl = 24 * 3600;
        let Ok(mut env) = Envelope::new(recipient, ttl, self.now, 0, data) else { return };
        if pow::mine_envelope(&mut env, self.difficulty, pow::DEFAULT_ATTEMPT_CAP).is_err() {
            return;
        }
        let Ok(swarm) = self.registry.assign(&recipient) else { return };
        let members: Vec<NodeId> = self
            .registry
            .members(swarm)
            .unwrap_or(&[])
            .iter()
            .copied()
            .filter(|m| self.is_live(*m) && self.profile(*m) != Profile::Cheater)
            .collect();
        let Some(&entry) = members.choose(&mut self.rng) else { return };
        let outcome = self.store_at(entry, env);
        self.emit(format!("background {i} at n{entry} {}", outcome_label(&outcome)));
    }

    // ----- node message handling -----

    fn node_receive(&mut self, id: NodeId, from: Endpoint, msg: Msg) {
        match msg {
            Msg::Onion { link, blob, trace } => self.relay_forward(id, from, link, blob, trace),
            Msg::OnionReply { link, blob, trace } => self.relay_back(id, from, link, blob, trace),
            Msg::Exec { link, request, trace } => {
                let response = self.execute(id, &request);
                self.send(Endpoint::Node(id), from, Msg::ExecReply { link, response, trace });
            }
            Msg::ExecReply { link, response, trace } => self.exit_reply(id, from, link, &response, trace),
            Msg::Replicate { envelopes, hops } => self.on_replicas(id, envelopes, hops),
            Msg::Digest { hashes } => {
                let Endpoint::Node(peer) = from else { return };
                if self.profile(id) == Profile::Cheater {
                    return;
                }
                let ours = self.own_hashes(id);
                let they_lack: Vec<Envelope> = ours
                    .difference(&hashes)
                    .filter_map(|h| self.nodes[&id].store.get(h).map(|r| r.envelope.clone()))
                    .collect();
                let we_lack: Vec<RecordHash> = hashes.difference(&ours).copied().collect();
                if !they_lack.is_empty() {
                    self.send_replicas(id, peer, they_lack, 0);
                }
                if !we_lack.is_empty() {
                    self.send(Endpoint::Node(id), from, Msg::Fetch { hashes: we_lack });
                }
            }
            Msg::Fetch { hashes } => {
                let Endpoint::Node(peer) = from else { return };
                if self.profile(id) == Profile::Cheater {
                    return;
                }
                let envs: Vec<Envelope> = hashes
                    .iter()
                    .filter_map(|h| self.nodes[&id].store.get_live(h, self.now).map(|r| r.envelope.clone()))
                    .collect();
                self.send_replicas(id, peer, envs, 0);
            }
            Msg::Challenge { challenge, swarm } => {
                if let Endpoint::Node(v) = from {
                    self.on_challenge(id, v, challenge, swarm);
                }
            }
            Msg::Answer { challenge, swarm, answer } => {
                if let Endpoint::Node(t) = from {
                    self.on_answer(id, t, challenge, swarm, answer);
                }
            }
            Msg::ListRequest { round } => {
                let mut entries = self.honest_list();
                if self.profile(id) == Profile::Liar {
                    let node = self.nodes.get_mut(&id).expect("live");
                    node.lies += 1;
                    let fake = NodeId(1_000_000 + id.0 * 10_000 + node.lies);
                    let mut key = [0u8; 32];
                    self.rng.fill_bytes(&mut key);
                    entries.push(entry_for(fake, PublicKey(key)));
                }
                self.send(Endpoint::Node(id), from, Msg::ListResponse { round, entries });
            }
            Msg::ListResponse { .. } => {}
        }
    }

    fn record_observation(&mut self, trace: u64, obs: Observation, blob: &[u8]) {
        if self.nodes[&obs.hop].profile == Profile::Observer {
            self.observed_blobs.entry(trace).or_default().push(blob.to_vec());
        }
        self.observations.push((trace, obs));
    }

    fn relay_forward(&mut self, id: NodeId, from: Endpoint, link: u64, blob: Vec<u8>, trace: u64) {
        if self.profile(id) == Profile::Dropper {
            return;
        }
        let peeled = match onion::peel(self.provider, &blob, &self.nodes[&id].keys) {
            Ok(p) => p,
            Err(e) => {
                self.emit(format!("n{id} cannot peel onion: {e}"));
                return;
            }
        };
        let node = self.nodes.get_mut(&id).expect("live");
        let new_link = node.link_id();
        let created = self.now;
        match peeled.action {
            PeelAction::Forward { next, blob: inner } => {
                node.links.insert(
                    new_link,
                    Link { prev: from, prev_link: link, hop_key: peeled.hop_key, reply_key: None, created },
                );
                let to = Endpoint::Node(next);
                self.record_observation(trace, Observation::new(id, Direction::Forward, &blob, from, to), &blob);
                self.send(Endpoint::Node(id), to, Msg::Onion { link: new_link, blob: inner, trace });
            }
            PeelAction::Final { destination, request, reply_key } => {
                node.links.insert(
                    new_link,
                    Link { prev: from, prev_link: link, hop_key: peeled.hop_key, reply_key: Some(reply_key), created },
                );
                let to = Endpoint::Node(destination);
                self.record_observation(trace, Observation::new(id, Direction::Forward, &blob, from, to), &blob);
                if destination == id {
                    let response = self.execute(id, &request);
                    self.exit_reply(id, to, new_link, &response, trace);
                } else {
                    self.send(Endpoint::Node(id), to, Msg::Exec { link: new_link, request, trace });
                }
            }
        }
    }

    fn exit_reply(&mut self, id: NodeId, from: Endpoint, link: u64, response: &[u8], trace: u64) {
        let Some(l) = self.nodes.get_mut(&id).and_then(|n| n.links.remove(&link)) else { return };
        let Some(reply_key) = l.reply_key else { return };
        let sealed = onion::seal_reply(self.provider, &reply_key, response, &mut self.rng);
        let blob = onion::wrap_reply(self.provider, &l.hop_key, &sealed);
        self.record_observation(trace, Observation::new(id, Direction::Backward, &sealed, from, l.prev), &sealed);
        self.send(Endpoint::Node(id), l.prev, Msg::OnionReply { link: l.prev_link, blob, trace });
    }

    fn relay_back(&mut self, id: NodeId, from: Endpoint, link: u64, blob: Vec<u8>, trace: u64) {
        if self.profile(id) == Profile::Dropper {
            return;
        }
        let Some(l) = self.nodes.get_mut(&id).and_then(|n| n.links.remove(&link)) else { return };
        let out = onion::wrap_reply(self.provider, &l.hop_key, &blob);
        self.record_observation(trace, Observation::new(id, Direction::Backward, &blob, from, l.prev), &blob);
        self.send(Endpoint::Node(id), l.prev, Msg::OnionReply { link: l.prev_link, blob: out, trace });
    }

    /// Run a request at its destination node.
    fn execute(&mut self, id: NodeId, request: &[u8]) -> Vec<u8> {
        let Some(req) = Request::decode(request) else { return Response::Unknown.encode() };
        let response = match req {
            Request::Ping => Response::Ok,
            Request::Store(wire) => match Envelope::from_wire(&wire) {
                Ok(env) => Response::Store(self.store_at(id, env)),
                Err(_) => Response::Store(StoreOutcome::Rejected(swarmnet_core::store::StoreRejection::Malformed)),
            },
            Request::Retrieve(pk) => {
                let own = self.registry.swarm_of(id);
                if own.is_none() || self.registry.assign(&pk).ok() != own {
                    Response::WrongSwarm
                } else if self.profile(id) == Profile::Cheater {
                    Response::Items(Vec::new())
                } else {
                    let store = &self.nodes[&id].store;
                    let mut items = Vec::new();
                    let mut cursor = None;
                    loop {
                        let page = store.retrieve(&pk, cursor, swarmnet_core::store::DEFAULT_PAGE_SIZE, self.now);
                        items.extend(page.records.iter().map(|r| r.envelope.to_wire()));
                        match page.next_cursor {
                            Some(c) => cursor = Some(c),
                            None => break,
                        }
                    }
                    Response::Items(items)
                }
            }
            Request::Lookup(pk) => match self.registry.assign(&pk) {
                Ok(swarm) => {
                    let members = self.registry.members(swarm).map(<[NodeId]>::to_vec).unwrap_or_default();
                    Response::Swarm(SwarmInfo { swarm, members })
                }
                Err(_) => Response::Unknown,
            },
            Request::SyncDeliver(pk, data) => {
                let node = self.nodes.get_mut(&id).expect("live");
                let q = node.mailbox.entry(pk).or_default();
                if q.len() == MAILBOX_CAP {
                    q.pop_front();
                }
                q.push_back(data);
                Response::Ok
            }
            Request::Listen(pk) => {
                let node = self.nodes.get_mut(&id).expect("live");
                Response::Items(node.mailbox.remove(&pk).map(Vec::from).unwrap_or_default())
            }
        };
        response.encode()
    }

    /// Entry-node admission plus propagation to the rest of the swarm.
    fn store_at(&mut self, id: NodeId, env: Envelope) -> StoreOutcome {
        let swarms = self.registry.swarm_ids();
        let ring = *self.registry.ring();
        let own = self.own_swarm(id);
        let placement = Placement { ring: &ring, swarms: &swarms, own };
        if self.profile(id) == Profile::Cheater {
            let mut scratch = NodeStore::new();
            return scratch.store(env, self.difficulty, self.now, placement);
        }
        let outcome =
            self.nodes.get_mut(&id).expect("live").store.store(env.clone(), self.difficulty, self.now, placement);
        if let StoreOutcome::Stored(h) = outcome {
            self.note_accepted(h, &env);
            let peers: Vec<NodeId> =
                self.registry.members(own).unwrap_or(&[]).iter().copied().filter(|m| *m != id).collect();
            for p in peers {
                self.send_replicas(id, p, vec![env.clone()], 0);
            }
        }
        outcome
    }

    fn note_accepted(&mut self, h: RecordHash, env: &Envelope) {
        let now = self.now;
        self.stats
            .accepted
            .entry(h)
            .or_insert_with(|| (env.recipient, now, env.expiry_ms(), data_hash(&env.ciphertext)));
    }

    fn on_replicas(&mut self, id: NodeId, envelopes: Vec<Envelope>, hops: u8) {
        if self.profile(id) == Profile::Cheater {
            return;
        }
        let swarms = self.registry.swarm_ids();
        let ring = *self.registry.ring();
        let own = self.own_swarm(id);
        let placement = Placement { ring: &ring, swarms: &swarms, own };
        let mut misplaced: BTreeMap<SwarmId, Vec<Envelope>> = BTreeMap::new();
        for env in envelopes {
            let outcome =
                self.nodes.get_mut(&id).expect("live").store.accept_replica(env.clone(), self.now, placement, None);
            match outcome {
                StoreOutcome::Stored(h) => self.note_accepted(h, &env),
                StoreOutcome::Rejected(swarmnet_core::store::StoreRejection::WrongSwarm { correct })
                    if !correct.is_sentinel() =>
                {
                    misplaced.entry(correct).or_default().push(env);
                }
                _ => {}
            }
        }
        if hops >= REPLICA_HOPS {
            return;
        }
        // Membership moved while these were in flight; hand them on.
        for (swarm, envs) in misplaced {
            let members = self.registry.members(swarm).map(<[NodeId]>::to_vec).unwrap_or_default();
            for m in members {
                self.send_replicas(id, m, envs.clone(), hops + 1);
            }
        }
    }
}

pub(crate) fn entry_for(id: NodeId, key: PublicKey) -> NodeEntry {
    NodeEntry {
        id,
        address: format!("10.{}.{}.{}", id.0 >> 16 & 0xff, id.0 >> 8 & 0xff, id.0 & 0xff),
        port: 22021,
        key,
    }
}

pub(crate) fn outcome_label(o: &StoreOutcome) -> String {
    match o {
        StoreOutcome::Stored(h) => format!("stored {}", &h.to_hex()[..16]),
        StoreOutcome::Duplicate(h) => format!("duplicate {}", &h.to_hex()[..16]),
        StoreOutcome::Rejected(r) => format!("rejected {r:?}"),
    }
}
