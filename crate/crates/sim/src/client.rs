//! Client behaviour: bootstrap, paths, swarm lookups, async and sync delivery, polling.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::RngCore;
use swarmnet_core::onion::{self, Endpoint, HopInfo, Path, ReplyContext};
use swarmnet_core::pow;
use swarmnet_core::routing::{
    self, ChatBody, ChatPayload, ConversationTransport, Inbox, NodeEntry, NodeList, RefreshOutcome, SendVerdict,
    SwarmCache, SwarmInfo,
};
use swarmnet_core::session::{FriendRequest, InitHeader, PrekeyStore, Session, SessionError, INIT_HEADER_LEN};
use swarmnet_core::store::{StoreOutcome, StoredRecord};
use swarmnet_core::{CryptoProvider, Envelope, Keypair, NodeId, PublicKey};

use crate::wire::{Request, Response};
use crate::world::{data_hash, MessageTruth, Msg, Trace, World};

/// How long a client waits for an onion reply.
const REQUEST_TIMEOUT_MS: u64 = 5_000;
/// How long a refresh round waits for its quorum.
const REFRESH_TIMEOUT_MS: u64 = 2_000;
/// Undecryptable messages kept for a later retry.
const DEFERRED_CAP: usize = 64;

const TAG_FRIEND: u8 = b'F';
const TAG_INIT: u8 = b'I';
const TAG_MESSAGE: u8 = b'M';

#[derive(Clone, Copy, Debug)]
pub(crate) enum ClientEvent {
    Start,
    Poll(u64),
    Listen(u64),
    Refresh(u64),
    RefreshDeadline(u64),
    SendText(u64),
    RequestTimeout(u64),
    AckTimeout(u64),
}

/// How a control message travels.
#[derive(Clone, Copy, Debug)]
enum Route {
    Async,
    /// Only to the peer's listening node; dropped if there is none.
    Sync,
    /// Listening node when known, swarm storage otherwise.
    Auto,
}

#[derive(Clone, Debug)]
enum Purpose {
    Ping,
    Lookup(PublicKey),
    Store(u64),
    Retrieve,
    Listen,
    Sync,
}

struct Pending {
    ctx: ReplyContext,
    purpose: Purpose,
    dest: NodeId,
    request: Vec<u8>,
    attempt: usize,
    /// Sent over the established path rather than a one-off detour.
    main_path: bool,
}

struct Queued {
    dest: Option<NodeId>,
    purpose: Purpose,
    request: Vec<u8>,
    attempt: usize,
}

struct Contact {
    pk: PublicKey,
    session: Option<Session>,
    /// Attached to every message until the peer has answered.
    header: Option<InitHeader>,
    transport: ConversationTransport,
}

struct OutMsg {
    recipient: PublicKey,
    envelope: Envelope,
    label: String,
    attempts: usize,
    remined: bool,
    outstanding: usize,
    responses: Vec<(NodeId, Option<StoreOutcome>)>,
}

struct Round {
    no: u64,
    targets: Vec<NodeId>,
    responses: BTreeMap<NodeId, Vec<NodeEntry>>,
}

pub struct Client {
    pub keys: Keypair,
    prekeys: PrekeyStore,
    pub alive: bool,
    sync: bool,
    gen: u64,
    difficulty: Option<u64>,
    list: Option<NodeList>,
    path: Option<Path>,
    candidate: Option<Path>,
    pending: BTreeMap<u64, Pending>,
    next_link: u64,
    queued: Vec<Queued>,
    cache: SwarmCache,
    own_swarm: Option<SwarmInfo>,
    polls: u64,
    inbox: Inbox,
    pub listening: Option<NodeId>,
    partner: Option<u32>,
    contact: Option<Contact>,
    outbox: BTreeMap<u64, OutMsg>,
    next_out: u64,
    lookups: BTreeMap<PublicKey, Vec<u64>>,
    texts_waiting: Vec<u64>,
    sync_pending: BTreeMap<u64, Vec<u8>>,
    deferred: Vec<Vec<u8>>,
    round: Option<Round>,
    rounds: u64,
    /// Replace the node list with the seed node's next answer.
    reseed: bool,
}

impl Client {
    pub(crate) fn new(keys: Keypair, sync: bool, provider: &dyn CryptoProvider, rng: &mut dyn RngCore) -> Client {
        let prekeys = PrekeyStore::new(provider, keys.clone(), rng);
        Client {
            keys,
            prekeys,
            alive: true,
            sync,
            gen: 0,
            difficulty: None,
            list: None,
            path: None,
            candidate: None,
            pending: BTreeMap::new(),
            next_link: 0,
            queued: Vec::new(),
            cache: SwarmCache::default(),
            own_swarm: None,
            polls: 0,
            inbox: Inbox::default(),
            listening: None,
            partner: None,
            contact: None,
            outbox: BTreeMap::new(),
            next_out: 0,
            lookups: BTreeMap::new(),
            texts_waiting: Vec::new(),
            sync_pending: BTreeMap::new(),
            deferred: Vec::new(),
            round: None,
            rounds: 0,
            reseed: false,
        }
    }

    fn advertised(&self) -> Option<NodeId> {
        if self.sync {
            self.listening
        } else {
            None
        }
    }
}

fn frame(tag: u8, parts: &[&[u8]]) -> Vec<u8> {
    let mut out = vec![tag];
    for p in parts {
        out.extend_from_slice(p);
    }
    out
}

impl World {
    fn client(&mut self, c: u32) -> &mut Client {
        &mut self.clients[c as usize]
    }

    pub(crate) fn client_event(&mut self, c: u32, ev: ClientEvent) {
        if !self.clients[c as usize].alive {
            if let ClientEvent::SendText(m) = ev {
                self.client(c).texts_waiting.push(m);
            }
            return;
        }
        let gen = self.clients[c as usize].gen;
        match ev {
            ClientEvent::Start => self.client_start(c),
            ClientEvent::Poll(g) if g == gen => self.poll(c),
            ClientEvent::Listen(g) if g == gen => self.listen(c),
            ClientEvent::Refresh(g) if g == gen => self.start_refresh(c),
            ClientEvent::Poll(_) | ClientEvent::Listen(_) | ClientEvent::Refresh(_) => {}
            ClientEvent::RefreshDeadline(round) => self.refresh_deadline(c, round),
            ClientEvent::SendText(m) => self.send_text(c, m),
            ClientEvent::RequestTimeout(link) => self.request_timeout(c, link),
            ClientEvent::AckTimeout(m) => self.ack_timeout(c, m),
        }
    }

    fn client_start(&mut self, c: u32) {
        let partner = c ^ 1;
        if partner < self.cfg.clients {
            let pk = self.clients[partner as usize].keys.public;
            let cl = self.client(c);
            cl.partner = Some(partner);
            cl.contact = Some(Contact { pk, session: None, header: None, transport: ConversationTransport::new(pk) });
            let stagger = 37 * c as u64;
            for k in 0..self.cfg.messages_per_client {
                let msg = ((c as u64) << 32) | (k as u64 + 1);
                let at = self.cfg.traffic_start_ms + k as u64 * self.cfg.send_interval_ms + stagger;
                self.stats.messages.insert(msg, MessageTruth { sent_at: at, delivered_at: None });
                self.schedule(at, crate::world::Event::Client(c, ClientEvent::SendText(msg)));
            }
        }
        self.request_seed_list(c);
    }

    fn request_seed_list(&mut self, c: u32) {
        let seed = NodeId(self.cfg.seed_node);
        self.send(Endpoint::Client(c), Endpoint::Node(seed), Msg::ListRequest { round: 0 });
        self.schedule(self.now + REFRESH_TIMEOUT_MS, crate::world::Event::Client(c, ClientEvent::RefreshDeadline(0)));
    }

    fn start_timers(&mut self, c: u32) {
        let gen = self.clients[c as usize].gen;
        let jitter = 13 * c as u64 % self.cfg.poll_interval_ms.max(1);
        self.schedule(self.now + jitter + 1, crate::world::Event::Client(c, ClientEvent::Poll(gen)));
        if self.cfg.sync {
            self.schedule(
                self.now + self.cfg.listen_interval_ms,
                crate::world::Event::Client(c, ClientEvent::Listen(gen)),
            );
        }
        if self.cfg.refresh_interval_ms > 0 {
            self.schedule(
                self.now + self.cfg.refresh_interval_ms,
                crate::world::Event::Client(c, ClientEvent::Refresh(gen)),
            );
        }
    }

    pub(crate) fn revive_client(&mut self, c: u32) {
        let cl = self.client(c);
        cl.alive = true;
        cl.gen += 1;
        cl.path = None;
        cl.candidate = None;
        cl.pending.clear();
        cl.queued.clear();
        cl.round = None;
        cl.own_swarm = None;
        self.start_timers(c);
        let stale: Vec<u64> = self.clients[c as usize].sync_pending.keys().copied().collect();
        for m in stale {
            self.ack_timeout(c, m);
        }
        let outs: Vec<u64> = self.clients[c as usize].outbox.keys().copied().collect();
        for out in outs {
            self.try_store(c, out);
        }
        self.flush_texts(c);
    }

    pub(crate) fn client_receive(&mut self, c: u32, from: Endpoint, msg: Msg) {
        match msg {
            Msg::OnionReply { link, blob, .. } => self.on_reply(c, link, &blob),
            Msg::ListResponse { round, entries } => {
                let Endpoint::Node(n) = from else { return };
                if round == 0 {
                    self.on_bootstrap(c, entries);
                } else {
                    self.on_list_response(c, round, n, entries);
                }
            }
            _ => {}
        }
    }

    // ----- node lists -----

    fn on_bootstrap(&mut self, c: u32, entries: Vec<NodeEntry>) {
        let cl = self.client(c);
        if cl.list.is_some() {
            if !cl.reseed {
                return;
            }
            cl.reseed = false;
            if let Ok(list) = NodeList::bootstrap(Some(entries)) {
                let n = list.len();
                cl.list = Some(list);
                self.emit(format!("c{c} reloaded {n} nodes from seed"));
            }
            return;
        }
        let Ok(list) = NodeList::bootstrap(Some(entries)) else { return };
        self.emit(format!("c{c} bootstrapped {} nodes", list.len()));
        self.client(c).list = Some(list);
        self.start_timers(c);
        self.build_path(c);
        let cl = &self.clients[c as usize];
        if let (Some(p), Some(contact)) = (cl.partner, &cl.contact) {
            if c < p {
                let pk = contact.pk;
                self.send_friend_request(c, pk);
            }
        }
    }

    fn refresh_deadline(&mut self, c: u32, round: u64) {
        if round == 0 {
            if self.clients[c as usize].list.is_none() {
                self.request_seed_list(c);
            }
            return;
        }
        if self.clients[c as usize].round.as_ref().is_some_and(|r| r.no == round) {
            self.finish_refresh(c);
        }
    }

    fn start_refresh(&mut self, c: u32) {
        let gen = self.clients[c as usize].gen;
        self.schedule(
            self.now + self.cfg.refresh_interval_ms,
            crate::world::Event::Client(c, ClientEvent::Refresh(gen)),
        );
        let cl = &mut self.clients[c as usize];
        let Some(list) = &cl.list else { return };
        if cl.round.is_some() {
            return;
        }
        let targets = list.refresh_targets(&mut self.rng);
        cl.rounds += 1;
        let no = cl.rounds;
        cl.round = Some(Round { no, targets: targets.clone(), responses: BTreeMap::new() });
        self.stats.refresh_attempts += 1;
        for t in targets {
            self.send(Endpoint::Client(c), Endpoint::Node(t), Msg::ListRequest { round: no });
        }
        self.schedule(self.now + REFRESH_TIMEOUT_MS, crate::world::Event::Client(c, ClientEvent::RefreshDeadline(no)));
    }

    fn on_list_response(&mut self, c: u32, round: u64, from: NodeId, entries: Vec<NodeEntry>) {
        let cl = self.client(c);
        let Some(r) = cl.round.as_mut() else { return };
        if r.no != round || !r.targets.contains(&from) {
            return;
        }
        r.responses.insert(from, entries);
        if r.responses.len() == r.targets.len() {
            self.finish_refresh(c);
        }
    }

    fn finish_refresh(&mut self, c: u32) {
        let truth = {
            let mut t = self.honest_list();
            t.sort();
            t
        };
        let cl = self.client(c);
        let Some(round) = cl.round.take() else { return };
        let Some(list) = &cl.list else { return };
        let responses: Vec<Option<Vec<NodeEntry>>> =
            round.targets.iter().map(|t| round.responses.get(t).cloned()).collect();
        match list.refresh(&responses) {
            RefreshOutcome::Adopted(new) => {
                let normalised: BTreeSet<Vec<NodeEntry>> = responses
                    .iter()
                    .map(|r| {
                        let mut v = r.clone().unwrap_or_default();
                        v.sort();
                        v.dedup();
                        v
                    })
                    .collect();
                let unanimous = normalised.len() == 1 && responses.iter().all(Option::is_some);
                let minority = new.entries() != truth.as_slice();
                let n = new.len();
                cl.list = Some(new);
                self.stats.refresh_adopted += 1;
                if !unanimous {
                    self.stats.refresh_nonunanimous += 1;
                }
                if minority {
                    self.stats.refresh_minority += 1;
                }
                self.emit(format!("c{c} refresh adopted {n} nodes"));
            }
            RefreshOutcome::Kept(why) => {
                self.stats.refresh_rejected += 1;
                self.emit(format!("c{c} refresh kept old list: {why:?}"));
            }
        }
    }

    // ----- paths and onion requests -----

    fn build_path(&mut self, c: u32) {
        let cl = &self.clients[c as usize];
        if cl.candidate.is_some() {
            return;
        }
        let Some(list) = &cl.list else { return };
        let hops = list.hops();
        let Ok(path) = onion::select_path(&hops, &mut self.rng) else {
            self.emit(format!("c{c} cannot build a path from {} nodes", hops.len()));
            return;
        };
        self.stats.path_builds += 1;
        self.client(c).candidate = Some(path.clone());
        let exit = path.exit().id;
        self.send_onion(c, &path, exit, Purpose::Ping, Request::Ping.encode(), 0, false);
    }

    /// Send now if a path is up, otherwise queue until one is.
    fn issue(&mut self, c: u32, dest: Option<NodeId>, purpose: Purpose, request: Vec<u8>, attempt: usize) {
        let Some(path) = self.clients[c as usize].path.clone() else {
            self.client(c).queued.push(Queued { dest, purpose, request, attempt });
            self.build_path(c);
            return;
        };
        let cl = &self.clients[c as usize];
        let Some(list) = &cl.list else { return };
        let dest = match dest {
            Some(d) => d,
            None => {
                let ids: Vec<NodeId> = list.ids().into_iter().filter(|n| !path.contains(*n)).collect();
                match ids.choose(&mut self.rng) {
                    Some(d) => *d,
                    None => return,
                }
            }
        };
        if !path.contains(dest) {
            self.send_onion(c, &path, dest, purpose, request, attempt, true);
            return;
        }
        // The destination sits on our path: route this one request around it.
        let hops: Vec<HopInfo> = list.hops().into_iter().filter(|h| h.id != dest).collect();
        match onion::select_path(&hops, &mut self.rng) {
            Ok(detour) => self.send_onion(c, &detour, dest, purpose, request, attempt, false),
            Err(_) => self.emit(format!("c{c} no detour around n{dest}")),
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn send_onion(
        &mut self,
        c: u32,
        path: &Path,
        dest: NodeId,
        purpose: Purpose,
        request: Vec<u8>,
        attempt: usize,
        main_path: bool,
    ) {
        let onion = match onion::wrap(self.provider, path, dest, &request, &mut self.rng) {
            Ok(o) => o,
            Err(e) => {
                self.emit(format!("c{c} cannot wrap request: {e}"));
                return;
            }
        };
        let trace = self.new_trace();
        let kept = if self.cfg.observers > 0 { request.clone() } else { Vec::new() };
        self.traces.insert(
            trace,
            Trace { client: c, guard: path.guard().id, exit: path.exit().id, destination: dest, request: kept },
        );
        self.stats.onion_requests += 1;
        let cl = self.client(c);
        cl.next_link += 1;
        let link = cl.next_link;
        cl.pending.insert(link, Pending { ctx: onion.reply, purpose, dest, request, attempt, main_path });
        self.send(Endpoint::Client(c), Endpoint::Node(onion.guard), Msg::Onion { link, blob: onion.blob, trace });
        self.schedule(self.now + REQUEST_TIMEOUT_MS, crate::world::Event::Client(c, ClientEvent::RequestTimeout(link)));
    }

    fn path_down(&mut self, c: u32, why: &str) {
        self.stats.path_failures += 1;
        self.emit(format!("c{c} path down: {why}"));
        self.client(c).path = None;
        self.build_path(c);
    }

    fn request_timeout(&mut self, c: u32, link: u64) {
        let Some(p) = self.client(c).pending.remove(&link) else { return };
        match p.purpose {
            Purpose::Ping => {
                self.stats.path_failures += 1;
                self.emit(format!("c{c} path build failed"));
                let cl = self.client(c);
                cl.candidate = None;
                if !cl.reseed {
                    cl.reseed = true;
                    let seed = NodeId(self.cfg.seed_node);
                    self.send(Endpoint::Client(c), Endpoint::Node(seed), Msg::ListRequest { round: 0 });
                }
                self.build_path(c);
                return;
            }
            _ if p.main_path && self.clients[c as usize].path.is_some() => self.path_down(c, "request timed out"),
            _ => {}
        }
        match p.purpose {
            Purpose::Store(out) => self.on_store_result(c, out, p.dest, None),
            Purpose::Lookup(pk) => {
                if p.attempt + 1 < routing::MAX_ATTEMPTS {
                    self.issue(c, None, Purpose::Lookup(pk), p.request, p.attempt + 1);
                } else {
                    self.lookup_failed(c, pk);
                }
            }
            Purpose::Ping | Purpose::Retrieve | Purpose::Listen | Purpose::Sync => {}
        }
    }

    fn on_reply(&mut self, c: u32, link: u64, blob: &[u8]) {
        let Some(p) = self.client(c).pending.remove(&link) else { return };
        let response = onion::open_reply(self.provider, &p.ctx, blob).ok().and_then(|b| Response::decode(&b));
        let Some(response) = response else {
            self.emit(format!("c{c} unreadable reply"));
            return;
        };
        match (p.purpose, response) {
            (Purpose::Ping, Response::Ok) => {
                let cl = self.client(c);
                let Some(path) = cl.candidate.take() else { return };
                let desc = format!("{}-{}-{}", path.guard().id, path.middle().id, path.exit().id);
                cl.path = Some(path);
                self.emit(format!("c{c} path up {desc}"));
                let queued = std::mem::take(&mut self.client(c).queued);
                for q in queued {
                    self.issue(c, q.dest, q.purpose, q.request, q.attempt);
                }
            }
            (Purpose::Lookup(pk), Response::Swarm(info)) => self.on_lookup(c, pk, info),
            (Purpose::Lookup(pk), _) => self.lookup_failed(c, pk),
            (Purpose::Store(out), Response::Store(outcome)) => self.on_store_result(c, out, p.dest, Some(outcome)),
            (Purpose::Store(out), _) => self.on_store_result(c, out, p.dest, None),
            (Purpose::Retrieve, Response::Items(items)) => self.on_retrieved(c, p.dest, items),
            (Purpose::Retrieve, Response::WrongSwarm) => self.client(c).own_swarm = None,
            (Purpose::Listen, Response::Items(items)) => {
                for data in items {
                    self.process_data(c, &data, true);
                }
            }
            _ => {}
        }
    }

    // ----- swarms and polling -----

    fn on_lookup(&mut self, c: u32, pk: PublicKey, info: SwarmInfo) {
        let cl = &mut self.clients[c as usize];
        if pk == cl.keys.public {
            let members = info.members.clone();
            cl.own_swarm = Some(info);
            if cl.sync && !cl.listening.is_some_and(|l| members.contains(&l)) {
                cl.listening = members.choose(&mut self.rng).copied();
                if let Some(l) = cl.listening {
                    self.emit(format!("c{c} listens at n{l}"));
                }
            }
            return;
        }
        cl.cache.insert(pk, info);
        let waiting = cl.lookups.remove(&pk).unwrap_or_default();
        for out in waiting {
            self.try_store(c, out);
        }
    }

    fn lookup_failed(&mut self, c: u32, pk: PublicKey) {
        let waiting = self.client(c).lookups.remove(&pk).unwrap_or_default();
        for out in waiting {
            self.fail_out(c, out, "swarm lookup failed");
        }
    }

    fn poll(&mut self, c: u32) {
        let gen = self.clients[c as usize].gen;
        self.schedule(self.now + self.cfg.poll_interval_ms, crate::world::Event::Client(c, ClientEvent::Poll(gen)));
        let cl = self.client(c);
        if cl.list.is_none() {
            return;
        }
        cl.polls += 1;
        let me = cl.keys.public;
        if cl.own_swarm.is_none() || cl.polls.is_multiple_of(8) {
            self.issue(c, None, Purpose::Lookup(me), Request::Lookup(me).encode(), 0);
        }
        let Some(own) = self.clients[c as usize].own_swarm.clone() else { return };
        for t in routing::pick(&own.members, routing::POLL_TARGETS, &mut self.rng) {
            self.issue(c, Some(t), Purpose::Retrieve, Request::Retrieve(me).encode(), 0);
        }
    }

    fn listen(&mut self, c: u32) {
        let gen = self.clients[c as usize].gen;
        self.schedule(self.now + self.cfg.listen_interval_ms, crate::world::Event::Client(c, ClientEvent::Listen(gen)));
        let cl = &self.clients[c as usize];
        let (Some(node), Some(_)) = (cl.listening, &cl.list) else { return };
        let me = cl.keys.public;
        self.issue(c, Some(node), Purpose::Listen, Request::Listen(me).encode(), 0);
    }

    fn on_retrieved(&mut self, c: u32, from: NodeId, items: Vec<Vec<u8>>) {
        let Some(own) = self.clients[c as usize].own_swarm.as_ref().map(|s| s.swarm) else { return };
        let records: Vec<StoredRecord> = items
            .iter()
            .filter_map(|w| Envelope::from_wire(w).ok())
            .filter(|e| e.recipient == self.clients[c as usize].keys.public)
            .map(|e| StoredRecord::new(e, own))
            .collect();
        let fresh = self.client(c).inbox.merge([records]);
        if !fresh.is_empty() {
            self.emit(format!("c{c} polled {} new from n{from}", fresh.len()));
        }
        for r in fresh {
            self.process_data(c, &r.envelope.ciphertext, false);
        }
    }

    // ----- sending -----

    fn send_friend_request(&mut self, c: u32, to: PublicKey) {
        let provider = self.provider;
        let cl = &mut self.clients[c as usize];
        let sealed =
            match FriendRequest::create(provider, &mut cl.prekeys, &format!("client {c}"), "hi", &to, &mut self.rng) {
                Ok(s) => s,
                Err(e) => {
                    self.emit(format!("c{c} friend request failed: {e}"));
                    return;
                }
            };
        self.emit(format!("c{c} sent friend request"));
        self.send_async(c, to, frame(TAG_FRIEND, &[&sealed]), "friend-request".into());
    }

    fn send_text(&mut self, c: u32, msg: u64) {
        let provider = self.provider;
        let cl = &mut self.clients[c as usize];
        let advertised = cl.advertised();
        let Some(contact) = cl.contact.as_mut() else { return };
        let Some(session) = contact.session.as_mut() else {
            cl.texts_waiting.push(msg);
            return;
        };
        let payload = ChatPayload {
            listening: advertised,
            body: ChatBody::Text { msg_id: msg, text: format!("message {msg:x}").into_bytes() },
        };
        let wire = session.encrypt(provider, &payload.encode(), &mut self.rng);
        let data = match &contact.header {
            Some(h) => frame(TAG_INIT, &[&h.to_bytes(), &wire]),
            None => frame(TAG_MESSAGE, &[&wire]),
        };
        let pk = contact.pk;
        match contact.transport.listening_node() {
            Some(node) => {
                cl.sync_pending.insert(msg, data.clone());
                self.stats.sync_sent += 1;
                self.stats.sync_data.insert(data_hash(&data));
                self.emit(format!("c{c} sent m{msg:x} sync via n{node}"));
                self.issue(c, Some(node), Purpose::Sync, Request::SyncDeliver(pk, data).encode(), 0);
                self.schedule(
                    self.now + routing::ACK_TIMEOUT_MS,
                    crate::world::Event::Client(c, ClientEvent::AckTimeout(msg)),
                );
            }
            None => {
                self.emit(format!("c{c} sent m{msg:x} async"));
                self.send_async(c, pk, data, format!("m{msg:x}"));
            }
        }
    }

    fn ack_timeout(&mut self, c: u32, msg: u64) {
        let cl = self.client(c);
        let Some(data) = cl.sync_pending.remove(&msg) else { return };
        let Some(contact) = cl.contact.as_mut() else { return };
        contact.transport.fall_back();
        let pk = contact.pk;
        self.stats.fell_back += 1;
        self.emit(format!("c{c} fell_back m{msg:x}"));
        self.send_async(c, pk, data, format!("m{msg:x}"));
    }

    fn send_async(&mut self, c: u32, recipient: PublicKey, data: Vec<u8>, label: String) {
        let default = self.cfg.difficulty;
        let d = *self.client(c).difficulty.get_or_insert(default);
        let Ok(mut envelope) = Envelope::new(recipient, self.cfg.ttl_secs, self.now, 0, data) else { return };
        if pow::mine_envelope(&mut envelope, d, pow::DEFAULT_ATTEMPT_CAP).is_err() {
            self.stats.send_failures += 1;
            self.emit(format!("c{c} could not mine {label}"));
            return;
        }
        let cl = self.client(c);
        cl.next_out += 1;
        let out = cl.next_out;
        cl.outbox.insert(
            out,
            OutMsg { recipient, envelope, label, attempts: 0, remined: false, outstanding: 0, responses: Vec::new() },
        );
        self.try_store(c, out);
    }

    fn try_store(&mut self, c: u32, out: u64) {
        let cl = self.client(c);
        let Some(o) = cl.outbox.get(&out) else { return };
        let pk = o.recipient;
        let Some(info) = cl.cache.get(&pk).cloned() else {
            let waiters = cl.lookups.entry(pk).or_default();
            let first = waiters.is_empty();
            waiters.push(out);
            if first {
                self.issue(c, None, Purpose::Lookup(pk), Request::Lookup(pk).encode(), 0);
            }
            return;
        };
        let targets = routing::pick(&info.members, routing::ASYNC_TARGETS, &mut self.rng);
        if targets.is_empty() {
            self.fail_out(c, out, "empty swarm");
            return;
        }
        let o = self.client(c).outbox.get_mut(&out).expect("present");
        o.outstanding = targets.len();
        o.responses.clear();
        let request = Request::Store(o.envelope.to_wire()).encode();
        for t in targets {
            self.issue(c, Some(t), Purpose::Store(out), request.clone(), 0);
        }
    }

    fn on_store_result(&mut self, c: u32, out: u64, dest: NodeId, outcome: Option<StoreOutcome>) {
        let cl = self.client(c);
        let Some(o) = cl.outbox.get_mut(&out) else { return };
        if o.outstanding == 0 {
            return;
        }
        o.responses.push((dest, outcome));
        o.outstanding -= 1;
        if o.outstanding > 0 {
            return;
        }
        match routing::judge_store(&o.responses) {
            SendVerdict::Delivered { acceptors } => {
                let o = cl.outbox.remove(&out).expect("present");
                let ids: Vec<String> = acceptors.iter().map(|a| format!("n{a}")).collect();
                self.emit(format!("c{c} stored {} on {}", o.label, ids.join(",")));
            }
            SendVerdict::Remine { difficulty } if !o.remined => {
                o.remined = true;
                cl.difficulty = Some(difficulty);
                if pow::mine_envelope(&mut o.envelope, difficulty, pow::DEFAULT_ATTEMPT_CAP).is_err() {
                    self.fail_out(c, out, "re-mining failed");
                    return;
                }
                self.stats.remines += 1;
                self.emit(format!("c{c} re-mined at difficulty {difficulty}"));
                self.try_store(c, out);
            }
            SendVerdict::WrongSwarm { .. } => {
                let pk = o.recipient;
                o.attempts += 1;
                let again = o.attempts < routing::MAX_ATTEMPTS;
                cl.cache.invalidate(&pk);
                self.emit(format!("c{c} stale swarm for {}", if again { "retry" } else { "give up" }));
                if again {
                    self.try_store(c, out);
                } else {
                    self.fail_out(c, out, "wrong swarm");
                }
            }
            _ => {
                o.attempts += 1;
                // Silent members have probably left; resolve the swarm again.
                let pk = o.recipient;
                cl.cache.invalidate(&pk);
                if cl.outbox[&out].attempts < routing::MAX_ATTEMPTS {
                    self.try_store(c, out);
                } else {
                    self.fail_out(c, out, "no acceptors");
                }
            }
        }
    }

    fn fail_out(&mut self, c: u32, out: u64, why: &str) {
        if let Some(o) = self.client(c).outbox.remove(&out) {
            self.stats.send_failures += 1;
            self.emit(format!("c{c} send {} failed: {why}", o.label));
        }
    }

    // ----- receiving -----

    fn process_data(&mut self, c: u32, data: &[u8], via_sync: bool) {
        let Some((&tag, body)) = data.split_first() else { return };
        match tag {
            TAG_FRIEND => self.on_friend_request(c, body),
            TAG_INIT => {
                if body.len() < INIT_HEADER_LEN {
                    return;
                }
                let Ok(header) = InitHeader::from_bytes(&body[..INIT_HEADER_LEN]) else { return };
                let provider = self.provider;
                let cl = self.client(c);
                let Some(contact) = cl.contact.as_mut() else { return };
                if contact.pk != header.identity {
                    return;
                }
                let mut established = false;
                if contact.session.is_none() {
                    match Session::respond(provider, &mut cl.prekeys, &header) {
                        Ok(s) => {
                            contact.session = Some(s);
                            established = true;
                            self.emit(format!("c{c} session established"));
                        }
                        Err(e) => {
                            self.emit(format!("c{c} cannot accept session: {e}"));
                            return;
                        }
                    }
                }
                self.decrypt(c, data, &body[INIT_HEADER_LEN..], via_sync);
                if established {
                    // Tell the acceptor where we listen before any text is due.
                    self.send_control(c, ChatBody::Text { msg_id: 0, text: b"hello".to_vec() }, Route::Auto);
                    self.flush_texts(c);
                }
            }
            TAG_MESSAGE => self.decrypt(c, data, body, via_sync),
            _ => {}
        }
    }

    fn on_friend_request(&mut self, c: u32, sealed: &[u8]) {
        let provider = self.provider;
        let cl = &mut self.clients[c as usize];
        let Ok(request) = FriendRequest::open(provider, &cl.keys, sealed) else { return };
        let keys = cl.keys.clone();
        let Some(contact) = cl.contact.as_mut() else { return };
        if contact.pk != request.sender || contact.session.is_some() {
            return;
        }
        let Ok((session, header)) = request.accept(provider, &keys, &mut self.rng) else { return };
        contact.session = Some(session);
        contact.header = Some(header);
        self.emit(format!("c{c} accepted friend request"));
        self.send_control(c, ChatBody::Text { msg_id: 0, text: b"hello".to_vec() }, Route::Async);
        self.flush_texts(c);
    }

    fn flush_texts(&mut self, c: u32) {
        let waiting = std::mem::take(&mut self.client(c).texts_waiting);
        for m in waiting {
            self.send_text(c, m);
        }
    }

    /// Session-level message outside the scripted traffic (greeting or ack).
    fn send_control(&mut self, c: u32, body: ChatBody, route: Route) {
        let provider = self.provider;
        let cl = &mut self.clients[c as usize];
        let advertised = cl.advertised();
        let Some(contact) = cl.contact.as_mut() else { return };
        let Some(session) = contact.session.as_mut() else { return };
        let wire = session.encrypt(provider, &ChatPayload { listening: advertised, body }.encode(), &mut self.rng);
        let data = match &contact.header {
            Some(h) => frame(TAG_INIT, &[&h.to_bytes(), &wire]),
            None => frame(TAG_MESSAGE, &[&wire]),
        };
        let pk = contact.pk;
        match (route, contact.transport.listening_node()) {
            (Route::Sync | Route::Auto, Some(node)) => {
                self.stats.sync_data.insert(data_hash(&data));
                self.issue(c, Some(node), Purpose::Sync, Request::SyncDeliver(pk, data).encode(), 0);
            }
            (Route::Sync, None) => {}
            (Route::Async | Route::Auto, _) => self.send_async(c, pk, data, "greeting".into()),
        }
    }

    fn decrypt(&mut self, c: u32, data: &[u8], wire: &[u8], via_sync: bool) {
        let provider = self.provider;
        let cl = self.client(c);
        let Some(contact) = cl.contact.as_mut() else { return };
        let Some(session) = contact.session.as_mut() else {
            if cl.deferred.len() < DEFERRED_CAP {
                cl.deferred.push(data.to_vec());
            }
            return;
        };
        let plain = match session.decrypt(provider, wire) {
            Ok(p) => p,
            Err(SessionError::Replay(_)) => {
                self.stats.duplicates += 1;
                return;
            }
            Err(_) => {
                if cl.deferred.len() < DEFERRED_CAP {
                    cl.deferred.push(data.to_vec());
                }
                return;
            }
        };
        let Some(payload) = ChatPayload::decode(&plain) else { return };
        let first_reply = contact.header.take().is_some();
        let was_sync = contact.transport.is_sync();
        contact.transport.on_peer_status(payload.listening);
        if contact.transport.is_sync() != was_sync {
            let mode = if contact.transport.is_sync() { "sync" } else { "async" };
            self.emit(format!("c{c} transport {mode}"));
        }
        if first_reply {
            self.emit(format!("c{c} peer answered"));
        }
        match payload.body {
            ChatBody::Text { msg_id: 0, .. } => {}
            ChatBody::Text { msg_id, .. } => {
                if let Some(t) = self.stats.messages.get_mut(&msg_id) {
                    if t.delivered_at.is_none() {
                        t.delivered_at = Some(self.now);
                        let how = if via_sync { "sync" } else { "async" };
                        self.emit(format!("c{c} delivered m{msg_id:x} {how}"));
                    }
                }
                if via_sync {
                    self.send_control(c, ChatBody::Ack { msg_id }, Route::Sync);
                }
            }
            ChatBody::Ack { msg_id } => {
                let cl = self.client(c);
                if cl.sync_pending.remove(&msg_id).is_some() {
                    if let Some(contact) = cl.contact.as_mut() {
                        contact.transport.on_ack(msg_id);
                    }
                    self.stats.sync_acked += 1;
                    self.emit(format!("c{c} acked m{msg_id:x}"));
                }
            }
        }
        let retry = std::mem::take(&mut self.client(c).deferred);
        for d in retry {
            self.process_data(c, &d, false);
        }
    }
}
