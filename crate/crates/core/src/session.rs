//! End-to-end sessions: X3DH key agreement, a KDF-chain ratchet with a DH
//! step on every change of sending direction, and friend requests.
//!
//! ```text
//! DH1 = DH(IK_a, SK_b)   DH2 = DH(EK_a, IK_b)
//! DH3 = DH(EK_a, SK_b)   DH4 = DH(EK_a, OTK_b)
//! K   = KDF(DH1 || DH2 || DH3 || DH4)
//! ```
//!
//! Each chain step is `(CK', MK) = (kdf(CK || ratchet_pub, "chain"), kdf(CK || ratchet_pub, "msg"))`.
//! Wire messages are `counter u32 BE || ratchet_pub (32) || AEAD(MK, plaintext, aad = first 36 bytes)`.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;

use rand::RngCore;
use thiserror::Error;

use crate::crypto::{CryptoProvider, Signature, AEAD_OVERHEAD};
use crate::keys::{Keypair, PublicKey};

/// Furthest a message counter may run ahead of its chain.
pub const SKIP_WINDOW: u32 = 32;
/// Skipped message keys kept at once; the oldest are evicted first.
pub const SKIPPED_CACHE: usize = 32;
/// Receive chains remembered for late messages after a ratchet step.
const OLD_RECEIVE_CHAINS: usize = 4;

pub const HEADER_LEN: usize = 4 + 32;
pub const INIT_HEADER_LEN: usize = 32 + 32 + 4;
pub const MAX_INTRO: usize = 1024;
pub const BUNDLE_LEN: usize = 32 + 32 + 64 + 32 + 4;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SessionError {
    #[error("signed prekey signature does not verify")]
    BadSignature,
    #[error("one-time prekey {0} was already used")]
    OtkReused(u32),
    #[error("one-time prekey {0} is unknown")]
    UnknownOtk(u32),
    #[error("malformed message")]
    Malformed,
    #[error("message does not decrypt")]
    Decrypt,
    #[error("message {0} was already received")]
    Replay(u32),
    #[error("message {counter} is more than {SKIP_WINDOW} ahead of {expected}")]
    TooFarAhead { counter: u32, expected: u32 },
    #[error("introduction of {0} bytes exceeds {MAX_INTRO}")]
    IntroTooLong(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PrekeyBundle {
    pub identity: PublicKey,
    pub signed_prekey: PublicKey,
    pub signature: Signature,
    pub one_time: PublicKey,
    pub otk_id: u32,
}

impl PrekeyBundle {
    pub fn verify(&self, provider: &dyn CryptoProvider) -> bool {
        provider.verify(&self.identity, &self.signed_prekey.0, &self.signature)
    }

    pub fn to_bytes(&self) -> [u8; BUNDLE_LEN] {
        let mut out = [0u8; BUNDLE_LEN];
        out[..32].copy_from_slice(&self.identity.0);
        out[32..64].copy_from_slice(&self.signed_prekey.0);
        out[64..128].copy_from_slice(&self.signature.0);
        out[128..160].copy_from_slice(&self.one_time.0);
        out[160..].copy_from_slice(&self.otk_id.to_be_bytes());
        out
    }

    pub fn from_bytes(b: &[u8]) -> Result<Self, SessionError> {
        if b.len() != BUNDLE_LEN {
            return Err(SessionError::Malformed);
        }
        Ok(Self {
            identity: PublicKey(b[..32].try_into().expect("32 bytes")),
            signed_prekey: PublicKey(b[32..64].try_into().expect("32 bytes")),
            signature: Signature(b[64..128].try_into().expect("64 bytes")),
            one_time: PublicKey(b[128..160].try_into().expect("32 bytes")),
            otk_id: u32::from_be_bytes(b[160..].try_into().expect("4 bytes")),
        })
    }
}

/// Private halves kept by the bundle's owner.
#[derive(Clone, Debug)]
pub struct PrekeySecrets {
    pub signed_prekey: Keypair,
    pub one_time: Keypair,
}

pub fn make_bundle(
    provider: &dyn CryptoProvider,
    identity: &Keypair,
    otk_id: u32,
    rng: &mut dyn RngCore,
) -> (PrekeyBundle, PrekeySecrets) {
    let signed_prekey = provider.generate_keypair(rng);
    let one_time = provider.generate_keypair(rng);
    let signature = provider.sign(&identity.private, &signed_prekey.public.0, rng);
    let bundle = PrekeyBundle {
        identity: identity.public,
        signed_prekey: signed_prekey.public,
        signature,
        one_time: one_time.public,
        otk_id,
    };
    (bundle, PrekeySecrets { signed_prekey, one_time })
}

/// What the initiator sends alongside its first messages.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct InitHeader {
    pub identity: PublicKey,
    pub ephemeral: PublicKey,
    pub otk_id: u32,
}

impl InitHeader {
    pub fn to_bytes(&self) -> [u8; INIT_HEADER_LEN] {
        let mut out = [0u8; INIT_HEADER_LEN];
        out[..32].copy_from_slice(&self.identity.0);
        out[32..64].copy_from_slice(&self.ephemeral.0);
        out[64..].copy_from_slice(&self.otk_id.to_be_bytes());
        out
    }

    pub fn from_bytes(b: &[u8]) -> Result<Self, SessionError> {
        if b.len() != INIT_HEADER_LEN {
            return Err(SessionError::Malformed);
        }
        Ok(Self {
            identity: PublicKey(b[..32].try_into().expect("32 bytes")),
            ephemeral: PublicKey(b[32..64].try_into().expect("32 bytes")),
            otk_id: u32::from_be_bytes(b[64..].try_into().expect("4 bytes")),
        })
    }
}

fn x3dh_kdf(provider: &dyn CryptoProvider, dhs: [[u8; 32]; 4]) -> [u8; 32] {
    provider.kdf(&dhs.concat(), b"x3dh")
}

/// Initiator side. Returns `K` and the header the responder needs.
pub fn x3dh_initiate(
    provider: &dyn CryptoProvider,
    identity: &Keypair,
    bundle: &PrekeyBundle,
    rng: &mut dyn RngCore,
) -> Result<([u8; 32], InitHeader, Keypair), SessionError> {
    if !bundle.verify(provider) {
        return Err(SessionError::BadSignature);
    }
    let ek = provider.generate_keypair(rng);
    let k = x3dh_kdf(
        provider,
        [
            provider.dh(&identity.private, &bundle.signed_prekey),
            provider.dh(&ek.private, &bundle.identity),
            provider.dh(&ek.private, &bundle.signed_prekey),
            provider.dh(&ek.private, &bundle.one_time),
        ],
    );
    let header = InitHeader { identity: identity.public, ephemeral: ek.public, otk_id: bundle.otk_id };
    Ok((k, header, ek))
}

/// Responder side, given the private halves of the bundle that was used.
pub fn x3dh_respond(
    provider: &dyn CryptoProvider,
    identity: &Keypair,
    signed_prekey: &Keypair,
    one_time: &Keypair,
    their_identity: &PublicKey,
    their_ephemeral: &PublicKey,
) -> [u8; 32] {
    x3dh_kdf(
        provider,
        [
            provider.dh(&signed_prekey.private, their_identity),
            provider.dh(&identity.private, their_ephemeral),
            provider.dh(&signed_prekey.private, their_ephemeral),
            provider.dh(&one_time.private, their_ephemeral),
        ],
    )
}

/// One symmetric chain step.
pub fn ratchet_next(provider: &dyn CryptoProvider, ck: &[u8; 32], dh_param: &[u8]) -> ([u8; 32], [u8; 32]) {
    let mut ikm = Vec::with_capacity(32 + dh_param.len());
    ikm.extend_from_slice(ck);
    ikm.extend_from_slice(dh_param);
    (provider.kdf(&ikm, b"chain"), provider.kdf(&ikm, b"msg"))
}

fn root_step(provider: &dyn CryptoProvider, root: &[u8; 32], dh: &[u8; 32]) -> ([u8; 32], [u8; 32]) {
    let ikm = [root.as_slice(), dh.as_slice()].concat();
    (provider.kdf(&ikm, b"root"), provider.kdf(&ikm, b"chain-init"))
}

/// One party's prekeys: a signed prekey plus one-time prekeys handed out per bundle.
#[derive(Clone, Debug)]
pub struct PrekeyStore {
    identity: Keypair,
    signed: Keypair,
    signature: Signature,
    otks: BTreeMap<u32, Keypair>,
    consumed: BTreeSet<u32>,
    next_id: u32,
    /// Outstanding friend-request bundle per contact.
    pending: BTreeMap<PublicKey, u32>,
}

impl PrekeyStore {
    pub fn new(provider: &dyn CryptoProvider, identity: Keypair, rng: &mut dyn RngCore) -> Self {
        let signed = provider.generate_keypair(rng);
        let signature = provider.sign(&identity.private, &signed.public.0, rng);
        Self {
            identity,
            signed,
            signature,
            otks: BTreeMap::new(),
            consumed: BTreeSet::new(),
            next_id: 0,
            pending: BTreeMap::new(),
        }
    }

    pub fn identity(&self) -> &Keypair {
        &self.identity
    }

    /// Publish a bundle with a fresh one-time prekey.
    pub fn bundle(&mut self, provider: &dyn CryptoProvider, rng: &mut dyn RngCore) -> PrekeyBundle {
        let otk = provider.generate_keypair(rng);
        let otk_id = self.next_id;
        self.next_id += 1;
        self.otks.insert(otk_id, otk.clone());
        PrekeyBundle {
            identity: self.identity.public,
            signed_prekey: self.signed.public,
            signature: self.signature,
            one_time: otk.public,
            otk_id,
        }
    }

    /// Bundle for a friend request to `contact`; any earlier one for them is discarded.
    pub fn bundle_for(
        &mut self,
        contact: PublicKey,
        provider: &dyn CryptoProvider,
        rng: &mut dyn RngCore,
    ) -> PrekeyBundle {
        if let Some(old) = self.pending.remove(&contact) {
            self.otks.remove(&old);
        }
        let b = self.bundle(provider, rng);
        self.pending.insert(contact, b.otk_id);
        b
    }

    pub fn pending_for(&self, contact: &PublicKey) -> Option<u32> {
        self.pending.get(contact).copied()
    }

    pub fn cancel_pending(&mut self, contact: &PublicKey) {
        if let Some(id) = self.pending.remove(contact) {
            self.otks.remove(&id);
        }
    }

    pub fn has_otk(&self, otk_id: u32) -> bool {
        self.otks.contains_key(&otk_id)
    }

    /// Compute `K` for an incoming session and burn the one-time prekey.
    pub fn respond(&mut self, provider: &dyn CryptoProvider, header: &InitHeader) -> Result<[u8; 32], SessionError> {
        if self.consumed.contains(&header.otk_id) {
            return Err(SessionError::OtkReused(header.otk_id));
        }
        let otk = self.otks.remove(&header.otk_id).ok_or(SessionError::UnknownOtk(header.otk_id))?;
        self.consumed.insert(header.otk_id);
        self.pending.retain(|_, id| *id != header.otk_id);
        Ok(x3dh_respond(provider, &self.identity, &self.signed, &otk, &header.identity, &header.ephemeral))
    }

    pub(crate) fn signed_prekey(&self) -> &Keypair {
        &self.signed
    }
}

#[derive(Clone, Copy)]
struct Chain {
    key: [u8; 32],
    next: u32,
}

/// Pairwise ratchet state.
#[derive(Clone)]
pub struct Session {
    root: [u8; 32],
    dh_self: Keypair,
    dh_remote: Option<PublicKey>,
    send: Option<Chain>,
    /// Most recent last.
    recv: VecDeque<(PublicKey, Chain)>,
    skipped: VecDeque<((PublicKey, u32), [u8; 32])>,
}

impl fmt::Debug for Session {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Session")
            .field("ratchet", &self.dh_self.public)
            .field("remote", &self.dh_remote)
            .field("sent", &self.send.map(|c| c.next))
            .finish_non_exhaustive()
    }
}

fn parse_header(wire: &[u8]) -> Result<(u32, PublicKey), SessionError> {
    if wire.len() < HEADER_LEN + AEAD_OVERHEAD {
        return Err(SessionError::Malformed);
    }
    let counter = u32::from_be_bytes(wire[..4].try_into().expect("4 bytes"));
    Ok((counter, PublicKey(wire[4..HEADER_LEN].try_into().expect("32 bytes"))))
}

/// Counter of a wire message without decrypting it.
pub fn message_counter(wire: &[u8]) -> Option<u32> {
    parse_header(wire).ok().map(|(c, _)| c)
}

impl Session {
    /// Initiator state from `K` and the responder's signed prekey. The first
    /// sending chain is created on the first [`Session::encrypt`].
    pub fn new_initiator(shared: [u8; 32], their_signed_prekey: PublicKey, placeholder: Keypair) -> Self {
        Self {
            root: shared,
            dh_self: placeholder,
            dh_remote: Some(their_signed_prekey),
            send: None,
            recv: VecDeque::new(),
            skipped: VecDeque::new(),
        }
    }

    /// Responder state: its ratchet key starts as its signed prekey.
    pub fn new_responder(shared: [u8; 32], signed_prekey: Keypair) -> Self {
        Self {
            root: shared,
            dh_self: signed_prekey,
            dh_remote: None,
            send: None,
            recv: VecDeque::new(),
            skipped: VecDeque::new(),
        }
    }

    /// Run X3DH against `bundle` and return the session plus the header to send.
    pub fn initiate(
        provider: &dyn CryptoProvider,
        identity: &Keypair,
        bundle: &PrekeyBundle,
        rng: &mut dyn RngCore,
    ) -> Result<(Session, InitHeader), SessionError> {
        let (k, header, ek) = x3dh_initiate(provider, identity, bundle, rng)?;
        Ok((Session::new_initiator(k, bundle.signed_prekey, ek), header))
    }

    /// Accept an incoming session, consuming the referenced one-time prekey.
    pub fn respond(
        provider: &dyn CryptoProvider,
        store: &mut PrekeyStore,
        header: &InitHeader,
    ) -> Result<Session, SessionError> {
        let k = store.respond(provider, header)?;
        Ok(Session::new_responder(k, store.signed_prekey().clone()))
    }

    pub fn sent_count(&self) -> u32 {
        self.send.map_or(0, |c| c.next)
    }

    pub fn encrypt(&mut self, provider: &dyn CryptoProvider, plaintext: &[u8], rng: &mut dyn RngCore) -> Vec<u8> {
        if self.send.is_none() {
            let remote = self.dh_remote.expect("a responder receives before it sends");
            self.dh_self = provider.generate_keypair(rng);
            let (root, ck) = root_step(provider, &self.root, &provider.dh(&self.dh_self.private, &remote));
            self.root = root;
            self.send = Some(Chain { key: ck, next: 0 });
        }
        let chain = self.send.as_mut().expect("send chain set above");
        let (next_ck, mk) = ratchet_next(provider, &chain.key, &self.dh_self.public.0);
        let counter = chain.next;
        chain.key = next_ck;
        chain.next = chain.next.checked_add(1).expect("message counter overflow");

        let mut out = Vec::with_capacity(HEADER_LEN + AEAD_OVERHEAD + plaintext.len());
        out.extend_from_slice(&counter.to_be_bytes());
        out.extend_from_slice(&self.dh_self.public.0);
        let sealed = provider.aead_seal(&mk, plaintext, &out[..HEADER_LEN]);
        out.extend_from_slice(&sealed);
        out
    }

    /// Decrypt `wire`. State only changes if the message authenticates.
    pub fn decrypt(&mut self, provider: &dyn CryptoProvider, wire: &[u8]) -> Result<Vec<u8>, SessionError> {
        let mut next = self.clone();
        let pt = next.decrypt_inner(provider, wire)?;
        *self = next;
        Ok(pt)
    }

    fn decrypt_inner(&mut self, provider: &dyn CryptoProvider, wire: &[u8]) -> Result<Vec<u8>, SessionError> {
        let (counter, ratchet) = parse_header(wire)?;
        let (aad, body) = wire.split_at(HEADER_LEN);
        let open = |mk: &[u8; 32]| provider.aead_open(mk, body, aad).map_err(|_| SessionError::Decrypt);

        if let Some(pos) = self.skipped.iter().position(|(k, _)| *k == (ratchet, counter)) {
            let (_, mk) = self.skipped[pos];
            let pt = open(&mk)?;
            self.skipped.remove(pos);
            return Ok(pt);
        }

        let idx = match self.recv.iter().position(|(k, _)| *k == ratchet) {
            Some(i) => i,
            None => {
                let (root, ck) = root_step(provider, &self.root, &provider.dh(&self.dh_self.private, &ratchet));
                self.root = root;
                self.dh_remote = Some(ratchet);
                self.send = None;
                self.recv.push_back((ratchet, Chain { key: ck, next: 0 }));
                if self.recv.len() > OLD_RECEIVE_CHAINS {
                    self.recv.pop_front();
                }
                self.recv.len() - 1
            }
        };

        let chain = &mut self.recv[idx].1;
        if counter < chain.next {
            return Err(SessionError::Replay(counter));
        }
        if counter - chain.next > SKIP_WINDOW {
            return Err(SessionError::TooFarAhead { counter, expected: chain.next });
        }
        let mut skipped = Vec::new();
        while chain.next < counter {
            let (ck, mk) = ratchet_next(provider, &chain.key, &ratchet.0);
            skipped.push(((ratchet, chain.next), mk));
            chain.key = ck;
            chain.next += 1;
        }
        let (ck, mk) = ratchet_next(provider, &chain.key, &ratchet.0);
        chain.key = ck;
        chain.next += 1;
        let pt = open(&mk)?;
        for entry in skipped {
            self.skipped.push_back(entry);
            if self.skipped.len() > SKIPPED_CACHE {
                self.skipped.pop_front();
            }
        }
        Ok(pt)
    }

    #[doc(hidden)]
    pub fn receive_chain_key(&self, ratchet: &PublicKey) -> Option<[u8; 32]> {
        self.recv.iter().find(|(k, _)| k == ratchet).map(|(_, c)| c.key)
    }

    #[doc(hidden)]
    pub fn discard_skipped(&mut self, ratchet: &PublicKey, counter: u32) -> bool {
        let before = self.skipped.len();
        self.skipped.retain(|(k, _)| *k != (*ratchet, counter));
        before != self.skipped.len()
    }
}

/// Contents of a friend request once opened.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FriendRequest {
    pub sender: PublicKey,
    pub display_name: String,
    pub intro: String,
    pub bundle: PrekeyBundle,
}

fn seal_key(provider: &dyn CryptoProvider, shared: &[u8; 32], eph: &PublicKey, recipient: &PublicKey) -> [u8; 32] {
    provider.kdf(&[shared.as_slice(), &eph.0, &recipient.0].concat(), b"friend-request")
}

impl FriendRequest {
    fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&self.sender.0);
        out.extend_from_slice(&(self.display_name.len() as u16).to_be_bytes());
        out.extend_from_slice(self.display_name.as_bytes());
        out.extend_from_slice(&(self.intro.len() as u16).to_be_bytes());
        out.extend_from_slice(self.intro.as_bytes());
        out.extend_from_slice(&self.bundle.to_bytes());
        out
    }

    fn decode(b: &[u8]) -> Result<Self, SessionError> {
        let mut rest = b;
        let mut take = |n: usize| -> Result<&[u8], SessionError> {
            if rest.len() < n {
                return Err(SessionError::Malformed);
            }
            let (head, tail) = rest.split_at(n);
            rest = tail;
            Ok(head)
        };
        let sender = PublicKey(take(32)?.try_into().expect("32 bytes"));
        let name_len = u16::from_be_bytes(take(2)?.try_into().expect("2 bytes")) as usize;
        let display_name = String::from_utf8(take(name_len)?.to_vec()).map_err(|_| SessionError::Malformed)?;
        let intro_len = u16::from_be_bytes(take(2)?.try_into().expect("2 bytes")) as usize;
        let intro = String::from_utf8(take(intro_len)?.to_vec()).map_err(|_| SessionError::Malformed)?;
        let bundle = PrekeyBundle::from_bytes(take(BUNDLE_LEN)?)?;
        if !rest.is_empty() {
            return Err(SessionError::Malformed);
        }
        Ok(Self { sender, display_name, intro, bundle })
    }

    /// Seal a request to `recipient`'s long-term key. The sender's store
    /// issues the bundle, superseding any earlier request to the same contact.
    pub fn create(
        provider: &dyn CryptoProvider,
        sender: &mut PrekeyStore,
        display_name: &str,
        intro: &str,
        recipient: &PublicKey,
        rng: &mut dyn RngCore,
    ) -> Result<Vec<u8>, SessionError> {
        if intro.len() > MAX_INTRO {
            return Err(SessionError::IntroTooLong(intro.len()));
        }
        if display_name.len() > u16::MAX as usize {
            return Err(SessionError::Malformed);
        }
        let bundle = sender.bundle_for(*recipient, provider, rng);
        let request = FriendRequest {
            sender: sender.identity().public,
            display_name: display_name.to_string(),
            intro: intro.to_string(),
            bundle,
        };
        let eph = provider.generate_keypair(rng);
        let key = seal_key(provider, &provider.dh(&eph.private, recipient), &eph.public, recipient);
        let mut out = eph.public.0.to_vec();
        out.extend_from_slice(&provider.aead_seal(&key, &request.encode(), &eph.public.0));
        Ok(out)
    }

    /// Open a sealed request with the recipient's long-term key.
    pub fn open(provider: &dyn CryptoProvider, recipient: &Keypair, sealed: &[u8]) -> Result<Self, SessionError> {
        if sealed.len() < 32 + AEAD_OVERHEAD {
            return Err(SessionError::Malformed);
        }
        let eph = PublicKey(sealed[..32].try_into().expect("32 bytes"));
        let key = seal_key(provider, &provider.dh(&recipient.private, &eph), &eph, &recipient.public);
        let plain = provider.aead_open(&key, &sealed[32..], &eph.0).map_err(|_| SessionError::Decrypt)?;
        let req = Self::decode(&plain)?;
        if req.bundle.identity != req.sender || !req.bundle.verify(provider) {
            return Err(SessionError::BadSignature);
        }
        Ok(req)
    }

    /// Accept: start a session against the sender's bundle. The returned
    /// header travels with the first reply so the sender can respond.
    pub fn accept(
        &self,
        provider: &dyn CryptoProvider,
        identity: &Keypair,
        rng: &mut dyn RngCore,
    ) -> Result<(Session, InitHeader), SessionError> {
        Session::initiate(provider, identity, &self.bundle, rng)
    }
}
