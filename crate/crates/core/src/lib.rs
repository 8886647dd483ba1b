//! Protocol library for a swarm-partitioned, onion-routed message store.
//!
//! Service nodes are grouped into swarms placed on a 64-bit identifier ring;
//! each recipient key maps to the nearest swarm, whose members replicate that
//! recipient's messages for at most 96 hours. Clients admit messages with a
//! size- and TTL-scaled proof of work, reach nodes through 3-hop onion
//! requests, and talk to each other over X3DH-initialised ratcheting sessions.
//! Nodes audit each other's storage with blockhash-selected challenge pairs.

pub mod audit;
pub mod clock;
pub mod crypto;
pub mod envelope;
pub mod keys;
pub mod mnemonic;
pub mod onion;
pub mod pow;
pub mod registry;
pub mod ring;
pub mod routing;
pub mod session;
pub mod store;

pub use crypto::{CryptoProvider, FastProvider, StandardProvider};
pub use envelope::{Envelope, RecordHash};
pub use keys::{Keypair, NodeId, PrivateKey, PublicKey};
pub use ring::{Ring, SwarmId};
