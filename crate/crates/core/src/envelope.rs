//! The stored message unit and its byte-exact wire layout.
//!
//! Payload layout (also the proof-of-work input):
//!
//! ```text
//! offset  size  field
//! 0       8     ttl, seconds, u64 big-endian
//! 8       8     timestamp, ms since epoch, u64 big-endian
//! 16      33    recipient: version byte 0x05 then 32 key bytes
//! 49      L     ciphertext, L >= 1
//! ```
//!
//! A store request carries the proof-of-work nonce in front of the payload:
//! `nonce u64 big-endian || payload`.

use std::fmt;

use thiserror::Error;

use crate::crypto::sha512;
use crate::keys::{AddressError, PublicKey};

/// 96 hours.
pub const MAX_TTL_SECS: u64 = 96 * 3600;

/// Bytes in front of the ciphertext.
pub const PAYLOAD_HEADER_LEN: usize = 8 + 8 + 33;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EnvelopeError {
    #[error("truncated envelope: need at least {need} bytes, got {got}")]
    Truncated { need: usize, got: usize },
    #[error("ttl {0}s exceeds the 96 hour cap")]
    TtlExceeded(u64),
    #[error("ciphertext must not be empty")]
    EmptyCiphertext,
    #[error(transparent)]
    Recipient(#[from] AddressError),
}

/// Identifies a stored record: SHA-512 of the payload, truncated to 32 bytes.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct RecordHash(pub [u8; 32]);

impl RecordHash {
    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }
}

impl fmt::Debug for RecordHash {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "RecordHash({})", &self.to_hex()[..12])
    }
}

impl fmt::Display for RecordHash {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

#[derive(Clone, PartialEq, Eq, Debug)]
pub struct Envelope {
    pub recipient: PublicKey,
    pub ttl_secs: u64,
    pub timestamp_ms: u64,
    pub nonce: u64,
    pub ciphertext: Vec<u8>,
}

/// Serialise the payload fields without validating them.
pub fn encode_payload(ttl_secs: u64, timestamp_ms: u64, recipient: &PublicKey, ciphertext: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(PAYLOAD_HEADER_LEN + ciphertext.len());
    out.extend_from_slice(&ttl_secs.to_be_bytes());
    out.extend_from_slice(&timestamp_ms.to_be_bytes());
    out.extend_from_slice(&recipient.to_versioned());
    out.extend_from_slice(ciphertext);
    out
}

impl Envelope {
    pub fn new(
        recipient: PublicKey,
        ttl_secs: u64,
        timestamp_ms: u64,
        nonce: u64,
        ciphertext: Vec<u8>,
    ) -> Result<Self, EnvelopeError> {
        if ttl_secs > MAX_TTL_SECS {
            return Err(EnvelopeError::TtlExceeded(ttl_secs));
        }
        if ciphertext.is_empty() {
            return Err(EnvelopeError::EmptyCiphertext);
        }
        Ok(Self { recipient, ttl_secs, timestamp_ms, nonce, ciphertext })
    }

    pub fn payload(&self) -> Vec<u8> {
        encode_payload(self.ttl_secs, self.timestamp_ms, &self.recipient, &self.ciphertext)
    }

    /// Parse a payload; the nonce travels separately.
    pub fn parse_payload(bytes: &[u8], nonce: u64) -> Result<Self, EnvelopeError> {
        if bytes.len() < PAYLOAD_HEADER_LEN {
            return Err(EnvelopeError::Truncated { need: PAYLOAD_HEADER_LEN, got: bytes.len() });
        }
        let ttl = u64::from_be_bytes(bytes[0..8].try_into().expect("8 bytes"));
        let ts = u64::from_be_bytes(bytes[8..16].try_into().expect("8 bytes"));
        let pk_bytes: &[u8; 33] = bytes[16..49].try_into().expect("33 bytes");
        let recipient = PublicKey::from_versioned(pk_bytes)?;
        Self::new(recipient, ttl, ts, nonce, bytes[PAYLOAD_HEADER_LEN..].to_vec())
    }

    /// Store-request form: nonce then payload.
    pub fn to_wire(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + PAYLOAD_HEADER_LEN + self.ciphertext.len());
        out.extend_from_slice(&self.nonce.to_be_bytes());
        out.extend_from_slice(&self.payload());
        out
    }

    pub fn from_wire(bytes: &[u8]) -> Result<Self, EnvelopeError> {
        if bytes.len() < 8 {
            return Err(EnvelopeError::Truncated { need: 8 + PAYLOAD_HEADER_LEN, got: bytes.len() });
        }
        let nonce = u64::from_be_bytes(bytes[..8].try_into().expect("8 bytes"));
        Self::parse_payload(&bytes[8..], nonce)
    }

    pub fn record_hash(&self) -> RecordHash {
        let digest = sha512(&self.payload());
        let mut h = [0u8; 32];
        h.copy_from_slice(&digest[..32]);
        RecordHash(h)
    }

    pub fn expiry_ms(&self) -> u64 {
        self.timestamp_ms.saturating_add(self.ttl_secs.saturating_mul(1000))
    }
}
