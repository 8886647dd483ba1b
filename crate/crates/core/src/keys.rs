//! Key material and the textual account address.
//!
//! Keys are raw 32-byte Curve25519-class values. The human-facing form of a
//! public key is a 66-character lowercase hex string: a fixed version byte
//! `0x05` followed by the 32 key bytes.

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

/// Version byte prefixed to every address.
pub const ADDRESS_VERSION: u8 = 0x05;

/// Length of an encoded address in hex characters.
pub const ADDRESS_HEX_LEN: usize = 66;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AddressError {
    #[error("address must be {ADDRESS_HEX_LEN} hex characters, got {0}")]
    Length(usize),
    #[error("invalid hex in address")]
    InvalidHex,
    #[error("unsupported address version byte {0:#04x}")]
    Version(u8),
}

#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct PublicKey(pub [u8; 32]);

impl PublicKey {
    pub const ZERO: PublicKey = PublicKey([0; 32]);

    pub fn as_bytes(&self) -> &[u8; 32] {
        &self.0
    }

    /// The 33-byte wire form: version byte then key bytes.
    pub fn to_versioned(&self) -> [u8; 33] {
        let mut out = [0u8; 33];
        out[0] = ADDRESS_VERSION;
        out[1..].copy_from_slice(&self.0);
        out
    }

    pub fn from_versioned(bytes: &[u8; 33]) -> Result<Self, AddressError> {
        if bytes[0] != ADDRESS_VERSION {
            return Err(AddressError::Version(bytes[0]));
        }
        let mut key = [0u8; 32];
        key.copy_from_slice(&bytes[1..]);
        Ok(PublicKey(key))
    }

    /// Hex address, always 66 lowercase characters starting with `05`.
    pub fn to_address(&self) -> String {
        hex::encode(self.to_versioned())
    }

    pub fn from_address(s: &str) -> Result<Self, AddressError> {
        if s.len() != ADDRESS_HEX_LEN {
            return Err(AddressError::Length(s.len()));
        }
        let mut raw = [0u8; 33];
        hex::decode_to_slice(s, &mut raw).map_err(|_| AddressError::InvalidHex)?;
        Self::from_versioned(&raw)
    }
}

impl fmt::Debug for PublicKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "PublicKey({})", &self.to_address()[..14])
    }
}

impl fmt::Display for PublicKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_address())
    }
}

impl FromStr for PublicKey {
    type Err = AddressError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::from_address(s)
    }
}

/// Secret half of a keypair. Debug output never shows the bytes.
#[derive(Clone, PartialEq, Eq)]
pub struct PrivateKey(pub [u8; 32]);

impl PrivateKey {
    pub fn as_bytes(&self) -> &[u8; 32] {
        &self.0
    }
}

impl fmt::Debug for PrivateKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("PrivateKey(..)")
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Keypair {
    pub public: PublicKey,
    pub private: PrivateKey,
}

/// Identity of a simulated service node.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(pub u32);

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl FromStr for NodeId {
    type Err = std::num::ParseIntError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        s.trim().parse().map(NodeId)
    }
}
