//! Pluggable cryptographic primitives.
//!
//! Every protocol module reaches DH, KDF, hashing, AEAD and signatures through
//! [`CryptoProvider`]. [`StandardProvider`] is the real thing (X25519,
//! HKDF-SHA512, ChaCha20-Poly1305, XEdDSA signatures over the DH key).
//! [`FastProvider`] is a deliberately insecure stand-in with the same algebraic
//! contract, used where property tests or large simulations would otherwise
//! spend their time in curve arithmetic.
//!
//! Providers are deterministic: all randomness comes from the caller's RNG so
//! simulations replay bit-for-bit. AEAD uses a synthetic nonce derived from
//! the key, associated data and plaintext, so sealing the same message twice
//! under one key yields identical ciphertexts and never reuses a nonce for
//! distinct plaintexts.

use std::fmt;

use chacha20poly1305::aead::{Aead, KeyInit, Payload};
use chacha20poly1305::{ChaCha20Poly1305, Nonce};
use curve25519_dalek::edwards::{CompressedEdwardsY, EdwardsPoint};
use curve25519_dalek::montgomery::MontgomeryPoint;
use curve25519_dalek::scalar::{clamp_integer, Scalar};
use hkdf::Hkdf;
use rand::RngCore;
use sha2::{Digest, Sha512};
use thiserror::Error;

use crate::keys::{Keypair, PrivateKey, PublicKey};

pub const AEAD_NONCE_LEN: usize = 12;
pub const AEAD_TAG_LEN: usize = 16;
/// Bytes an AEAD ciphertext adds on top of its plaintext.
pub const AEAD_OVERHEAD: usize = AEAD_NONCE_LEN + AEAD_TAG_LEN;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum CryptoError {
    #[error("authenticated decryption failed")]
    Open,
    #[error("ciphertext too short")]
    Truncated,
}

#[derive(Clone, Copy, PartialEq, Eq)]
pub struct Signature(pub [u8; 64]);

impl fmt::Debug for Signature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Signature({}..)", hex::encode(&self.0[..8]))
    }
}

pub trait CryptoProvider: Send + Sync + fmt::Debug {
    fn name(&self) -> &'static str;

    /// Deterministically expand 32 seed bytes into a keypair.
    fn keypair_from_seed(&self, seed: [u8; 32]) -> Keypair;

    fn generate_keypair(&self, rng: &mut dyn RngCore) -> Keypair {
        let mut seed = [0u8; 32];
        rng.fill_bytes(&mut seed);
        self.keypair_from_seed(seed)
    }

    fn dh(&self, private: &PrivateKey, public: &PublicKey) -> [u8; 32];

    fn kdf(&self, ikm: &[u8], label: &[u8]) -> [u8; 32];

    fn hash512(&self, data: &[u8]) -> [u8; 64] {
        sha512(data)
    }

    fn aead_seal(&self, key: &[u8; 32], plaintext: &[u8], aad: &[u8]) -> Vec<u8>;

    fn aead_open(&self, key: &[u8; 32], ciphertext: &[u8], aad: &[u8]) -> Result<Vec<u8>, CryptoError>;

    fn sign(&self, private: &PrivateKey, message: &[u8], rng: &mut dyn RngCore) -> Signature;

    fn verify(&self, public: &PublicKey, message: &[u8], signature: &Signature) -> bool;
}

pub fn sha512(data: &[u8]) -> [u8; 64] {
    Sha512::digest(data).into()
}

fn synthetic_nonce(key: &[u8; 32], plaintext: &[u8], aad: &[u8]) -> [u8; AEAD_NONCE_LEN] {
    let mut h = Sha512::new();
    h.update(b"siv-nonce");
    h.update(key);
    h.update((aad.len() as u64).to_be_bytes());
    h.update(aad);
    h.update(plaintext);
    let digest = h.finalize();
    let mut nonce = [0u8; AEAD_NONCE_LEN];
    nonce.copy_from_slice(&digest[..AEAD_NONCE_LEN]);
    nonce
}

/// X25519 + HKDF-SHA512 + ChaCha20-Poly1305 + XEdDSA.
#[derive(Debug, Default, Clone, Copy)]
pub struct StandardProvider;

impl CryptoProvider for StandardProvider {
    fn name(&self) -> &'static str {
        "standard"
    }

    fn keypair_from_seed(&self, seed: [u8; 32]) -> Keypair {
        let secret = x25519_dalek::StaticSecret::from(seed);
        let public = x25519_dalek::PublicKey::from(&secret);
        Keypair { public: PublicKey(public.to_bytes()), private: PrivateKey(seed) }
    }

    fn dh(&self, private: &PrivateKey, public: &PublicKey) -> [u8; 32] {
        let secret = x25519_dalek::StaticSecret::from(private.0);
        secret.diffie_hellman(&x25519_dalek::PublicKey::from(public.0)).to_bytes()
    }

    fn kdf(&self, ikm: &[u8], label: &[u8]) -> [u8; 32] {
        let hk = Hkdf::<Sha512>::new(None, ikm);
        let mut out = [0u8; 32];
        hk.expand(label, &mut out).expect("32 bytes is a valid HKDF-SHA512 length");
        out
    }

    fn aead_seal(&self, key: &[u8; 32], plaintext: &[u8], aad: &[u8]) -> Vec<u8> {
        let nonce = synthetic_nonce(key, plaintext, aad);
        let cipher = ChaCha20Poly1305::new(key.into());
        let body = cipher
            .encrypt(Nonce::from_slice(&nonce), Payload { msg: plaintext, aad })
            .expect("chacha20poly1305 encryption is infallible for in-memory buffers");
        let mut out = Vec::with_capacity(AEAD_NONCE_LEN + body.len());
        out.extend_from_slice(&nonce);
        out.extend_from_slice(&body);
        out
    }

    fn aead_open(&self, key: &[u8; 32], ciphertext: &[u8], aad: &[u8]) -> Result<Vec<u8>, CryptoError> {
        if ciphertext.len() < AEAD_OVERHEAD {
            return Err(CryptoError::Truncated);
        }
        let (nonce, body) = ciphertext.split_at(AEAD_NONCE_LEN);
        ChaCha20Poly1305::new(key.into())
            .decrypt(Nonce::from_slice(nonce), Payload { msg: body, aad })
            .map_err(|_| CryptoError::Open)
    }

    fn sign(&self, private: &PrivateKey, message: &[u8], rng: &mut dyn RngCore) -> Signature {
        let mut z = [0u8; 64];
        rng.fill_bytes(&mut z);
        xeddsa::sign(private, message, &z)
    }

    fn verify(&self, public: &PublicKey, message: &[u8], signature: &Signature) -> bool {
        xeddsa::verify(public, message, signature)
    }
}

/// XEdDSA: Ed25519-style signatures made with an X25519 private key and
/// checked against the Montgomery-form public key.
mod xeddsa {
    use super::*;

    fn hash_prefixed(prefix: Option<&[u8; 32]>, parts: &[&[u8]]) -> Scalar {
        let mut h = Sha512::new();
        if let Some(p) = prefix {
            h.update(p);
        }
        for part in parts {
            h.update(part);
        }
        Scalar::from_bytes_mod_order_wide(&h.finalize().into())
    }

    /// Edwards keypair whose public point has sign bit zero.
    fn edwards_keypair(private: &PrivateKey) -> (Scalar, CompressedEdwardsY) {
        let k = Scalar::from_bytes_mod_order(clamp_integer(private.0));
        let e = EdwardsPoint::mul_base(&k).compress();
        if e.as_bytes()[31] & 0x80 != 0 {
            let a = -k;
            (a, EdwardsPoint::mul_base(&a).compress())
        } else {
            (k, e)
        }
    }

    pub(super) fn sign(private: &PrivateKey, message: &[u8], z: &[u8; 64]) -> Signature {
        let (a, big_a) = edwards_keypair(private);
        let mut hash1_prefix = [0xffu8; 32];
        hash1_prefix[0] = 0xfe;
        let r = hash_prefixed(Some(&hash1_prefix), &[a.as_bytes(), message, z]);
        let big_r = EdwardsPoint::mul_base(&r).compress();
        let h = hash_prefixed(None, &[big_r.as_bytes(), big_a.as_bytes(), message]);
        let s = r + h * a;
        let mut sig = [0u8; 64];
        sig[..32].copy_from_slice(big_r.as_bytes());
        sig[32..].copy_from_slice(s.as_bytes());
        Signature(sig)
    }

    fn u_is_canonical(u: &[u8; 32]) -> bool {
        // p = 2^255 - 19
        if u[31] & 0x80 != 0 {
            return false;
        }
        !(u[31] == 0x7f && u[1..31].iter().all(|&b| b == 0xff) && u[0] >= 0xed)
    }

    pub(super) fn verify(public: &PublicKey, message: &[u8], signature: &Signature) -> bool {
        if !u_is_canonical(&public.0) {
            return false;
        }
        let Some(big_a) = MontgomeryPoint(public.0).to_edwards(0) else {
            return false;
        };
        let mut r_bytes = [0u8; 32];
        r_bytes.copy_from_slice(&signature.0[..32]);
        let mut s_bytes = [0u8; 32];
        s_bytes.copy_from_slice(&signature.0[32..]);
        if s_bytes[31] & 0xe0 != 0 {
            return false;
        }
        let Some(s) = Option::<Scalar>::from(Scalar::from_canonical_bytes(s_bytes)) else {
            return false;
        };
        let h = hash_prefixed(None, &[&r_bytes, big_a.compress().as_bytes(), message]);
        let check = EdwardsPoint::vartime_double_scalar_mul_basepoint(&-h, &big_a, &s);
        check.compress().as_bytes() == &r_bytes
    }
}

/// Insecure, fast provider: discrete-log "DH" modulo the Mersenne prime
/// 2^61 - 1, a SHA-512 keystream cipher with a truncated SHA-512 tag, and
/// Schnorr signatures in the same group. It honours the provider contract
/// (commutative DH, tamper-evident AEAD, verifiable signatures) and nothing
/// more. Never use it outside tests and simulations.
#[derive(Debug, Default, Clone, Copy)]
pub struct FastProvider;

const FAST_P: u64 = (1 << 61) - 1;
const FAST_G: u64 = 37;

fn mulmod(a: u64, b: u64) -> u64 {
    ((a as u128 * b as u128) % FAST_P as u128) as u64
}

fn powmod(mut base: u64, mut exp: u64) -> u64 {
    let mut acc = 1u64;
    base %= FAST_P;
    while exp > 0 {
        if exp & 1 == 1 {
            acc = mulmod(acc, base);
        }
        base = mulmod(base, base);
        exp >>= 1;
    }
    acc
}

fn fast_exponent(private: &PrivateKey) -> u64 {
    let mut w = [0u8; 8];
    w.copy_from_slice(&private.0[..8]);
    // Keep the exponent in [1, p-2].
    u64::from_le_bytes(w) % (FAST_P - 2) + 1
}

fn fast_element(public: &PublicKey) -> u64 {
    let mut w = [0u8; 8];
    w.copy_from_slice(&public.0[..8]);
    u64::from_le_bytes(w) % FAST_P
}

fn fast_keystream_xor(key: &[u8; 32], nonce: &[u8], data: &mut [u8]) {
    for (block, chunk) in data.chunks_mut(64).enumerate() {
        let mut h = Sha512::new();
        h.update(b"fast-stream");
        h.update(key);
        h.update(nonce);
        h.update((block as u64).to_be_bytes());
        let pad = h.finalize();
        for (d, p) in chunk.iter_mut().zip(pad.iter()) {
            *d ^= p;
        }
    }
}

fn fast_tag(key: &[u8; 32], nonce: &[u8], aad: &[u8], body: &[u8]) -> [u8; AEAD_TAG_LEN] {
    let mut h = Sha512::new();
    h.update(b"fast-tag");
    h.update(key);
    h.update(nonce);
    h.update((aad.len() as u64).to_be_bytes());
    h.update(aad);
    h.update(body);
    let d = h.finalize();
    let mut tag = [0u8; AEAD_TAG_LEN];
    tag.copy_from_slice(&d[..AEAD_TAG_LEN]);
    tag
}

impl CryptoProvider for FastProvider {
    fn name(&self) -> &'static str {
        "fast-insecure"
    }

    fn keypair_from_seed(&self, seed: [u8; 32]) -> Keypair {
        let private = PrivateKey(seed);
        let y = powmod(FAST_G, fast_exponent(&private));
        // Spread the group element over the whole key so reduced ring points stay uniform.
        let mut public = [0u8; 32];
        public[..8].copy_from_slice(&y.to_le_bytes());
        let tail = sha512(&y.to_le_bytes());
        public[8..].copy_from_slice(&tail[..24]);
        Keypair { public: PublicKey(public), private }
    }

    fn dh(&self, private: &PrivateKey, public: &PublicKey) -> [u8; 32] {
        let shared = powmod(fast_element(public), fast_exponent(private));
        let mut h = Sha512::new();
        h.update(b"fast-dh");
        h.update(shared.to_le_bytes());
        let d = h.finalize();
        let mut out = [0u8; 32];
        out.copy_from_slice(&d[..32]);
        out
    }

    fn kdf(&self, ikm: &[u8], label: &[u8]) -> [u8; 32] {
        let mut h = Sha512::new();
        h.update((label.len() as u64).to_be_bytes());
        h.update(label);
        h.update(ikm);
        let d = h.finalize();
        let mut out = [0u8; 32];
        out.copy_from_slice(&d[..32]);
        out
    }

    fn aead_seal(&self, key: &[u8; 32], plaintext: &[u8], aad: &[u8]) -> Vec<u8> {
        let nonce = synthetic_nonce(key, plaintext, aad);
        let mut body = plaintext.to_vec();
        fast_keystream_xor(key, &nonce, &mut body);
        let tag = fast_tag(key, &nonce, aad, &body);
        let mut out = Vec::with_capacity(AEAD_OVERHEAD + body.len());
        out.extend_from_slice(&nonce);
        out.extend_from_slice(&body);
        out.extend_from_slice(&tag);
        out
    }

    fn aead_open(&self, key: &[u8; 32], ciphertext: &[u8], aad: &[u8]) -> Result<Vec<u8>, CryptoError> {
        if ciphertext.len() < AEAD_OVERHEAD {
            return Err(CryptoError::Truncated);
        }
        let (nonce, rest) = ciphertext.split_at(AEAD_NONCE_LEN);
        let (body, tag) = rest.split_at(rest.len() - AEAD_TAG_LEN);
        if fast_tag(key, nonce, aad, body) != tag {
            return Err(CryptoError::Open);
        }
        let mut plain = body.to_vec();
        fast_keystream_xor(key, nonce, &mut plain);
        Ok(plain)
    }

    fn sign(&self, private: &PrivateKey, message: &[u8], rng: &mut dyn RngCore) -> Signature {
        let x = fast_exponent(private);
        let k = rng.next_u64() % (FAST_P - 2) + 1;
        let r = powmod(FAST_G, k);
        let public = self.keypair_from_seed(private.0).public;
        let e = fast_challenge(r, &public, message);
        let s = ((k as u128 + e as u128 * x as u128) % (FAST_P as u128 - 1)) as u64;
        let mut sig = [0u8; 64];
        sig[..8].copy_from_slice(&r.to_le_bytes());
        sig[8..16].copy_from_slice(&s.to_le_bytes());
        Signature(sig)
    }

    fn verify(&self, public: &PublicKey, message: &[u8], signature: &Signature) -> bool {
        if signature.0[16..].iter().any(|&b| b != 0) {
            return false;
        }
        let mut w = [0u8; 8];
        w.copy_from_slice(&signature.0[..8]);
        let r = u64::from_le_bytes(w);
        w.copy_from_slice(&signature.0[8..16]);
        let s = u64::from_le_bytes(w);
        if r == 0 || r >= FAST_P {
            return false;
        }
        let e = fast_challenge(r, public, message);
        powmod(FAST_G, s) == mulmod(r, powmod(fast_element(public), e))
    }
}

fn fast_challenge(r: u64, public: &PublicKey, message: &[u8]) -> u64 {
    let mut h = Sha512::new();
    h.update(r.to_le_bytes());
    h.update(public.0);
    h.update(message);
    let d = h.finalize();
    let mut w = [0u8; 8];
    w.copy_from_slice(&d[..8]);
    u64::from_le_bytes(w) % (FAST_P - 1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn providers() -> Vec<Box<dyn CryptoProvider>> {
        vec![Box::new(StandardProvider), Box::new(FastProvider)]
    }

    #[test]
    fn dh_commutes_for_many_keypairs() {
        for p in providers() {
            let mut rng = ChaCha20Rng::seed_from_u64(1);
            for _ in 0..1000 {
                let a = p.generate_keypair(&mut rng);
                let b = p.generate_keypair(&mut rng);
                assert_eq!(p.dh(&a.private, &b.public), p.dh(&b.private, &a.public), "{}", p.name());
            }
        }
    }

    #[test]
    fn x25519_matches_rfc7748_vector() {
        // RFC 7748 section 6.1.
        let alice: [u8; 32] = hex::decode("77076d0a7318a57d3c16c17251b26645df4c2f87ebc0992ab177fba51db92c2a")
            .unwrap()
            .try_into()
            .unwrap();
        let bob_pub: [u8; 32] = hex::decode("de9edb7d7b7dc1b4d35b61c2ece435373f8343c85b78674dadfc7e146f882b4f")
            .unwrap()
            .try_into()
            .unwrap();
        let kp = StandardProvider.keypair_from_seed(alice);
        assert_eq!(hex::encode(kp.public.0), "8520f0098930a754748b7ddcb43ef75a0dbf3a0d26381af4eba4a98eaa9b4e6a");
        let shared = StandardProvider.dh(&kp.private, &PublicKey(bob_pub));
        assert_eq!(hex::encode(shared), "4a5d9d5ba4ce2de1728e3bf480350f25e07e21c947d19e3376f09b3c1e161742");
    }

    #[test]
    fn aead_round_trip_and_tamper_detection() {
        for p in providers() {
            let key = [9u8; 32];
            let pt = b"attack at dawn, bring snacks";
            let aad = b"header";
            let ct = p.aead_seal(&key, pt, aad);
            assert_eq!(ct.len(), pt.len() + AEAD_OVERHEAD);
            assert_eq!(p.aead_open(&key, &ct, aad).unwrap(), pt);

            for bit in 0..ct.len() * 8 {
                let mut bad = ct.clone();
                bad[bit / 8] ^= 1 << (bit % 8);
                assert!(p.aead_open(&key, &bad, aad).is_err(), "{} ct bit {bit}", p.name());
            }
            for bit in 0..aad.len() * 8 {
                let mut bad_aad = aad.to_vec();
                bad_aad[bit / 8] ^= 1 << (bit % 8);
                assert!(p.aead_open(&key, &ct, &bad_aad).is_err(), "{} aad bit {bit}", p.name());
            }
            assert!(p.aead_open(&[8u8; 32], &ct, aad).is_err());
            assert_eq!(p.aead_open(&key, &ct[..10], aad), Err(CryptoError::Truncated));
        }
    }

    #[test]
    fn signatures_verify_and_reject_tampering() {
        for p in providers() {
            let mut rng = ChaCha20Rng::seed_from_u64(2);
            for _ in 0..50 {
                let kp = p.generate_keypair(&mut rng);
                let other = p.generate_keypair(&mut rng);
                let msg = b"signed prekey bytes";
                let sig = p.sign(&kp.private, msg, &mut rng);
                assert!(p.verify(&kp.public, msg, &sig), "{}", p.name());
                assert!(!p.verify(&kp.public, b"signed prekey bytez", &sig));
                assert!(!p.verify(&other.public, msg, &sig));
                let mut bad = sig;
                bad.0[3] ^= 0x10;
                assert!(!p.verify(&kp.public, msg, &bad));
            }
        }
    }

    #[test]
    fn kdf_separates_labels() {
        for p in providers() {
            assert_ne!(p.kdf(b"ikm", b"chain"), p.kdf(b"ikm", b"msg"));
            assert_eq!(p.kdf(b"ikm", b"chain"), p.kdf(b"ikm", b"chain"));
        }
    }
}
