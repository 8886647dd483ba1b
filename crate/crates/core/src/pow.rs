//! Proof-of-work message admission.
//!
//! A sender searches for a nonce such that
//! `H = SHA512(SHA512(P) || nonce_be64)` has its first 8 bytes, read as a
//! big-endian integer, below
//!
//! ```text
//! threshold = floor( (2^64 - 1) / ( D * (L + ttl * L / (2^16 - 1)) ) )
//! ```
//!
//! where `P` is the envelope payload, `D` the network difficulty, `ttl` the
//! requested lifetime in seconds and `L` the ciphertext length. Longer-lived
//! and larger messages need more work.

use sha2::{Digest, Sha512};
use thiserror::Error;

use crate::envelope::{encode_payload, Envelope, MAX_TTL_SECS};
use crate::keys::PublicKey;

/// Default cap on nonces tried per [`mine`] call.
pub const DEFAULT_ATTEMPT_CAP: u64 = 1 << 24;

/// Accepted distance between a message timestamp and the validator's clock.
pub const CLOCK_SKEW_MS: u64 = 10 * 60 * 1000;

const TTL_SCALE: u128 = (1 << 16) - 1;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PowError {
    #[error("difficulty must be at least 1")]
    ZeroDifficulty,
    #[error("ciphertext must not be empty")]
    EmptyCiphertext,
    #[error("ttl {0}s exceeds the 96 hour cap")]
    TtlExceeded(u64),
    #[error("threshold 0 can never be met")]
    ZeroThreshold,
    #[error("no nonce found in {attempts} attempts; resume at {next_nonce}")]
    Exhausted { attempts: u64, next_nonce: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PowParams {
    pub difficulty: u64,
    pub ttl_secs: u64,
    pub length: u64,
}

impl PowParams {
    pub fn new(difficulty: u64, ttl_secs: u64, length: u64) -> Result<Self, PowError> {
        if difficulty == 0 {
            return Err(PowError::ZeroDifficulty);
        }
        if length == 0 {
            return Err(PowError::EmptyCiphertext);
        }
        if ttl_secs > MAX_TTL_SECS {
            return Err(PowError::TtlExceeded(ttl_secs));
        }
        Ok(Self { difficulty, ttl_secs, length })
    }

    pub fn for_envelope(envelope: &Envelope, difficulty: u64) -> Result<Self, PowError> {
        Self::new(difficulty, envelope.ttl_secs, envelope.ciphertext.len() as u64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PowResult {
    pub nonce: u64,
    pub hash_head: u64,
    pub threshold: u64,
    pub attempts: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RejectReason {
    InsufficientWork,
    TtlExceeded,
    ClockSkew,
    EmptyCiphertext,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Accepted,
    /// Carries the validator's current difficulty so the sender can re-mine.
    Rejected {
        reason: RejectReason,
        difficulty: u64,
    },
}

impl Verdict {
    pub fn is_accepted(&self) -> bool {
        matches!(self, Verdict::Accepted)
    }
}

/// The bytes that get hashed: `ttl || timestamp || pk || C`.
pub fn build_payload(
    ttl_secs: u64,
    timestamp_ms: u64,
    recipient: &PublicKey,
    ciphertext: &[u8],
) -> Result<Vec<u8>, PowError> {
    if ciphertext.is_empty() {
        return Err(PowError::EmptyCiphertext);
    }
    Ok(encode_payload(ttl_secs, timestamp_ms, recipient, ciphertext))
}

/// Exact integer evaluation: `floor((2^64-1) * 65535 / (D * L * (65535 + ttl)))`.
fn raw_threshold(difficulty: u64, ttl_secs: u64, length: u64) -> u64 {
    let numerator = u64::MAX as u128 * TTL_SCALE;
    let denominator =
        (difficulty as u128).checked_mul(length as u128).and_then(|d| d.checked_mul(TTL_SCALE + ttl_secs as u128));
    match denominator {
        Some(0) => u64::MAX,
        // The quotient is at most 2^64 - 1 because the denominator is at least 65535.
        Some(d) => (numerator / d) as u64,
        // Denominator beyond 2^128 dwarfs the 2^80 numerator.
        None => 0,
    }
}

pub fn compute_threshold(params: &PowParams) -> u64 {
    raw_threshold(params.difficulty, params.ttl_secs, params.length)
}

pub fn payload_digest(payload: &[u8]) -> [u8; 64] {
    Sha512::digest(payload).into()
}

/// First 8 bytes of `SHA512(inner || nonce_be64)` as a big-endian integer.
pub fn hash_head(inner: &[u8; 64], nonce: u64) -> u64 {
    let mut h = Sha512::new();
    h.update(inner);
    h.update(nonce.to_be_bytes());
    let d = h.finalize();
    u64::from_be_bytes(d[..8].try_into().expect("8 bytes"))
}

/// Smallest nonce at or after `start_nonce` meeting `threshold`, trying at most `cap` nonces.
pub fn mine(payload: &[u8], threshold: u64, start_nonce: u64, cap: u64) -> Result<PowResult, PowError> {
    if threshold == 0 {
        return Err(PowError::ZeroThreshold);
    }
    let inner = payload_digest(payload);
    let mut nonce = start_nonce;
    for attempt in 1..=cap {
        let head = hash_head(&inner, nonce);
        if head < threshold {
            return Ok(PowResult { nonce, hash_head: head, threshold, attempts: attempt });
        }
        nonce = nonce.wrapping_add(1);
    }
    Err(PowError::Exhausted { attempts: cap, next_nonce: nonce })
}

/// Mine a nonce for `envelope` in place.
pub fn mine_envelope(envelope: &mut Envelope, difficulty: u64, cap: u64) -> Result<PowResult, PowError> {
    let threshold = compute_threshold(&PowParams::for_envelope(envelope, difficulty)?);
    let result = mine(&envelope.payload(), threshold, 0, cap)?;
    envelope.nonce = result.nonce;
    Ok(result)
}

/// Whether the envelope's nonce meets the threshold at `difficulty`; nothing else is checked.
pub fn has_valid_work(envelope: &Envelope, difficulty: u64) -> bool {
    let threshold = raw_threshold(difficulty.max(1), envelope.ttl_secs, envelope.ciphertext.len() as u64);
    hash_head(&payload_digest(&envelope.payload()), envelope.nonce) < threshold
}

/// Validator-side check of work, TTL cap and timestamp freshness.
pub fn verify(envelope: &Envelope, difficulty: u64, now_ms: u64) -> Verdict {
    let reject = |reason| Verdict::Rejected { reason, difficulty };
    if envelope.ttl_secs > MAX_TTL_SECS {
        return reject(RejectReason::TtlExceeded);
    }
    if envelope.ciphertext.is_empty() {
        return reject(RejectReason::EmptyCiphertext);
    }
    if envelope.timestamp_ms.abs_diff(now_ms) > CLOCK_SKEW_MS {
        return reject(RejectReason::ClockSkew);
    }
    if has_valid_work(envelope, difficulty) {
        Verdict::Accepted
    } else {
        reject(RejectReason::InsufficientWork)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use num_bigint::BigUint;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Independent big-integer evaluation keeping the ttl term as an exact fraction.
    fn oracle_threshold(d: u64, ttl: u64, l: u64) -> BigUint {
        let num = (BigUint::from(1u8) << 64u32) - 1u32;
        let scale = BigUint::from(65535u32);
        // (2^64-1) / (D (L + ttl L / scale)) = (2^64-1) scale / (D (L scale + ttl L))
        let den = BigUint::from(d) * (BigUint::from(l) * &scale + BigUint::from(ttl) * BigUint::from(l));
        num * scale / den
    }

    fn p(d: u64, ttl: u64, l: u64) -> u64 {
        compute_threshold(&PowParams::new(d, ttl, l).unwrap())
    }

    #[test]
    fn threshold_examples() {
        assert_eq!(p(1, 0, 1), 18446744073709551615);
        assert_eq!(p(10, 0, 100), 18446744073709551);
        assert_eq!(p(1, 65535, 100), 92233720368547758);
        assert_eq!(BigUint::from(p(1, 65535, 100)), oracle_threshold(1, 65535, 100));
    }

    #[test]
    fn threshold_matches_bigint_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..5000 {
            let d = if rng.gen_bool(0.1) { rng.gen::<u64>().max(1) } else { rng.gen_range(1..100_000) };
            let ttl = rng.gen_range(0..=MAX_TTL_SECS);
            let l = rng.gen_range(1..70_000);
            assert_eq!(BigUint::from(p(d, ttl, l)), oracle_threshold(d, ttl, l), "D={d} ttl={ttl} L={l}");
        }
        // Saturated denominator.
        assert_eq!(p(u64::MAX, MAX_TTL_SECS, u64::MAX), 0);
    }

    #[test]
    fn params_validation() {
        assert_eq!(PowParams::new(0, 1, 1), Err(PowError::ZeroDifficulty));
        assert_eq!(PowParams::new(1, 1, 0), Err(PowError::EmptyCiphertext));
        assert_eq!(PowParams::new(1, MAX_TTL_SECS + 1, 1), Err(PowError::TtlExceeded(MAX_TTL_SECS + 1)));
    }

    #[test]
    fn payload_examples() {
        let payload = build_payload(0, 0, &PublicKey::ZERO, &[0]).unwrap();
        assert_eq!(payload.len(), 50);
        assert!(payload.iter().enumerate().all(|(i, &b)| b == if i == 16 { 5 } else { 0 }));
        assert_eq!(payload, build_payload(0, 0, &PublicKey::ZERO, &[0]).unwrap());
        assert_eq!(build_payload(0, 0, &PublicKey::ZERO, &[]), Err(PowError::EmptyCiphertext));
    }

    /// Golden vectors produced by an independent Python script (hashlib) running the
    /// same double-hash search.
    #[test]
    fn golden_vectors() {
        let r = mine(b"abc", 1 << 60, 0, DEFAULT_ATTEMPT_CAP).unwrap();
        assert_eq!((r.nonce, r.hash_head), (0, 865555328809391854));

        let payload = build_payload(3600, 1_700_000_000_000, &PublicKey::ZERO, b"hello swarm").unwrap();
        assert_eq!(
            hex::encode(&payload),
            "0000000000000e100000018bcfe5680005000000000000000000000000000000000000000000000000000000000000000068656c6c6f20737761726d"
        );
        let t1 = p(1, 3600, 11);
        assert_eq!(t1, 1589653146177183593);
        let r = mine(&payload, t1, 0, DEFAULT_ATTEMPT_CAP).unwrap();
        assert_eq!((r.nonce, r.hash_head, r.attempts), (7, 891692600990476857, 8));

        let t1000 = p(1000, 3600, 11);
        assert_eq!(t1000, 1589653146177183);
        let r = mine(&payload, t1000, 0, DEFAULT_ATTEMPT_CAP).unwrap();
        assert_eq!((r.nonce, r.hash_head), (6587, 910299190065573));
    }

    #[test]
    fn mine_returns_smallest_qualifying_nonce() {
        let payload = b"smallest nonce";
        let threshold = 1 << 58;
        let r = mine(payload, threshold, 0, DEFAULT_ATTEMPT_CAP).unwrap();
        let inner = payload_digest(payload);
        assert!((0..r.nonce).all(|n| hash_head(&inner, n) >= threshold));
        let resumed = mine(payload, threshold, r.nonce + 1, DEFAULT_ATTEMPT_CAP).unwrap();
        assert!(resumed.nonce > r.nonce);
    }

    #[test]
    fn exhausted_reports_resume_point() {
        let err = mine(b"x", 1, 10, 5).unwrap_err();
        assert_eq!(err, PowError::Exhausted { attempts: 5, next_nonce: 15 });
        assert_eq!(mine(b"x", 0, 0, 5).unwrap_err(), PowError::ZeroThreshold);
    }

    fn mined(ttl: u64, d: u64) -> Envelope {
        let mut e = Envelope::new(PublicKey([7; 32]), ttl, 1_000_000, 0, b"payload bytes".to_vec()).unwrap();
        mine_envelope(&mut e, d, DEFAULT_ATTEMPT_CAP).unwrap();
        e
    }

    #[test]
    fn verify_accepts_and_rejects() {
        let e = mined(3600, 50);
        assert_eq!(verify(&e, 50, 1_000_000), Verdict::Accepted);
        // Golden envelope mined at D=1000: head 910299190065573 is above the D=2000 threshold.
        let golden = Envelope::new(PublicKey::ZERO, 3600, 1_700_000_000_000, 6587, b"hello swarm".to_vec()).unwrap();
        assert!(verify(&golden, 1000, 1_700_000_000_000).is_accepted());
        assert!(910299190065573 >= p(2000, 3600, 11));
        assert_eq!(
            verify(&golden, 2000, 1_700_000_000_000),
            Verdict::Rejected { reason: RejectReason::InsufficientWork, difficulty: 2000 }
        );
        assert_eq!(
            verify(&e, 50, 1_000_000 + CLOCK_SKEW_MS + 1),
            Verdict::Rejected { reason: RejectReason::ClockSkew, difficulty: 50 }
        );
    }

    #[test]
    fn ttl_cap_is_exact() {
        let ok = mined(96 * 3600, 1);
        assert!(verify(&ok, 1, 1_000_000).is_accepted());
        let mut over = Envelope { ttl_secs: 97 * 3600, ..ok.clone() };
        over.nonce = mine(&over.payload(), p(1, MAX_TTL_SECS, over.ciphertext.len() as u64), 0, DEFAULT_ATTEMPT_CAP)
            .unwrap()
            .nonce;
        assert_eq!(verify(&over, 1, 1_000_000), Verdict::Rejected { reason: RejectReason::TtlExceeded, difficulty: 1 });
    }

    #[test]
    fn single_bit_mutations_fail() {
        let e = mined(600, 2000);
        let wire = e.to_wire();
        let mut passes = 0;
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..100 {
            let mut bytes = wire.clone();
            // Leave the nonce alone; flip a bit in ttl, timestamp, key or ciphertext.
            let bit = rng.gen_range(64..bytes.len() * 8);
            bytes[bit / 8] ^= 1 << (bit % 8);
            if let Ok(m) = Envelope::from_wire(&bytes) {
                if verify(&m, 2000, m.timestamp_ms).is_accepted() {
                    passes += 1;
                }
            }
        }
        assert_eq!(passes, 0);
    }

    #[test]
    fn hash_head_roughly_uniform() {
        let inner = payload_digest(b"uniformity");
        let mut buckets = [0u64; 16];
        for n in 0..10_000 {
            buckets[(hash_head(&inner, n) >> 60) as usize] += 1;
        }
        let expected = 10_000.0 / 16.0;
        let chi2: f64 = buckets.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
        // 15 degrees of freedom: P(chi2 > 60) is about 1e-7.
        assert!(chi2 < 60.0, "chi2 = {chi2}");
    }

    proptest! {
        #[test]
        fn threshold_monotone(d in 1u64..1000, t in 0u64..MAX_TTL_SECS, l in 1u64..100_000,
                              dd in 0u64..1000, dt in 0u64..1000, dl in 0u64..1000) {
            let t2 = (t + dt).min(MAX_TTL_SECS);
            prop_assert!(p(d, t, l) >= p(d + dd, t2, l + dl));
        }

        #[test]
        fn mine_verify_round_trip(c in proptest::collection::vec(any::<u8>(), 1..64), ttl in 0..MAX_TTL_SECS, ts in 0u64..1 << 50) {
            let mut e = Envelope::new(PublicKey([1; 32]), ttl, ts, 0, c).unwrap();
            mine_envelope(&mut e, 1, DEFAULT_ATTEMPT_CAP).unwrap();
            prop_assert!(verify(&e, 1, ts).is_accepted());
        }
    }
}
