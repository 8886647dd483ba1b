//! Identifier arithmetic on the swarm ring.
//!
//! Swarm ids and reduced public keys live on a wrapping number line of size
//! `M` (default `2^64 - 1`): valid values are `0..M`, incrementing `M - 1`
//! gives `0`, and `M` itself is reserved as the "unknown swarm" sentinel.
//! The ring size is a parameter so small rings can be checked exhaustively.

use std::collections::BTreeSet;
use std::fmt;

use thiserror::Error;

use crate::keys::PublicKey;

/// Default ring size, `2^64 - 1`.
pub const DEFAULT_RING_SIZE: u64 = u64::MAX;

/// A public key reduced onto the ring.
pub type RingPoint = u64;

#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Debug)]
pub struct SwarmId(pub u64);

impl SwarmId {
    /// Sentinel meaning "swarm not yet known" on the default ring.
    pub const UNKNOWN: SwarmId = SwarmId(u64::MAX);

    pub fn is_sentinel(self) -> bool {
        self == Self::UNKNOWN
    }
}

impl fmt::Display for SwarmId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RingError {
    #[error("{0} is the sentinel or outside the ring")]
    InvalidPoint(u64),
    #[error("every identifier on the ring is taken")]
    RingFull,
    #[error("no swarms to assign to")]
    NoSwarms,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Ring {
    size: u64,
}

impl Default for Ring {
    fn default() -> Self {
        Self { size: DEFAULT_RING_SIZE }
    }
}

impl Ring {
    /// A ring with `size` valid points `0..size`; `size` is the sentinel.
    pub fn with_size(size: u64) -> Self {
        assert!(size >= 1, "ring needs at least one point");
        Self { size }
    }

    pub fn size(&self) -> u64 {
        self.size
    }

    pub fn sentinel(&self) -> u64 {
        self.size
    }

    fn check(&self, p: u64) -> Result<u64, RingError> {
        if p >= self.size {
            Err(RingError::InvalidPoint(p))
        } else {
            Ok(p)
        }
    }

    /// Increments needed to walk forward from `a` to `b`; a full lap when equal.
    fn forward(&self, a: u64, b: u64) -> u64 {
        if b > a {
            b - a
        } else {
            self.size - (a - b)
        }
    }

    /// Shorter way round between two points. Equal points are a full lap apart.
    pub fn distance(&self, a: u64, b: u64) -> Result<u64, RingError> {
        let (a, b) = (self.check(a)?, self.check(b)?);
        if a == b {
            return Ok(self.size);
        }
        Ok(self.forward(a, b).min(self.forward(b, a)))
    }

    /// Like [`Ring::distance`] but an exact hit counts as zero.
    fn key_distance(&self, k: u64, s: u64) -> u64 {
        if k == s {
            0
        } else {
            self.forward(k, s).min(self.forward(s, k))
        }
    }

    /// Id for a new swarm: midpoint of the largest forward gap between
    /// neighbouring swarms, earliest gap start on ties. Genesis gets 0.
    pub fn next_swarm_id(&self, existing: &BTreeSet<SwarmId>) -> Result<SwarmId, RingError> {
        let ids: Vec<u64> = existing.iter().map(|s| self.check(s.0)).collect::<Result<_, _>>()?;
        let Some(&first) = ids.first() else {
            return Ok(SwarmId(0));
        };
        if ids.len() as u64 == self.size {
            return Err(RingError::RingFull);
        }
        let mut best_start = first;
        let mut best_gap = 0u64;
        for (i, &start) in ids.iter().enumerate() {
            let end = ids.get(i + 1).copied().unwrap_or(first);
            let gap = self.forward(start, end);
            if gap > best_gap {
                best_gap = gap;
                best_start = start;
            }
        }
        let offset = best_gap / 2;
        Ok(SwarmId(if offset < self.size - best_start {
            best_start + offset
        } else {
            offset - (self.size - best_start)
        }))
    }

    /// XOR-fold the four big-endian 64-bit words of the key, reduced mod the ring size.
    pub fn reduce_pubkey(&self, pk: &PublicKey) -> RingPoint {
        let folded =
            pk.0.chunks_exact(8)
                .map(|w| u64::from_be_bytes(w.try_into().expect("8-byte chunk")))
                .fold(0u64, |acc, w| acc ^ w);
        folded % self.size
    }

    /// Nearest swarm to `k`; an exact hit wins, ties go to the lower id.
    pub fn assign_key(&self, k: RingPoint, swarms: &BTreeSet<SwarmId>) -> Result<SwarmId, RingError> {
        let k = self.check(k)?;
        let (Some(first), Some(last)) = (swarms.first(), swarms.last()) else {
            return Err(RingError::NoSwarms);
        };
        let succ = swarms.range(SwarmId(k)..).next().unwrap_or(first);
        let pred = swarms.range(..=SwarmId(k)).next_back().unwrap_or(last);
        let (ds, dp) = (self.key_distance(k, succ.0), self.key_distance(k, pred.0));
        Ok(match ds.cmp(&dp) {
            std::cmp::Ordering::Less => *succ,
            std::cmp::Ordering::Greater => *pred,
            std::cmp::Ordering::Equal => (*succ).min(*pred),
        })
    }

    pub fn assign_pubkey(&self, pk: &PublicKey, swarms: &BTreeSet<SwarmId>) -> Result<SwarmId, RingError> {
        self.assign_key(self.reduce_pubkey(pk), swarms)
    }

    /// Neighbours of `id` among `swarms` (predecessor, successor), excluding `id` itself.
    pub fn neighbours(&self, id: SwarmId, swarms: &BTreeSet<SwarmId>) -> Option<(SwarmId, SwarmId)> {
        let others: Vec<SwarmId> = swarms.iter().copied().filter(|s| *s != id).collect();
        if others.is_empty() {
            return None;
        }
        let succ = others.iter().copied().find(|s| *s > id).unwrap_or(others[0]);
        let pred = others.iter().rev().copied().find(|s| *s < id).unwrap_or(*others.last().unwrap());
        Some((pred, succ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn set(ids: &[u64]) -> BTreeSet<SwarmId> {
        ids.iter().map(|&i| SwarmId(i)).collect()
    }

    /// Count increments one at a time, wrapping after `size - 1`.
    fn brute_force_distance(size: u64, a: u64, b: u64) -> u64 {
        let walk = |from: u64, to: u64| {
            let mut steps = 0;
            let mut cur = from;
            loop {
                cur = if cur == size - 1 { 0 } else { cur + 1 };
                steps += 1;
                if cur == to {
                    return steps;
                }
            }
        };
        if a == b {
            walk(a, a)
        } else {
            walk(a, b).min(walk(b, a))
        }
    }

    #[test]
    fn distance_examples() {
        let r = Ring::default();
        assert_eq!(r.distance(0, 5), Ok(5));
        assert_eq!(r.distance(42, 42), Ok(18446744073709551615));
        assert_eq!(r.distance(u64::MAX - 1, 1), Ok(2));
        assert_eq!(r.distance(u64::MAX, 1), Err(RingError::InvalidPoint(u64::MAX)));
    }

    #[test]
    fn distance_matches_increment_counting_on_small_rings() {
        for size in 1..=20u64 {
            let r = Ring::with_size(size);
            for a in 0..size {
                for b in 0..size {
                    assert_eq!(r.distance(a, b).unwrap(), brute_force_distance(size, a, b), "size {size} {a} {b}");
                }
            }
        }
        // The wrap example on a 15-point ring: 13 -> 14 -> 0 -> 1.
        assert_eq!(Ring::with_size(15).distance(13, 1), Ok(3));
    }

    #[test]
    fn next_swarm_id_examples() {
        let r = Ring::default();
        assert_eq!(r.next_swarm_id(&BTreeSet::new()), Ok(SwarmId(0)));
        assert_eq!(r.next_swarm_id(&set(&[0])), Ok(SwarmId(9223372036854775807)));
        assert_eq!(r.next_swarm_id(&set(&[0, 9223372036854775807])), Ok(SwarmId(13835058055282163711)));
        assert_eq!(Ring::with_size(15).next_swarm_id(&set(&[0])), Ok(SwarmId(7)));
        assert_eq!(r.next_swarm_id(&set(&[u64::MAX])), Err(RingError::InvalidPoint(u64::MAX)));
        assert_eq!(Ring::with_size(3).next_swarm_id(&set(&[0, 1, 2])), Err(RingError::RingFull));
    }

    #[test]
    fn next_swarm_id_wraps_past_zero() {
        // Largest gap is 7 -> 5 across the wrap (size 12): midpoint is 0.
        let r = Ring::with_size(12);
        assert_eq!(r.next_swarm_id(&set(&[5, 7])), Ok(SwarmId(0)));
        let r = Ring::default();
        // Gap (2^64 - 11) -> 2^63 spans 2^63 + 10 points; half of it lands past the end.
        assert_eq!(r.next_swarm_id(&set(&[u64::MAX - 10, 1 << 63])), Ok(SwarmId((1 << 62) - 5)));
    }

    #[test]
    fn reduce_pubkey_examples() {
        let r = Ring::default();
        assert_eq!(r.reduce_pubkey(&PublicKey::ZERO), 0);
        let mut k = [0u8; 32];
        k[0] = 1;
        assert_eq!(r.reduce_pubkey(&PublicKey(k)), 72057594037927936);
        let mut ones = [0u8; 32];
        ones[..8].fill(0xff);
        assert_eq!(r.reduce_pubkey(&PublicKey(ones)), 0);
        // Two words cancel under XOR.
        let mut twin = [0u8; 32];
        twin[7] = 9;
        twin[15] = 9;
        assert_eq!(r.reduce_pubkey(&PublicKey(twin)), 0);
    }

    fn linear_nearest(r: &Ring, k: u64, swarms: &BTreeSet<SwarmId>) -> SwarmId {
        let mut best = None;
        for s in swarms {
            let d = if s.0 == k { 0 } else { r.distance(k, s.0).unwrap() };
            match best {
                Some((bd, _)) if bd <= d => {}
                _ => best = Some((d, *s)),
            }
        }
        best.unwrap().1
    }

    #[test]
    fn assign_key_examples() {
        let r = Ring::default();
        assert_eq!(r.assign_key(123456, &set(&[0])), Ok(SwarmId(0)));
        let two = set(&[0, 100]);
        assert_eq!(r.assign_key(30, &two), Ok(SwarmId(0)));
        assert_eq!(r.assign_key(70, &two), Ok(SwarmId(100)));
        assert_eq!(r.assign_key(50, &two), Ok(SwarmId(0)));
        assert_eq!(r.assign_key(100, &two), Ok(SwarmId(100)));
        assert_eq!(r.assign_key(5, &BTreeSet::new()), Err(RingError::NoSwarms));
    }

    #[test]
    fn assign_key_matches_linear_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for size in [7u64, 64, 1000, DEFAULT_RING_SIZE] {
            let r = Ring::with_size(size);
            for _ in 0..200 {
                let n = rng.gen_range(1..8);
                let swarms: BTreeSet<SwarmId> = (0..n).map(|_| SwarmId(rng.gen_range(0..size))).collect();
                for _ in 0..20 {
                    let k = rng.gen_range(0..size);
                    assert_eq!(r.assign_key(k, &swarms).unwrap(), linear_nearest(&r, k, &swarms));
                }
            }
        }
    }

    #[test]
    fn neighbours_wrap() {
        let r = Ring::default();
        let s = set(&[5, 10, 20]);
        assert_eq!(r.neighbours(SwarmId(5), &s), Some((SwarmId(20), SwarmId(10))));
        assert_eq!(r.neighbours(SwarmId(20), &s), Some((SwarmId(10), SwarmId(5))));
        assert_eq!(r.neighbours(SwarmId(5), &set(&[5])), None);
    }

    proptest! {
        #[test]
        fn distance_is_symmetric(a in 0..u64::MAX, b in 0..u64::MAX) {
            let r = Ring::default();
            prop_assert_eq!(r.distance(a, b), r.distance(b, a));
        }

        #[test]
        fn new_swarm_disturbs_at_most_two(ids in proptest::collection::btree_set(0..u64::MAX, 1..12), seed in any::<u64>()) {
            let r = Ring::default();
            let before: BTreeSet<SwarmId> = ids.into_iter().map(SwarmId).collect();
            let mut after = before.clone();
            after.insert(r.next_swarm_id(&before).unwrap());
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut disturbed = BTreeSet::new();
            for _ in 0..1000 {
                let k = rng.gen_range(0..u64::MAX);
                let old = r.assign_key(k, &before).unwrap();
                if r.assign_key(k, &after).unwrap() != old {
                    disturbed.insert(old);
                }
            }
            prop_assert!(disturbed.len() <= 2);
        }
    }
}
