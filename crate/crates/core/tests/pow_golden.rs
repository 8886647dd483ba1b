use std::fs;
use std::path::Path;

use swarmnet_core::pow::{self, PowParams, Verdict};
use swarmnet_core::Envelope;

struct Vector {
    payload: Vec<u8>,
    difficulty: u64,
    ttl: u64,
    nonce: u64,
    head: u64,
}

fn vectors() -> Vec<Vector> {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data/pow_golden.txt");
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .filter(|l| !l.starts_with('#') && !l.trim().is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split(',').map(str::trim).collect();
            Vector {
                payload: hex::decode(f[0]).unwrap(),
                difficulty: f[1].parse().unwrap(),
                ttl: f[2].parse().unwrap(),
                nonce: f[3].parse().unwrap(),
                head: f[4].parse().unwrap(),
            }
        })
        .collect()
}

#[test]
fn mining_reproduces_every_vector() {
    let vs = vectors();
    assert!(vs.len() >= 5);
    for v in vs {
        let env = Envelope::parse_payload(&v.payload, 0).unwrap();
        assert_eq!(env.ttl_secs, v.ttl);
        let threshold = pow::compute_threshold(&PowParams::for_envelope(&env, v.difficulty).unwrap());
        let found = pow::mine(&v.payload, threshold, 0, pow::DEFAULT_ATTEMPT_CAP).unwrap();
        assert_eq!((found.nonce, found.hash_head), (v.nonce, v.head), "difficulty {}", v.difficulty);
        assert_eq!(pow::hash_head(&pow::payload_digest(&v.payload), v.nonce), v.head);
    }
}

#[test]
fn vectors_survive_the_wire_and_verify() {
    for v in vectors() {
        let env = Envelope::parse_payload(&v.payload, v.nonce).unwrap();
        let back = Envelope::from_wire(&env.to_wire()).unwrap();
        assert_eq!(back, env);
        assert_eq!(pow::verify(&back, v.difficulty, env.timestamp_ms), Verdict::Accepted);
        // Any earlier nonce is below the first qualifying one.
        if v.nonce > 0 {
            let earlier = Envelope { nonce: v.nonce - 1, ..env.clone() };
            assert!(!pow::verify(&earlier, v.difficulty, env.timestamp_ms).is_accepted());
        }
    }
}

#[test]
fn tampered_ciphertext_loses_its_work() {
    let v = &vectors()[1];
    let mut env = Envelope::parse_payload(&v.payload, v.nonce).unwrap();
    env.ciphertext[0] ^= 1;
    assert!(!pow::has_valid_work(&env, v.difficulty));
}
