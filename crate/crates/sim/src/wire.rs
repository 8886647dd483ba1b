//! Byte encodings for requests carried inside onions and their replies.

use swarmnet_core::routing::SwarmInfo;
use swarmnet_core::store::{StoreOutcome, StoreRejection};
use swarmnet_core::{NodeId, PublicKey, RecordHash, SwarmId};

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Request {
    /// Envelope in wire form (`nonce || payload`).
    Store(Vec<u8>),
    Retrieve(PublicKey),
    Lookup(PublicKey),
    /// Hand a message to the recipient's listening node.
    SyncDeliver(PublicKey, Vec<u8>),
    /// Collect messages waiting at this listening node.
    Listen(PublicKey),
    Ping,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Response {
    Store(StoreOutcome),
    Items(Vec<Vec<u8>>),
    Swarm(SwarmInfo),
    WrongSwarm,
    Ok,
    Unknown,
}

struct Reader<'a>(&'a [u8]);

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        if self.0.len() < n {
            return None;
        }
        let (head, tail) = self.0.split_at(n);
        self.0 = tail;
        Some(head)
    }

    fn u8(&mut self) -> Option<u8> {
        self.take(1).map(|b| b[0])
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Option<u64> {
        self.take(8).map(|b| u64::from_be_bytes(b.try_into().expect("8 bytes")))
    }

    fn key(&mut self) -> Option<PublicKey> {
        self.take(32).map(|b| PublicKey(b.try_into().expect("32 bytes")))
    }

    fn rest(&mut self) -> &'a [u8] {
        std::mem::take(&mut self.0)
    }

    fn done(&self) -> bool {
        self.0.is_empty()
    }
}

impl Request {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        match self {
            Request::Store(wire) => {
                out.push(1);
                out.extend_from_slice(wire);
            }
            Request::Retrieve(pk) => {
                out.push(2);
                out.extend_from_slice(&pk.0);
            }
            Request::Lookup(pk) => {
                out.push(3);
                out.extend_from_slice(&pk.0);
            }
            Request::SyncDeliver(pk, data) => {
                out.push(4);
                out.extend_from_slice(&pk.0);
                out.extend_from_slice(data);
            }
            Request::Listen(pk) => {
                out.push(5);
                out.extend_from_slice(&pk.0);
            }
            Request::Ping => out.push(6),
        }
        out
    }

    pub fn decode(b: &[u8]) -> Option<Request> {
        let mut r = Reader(b);
        let req = match r.u8()? {
            1 => Request::Store(r.rest().to_vec()),
            2 => Request::Retrieve(r.key()?),
            3 => Request::Lookup(r.key()?),
            4 => Request::SyncDeliver(r.key()?, r.rest().to_vec()),
            5 => Request::Listen(r.key()?),
            6 => Request::Ping,
            _ => return None,
        };
        r.done().then_some(req)
    }
}

fn encode_outcome(out: &mut Vec<u8>, o: &StoreOutcome) {
    match o {
        StoreOutcome::Stored(h) => {
            out.push(0);
            out.extend_from_slice(&h.0);
        }
        StoreOutcome::Duplicate(h) => {
            out.push(1);
            out.extend_from_slice(&h.0);
        }
        StoreOutcome::Rejected(r) => {
            out.push(2);
            let (kind, arg) = match r {
                StoreRejection::PowInvalid { difficulty } => (0, *difficulty),
                StoreRejection::WrongSwarm { correct } => (1, correct.0),
                StoreRejection::TtlExceeded => (2, 0),
                StoreRejection::Expired => (3, 0),
                StoreRejection::ClockSkew => (4, 0),
                StoreRejection::Malformed => (5, 0),
            };
            out.push(kind);
            out.extend_from_slice(&arg.to_be_bytes());
        }
    }
}

fn decode_outcome(r: &mut Reader<'_>) -> Option<StoreOutcome> {
    Some(match r.u8()? {
        0 => StoreOutcome::Stored(RecordHash(r.take(32)?.try_into().ok()?)),
        1 => StoreOutcome::Duplicate(RecordHash(r.take(32)?.try_into().ok()?)),
        2 => {
            let kind = r.u8()?;
            let arg = r.u64()?;
            StoreOutcome::Rejected(match kind {
                0 => StoreRejection::PowInvalid { difficulty: arg },
                1 => StoreRejection::WrongSwarm { correct: SwarmId(arg) },
                2 => StoreRejection::TtlExceeded,
                3 => StoreRejection::Expired,
                4 => StoreRejection::ClockSkew,
                5 => StoreRejection::Malformed,
                _ => return None,
            })
        }
        _ => return None,
    })
}

impl Response {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        match self {
            Response::Store(o) => {
                out.push(1);
                encode_outcome(&mut out, o);
            }
            Response::Items(items) => {
                out.push(2);
                out.extend_from_slice(&(items.len() as u32).to_be_bytes());
                for item in items {
                    out.extend_from_slice(&(item.len() as u32).to_be_bytes());
                    out.extend_from_slice(item);
                }
            }
            Response::Swarm(info) => {
                out.push(3);
                out.extend_from_slice(&info.swarm.0.to_be_bytes());
                out.extend_from_slice(&(info.members.len() as u32).to_be_bytes());
                for m in &info.members {
                    out.extend_from_slice(&m.0.to_be_bytes());
                }
            }
            Response::WrongSwarm => out.push(4),
            Response::Ok => out.push(5),
            Response::Unknown => out.push(6),
        }
        out
    }

    pub fn decode(b: &[u8]) -> Option<Response> {
        let mut r = Reader(b);
        let resp = match r.u8()? {
            1 => Response::Store(decode_outcome(&mut r)?),
            2 => {
                let n = r.u32()? as usize;
                let mut items = Vec::with_capacity(n.min(1024));
                for _ in 0..n {
                    let len = r.u32()? as usize;
                    items.push(r.take(len)?.to_vec());
                }
                Response::Items(items)
            }
            3 => {
                let swarm = SwarmId(r.u64()?);
                let n = r.u32()? as usize;
                let members = (0..n).map(|_| r.u32().map(NodeId)).collect::<Option<Vec<_>>>()?;
                Response::Swarm(SwarmInfo { swarm, members })
            }
            4 => Response::WrongSwarm,
            5 => Response::Ok,
            6 => Response::Unknown,
            _ => return None,
        };
        r.done().then_some(resp)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn requests_round_trip() {
        let pk = PublicKey([9; 32]);
        for req in [
            Request::Store(vec![1, 2, 3]),
            Request::Retrieve(pk),
            Request::Lookup(pk),
            Request::SyncDeliver(pk, b"hi".to_vec()),
            Request::SyncDeliver(pk, Vec::new()),
            Request::Listen(pk),
            Request::Ping,
        ] {
            assert_eq!(Request::decode(&req.encode()), Some(req));
        }
        assert_eq!(Request::decode(&[]), None);
        assert_eq!(Request::decode(&[2, 0]), None);
        assert_eq!(Request::decode(&[6, 0]), None);
    }

    #[test]
    fn responses_round_trip() {
        let h = RecordHash([3; 32]);
        for resp in [
            Response::Store(StoreOutcome::Stored(h)),
            Response::Store(StoreOutcome::Duplicate(h)),
            Response::Store(StoreOutcome::Rejected(StoreRejection::PowInvalid { difficulty: 7 })),
            Response::Store(StoreOutcome::Rejected(StoreRejection::WrongSwarm { correct: SwarmId(99) })),
            Response::Store(StoreOutcome::Rejected(StoreRejection::Malformed)),
            Response::Items(vec![]),
            Response::Items(vec![vec![1], vec![], vec![2, 3]]),
            Response::Swarm(SwarmInfo { swarm: SwarmId(5), members: vec![NodeId(1), NodeId(4)] }),
            Response::WrongSwarm,
            Response::Ok,
            Response::Unknown,
        ] {
            assert_eq!(Response::decode(&resp.encode()), Some(resp));
        }
        assert_eq!(Response::decode(&[2, 0, 0, 0, 1]), None);
        assert_eq!(Response::decode(&[9]), None);
    }
}
