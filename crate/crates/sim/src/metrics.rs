//! Run metrics, emitted as `key=value` lines in a fixed order.

use std::fmt;

/// Every metric a run reports, in output order.
pub const NAMES: &[&str] = &[
    "messages_sent",
    "messages_delivered",
    "delivery_rate",
    "latency_median_ms",
    "duplicates_suppressed",
    "send_failures",
    "pow_remines",
    "sync_sent",
    "sync_acked",
    "fell_back",
    "sync_stored_records",
    "records_stored",
    "replication_min",
    "replication_mean",
    "durability",
    "swarms_lost",
    "storage_bytes_mean",
    "storage_bytes_max",
    "blocks",
    "audits",
    "audit_failures",
    "decommissions",
    "decommissioned_honest",
    "decommissioned_cheaters",
    "cheaters",
    "cheaters_undetected",
    "cheater_detect_blocks_max",
    "refresh_attempts",
    "refresh_adopted",
    "refresh_rejected",
    "refresh_nonunanimous_adopted",
    "refresh_minority_adopted",
    "onion_requests",
    "path_builds",
    "path_failures",
    "knowledge_violations",
    "observer_plaintext_hits",
    "nodes_final",
    "swarms_final",
];

pub fn is_known(name: &str) -> bool {
    NAMES.contains(&name)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Value {
    Count(u64),
    Real(f64),
}

impl Value {
    pub fn as_f64(self) -> f64 {
        match self {
            Value::Count(n) => n as f64,
            Value::Real(x) => x,
        }
    }
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Value::Count(n) => write!(f, "{n}"),
            Value::Real(x) => write!(f, "{x:.6}"),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Metrics {
    values: Vec<(&'static str, Value)>,
}

impl Metrics {
    /// Set a metric. Panics on names missing from [`NAMES`].
    pub fn set(&mut self, name: &'static str, value: Value) {
        assert!(is_known(name), "unregistered metric {name}");
        match self.values.iter_mut().find(|(n, _)| *n == name) {
            Some(slot) => slot.1 = value,
            None => self.values.push((name, value)),
        }
    }

    pub fn count(&mut self, name: &'static str, n: u64) {
        self.set(name, Value::Count(n));
    }

    pub fn real(&mut self, name: &'static str, x: f64) {
        self.set(name, Value::Real(x));
    }

    pub fn get(&self, name: &str) -> Option<Value> {
        self.values.iter().find(|(n, _)| *n == name).map(|(_, v)| *v)
    }

    /// All metrics as `key=value` lines, in [`NAMES`] order.
    pub fn to_lines(&self) -> String {
        let mut out = String::new();
        for name in NAMES {
            if let Some(v) = self.get(name) {
                out.push_str(&format!("{name}={v}\n"));
            }
        }
        out
    }
}

/// `num / den`, or 1 when there is nothing to measure.
pub fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        1.0
    } else {
        num as f64 / den as f64
    }
}

/// Lower median of `xs`, 0 when empty.
pub fn median(mut xs: Vec<u64>) -> u64 {
    if xs.is_empty() {
        return 0;
    }
    xs.sort_unstable();
    xs[(xs.len() - 1) / 2]
}
