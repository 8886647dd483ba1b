//! Scenario files.
//!
//! ```text
//! simver 1
//! [network]
//! nodes = 50
//! clients = 10
//! duration = 60s
//! [churn]
//! at = 20s leave 30% over 10s
//! [expect]
//! expect = delivery_rate >= 1.0
//! absent = knowledge-violation
//! ```
//!
//! Lines are `key = value` under `[section]` headers; `#` starts a comment.
//! Durations take a unit: `ms`, `s`, `m` or `h`.

use std::fmt;
use std::str::FromStr;

/// `line` is 0 for whole-file problems found after parsing.
#[derive(Debug, PartialEq, Eq)]
pub struct ConfigError {
    pub line: usize,
    pub msg: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.line {
            0 => write!(f, "invalid scenario: {}", self.msg),
            n => write!(f, "line {n}: {}", self.msg),
        }
    }
}

impl std::error::Error for ConfigError {}

fn err<T>(line: usize, msg: impl Into<String>) -> Result<T, ConfigError> {
    Err(ConfigError { line, msg: msg.into() })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CryptoChoice {
    Fast,
    Standard,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ChurnAction {
    /// Remove this fraction (per mille) of live nodes, spread over `over_ms`.
    Leave {
        per_mille: u32,
        over_ms: u64,
    },
    LeaveNode(u32),
    Join(u32),
    KillClient(u32),
    ReviveClient(u32),
    Difficulty(u64),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ChurnEvent {
    pub at_ms: u64,
    pub action: ChurnAction,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Cmp {
    Ge,
    Gt,
    Le,
    Lt,
    Eq,
    Ne,
}

impl Cmp {
    pub fn holds(self, lhs: f64, rhs: f64) -> bool {
        match self {
            Cmp::Ge => lhs >= rhs,
            Cmp::Gt => lhs > rhs,
            Cmp::Le => lhs <= rhs,
            Cmp::Lt => lhs < rhs,
            Cmp::Eq => lhs == rhs,
            Cmp::Ne => lhs != rhs,
        }
    }
}

impl fmt::Display for Cmp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Cmp::Ge => ">=",
            Cmp::Gt => ">",
            Cmp::Le => "<=",
            Cmp::Lt => "<",
            Cmp::Eq => "==",
            Cmp::Ne => "!=",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Assertion {
    Metric {
        line: usize,
        metric: String,
        cmp: Cmp,
        value: f64,
    },
    /// No event-log line may contain this text.
    Absent {
        line: usize,
        pattern: String,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimConfig {
    pub seed: u64,
    pub nodes: u32,
    pub clients: u32,
    pub latency_ms: u64,
    pub jitter_ms: u64,
    pub drop_rate: f64,
    pub block_interval_ms: u64,
    pub duration_ms: u64,
    pub difficulty: u64,
    pub crypto: CryptoChoice,
    pub seed_node: u32,

    pub messages_per_client: u32,
    pub traffic_start_ms: u64,
    pub send_interval_ms: u64,
    pub ttl_secs: u64,
    pub sync: bool,
    pub poll_interval_ms: u64,
    pub listen_interval_ms: u64,
    pub refresh_interval_ms: u64,
    pub background: u32,

    pub cheaters: u32,
    pub droppers: u32,
    pub observers: u32,
    pub liars: u32,

    pub anti_entropy_ms: u64,
    pub min_failures: usize,
    pub min_reporters: usize,
    pub window_blocks: u64,

    pub churn: Vec<ChurnEvent>,
    pub assertions: Vec<Assertion>,
}

impl Default for SimConfig {
    fn default() -> Self {
        let policy = swarmnet_core::audit::DecommissionPolicy::default();
        Self {
            seed: 1,
            nodes: 50,
            clients: 10,
            latency_ms: 40,
            jitter_ms: 20,
            drop_rate: 0.0,
            block_interval_ms: 2_000,
            duration_ms: 60_000,
            difficulty: 1,
            crypto: CryptoChoice::Fast,
            seed_node: 0,
            messages_per_client: 5,
            traffic_start_ms: 5_000,
            send_interval_ms: 3_000,
            ttl_secs: 3_600,
            sync: false,
            poll_interval_ms: 2_000,
            listen_interval_ms: 500,
            refresh_interval_ms: 0,
            background: 0,
            cheaters: 0,
            droppers: 0,
            observers: 0,
            liars: 0,
            anti_entropy_ms: 10_000,
            min_failures: policy.min_failures,
            min_reporters: policy.min_reporters,
            window_blocks: policy.window_blocks,
            churn: Vec::new(),
            assertions: Vec::new(),
        }
    }
}

pub fn parse_duration(s: &str) -> Option<u64> {
    let s = s.trim();
    let split = s.find(|c: char| !c.is_ascii_digit())?;
    let (num, unit) = s.split_at(split);
    let n: u64 = num.parse().ok()?;
    let mult = match unit.trim() {
        "ms" => 1,
        "s" => 1_000,
        "m" => 60_000,
        "h" => 3_600_000,
        _ => return None,
    };
    n.checked_mul(mult)
}

fn parse_num<T: FromStr>(line: usize, key: &str, v: &str) -> Result<T, ConfigError> {
    v.parse().or_else(|_| err(line, format!("{key}: expected a number, got {v:?}")))
}

fn parse_dur(line: usize, key: &str, v: &str) -> Result<u64, ConfigError> {
    parse_duration(v).map_or_else(|| err(line, format!("{key}: expected a duration like 5s, got {v:?}")), Ok)
}

fn parse_bool(line: usize, key: &str, v: &str) -> Result<bool, ConfigError> {
    match v {
        "true" | "yes" | "on" => Ok(true),
        "false" | "no" | "off" => Ok(false),
        _ => err(line, format!("{key}: expected true or false, got {v:?}")),
    }
}

fn parse_churn(line: usize, v: &str) -> Result<ChurnEvent, ConfigError> {
    let words: Vec<&str> = v.split_whitespace().collect();
    let Some((at, rest)) = words.split_first() else {
        return err(line, "churn: empty event");
    };
    let at_ms = parse_dur(line, "at", at)?;
    let action = match rest {
        ["leave", pct, tail @ ..] if pct.ends_with('%') => {
            let p: f64 = parse_num(line, "leave", pct.trim_end_matches('%'))?;
            if !(0.0..=100.0).contains(&p) {
                return err(line, "leave: percentage must be within 0..100");
            }
            let over_ms = match tail {
                [] => 0,
                ["over", d] => parse_dur(line, "over", d)?,
                _ => return err(line, format!("churn: unexpected {:?}", tail.join(" "))),
            };
            ChurnAction::Leave { per_mille: (p * 10.0).round() as u32, over_ms }
        }
        ["leave", "node", n] => ChurnAction::LeaveNode(parse_num(line, "leave node", n)?),
        ["join", n] => ChurnAction::Join(parse_num(line, "join", n)?),
        ["kill", "client", n] => ChurnAction::KillClient(parse_num(line, "kill client", n)?),
        ["revive", "client", n] => ChurnAction::ReviveClient(parse_num(line, "revive client", n)?),
        ["difficulty", d] => {
            let d: u64 = parse_num(line, "difficulty", d)?;
            if d == 0 {
                return err(line, "difficulty must be at least 1");
            }
            ChurnAction::Difficulty(d)
        }
        _ => return err(line, format!("churn: unknown event {:?}", rest.join(" "))),
    };
    Ok(ChurnEvent { at_ms, action })
}

fn parse_expect(line: usize, v: &str) -> Result<Assertion, ConfigError> {
    let words: Vec<&str> = v.split_whitespace().collect();
    let [metric, op, value] = words[..] else {
        return err(line, "expect: want `<metric> <op> <number>`");
    };
    let cmp = match op {
        ">=" => Cmp::Ge,
        ">" => Cmp::Gt,
        "<=" => Cmp::Le,
        "<" => Cmp::Lt,
        "==" => Cmp::Eq,
        "!=" => Cmp::Ne,
        _ => return err(line, format!("expect: unknown operator {op:?}")),
    };
    if !crate::metrics::is_known(metric) {
        return err(line, format!("expect: unknown metric {metric:?}"));
    }
    Ok(Assertion::Metric { line, metric: metric.to_string(), cmp, value: parse_num(line, "expect", value)? })
}

impl SimConfig {
    pub fn parse(text: &str) -> Result<SimConfig, ConfigError> {
        let mut cfg = SimConfig::default();
        let mut section: Option<String> = None;
        let mut saw_header = false;
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            if !saw_header {
                match content.split_whitespace().collect::<Vec<_>>()[..] {
                    ["simver", "1"] => {
                        saw_header = true;
                        continue;
                    }
                    ["simver", v] => return err(line, format!("unsupported scenario version {v}")),
                    _ => return err(line, "expected `simver 1` header"),
                }
            }
            if let Some(name) = content.strip_prefix('[') {
                let Some(name) = name.strip_suffix(']') else {
                    return err(line, "unterminated section header");
                };
                match name.trim() {
                    s @ ("network" | "traffic" | "adversaries" | "audit" | "churn" | "expect") => {
                        section = Some(s.to_string())
                    }
                    other => return err(line, format!("unknown section [{other}]")),
                }
                continue;
            }
            let Some((key, value)) = content.split_once('=') else {
                return err(line, "expected `key = value`");
            };
            let (key, value) = (key.trim(), value.trim().trim_matches('"'));
            let Some(sec) = section.as_deref() else {
                return err(line, "setting outside of a section");
            };
            cfg.set(sec, key, value, line)?;
        }
        if !saw_header {
            return err(1, "expected `simver 1` header");
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn set(&mut self, section: &str, key: &str, v: &str, line: usize) -> Result<(), ConfigError> {
        match (section, key) {
            ("network", "seed") => self.seed = parse_num(line, key, v)?,
            ("network", "nodes") => self.nodes = parse_num(line, key, v)?,
            ("network", "clients") => self.clients = parse_num(line, key, v)?,
            ("network", "latency") => self.latency_ms = parse_dur(line, key, v)?,
            ("network", "jitter") => self.jitter_ms = parse_dur(line, key, v)?,
            ("network", "drop_rate") => self.drop_rate = parse_num(line, key, v)?,
            ("network", "block_interval") => self.block_interval_ms = parse_dur(line, key, v)?,
            ("network", "duration") => self.duration_ms = parse_dur(line, key, v)?,
            ("network", "difficulty") => self.difficulty = parse_num(line, key, v)?,
            ("network", "seed_node") => self.seed_node = parse_num(line, key, v)?,
            ("network", "anti_entropy") => self.anti_entropy_ms = parse_dur(line, key, v)?,
            ("network", "crypto") => {
                self.crypto = match v {
                    "fast" => CryptoChoice::Fast,
                    "standard" => CryptoChoice::Standard,
                    _ => return err(line, format!("crypto: expected fast or standard, got {v:?}")),
                }
            }
            ("traffic", "messages") => self.messages_per_client = parse_num(line, key, v)?,
            ("traffic", "start") => self.traffic_start_ms = parse_dur(line, key, v)?,
            ("traffic", "interval") => self.send_interval_ms = parse_dur(line, key, v)?,
            ("traffic", "ttl") => self.ttl_secs = parse_dur(line, key, v)? / 1_000,
            ("traffic", "sync") => self.sync = parse_bool(line, key, v)?,
            ("traffic", "poll_interval") => self.poll_interval_ms = parse_dur(line, key, v)?,
            ("traffic", "listen_interval") => self.listen_interval_ms = parse_dur(line, key, v)?,
            ("traffic", "refresh_interval") => self.refresh_interval_ms = parse_dur(line, key, v)?,
            ("traffic", "background") => self.background = parse_num(line, key, v)?,
            ("adversaries", "cheaters") => self.cheaters = parse_num(line, key, v)?,
            ("adversaries", "droppers") => self.droppers = parse_num(line, key, v)?,
            ("adversaries", "observers") => self.observers = parse_num(line, key, v)?,
            ("adversaries", "liars") => self.liars = parse_num(line, key, v)?,
            ("audit", "min_failures") => self.min_failures = parse_num(line, key, v)?,
            ("audit", "min_reporters") => self.min_reporters = parse_num(line, key, v)?,
            ("audit", "window") => self.window_blocks = parse_num(line, key, v)?,
            ("churn", "at") => self.churn.push(parse_churn(line, v)?),
            ("expect", "expect") => self.assertions.push(parse_expect(line, v)?),
            ("expect", "absent") => {
                if v.is_empty() {
                    return err(line, "absent: empty pattern");
                }
                self.assertions.push(Assertion::Absent { line, pattern: v.to_string() })
            }
            _ => return err(line, format!("unknown key {key:?} in [{section}]")),
        }
        Ok(())
    }

    fn validate(&self) -> Result<(), ConfigError> {
        let bad = |msg: &str| err(0, msg);
        if self.nodes == 0 {
            return bad("network needs at least one node");
        }
        if self.seed_node >= self.nodes {
            return bad("seed_node must be one of the initial nodes");
        }
        if !(0.0..=1.0).contains(&self.drop_rate) {
            return bad("drop_rate must be within 0..1");
        }
        if self.block_interval_ms == 0 || self.poll_interval_ms == 0 || self.listen_interval_ms == 0 {
            return bad("intervals must be positive");
        }
        if self.difficulty == 0 {
            return bad("difficulty must be at least 1");
        }
        if self.ttl_secs == 0 || self.ttl_secs > swarmnet_core::envelope::MAX_TTL_SECS {
            return bad("ttl must be within 1s..96h");
        }
        if self.cheaters + self.droppers + self.observers + self.liars >= self.nodes {
            return bad("adversaries must leave at least the seed node honest");
        }
        if self.min_failures == 0 || self.min_reporters == 0 {
            return bad("audit thresholds must be positive");
        }
        Ok(())
    }
}
