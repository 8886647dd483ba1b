//! Deterministic discrete-event simulator for swarmnet deployments.
//!
//! A run is fully determined by its [`SimConfig`]: the same scenario and seed
//! always produce byte-identical event logs.

mod client;
pub mod metrics;
mod report;
pub mod scenario;
pub mod wire;
pub mod world;

use metrics::Metrics;
use scenario::{Assertion, SimConfig};
use swarmnet_core::NodeId;
use world::World;

/// Outcome of one `expect` or `absent` line.
#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub line: usize,
    pub description: String,
    pub passed: bool,
}

#[derive(Clone, Debug)]
pub struct SimOutput {
    /// One event per line, prefixed with `t=<ms>`.
    pub events: String,
    /// Every hop observation, one per line, tagged with its request trace.
    pub observations: String,
    pub ledger_csv: String,
    pub metrics: Metrics,
    pub checks: Vec<Check>,
}

impl SimOutput {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

fn evaluate(assertions: &[Assertion], metrics: &Metrics, events: &str) -> Vec<Check> {
    assertions
        .iter()
        .map(|a| match a {
            Assertion::Metric { line, metric, cmp, value } => {
                let actual = metrics.get(metric);
                let passed = actual.is_some_and(|v| cmp.holds(v.as_f64(), *value));
                let shown = actual.map_or("missing".to_string(), |v| v.to_string());
                Check { line: *line, description: format!("{metric} {cmp} {value} (actual {shown})"), passed }
            }
            Assertion::Absent { line, pattern } => {
                let hits = events.lines().filter(|l| l.contains(pattern.as_str())).count();
                Check { line: *line, description: format!("absent {pattern:?} ({hits} matches)"), passed: hits == 0 }
            }
        })
        .collect()
}

fn simulate(cfg: SimConfig) -> World {
    let mut world = World::new(cfg);
    world.run();
    world
}

/// Run a scenario to completion.
pub fn run(cfg: SimConfig) -> SimOutput {
    let assertions = cfg.assertions.clone();
    let mut world = simulate(cfg);
    let metrics = world.report();
    let mut events = world.log.join("\n");
    events.push('\n');
    let observations: String = world.observations.iter().map(|(trace, obs)| format!("{obs}, t{trace}\n")).collect();
    let checks = evaluate(&assertions, &metrics, &events);
    SimOutput { events, observations, ledger_csv: world.ledger.to_csv(), metrics, checks }
}

/// Run a scenario and describe one node's final state, or `None` if it never existed.
pub fn inspect(cfg: SimConfig, node: u32) -> Option<String> {
    let world = simulate(cfg);
    let id = NodeId(node);
    let n = world.nodes.get(&id)?;
    let mut out = String::new();
    out.push_str(&format!("node n{id}\n"));
    out.push_str(&format!("pubkey {}\n", n.keys.public));
    out.push_str(&format!("profile {}\n", n.profile));
    out.push_str(&format!("alive {}\n", n.alive));
    match world.registry.swarm_of(id) {
        Some(s) => out.push_str(&format!("swarm {s}\n")),
        None => out.push_str("swarm none\n"),
    }
    out.push_str(&format!("records {}\n", n.store.len()));
    out.push_str(&format!("bytes {}\n", n.store.size_bytes()));
    let failures = world
        .ledger
        .entries()
        .iter()
        .filter(|e| e.tested == id && e.result == swarmnet_core::audit::TestResult::Fail)
        .count();
    out.push_str(&format!("failed_audits {failures}\n"));
    match world.ledger.decommissioned().get(&id) {
        Some(h) => out.push_str(&format!("decommissioned_at {h}\n")),
        None => out.push_str("decommissioned_at none\n"),
    }
    Some(out)
}
