use std::collections::BTreeSet;
use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use swarmnet_core::envelope::Envelope;
use swarmnet_core::pow::{self, PowParams};
use swarmnet_core::{PublicKey, Ring, SwarmId};
use swarmnet_sim::scenario::SimConfig;

#[derive(Parser)]
#[command(name = "swarmnet", version, about = "Swarm storage network simulator and protocol tools")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario and check its assertions.
    Simulate {
        #[arg(long)]
        scenario: PathBuf,
        /// Overrides the scenario's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Write metrics here instead of stdout.
        #[arg(long)]
        metrics_out: Option<PathBuf>,
        #[arg(long)]
        log_out: Option<PathBuf>,
        /// Per-hop onion observations.
        #[arg(long)]
        observations_out: Option<PathBuf>,
        #[arg(long)]
        ledger_out: Option<PathBuf>,
    },
    /// Proof-of-work tools over hex envelope payloads.
    Pow {
        #[command(subcommand)]
        command: PowCommand,
    },
    /// Swarm assignment tools.
    Swarm {
        #[command(subcommand)]
        command: SwarmCommand,
    },
    /// Run a scenario and dump one node's final state.
    Inspect {
        #[arg(long)]
        node: u32,
        /// Defaults to the built-in network when omitted.
        #[arg(long)]
        scenario: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
}

#[derive(Subcommand)]
enum PowCommand {
    /// Find the smallest qualifying nonce.
    Mine {
        #[arg(long)]
        payload: String,
        #[arg(long)]
        difficulty: u64,
        #[arg(long, default_value_t = 0)]
        start: u64,
    },
    /// Check a nonce against the threshold.
    Verify {
        #[arg(long)]
        payload: String,
        #[arg(long)]
        difficulty: u64,
        #[arg(long)]
        nonce: u64,
    },
}

#[derive(Subcommand)]
enum SwarmCommand {
    /// Print `pubkey → swarm` for every key in a file.
    Map {
        /// One key per line, as a 66-character address or 64 hex characters.
        #[arg(long)]
        keys: PathBuf,
        /// Comma-separated swarm ids.
        #[arg(long, default_value = "0")]
        swarms: String,
    },
}

fn fail(msg: impl std::fmt::Display) -> ExitCode {
    eprintln!("error: {msg}");
    ExitCode::from(1)
}

fn load(path: &PathBuf, seed: Option<u64>) -> Result<SimConfig, String> {
    let text = fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    let mut cfg = SimConfig::parse(&text).map_err(|e| format!("{}: {e}", path.display()))?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn write_out(path: &Option<PathBuf>, text: &str) -> Result<(), String> {
    match path {
        Some(p) => fs::write(p, text).map_err(|e| format!("{}: {e}", p.display())),
        None => Ok(()),
    }
}

/// Selects one artifact of a finished run.
type Pick = fn(&swarmnet_sim::SimOutput) -> &str;

fn simulate(
    scenario: PathBuf,
    seed: Option<u64>,
    metrics_out: Option<PathBuf>,
    outputs: [(Option<PathBuf>, Pick); 3],
) -> ExitCode {
    let cfg = match load(&scenario, seed) {
        Ok(c) => c,
        Err(e) => return fail(e),
    };
    let out = swarmnet_sim::run(cfg);
    let metrics = out.metrics.to_lines();
    match &metrics_out {
        Some(_) => {
            if let Err(e) = write_out(&metrics_out, &metrics) {
                return fail(e);
            }
        }
        None => print!("{metrics}"),
    }
    for (path, pick) in &outputs {
        if let Err(e) = write_out(path, pick(&out)) {
            return fail(e);
        }
    }
    for c in &out.checks {
        let verdict = if c.passed { "PASS" } else { "FAIL" };
        eprintln!("{verdict} line {}: {}", c.line, c.description);
    }
    if out.passed() {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(2)
    }
}

fn parse_payload(hex_payload: &str) -> Result<(Vec<u8>, PowParams), String> {
    let bytes = hex::decode(hex_payload.trim()).map_err(|e| format!("payload: {e}"))?;
    let env = Envelope::parse_payload(&bytes, 0).map_err(|e| format!("payload: {e}"))?;
    Ok((bytes, PowParams { difficulty: 1, ttl_secs: env.ttl_secs, length: env.ciphertext.len() as u64 }))
}

fn pow_command(cmd: PowCommand) -> ExitCode {
    let (hex_payload, difficulty) = match &cmd {
        PowCommand::Mine { payload, difficulty, .. } | PowCommand::Verify { payload, difficulty, .. } => {
            (payload.clone(), *difficulty)
        }
    };
    let (bytes, params) = match parse_payload(&hex_payload) {
        Ok(p) => p,
        Err(e) => return fail(e),
    };
    let params = match PowParams::new(difficulty, params.ttl_secs, params.length) {
        Ok(p) => p,
        Err(e) => return fail(e),
    };
    let threshold = pow::compute_threshold(&params);
    match cmd {
        PowCommand::Mine { start, .. } => match pow::mine(&bytes, threshold, start, pow::DEFAULT_ATTEMPT_CAP) {
            Ok(r) => {
                println!("nonce={} hash_head={} threshold={threshold}", r.nonce, r.hash_head);
                ExitCode::SUCCESS
            }
            Err(e) => fail(e),
        },
        PowCommand::Verify { nonce, .. } => {
            let head = pow::hash_head(&pow::payload_digest(&bytes), nonce);
            let verdict = if head < threshold { "accept" } else { "reject" };
            println!("{verdict} hash_head={head} threshold={threshold}");
            if head < threshold {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(2)
            }
        }
    }
}

fn parse_key(s: &str) -> Result<PublicKey, String> {
    if s.len() == 64 {
        let mut k = [0u8; 32];
        hex::decode_to_slice(s, &mut k).map_err(|e| format!("{s}: {e}"))?;
        return Ok(PublicKey(k));
    }
    s.parse::<PublicKey>().map_err(|e| format!("{s}: {e}"))
}

fn swarm_map(keys: PathBuf, swarms: &str) -> ExitCode {
    let ids: Result<BTreeSet<SwarmId>, _> = swarms.split(',').map(|s| s.trim().parse::<u64>().map(SwarmId)).collect();
    let ids = match ids {
        Ok(ids) => ids,
        Err(e) => return fail(format!("swarms: {e}")),
    };
    let text = match fs::read_to_string(&keys) {
        Ok(t) => t,
        Err(e) => return fail(format!("{}: {e}", keys.display())),
    };
    let ring = Ring::default();
    for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
        let pk = match parse_key(line) {
            Ok(k) => k,
            Err(e) => return fail(e),
        };
        match ring.assign_pubkey(&pk, &ids) {
            Ok(s) => println!("{pk} → {s}"),
            Err(e) => return fail(e),
        }
    }
    ExitCode::SUCCESS
}

fn inspect(node: u32, scenario: Option<PathBuf>, seed: Option<u64>) -> ExitCode {
    let cfg = match &scenario {
        Some(p) => match load(p, seed) {
            Ok(c) => c,
            Err(e) => return fail(e),
        },
        None => SimConfig { seed: seed.unwrap_or(SimConfig::default().seed), ..SimConfig::default() },
    };
    match swarmnet_sim::inspect(cfg, node) {
        Some(text) => {
            print!("{text}");
            ExitCode::SUCCESS
        }
        None => fail(format!("unknown node {node}")),
    }
}

fn main() -> ExitCode {
    match Cli::parse().command {
        Command::Simulate { scenario, seed, metrics_out, log_out, observations_out, ledger_out } => simulate(
            scenario,
            seed,
            metrics_out,
            [
                (log_out, |o| o.events.as_str()),
                (observations_out, |o| o.observations.as_str()),
                (ledger_out, |o| o.ledger_csv.as_str()),
            ],
        ),
        Command::Pow { command } => pow_command(command),
        Command::Swarm { command: SwarmCommand::Map { keys, swarms } } => swarm_map(keys, &swarms),
        Command::Inspect { node, scenario, seed } => inspect(node, scenario, seed),
    }
}
