//! End-of-run analysis: ground-truth metrics and the adversary-log audit.

use std::collections::BTreeSet;

use swarmnet_core::onion::Endpoint;
use swarmnet_core::NodeId;

use crate::metrics::{median, ratio, Metrics};
use crate::world::{Profile, World};

/// Records this young may still be propagating and are left out of replication.
const SETTLE_MS: u64 = 2_000;
/// Window width for the plaintext scan over observer blobs.
const SCAN_WINDOW: usize = 16;

impl World {
    /// Guards must never see the exit or destination; exits must never see the client.
    pub(crate) fn knowledge_violations(&mut self) -> u64 {
        let mut found = Vec::new();
        for (trace, obs) in &self.observations {
            let Some(t) = self.traces.get(trace) else { continue };
            let ends = [obs.from, obs.to];
            let leak = if obs.hop == t.guard {
                ends.iter().find(|e| **e == Endpoint::Node(t.exit) || **e == Endpoint::Node(t.destination))
            } else if obs.hop == t.exit {
                ends.iter().find(|e| **e == Endpoint::Client(t.client))
            } else {
                None
            };
            if let Some(e) = leak {
                found.push(format!("knowledge-violation trace {trace} hop n{} saw {e}", obs.hop));
            }
        }
        let n = found.len() as u64;
        for line in found {
            self.emit(line);
        }
        n
    }

    /// Requests whose plaintext shows up in a blob kept by an observer.
    fn observer_plaintext_hits(&self) -> u64 {
        let mut hits = 0;
        for (trace, blobs) in &self.observed_blobs {
            let Some(t) = self.traces.get(trace) else { continue };
            if t.request.len() < SCAN_WINDOW {
                continue;
            }
            let windows: BTreeSet<&[u8]> = t.request.windows(SCAN_WINDOW).collect();
            if blobs.iter().any(|b| b.windows(SCAN_WINDOW).any(|w| windows.contains(w))) {
                hits += 1;
            }
        }
        hits
    }

    fn holds(&self, node: NodeId, hash: &swarmnet_core::RecordHash) -> bool {
        self.nodes.get(&node).is_some_and(|n| n.alive && n.store.get_live(hash, self.now).is_some())
    }

    pub(crate) fn report(&mut self) -> Metrics {
        let mut m = Metrics::default();
        let now = self.now;

        let sent: Vec<_> = self.stats.messages.values().filter(|t| t.sent_at <= now).collect();
        let latencies: Vec<u64> = sent.iter().filter_map(|t| t.delivered_at.map(|d| d - t.sent_at)).collect();
        m.count("messages_sent", sent.len() as u64);
        m.count("messages_delivered", latencies.len() as u64);
        m.real("delivery_rate", ratio(latencies.len() as u64, sent.len() as u64));
        m.count("latency_median_ms", median(latencies));
        m.count("duplicates_suppressed", self.stats.duplicates);
        m.count("send_failures", self.stats.send_failures);
        m.count("pow_remines", self.stats.remines);
        m.count("sync_sent", self.stats.sync_sent);
        m.count("sync_acked", self.stats.sync_acked);
        m.count("fell_back", self.stats.fell_back);
        let sync_stored = self.stats.accepted.values().filter(|(_, _, _, d)| self.stats.sync_data.contains(d)).count();
        m.count("sync_stored_records", sync_stored as u64);
        m.count("records_stored", self.stats.accepted.len() as u64);

        let mut fractions = Vec::new();
        let (mut durable, mut durable_total) = (0u64, 0u64);
        for (hash, (recipient, accepted_at, expiry, _)) in &self.stats.accepted {
            if *expiry <= now {
                continue;
            }
            let Ok(swarm) = self.registry.assign(recipient) else { continue };
            let members = self.registry.members(swarm).unwrap_or(&[]);
            if self.stats.first_churn.is_none_or(|t| *accepted_at < t) {
                durable_total += 1;
                if members.iter().any(|n| self.holds(*n, hash)) {
                    durable += 1;
                }
            }
            if accepted_at + SETTLE_MS > now {
                continue;
            }
            let honest: Vec<NodeId> = members
                .iter()
                .copied()
                .filter(|n| self.nodes.get(n).is_some_and(|x| x.alive && x.profile != Profile::Cheater))
                .collect();
            if honest.is_empty() {
                continue;
            }
            let held = honest.iter().filter(|n| self.holds(**n, hash)).count();
            fractions.push(held as f64 / honest.len() as f64);
        }
        let min = fractions.iter().copied().fold(1.0, f64::min);
        let mean = if fractions.is_empty() { 1.0 } else { fractions.iter().sum::<f64>() / fractions.len() as f64 };
        m.real("replication_min", min);
        m.real("replication_mean", mean);
        m.real("durability", ratio(durable, durable_total));
        let lost = self
            .stats
            .pre_churn_swarms
            .values()
            .filter(|members| !members.iter().any(|n| self.nodes.get(n).is_some_and(|x| x.alive)))
            .count();
        m.count("swarms_lost", lost as u64);

        let sizes: Vec<u64> = self.nodes.values().filter(|n| n.alive).map(|n| n.store.size_bytes() as u64).collect();
        let mean_size = if sizes.is_empty() { 0.0 } else { sizes.iter().sum::<u64>() as f64 / sizes.len() as f64 };
        m.real("storage_bytes_mean", mean_size);
        m.count("storage_bytes_max", sizes.iter().copied().max().unwrap_or(0));

        m.count("blocks", self.height);
        m.count("audits", self.stats.audits);
        m.count("audit_failures", self.stats.audit_failures);
        let profile_of = |n: &NodeId| self.nodes.get(n).map(|x| x.profile);
        let decommissioned = &self.stats.decommissioned;
        let cheater_heights: Vec<u64> =
            decommissioned.iter().filter(|(n, _)| profile_of(n) == Some(Profile::Cheater)).map(|(_, h)| *h).collect();
        let cheaters = self.nodes.values().filter(|n| n.profile == Profile::Cheater).count() as u64;
        m.count("decommissions", decommissioned.len() as u64);
        m.count("decommissioned_honest", (decommissioned.len() - cheater_heights.len()) as u64);
        m.count("decommissioned_cheaters", cheater_heights.len() as u64);
        m.count("cheaters", cheaters);
        m.count("cheaters_undetected", cheaters - cheater_heights.len() as u64);
        m.count("cheater_detect_blocks_max", cheater_heights.iter().copied().max().unwrap_or(0));

        m.count("refresh_attempts", self.stats.refresh_attempts);
        m.count("refresh_adopted", self.stats.refresh_adopted);
        m.count("refresh_rejected", self.stats.refresh_rejected);
        m.count("refresh_nonunanimous_adopted", self.stats.refresh_nonunanimous);
        m.count("refresh_minority_adopted", self.stats.refresh_minority);

        m.count("onion_requests", self.stats.onion_requests);
        m.count("path_builds", self.stats.path_builds);
        m.count("path_failures", self.stats.path_failures);
        let violations = self.knowledge_violations();
        m.count("knowledge_violations", violations);
        m.count("observer_plaintext_hits", self.observer_plaintext_hits());
        m.count("nodes_final", self.nodes.values().filter(|n| n.alive).count() as u64);
        m.count("swarms_final", self.registry.swarm_ids().len() as u64);
        m
    }
}
