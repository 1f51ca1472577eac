//! Partially synchronous network: heavy-tailed delays before GST, bounded
//! uniform delays after, partitions, and an optional egress cap per node.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use iss_core::{NodeId, Time, MS};

use crate::config::{NetworkConfig, Partition};

/// Pre-GST delays are capped at this multiple of the mean.
const PRE_GST_FACTOR: f64 = 10.0;

pub struct Network {
    mean: f64,
    jitter: f64,
    gst: Time,
    egress: Option<u64>,
    partitions: Vec<(NodeId, Time, Time)>,
    free_at: Vec<Time>,
}

impl Network {
    pub fn new(cfg: &NetworkConfig, n: usize) -> Self {
        Network {
            mean: cfg.mean_delay * MS as f64,
            jitter: cfg.jitter,
            gst: cfg.gst * MS,
            egress: cfg.egress_bytes_per_sec,
            partitions: cfg
                .partitions
                .iter()
                .map(|&Partition { node, from, to }| (node, from * MS, to * MS))
                .collect(),
            free_at: vec![0; n],
        }
    }

    /// Upper bound on the post-GST one-way delay, excluding egress queueing.
    pub fn delta(&self) -> Time {
        (self.mean * (1.0 + self.jitter)).ceil() as Time
    }

    pub fn gst(&self) -> Time {
        self.gst
    }

    /// Whether `node` is cut off at `now`.
    pub fn isolated(&self, node: NodeId, now: Time) -> bool {
        self.partitions
            .iter()
            .any(|&(p, from, to)| p == node && from <= now && now < to)
    }

    /// Propagation delay for a message sent at `now`.
    pub fn delay(&self, now: Time, rng: &mut ChaCha8Rng) -> Time {
        let post = |rng: &mut ChaCha8Rng| {
            let lo = self.mean * (1.0 - self.jitter);
            let hi = self.mean * (1.0 + self.jitter);
            if hi > lo {
                rng.gen_range(lo..hi) as Time
            } else {
                lo as Time
            }
        };
        if now >= self.gst {
            return post(rng).max(1);
        }
        // Pareto-like tail with median near the mean, capped; delivery is
        // still due by GST + Δ.
        let u: f64 = rng.gen_range(f64::EPSILON..1.0);
        let d = (self.mean * 0.5 / u).min(self.mean * PRE_GST_FACTOR) as Time;
        let bound = self.gst + self.delta();
        d.min(bound - now).max(1)
    }

    /// Arrival time of a node-to-node message of `size` bytes, or `None` if
    /// a partition drops it.
    pub fn send_node(
        &mut self,
        from: NodeId,
        to: NodeId,
        size: usize,
        now: Time,
        rng: &mut ChaCha8Rng,
    ) -> Option<Time> {
        if self.isolated(from, now) || self.isolated(to, now) {
            return None;
        }
        let start = match self.egress {
            Some(rate) if rate > 0 => {
                let tx = (size as u128 * 1_000_000_000 / rate as u128) as Time;
                let start = self.free_at[from].max(now);
                self.free_at[from] = start + tx;
                start + tx
            }
            _ => now,
        };
        Some(start + self.delay(now, rng))
    }

    /// Arrival time of a client or adjudicator message; not subject to the
    /// egress cap.
    pub fn send_other(&self, node: Option<NodeId>, now: Time, rng: &mut ChaCha8Rng) -> Option<Time> {
        if node.is_some_and(|p| self.isolated(p, now)) {
            return None;
        }
        Some(now + self.delay(now, rng))
    }
}
