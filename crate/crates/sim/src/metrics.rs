//! Run metrics and the global safety-violation counters.

use serde::Serialize;

/// Counters for the invariants a correct run never violates. The
/// acceptance suite asserts every field is zero.
#[derive(Clone, Debug, Default, Serialize, PartialEq, Eq)]
pub struct Violations {
    /// Two live replicas applied different events (or digests) at the same
    /// delivery sequence.
    pub order: u64,
    /// Two live replicas computed different expected windows for a cycle.
    pub windows: u64,
    /// A slot was pruned while some live replica had not applied it.
    pub gc: u64,
    /// Replicas loaded different state for the same election or
    /// reconfiguration.
    pub sync: u64,
    /// A consensus decision conflicted with already-delivered content.
    pub decision: u64,
}

impl Violations {
    pub fn total(&self) -> u64 {
        self.order + self.windows + self.gc + self.sync + self.decision
    }
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct Metrics {
    pub events_sent: u64,
    pub updates_delivered: u64,
    pub delivery_rate: f64,
    pub mean_latency_ms: f64,
    pub p95_latency_ms: f64,
    pub mean_qd: f64,
    pub max_qd: u64,
    pub total_cycles: u64,
    pub consensus_cycles: u64,
    /// Fraction of delivered cycles that needed consensus.
    pub p_sync: f64,
    pub queries_sent: u64,
    pub instances_started: u64,
    pub elections: u64,
    pub reconfigs: u64,
    pub replica_crashes: u64,
    pub group_failed: bool,
    /// Measured mean proposal-collection delay (ms).
    pub d_c_ms: f64,
    /// Measured mean reliable-multicast completion delay (ms).
    pub d_m_ms: f64,
    /// Measured mean extra delay of consensus-delivered cycles (ms).
    pub sync_delay_ms: f64,
    /// Primary/backup digest divergence at the end of a run.
    pub pb_divergence: u64,
    pub violations: Violations,
    /// Fold of every message delivery (time, kind, endpoints).
    pub trace_hash: u64,
    /// Optional (ms, max live |Q_d|) series.
    pub qd_series: Vec<(u64, u64)>,
}

impl Metrics {
    /// Canonical byte serialization for determinism checks.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        let push_u64 = |v: u64, out: &mut Vec<u8>| out.extend_from_slice(&v.to_le_bytes());
        push_u64(self.events_sent, &mut out);
        push_u64(self.updates_delivered, &mut out);
        push_u64(self.mean_latency_ms.to_bits(), &mut out);
        push_u64(self.p95_latency_ms.to_bits(), &mut out);
        push_u64(self.mean_qd.to_bits(), &mut out);
        push_u64(self.max_qd, &mut out);
        push_u64(self.total_cycles, &mut out);
        push_u64(self.consensus_cycles, &mut out);
        push_u64(self.queries_sent, &mut out);
        push_u64(self.instances_started, &mut out);
        push_u64(self.elections, &mut out);
        push_u64(self.reconfigs, &mut out);
        push_u64(self.replica_crashes, &mut out);
        push_u64(self.group_failed as u64, &mut out);
        push_u64(self.d_c_ms.to_bits(), &mut out);
        push_u64(self.d_m_ms.to_bits(), &mut out);
        push_u64(self.sync_delay_ms.to_bits(), &mut out);
        push_u64(self.pb_divergence, &mut out);
        push_u64(self.violations.total(), &mut out);
        push_u64(self.trace_hash, &mut out);
        for (t, q) in &self.qd_series {
            push_u64(*t, &mut out);
            push_u64(*q, &mut out);
        }
        out
    }
}

/// Mean and 95th percentile of latency samples (in milliseconds).
pub fn latency_summary(samples: &mut [f64]) -> (f64, f64) {
    if samples.is_empty() {
        return (0.0, 0.0);
    }
    samples.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mean = samples.iter().sum::<f64>() / samples.len() as f64;
    let idx = ((samples.len() as f64) * 0.95).ceil() as usize;
    let p95 = samples[idx.min(samples.len()) - 1];
    (mean, p95)
}
