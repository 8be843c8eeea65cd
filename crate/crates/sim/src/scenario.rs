//! Scenario definition: one fully-specified, seeded run.

use groupcast_core::Micros;
use serde::{Deserialize, Serialize};

use crate::models::{ChurnModel, ClockModel, NetModel};

#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// Cycle-mapped direct delivery with consensus only on misses.
    Fast,
    /// The primary applies and answers immediately, forwarding to backups
    /// asynchronously.
    PrimaryBackup,
    /// The primary answers only after all backups acknowledged the batch.
    ReliablePrimaryBackup,
    /// Every cycle is delivered through a consensus instance.
    ConsensusTotalOrder,
}

impl Strategy {
    pub fn token(&self) -> &'static str {
        match self {
            Strategy::Fast => "fast",
            Strategy::PrimaryBackup => "primary_backup",
            Strategy::ReliablePrimaryBackup => "reliable_primary_backup",
            Strategy::ConsensusTotalOrder => "consensus_total_order",
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LateHandling {
    /// Late events are delivered by the first cycle that closes after they
    /// arrive (window-based).
    Dynamic,
    /// One cycle, one event: anything older than the cycle's sequence
    /// number is dropped at collection.
    SimpleDiscard,
}

/// A scripted neighbor change: at `at_ms` the notifier embeds the
/// add/remove command for `subject` in its next event.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct NeighborScript {
    pub at_ms: u64,
    pub notifier: u32,
    pub subject: u32,
    pub join: bool,
}

fn default_clients() -> u32 {
    10
}
fn default_group_min() -> u32 {
    5
}
fn default_events() -> u64 {
    1000
}
fn default_net_low() -> f64 {
    50.0
}
fn default_net_high() -> f64 {
    250.0
}
fn default_gc_period() -> u64 {
    5000
}
fn default_update_timeout() -> u64 {
    5000
}
fn default_true() -> bool {
    true
}
fn default_strategy() -> Strategy {
    Strategy::Fast
}
fn default_late() -> LateHandling {
    LateHandling::Dynamic
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimScenario {
    pub seed: u64,
    #[serde(default = "default_clients")]
    pub client_count: u32,
    /// Minimum group size n.
    #[serde(default = "default_group_min")]
    pub group_min: u32,
    /// Extra replicas kept for lazy repair (the group is sized n + spare).
    #[serde(default)]
    pub group_spare: u32,
    #[serde(default = "default_events")]
    pub events_per_client: u64,
    #[serde(default = "default_strategy")]
    pub strategy: Strategy,
    #[serde(default = "default_late")]
    pub late_handling: LateHandling,
    /// Network latency bounds the group is tuned for; the cycle length is
    /// their difference (200 ms at the defaults).
    #[serde(default = "default_net_low")]
    pub net_low_ms: f64,
    #[serde(default = "default_net_high")]
    pub net_high_ms: f64,
    #[serde(default)]
    pub net: NetModel,
    #[serde(default)]
    pub churn: ChurnModel,
    #[serde(default)]
    pub clock: ClockModel,
    #[serde(default = "default_true")]
    pub gc_enabled: bool,
    #[serde(default = "default_gc_period")]
    pub gc_period_ms: u64,
    #[serde(default = "default_update_timeout")]
    pub update_timeout_ms: u64,
    /// Crash the current leader when the k-th consensus instance starts
    /// (0 = never).
    #[serde(default)]
    pub crash_leader_on_instance: u32,
    #[serde(default)]
    pub script: Vec<NeighborScript>,
    /// Record the delivery-queue length time series.
    #[serde(default)]
    pub record_qd_series: bool,
}

impl Default for SimScenario {
    fn default() -> Self {
        SimScenario {
            seed: 0,
            client_count: default_clients(),
            group_min: default_group_min(),
            group_spare: 0,
            events_per_client: default_events(),
            strategy: default_strategy(),
            late_handling: default_late(),
            net_low_ms: default_net_low(),
            net_high_ms: default_net_high(),
            net: NetModel::default(),
            churn: ChurnModel::default(),
            clock: ClockModel::default(),
            gc_enabled: true,
            gc_period_ms: default_gc_period(),
            update_timeout_ms: default_update_timeout(),
            crash_leader_on_instance: 0,
            script: Vec::new(),
            record_qd_series: false,
        }
    }
}

impl SimScenario {
    pub fn cycle_us(&self) -> Micros {
        ((self.net_high_ms - self.net_low_ms) * 1000.0) as Micros
    }

    pub fn net_low_us(&self) -> Micros {
        (self.net_low_ms * 1000.0) as Micros
    }

    pub fn net_high_us(&self) -> Micros {
        (self.net_high_ms * 1000.0) as Micros
    }

    /// Start of cycle 0: enough lead time for the group to settle.
    pub fn origin_us(&self) -> Micros {
        2_000_000
    }

    /// Fixed end of simulated time: all metric events resolve (delivery or
    /// timeout) by then, plus a drain tail.
    pub fn horizon_us(&self) -> Micros {
        let emit_span = self.events_per_client * self.cycle_us();
        let script_tail = self
            .script
            .iter()
            .map(|s| s.at_ms * 1000 + (self.events_per_client + 20) * self.cycle_us())
            .max()
            .unwrap_or(0);
        let base = self.origin_us() + emit_span.max(script_tail);
        base + self.update_timeout_ms * 1000 + 2_000_000
    }

    pub fn group_size(&self) -> u32 {
        self.group_min + self.group_spare
    }
}
