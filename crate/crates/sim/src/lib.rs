//! Deterministic discrete-event simulation of replica-group event
//! delivery: seeded network/churn/clock models, the protocol replicas plus
//! the primary-backup baselines, and a global observer checking
//! cross-replica safety on every run.

pub mod closed_form;
pub mod metrics;
pub mod models;
pub mod rng;
pub mod scenario;
pub mod sim;

pub use closed_form::{closed_form, delivery_rate};
pub use metrics::{latency_summary, Metrics, Violations};
pub use models::{ChurnModel, ClockModel, NetModel};
pub use rng::derive_run_seed;
pub use scenario::{LateHandling, NeighborScript, SimScenario, Strategy};
pub use sim::run;
