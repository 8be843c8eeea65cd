//! Protocol error types.

use crate::id::{Cycle, Micros, SenderId};
use thiserror::Error;

#[derive(Error, Debug, Clone, PartialEq, Eq)]
pub enum ProtocolError {
    #[error("cycle length must be positive: net_low={net_low} net_high={net_high}")]
    BadTiming { net_low: Micros, net_high: Micros },

    #[error("sender start time {t_start} is not aligned to the cycle grid")]
    OffGrid { t_start: Micros },

    #[error("sender {sender} is not active at cycle {cycle}")]
    SenderNotActive { sender: SenderId, cycle: Cycle },

    #[error("unknown sender {sender}")]
    UnknownSender { sender: SenderId },

    #[error("expected-window invariant violated for {sender} at cycle {cycle}: min {min} > max {max}")]
    EmptyWindow {
        sender: SenderId,
        cycle: Cycle,
        min: u64,
        max: u64,
    },

    #[error("delivery queues diverged during merge: {0}")]
    MergeConflict(String),

    #[error("no live candidate to elect")]
    NoCandidate,
}
