//! Cycle timing: the group's clock grid and per-sender event schedules.

use crate::error::ProtocolError;
use crate::id::{Cycle, Micros, Seq};

/// Network-latency bounds that fix the cycle length.
///
/// `net_low` and `net_high` bound the one-way latency the group is tuned
/// for; the cycle length is their difference.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct TimingParams {
    pub net_low: Micros,
    pub net_high: Micros,
}

impl TimingParams {
    pub fn new(net_low: Micros, net_high: Micros) -> Result<Self, ProtocolError> {
        if net_high <= net_low {
            return Err(ProtocolError::BadTiming { net_low, net_high });
        }
        Ok(TimingParams { net_low, net_high })
    }

    /// Cycle length Δt = upper bound minus lower bound.
    pub fn cycle_len(&self) -> Micros {
        self.net_high - self.net_low
    }
}

/// The group's cycle grid. Cycle `c` spans
/// `(origin + c·Δt, origin + (c+1)·Δt]` and closes at the end of its span.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct CycleClock {
    /// Start time of cycle 0 (the group's t_0).
    pub origin: Micros,
    pub cycle_len: Micros,
}

impl CycleClock {
    pub fn new(origin: Micros, timing: TimingParams) -> Self {
        CycleClock {
            origin,
            cycle_len: timing.cycle_len(),
        }
    }

    /// Instant at which cycle `c` closes and its events become deliverable.
    pub fn close_of(&self, c: Cycle) -> Micros {
        self.origin + (c + 1) * self.cycle_len
    }

    /// Highest cycle whose close time is ≤ `now`, if any.
    pub fn closed_upto(&self, now: Micros) -> Option<Cycle> {
        if now < self.close_of(0) {
            return None;
        }
        Some((now - self.origin) / self.cycle_len - 1)
    }

    /// First cycle-close instant strictly after `now`.
    pub fn next_close(&self, now: Micros) -> Micros {
        match self.closed_upto(now) {
            None => self.close_of(0),
            Some(c) => self.close_of(c + 1),
        }
    }

    /// Cycle index for a grid-aligned start time, erroring on misalignment.
    pub fn cycle_of_start(&self, t_start: Micros) -> Result<Cycle, ProtocolError> {
        if t_start < self.origin || (t_start - self.origin) % self.cycle_len != 0 {
            return Err(ProtocolError::OffGrid { t_start });
        }
        Ok((t_start - self.origin) / self.cycle_len)
    }
}

/// Per-sender event schedule derived from the sender's first-cycle start.
///
/// The n-th event (1-based ordinal, sequence number n−1) is sent at
/// `t_start − net_low + (n−1)·Δt` and must be received by `t_start + n·Δt`.
/// The receive deadline deliberately does not depend on the sender's clock.
#[derive(Clone, Copy, Debug)]
pub struct SenderSchedule {
    pub t_start: Micros,
    pub timing: TimingParams,
}

impl SenderSchedule {
    /// Send time and receive deadline of the event with ordinal `n` (n ≥ 1).
    pub fn event_times(&self, n: u64) -> (Micros, Micros) {
        debug_assert!(n >= 1);
        let dt = self.timing.cycle_len();
        let send = self.t_start - self.timing.net_low + (n - 1) * dt;
        let deadline = self.t_start + n * dt;
        (send, deadline)
    }

    /// Send time for the event with sequence number `seq`.
    pub fn send_time(&self, seq: Seq) -> Micros {
        self.event_times(seq + 1).0
    }

    /// Receive deadline for the event with sequence number `seq`. All
    /// replicas compute this identically from `t_start` alone.
    pub fn recv_deadline(&self, seq: Seq) -> Micros {
        self.event_times(seq + 1).1
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn timing(low: u64, high: u64) -> TimingParams {
        TimingParams::new(low, high).unwrap()
    }

    #[test]
    fn schedule_first_event() {
        // t_start=1000, net_low=50, Δt=200, n=1 → send 950, deadline 1200.
        let s = SenderSchedule {
            t_start: 1000,
            timing: timing(50, 250),
        };
        assert_eq!(s.event_times(1), (950, 1200));
    }

    #[test]
    fn schedule_third_event() {
        let s = SenderSchedule {
            t_start: 1000,
            timing: timing(50, 250),
        };
        assert_eq!(s.event_times(3), (1350, 1600));
    }

    #[test]
    fn schedule_zero_lower_bound() {
        // net_low = 0 → send time equals t_start + (n−1)Δt.
        let s = SenderSchedule {
            t_start: 1000,
            timing: timing(0, 200),
        };
        assert_eq!(s.event_times(1).0, 1000);
        assert_eq!(s.event_times(4).0, 1600);
    }

    #[test]
    fn grid_cycles() {
        let clock = CycleClock::new(10_000, timing(50, 250));
        assert_eq!(clock.cycle_len, 200);
        assert_eq!(clock.close_of(0), 10_200);
        assert_eq!(clock.closed_upto(10_199), None);
        assert_eq!(clock.closed_upto(10_200), Some(0));
        assert_eq!(clock.closed_upto(10_999), Some(3));
        assert_eq!(clock.next_close(10_000), 10_200);
        assert_eq!(clock.next_close(10_200), 10_400);
        assert_eq!(clock.cycle_of_start(10_600).unwrap(), 3);
        assert!(clock.cycle_of_start(10_650).is_err());
    }

    #[test]
    fn rejects_inverted_bounds() {
        assert!(TimingParams::new(250, 250).is_err());
        assert!(TimingParams::new(300, 250).is_err());
    }
}
