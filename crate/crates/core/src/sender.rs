//! Sender bookkeeping: records, expected windows, and the within-cycle
//! delivery rank.

use std::collections::BTreeMap;
use std::ops::RangeInclusive;

use crate::clock::{CycleClock, SenderSchedule, TimingParams};
use crate::error::ProtocolError;
use crate::id::{Cycle, Micros, Seq, SenderId};

/// Per-sender state on a replica.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct SenderRecord {
    pub id: SenderId,
    /// Start of the sender's first cycle, on the group grid.
    pub t_start: Micros,
    /// First cycle the sender is expected to supply an event for.
    pub first_cycle: Cycle,
    /// Sequence number of the last delivered non-Empty event, if any
    /// (the paper's MaxSeq, −1 encoded as `None`). Monotone.
    pub max_delivered: Option<Seq>,
}

impl SenderRecord {
    pub fn new(id: SenderId, t_start: Micros, first_cycle: Cycle) -> Self {
        SenderRecord {
            id,
            t_start,
            first_cycle,
            max_delivered: None,
        }
    }

    pub fn active_at(&self, cycle: Cycle) -> bool {
        cycle >= self.first_cycle
    }

    /// Sequence number of this sender's event for `cycle`.
    pub fn seq_of_cycle(&self, cycle: Cycle) -> Result<Seq, ProtocolError> {
        if !self.active_at(cycle) {
            return Err(ProtocolError::SenderNotActive {
                sender: self.id,
                cycle,
            });
        }
        Ok(cycle - self.first_cycle)
    }

    /// Lowest still-deliverable sequence number (the paper's MinSeq).
    pub fn next_expected(&self) -> Seq {
        self.max_delivered.map_or(0, |m| m + 1)
    }

    /// Expected deliverable window Ω(s, c) = [MinSeq, Seq(s, c)].
    pub fn expected_window(&self, cycle: Cycle) -> Result<RangeInclusive<Seq>, ProtocolError> {
        let top = self.seq_of_cycle(cycle)?;
        let min = self.next_expected();
        if min > top {
            return Err(ProtocolError::EmptyWindow {
                sender: self.id,
                cycle,
                min,
                max: top,
            });
        }
        Ok(min..=top)
    }

    pub fn schedule(&self, timing: TimingParams) -> SenderSchedule {
        SenderSchedule {
            t_start: self.t_start,
            timing,
        }
    }

    /// Deadline by which the event with `seq` must arrive; identical on
    /// every replica because it only depends on `t_start`.
    pub fn recv_deadline(&self, seq: Seq, timing: TimingParams) -> Micros {
        self.schedule(timing).recv_deadline(seq)
    }
}

/// The sorted sender set S with 1-based indexes.
#[derive(Clone, PartialEq, Eq, Debug, Default)]
pub struct SenderTable {
    records: BTreeMap<SenderId, SenderRecord>,
}

impl SenderTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, id: &SenderId) -> Option<&SenderRecord> {
        self.records.get(id)
    }

    pub fn get_mut(&mut self, id: &SenderId) -> Option<&mut SenderRecord> {
        self.records.get_mut(id)
    }

    pub fn contains(&self, id: &SenderId) -> bool {
        self.records.contains_key(id)
    }

    pub fn insert(&mut self, rec: SenderRecord) {
        self.records.insert(rec.id, rec);
    }

    pub fn remove(&mut self, id: &SenderId) -> Option<SenderRecord> {
        self.records.remove(id)
    }

    pub fn iter(&self) -> impl Iterator<Item = &SenderRecord> {
        self.records.values()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut SenderRecord> {
        self.records.values_mut()
    }

    /// 1-based rank of `id` in the sorted sender set.
    pub fn index_of(&self, id: &SenderId) -> Option<usize> {
        self.records.keys().position(|k| k == id).map(|p| p + 1)
    }

    /// Within-cycle delivery rank:
    /// γ = Seq(e) + Σ over lower-indexed senders of (Seq(k, c) + 1),
    /// where senders not yet active at `c` contribute nothing.
    pub fn rank(&self, sender: &SenderId, seq: Seq, cycle: Cycle) -> Result<u64, ProtocolError> {
        if !self.contains(sender) {
            return Err(ProtocolError::UnknownSender { sender: *sender });
        }
        let mut rank = seq;
        for rec in self.records.values() {
            if rec.id == *sender {
                break;
            }
            if rec.active_at(cycle) {
                rank += rec.seq_of_cycle(cycle).expect("active checked") + 1;
            }
        }
        Ok(rank)
    }

    /// Start time of a joining sender: n·Δt after the receive deadline of
    /// the notifier's event, leaving the handshake time to settle.
    pub fn join_start_time(notifier_deadline: Micros, group_min: u64, cycle_len: Micros) -> Micros {
        notifier_deadline + group_min * cycle_len
    }

    /// First expected delivery cycle of a joiner, as counted from the
    /// handling replica's open cycle at handling time.
    pub fn join_first_cycle(
        t_recv_first: Micros,
        t_now: Micros,
        cycle_len: Micros,
        current_cycle: Cycle,
    ) -> Cycle {
        let delta = t_recv_first.saturating_sub(t_now);
        current_cycle + delta.div_ceil(cycle_len)
    }

    pub fn record_for_join(
        &self,
        id: SenderId,
        t_start: Micros,
        clock: &CycleClock,
    ) -> Result<SenderRecord, ProtocolError> {
        let first_cycle = clock.cycle_of_start(t_start)?;
        Ok(SenderRecord::new(id, t_start, first_cycle))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    fn rec(base: u64, first_cycle: Cycle) -> SenderRecord {
        SenderRecord::new(SenderId::new(base, 0), first_cycle * 200, first_cycle)
    }

    #[test]
    fn seq_of_cycle_examples() {
        let r = rec(1, 10);
        assert_eq!(r.seq_of_cycle(10).unwrap(), 0);
        assert_eq!(r.seq_of_cycle(15).unwrap(), 5);
        assert!(r.seq_of_cycle(9).is_err());
    }

    #[test]
    fn expected_window_examples() {
        let mut r = rec(1, 0);
        // Fresh sender: MaxSeq = −1, Seq(s,c)=0 → Ω = [0,0].
        assert_eq!(r.expected_window(0).unwrap(), 0..=0);
        // MaxSeq=2, Seq(s,c)=5 → Ω=[3,5].
        r.max_delivered = Some(2);
        assert_eq!(r.expected_window(5).unwrap(), 3..=5);
    }

    #[test]
    fn window_grows_across_empty_decisions() {
        // Cycles c..c+2 decide Empty for the window bottom k: MaxSeq stays
        // k−1, so Ω at c+3 is [k, k+3].
        let mut r = rec(1, 0);
        r.max_delivered = Some(9); // k = 10
        let k = 10;
        for c in k..k + 3 {
            let w = r.expected_window(c).unwrap();
            assert_eq!(*w.start(), k);
            // Empty decided: max_delivered unchanged.
        }
        assert_eq!(r.expected_window(k + 3).unwrap(), k..=k + 3);
    }

    #[test]
    fn rank_formula() {
        let mut t = SenderTable::new();
        // Single sender: empty summation, γ = seq.
        t.insert(rec(1, 0));
        let s1 = SenderId::new(1, 0);
        assert_eq!(t.rank(&s1, 7, 7).unwrap(), 7);

        // Two senders with Seq(s1,c)=4: event from s2 with seq 4 →
        // γ = 4 + (4+1) = 9.
        let s2 = SenderId::new(2, 0);
        t.insert(rec(2, 0));
        assert_eq!(t.rank(&s2, 4, 4).unwrap(), 9);

        // Late event from s1 with seq 3 at the same cycle sorts first.
        let late = t.rank(&s1, 3, 4).unwrap();
        assert_eq!(late, 3);
        assert!(late < 9);
    }

    #[test]
    fn rank_ignores_inactive_senders() {
        let mut t = SenderTable::new();
        t.insert(rec(1, 50)); // not active before cycle 50
        t.insert(rec(2, 0));
        let s2 = SenderId::new(2, 0);
        assert_eq!(t.rank(&s2, 3, 3).unwrap(), 3);
        // Once s1 activates it contributes Seq(s1,c)+1.
        assert_eq!(t.rank(&s2, 50, 50).unwrap(), 50 + 1);
    }

    #[test]
    fn rank_injective_within_cycle() {
        // Brute-force over all (sender, seq) pairs inside the Ω windows of a
        // random-ish small sender set.
        let mut t = SenderTable::new();
        for (base, first, maxd) in [(3u64, 0u64, None), (5, 2, Some(1)), (9, 1, Some(3))] {
            let mut r = rec(base, first);
            r.max_delivered = maxd;
            t.insert(r);
        }
        let cycle = 6;
        let mut seen = BTreeSet::new();
        for r in t.iter() {
            for seq in r.expected_window(cycle).unwrap() {
                let g = t.rank(&r.id, seq, cycle).unwrap();
                assert!(seen.insert(g), "duplicate rank {g}");
            }
        }
    }

    #[test]
    fn join_time_formulas() {
        // t_recv,j(y) = 10.0 s, n = 5, Δt = 0.2 s → t_start,k = 11.0 s and
        // t_recv,k(1) = 11.2 s; send advance 0.05 s → t_send,k(1) = 10.95 s.
        let dt = 200_000;
        let t_start = SenderTable::join_start_time(10_000_000, 5, dt);
        assert_eq!(t_start, 11_000_000);
        let timing = TimingParams::new(50_000, 250_000).unwrap();
        let sched = SenderSchedule { t_start, timing };
        assert_eq!(sched.event_times(1), (10_950_000, 11_200_000));
        // With t_now = 10.0 s and c = 50: c_k = ⌈1.2/0.2⌉ + 50 = 56.
        let ck = SenderTable::join_first_cycle(11_200_000, 10_000_000, dt, 50);
        assert_eq!(ck, 56);
    }
}
