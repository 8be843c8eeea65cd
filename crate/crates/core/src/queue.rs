//! The delivery queue: the replicated log of delivered events.
//!
//! Slots are keyed by `(cycle, rank)` where `rank` is the within-cycle
//! delivery index, and each slot carries the global delivery sequence
//! assigned when the slot was appended. The delivery sequence is stored, not
//! recomputed from position, so pruning never renumbers surviving slots.

use std::collections::VecDeque;

use crate::codec::{self, Writer};
use crate::event::{Event, Payload};
use crate::id::{Cycle, DeliverySeq};

/// One delivered event.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct DeliverySlot {
    pub cycle: Cycle,
    /// Within-cycle delivery rank (the γ index): orders events of the same
    /// cycle by sender index, then sequence number.
    pub rank: u64,
    pub delivery_seq: DeliverySeq,
    pub event: Event,
}

impl DeliverySlot {
    /// Sort key: cycle number first, then within-cycle rank.
    pub fn order_key(&self) -> (Cycle, u64) {
        (self.cycle, self.rank)
    }
}

#[derive(Clone, PartialEq, Eq, Debug, Default)]
pub struct DeliveryQueue {
    slots: VecDeque<DeliverySlot>,
    /// Next delivery sequence to assign.
    next_seq: DeliverySeq,
    /// Last delivery sequence handed to the application, if any.
    applied_upto: Option<DeliverySeq>,
    /// Highest pruned delivery sequence, if any pruning happened.
    pruned_upto: Option<DeliverySeq>,
}

impl DeliveryQueue {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn slots(&self) -> impl Iterator<Item = &DeliverySlot> {
        self.slots.iter()
    }

    pub fn last_slot(&self) -> Option<&DeliverySlot> {
        self.slots.back()
    }

    pub fn next_seq(&self) -> DeliverySeq {
        self.next_seq
    }

    pub fn pruned_upto(&self) -> Option<DeliverySeq> {
        self.pruned_upto
    }

    /// Append a slot. Keys must arrive in strictly increasing
    /// `(cycle, rank)` order; the delivery sequence is assigned here.
    pub fn push(&mut self, cycle: Cycle, rank: u64, event: Event) -> DeliverySeq {
        if let Some(last) = self.slots.back() {
            assert!(
                (cycle, rank) > last.order_key(),
                "delivery out of order: ({cycle},{rank}) after {:?}",
                last.order_key()
            );
        }
        let seq = self.next_seq;
        self.next_seq += 1;
        self.slots.push_back(DeliverySlot {
            cycle,
            rank,
            delivery_seq: seq,
            event,
        });
        seq
    }

    /// Delivery sequence of the slot at `(cycle, rank)`, if present.
    pub fn delivery_seq_of(&self, cycle: Cycle, rank: u64) -> Option<DeliverySeq> {
        self.slots
            .binary_search_by(|s| s.order_key().cmp(&(cycle, rank)))
            .ok()
            .map(|i| self.slots[i].delivery_seq)
    }

    pub fn slot_at(&self, seq: DeliverySeq) -> Option<&DeliverySlot> {
        let first = self.slots.front()?.delivery_seq;
        if seq < first {
            return None;
        }
        self.slots.get((seq - first) as usize)
    }

    /// Whether a non-Empty event with this (sender, seq) key has been
    /// delivered. Empty placeholder slots do not count: a late real event
    /// may still be delivered alongside an Empty for the same key.
    pub fn holds_real(&self, key: (crate::id::SenderId, u64)) -> bool {
        self.slots
            .iter()
            .any(|s| s.event.key() == key && !s.event.payload.is_empty_event())
    }

    pub fn find_real(&self, key: (crate::id::SenderId, u64)) -> Option<&DeliverySlot> {
        self.slots
            .iter()
            .find(|s| s.event.key() == key && !s.event.payload.is_empty_event())
    }

    /// Last delivery sequence handed to the application (λ_c), if any.
    pub fn last_applied(&self) -> Option<DeliverySeq> {
        self.applied_upto
    }

    /// Record that the application consumed everything up to `seq`.
    pub fn mark_applied(&mut self, seq: DeliverySeq) {
        assert!(
            self.applied_upto.map_or(true, |a| seq >= a),
            "applied_upto must not go backwards"
        );
        self.applied_upto = Some(seq);
    }

    /// Reset the applied cursor after a state load; the caller guarantees
    /// the cursor matches its own application progress.
    pub(crate) fn set_applied_cursor(&mut self, v: Option<DeliverySeq>) {
        self.applied_upto = v;
    }

    /// Remove all slots with delivery sequence ≤ `upto`. Returns how many
    /// slots were removed. Surviving slots keep their delivery sequence.
    pub fn prune_upto(&mut self, upto: DeliverySeq) -> usize {
        let mut removed = 0;
        while let Some(front) = self.slots.front() {
            if front.delivery_seq <= upto {
                self.slots.pop_front();
                removed += 1;
            } else {
                break;
            }
        }
        if removed > 0 {
            self.pruned_upto = Some(self.pruned_upto.map_or(upto, |p| p.max(upto)));
        }
        removed
    }

    /// Rebuild a queue from decoded parts, re-validating the invariants.
    pub fn restore(
        next_seq: DeliverySeq,
        applied_upto: Option<DeliverySeq>,
        pruned_upto: Option<DeliverySeq>,
        slots: Vec<DeliverySlot>,
    ) -> Option<Self> {
        let mut expected = pruned_upto.map_or(0, |p| p + 1);
        let mut prev_key = None;
        for s in &slots {
            if s.delivery_seq != expected {
                return None;
            }
            if let Some(k) = prev_key {
                if s.order_key() <= k {
                    return None;
                }
            }
            prev_key = Some(s.order_key());
            expected += 1;
        }
        if expected != next_seq {
            return None;
        }
        Some(DeliveryQueue {
            slots: slots.into(),
            next_seq,
            applied_upto,
            pruned_upto,
        })
    }

    /// Canonical byte serialization: length-prefixed, little-endian.
    /// Layout per slot: cycle u64, rank u64, delivery_seq u64, sender base
    /// u64, sender join timestamp u64, event seq u64, payload tag u8
    /// (0 = operation, 1 = empty) and for operations a u32 length plus bytes.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.u64(self.next_seq);
        w.u64(codec::opt_seq(self.applied_upto));
        w.u64(codec::opt_seq(self.pruned_upto));
        w.u32(self.slots.len() as u32);
        for s in &self.slots {
            w.u64(s.cycle);
            w.u64(s.rank);
            w.u64(s.delivery_seq);
            w.u64(s.event.sender.base);
            w.u64(s.event.sender.joined_at);
            w.u64(s.event.seq);
            match &s.event.payload {
                Payload::Operation(bytes) => {
                    w.u8(0);
                    w.bytes(bytes);
                }
                Payload::Empty => w.u8(1),
                Payload::Bottom => unreachable!("bottom payloads never enter the queue"),
            }
        }
        w.finish()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::id::SenderId;
    use proptest::prelude::*;

    fn ev(base: u64, seq: u64) -> Event {
        Event::new(SenderId::new(base, 0), seq, Payload::Operation(vec![1]))
    }

    #[test]
    fn order_key_sorts_by_cycle_then_rank() {
        let mk = |c, r| DeliverySlot {
            cycle: c,
            rank: r,
            delivery_seq: 0,
            event: ev(0, 0),
        };
        assert!(mk(3, 0).order_key() < mk(3, 1).order_key());
        assert!(mk(3, 9).order_key() < mk(4, 0).order_key());
        let mut v = vec![mk(4, 1), mk(3, 2), mk(3, 0)];
        v.sort_by_key(|s| s.order_key());
        let keys: Vec<_> = v.iter().map(|s| s.order_key()).collect();
        assert_eq!(keys, vec![(3, 0), (3, 2), (4, 1)]);
    }

    #[test]
    fn delivery_seq_starts_at_zero_and_is_consecutive() {
        let mut q = DeliveryQueue::new();
        assert_eq!(q.push(0, 0, ev(1, 0)), 0);
        assert_eq!(q.push(0, 1, ev(2, 0)), 1);
        assert_eq!(q.push(1, 0, ev(1, 1)), 2);
        assert_eq!(q.delivery_seq_of(0, 0), Some(0));
        assert_eq!(q.delivery_seq_of(0, 1), Some(1));
        assert_eq!(q.delivery_seq_of(1, 0), Some(2));
        assert_eq!(q.delivery_seq_of(1, 1), None);
    }

    #[test]
    fn pruning_keeps_delivery_seq_of_survivors() {
        let mut q = DeliveryQueue::new();
        q.push(0, 0, ev(1, 0));
        q.push(0, 1, ev(2, 0));
        q.push(1, 0, ev(1, 1));
        let removed = q.prune_upto(1);
        assert_eq!(removed, 2);
        // The third slot keeps its sequence, as replaying the insertions
        // against a plain counter would give.
        assert_eq!(q.delivery_seq_of(1, 0), Some(2));
        assert_eq!(q.pruned_upto(), Some(1));
        assert!(q.slot_at(0).is_none());
        assert_eq!(q.slot_at(2).unwrap().delivery_seq, 2);
    }

    #[test]
    fn last_applied_tracks_application_not_receipt() {
        let mut q = DeliveryQueue::new();
        assert_eq!(q.last_applied(), None);
        for i in 0..6 {
            q.push(i, 0, ev(1, i));
        }
        q.mark_applied(4);
        assert_eq!(q.last_applied(), Some(4));
        // Slot 5 is delivered but not applied; λ_c stays at 4.
        assert_eq!(q.len(), 6);
        assert_eq!(q.last_applied(), Some(4));
    }

    proptest! {
        // λ equals the insertion index for any key-ordered insertion
        // sequence, and pruning never changes surviving λ values.
        #[test]
        fn lambda_matches_insertion_counter(
            ranks in proptest::collection::vec(0u64..4, 1..40),
            prune_at in 0u64..40,
        ) {
            let mut q = DeliveryQueue::new();
            let mut keys = Vec::new();
            let mut cycle = 0;
            let mut rank = 0;
            for (i, r) in ranks.iter().enumerate() {
                // Construct strictly increasing keys.
                if *r == 0 {
                    cycle += 1;
                    rank = 0;
                } else {
                    rank += r;
                }
                let lam = q.push(cycle, rank, ev(1, i as u64));
                prop_assert_eq!(lam, i as u64);
                keys.push((cycle, rank, lam));
            }
            q.prune_upto(prune_at);
            for (c, r, lam) in keys {
                if lam > prune_at {
                    prop_assert_eq!(q.delivery_seq_of(c, r), Some(lam));
                } else {
                    prop_assert_eq!(q.delivery_seq_of(c, r), None);
                }
            }
        }
    }
}
