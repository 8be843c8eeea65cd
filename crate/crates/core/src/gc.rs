//! Gossip-driven garbage collection of the delivery queue.
//!
//! Replicas periodically broadcast their last-applied delivery sequence.
//! Once reports from every live group member are held, the minimum is the
//! group-wide common latest applied event; everything at or below it can be
//! pruned, except that a prune reaching the very end of the queue walks back
//! past trailing Empty slots, which later consensus rounds may still need.

use std::collections::{BTreeMap, BTreeSet};

use crate::id::{DeliverySeq, ReplicaId};
use crate::queue::DeliveryQueue;

#[derive(Clone, Debug, Default)]
pub struct GossipState {
    /// Latest reported λ_c per replica (the paper's A). Reports are
    /// monotone per replica; stale ones are ignored.
    acks: BTreeMap<ReplicaId, DeliverySeq>,
}

/// Outcome of handling one gossip report.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum GcOutcome {
    /// Not enough information to prune.
    NoOp,
    /// Pruned all slots with delivery sequence ≤ the contained watermark.
    Pruned { upto: DeliverySeq, removed: usize },
}

impl GossipState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn report(&self, replica: &ReplicaId) -> Option<DeliverySeq> {
        self.acks.get(replica).copied()
    }

    /// Drop reports from replicas no longer in the group and require fresh
    /// reports from new members before the next prune.
    pub fn retain_members(&mut self, members: &BTreeSet<ReplicaId>) {
        self.acks.retain(|r, _| members.contains(r));
    }

    /// Handle a λ_c report. `members` is the set whose reports gate pruning
    /// (the live group members). Reports from outside it are ignored.
    pub fn on_lambda(
        &mut self,
        from: ReplicaId,
        lambda: DeliverySeq,
        members: &BTreeSet<ReplicaId>,
        queue: &mut DeliveryQueue,
    ) -> GcOutcome {
        if !members.contains(&from) {
            return GcOutcome::NoOp;
        }
        match self.acks.get(&from) {
            Some(&prev) if lambda <= prev => return GcOutcome::NoOp,
            _ => {
                self.acks.insert(from, lambda);
            }
        }
        self.try_prune(members, queue)
    }

    /// Prune if reports from every member are held.
    pub fn try_prune(
        &mut self,
        members: &BTreeSet<ReplicaId>,
        queue: &mut DeliveryQueue,
    ) -> GcOutcome {
        if members.is_empty() || !members.iter().all(|r| self.acks.contains_key(r)) {
            return GcOutcome::NoOp;
        }
        let mut cle = members
            .iter()
            .map(|r| self.acks[r])
            .min()
            .expect("non-empty");

        // Trailing rounds with Empty events stay: when the watermark reaches
        // the queue's last slot, step it back past every trailing Empty.
        if let Some(last) = queue.last_slot() {
            if last.delivery_seq == cle {
                loop {
                    match queue.slot_at(cle) {
                        Some(slot) if slot.event.payload.is_empty_event() => {
                            if cle == 0 {
                                return GcOutcome::NoOp;
                            }
                            match queue.slot_at(cle - 1) {
                                Some(_) => cle -= 1,
                                None => return GcOutcome::NoOp,
                            }
                        }
                        _ => break,
                    }
                }
            }
        }

        let removed = queue.prune_upto(cle);
        if removed == 0 {
            GcOutcome::NoOp
        } else {
            GcOutcome::Pruned { upto: cle, removed }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::event::{Event, Payload};
    use crate::id::SenderId;

    fn members(ids: &[u32]) -> BTreeSet<ReplicaId> {
        ids.iter().map(|&i| ReplicaId(i)).collect()
    }

    fn queue_with(payloads: &[Payload]) -> DeliveryQueue {
        let mut q = DeliveryQueue::new();
        for (i, p) in payloads.iter().enumerate() {
            q.push(i as u64, 0, Event::new(SenderId::new(1, 0), i as u64, p.clone()));
        }
        q
    }

    fn ops(n: usize) -> Vec<Payload> {
        (0..n).map(|i| Payload::Operation(vec![i as u8])).collect()
    }

    #[test]
    fn prunes_at_the_minimum_report() {
        // A = {r1:12, r2:9, r3:15}, |G|=3 → λ_cle = 9, prune λ ≤ 9.
        let m = members(&[1, 2, 3]);
        let mut q = queue_with(&ops(16));
        let mut g = GossipState::new();
        assert_eq!(g.on_lambda(ReplicaId(1), 12, &m, &mut q), GcOutcome::NoOp);
        assert_eq!(g.on_lambda(ReplicaId(2), 9, &m, &mut q), GcOutcome::NoOp);
        let out = g.on_lambda(ReplicaId(3), 15, &m, &mut q);
        assert_eq!(out, GcOutcome::Pruned { upto: 9, removed: 10 });
        assert_eq!(q.len(), 6);
        assert_eq!(q.slots().next().unwrap().delivery_seq, 10);
    }

    #[test]
    fn incomplete_coverage_blocks_pruning() {
        let m = members(&[1, 2, 3]);
        let mut q = queue_with(&ops(16));
        let mut g = GossipState::new();
        g.on_lambda(ReplicaId(1), 12, &m, &mut q);
        let out = g.on_lambda(ReplicaId(2), 9, &m, &mut q);
        assert_eq!(out, GcOutcome::NoOp);
        assert_eq!(q.len(), 16);
    }

    #[test]
    fn trailing_empties_survive() {
        // Watermark reaches the last slot and the last two slots are Empty:
        // the watermark steps back past both before pruning.
        let mut payloads = ops(4);
        payloads.push(Payload::Empty);
        payloads.push(Payload::Empty);
        let m = members(&[1, 2]);
        let mut q = queue_with(&payloads);
        let mut g = GossipState::new();
        g.on_lambda(ReplicaId(1), 5, &m, &mut q);
        let out = g.on_lambda(ReplicaId(2), 5, &m, &mut q);
        assert_eq!(out, GcOutcome::Pruned { upto: 3, removed: 4 });
        // The two Empty slots remain available to later consensus rounds.
        assert_eq!(q.len(), 2);
        assert!(q
            .slots()
            .all(|s| s.event.payload.is_empty_event() && s.delivery_seq >= 4));
    }

    #[test]
    fn interior_watermark_skips_the_trailing_walk() {
        // λ_cle is not the last slot: Empty slots at the tail are untouched
        // and the prune applies directly.
        let mut payloads = ops(4);
        payloads.push(Payload::Empty);
        let m = members(&[1, 2]);
        let mut q = queue_with(&payloads);
        let mut g = GossipState::new();
        g.on_lambda(ReplicaId(1), 2, &m, &mut q);
        let out = g.on_lambda(ReplicaId(2), 3, &m, &mut q);
        assert_eq!(out, GcOutcome::Pruned { upto: 2, removed: 3 });
    }

    #[test]
    fn stale_reports_ignored() {
        let m = members(&[1, 2]);
        let mut q = queue_with(&ops(8));
        let mut g = GossipState::new();
        g.on_lambda(ReplicaId(1), 5, &m, &mut q);
        g.on_lambda(ReplicaId(1), 3, &m, &mut q);
        assert_eq!(g.report(&ReplicaId(1)), Some(5));
    }

    #[test]
    fn non_member_reports_ignored() {
        let m = members(&[1, 2]);
        let mut q = queue_with(&ops(8));
        let mut g = GossipState::new();
        g.on_lambda(ReplicaId(1), 5, &m, &mut q);
        assert_eq!(g.on_lambda(ReplicaId(9), 7, &m, &mut q), GcOutcome::NoOp);
        assert_eq!(g.report(&ReplicaId(9)), None);
    }

    #[test]
    fn membership_change_resets_removed_members() {
        let m = members(&[1, 2]);
        let mut q = queue_with(&ops(8));
        let mut g = GossipState::new();
        g.on_lambda(ReplicaId(1), 5, &m, &mut q);
        g.on_lambda(ReplicaId(2), 6, &m, &mut q);
        let grown = members(&[1, 3]);
        g.retain_members(&grown);
        assert_eq!(g.report(&ReplicaId(2)), None);
        // No pruning until the new member reports.
        assert_eq!(g.try_prune(&grown, &mut q), GcOutcome::NoOp);
    }
}
