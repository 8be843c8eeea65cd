//! Group state, leader selection, and the state-synchrony merge used by
//! leader election and group reconfiguration.

use std::collections::{BTreeMap, BTreeSet};

use crate::apply::StateDigest;
use crate::consensus::DecisionSet;
use crate::error::ProtocolError;
use crate::id::{Cycle, DeliverySeq, Micros, ReplicaId};
use crate::queue::DeliveryQueue;
use crate::sender::SenderRecord;

/// Group membership and protocol flags on one replica.
#[derive(Clone, Debug)]
pub struct GroupState {
    /// Configured members (the paper's G).
    pub members: BTreeSet<ReplicaId>,
    /// Live replicas as reported by the Rendezvous (R).
    pub live: BTreeSet<ReplicaId>,
    /// Cached target of the reconfiguration in progress (G_T).
    pub reconfig_target: Option<BTreeSet<ReplicaId>>,
    pub leader: Option<ReplicaId>,
    pub candidate: Option<ReplicaId>,
    pub epoch: u64,
    pub cid: u64,
    pub ages: BTreeMap<ReplicaId, u64>,
    /// Leader election in progress; suppresses everything else.
    pub le: bool,
    /// Group reconfiguration in progress; suppresses consensus.
    pub gr: bool,
    pub new_replica: bool,
}

impl GroupState {
    pub fn new(members: BTreeSet<ReplicaId>, leader: ReplicaId) -> Self {
        let ages = members.iter().map(|&r| (r, 0)).collect();
        GroupState {
            live: members.clone(),
            members,
            reconfig_target: None,
            leader: Some(leader),
            candidate: None,
            epoch: 0,
            cid: 0,
            ages,
            le: false,
            gr: false,
            new_replica: false,
        }
    }

    /// A blank state for a replica spawned by the Rendezvous; it learns
    /// everything from the first LOAD it receives.
    pub fn blank() -> Self {
        GroupState {
            members: BTreeSet::new(),
            live: BTreeSet::new(),
            reconfig_target: None,
            leader: None,
            candidate: None,
            epoch: 0,
            cid: 0,
            ages: BTreeMap::new(),
            le: false,
            gr: false,
            new_replica: true,
        }
    }

    /// Live configured members (G ∩ R).
    pub fn live_members(&self) -> BTreeSet<ReplicaId> {
        self.members.intersection(&self.live).copied().collect()
    }

    pub fn leader_is_live(&self) -> bool {
        self.leader.is_some_and(|l| self.live.contains(&l))
    }

    /// Whether consensus message handling is currently allowed.
    pub fn consensus_allowed(&self) -> bool {
        !self.le && !self.gr
    }
}

/// Leader selection: the youngest live member, ties broken by smallest id.
pub fn select_leader(
    candidates: &BTreeSet<ReplicaId>,
    ages: &BTreeMap<ReplicaId, u64>,
) -> Result<ReplicaId, ProtocolError> {
    candidates
        .iter()
        .min_by_key(|r| (ages.get(r).copied().unwrap_or(0), **r))
        .copied()
        .ok_or(ProtocolError::NoCandidate)
}

/// One replica's contribution to state synchronization: its log plus the
/// delivery bookkeeping that must travel with it.
#[derive(Clone, PartialEq, Debug)]
pub struct SyncState {
    pub queue: DeliveryQueue,
    /// Next cycle this replica would deliver.
    pub next_cycle: Cycle,
    pub senders: Vec<SenderRecord>,
    pub decided: BTreeMap<Cycle, DecisionSet>,
    pub cid: u64,
    pub members: BTreeSet<ReplicaId>,
    pub epoch: u64,
}

/// Initialization data for replicas that joined without history.
#[derive(Clone, PartialEq, Debug)]
pub struct InitState {
    /// Start of cycle 0 on the group grid.
    pub origin: Micros,
    pub applied_upto: Option<DeliverySeq>,
    pub app_digest: StateDigest,
    pub ages: BTreeMap<ReplicaId, u64>,
}

/// The package broadcast at the end of an election or reconfiguration.
#[derive(Clone, PartialEq, Debug)]
pub struct SyncPackage {
    pub queue: DeliveryQueue,
    pub next_cycle: Cycle,
    pub senders: Vec<SenderRecord>,
    pub decided: BTreeMap<Cycle, DecisionSet>,
    pub cid: u64,
    pub members: BTreeSet<ReplicaId>,
    pub epoch: u64,
    pub init: InitState,
}

/// Merge the states collected from every live member: the longest queue
/// wins (asserting the prefix relationship total order guarantees), decided
/// sets union, and the latest configuration and epoch are kept.
pub fn merge_states(states: &[SyncState]) -> Result<SyncState, ProtocolError> {
    assert!(!states.is_empty(), "merge requires at least one state");
    let mut longest = &states[0];
    for s in &states[1..] {
        assert_prefix(&longest.queue, &s.queue)?;
        if s.queue.next_seq() > longest.queue.next_seq() {
            longest = s;
        }
    }
    let mut decided: BTreeMap<Cycle, DecisionSet> = BTreeMap::new();
    for s in states {
        for (cycle, set) in &s.decided {
            let entry = decided.entry(*cycle).or_default();
            for e in set {
                if !entry.iter().any(|x| x.key() == e.key()) {
                    entry.push(e.clone());
                }
            }
        }
    }
    for set in decided.values_mut() {
        set.sort_by_key(|e| e.key());
    }
    let (cid, members) = states
        .iter()
        .max_by_key(|s| s.cid)
        .map(|s| (s.cid, s.members.clone()))
        .unwrap();
    let epoch = states.iter().map(|s| s.epoch).max().unwrap();
    Ok(SyncState {
        queue: longest.queue.clone(),
        next_cycle: longest.next_cycle,
        senders: longest.senders.clone(),
        decided,
        cid,
        members,
        epoch,
    })
}

/// The shorter queue must be a prefix of the longer over their overlap;
/// anything else falsifies total-order delivery and fails loudly.
fn assert_prefix(a: &DeliveryQueue, b: &DeliveryQueue) -> Result<(), ProtocolError> {
    let lo = a
        .slots()
        .next()
        .map(|s| s.delivery_seq)
        .unwrap_or(0)
        .max(b.slots().next().map(|s| s.delivery_seq).unwrap_or(0));
    let hi = a.next_seq().min(b.next_seq());
    for seq in lo..hi {
        let (sa, sb) = (a.slot_at(seq), b.slot_at(seq));
        match (sa, sb) {
            (Some(x), Some(y)) if x == y => {}
            (None, _) | (_, None) => {}
            (Some(x), Some(y)) => {
                return Err(ProtocolError::MergeConflict(format!(
                    "slot {seq} differs: {:?} vs {:?}",
                    x.order_key(),
                    y.order_key()
                )));
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::event::{Event, Payload};
    use crate::id::SenderId;

    fn ages(pairs: &[(u32, u64)]) -> BTreeMap<ReplicaId, u64> {
        pairs.iter().map(|&(r, a)| (ReplicaId(r), a)).collect()
    }

    fn set(ids: &[u32]) -> BTreeSet<ReplicaId> {
        ids.iter().map(|&i| ReplicaId(i)).collect()
    }

    #[test]
    fn youngest_wins() {
        let a = ages(&[(1, 3), (2, 1), (3, 2)]);
        assert_eq!(select_leader(&set(&[1, 2, 3]), &a).unwrap(), ReplicaId(2));
    }

    #[test]
    fn age_tie_broken_by_smallest_id() {
        let a = ages(&[(5, 1), (2, 1)]);
        assert_eq!(select_leader(&set(&[5, 2]), &a).unwrap(), ReplicaId(2));
    }

    #[test]
    fn singleton_selects_itself() {
        let a = ages(&[(4, 9)]);
        assert_eq!(select_leader(&set(&[4]), &a).unwrap(), ReplicaId(4));
    }

    #[test]
    fn empty_candidate_set_errors() {
        assert!(select_leader(&set(&[]), &ages(&[])).is_err());
    }

    fn queue_of(n: u64) -> DeliveryQueue {
        let mut q = DeliveryQueue::new();
        for i in 0..n {
            q.push(
                i,
                0,
                Event::new(SenderId::new(1, 0), i, Payload::Operation(vec![i as u8])),
            );
        }
        q
    }

    fn sync(n: u64, cid: u64, epoch: u64) -> SyncState {
        SyncState {
            queue: queue_of(n),
            next_cycle: n,
            senders: vec![],
            decided: BTreeMap::new(),
            cid,
            members: set(&[1, 2, 3]),
            epoch,
        }
    }

    #[test]
    fn identical_states_merge_to_identity() {
        let s = sync(10, 1, 4);
        let merged = merge_states(&[s.clone(), s.clone()]).unwrap();
        assert_eq!(merged.queue, s.queue);
        assert_eq!(merged.cid, 1);
        assert_eq!(merged.epoch, 4);
    }

    #[test]
    fn longest_queue_wins() {
        // Queues of length 10, 10, and 12 where the 12 extends the others.
        let merged = merge_states(&[sync(10, 0, 4), sync(10, 0, 4), sync(12, 0, 5)]).unwrap();
        assert_eq!(merged.queue.next_seq(), 12);
        assert_eq!(merged.next_cycle, 12);
        // Latest epoch over {4,4,5} is 5; the election increments it to 6.
        assert_eq!(merged.epoch, 5);
    }

    #[test]
    fn decided_sets_union() {
        let mut a = sync(3, 0, 0);
        a.decided
            .insert(5, vec![Event::new(SenderId::new(1, 0), 5, Payload::Empty)]);
        let mut b = sync(3, 0, 0);
        b.decided
            .insert(5, vec![Event::new(SenderId::new(1, 0), 5, Payload::Empty)]);
        b.decided
            .insert(6, vec![Event::new(SenderId::new(1, 0), 6, Payload::Empty)]);
        let merged = merge_states(&[a, b]).unwrap();
        assert_eq!(merged.decided.len(), 2);
        assert_eq!(merged.decided[&5].len(), 1);
    }

    #[test]
    fn non_prefix_queues_fail_loudly() {
        let mut a = sync(3, 0, 0);
        let mut divergent = DeliveryQueue::new();
        divergent.push(
            0,
            0,
            Event::new(SenderId::new(9, 0), 0, Payload::Operation(vec![9])),
        );
        a.queue = divergent;
        let b = sync(3, 0, 0);
        assert!(merge_states(&[a, b]).is_err());
    }
}
