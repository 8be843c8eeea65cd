//! Per-cycle consensus: deciding the events of a cycle when a replica
//! misses an expected event.
//!
//! The leader keeps a ledger of queried cycles, runs one instance per cycle,
//! collects proposals from every live member, and decides per slot: any
//! proposed real event wins, otherwise Empty.

use std::collections::{BTreeMap, BTreeSet};

use crate::event::{Event, Payload};
use crate::id::{Cycle, ReplicaId, Seq, SenderId};

/// Expected window of one sender inside a consensus request.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct SenderWindow {
    pub sender: SenderId,
    pub min_seq: Seq,
    pub max_seq: Seq,
}

impl SenderWindow {
    pub fn seqs(&self) -> impl Iterator<Item = Seq> + '_ {
        self.min_seq..=self.max_seq
    }
}

/// The windows a consensus instance covers, sorted by sender.
pub type WindowSet = Vec<SenderWindow>;

/// A replica's proposal: every queried slot it actually holds.
/// Slots it lacks are implicitly Bottom.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct Proposal {
    pub replica: ReplicaId,
    pub cycle: Cycle,
    pub entries: Vec<Event>,
}

/// The decided events of one cycle, sorted by (sender, seq).
pub type DecisionSet = Vec<Event>;

#[derive(Clone, Debug)]
pub struct Instance {
    pub windows: WindowSet,
    pub proposals: BTreeMap<ReplicaId, Vec<Event>>,
}

/// Leader-side consensus bookkeeping.
#[derive(Clone, Debug, Default)]
pub struct ConsensusLedger {
    /// Queried cycles waiting for an instance (the paper's P).
    pending: BTreeMap<Cycle, WindowSet>,
    /// Cycles with a running instance (the paper's Z, with proposals Q).
    in_flight: BTreeMap<Cycle, Instance>,
}

impl ConsensusLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn clear(&mut self) {
        self.pending.clear();
        self.in_flight.clear();
    }

    pub fn is_pending(&self, cycle: Cycle) -> bool {
        self.pending.contains_key(&cycle)
    }

    pub fn is_in_flight(&self, cycle: Cycle) -> bool {
        self.in_flight.contains_key(&cycle)
    }

    pub fn in_flight_cycles(&self) -> impl Iterator<Item = Cycle> + '_ {
        self.in_flight.keys().copied()
    }

    pub fn has_work(&self) -> bool {
        !self.pending.is_empty()
    }

    /// Queue a query whose events the leader cannot answer locally.
    /// Duplicate queries for a cycle already pending or in flight are
    /// ignored.
    pub fn enqueue(&mut self, cycle: Cycle, windows: WindowSet) -> bool {
        if self.in_flight.contains_key(&cycle) || self.pending.contains_key(&cycle) {
            return false;
        }
        self.pending.insert(cycle, windows);
        true
    }

    /// Move every pending cycle into an instance, returning the
    /// (cycle, windows) pairs whose QUERY must now be broadcast.
    pub fn start_instances(&mut self) -> Vec<(Cycle, WindowSet)> {
        let mut started = Vec::new();
        let cycles: Vec<Cycle> = self.pending.keys().copied().collect();
        for cycle in cycles {
            if self.in_flight.contains_key(&cycle) {
                self.pending.remove(&cycle);
                continue;
            }
            let windows = self.pending.remove(&cycle).unwrap();
            self.in_flight.insert(
                cycle,
                Instance {
                    windows: windows.clone(),
                    proposals: BTreeMap::new(),
                },
            );
            started.push((cycle, windows));
        }
        started
    }

    /// Record a proposal. Returns true if the instance exists.
    pub fn record_proposal(&mut self, proposal: Proposal) -> bool {
        match self.in_flight.get_mut(&proposal.cycle) {
            Some(inst) => {
                inst.proposals.insert(proposal.replica, proposal.entries);
                true
            }
            None => false,
        }
    }

    /// Cycles whose instances now have proposals from every member of
    /// `live`, decided and removed from the ledger. The live set is
    /// re-evaluated on every call, so members failing mid-instance shrink
    /// the wait.
    pub fn ripe_decisions(&mut self, live: &BTreeSet<ReplicaId>) -> Vec<(Cycle, DecisionSet)> {
        let ready: Vec<Cycle> = self
            .in_flight
            .iter()
            .filter(|(_, inst)| live.iter().all(|r| inst.proposals.contains_key(r)))
            .map(|(c, _)| *c)
            .collect();
        let mut out = Vec::new();
        for cycle in ready {
            let inst = self.in_flight.remove(&cycle).unwrap();
            out.push((cycle, decide(&inst.windows, &inst.proposals)));
        }
        out
    }
}

/// Decide the events of a cycle from the collected proposals: for each
/// queried (sender, seq), any proposed real event wins (lowest proposer id
/// breaks ties deterministically); otherwise Empty is decided.
pub fn decide(windows: &WindowSet, proposals: &BTreeMap<ReplicaId, Vec<Event>>) -> DecisionSet {
    let mut proposed: BTreeMap<(SenderId, Seq), Event> = BTreeMap::new();
    for entries in proposals.values() {
        for e in entries {
            debug_assert!(e.payload.is_operation(), "proposals carry real events only");
            proposed.entry(e.key()).or_insert_with(|| e.clone());
        }
    }
    let mut decision = Vec::new();
    for w in windows {
        for seq in w.seqs() {
            match proposed.get(&(w.sender, seq)) {
                Some(e) => decision.push(e.clone()),
                None => decision.push(Event::new(w.sender, seq, Payload::Empty)),
            }
        }
    }
    decision
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sid(base: u64) -> SenderId {
        SenderId::new(base, 0)
    }

    fn op(sender: SenderId, seq: Seq) -> Event {
        Event::new(sender, seq, Payload::Operation(vec![seq as u8]))
    }

    fn windows(sender: SenderId, min: Seq, max: Seq) -> WindowSet {
        vec![SenderWindow {
            sender,
            min_seq: min,
            max_seq: max,
        }]
    }

    #[test]
    fn real_event_beats_bottom() {
        let s = sid(1);
        let mut proposals = BTreeMap::new();
        proposals.insert(ReplicaId(0), vec![]);
        proposals.insert(ReplicaId(1), vec![op(s, 3)]);
        proposals.insert(ReplicaId(2), vec![]);
        let d = decide(&windows(s, 3, 3), &proposals);
        assert_eq!(d, vec![op(s, 3)]);
    }

    #[test]
    fn all_bottom_decides_empty() {
        let s = sid(1);
        let mut proposals = BTreeMap::new();
        for r in 0..3 {
            proposals.insert(ReplicaId(r), vec![]);
        }
        let d = decide(&windows(s, 3, 3), &proposals);
        assert_eq!(d, vec![Event::new(s, 3, Payload::Empty)]);
    }

    #[test]
    fn per_seq_decisions_are_independent() {
        // Brute-force every knowledge pattern of 3 replicas × 3 seqs and
        // check: decided non-Empty iff somebody proposed it.
        let s = sid(1);
        let w = windows(s, 3, 5);
        for pattern in 0u32..(1 << 9) {
            let mut proposals = BTreeMap::new();
            for r in 0..3u32 {
                let mut entries = Vec::new();
                for k in 0..3u32 {
                    if pattern & (1 << (r * 3 + k)) != 0 {
                        entries.push(op(s, 3 + k as u64));
                    }
                }
                proposals.insert(ReplicaId(r), entries);
            }
            let d = decide(&w, &proposals);
            assert_eq!(d.len(), 3);
            for (k, e) in d.iter().enumerate() {
                let anyone = (0..3).any(|r| pattern & (1 << (r * 3 + k)) != 0);
                assert_eq!(e.payload.is_operation(), anyone, "pattern {pattern:b}");
                assert_eq!(e.seq, 3 + k as u64);
            }
        }
    }

    #[test]
    fn ledger_dedups_cycles() {
        let s = sid(1);
        let mut ledger = ConsensusLedger::new();
        assert!(ledger.enqueue(5, windows(s, 0, 0)));
        assert!(!ledger.enqueue(5, windows(s, 0, 0)));
        let started = ledger.start_instances();
        assert_eq!(started.len(), 1);
        // A duplicate query for an in-flight cycle is ignored.
        assert!(!ledger.enqueue(5, windows(s, 0, 0)));
        assert!(ledger.is_in_flight(5));
    }

    #[test]
    fn two_pending_cycles_become_independent_instances() {
        let s = sid(1);
        let mut ledger = ConsensusLedger::new();
        ledger.enqueue(5, windows(s, 0, 0));
        ledger.enqueue(6, windows(s, 0, 1));
        let started = ledger.start_instances();
        assert_eq!(started.len(), 2);
        assert!(ledger.is_in_flight(5) && ledger.is_in_flight(6));
    }

    #[test]
    fn decision_waits_for_all_live_members() {
        let s = sid(1);
        let mut ledger = ConsensusLedger::new();
        ledger.enqueue(5, windows(s, 0, 0));
        ledger.start_instances();
        let live: BTreeSet<ReplicaId> = [ReplicaId(0), ReplicaId(1)].into();
        ledger.record_proposal(Proposal {
            replica: ReplicaId(0),
            cycle: 5,
            entries: vec![op(s, 0)],
        });
        assert!(ledger.ripe_decisions(&live).is_empty());
        ledger.record_proposal(Proposal {
            replica: ReplicaId(1),
            cycle: 5,
            entries: vec![],
        });
        let decided = ledger.ripe_decisions(&live);
        assert_eq!(decided.len(), 1);
        assert!(!ledger.is_in_flight(5));
    }

    #[test]
    fn shrinking_live_set_unblocks_a_decision() {
        let s = sid(1);
        let mut ledger = ConsensusLedger::new();
        ledger.enqueue(5, windows(s, 0, 0));
        ledger.start_instances();
        ledger.record_proposal(Proposal {
            replica: ReplicaId(0),
            cycle: 5,
            entries: vec![],
        });
        let full: BTreeSet<ReplicaId> = [ReplicaId(0), ReplicaId(1)].into();
        assert!(ledger.ripe_decisions(&full).is_empty());
        let shrunk: BTreeSet<ReplicaId> = [ReplicaId(0)].into();
        assert_eq!(ledger.ripe_decisions(&shrunk).len(), 1);
    }
}
