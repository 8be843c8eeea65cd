//! The replica state machine.
//!
//! A replica is a single-threaded deterministic machine consuming
//! timestamped inputs (messages and timer fires) and producing outgoing
//! sends plus observations for the harness. Event collection is
//! deadline-driven on the group's cycle grid; delivery walks cycles in
//! order, taking the fast path when every expected event is present and
//! falling back to leader-coordinated consensus otherwise. Consensus
//! queries for successive stuck cycles are pipelined so delivery throughput
//! is not bounded by one instance round-trip per cycle.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use crate::apply::{ApplyState, StateDigest};
use crate::clock::{CycleClock, TimingParams};
use crate::collect::{LateMode, ReceiveBuffer};
use crate::consensus::{ConsensusLedger, DecisionSet, Proposal, SenderWindow, WindowSet};
use crate::event::{Event, Payload};
use crate::gc::{GcOutcome, GossipState};
use crate::id::{ClientId, Cycle, DeliverySeq, Micros, ReplicaId, SenderId, Seq};
use crate::interaction::AppOp;
use crate::membership::{
    merge_states, select_leader, GroupState, InitState, SyncPackage, SyncState,
};
use crate::messages::Message;
use crate::queue::DeliveryQueue;
use crate::sender::{SenderRecord, SenderTable};

/// Address of a transport endpoint.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Debug)]
pub enum NodeId {
    Replica(ReplicaId),
    Client(ClientId),
    Rendezvous,
}

#[derive(Clone, Debug)]
pub struct Send {
    pub to: NodeId,
    pub msg: Message,
    pub reliable: bool,
}

/// Inputs consumed by the state machine.
#[derive(Clone, Debug)]
pub enum Input {
    Message { from: NodeId, msg: Message },
    /// Fires at every cycle close on the group grid.
    CycleTick,
    /// Fires every garbage-collection gossip period.
    GossipTick,
}

/// Things the harness observes for metrics and global safety checks.
#[derive(Clone, Debug)]
pub enum Observation {
    /// A slot was handed to the application.
    Applied {
        cycle: Cycle,
        rank: u64,
        delivery_seq: DeliverySeq,
        event: Event,
        digest: StateDigest,
    },
    /// The expected windows used to deliver `cycle`.
    Windows { cycle: Cycle, windows: WindowSet },
    /// A delivered cycle, with whether consensus was involved.
    CycleDelivered { cycle: Cycle, via_consensus: bool },
    /// Slots pruned by garbage collection.
    Pruned { upto: DeliverySeq, removed: usize },
    /// A consensus query left this replica.
    QuerySent { cycle: Cycle },
    /// The leader started an instance.
    InstanceStarted { cycle: Cycle },
    /// State loaded from an election or reconfiguration package.
    StateLoaded {
        epoch: u64,
        cid: u64,
        queue_bytes: Vec<u8>,
        from_election: bool,
    },
    /// Candidate finished an election (all live members acked).
    ElectionCompleted { epoch: u64, leader: ReplicaId },
    /// Leader finished a reconfiguration broadcast.
    ReconfigCompleted { cid: u64, members: usize },
}

#[derive(Clone, Debug, Default)]
pub struct Output {
    pub sends: Vec<Send>,
    pub observations: Vec<Observation>,
}

impl Output {
    fn send(&mut self, to: NodeId, msg: Message, reliable: bool) {
        self.sends.push(Send { to, msg, reliable });
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum DeliverAttempt {
    Delivered,
    AwaitingConsensus,
    NotReady,
}

#[derive(Clone, Debug)]
pub struct ReplicaConfig {
    pub id: ReplicaId,
    pub timing: TimingParams,
    pub late_mode: LateMode,
    /// When false (the consensus-total-order baseline) every cycle is
    /// delivered through a leader-driven instance.
    pub fast_path: bool,
    pub gc_enabled: bool,
    /// Minimum group size n; also the margin, in cycles, a joining sender
    /// is scheduled behind the notifying event.
    pub group_min: u64,
    /// How many cycles past the delivery cursor may carry outstanding
    /// queries. Bounded by the join margin so query windows can never
    /// predate a sender's activation.
    pub pipeline: u64,
    /// Re-send an unanswered query after this long.
    pub requery_after: Micros,
}

#[derive(Clone, Debug, Default)]
pub struct Counters {
    pub queries_sent: u64,
    pub instances_started: u64,
    pub decided_cycles: u64,
    pub fast_cycles: u64,
    pub updates_sent: u64,
    pub decision_conflicts: u64,
    pub stale_messages: u64,
}

#[derive(Clone, Debug)]
struct ElectionState {
    states: BTreeMap<ReplicaId, SyncState>,
    acks: BTreeSet<ReplicaId>,
    package: Option<SyncPackage>,
}

#[derive(Clone, Debug)]
struct ReconfigState {
    states: BTreeMap<ReplicaId, SyncState>,
    target: BTreeSet<ReplicaId>,
}

pub struct Replica {
    pub cfg: ReplicaConfig,
    pub group: GroupState,
    clock: Option<CycleClock>,
    senders: SenderTable,
    rx: ReceiveBuffer,
    pub queue: DeliveryQueue,
    app: ApplyState,
    /// Decided events per cycle (the paper's E), consumed at delivery.
    decided: BTreeMap<Cycle, DecisionSet>,
    ledger: ConsensusLedger,
    gossip: GossipState,
    /// Next cycle to deliver.
    next_cycle: Cycle,
    /// Cycles with a leader-announced instance in flight; fast delivery of
    /// these is locked until the decision arrives.
    inflight: BTreeSet<Cycle>,
    /// Outstanding queries by cycle and send time.
    queries: BTreeMap<Cycle, Micros>,
    /// Update recipients (the paper's U): clients in scope.
    recipients: BTreeSet<ClientId>,
    election: Option<ElectionState>,
    reconfig: Option<ReconfigState>,
    /// Consensus traffic deferred while an election or reconfiguration is
    /// in progress.
    deferred: VecDeque<(NodeId, Message)>,
    /// Leader-side cursor for the consensus-total-order baseline.
    auto_enqueued_upto: Option<Cycle>,
    pub counters: Counters,
}

impl Replica {
    /// A founding member with the initial configuration.
    pub fn new_initial(
        cfg: ReplicaConfig,
        members: BTreeSet<ReplicaId>,
        origin: Micros,
        initial_senders: Vec<SenderRecord>,
        recipients: BTreeSet<ClientId>,
    ) -> Self {
        let leader = *members.iter().next().expect("group is non-empty");
        let clock = CycleClock::new(origin, cfg.timing);
        let mut senders = SenderTable::new();
        for rec in initial_senders {
            senders.insert(rec);
        }
        Replica {
            group: GroupState::new(members, leader),
            clock: Some(clock),
            senders,
            rx: ReceiveBuffer::new(),
            queue: DeliveryQueue::new(),
            app: ApplyState::new(),
            decided: BTreeMap::new(),
            ledger: ConsensusLedger::new(),
            gossip: GossipState::new(),
            next_cycle: 0,
            inflight: BTreeSet::new(),
            queries: BTreeMap::new(),
            recipients,
            election: None,
            reconfig: None,
            deferred: VecDeque::new(),
            auto_enqueued_upto: None,
            counters: Counters::default(),
            cfg,
        }
    }

    /// A replica spawned by the Rendezvous; everything comes from the first
    /// LOAD it receives.
    pub fn new_blank(cfg: ReplicaConfig) -> Self {
        Replica {
            group: GroupState::blank(),
            clock: None,
            senders: SenderTable::new(),
            rx: ReceiveBuffer::new(),
            queue: DeliveryQueue::new(),
            app: ApplyState::new(),
            decided: BTreeMap::new(),
            ledger: ConsensusLedger::new(),
            gossip: GossipState::new(),
            next_cycle: 0,
            inflight: BTreeSet::new(),
            queries: BTreeMap::new(),
            recipients: BTreeSet::new(),
            election: None,
            reconfig: None,
            deferred: VecDeque::new(),
            auto_enqueued_upto: None,
            counters: Counters::default(),
            cfg,
        }
    }

    pub fn id(&self) -> ReplicaId {
        self.cfg.id
    }

    pub fn is_initialized(&self) -> bool {
        self.clock.is_some()
    }

    pub fn clock(&self) -> Option<&CycleClock> {
        self.clock.as_ref()
    }

    pub fn app_digest(&self) -> StateDigest {
        self.app.digest()
    }

    pub fn applied_upto(&self) -> Option<DeliverySeq> {
        self.app.applied_upto()
    }

    pub fn queue_len(&self) -> usize {
        self.queue.len()
    }

    pub fn next_cycle(&self) -> Cycle {
        self.next_cycle
    }

    pub fn unknown_sender_drops(&self) -> u64 {
        self.rx.unknown_sender_drops
    }

    pub fn leader(&self) -> Option<ReplicaId> {
        self.group.leader
    }

    pub fn epoch(&self) -> u64 {
        self.group.epoch
    }

    pub fn decided_map(&self) -> &BTreeMap<Cycle, DecisionSet> {
        &self.decided
    }

    pub fn sender_records(&self) -> impl Iterator<Item = &SenderRecord> {
        self.senders.iter()
    }

    /// Next cycle-close instant after `now`, once the grid is known.
    pub fn next_cycle_tick(&self, now: Micros) -> Option<Micros> {
        self.clock.as_ref().map(|c| c.next_close(now))
    }

    pub fn handle(&mut self, input: Input, now: Micros) -> Output {
        let mut out = Output::default();
        match input {
            Input::CycleTick => self.on_cycle_tick(now, &mut out),
            Input::GossipTick => self.on_gossip_tick(now, &mut out),
            Input::Message { from, msg } => self.on_message(from, msg, now, &mut out),
        }
        self.pump(now, &mut out);
        out
    }

    fn on_cycle_tick(&mut self, now: Micros, out: &mut Output) {
        // Re-send queries that have gone unanswered, e.g. across a leader
        // change.
        let stale: Vec<Cycle> = self
            .queries
            .iter()
            .filter(|(c, sent)| {
                **c >= self.next_cycle
                    && !self.decided.contains_key(c)
                    && now.saturating_sub(**sent) >= self.cfg.requery_after
            })
            .map(|(c, _)| *c)
            .collect();
        for cycle in stale {
            self.send_query(cycle, now, out);
        }
        // Membership triggers are re-evaluated each cycle so a missed
        // notification cannot wedge the group.
        self.evaluate_membership(now, out);
    }

    fn on_gossip_tick(&mut self, _now: Micros, out: &mut Output) {
        if !self.cfg.gc_enabled || !self.is_initialized() {
            return;
        }
        let applied = self.app.applied_upto();
        let members = self.group.live_members();
        for r in &members {
            if *r != self.cfg.id {
                out.send(
                    NodeId::Replica(*r),
                    Message::GcLambda { applied },
                    false,
                );
            }
        }
        // Deliver the broadcast to ourselves directly.
        if let Some(lambda) = applied {
            self.gc_report(self.cfg.id, lambda, out);
        }
    }

    fn on_message(&mut self, from: NodeId, msg: Message, now: Micros, out: &mut Output) {
        match msg {
            Message::Event(event) => {
                self.rx.on_event_received(&self.senders, event);
            }
            Message::MemberState { live } => {
                self.group.live = live.into_iter().collect();
                self.evaluate_membership(now, out);
            }
            Message::GcLambda { applied } => {
                if let (NodeId::Replica(r), Some(lambda)) = (from, applied) {
                    self.gc_report(r, lambda, out);
                }
            }
            // Consensus traffic is deferred while an election or
            // reconfiguration is synchronizing state.
            Message::Query { .. }
            | Message::QueryReply { .. }
            | Message::QueryResult { .. }
            | Message::Decision { .. } => {
                if self.group.new_replica {
                    self.counters.stale_messages += 1;
                } else if !self.group.consensus_allowed() {
                    self.deferred.push_back((from, msg));
                } else {
                    self.on_consensus_message(from, msg, now, out);
                }
            }
            Message::LeQuery => {
                if let NodeId::Replica(candidate) = from {
                    self.on_le_query(candidate, out);
                }
            }
            Message::LeState(state) => {
                if let NodeId::Replica(r) = from {
                    self.on_le_state(r, state, now, out);
                }
            }
            Message::Nack { computed } => self.on_nack(computed, out),
            Message::LoadLeader(package) => {
                if let NodeId::Replica(candidate) = from {
                    self.on_load_leader(candidate, package, now, out);
                }
            }
            Message::Ack => {
                if let NodeId::Replica(r) = from {
                    self.on_ack(r, now, out);
                }
            }
            Message::GrQuery { epoch, cid } => {
                if let NodeId::Replica(leader) = from {
                    self.on_gr_query(leader, epoch, cid, out);
                }
            }
            Message::GeState(state) => {
                if let NodeId::Replica(r) = from {
                    self.on_ge_state(r, state, now, out);
                }
            }
            Message::LoadConfig { package, target } => {
                if let NodeId::Replica(leader) = from {
                    self.on_load_config(leader, package, target, now, out);
                }
            }
            Message::Update { .. }
            | Message::Handshake { .. }
            | Message::SenderConfig { .. }
            | Message::Heartbeat => {
                // Client- and Rendezvous-bound messages; not for replicas.
                self.counters.stale_messages += 1;
            }
        }
    }

    // ------------------------------------------------------------------
    // Delivery
    // ------------------------------------------------------------------

    /// Highest cycle whose collection deadline has passed.
    fn collected_upto(&self, now: Micros) -> Option<Cycle> {
        self.clock.as_ref().and_then(|c| c.closed_upto(now))
    }

    /// Drive delivery as far as possible, then issue queries for stuck
    /// cycles and run leader duties.
    fn pump(&mut self, now: Micros, out: &mut Output) {
        if self.group.le || self.group.gr || !self.is_initialized() {
            self.pump_leader(now, out);
            return;
        }
        loop {
            match self.try_deliver_cycle(now, out) {
                DeliverAttempt::Delivered => continue,
                DeliverAttempt::AwaitingConsensus | DeliverAttempt::NotReady => break,
            }
        }
        self.ensure_queries(now, out);
        self.pump_leader(now, out);
    }

    /// Attempt to deliver the next cycle: a consensus decision wins if one
    /// exists, otherwise the fast path runs when every expected event is
    /// present; a stuck cycle returns AwaitingConsensus once queried.
    fn try_deliver_cycle(&mut self, now: Micros, out: &mut Output) -> DeliverAttempt {
        let cycle = self.next_cycle;
        if self.decided.contains_key(&cycle) {
            self.deliver_decided(cycle, out);
            return DeliverAttempt::Delivered;
        }
        let Some(collected) = self.collected_upto(now) else {
            return DeliverAttempt::NotReady;
        };
        if cycle > collected {
            return DeliverAttempt::NotReady;
        }
        if self.cfg.fast_path
            && !self.inflight.contains(&cycle)
            && self
                .rx
                .cycle_complete(&self.senders, cycle, self.cfg.late_mode)
        {
            self.deliver_fast(cycle, out);
            return DeliverAttempt::Delivered;
        }
        if self.queries.contains_key(&cycle) || self.inflight.contains(&cycle) {
            DeliverAttempt::AwaitingConsensus
        } else if self.cfg.fast_path {
            self.send_query(cycle, now, out);
            DeliverAttempt::AwaitingConsensus
        } else {
            // Consensus-total-order baseline: the leader starts an instance
            // for every cycle; followers wait for decisions.
            DeliverAttempt::AwaitingConsensus
        }
    }

    /// Expected windows for `cycle` from current knowledge. At the delivery
    /// cursor these are the true Ω windows; past it they are supersets that
    /// later decisions filter down.
    fn window_set(&self, cycle: Cycle) -> WindowSet {
        let mut windows = Vec::new();
        for rec in self.senders.iter() {
            if !rec.active_at(cycle) {
                continue;
            }
            let top = rec.seq_of_cycle(cycle).expect("active checked");
            let min = match self.cfg.late_mode {
                LateMode::Dynamic => rec.next_expected().min(top),
                LateMode::SimpleDiscard => top,
            };
            windows.push(SenderWindow {
                sender: rec.id,
                min_seq: min,
                max_seq: top,
            });
        }
        windows
    }

    fn deliver_fast(&mut self, cycle: Cycle, out: &mut Output) {
        let windows = self.window_set(cycle);
        let mut batch = Vec::new();
        for w in &windows {
            for seq in w.seqs() {
                let e = self
                    .rx
                    .take((w.sender, seq))
                    .expect("fast path requires a complete cycle");
                batch.push(e);
            }
        }
        self.counters.fast_cycles += 1;
        out.observations.push(Observation::Windows {
            cycle,
            windows,
        });
        out.observations.push(Observation::CycleDelivered {
            cycle,
            via_consensus: false,
        });
        self.deliver_batch(cycle, batch, out);
    }

    fn deliver_decided(&mut self, cycle: Cycle, out: &mut Output) {
        let decision = self.decided.remove(&cycle).unwrap();
        let windows = self.window_set(cycle);
        let mut batch = Vec::new();
        let mut covered: BTreeSet<(SenderId, Seq)> = BTreeSet::new();
        for e in decision {
            let Some(rec) = self.senders.get(&e.sender) else {
                continue;
            };
            if !rec.active_at(cycle) {
                continue;
            }
            let top = rec.seq_of_cycle(cycle).expect("active checked");
            let min = match self.cfg.late_mode {
                LateMode::Dynamic => rec.next_expected().min(top),
                LateMode::SimpleDiscard => top,
            };
            if e.seq < min || e.seq > top {
                continue;
            }
            covered.insert(e.key());
            batch.push(e);
        }
        // The decision must cover every slot of the true windows;
        // anything less would break window agreement.
        for w in &windows {
            for seq in w.seqs() {
                if !covered.contains(&(w.sender, seq)) {
                    self.counters.decision_conflicts += 1;
                }
            }
        }
        self.counters.decided_cycles += 1;
        out.observations.push(Observation::Windows {
            cycle,
            windows,
        });
        out.observations.push(Observation::CycleDelivered {
            cycle,
            via_consensus: true,
        });
        self.deliver_batch(cycle, batch, out);
    }

    /// Move a cycle's events into the queue in rank order, hand them to the
    /// application, update per-sender watermarks, and apply any neighbor
    /// changes carried by the operations (effective next cycle).
    fn deliver_batch(&mut self, cycle: Cycle, events: Vec<Event>, out: &mut Output) {
        let mut ranked: Vec<(u64, Event)> = events
            .into_iter()
            .map(|e| {
                let rank = self
                    .senders
                    .rank(&e.sender, e.seq, cycle)
                    .expect("batch senders are known");
                (rank, e)
            })
            .collect();
        ranked.sort_by_key(|(rank, _)| *rank);

        let mut mutations: Vec<(AppOp, SenderId, Seq)> = Vec::new();
        let mut max_real: BTreeMap<SenderId, Seq> = BTreeMap::new();
        for (rank, event) in ranked {
            let lam = self.queue.push(cycle, rank, event.clone());
            self.queue.mark_applied(lam);
            self.app.apply(self.queue.slot_at(lam).expect("just pushed"));
            out.observations.push(Observation::Applied {
                cycle,
                rank,
                delivery_seq: lam,
                event: event.clone(),
                digest: self.app.digest(),
            });
            if let Payload::Operation(_) = &event.payload {
                let entry = max_real.entry(event.sender).or_insert(event.seq);
                *entry = (*entry).max(event.seq);
                if let Some(op) = AppOp::parse(&event.payload) {
                    match op {
                        AppOp::AddNeighbor { .. } | AppOp::RemoveNeighbor { .. } => {
                            mutations.push((op, event.sender, event.seq));
                        }
                        AppOp::Noop | AppOp::Mutate(_) => {}
                    }
                }
                let digest = self.app.digest();
                for client in &self.recipients {
                    out.send(
                        NodeId::Client(*client),
                        Message::Update {
                            delivery_seq: lam,
                            sender: event.sender,
                            seq: event.seq,
                            digest,
                        },
                        false,
                    );
                    self.counters.updates_sent += 1;
                }
            }
        }

        // Watermarks: in dynamic mode MaxSeq advances only on delivered
        // non-Empty events; the simple-discard baseline consumes the cycle's
        // sequence number regardless, which is what makes it discard late
        // arrivals.
        match self.cfg.late_mode {
            LateMode::Dynamic => {
                for (sender, seq) in max_real {
                    if let Some(rec) = self.senders.get_mut(&sender) {
                        if rec.max_delivered.map_or(true, |m| seq > m) {
                            rec.max_delivered = Some(seq);
                        }
                        self.rx.purge_delivered(sender, seq);
                    }
                }
            }
            LateMode::SimpleDiscard => {
                let ids: Vec<SenderId> = self.senders.iter().map(|r| r.id).collect();
                for id in ids {
                    let rec = self.senders.get_mut(&id).unwrap();
                    if rec.active_at(cycle) {
                        let top = rec.seq_of_cycle(cycle).unwrap();
                        if rec.max_delivered.map_or(true, |m| top > m) {
                            rec.max_delivered = Some(top);
                        }
                        self.rx.purge_delivered(id, top);
                    }
                }
            }
        }

        for (op, notifier, seq) in mutations {
            self.apply_neighbor_op(op, notifier, seq, cycle, out);
        }

        self.decided.remove(&cycle);
        self.inflight.remove(&cycle);
        self.queries.remove(&cycle);
        self.next_cycle = cycle + 1;
    }

    fn apply_neighbor_op(
        &mut self,
        op: AppOp,
        notifier: SenderId,
        notifier_seq: Seq,
        cycle: Cycle,
        out: &mut Output,
    ) {
        match op {
            AppOp::AddNeighbor { client } => {
                if self.senders.iter().any(|r| r.id.base == client as u64) {
                    return; // already a sender; nothing to do
                }
                let Some(notifier_rec) = self.senders.get(&notifier) else {
                    return;
                };
                let clock = self.clock.expect("initialized");
                let deadline = notifier_rec.recv_deadline(notifier_seq, self.cfg.timing);
                let t_start =
                    SenderTable::join_start_time(deadline, self.cfg.group_min, clock.cycle_len);
                let computed_first = clock
                    .cycle_of_start(t_start)
                    .expect("join start is grid aligned");
                // The join margin assumes the ADD event was delivered on
                // time. If it came late, push activation out so no replica
                // can have queried a window that misses the new sender.
                let first_cycle = computed_first.max(cycle + self.cfg.pipeline + 1);
                let t_start = clock.origin + first_cycle * clock.cycle_len;
                let id = SenderId::new(client as u64, t_start);
                self.senders
                    .insert(SenderRecord::new(id, t_start, first_cycle));
                self.recipients.insert(ClientId(client));
                let members: Vec<ReplicaId> = self.group.live_members().into_iter().collect();
                out.send(
                    NodeId::Client(ClientId(client)),
                    Message::Handshake {
                        sender: id,
                        t_start,
                        members,
                    },
                    true,
                );
            }
            AppOp::RemoveNeighbor { client } => {
                let found: Vec<SenderId> = self
                    .senders
                    .iter()
                    .filter(|r| r.id.base == client as u64)
                    .map(|r| r.id)
                    .collect();
                for id in found {
                    self.senders.remove(&id);
                    self.rx.purge_sender(id);
                }
                self.recipients.remove(&ClientId(client));
            }
            AppOp::Noop | AppOp::Mutate(_) => {}
        }
    }

    // ------------------------------------------------------------------
    // Consensus
    // ------------------------------------------------------------------

    /// Queue queries for every collected, undeliverable cycle within the
    /// pipeline depth.
    fn ensure_queries(&mut self, now: Micros, out: &mut Output) {
        if !self.cfg.fast_path {
            // The leader drives instances in the consensus baseline.
            self.auto_enqueue(now, out);
            return;
        }
        let Some(collected) = self.collected_upto(now) else {
            return;
        };
        let hi = collected.min(self.next_cycle + self.cfg.pipeline);
        for cycle in self.next_cycle..=hi.max(self.next_cycle) {
            if cycle > collected
                || self.decided.contains_key(&cycle)
                || self.inflight.contains(&cycle)
                || self.queries.contains_key(&cycle)
            {
                continue;
            }
            let complete = self
                .window_set(cycle)
                .iter()
                .all(|w| w.seqs().all(|seq| self.lookup_real((w.sender, seq)).is_some()));
            if complete {
                continue;
            }
            self.send_query(cycle, now, out);
        }
    }

    fn send_query(&mut self, cycle: Cycle, now: Micros, out: &mut Output) {
        let Some(leader) = self.group.leader else {
            return;
        };
        let windows = self.window_set(cycle);
        if windows.is_empty() {
            return;
        }
        self.queries.insert(cycle, now);
        self.counters.queries_sent += 1;
        out.observations.push(Observation::QuerySent { cycle });
        let msg = Message::Query {
            epoch: self.group.epoch,
            cid: self.group.cid,
            cycle,
            windows,
        };
        if leader == self.cfg.id {
            self.leader_handle_query(self.cfg.id, msg, out);
        } else {
            out.send(NodeId::Replica(leader), msg, true);
        }
    }

    /// Consensus-total-order baseline: the leader opens an instance for
    /// every newly collected cycle.
    fn auto_enqueue(&mut self, now: Micros, _out: &mut Output) {
        if self.group.leader != Some(self.cfg.id) {
            return;
        }
        let Some(collected) = self.collected_upto(now) else {
            return;
        };
        let from = self.auto_enqueued_upto.map_or(0, |c| c + 1);
        for cycle in from..=collected {
            if !self.decided.contains_key(&cycle) {
                let windows = self.window_set(cycle);
                if !windows.is_empty() {
                    self.ledger.enqueue(cycle, windows);
                }
            }
        }
        self.auto_enqueued_upto = Some(collected.max(self.auto_enqueued_upto.unwrap_or(0)));
    }

    fn lookup_real(&self, key: (SenderId, Seq)) -> Option<Event> {
        if let Some(e) = self.rx.get(key) {
            return Some(e.clone());
        }
        if let Some(slot) = self.queue.find_real(key) {
            return Some(slot.event.clone());
        }
        for set in self.decided.values() {
            if let Some(e) = set
                .iter()
                .find(|e| e.key() == key && e.payload.is_operation())
            {
                return Some(e.clone());
            }
        }
        None
    }

    fn on_consensus_message(&mut self, from: NodeId, msg: Message, now: Micros, out: &mut Output) {
        let NodeId::Replica(sender) = from else {
            return;
        };
        match msg {
            Message::Query {
                epoch,
                cid,
                cycle,
                windows,
            } => {
                if epoch != self.group.epoch || cid != self.group.cid {
                    self.counters.stale_messages += 1;
                    return;
                }
                if sender == self.group.leader.unwrap_or(self.cfg.id) && sender != self.cfg.id {
                    // Instance announcement from the leader: lock the cycle
                    // and propose everything we hold.
                    self.on_instance_query(cycle, windows, out);
                } else {
                    let m = Message::Query {
                        epoch,
                        cid,
                        cycle,
                        windows,
                    };
                    self.leader_handle_query(sender, m, out);
                }
            }
            Message::QueryResult {
                epoch,
                cid,
                cycle,
                events,
            } => {
                if epoch != self.group.epoch || cid != self.group.cid {
                    self.counters.stale_messages += 1;
                    return;
                }
                self.ledger.record_proposal(Proposal {
                    replica: sender,
                    cycle,
                    entries: events,
                });
                self.leader_try_decide(out);
            }
            Message::QueryReply {
                epoch,
                cid,
                cycle,
                events,
            }
            | Message::Decision {
                epoch,
                cid,
                cycle,
                events,
            } => {
                if epoch != self.group.epoch || cid != self.group.cid {
                    self.counters.stale_messages += 1;
                    return;
                }
                self.apply_decision(cycle, events);
            }
            _ => unreachable!("non-consensus message routed here"),
        }
        let _ = now;
    }

    /// Leader handling of a replica's query: answer directly when every
    /// queried event is held locally, otherwise queue an instance.
    fn leader_handle_query(&mut self, requester: ReplicaId, msg: Message, out: &mut Output) {
        let Message::Query {
            epoch,
            cid,
            cycle,
            windows,
        } = msg
        else {
            return;
        };
        if self.group.leader != Some(self.cfg.id) {
            self.counters.stale_messages += 1;
            return;
        }
        if self.cfg.fast_path {
            let mut found = Vec::new();
            let mut complete = true;
            'scan: for w in &windows {
                for seq in w.seqs() {
                    match self.lookup_real((w.sender, seq)) {
                        Some(e) => found.push(e),
                        None => {
                            complete = false;
                            break 'scan;
                        }
                    }
                }
            }
            if complete {
                let reply = Message::QueryReply {
                    epoch,
                    cid,
                    cycle,
                    events: found,
                };
                if requester == self.cfg.id {
                    self.apply_decision(cycle, match reply {
                        Message::QueryReply { events, .. } => events,
                        _ => unreachable!(),
                    });
                } else {
                    out.send(NodeId::Replica(requester), reply, true);
                }
                return;
            }
        }
        self.ledger.enqueue(cycle, windows);
    }

    /// Start instances for pending queries and decide ripe ones.
    fn pump_leader(&mut self, now: Micros, out: &mut Output) {
        if self.group.leader != Some(self.cfg.id) || !self.group.consensus_allowed() {
            return;
        }
        if !self.cfg.fast_path {
            self.auto_enqueue(now, out);
        }
        for (cycle, windows) in self.ledger.start_instances() {
            self.counters.instances_started += 1;
            out.observations.push(Observation::InstanceStarted { cycle });
            let msg = Message::Query {
                epoch: self.group.epoch,
                cid: self.group.cid,
                cycle,
                windows: windows.clone(),
            };
            for r in self.group.live_members() {
                if r != self.cfg.id {
                    out.send(NodeId::Replica(r), msg.clone(), true);
                }
            }
            // The leader is a member: propose to itself.
            self.on_instance_query(cycle, windows, out);
        }
        self.leader_try_decide(out);
    }

    /// Handle the leader's instance announcement: propose every queried
    /// slot we hold (missing ones are implicitly Bottom) and lock the cycle
    /// against fast delivery until the decision lands.
    fn on_instance_query(&mut self, cycle: Cycle, windows: WindowSet, out: &mut Output) {
        if cycle >= self.next_cycle {
            self.inflight.insert(cycle);
        }
        let mut entries = Vec::new();
        for w in &windows {
            for seq in w.seqs() {
                if let Some(e) = self.lookup_real((w.sender, seq)) {
                    entries.push(e);
                }
            }
        }
        let msg = Message::QueryResult {
            epoch: self.group.epoch,
            cid: self.group.cid,
            cycle,
            events: entries.clone(),
        };
        let leader = self.group.leader.expect("instance implies a leader");
        if leader == self.cfg.id {
            self.ledger.record_proposal(Proposal {
                replica: self.cfg.id,
                cycle,
                entries,
            });
        } else {
            out.send(NodeId::Replica(leader), msg, true);
        }
    }

    fn leader_try_decide(&mut self, out: &mut Output) {
        if self.group.leader != Some(self.cfg.id) {
            return;
        }
        let live = self.group.live_members();
        for (cycle, decision) in self.ledger.ripe_decisions(&live) {
            let msg = Message::Decision {
                epoch: self.group.epoch,
                cid: self.group.cid,
                cycle,
                events: decision.clone(),
            };
            for r in &live {
                if *r != self.cfg.id {
                    out.send(NodeId::Replica(*r), msg.clone(), true);
                }
            }
            self.apply_decision(cycle, decision);
        }
    }

    /// Install a decision (or a leader's direct reply) into E. Decisions
    /// for already-delivered cycles must match the delivered content.
    fn apply_decision(&mut self, cycle: Cycle, events: Vec<Event>) {
        self.inflight.remove(&cycle);
        self.queries.remove(&cycle);
        if cycle < self.next_cycle {
            // Decision for a cycle we already delivered: every decided real
            // event must have been delivered (here or below its window, in
            // which case the watermark covers it). Pruned logs cannot be
            // checked.
            if self.queue.pruned_upto().is_none() {
                for e in &events {
                    if e.payload.is_operation()
                        && !self.queue.holds_real(e.key())
                        && self
                            .senders
                            .get(&e.sender)
                            .is_some_and(|r| r.max_delivered.map_or(true, |m| e.seq > m))
                    {
                        self.counters.decision_conflicts += 1;
                    }
                }
            }
            return;
        }
        self.decided.entry(cycle).or_insert(events);
    }

    fn gc_report(&mut self, from: ReplicaId, lambda: DeliverySeq, out: &mut Output) {
        let members = self.group.live_members();
        if let GcOutcome::Pruned { upto, removed } =
            self.gossip.on_lambda(from, lambda, &members, &mut self.queue)
        {
            out.observations.push(Observation::Pruned { upto, removed });
        }
    }

    // ------------------------------------------------------------------
    // Membership: failure handling, election, reconfiguration
    // ------------------------------------------------------------------

    fn evaluate_membership(&mut self, now: Micros, out: &mut Output) {
        if self.group.new_replica {
            return;
        }
        let live_members = self.group.live_members();
        if live_members.is_empty() {
            return;
        }
        // Leader failure has the highest priority.
        if !self.group.leader_is_live() {
            let candidate = select_leader(&live_members, &self.group.ages).ok();
            let was_candidate = self.group.candidate;
            self.group.le = true;
            self.group.candidate = candidate;
            if candidate == Some(self.cfg.id) {
                if was_candidate != candidate || self.election.is_none() {
                    self.start_election(now, out);
                } else {
                    // The live set changed; the waits may now be satisfied.
                    self.check_election_states(now, out);
                    self.check_election_acks(now, out);
                }
            }
            return;
        }
        // Reconfiguration: new replicas present and no election running.
        if !self.group.le {
            let new_replicas: BTreeSet<ReplicaId> = self
                .group
                .live
                .difference(&self.group.members)
                .copied()
                .collect();
            if !new_replicas.is_empty()
                && self.group.reconfig_target.as_ref() != Some(&self.group.live)
            {
                self.group.reconfig_target = Some(self.group.live.clone());
                self.group.gr = true;
                if self.group.leader == Some(self.cfg.id) {
                    self.start_reconfig(out);
                }
            } else if let Some(r) = self.reconfig.as_ref() {
                if self.group.leader == Some(self.cfg.id) && !r.states.is_empty() {
                    self.check_reconfig_states(now, out);
                }
            }
        }
        // Leader-side instance waits re-evaluate against the new live set.
        self.leader_try_decide(out);
    }

    fn sync_state(&self) -> SyncState {
        SyncState {
            queue: self.queue.clone(),
            next_cycle: self.next_cycle,
            senders: self.senders.iter().cloned().collect(),
            decided: self.decided.clone(),
            cid: self.group.cid,
            members: self.group.members.clone(),
            epoch: self.group.epoch,
        }
    }

    fn start_election(&mut self, now: Micros, out: &mut Output) {
        let mut states = BTreeMap::new();
        states.insert(self.cfg.id, self.sync_state());
        self.election = Some(ElectionState {
            states,
            acks: BTreeSet::new(),
            package: None,
        });
        for r in self.group.live_members() {
            if r != self.cfg.id {
                out.send(NodeId::Replica(r), Message::LeQuery, true);
            }
        }
        self.check_election_states(now, out);
    }

    fn on_le_query(&mut self, candidate: ReplicaId, out: &mut Output) {
        if self.group.new_replica {
            return;
        }
        let live_members = self.group.live_members();
        let endorsed = self.group.live.contains(&candidate)
            && select_leader(&live_members, &self.group.ages) == Ok(candidate);
        if endorsed {
            self.group.le = true;
            self.group.candidate = Some(candidate);
            out.send(
                NodeId::Replica(candidate),
                Message::LeState(self.sync_state()),
                true,
            );
        } else {
            let computed = select_leader(&live_members, &self.group.ages)
                .unwrap_or(self.cfg.id);
            out.send(NodeId::Replica(candidate), Message::Nack { computed }, true);
        }
    }

    fn on_le_state(&mut self, from: ReplicaId, state: SyncState, now: Micros, out: &mut Output) {
        if self.group.candidate != Some(self.cfg.id) {
            self.counters.stale_messages += 1;
            return;
        }
        if let Some(e) = self.election.as_mut() {
            if e.package.is_none() {
                e.states.insert(from, state);
                self.check_election_states(now, out);
            }
        }
    }

    fn on_nack(&mut self, computed: ReplicaId, out: &mut Output) {
        if self.group.candidate != Some(self.cfg.id) || self.election.is_none() {
            return;
        }
        let live_members = self.group.live_members();
        if select_leader(&live_members, &self.group.ages) == Ok(self.cfg.id) {
            // The peer's view is stale; ask again.
            out.send(NodeId::Replica(computed), Message::LeQuery, true);
        } else {
            // Superseded: abdicate and let the true candidate drive.
            self.election = None;
            self.group.candidate = None;
        }
    }

    /// Candidate: once states from every live member are in, merge and
    /// broadcast the leader package.
    fn check_election_states(&mut self, now: Micros, out: &mut Output) {
        let live_members = self.group.live_members();
        let ready = match self.election.as_ref() {
            Some(e) => {
                e.package.is_none() && live_members.iter().all(|r| e.states.contains_key(r))
            }
            None => false,
        };
        if !ready {
            return;
        }
        let states: Vec<SyncState> = self
            .election
            .as_ref()
            .unwrap()
            .states
            .values()
            .cloned()
            .collect();
        let merged = merge_states(&states).expect("queues share a prefix");
        let package = SyncPackage {
            queue: merged.queue,
            next_cycle: merged.next_cycle,
            senders: merged.senders,
            decided: merged.decided,
            cid: merged.cid,
            members: merged.members,
            epoch: merged.epoch,
            init: InitState {
                origin: self.clock.map(|c| c.origin).unwrap_or(0),
                applied_upto: self.app.applied_upto(),
                app_digest: self.app.digest(),
                ages: self.group.ages.clone(),
            },
        };
        self.election.as_mut().unwrap().package = Some(package.clone());
        // Broadcast to every live replica: replicas outside G that were
        // added by an interrupted reconfiguration initialize from Init.
        for r in self.group.live.clone() {
            if r != self.cfg.id {
                out.send(NodeId::Replica(r), Message::LoadLeader(package.clone()), true);
            }
        }
        // Notify the senders of the configuration.
        let members: Vec<ReplicaId> = package.members.iter().copied().collect();
        for client in self.recipients.clone() {
            out.send(
                NodeId::Client(client),
                Message::SenderConfig {
                    cid: package.cid,
                    members: members.clone(),
                },
                true,
            );
        }
        // Load it ourselves; LE clears only when every live member acks.
        self.load_package(&package, Some(self.cfg.id), true, None, false, now, out);
        self.group.le = true;
        self.group.candidate = Some(self.cfg.id);
        self.check_election_acks(now, out);
    }

    fn on_ack(&mut self, from: ReplicaId, now: Micros, out: &mut Output) {
        if let Some(e) = self.election.as_mut() {
            e.acks.insert(from);
            self.check_election_acks(now, out);
        }
    }

    fn check_election_acks(&mut self, now: Micros, out: &mut Output) {
        let live_members = self.group.live_members();
        let done = match self.election.as_ref() {
            Some(e) if e.package.is_some() => live_members
                .iter()
                .all(|r| *r == self.cfg.id || e.acks.contains(r)),
            _ => false,
        };
        if done {
            self.election = None;
            self.group.le = false;
            self.group.candidate = None;
            out.observations.push(Observation::ElectionCompleted {
                epoch: self.group.epoch,
                leader: self.cfg.id,
            });
            self.drain_deferred(now, out);
            // A reconfiguration interrupted by the election re-triggers.
            self.group.reconfig_target = None;
            self.evaluate_membership(now, out);
        }
    }

    fn on_load_leader(
        &mut self,
        candidate: ReplicaId,
        package: SyncPackage,
        now: Micros,
        out: &mut Output,
    ) {
        // Guard: the sender must be the candidate we would select.
        if !self.group.new_replica {
            let live_members = self.group.live_members();
            if !self.group.live.contains(&candidate)
                || select_leader(&live_members, &self.group.ages) != Ok(candidate)
            {
                self.counters.stale_messages += 1;
                return;
            }
        }
        self.load_package(&package, Some(candidate), true, None, false, now, out);
        self.group.le = false;
        self.group.candidate = None;
        out.send(NodeId::Replica(candidate), Message::Ack, true);
        self.drain_deferred(now, out);
    }

    fn start_reconfig(&mut self, out: &mut Output) {
        self.group.cid += 1;
        let target = self.group.reconfig_target.clone().expect("target set");
        let mut states = BTreeMap::new();
        states.insert(self.cfg.id, self.sync_state());
        self.reconfig = Some(ReconfigState {
            states,
            target: target.clone(),
        });
        let live_target: Vec<ReplicaId> = target
            .intersection(&self.group.live)
            .copied()
            .collect();
        for r in live_target {
            if r != self.cfg.id {
                out.send(
                    NodeId::Replica(r),
                    Message::GrQuery {
                        epoch: self.group.epoch,
                        cid: self.group.cid,
                    },
                    true,
                );
            }
        }
    }

    fn on_gr_query(&mut self, leader: ReplicaId, epoch: u64, cid: u64, out: &mut Output) {
        // New members accept any fresher configuration; existing members
        // require a strictly newer cid from a current-or-newer epoch.
        if self.group.le {
            self.deferred.push_back((
                NodeId::Replica(leader),
                Message::GrQuery { epoch, cid },
            ));
            return;
        }
        if epoch < self.group.epoch || cid <= self.group.cid {
            self.counters.stale_messages += 1;
            return;
        }
        self.group.gr = true;
        self.group.cid = cid;
        if self.group.epoch == 0 {
            self.group.epoch = epoch;
        }
        out.send(
            NodeId::Replica(leader),
            Message::GeState(self.sync_state()),
            true,
        );
    }

    fn on_ge_state(&mut self, from: ReplicaId, state: SyncState, now: Micros, out: &mut Output) {
        if self.group.leader != Some(self.cfg.id) {
            self.counters.stale_messages += 1;
            return;
        }
        if state.cid != self.group.cid {
            self.counters.stale_messages += 1;
            return;
        }
        if let Some(r) = self.reconfig.as_mut() {
            r.states.insert(from, state);
            self.check_reconfig_states(now, out);
        }
    }

    fn check_reconfig_states(&mut self, now: Micros, out: &mut Output) {
        let Some(r) = self.reconfig.as_ref() else {
            return;
        };
        let wait_for: BTreeSet<ReplicaId> = r
            .target
            .intersection(&self.group.live)
            .copied()
            .collect();
        if wait_for.is_empty() || !wait_for.iter().all(|x| r.states.contains_key(x)) {
            return;
        }
        let r = self.reconfig.take().unwrap();
        let states: Vec<SyncState> = r.states.values().cloned().collect();
        let merged = merge_states(&states).expect("queues share a prefix");
        let package = SyncPackage {
            queue: merged.queue,
            next_cycle: merged.next_cycle,
            senders: merged.senders,
            decided: merged.decided,
            cid: self.group.cid,
            members: r.target.clone(),
            epoch: self.group.epoch,
            init: InitState {
                origin: self.clock.map(|c| c.origin).unwrap_or(0),
                applied_upto: self.app.applied_upto(),
                app_digest: self.app.digest(),
                ages: self.group.ages.clone(),
            },
        };
        let target: Vec<ReplicaId> = r.target.iter().copied().collect();
        for x in &wait_for {
            if *x != self.cfg.id {
                out.send(
                    NodeId::Replica(*x),
                    Message::LoadConfig {
                        package: package.clone(),
                        target: target.clone(),
                    },
                    true,
                );
            }
        }
        // Notify senders of the new configuration.
        for client in self.recipients.clone() {
            out.send(
                NodeId::Client(client),
                Message::SenderConfig {
                    cid: package.cid,
                    members: target.clone(),
                },
                true,
            );
        }
        out.observations.push(Observation::ReconfigCompleted {
            cid: package.cid,
            members: target.len(),
        });
        self.load_package(
            &package,
            self.group.leader,
            false,
            Some(r.target.clone()),
            true,
            now,
            out,
        );
        self.drain_deferred(now, out);
    }

    fn on_load_config(
        &mut self,
        leader: ReplicaId,
        package: SyncPackage,
        target: Vec<ReplicaId>,
        now: Micros,
        out: &mut Output,
    ) {
        if self.group.le {
            self.counters.stale_messages += 1;
            return;
        }
        if !self.group.new_replica
            && (package.epoch != self.group.epoch || package.cid != self.group.cid)
        {
            self.counters.stale_messages += 1;
            return;
        }
        let members: BTreeSet<ReplicaId> = target.into_iter().collect();
        self.load_package(&package, Some(leader), false, Some(members), true, now, out);
        self.drain_deferred(now, out);
    }

    /// Install a synchronization package. Existing replicas keep their own
    /// application progress (always a prefix of the merged queue); new
    /// replicas restore it from Init.
    #[allow(clippy::too_many_arguments)]
    fn load_package(
        &mut self,
        package: &SyncPackage,
        leader: Option<ReplicaId>,
        from_election: bool,
        new_members: Option<BTreeSet<ReplicaId>>,
        bump_ages: bool,
        now: Micros,
        out: &mut Output,
    ) {
        let was_new = self.group.new_replica;
        let mut queue = package.queue.clone();
        if was_new {
            self.clock = Some(CycleClock::new(
                package.init.origin,
                self.cfg.timing,
            ));
            self.app = ApplyState::restore(package.init.app_digest, package.init.applied_upto);
            self.group.ages = package.init.ages.clone();
            queue.set_applied_cursor(package.init.applied_upto);
        } else {
            queue.set_applied_cursor(self.app.applied_upto());
        }
        self.queue = queue;
        self.next_cycle = package.next_cycle;
        self.senders = SenderTable::new();
        for rec in &package.senders {
            self.senders.insert(rec.clone());
            if let Some(m) = rec.max_delivered {
                self.rx.purge_delivered(rec.id, m);
            }
        }
        // Recipients follow the sender set.
        self.recipients = package
            .senders
            .iter()
            .map(|r| ClientId(r.id.base as u32))
            .collect();
        self.decided = package.decided.clone();
        self.group.members = new_members.unwrap_or_else(|| package.members.clone());
        self.group.cid = package.cid;
        self.group.epoch = if from_election {
            package.epoch + 1
        } else {
            package.epoch
        };
        self.group.leader = leader;
        self.group.gr = false;
        self.group.reconfig_target = None;
        self.group.new_replica = false;
        if bump_ages {
            for m in self.group.members.clone() {
                *self.group.ages.entry(m).or_insert(0) += 1;
            }
        }
        // Abandon in-flight consensus bookkeeping; stuck cycles re-query.
        self.ledger.clear();
        self.inflight.clear();
        self.queries.clear();
        self.auto_enqueued_upto = Some(self.next_cycle.saturating_sub(1));
        self.gossip.retain_members(&self.group.live_members());
        // Catch up the application with anything beyond our old progress
        // that the merged queue already contains.
        self.apply_pending(out);
        out.observations.push(Observation::StateLoaded {
            epoch: self.group.epoch,
            cid: self.group.cid,
            queue_bytes: self.queue.to_bytes(),
            from_election,
        });
        let _ = now;
    }

    /// Apply queue slots beyond the application cursor (after a load).
    fn apply_pending(&mut self, out: &mut Output) {
        loop {
            let next = self.app.applied_upto().map_or(0, |a| a + 1);
            if next >= self.queue.next_seq() {
                break;
            }
            let Some(slot) = self.queue.slot_at(next) else {
                break;
            };
            let slot = slot.clone();
            self.app.apply(&slot);
            self.queue.mark_applied(next);
            out.observations.push(Observation::Applied {
                cycle: slot.cycle,
                rank: slot.rank,
                delivery_seq: next,
                event: slot.event.clone(),
                digest: self.app.digest(),
            });
        }
    }

    fn drain_deferred(&mut self, now: Micros, out: &mut Output) {
        if !self.group.consensus_allowed() {
            return;
        }
        let msgs: Vec<(NodeId, Message)> = self.deferred.drain(..).collect();
        for (from, msg) in msgs {
            self.on_message(from, msg, now, out);
        }
    }
}

