//! The deterministic simulation: virtual clock, transport, actors, and the
//! global observer that checks cross-replica safety properties.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap};

use groupcast_core::{
    ClientId, Cycle, DeliverySeq, Event, Input, LateMode, Message, Micros, NodeId, Observation,
    Payload, Replica, ReplicaConfig, ReplicaId, SenderId, SenderRecord, TimingParams,
};
use groupcast_core::{AppOp, CycleClock};
use rand_chacha::ChaCha12Rng;

use crate::metrics::{latency_summary, Metrics, Violations};
use crate::rng::{mix_many, stream, Purpose};
use crate::scenario::{LateHandling, SimScenario, Strategy};

// ---------------------------------------------------------------------
// Kernel
// ---------------------------------------------------------------------

#[derive(Clone, Debug)]
enum Task {
    Deliver {
        from: NodeId,
        to: NodeId,
        msg: Message,
    },
    ClientEmit {
        client: u32,
    },
    CycleTick {
        replica: u32,
    },
    GossipTick {
        replica: u32,
    },
    Heartbeat {
        replica: u32,
    },
    RendezvousCheck,
    Crash {
        replica: u32,
    },
    Script {
        index: usize,
    },
}

#[derive(Clone, Debug)]
struct Entry {
    at: Micros,
    seq: u64,
    task: Task,
}

impl PartialEq for Entry {
    fn eq(&self, other: &Self) -> bool {
        (self.at, self.seq) == (other.at, other.seq)
    }
}

impl Eq for Entry {}

impl Ord for Entry {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        (self.at, self.seq).cmp(&(other.at, other.seq))
    }
}

impl PartialOrd for Entry {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

// ---------------------------------------------------------------------
// Actors
// ---------------------------------------------------------------------

enum ReplicaKind {
    Proto(Box<Replica>),
    Pb(PbReplica),
}

struct ReplicaSlot {
    alive: bool,
    next_tick: Option<Micros>,
    kind: ReplicaKind,
}

/// A client: emits one event per cycle on its (possibly skewed) clock,
/// tracks per-event send times and first updates, and carries scripted
/// neighbor commands inside ordinary events.
struct ClientActor {
    active: bool,
    /// Count events toward the metrics (off after a scripted leave).
    measuring: bool,
    identity: SenderId,
    t_start: Micros,
    offset_us: i64,
    next_seq: u64,
    replicas: Vec<ReplicaId>,
    config_cid: u64,
    pending_ops: Vec<AppOp>,
    /// (identity join stamp, seq) → send time, for metric events.
    sent: BTreeMap<(Micros, u64), Micros>,
    first_update: BTreeMap<(Micros, u64), Micros>,
    metric_quota: u64,
    metric_sent: u64,
}

struct Rendezvous {
    live: BTreeSet<u32>,
    last_heartbeat: BTreeMap<u32, Micros>,
}

/// Primary-backup baselines. The primary batches received events per cycle
/// and applies them at the close; in the reliable variant it applies and
/// answers only after every live backup acknowledged the batch. Batch
/// forwarding reuses the Decision message as the carrier and QueryResult as
/// the acknowledgment.
struct PbReplica {
    id: u32,
    reliable: bool,
    primary: u32,
    members: Vec<u32>,
    rx: Vec<Event>,
    applied: BTreeSet<(SenderId, u64)>,
    digest: [u8; 32],
    applied_count: u64,
    /// Recent (applied_count, digest) pairs so in-flight tails at the end
    /// of a run are not misread as divergence.
    history: std::collections::VecDeque<(u64, [u8; 32])>,
    next_batch: u64,
    /// Reliable primary: batch → (events, acked backups).
    pending: BTreeMap<u64, (Vec<Event>, BTreeSet<u32>)>,
    /// Backups apply batches in id order.
    next_apply_batch: u64,
    held: BTreeMap<u64, Vec<Event>>,
}

impl PbReplica {
    fn is_primary(&self) -> bool {
        self.id == self.primary
    }

    fn fold(&mut self, e: &Event) {
        use sha2::{Digest, Sha256};
        if !self.applied.insert((e.sender, e.seq)) {
            return;
        }
        let Payload::Operation(bytes) = &e.payload else {
            return;
        };
        let mut h = Sha256::new();
        h.update(self.digest);
        h.update(self.applied_count.to_le_bytes());
        h.update(e.sender.base.to_le_bytes());
        h.update(e.sender.joined_at.to_le_bytes());
        h.update(e.seq.to_le_bytes());
        h.update(bytes);
        self.digest = h.finalize().into();
        self.applied_count += 1;
        self.history.push_back((self.applied_count, self.digest));
        if self.history.len() > 512 {
            self.history.pop_front();
        }
    }
}

// ---------------------------------------------------------------------
// Observer
// ---------------------------------------------------------------------

#[derive(Clone, PartialEq, Eq, Debug)]
struct CanonicalSlot {
    sender: SenderId,
    seq: u64,
    is_op: bool,
    digest: [u8; 32],
}

#[derive(Default)]
struct Observer {
    canonical: BTreeMap<DeliverySeq, CanonicalSlot>,
    windows: BTreeMap<Cycle, Vec<(SenderId, u64, u64)>>,
    loads: BTreeMap<(u64, u64, bool), Vec<u8>>,
    violations: Violations,
}

impl Observer {
    fn on_applied(&mut self, lambda: DeliverySeq, slot: CanonicalSlot) {
        match self.canonical.get(&lambda) {
            None => {
                self.canonical.insert(lambda, slot);
            }
            Some(prev) if *prev == slot => {}
            Some(_) => self.violations.order += 1,
        }
    }

    fn on_windows(&mut self, cycle: Cycle, windows: Vec<(SenderId, u64, u64)>) {
        match self.windows.get(&cycle) {
            None => {
                self.windows.insert(cycle, windows);
            }
            Some(prev) if *prev == windows => {}
            Some(_) => self.violations.windows += 1,
        }
    }

    fn on_load(&mut self, key: (u64, u64, bool), bytes: Vec<u8>) {
        match self.loads.get(&key) {
            None => {
                self.loads.insert(key, bytes);
            }
            Some(prev) if *prev == bytes => {}
            Some(_) => self.violations.sync += 1,
        }
    }
}

// ---------------------------------------------------------------------
// The simulation
// ---------------------------------------------------------------------

pub struct Sim {
    scenario: SimScenario,
    timing: TimingParams,
    grid: CycleClock,
    now: Micros,
    horizon: Micros,
    pq: BinaryHeap<Reverse<Entry>>,
    task_seq: u64,
    replicas: BTreeMap<u32, ReplicaSlot>,
    clients: BTreeMap<u32, ClientActor>,
    rdv: Rendezvous,
    streams: BTreeMap<(u8, u64, u64), ChaCha12Rng>,
    observer: Observer,
    // metric accumulation
    d_c_samples: Vec<f64>,
    d_m_samples: Vec<f64>,
    sync_delay_samples: Vec<f64>,
    instance_starts: BTreeMap<(u32, Cycle), Micros>,
    delivered_cycles: BTreeSet<Cycle>,
    consensus_cycles: BTreeSet<Cycle>,
    elections: u64,
    reconfigs: u64,
    crashes: u64,
    instance_counter: u32,
    crash_scheduled: bool,
    group_failed: bool,
    max_qd: u64,
    qd_sum: u64,
    qd_samples: u64,
    qd_series: Vec<(u64, u64)>,
    trace_hash: u64,
    next_replica_id: u32,
}

fn node_key(n: NodeId) -> u64 {
    match n {
        NodeId::Replica(r) => (1 << 40) | r.0 as u64,
        NodeId::Client(c) => (2 << 40) | c.0 as u64,
        NodeId::Rendezvous => 3 << 40,
    }
}

const RELIABLE_ATTEMPTS: u32 = 40;
/// Initial retransmission timeout (about one round trip) and its cap.
const RELIABLE_RTO: Micros = 200_000;
const RELIABLE_RTO_CAP: Micros = 400_000;
const CONTROL_DELAY: Micros = 20_000;

/// Send time of a client's event `seq` on its own (possibly skewed) clock.
fn emit_time(
    t_start: Micros,
    offset_us: i64,
    net_low: Micros,
    cycle_len: Micros,
    now: Micros,
    seq: u64,
) -> Micros {
    let nominal =
        t_start as i128 - net_low as i128 + (seq as i128) * cycle_len as i128 + offset_us as i128;
    nominal.max(now as i128 + 1) as Micros
}

impl Sim {
    pub fn new(scenario: SimScenario) -> Self {
        let timing = TimingParams::new(scenario.net_low_us(), scenario.net_high_us())
            .expect("net bounds define a positive cycle");
        let grid = CycleClock::new(scenario.origin_us(), timing);
        let horizon = scenario.horizon_us();
        Sim {
            timing,
            grid,
            now: 0,
            horizon,
            pq: BinaryHeap::new(),
            task_seq: 0,
            replicas: BTreeMap::new(),
            clients: BTreeMap::new(),
            rdv: Rendezvous {
                live: BTreeSet::new(),
                last_heartbeat: BTreeMap::new(),
            },
            streams: BTreeMap::new(),
            observer: Observer::default(),
            d_c_samples: Vec::new(),
            d_m_samples: Vec::new(),
            sync_delay_samples: Vec::new(),
            instance_starts: BTreeMap::new(),
            delivered_cycles: BTreeSet::new(),
            consensus_cycles: BTreeSet::new(),
            elections: 0,
            reconfigs: 0,
            crashes: 0,
            instance_counter: 0,
            crash_scheduled: false,
            group_failed: false,
            max_qd: 0,
            qd_sum: 0,
            qd_samples: 0,
            qd_series: Vec::new(),
            trace_hash: 0xcbf2_9ce4_8422_2325,
            next_replica_id: 0,
            scenario,
        }
    }

    fn push(&mut self, at: Micros, task: Task) {
        self.task_seq += 1;
        self.pq.push(Reverse(Entry {
            at,
            seq: self.task_seq,
            task,
        }));
    }

    fn rng(&mut self, purpose: Purpose, a: u64, b: u64) -> &mut ChaCha12Rng {
        let seed = self.scenario.seed;
        self.streams
            .entry((purpose as u8, a, b))
            .or_insert_with(|| stream(seed, purpose, a, b))
    }

    // -----------------------------------------------------------------
    // Transport
    // -----------------------------------------------------------------

    /// Send over the lossy data plane. Reliable sends model per-link
    /// retransmission with exponential backoff: the delivery instant is the
    /// first attempt whose transmission survives the loss draw. Returns the
    /// delivery time, if any.
    fn send(&mut self, from: NodeId, to: NodeId, msg: Message, reliable: bool) -> Option<Micros> {
        let net = self.scenario.net;
        let (a, b) = (node_key(from), node_key(to));
        let mut at = self.now;
        let mut rto = RELIABLE_RTO;
        let attempts = if reliable { RELIABLE_ATTEMPTS } else { 1 };
        for _ in 0..attempts {
            let dropped = {
                let rng = self.rng(Purpose::Drop, a, b);
                net.dropped(rng)
            };
            if !dropped {
                let delay = {
                    let rng = self.rng(Purpose::Delay, a, b);
                    net.sample_delay(rng)
                };
                let when = at + delay;
                self.push(when, Task::Deliver { from, to, msg });
                return Some(when);
            }
            at += rto;
            rto = (rto * 2).min(RELIABLE_RTO_CAP);
        }
        None
    }

    /// Rendezvous control plane: fixed latency, no loss.
    fn send_control(&mut self, from: NodeId, to: NodeId, msg: Message) {
        self.push(self.now + CONTROL_DELAY, Task::Deliver { from, to, msg });
    }

    // -----------------------------------------------------------------
    // Setup
    // -----------------------------------------------------------------

    fn replica_config(&self, id: u32) -> ReplicaConfig {
        ReplicaConfig {
            id: ReplicaId(id),
            timing: self.timing,
            late_mode: match self.scenario.late_handling {
                LateHandling::Dynamic => LateMode::Dynamic,
                LateHandling::SimpleDiscard => LateMode::SimpleDiscard,
            },
            fast_path: self.scenario.strategy != Strategy::ConsensusTotalOrder,
            gc_enabled: self.scenario.gc_enabled,
            group_min: self.scenario.group_min as u64,
            pipeline: 64,
            requery_after: 2_000_000,
        }
    }

    pub fn setup(&mut self) {
        let origin = self.grid.origin;
        let n_total = self.scenario.group_size();
        let members: BTreeSet<ReplicaId> = (0..n_total).map(ReplicaId).collect();
        let initial_senders: Vec<SenderRecord> = (0..self.scenario.client_count)
            .map(|c| SenderRecord::new(SenderId::new(c as u64, origin), origin, 0))
            .collect();
        let recipients: BTreeSet<ClientId> =
            (0..self.scenario.client_count).map(ClientId).collect();

        let proto = matches!(
            self.scenario.strategy,
            Strategy::Fast | Strategy::ConsensusTotalOrder
        );
        for id in 0..n_total {
            let kind = if proto {
                ReplicaKind::Proto(Box::new(Replica::new_initial(
                    self.replica_config(id),
                    members.clone(),
                    origin,
                    initial_senders.clone(),
                    recipients.clone(),
                )))
            } else {
                ReplicaKind::Pb(PbReplica {
                    id,
                    reliable: self.scenario.strategy == Strategy::ReliablePrimaryBackup,
                    primary: 0,
                    members: (0..n_total).collect(),
                    rx: Vec::new(),
                    applied: BTreeSet::new(),
                    digest: [0; 32],
                    applied_count: 0,
                    history: std::collections::VecDeque::new(),
                    next_batch: 0,
                    pending: BTreeMap::new(),
                    next_apply_batch: 0,
                    held: BTreeMap::new(),
                })
            };
            self.spawn_replica_slot(id, kind);
        }
        self.next_replica_id = n_total;

        // Clients: those below client_count start active; script subjects
        // above it wait for a handshake.
        let mut ids: BTreeSet<u32> = (0..self.scenario.client_count).collect();
        for s in &self.scenario.script {
            ids.insert(s.notifier);
            ids.insert(s.subject);
        }
        for id in ids {
            let offset_us = {
                let clock = self.scenario.clock;
                let rng = self.rng(Purpose::Clock, id as u64, 0);
                clock.sample_offset(rng)
            };
            let active = id < self.scenario.client_count;
            let replicas: Vec<ReplicaId> = if proto {
                members.iter().copied().collect()
            } else {
                vec![ReplicaId(0)]
            };
            let client = ClientActor {
                active,
                measuring: true,
                identity: SenderId::new(id as u64, origin),
                t_start: origin,
                offset_us,
                next_seq: 0,
                replicas,
                config_cid: 0,
                pending_ops: Vec::new(),
                sent: BTreeMap::new(),
                first_update: BTreeMap::new(),
                metric_quota: self.scenario.events_per_client,
                metric_sent: 0,
            };
            if active {
                let first = emit_time(
                    client.t_start,
                    client.offset_us,
                    self.timing.net_low,
                    self.grid.cycle_len,
                    self.now,
                    0,
                );
                self.push(first, Task::ClientEmit { client: id });
            }
            self.clients.insert(id, client);
        }

        self.push(origin, Task::RendezvousCheck);
        let script_times: Vec<(usize, u64)> = self
            .scenario
            .script
            .iter()
            .enumerate()
            .map(|(i, s)| (i, s.at_ms * 1000))
            .collect();
        for (i, at) in script_times {
            self.push(at, Task::Script { index: i });
        }
    }

    fn spawn_replica_slot(&mut self, id: u32, kind: ReplicaKind) {
        self.rdv.live.insert(id);
        self.rdv.last_heartbeat.insert(id, self.now);
        let slot = ReplicaSlot {
            alive: true,
            next_tick: None,
            kind,
        };
        self.replicas.insert(id, slot);
        self.push(self.now + 1_000, Task::Heartbeat { replica: id });
        let gossip_at = self.now.max(self.grid.origin) + self.scenario.gc_period_ms * 1000;
        self.push(gossip_at, Task::GossipTick { replica: id });
        if self.scenario.churn.enabled {
            let churn = self.scenario.churn;
            let session = {
                let rng = self.rng(Purpose::Churn, id as u64, 0);
                churn.sample_session(rng)
            };
            self.push(self.now + session, Task::Crash { replica: id });
        }
        self.arm_tick(id);
    }


    fn arm_tick(&mut self, id: u32) {
        let Some(slot) = self.replicas.get(&id) else {
            return;
        };
        if !slot.alive {
            return;
        }
        let next = match &slot.kind {
            ReplicaKind::Proto(r) => r.next_cycle_tick(self.now),
            ReplicaKind::Pb(_) => Some(self.grid.next_close(self.now)),
        };
        if let Some(t) = next {
            let slot = self.replicas.get_mut(&id).unwrap();
            if slot.next_tick != Some(t) {
                slot.next_tick = Some(t);
                self.push(t, Task::CycleTick { replica: id });
            }
        }
    }

    // -----------------------------------------------------------------
    // Main loop
    // -----------------------------------------------------------------

    pub fn run_to_end(&mut self) {
        while let Some(Reverse(entry)) = self.pq.pop() {
            if entry.at > self.horizon || self.group_failed {
                break;
            }
            self.now = entry.at;
            self.dispatch(entry.task);
        }
    }

    fn dispatch(&mut self, task: Task) {
        match task {
            Task::Deliver { from, to, msg } => self.deliver(from, to, msg),
            Task::ClientEmit { client } => self.client_emit(client),
            Task::CycleTick { replica } => {
                let Some(slot) = self.replicas.get_mut(&replica) else {
                    return;
                };
                if !slot.alive {
                    return;
                }
                slot.next_tick = None;
                self.replica_input(replica, Input::CycleTick);
            }
            Task::GossipTick { replica } => {
                let alive = self.replicas.get(&replica).is_some_and(|s| s.alive);
                if alive {
                    self.replica_input(replica, Input::GossipTick);
                    self.push(
                        self.now + self.scenario.gc_period_ms * 1000,
                        Task::GossipTick { replica },
                    );
                }
            }
            Task::Heartbeat { replica } => {
                let alive = self.replicas.get(&replica).is_some_and(|s| s.alive);
                if alive {
                    self.rdv.last_heartbeat.insert(replica, self.now);
                    self.push(
                        self.now + self.grid.cycle_len,
                        Task::Heartbeat { replica },
                    );
                }
            }
            Task::RendezvousCheck => self.rendezvous_check(),
            Task::Crash { replica } => {
                if let Some(slot) = self.replicas.get_mut(&replica) {
                    if slot.alive {
                        slot.alive = false;
                        self.crashes += 1;
                    }
                }
            }
            Task::Script { index } => {
                let entry = self.scenario.script[index];
                let op = if entry.join {
                    AppOp::AddNeighbor {
                        client: entry.subject,
                    }
                } else {
                    AppOp::RemoveNeighbor {
                        client: entry.subject,
                    }
                };
                if !entry.join {
                    if let Some(subject) = self.clients.get_mut(&entry.subject) {
                        subject.active = false;
                        subject.measuring = false;
                    }
                }
                if let Some(notifier) = self.clients.get_mut(&entry.notifier) {
                    notifier.pending_ops.push(op);
                }
            }
        }
    }

    fn trace(&mut self, kind: &str, from: NodeId, to: NodeId) {
        let mut k = 0u64;
        for b in kind.as_bytes() {
            k = k.wrapping_mul(31).wrapping_add(*b as u64);
        }
        self.trace_hash = mix_many(&[self.trace_hash, self.now, k, node_key(from), node_key(to)]);
    }

    fn deliver(&mut self, from: NodeId, to: NodeId, msg: Message) {
        self.trace(msg.kind(), from, to);
        match to {
            NodeId::Replica(r) => {
                let alive = self.replicas.get(&r.0).is_some_and(|s| s.alive);
                if alive {
                    self.replica_message(r.0, from, msg);
                }
            }
            NodeId::Client(c) => self.client_message(c.0, msg),
            NodeId::Rendezvous => {}
        }
    }

    // -----------------------------------------------------------------
    // Replica hosting
    // -----------------------------------------------------------------

    fn replica_message(&mut self, id: u32, from: NodeId, msg: Message) {
        let is_proto = matches!(
            self.replicas.get(&id).map(|s| &s.kind),
            Some(ReplicaKind::Proto(_))
        );
        if is_proto {
            self.replica_input(id, Input::Message { from, msg });
        } else {
            self.pb_message(id, from, msg);
        }
    }

    fn replica_input(&mut self, id: u32, input: Input) {
        let is_proto = {
            let Some(slot) = self.replicas.get(&id) else {
                return;
            };
            if !slot.alive {
                return;
            }
            matches!(slot.kind, ReplicaKind::Proto(_))
        };
        if is_proto {
            let out = {
                let slot = self.replicas.get_mut(&id).unwrap();
                match &mut slot.kind {
                    ReplicaKind::Proto(r) => r.handle(input, self.now),
                    ReplicaKind::Pb(_) => unreachable!(),
                }
            };
            self.process_proto_output(id, out);
        } else if matches!(input, Input::CycleTick) {
            self.pb_cycle_tick(id);
        }
        self.arm_tick(id);
    }

    fn process_proto_output(&mut self, id: u32, out: groupcast_core::Output) {
        for obs in out.observations {
            self.observe(id, obs);
        }
        // Group consecutive reliable replica-bound sends of one kind to
        // measure reliable-multicast completion.
        let mut batch_kind: Option<&'static str> = None;
        let mut batch_deliveries: Vec<Micros> = Vec::new();
        let mut batch_len = 0usize;
        for send in out.sends {
            let kind = send.msg.kind();
            // The decision broadcast closes the collection-delay
            // measurement opened when the instance started.
            if let Message::Decision { cycle, .. } = &send.msg {
                if let Some(start) = self.instance_starts.remove(&(id, *cycle)) {
                    self.d_c_samples.push((self.now - start) as f64 / 1000.0);
                }
            }
            let measured = send.reliable
                && matches!(kind, "QUERY" | "DECISION" | "LOAD_LEADER" | "LOAD_CONFIG");
            if measured && batch_kind != Some(kind) {
                self.flush_multicast_sample(batch_len, &mut batch_deliveries);
                batch_kind = Some(kind);
                batch_len = 0;
            }
            let delivered =
                self.send(NodeId::Replica(ReplicaId(id)), send.to, send.msg, send.reliable);
            if measured {
                batch_len += 1;
                if let Some(t) = delivered {
                    batch_deliveries.push(t);
                }
            }
        }
        self.flush_multicast_sample(batch_len, &mut batch_deliveries);
    }

    fn flush_multicast_sample(&mut self, batch_len: usize, deliveries: &mut Vec<Micros>) {
        if batch_len >= 2 && !deliveries.is_empty() {
            let max = *deliveries.iter().max().unwrap();
            self.d_m_samples
                .push((max - self.now) as f64 / 1000.0);
        }
        deliveries.clear();
    }

    fn observe(&mut self, id: u32, obs: Observation) {
        match obs {
            Observation::Applied {
                delivery_seq,
                event,
                digest,
                ..
            } => {
                self.observer.on_applied(
                    delivery_seq,
                    CanonicalSlot {
                        sender: event.sender,
                        seq: event.seq,
                        is_op: event.payload.is_operation(),
                        digest,
                    },
                );
            }
            Observation::Windows { cycle, windows } => {
                let flat: Vec<(SenderId, u64, u64)> = windows
                    .iter()
                    .map(|w| (w.sender, w.min_seq, w.max_seq))
                    .collect();
                self.observer.on_windows(cycle, flat);
            }
            Observation::CycleDelivered {
                cycle,
                via_consensus,
            } => {
                self.delivered_cycles.insert(cycle);
                if via_consensus {
                    self.consensus_cycles.insert(cycle);
                    let close = self.grid.close_of(cycle);
                    if self.now > close {
                        self.sync_delay_samples
                            .push((self.now - close) as f64 / 1000.0);
                    }
                }
            }
            Observation::Pruned { upto, .. } => {
                // Garbage-collection safety: at prune time every live
                // replica must have applied past the watermark.
                for slot in self.replicas.values() {
                    if !slot.alive {
                        continue;
                    }
                    if let ReplicaKind::Proto(r) = &slot.kind {
                        if r.is_initialized()
                            && !r.group.new_replica
                            && r.applied_upto().map_or(true, |a| a < upto)
                        {
                            self.observer.violations.gc += 1;
                        }
                    }
                }
            }
            Observation::QuerySent { .. } => {}
            Observation::InstanceStarted { cycle } => {
                self.instance_counter += 1;
                self.instance_starts.insert((id, cycle), self.now);
                if self.scenario.crash_leader_on_instance > 0
                    && !self.crash_scheduled
                    && self.instance_counter >= self.scenario.crash_leader_on_instance
                {
                    self.crash_scheduled = true;
                    self.push(self.now + 20_000, Task::Crash { replica: id });
                }
            }
            Observation::StateLoaded {
                epoch,
                cid,
                queue_bytes,
                from_election,
            } => {
                self.observer
                    .on_load((epoch, cid, from_election), queue_bytes);
            }
            Observation::ElectionCompleted { .. } => {
                self.elections += 1;
            }
            Observation::ReconfigCompleted { .. } => {
                self.reconfigs += 1;
            }
        }
    }

    fn sample_qd(&mut self) {
        let mut max = 0u64;
        for slot in self.replicas.values() {
            if !slot.alive {
                continue;
            }
            if let ReplicaKind::Proto(r) = &slot.kind {
                max = max.max(r.queue_len() as u64);
            }
        }
        self.max_qd = self.max_qd.max(max);
        self.qd_sum += max;
        self.qd_samples += 1;
        if self.scenario.record_qd_series {
            self.qd_series.push((self.now / 1000, max));
        }
    }

    // -----------------------------------------------------------------
    // Rendezvous
    // -----------------------------------------------------------------

    fn rendezvous_check(&mut self) {
        self.sample_qd();
        // One missed heartbeat declares a replica failed; heartbeats of
        // live replicas arrive every cycle with fixed control latency, so
        // half a cycle of slack rules out false positives.
        let threshold = 2 * self.grid.cycle_len + 2 * CONTROL_DELAY + self.grid.cycle_len / 2;
        let mut changed = false;
        let dead: Vec<u32> = self
            .rdv
            .live
            .iter()
            .filter(|r| {
                let last = self.rdv.last_heartbeat.get(r).copied().unwrap_or(0);
                self.now.saturating_sub(last) > threshold
            })
            .copied()
            .collect();
        for r in dead {
            self.rdv.live.remove(&r);
            self.rdv.last_heartbeat.remove(&r);
            changed = true;
        }

        // Group failure: nobody holding state is alive.
        let state_holders = self.replicas.iter().any(|(id, slot)| {
            slot.alive
                && self.rdv.live.contains(id)
                && match &slot.kind {
                    ReplicaKind::Proto(r) => !r.group.new_replica,
                    ReplicaKind::Pb(_) => true,
                }
        });
        if !state_holders {
            self.group_failed = true;
            return;
        }

        // Repair: spawn fresh replicas when the live set is short.
        let target = self.scenario.group_size();
        if (self.rdv.live.len() as u32) < self.scenario.group_min {
            while (self.rdv.live.len() as u32) < target {
                let id = self.next_replica_id;
                self.next_replica_id += 1;
                let kind = match self.scenario.strategy {
                    Strategy::Fast | Strategy::ConsensusTotalOrder => {
                        ReplicaKind::Proto(Box::new(Replica::new_blank(self.replica_config(id))))
                    }
                    _ => {
                        // Backups bootstrap from the current primary.
                        let primary = self.pb_current_primary();
                        let (digest, count, applied, next_apply) = primary
                            .map(|p| {
                                (
                                    p.digest,
                                    p.applied_count,
                                    p.applied.clone(),
                                    p.next_batch,
                                )
                            })
                            .unwrap_or(([0; 32], 0, BTreeSet::new(), 0));
                        ReplicaKind::Pb(PbReplica {
                            id,
                            reliable: self.scenario.strategy
                                == Strategy::ReliablePrimaryBackup,
                            primary: self.pb_primary_id().unwrap_or(id),
                            members: Vec::new(),
                            rx: Vec::new(),
                            applied,
                            digest,
                            applied_count: count,
                            history: std::collections::VecDeque::from([(count, digest)]),
                            next_batch: 0,
                            pending: BTreeMap::new(),
                            next_apply_batch: next_apply,
                            held: BTreeMap::new(),
                        })
                    }
                };
                self.spawn_replica_slot(id, kind);
                changed = true;
            }
        }

        if changed {
            self.broadcast_member_state();
        }
        self.push(self.now + self.grid.cycle_len, Task::RendezvousCheck);
    }

    fn broadcast_member_state(&mut self) {
        let live: Vec<ReplicaId> = self.rdv.live.iter().map(|r| ReplicaId(*r)).collect();
        let targets: Vec<u32> = self.rdv.live.iter().copied().collect();
        for r in targets {
            self.send_control(
                NodeId::Rendezvous,
                NodeId::Replica(ReplicaId(r)),
                Message::MemberState { live: live.clone() },
            );
        }
        // Primary-backup promotion: clients follow the lowest live id.
        if matches!(
            self.scenario.strategy,
            Strategy::PrimaryBackup | Strategy::ReliablePrimaryBackup
        ) {
            if let Some(primary) = self.rdv.live.iter().next().copied() {
                let members: Vec<u32> = self.rdv.live.iter().copied().collect();
                for (_, slot) in self.replicas.iter_mut() {
                    if let ReplicaKind::Pb(pb) = &mut slot.kind {
                        pb.primary = primary;
                        pb.members = members.clone();
                    }
                }
                let client_ids: Vec<u32> = self.clients.keys().copied().collect();
                for c in client_ids {
                    self.send_control(
                        NodeId::Rendezvous,
                        NodeId::Client(ClientId(c)),
                        Message::SenderConfig {
                            cid: self.now,
                            members: vec![ReplicaId(primary)],
                        },
                    );
                }
                // A reliable primary waiting on a dead backup unblocks.
                self.pb_flush_pending(primary);
            }
        }
    }

    fn pb_primary_id(&self) -> Option<u32> {
        self.replicas.iter().find_map(|(id, s)| {
            if let ReplicaKind::Pb(pb) = &s.kind {
                if s.alive && pb.is_primary() {
                    return Some(*id);
                }
            }
            None
        })
    }

    fn pb_current_primary(&self) -> Option<&PbReplica> {
        self.replicas.values().find_map(|s| {
            if let ReplicaKind::Pb(pb) = &s.kind {
                if s.alive && pb.is_primary() {
                    return Some(pb);
                }
            }
            None
        })
    }

    // -----------------------------------------------------------------
    // Clients
    // -----------------------------------------------------------------

    fn client_emit(&mut self, id: u32) {
        let Some(client) = self.clients.get_mut(&id) else {
            return;
        };
        if !client.active {
            return;
        }
        let seq = client.next_seq;
        client.next_seq += 1;
        let op = if client.pending_ops.is_empty() {
            AppOp::Mutate(seq.to_le_bytes().to_vec())
        } else {
            client.pending_ops.remove(0)
        };
        let event = Event::new(client.identity, seq, op.to_payload());
        if client.measuring && client.metric_sent < client.metric_quota {
            client.metric_sent += 1;
            client
                .sent
                .insert((client.identity.joined_at, seq), self.now);
        }
        let targets = client.replicas.clone();
        let next = emit_time(
            client.t_start,
            client.offset_us,
            self.timing.net_low,
            self.grid.cycle_len,
            self.now,
            seq + 1,
        );
        let keep_going = next <= self.horizon;
        for r in targets {
            self.send(
                NodeId::Client(ClientId(id)),
                NodeId::Replica(r),
                Message::Event(event.clone()),
                false,
            );
        }
        if keep_going {
            self.push(next, Task::ClientEmit { client: id });
        }
    }

    fn client_message(&mut self, id: u32, msg: Message) {
        let Some(client) = self.clients.get_mut(&id) else {
            return;
        };
        match msg {
            Message::Update { sender, seq, .. } => {
                if sender.base == id as u64 {
                    client
                        .first_update
                        .entry((sender.joined_at, seq))
                        .or_insert(self.now);
                }
            }
            Message::Handshake {
                sender,
                t_start,
                members,
            } => {
                if client.active && client.identity == sender {
                    return;
                }
                client.identity = sender;
                client.t_start = t_start;
                client.next_seq = 0;
                client.active = true;
                client.measuring = true;
                if !members.is_empty() {
                    client.replicas = members;
                }
                let first = emit_time(
                    client.t_start,
                    client.offset_us,
                    self.timing.net_low,
                    self.grid.cycle_len,
                    self.now,
                    0,
                );
                self.push(first, Task::ClientEmit { client: id });
            }
            Message::SenderConfig { cid, members } => {
                if cid >= client.config_cid && !members.is_empty() {
                    client.config_cid = cid;
                    client.replicas = members;
                }
            }
            _ => {}
        }
    }

    // -----------------------------------------------------------------
    // Primary-backup baselines
    // -----------------------------------------------------------------

    fn pb_message(&mut self, id: u32, from: NodeId, msg: Message) {
        let Some(slot) = self.replicas.get_mut(&id) else {
            return;
        };
        let ReplicaKind::Pb(pb) = &mut slot.kind else {
            return;
        };
        match msg {
            Message::Event(e) => {
                if pb.is_primary() {
                    pb.rx.push(e);
                }
            }
            // Batch forwarded by the primary.
            Message::Decision { cycle, events, .. } => {
                pb.held.insert(cycle, events);
                let mut acks = Vec::new();
                while let Some(events) = pb.held.remove(&pb.next_apply_batch) {
                    let batch = pb.next_apply_batch;
                    pb.next_apply_batch += 1;
                    let mut sorted = events;
                    sorted.sort_by_key(|e| (e.sender, e.seq));
                    for e in &sorted {
                        pb.fold(e);
                    }
                    if pb.reliable {
                        acks.push(batch);
                    }
                }
                let primary = pb.primary;
                for batch in acks {
                    self.send(
                        NodeId::Replica(ReplicaId(id)),
                        NodeId::Replica(ReplicaId(primary)),
                        Message::QueryResult {
                            epoch: 0,
                            cid: 0,
                            cycle: batch,
                            events: vec![],
                        },
                        true,
                    );
                }
            }
            // Backup acknowledgment (reliable mode).
            Message::QueryResult { cycle, .. } => {
                if !pb.is_primary() {
                    return;
                }
                let NodeId::Replica(b) = from else {
                    return;
                };
                if let Some((_, acked)) = pb.pending.get_mut(&cycle) {
                    acked.insert(b.0);
                }
                self.pb_flush_pending(id);
            }
            _ => {}
        }
    }

    fn pb_cycle_tick(&mut self, id: u32) {
        let Some(slot) = self.replicas.get_mut(&id) else {
            return;
        };
        let ReplicaKind::Pb(pb) = &mut slot.kind else {
            return;
        };
        if !pb.is_primary() || pb.rx.is_empty() {
            return;
        }
        let mut batch: Vec<Event> = std::mem::take(&mut pb.rx);
        batch.sort_by_key(|e| (e.sender, e.seq));
        batch.retain(|e| !pb.applied.contains(&(e.sender, e.seq)));
        if batch.is_empty() {
            return;
        }
        let batch_id = pb.next_batch;
        pb.next_batch += 1;
        let backups: Vec<u32> = pb
            .members
            .iter()
            .copied()
            .filter(|m| *m != id)
            .collect();
        let reliable = pb.reliable;
        if reliable {
            pb.pending
                .insert(batch_id, (batch.clone(), BTreeSet::new()));
        }
        let fwd = Message::Decision {
            epoch: 0,
            cid: 0,
            cycle: batch_id,
            events: batch.clone(),
        };
        for b in &backups {
            self.send(
                NodeId::Replica(ReplicaId(id)),
                NodeId::Replica(ReplicaId(*b)),
                fwd.clone(),
                reliable,
            );
        }
        if reliable {
            self.pb_flush_pending(id);
        } else {
            self.pb_apply_and_update(id, batch);
        }
    }

    /// Reliable primary: apply and answer batches whose acks cover every
    /// live backup.
    fn pb_flush_pending(&mut self, id: u32) {
        loop {
            let live_backups: BTreeSet<u32> = self
                .rdv
                .live
                .iter()
                .copied()
                .filter(|r| *r != id && self.replicas.get(r).is_some_and(|s| s.alive))
                .collect();
            let Some(slot) = self.replicas.get_mut(&id) else {
                return;
            };
            let ReplicaKind::Pb(pb) = &mut slot.kind else {
                return;
            };
            let Some((&batch_id, (_, acked))) = pb.pending.iter().next() else {
                return;
            };
            if live_backups.iter().all(|b| acked.contains(b)) {
                let (events, _) = pb.pending.remove(&batch_id).unwrap();
                self.pb_apply_and_update(id, events);
            } else {
                return;
            }
        }
    }

    fn pb_apply_and_update(&mut self, id: u32, batch: Vec<Event>) {
        let recipients: Vec<u32> = self.clients.keys().copied().collect();
        let Some(slot) = self.replicas.get_mut(&id) else {
            return;
        };
        let ReplicaKind::Pb(pb) = &mut slot.kind else {
            return;
        };
        let mut updates = Vec::new();
        for e in &batch {
            pb.fold(e);
            let digest = pb.digest;
            let lam = pb.applied_count.saturating_sub(1);
            updates.push(Message::Update {
                delivery_seq: lam,
                sender: e.sender,
                seq: e.seq,
                digest,
            });
        }
        for u in updates {
            for c in &recipients {
                self.send(
                    NodeId::Replica(ReplicaId(id)),
                    NodeId::Client(ClientId(*c)),
                    u.clone(),
                    false,
                );
            }
        }
    }

    // -----------------------------------------------------------------
    // Finalization
    // -----------------------------------------------------------------

    pub fn finalize(mut self) -> Metrics {
        let mut metrics = Metrics::default();
        let timeout_us = self.scenario.update_timeout_ms * 1000;
        let mut latencies: Vec<f64> = Vec::new();
        for client in self.clients.values() {
            for (key, sent_at) in &client.sent {
                metrics.events_sent += 1;
                if let Some(got) = client.first_update.get(key) {
                    let lat = got.saturating_sub(*sent_at);
                    if lat <= timeout_us {
                        metrics.updates_delivered += 1;
                        latencies.push(lat as f64 / 1000.0);
                    }
                }
            }
        }
        metrics.delivery_rate = if metrics.events_sent > 0 {
            metrics.updates_delivered as f64 / metrics.events_sent as f64
        } else {
            0.0
        };
        let (mean, p95) = latency_summary(&mut latencies);
        metrics.mean_latency_ms = mean;
        metrics.p95_latency_ms = p95;

        metrics.total_cycles = self.delivered_cycles.len() as u64;
        metrics.consensus_cycles = self.consensus_cycles.len() as u64;
        metrics.p_sync = if metrics.total_cycles > 0 {
            metrics.consensus_cycles as f64 / metrics.total_cycles as f64
        } else {
            0.0
        };
        metrics.max_qd = self.max_qd;
        metrics.mean_qd = if self.qd_samples > 0 {
            self.qd_sum as f64 / self.qd_samples as f64
        } else {
            0.0
        };
        metrics.elections = self.elections;
        metrics.reconfigs = self.reconfigs;
        metrics.replica_crashes = self.crashes;
        metrics.group_failed = self.group_failed;
        metrics.qd_series = std::mem::take(&mut self.qd_series);
        metrics.trace_hash = self.trace_hash;

        let avg = |v: &Vec<f64>| {
            if v.is_empty() {
                0.0
            } else {
                v.iter().sum::<f64>() / v.len() as f64
            }
        };
        metrics.d_m_ms = avg(&self.d_m_samples);
        metrics.d_c_ms = avg(&self.d_c_samples);
        metrics.sync_delay_ms = avg(&self.sync_delay_samples);

        // Roll up counters (all replicas) and quiescence checks (live).
        type PbState = (bool, u64, [u8; 32], std::collections::VecDeque<(u64, [u8; 32])>);
        let mut pb_digests: Vec<PbState> = Vec::new();
        for slot in self.replicas.values() {
            match &slot.kind {
                ReplicaKind::Proto(r) => {
                    metrics.queries_sent += r.counters.queries_sent;
                    metrics.instances_started += r.counters.instances_started;
                    metrics.violations.decision += r.counters.decision_conflicts;
                    if !slot.alive || r.group.new_replica {
                        continue;
                    }
                    if let Some(applied) = r.applied_upto() {
                        match self.observer.canonical.get(&applied) {
                            Some(c) if c.digest == r.app_digest() => {}
                            _ => self.observer.violations.order += 1,
                        }
                    }
                }
                ReplicaKind::Pb(pb) => {
                    if slot.alive {
                        pb_digests.push((
                            pb.is_primary(),
                            pb.applied_count,
                            pb.digest,
                            pb.history.clone(),
                        ));
                    }
                }
            }
        }
        // A backup diverges when its fold state never occurred in the
        // primary's recent history (in-flight batches at the horizon make
        // plain digest equality too strict).
        if let Some((_, p_count, p_digest, p_history)) =
            pb_digests.iter().find(|(is_primary, ..)| *is_primary)
        {
            metrics.pb_divergence = pb_digests
                .iter()
                .filter(|(is_primary, count, digest, history)| {
                    if *is_primary {
                        return false;
                    }
                    if count == p_count && digest == p_digest {
                        return false;
                    }
                    if *count == 0 {
                        // An empty backup is only consistent with an
                        // empty-prefix primary.
                        return p_history.front().is_some_and(|(c, _)| *c > 1);
                    }
                    // Behind the primary, or (reliable mode) ahead of it.
                    !p_history.contains(&(*count, *digest))
                        && !history.contains(&(*p_count, *p_digest))
                })
                .count() as u64;
        }
        metrics.violations.order += self.observer.violations.order;
        metrics.violations.windows = self.observer.violations.windows;
        metrics.violations.gc = self.observer.violations.gc;
        metrics.violations.sync = self.observer.violations.sync;
        metrics
    }
}

/// Execute a scenario to completion. Identical (scenario, seed) pairs give
/// bit-identical metrics.
pub fn run(scenario: &SimScenario) -> Metrics {
    let mut sim = Sim::new(scenario.clone());
    sim.setup();
    sim.run_to_end();
    sim.finalize()
}
