//! Typed messages exchanged over the transport, with their canonical wire
//! encoding (stable field order, little-endian, length-prefixed buffers).
//!
//! Wire schema, by tag byte:
//!
//! | tag | message        | fields, in order                                        |
//! |-----|----------------|---------------------------------------------------------|
//! | 0   | EVENT          | sender(base u64, joined u64), seq u64, payload          |
//! | 1   | UPDATE         | delivery_seq u64, sender, seq u64, digest 32B           |
//! | 2   | HANDSHAKE      | sender, t_start u64, members list                       |
//! | 3   | SENDER_CONFIG  | cid u64, members list                                   |
//! | 4   | QUERY          | epoch u64, cid u64, cycle u64, windows list             |
//! | 5   | QUERY_REPLY    | epoch u64, cid u64, cycle u64, events list              |
//! | 6   | QUERY_RESULT   | epoch u64, cid u64, cycle u64, events list              |
//! | 7   | DECISION       | epoch u64, cid u64, cycle u64, events list              |
//! | 8   | GC_LAMBDA      | applied u64 (u64::MAX = none)                           |
//! | 9   | HEARTBEAT      | —                                                       |
//! | 10  | MEMBER_STATE   | live list                                               |
//! | 11  | LE_QUERY       | —                                                       |
//! | 12  | LE_STATE       | sync state                                              |
//! | 13  | NACK           | computed candidate u32                                  |
//! | 14  | LOAD_LEADER    | sync package                                            |
//! | 15  | ACK            | —                                                       |
//! | 16  | GR_QUERY       | epoch u64, cid u64                                      |
//! | 17  | GE_STATE       | sync state                                              |
//! | 18  | LOAD_CONFIG    | sync package, target members list                       |
//!
//! Event payloads encode as a tag byte (0 operation + bytes, 1 empty);
//! Bottom is local-only and unencodable. Lists are u32 counts followed by
//! elements. Windows are (sender, min u64, max u64).

use std::collections::{BTreeMap, BTreeSet};

use crate::codec::{self, DecodeError, Reader, Writer};
use crate::consensus::{DecisionSet, SenderWindow, WindowSet};
use crate::event::{Event, Payload};
use crate::id::{Cycle, DeliverySeq, Micros, ReplicaId, SenderId};
use crate::membership::{InitState, SyncPackage, SyncState};
use crate::queue::DeliveryQueue;
use crate::sender::SenderRecord;

#[derive(Clone, PartialEq, Debug)]
pub enum Message {
    /// EVENT: client → every replica of the group.
    Event(Event),
    /// UPDATE: replica → update recipients after applying an event.
    Update {
        delivery_seq: DeliverySeq,
        sender: SenderId,
        seq: u64,
        digest: [u8; 32],
    },
    /// HANDSHAKE: replica → joining client with its schedule anchor.
    Handshake {
        sender: SenderId,
        t_start: Micros,
        members: Vec<ReplicaId>,
    },
    /// SENDER_CONFIG: leader → senders after a configuration change.
    SenderConfig { cid: u64, members: Vec<ReplicaId> },
    /// QUERY: requester → leader, and leader → members when an instance
    /// starts. Carries the expected windows of the queried cycle.
    Query {
        epoch: u64,
        cid: u64,
        cycle: Cycle,
        windows: WindowSet,
    },
    /// QUERY_REPLY: leader → requester when it holds all queried events.
    QueryReply {
        epoch: u64,
        cid: u64,
        cycle: Cycle,
        events: Vec<Event>,
    },
    /// QUERY_RESULT: member → leader; the member's proposal.
    QueryResult {
        epoch: u64,
        cid: u64,
        cycle: Cycle,
        events: Vec<Event>,
    },
    /// DECISION: leader → members.
    Decision {
        epoch: u64,
        cid: u64,
        cycle: Cycle,
        events: Vec<Event>,
    },
    /// GC_LAMBDA: gossip of the last applied delivery sequence.
    GcLambda { applied: Option<DeliverySeq> },
    /// HEARTBEAT: replica → Rendezvous.
    Heartbeat,
    /// MEMBER_STATE: Rendezvous → replicas; the authoritative live set.
    MemberState { live: Vec<ReplicaId> },
    /// LE_QUERY: candidate → live members.
    LeQuery,
    /// LE_STATE: member → candidate.
    LeState(SyncState),
    /// NACK: member → candidate it does not endorse.
    Nack { computed: ReplicaId },
    /// LOAD_LEADER: candidate → live replicas.
    LoadLeader(SyncPackage),
    /// ACK: member → candidate after loading.
    Ack,
    /// GR_QUERY: leader → reconfiguration target members.
    GrQuery { epoch: u64, cid: u64 },
    /// GE_STATE: member → leader.
    GeState(SyncState),
    /// LOAD_CONFIG: leader → reconfiguration target members.
    LoadConfig {
        package: SyncPackage,
        target: Vec<ReplicaId>,
    },
}

impl Message {
    pub fn kind(&self) -> &'static str {
        match self {
            Message::Event(_) => "EVENT",
            Message::Update { .. } => "UPDATE",
            Message::Handshake { .. } => "HANDSHAKE",
            Message::SenderConfig { .. } => "SENDER_CONFIG",
            Message::Query { .. } => "QUERY",
            Message::QueryReply { .. } => "QUERY_REPLY",
            Message::QueryResult { .. } => "QUERY_RESULT",
            Message::Decision { .. } => "DECISION",
            Message::GcLambda { .. } => "GC_LAMBDA",
            Message::Heartbeat => "HEARTBEAT",
            Message::MemberState { .. } => "MEMBER_STATE",
            Message::LeQuery => "LE_QUERY",
            Message::LeState(_) => "LE_STATE",
            Message::Nack { .. } => "NACK",
            Message::LoadLeader(_) => "LOAD_LEADER",
            Message::Ack => "ACK",
            Message::GrQuery { .. } => "GR_QUERY",
            Message::GeState(_) => "GE_STATE",
            Message::LoadConfig { .. } => "LOAD_CONFIG",
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::new();
        match self {
            Message::Event(e) => {
                w.u8(0);
                put_event(&mut w, e);
            }
            Message::Update {
                delivery_seq,
                sender,
                seq,
                digest,
            } => {
                w.u8(1);
                w.u64(*delivery_seq);
                put_sender(&mut w, sender);
                w.u64(*seq);
                w.bytes(digest);
            }
            Message::Handshake {
                sender,
                t_start,
                members,
            } => {
                w.u8(2);
                put_sender(&mut w, sender);
                w.u64(*t_start);
                put_replicas(&mut w, members);
            }
            Message::SenderConfig { cid, members } => {
                w.u8(3);
                w.u64(*cid);
                put_replicas(&mut w, members);
            }
            Message::Query {
                epoch,
                cid,
                cycle,
                windows,
            } => {
                w.u8(4);
                w.u64(*epoch);
                w.u64(*cid);
                w.u64(*cycle);
                w.u32(windows.len() as u32);
                for win in windows {
                    put_sender(&mut w, &win.sender);
                    w.u64(win.min_seq);
                    w.u64(win.max_seq);
                }
            }
            Message::QueryReply {
                epoch,
                cid,
                cycle,
                events,
            } => {
                w.u8(5);
                put_cycle_events(&mut w, *epoch, *cid, *cycle, events);
            }
            Message::QueryResult {
                epoch,
                cid,
                cycle,
                events,
            } => {
                w.u8(6);
                put_cycle_events(&mut w, *epoch, *cid, *cycle, events);
            }
            Message::Decision {
                epoch,
                cid,
                cycle,
                events,
            } => {
                w.u8(7);
                put_cycle_events(&mut w, *epoch, *cid, *cycle, events);
            }
            Message::GcLambda { applied } => {
                w.u8(8);
                w.u64(codec::opt_seq(*applied));
            }
            Message::Heartbeat => w.u8(9),
            Message::MemberState { live } => {
                w.u8(10);
                put_replicas(&mut w, live);
            }
            Message::LeQuery => w.u8(11),
            Message::LeState(s) => {
                w.u8(12);
                put_sync_state(&mut w, s);
            }
            Message::Nack { computed } => {
                w.u8(13);
                w.u32(computed.0);
            }
            Message::LoadLeader(p) => {
                w.u8(14);
                put_package(&mut w, p);
            }
            Message::Ack => w.u8(15),
            Message::GrQuery { epoch, cid } => {
                w.u8(16);
                w.u64(*epoch);
                w.u64(*cid);
            }
            Message::GeState(s) => {
                w.u8(17);
                put_sync_state(&mut w, s);
            }
            Message::LoadConfig { package, target } => {
                w.u8(18);
                put_package(&mut w, package);
                put_replicas(&mut w, target);
            }
        }
        w.finish()
    }

    pub fn decode(bytes: &[u8]) -> Result<Message, DecodeError> {
        let mut r = Reader::new(bytes);
        let msg = match r.u8()? {
            0 => Message::Event(get_event(&mut r)?),
            1 => Message::Update {
                delivery_seq: r.u64()?,
                sender: get_sender(&mut r)?,
                seq: r.u64()?,
                digest: r.bytes()?.try_into().map_err(|_| DecodeError)?,
            },
            2 => Message::Handshake {
                sender: get_sender(&mut r)?,
                t_start: r.u64()?,
                members: get_replicas(&mut r)?,
            },
            3 => Message::SenderConfig {
                cid: r.u64()?,
                members: get_replicas(&mut r)?,
            },
            4 => {
                let (epoch, cid, cycle) = (r.u64()?, r.u64()?, r.u64()?);
                let n = r.u32()?;
                let mut windows = Vec::with_capacity(n as usize);
                for _ in 0..n {
                    windows.push(SenderWindow {
                        sender: get_sender(&mut r)?,
                        min_seq: r.u64()?,
                        max_seq: r.u64()?,
                    });
                }
                Message::Query {
                    epoch,
                    cid,
                    cycle,
                    windows,
                }
            }
            5 => {
                let (epoch, cid, cycle, events) = get_cycle_events(&mut r)?;
                Message::QueryReply {
                    epoch,
                    cid,
                    cycle,
                    events,
                }
            }
            6 => {
                let (epoch, cid, cycle, events) = get_cycle_events(&mut r)?;
                Message::QueryResult {
                    epoch,
                    cid,
                    cycle,
                    events,
                }
            }
            7 => {
                let (epoch, cid, cycle, events) = get_cycle_events(&mut r)?;
                Message::Decision {
                    epoch,
                    cid,
                    cycle,
                    events,
                }
            }
            8 => Message::GcLambda {
                applied: codec::seq_opt(r.u64()?),
            },
            9 => Message::Heartbeat,
            10 => Message::MemberState {
                live: get_replicas(&mut r)?,
            },
            11 => Message::LeQuery,
            12 => Message::LeState(get_sync_state(&mut r)?),
            13 => Message::Nack {
                computed: ReplicaId(r.u32()?),
            },
            14 => Message::LoadLeader(get_package(&mut r)?),
            15 => Message::Ack,
            16 => Message::GrQuery {
                epoch: r.u64()?,
                cid: r.u64()?,
            },
            17 => Message::GeState(get_sync_state(&mut r)?),
            18 => Message::LoadConfig {
                package: get_package(&mut r)?,
                target: get_replicas(&mut r)?,
            },
            _ => return Err(DecodeError),
        };
        if !r.done() {
            return Err(DecodeError);
        }
        Ok(msg)
    }
}

fn put_sender(w: &mut Writer, s: &SenderId) {
    w.u64(s.base);
    w.u64(s.joined_at);
}

fn get_sender(r: &mut Reader) -> Result<SenderId, DecodeError> {
    Ok(SenderId::new(r.u64()?, r.u64()?))
}

fn put_event(w: &mut Writer, e: &Event) {
    put_sender(w, &e.sender);
    w.u64(e.seq);
    match &e.payload {
        Payload::Operation(bytes) => {
            w.u8(0);
            w.bytes(bytes);
        }
        Payload::Empty => w.u8(1),
        Payload::Bottom => panic!("bottom payloads never cross the network"),
    }
}

fn get_event(r: &mut Reader) -> Result<Event, DecodeError> {
    let sender = get_sender(r)?;
    let seq = r.u64()?;
    let payload = match r.u8()? {
        0 => Payload::Operation(r.bytes()?),
        1 => Payload::Empty,
        _ => return Err(DecodeError),
    };
    Ok(Event::new(sender, seq, payload))
}

fn put_events(w: &mut Writer, events: &[Event]) {
    w.u32(events.len() as u32);
    for e in events {
        put_event(w, e);
    }
}

fn get_events(r: &mut Reader) -> Result<Vec<Event>, DecodeError> {
    let n = r.u32()?;
    let mut events = Vec::with_capacity(n as usize);
    for _ in 0..n {
        events.push(get_event(r)?);
    }
    Ok(events)
}

fn put_cycle_events(w: &mut Writer, epoch: u64, cid: u64, cycle: Cycle, events: &[Event]) {
    w.u64(epoch);
    w.u64(cid);
    w.u64(cycle);
    put_events(w, events);
}

fn get_cycle_events(r: &mut Reader) -> Result<(u64, u64, Cycle, Vec<Event>), DecodeError> {
    Ok((r.u64()?, r.u64()?, r.u64()?, get_events(r)?))
}

fn put_replicas(w: &mut Writer, list: &[ReplicaId]) {
    w.u32(list.len() as u32);
    for r in list {
        w.u32(r.0);
    }
}

fn get_replicas(r: &mut Reader) -> Result<Vec<ReplicaId>, DecodeError> {
    let n = r.u32()?;
    let mut v = Vec::with_capacity(n as usize);
    for _ in 0..n {
        v.push(ReplicaId(r.u32()?));
    }
    Ok(v)
}

fn put_queue(w: &mut Writer, q: &DeliveryQueue) {
    w.bytes(&q.to_bytes());
}

fn get_queue(r: &mut Reader) -> Result<DeliveryQueue, DecodeError> {
    let bytes = r.bytes()?;
    let mut qr = Reader::new(&bytes);
    let next = qr.u64()?;
    let applied = codec::seq_opt(qr.u64()?);
    let pruned = codec::seq_opt(qr.u64()?);
    let n = qr.u32()?;
    let mut slots = Vec::with_capacity(n as usize);
    for _ in 0..n {
        let cycle = qr.u64()?;
        let rank = qr.u64()?;
        let delivery_seq = qr.u64()?;
        let sender = get_sender(&mut qr)?;
        let eseq = qr.u64()?;
        let payload = match qr.u8()? {
            0 => Payload::Operation(qr.bytes()?),
            1 => Payload::Empty,
            _ => return Err(DecodeError),
        };
        slots.push(crate::queue::DeliverySlot {
            cycle,
            rank,
            delivery_seq,
            event: Event::new(sender, eseq, payload),
        });
    }
    DeliveryQueue::restore(next, applied, pruned, slots).ok_or(DecodeError)
}

fn put_sender_records(w: &mut Writer, records: &[SenderRecord]) {
    w.u32(records.len() as u32);
    for rec in records {
        put_sender(w, &rec.id);
        w.u64(rec.t_start);
        w.u64(rec.first_cycle);
        w.u64(codec::opt_seq(rec.max_delivered));
    }
}

fn get_sender_records(r: &mut Reader) -> Result<Vec<SenderRecord>, DecodeError> {
    let n = r.u32()?;
    let mut v = Vec::with_capacity(n as usize);
    for _ in 0..n {
        let id = get_sender(r)?;
        let t_start = r.u64()?;
        let first_cycle = r.u64()?;
        let max_delivered = codec::seq_opt(r.u64()?);
        let mut rec = SenderRecord::new(id, t_start, first_cycle);
        rec.max_delivered = max_delivered;
        v.push(rec);
    }
    Ok(v)
}

fn put_decided(w: &mut Writer, decided: &BTreeMap<Cycle, DecisionSet>) {
    w.u32(decided.len() as u32);
    for (cycle, set) in decided {
        w.u64(*cycle);
        put_events(w, set);
    }
}

fn get_decided(r: &mut Reader) -> Result<BTreeMap<Cycle, DecisionSet>, DecodeError> {
    let n = r.u32()?;
    let mut m = BTreeMap::new();
    for _ in 0..n {
        let cycle = r.u64()?;
        m.insert(cycle, get_events(r)?);
    }
    Ok(m)
}

fn put_sync_state(w: &mut Writer, s: &SyncState) {
    put_queue(w, &s.queue);
    w.u64(s.next_cycle);
    put_sender_records(w, &s.senders);
    put_decided(w, &s.decided);
    w.u64(s.cid);
    let members: Vec<ReplicaId> = s.members.iter().copied().collect();
    put_replicas(w, &members);
    w.u64(s.epoch);
}

fn get_sync_state(r: &mut Reader) -> Result<SyncState, DecodeError> {
    Ok(SyncState {
        queue: get_queue(r)?,
        next_cycle: r.u64()?,
        senders: get_sender_records(r)?,
        decided: get_decided(r)?,
        cid: r.u64()?,
        members: get_replicas(r)?.into_iter().collect::<BTreeSet<_>>(),
        epoch: r.u64()?,
    })
}

fn put_package(w: &mut Writer, p: &SyncPackage) {
    put_queue(w, &p.queue);
    w.u64(p.next_cycle);
    put_sender_records(w, &p.senders);
    put_decided(w, &p.decided);
    w.u64(p.cid);
    let members: Vec<ReplicaId> = p.members.iter().copied().collect();
    put_replicas(w, &members);
    w.u64(p.epoch);
    w.u64(p.init.origin);
    w.u64(codec::opt_seq(p.init.applied_upto));
    w.bytes(&p.init.app_digest);
    w.u32(p.init.ages.len() as u32);
    for (r_, age) in &p.init.ages {
        w.u32(r_.0);
        w.u64(*age);
    }
}

fn get_package(r: &mut Reader) -> Result<SyncPackage, DecodeError> {
    let queue = get_queue(r)?;
    let next_cycle = r.u64()?;
    let senders = get_sender_records(r)?;
    let decided = get_decided(r)?;
    let cid = r.u64()?;
    let members: BTreeSet<ReplicaId> = get_replicas(r)?.into_iter().collect();
    let epoch = r.u64()?;
    let origin = r.u64()?;
    let applied_upto = codec::seq_opt(r.u64()?);
    let app_digest: [u8; 32] = r.bytes()?.try_into().map_err(|_| DecodeError)?;
    let n = r.u32()?;
    let mut ages = BTreeMap::new();
    for _ in 0..n {
        let id = ReplicaId(r.u32()?);
        ages.insert(id, r.u64()?);
    }
    Ok(SyncPackage {
        queue,
        next_cycle,
        senders,
        decided,
        cid,
        members,
        epoch,
        init: InitState {
            origin,
            applied_upto,
            app_digest,
            ages,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sid(base: u64) -> SenderId {
        SenderId::new(base, 42)
    }

    #[test]
    fn control_messages_round_trip() {
        let msgs = vec![
            Message::Heartbeat,
            Message::LeQuery,
            Message::Ack,
            Message::Nack {
                computed: ReplicaId(3),
            },
            Message::GrQuery { epoch: 2, cid: 7 },
            Message::MemberState {
                live: vec![ReplicaId(0), ReplicaId(2)],
            },
            Message::GcLambda { applied: None },
            Message::GcLambda { applied: Some(42) },
        ];
        for m in msgs {
            assert_eq!(Message::decode(&m.encode()).unwrap(), m);
        }
    }

    proptest! {
        #[test]
        fn data_messages_round_trip(
            base in 0u64..8,
            seq in 0u64..1000,
            payload in proptest::collection::vec(any::<u8>(), 0..20),
            cycle in 0u64..1000,
            epoch in 0u64..4,
        ) {
            let e = Event::new(sid(base), seq, Payload::Operation(payload));
            let msgs = vec![
                Message::Event(e.clone()),
                Message::Update {
                    delivery_seq: seq,
                    sender: sid(base),
                    seq,
                    digest: [7; 32],
                },
                Message::Query {
                    epoch,
                    cid: 1,
                    cycle,
                    windows: vec![SenderWindow { sender: sid(base), min_seq: seq, max_seq: seq + 2 }],
                },
                Message::Decision { epoch, cid: 1, cycle, events: vec![e] },
            ];
            for m in msgs {
                prop_assert_eq!(Message::decode(&m.encode()).unwrap(), m.clone());
            }
        }
    }

    #[test]
    fn sync_state_round_trips_through_wire_bytes() {
        let mut queue = DeliveryQueue::new();
        for i in 0..6u64 {
            queue.push(
                i,
                0,
                Event::new(sid(1), i, Payload::Operation(vec![i as u8])),
            );
        }
        queue.mark_applied(3);
        queue.prune_upto(1);
        let state = SyncState {
            queue,
            next_cycle: 6,
            senders: vec![SenderRecord::new(sid(1), 0, 0)],
            decided: BTreeMap::from([(4, vec![Event::new(sid(1), 4, Payload::Empty)])]),
            cid: 2,
            members: [ReplicaId(0), ReplicaId(1)].into(),
            epoch: 5,
        };
        let m = Message::LeState(state.clone());
        let decoded = Message::decode(&m.encode()).unwrap();
        let Message::LeState(out) = decoded else {
            panic!("wrong variant");
        };
        assert_eq!(out.queue.next_seq(), state.queue.next_seq());
        assert_eq!(out.queue.last_applied(), state.queue.last_applied());
        assert_eq!(
            out.queue.slots().count(),
            state.queue.slots().count()
        );
        assert_eq!(out.decided, state.decided);
        assert_eq!(out.members, state.members);
    }
}
