//! Event collection: the receive buffer and the per-cycle staging view.

use std::collections::BTreeMap;

use crate::event::Event;
use crate::id::{Cycle, Seq, SenderId};
use crate::sender::SenderTable;

/// How late arrivals are treated.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum LateMode {
    /// Expected windows span [MinSeq, Seq(s, c)]; late events are delivered
    /// in the first cycle that closes after they arrive.
    Dynamic,
    /// One cycle, one event: anything with a sequence number below the
    /// cycle's is dropped at collection.
    SimpleDiscard,
}

/// Received, not-yet-delivered events (the paper's Q_r).
#[derive(Clone, Debug, Default)]
pub struct ReceiveBuffer {
    events: BTreeMap<(SenderId, Seq), Event>,
    pub unknown_sender_drops: u64,
    pub stale_drops: u64,
}

impl ReceiveBuffer {
    pub fn new() -> Self {
        Self::default()
    }

    /// Handle an EVENT arrival. Accepts iff the sender is known and the
    /// sequence number is above the sender's delivered watermark; late and
    /// out-of-order events are discarded here. Duplicate receipt is a no-op.
    pub fn on_event_received(&mut self, senders: &SenderTable, event: Event) -> bool {
        debug_assert!(!event.payload.is_bottom(), "bottom never crosses the network");
        let Some(rec) = senders.get(&event.sender) else {
            self.unknown_sender_drops += 1;
            return false;
        };
        if rec.max_delivered.is_some_and(|m| event.seq <= m) {
            self.stale_drops += 1;
            return false;
        }
        self.events.entry(event.key()).or_insert(event);
        true
    }

    pub fn contains(&self, key: (SenderId, Seq)) -> bool {
        self.events.contains_key(&key)
    }

    pub fn get(&self, key: (SenderId, Seq)) -> Option<&Event> {
        self.events.get(&key)
    }

    pub fn take(&mut self, key: (SenderId, Seq)) -> Option<Event> {
        self.events.remove(&key)
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    /// Drop everything at or below the sender's new watermark. Runs whenever
    /// MaxSeq advances; anything below it is late and out-of-order now.
    pub fn purge_delivered(&mut self, sender: SenderId, max_delivered: Seq) {
        let keys: Vec<_> = self
            .events
            .range((sender, 0)..=(sender, max_delivered))
            .map(|(k, _)| *k)
            .collect();
        for k in keys {
            self.events.remove(&k);
        }
    }

    /// Drop all events from a removed sender.
    pub fn purge_sender(&mut self, sender: SenderId) {
        let keys: Vec<_> = self
            .events
            .range((sender, 0)..=(sender, Seq::MAX))
            .map(|(k, _)| *k)
            .collect();
        for k in keys {
            self.events.remove(&k);
        }
    }

    /// Staging view for the cycle that just closed: for every active sender
    /// the cycle event or a Bottom placeholder, plus every received,
    /// undelivered event inside the sender's expected window (replacing its
    /// placeholder when sequence numbers coincide). In simple-discard mode
    /// only the exact cycle event qualifies.
    pub fn collect_cycle(
        &self,
        senders: &SenderTable,
        cycle: Cycle,
        mode: LateMode,
    ) -> Vec<(Cycle, Event)> {
        let mut staged = Vec::new();
        for rec in senders.iter() {
            if !rec.active_at(cycle) {
                continue;
            }
            let top = rec.seq_of_cycle(cycle).expect("active checked");
            let bottom = match mode {
                LateMode::Dynamic => rec.next_expected(),
                LateMode::SimpleDiscard => top,
            };
            for seq in bottom..=top {
                match self.events.get(&(rec.id, seq)) {
                    Some(e) => staged.push((cycle, e.clone())),
                    None if seq == top => {
                        staged.push((cycle, Event::bottom(rec.id, seq)));
                    }
                    None => staged.push((cycle, Event::bottom(rec.id, seq))),
                }
            }
        }
        staged
    }

    /// Whether every expected event of the cycle has been received.
    pub fn cycle_complete(&self, senders: &SenderTable, cycle: Cycle, mode: LateMode) -> bool {
        self.collect_cycle(senders, cycle, mode)
            .iter()
            .all(|(_, e)| !e.payload.is_bottom())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::event::Payload;
    use crate::sender::SenderRecord;

    fn table(max_delivered: Option<Seq>) -> (SenderTable, SenderId) {
        let id = SenderId::new(1, 0);
        let mut rec = SenderRecord::new(id, 0, 0);
        rec.max_delivered = max_delivered;
        let mut t = SenderTable::new();
        t.insert(rec);
        (t, id)
    }

    fn op(id: SenderId, seq: Seq) -> Event {
        Event::new(id, seq, Payload::Operation(vec![seq as u8]))
    }

    #[test]
    fn accepts_above_watermark() {
        let (t, id) = table(Some(4));
        let mut rx = ReceiveBuffer::new();
        assert!(rx.on_event_received(&t, op(id, 7)));
        assert!(rx.contains((id, 7)));
    }

    #[test]
    fn discards_late_out_of_order() {
        let (t, id) = table(Some(4));
        let mut rx = ReceiveBuffer::new();
        assert!(!rx.on_event_received(&t, op(id, 3)));
        assert_eq!(rx.stale_drops, 1);
        assert!(rx.is_empty());
    }

    #[test]
    fn duplicate_receipt_is_idempotent() {
        let (t, id) = table(None);
        let mut rx = ReceiveBuffer::new();
        assert!(rx.on_event_received(&t, op(id, 0)));
        assert!(rx.on_event_received(&t, op(id, 0)));
        assert_eq!(rx.len(), 1);
    }

    #[test]
    fn unknown_sender_counted() {
        let (t, _) = table(None);
        let mut rx = ReceiveBuffer::new();
        let stranger = SenderId::new(99, 0);
        assert!(!rx.on_event_received(&t, op(stranger, 0)));
        assert_eq!(rx.unknown_sender_drops, 1);
    }

    #[test]
    fn staging_cycle_event_present() {
        let (t, id) = table(None);
        let mut rx = ReceiveBuffer::new();
        rx.on_event_received(&t, op(id, 0));
        let staged = rx.collect_cycle(&t, 0, LateMode::Dynamic);
        assert_eq!(staged, vec![(0, op(id, 0))]);
    }

    #[test]
    fn staging_bottom_placeholder_when_absent() {
        let (t, id) = table(None);
        let rx = ReceiveBuffer::new();
        let staged = rx.collect_cycle(&t, 0, LateMode::Dynamic);
        assert_eq!(staged, vec![(0, Event::bottom(id, 0))]);
    }

    #[test]
    fn late_events_staged_with_window() {
        // Ω=[3,5]; 3 arrived one cycle late, 4 and 5 on time: all staged for
        // the current cycle.
        let (t, id) = table(Some(2));
        let mut rx = ReceiveBuffer::new();
        for seq in [4, 5, 3] {
            rx.on_event_received(&t, op(id, seq));
        }
        let staged = rx.collect_cycle(&t, 5, LateMode::Dynamic);
        let seqs: Vec<Seq> = staged.iter().map(|(_, e)| e.seq).collect();
        assert_eq!(seqs, vec![3, 4, 5]);
        assert!(staged.iter().all(|(c, e)| *c == 5 && !e.payload.is_bottom()));
        assert!(rx.cycle_complete(&t, 5, LateMode::Dynamic));
    }

    #[test]
    fn simple_discard_only_sees_the_cycle_event() {
        let (t, id) = table(Some(2));
        let mut rx = ReceiveBuffer::new();
        rx.on_event_received(&t, op(id, 3));
        rx.on_event_received(&t, op(id, 5));
        let staged = rx.collect_cycle(&t, 5, LateMode::SimpleDiscard);
        let seqs: Vec<Seq> = staged.iter().map(|(_, e)| e.seq).collect();
        assert_eq!(seqs, vec![5]);
    }

    #[test]
    fn purge_drops_consumed_events() {
        let (t, id) = table(None);
        let mut rx = ReceiveBuffer::new();
        for seq in 0..4 {
            rx.on_event_received(&t, op(id, seq));
        }
        rx.purge_delivered(id, 2);
        assert!(!rx.contains((id, 2)));
        assert!(rx.contains((id, 3)));
    }
}
