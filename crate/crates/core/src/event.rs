//! Events: the unit of replication.

use crate::id::{Seq, SenderId};

/// Payload of an event.
///
/// `Bottom` marks an expected-but-missing event in local collection state.
/// It never crosses the network and is never handed to the application.
/// `Empty` is the consensus-filled placeholder for a slot nobody received.
#[derive(Clone, PartialEq, Eq, Hash, Debug)]
pub enum Payload {
    Operation(Vec<u8>),
    Empty,
    Bottom,
}

impl Payload {
    pub fn is_bottom(&self) -> bool {
        matches!(self, Payload::Bottom)
    }

    pub fn is_empty_event(&self) -> bool {
        matches!(self, Payload::Empty)
    }

    /// Real payload carried by a sender (operation or no-op), as opposed to
    /// the protocol placeholders.
    pub fn is_operation(&self) -> bool {
        matches!(self, Payload::Operation(_))
    }
}

#[derive(Clone, PartialEq, Eq, Hash, Debug)]
pub struct Event {
    pub sender: SenderId,
    pub seq: Seq,
    pub payload: Payload,
}

impl Event {
    pub fn new(sender: SenderId, seq: Seq, payload: Payload) -> Self {
        Event {
            sender,
            seq,
            payload,
        }
    }

    pub fn bottom(sender: SenderId, seq: Seq) -> Self {
        Event::new(sender, seq, Payload::Bottom)
    }

    pub fn key(&self) -> (SenderId, Seq) {
        (self.sender, self.seq)
    }
}
