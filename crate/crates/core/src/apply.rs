//! The application layer: a deterministic hash fold over applied events.
//!
//! Replica state is the running digest
//! `state ← H(state ‖ λ ‖ sender ‖ seq ‖ payload)` over every applied
//! operation event, so two replicas hold identical virtual-object state
//! exactly when their digests are equal. Empty slots advance λ but leave the
//! state untouched.

use sha2::{Digest, Sha256};

use crate::event::Payload;
use crate::id::DeliverySeq;
use crate::queue::DeliverySlot;

pub type StateDigest = [u8; 32];

#[derive(Clone, PartialEq, Eq, Debug)]
pub struct ApplyState {
    digest: StateDigest,
    applied_upto: Option<DeliverySeq>,
}

impl Default for ApplyState {
    fn default() -> Self {
        ApplyState {
            digest: [0; 32],
            applied_upto: None,
        }
    }
}

impl ApplyState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn restore(digest: StateDigest, applied_upto: Option<DeliverySeq>) -> Self {
        ApplyState {
            digest,
            applied_upto,
        }
    }

    pub fn digest(&self) -> StateDigest {
        self.digest
    }

    pub fn applied_upto(&self) -> Option<DeliverySeq> {
        self.applied_upto
    }

    /// Apply one delivered slot. Slots must arrive in delivery-sequence
    /// order with no gaps.
    pub fn apply(&mut self, slot: &DeliverySlot) {
        let expected = self.applied_upto.map_or(0, |a| a + 1);
        assert_eq!(
            slot.delivery_seq, expected,
            "application must consume the log in order"
        );
        self.applied_upto = Some(slot.delivery_seq);
        match &slot.event.payload {
            Payload::Operation(bytes) => {
                let mut h = Sha256::new();
                h.update(self.digest);
                h.update(slot.delivery_seq.to_le_bytes());
                h.update(slot.event.sender.base.to_le_bytes());
                h.update(slot.event.sender.joined_at.to_le_bytes());
                h.update(slot.event.seq.to_le_bytes());
                h.update(bytes);
                self.digest = h.finalize().into();
            }
            Payload::Empty => {}
            Payload::Bottom => unreachable!("bottom payloads never reach the application"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::event::Event;
    use crate::id::SenderId;

    fn slot(seq: DeliverySeq, payload: Payload) -> DeliverySlot {
        DeliverySlot {
            cycle: seq,
            rank: 0,
            delivery_seq: seq,
            event: Event::new(SenderId::new(1, 0), seq, payload),
        }
    }

    #[test]
    fn empty_slots_are_noops() {
        let mut a = ApplyState::new();
        let mut b = ApplyState::new();
        a.apply(&slot(0, Payload::Operation(vec![7])));
        b.apply(&slot(0, Payload::Operation(vec![7])));
        a.apply(&slot(1, Payload::Empty));
        assert_eq!(a.digest(), b.digest());
        assert_eq!(a.applied_upto(), Some(1));
        assert_eq!(b.applied_upto(), Some(0));
    }

    #[test]
    fn operations_change_state() {
        let mut a = ApplyState::new();
        let before = a.digest();
        a.apply(&slot(0, Payload::Operation(vec![7])));
        assert_ne!(a.digest(), before);
    }
}
