//! Identifiers shared by all protocol modules.

use std::fmt;

/// Simulated time in microseconds.
pub type Micros = u64;

/// Cycle number. Cycles are numbered from 0 on the group's clock grid.
pub type Cycle = u64;

/// Sequence number of an event within one sender's stream (0-based).
pub type Seq = u64;

/// Global delivery sequence: the position of a slot in the replicated log.
pub type DeliverySeq = u64;

/// Identity of a replica (cache node) within the simulation.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Debug)]
pub struct ReplicaId(pub u32);

impl fmt::Display for ReplicaId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "r{}", self.0)
    }
}

/// Identity of a client actor.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Debug)]
pub struct ClientId(pub u32);

impl fmt::Display for ClientId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "p{}", self.0)
    }
}

/// Identity of an event sender as seen by a replica group.
///
/// The join timestamp is appended to the base id so that two joins of the
/// same client produce senders that compare unequal. Ordering is by base id
/// first, then join timestamp; this is the order that defines sender indexes.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Debug)]
pub struct SenderId {
    pub base: u64,
    pub joined_at: Micros,
}

impl SenderId {
    pub fn new(base: u64, joined_at: Micros) -> Self {
        SenderId { base, joined_at }
    }
}

impl fmt::Display for SenderId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "s{}@{}", self.base, self.joined_at)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn rejoin_compares_unequal() {
        let a = SenderId::new(7, 1_000);
        let b = SenderId::new(7, 2_000);
        assert_ne!(a, b);
        assert!(a < b);
    }

    proptest! {
        // Strict total order: antisymmetry and transitivity over random ids.
        #[test]
        fn sender_order_is_total(
            ids in proptest::collection::vec((0u64..16, 0u64..16), 3)
        ) {
            let v: Vec<SenderId> = ids.iter().map(|&(b, t)| SenderId::new(b, t)).collect();
            let (a, b, c) = (v[0], v[1], v[2]);
            if a < b {
                prop_assert!(!(b < a));
            }
            if a < b && b < c {
                prop_assert!(a < c);
            }
            prop_assert!(a < b || b < a || a == b);
        }
    }
}
