//! Replica-group protocols for cycle-based total-order event delivery.
//!
//! The crate houses the full replica state machine: event collection on a
//! shared cycle grid, fast-path delivery with late-event windows,
//! leader-coordinated per-cycle consensus as the fallback, gossip-driven
//! garbage collection of the replicated log, leader election and group
//! reconfiguration with state synchrony, and the neighbor join/leave
//! commands that mutate the sender set through the log itself.

pub mod apply;
pub mod clock;
pub mod codec;
pub mod collect;
pub mod consensus;
pub mod error;
pub mod event;
pub mod gc;
pub mod id;
pub mod interaction;
pub mod membership;
pub mod messages;
pub mod queue;
pub mod replica;
pub mod sender;

pub use apply::{ApplyState, StateDigest};
pub use clock::{CycleClock, SenderSchedule, TimingParams};
pub use collect::{LateMode, ReceiveBuffer};
pub use consensus::{decide, ConsensusLedger, DecisionSet, Proposal, SenderWindow, WindowSet};
pub use error::ProtocolError;
pub use event::{Event, Payload};
pub use gc::{GcOutcome, GossipState};
pub use id::{ClientId, Cycle, DeliverySeq, Micros, ReplicaId, SenderId, Seq};
pub use interaction::AppOp;
pub use membership::{merge_states, select_leader, GroupState, InitState, SyncPackage, SyncState};
pub use messages::Message;
pub use queue::{DeliveryQueue, DeliverySlot};
pub use replica::{
    Counters, DeliverAttempt, Input, NodeId, Observation, Output, Replica, ReplicaConfig, Send,
};
pub use sender::{SenderRecord, SenderTable};
