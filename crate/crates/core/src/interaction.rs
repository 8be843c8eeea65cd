//! The virtual-world layer: operation payloads carried inside events,
//! including the neighbor add/remove commands that mutate the sender set
//! through the totally ordered log.

use crate::event::Payload;

/// Application operations carried in event payloads. Neighbor changes ride
/// the replicated log so every replica applies them at the same cycle.
#[derive(Clone, PartialEq, Eq, Debug)]
pub enum AppOp {
    /// Idle-cycle filler; still applied (it is a real event).
    Noop,
    /// A state mutation with opaque content.
    Mutate(Vec<u8>),
    /// Add client `client` as a sender; effective the cycle after the slot
    /// that carries it.
    AddNeighbor { client: u32 },
    /// Remove client `client` as a sender; effective the cycle after the
    /// slot that carries it.
    RemoveNeighbor { client: u32 },
}

impl AppOp {
    pub fn to_payload(&self) -> Payload {
        let mut bytes = Vec::new();
        match self {
            AppOp::Noop => bytes.push(0),
            AppOp::Mutate(data) => {
                bytes.push(1);
                bytes.extend_from_slice(data);
            }
            AppOp::AddNeighbor { client } => {
                bytes.push(2);
                bytes.extend_from_slice(&client.to_le_bytes());
            }
            AppOp::RemoveNeighbor { client } => {
                bytes.push(3);
                bytes.extend_from_slice(&client.to_le_bytes());
            }
        }
        Payload::Operation(bytes)
    }

    /// Parse an operation payload. Unknown or protocol payloads yield None.
    pub fn parse(payload: &Payload) -> Option<AppOp> {
        let Payload::Operation(bytes) = payload else {
            return None;
        };
        match bytes.split_first() {
            Some((0, [])) => Some(AppOp::Noop),
            Some((1, rest)) => Some(AppOp::Mutate(rest.to_vec())),
            Some((2, rest)) => Some(AppOp::AddNeighbor {
                client: u32::from_le_bytes(rest.try_into().ok()?),
            }),
            Some((3, rest)) => Some(AppOp::RemoveNeighbor {
                client: u32::from_le_bytes(rest.try_into().ok()?),
            }),
            _ => None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ops_round_trip() {
        for op in [
            AppOp::Noop,
            AppOp::Mutate(vec![1, 2, 3]),
            AppOp::AddNeighbor { client: 7 },
            AppOp::RemoveNeighbor { client: 9 },
        ] {
            assert_eq!(AppOp::parse(&op.to_payload()), Some(op));
        }
    }

    #[test]
    fn protocol_payloads_are_not_ops() {
        assert_eq!(AppOp::parse(&Payload::Empty), None);
        assert_eq!(AppOp::parse(&Payload::Bottom), None);
    }
}
