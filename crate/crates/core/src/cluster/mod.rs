//! Inter-node layer: ring routing, membership, transports and the
//! lost-event ledger.

pub mod local;
pub mod lost;
pub mod master;
pub mod ring;
pub mod tcp;
pub mod wire;

use std::collections::BTreeSet;

use crate::model::Event;

pub use local::{LocalControl, LocalNet};
pub use lost::{LossReason, LostEvent, LostEventLog};
pub use master::{Master, Membership};
pub use ring::{HashRing, NodeId};
pub use wire::{FetchKind, Message};

#[derive(Debug, thiserror::Error)]
#[error("node {node} unreachable: {reason}")]
pub struct SendError {
    pub node: NodeId,
    pub reason: String,
}

/// The receiving side of a node, as seen by transports.
pub trait Inbox: Send + Sync {
    fn deliver(&self, event: Event, dest: &str);
    fn fetch_local(&self, updater: &str, key: &[u8]) -> FetchKind;
    fn apply_membership(&self, epoch: u64, live: BTreeSet<NodeId>);
    fn apply_throttle(&self, streams: &[String], paused: bool);
}

/// Worker-to-worker event passing and internal slate-fetch forwarding.
pub trait Transport: Send + Sync {
    fn send_event(&self, to: NodeId, event: &Event, dest: &str) -> Result<(), SendError>;
    fn fetch_slate(&self, to: NodeId, updater: &str, key: &[u8]) -> Result<FetchKind, SendError>;
}

/// Messages a node sends to the master.
pub trait ControlPlane: Send + Sync {
    /// Reports that `node` could not be reached while the caller was at
    /// `observed_epoch`.
    fn report_failure(&self, observed_epoch: u64, node: NodeId);
    /// Pauses or resumes the source gates of `streams` on every node.
    fn set_throttle(&self, streams: &[String], paused: bool);
}
