//! In-process transport: every node lives in one address space, but events
//! still cross node boundaries as encoded wire frames.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use parking_lot::RwLock;

use super::wire::Message;
use super::{ControlPlane, FetchKind, Inbox, Master, NodeId, SendError, Transport};
use crate::model::Event;

pub struct LocalNet {
    slots: Vec<RwLock<Option<Arc<dyn Inbox>>>>,
    frames: AtomicU64,
}

impl LocalNet {
    pub fn new(nodes: usize) -> Self {
        Self {
            slots: (0..nodes).map(|_| RwLock::new(None)).collect(),
            frames: AtomicU64::new(0),
        }
    }

    pub fn register(&self, node: NodeId, inbox: Arc<dyn Inbox>) {
        *self.slots[node].write() = Some(inbox);
    }

    /// Makes `node` unreachable. Waits for deliveries already in progress.
    pub fn disconnect(&self, node: NodeId) {
        *self.slots[node].write() = None;
    }

    pub fn is_reachable(&self, node: NodeId) -> bool {
        self.slots[node].read_recursive().is_some()
    }

    /// Frames carried between distinct nodes so far.
    pub fn frames_sent(&self) -> u64 {
        self.frames.load(Ordering::Relaxed)
    }

    fn with_node<T>(&self, node: NodeId, f: impl FnOnce(&Arc<dyn Inbox>) -> T) -> Result<T, SendError> {
        let slot = self.slots.get(node).ok_or_else(|| SendError {
            node,
            reason: "no such node".into(),
        })?;
        let guard = slot.read_recursive();
        match guard.as_ref() {
            Some(inbox) => Ok(f(inbox)),
            None => Err(SendError {
                node,
                reason: "connection refused".into(),
            }),
        }
    }

    fn live_inboxes(&self, live: impl Iterator<Item = NodeId>) -> Vec<Arc<dyn Inbox>> {
        live.filter_map(|n| self.slots.get(n).and_then(|s| s.read_recursive().clone()))
            .collect()
    }
}

impl Transport for LocalNet {
    fn send_event(&self, to: NodeId, event: &Event, dest: &str) -> Result<(), SendError> {
        let frame = Message::Event {
            event: event.clone(),
            dest: dest.to_string(),
        }
        .encode()
        .map_err(|e| SendError {
            node: to,
            reason: e.to_string(),
        })?;
        self.with_node(to, |inbox| {
            self.frames.fetch_add(1, Ordering::Relaxed);
            match Message::decode_body(&frame[4..]) {
                Ok(Message::Event { event, dest }) => inbox.deliver(event, &dest),
                other => unreachable!("event frame decoded as {other:?}"),
            }
        })
    }

    fn fetch_slate(&self, to: NodeId, updater: &str, key: &[u8]) -> Result<FetchKind, SendError> {
        self.with_node(to, |inbox| inbox.fetch_local(updater, key))
    }
}

/// Control plane wired straight to an in-process [`Master`]; broadcasts are
/// applied synchronously to every live node.
pub struct LocalControl {
    master: Arc<Master>,
    net: Arc<LocalNet>,
}

impl LocalControl {
    pub fn new(master: Arc<Master>, net: Arc<LocalNet>) -> Self {
        Self { master, net }
    }

    pub fn master(&self) -> &Arc<Master> {
        &self.master
    }
}

impl ControlPlane for LocalControl {
    fn report_failure(&self, _observed_epoch: u64, node: NodeId) {
        if let Some(m) = self.master.mark_failed(node) {
            for inbox in self.net.live_inboxes(m.live.iter().copied()) {
                inbox.apply_membership(m.epoch, m.live.clone());
            }
        }
    }

    fn set_throttle(&self, streams: &[String], paused: bool) {
        let live = self.master.membership().live;
        for inbox in self.net.live_inboxes(live.into_iter()) {
            inbox.apply_throttle(streams, paused);
        }
    }
}
