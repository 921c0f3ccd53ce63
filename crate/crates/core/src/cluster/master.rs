use std::collections::BTreeSet;

use parking_lot::Mutex;

use super::ring::NodeId;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Membership {
    pub epoch: u64,
    pub live: BTreeSet<NodeId>,
}

/// Membership authority. It never routes events; it only records machine
/// failures and hands out the resulting membership for broadcast.
pub struct Master {
    addrs: Vec<String>,
    state: Mutex<Membership>,
}

impl Master {
    pub fn new(addrs: Vec<String>) -> Self {
        let live = (0..addrs.len()).collect();
        Self {
            addrs,
            state: Mutex::new(Membership { epoch: 0, live }),
        }
    }

    pub fn addrs(&self) -> &[String] {
        &self.addrs
    }

    pub fn membership(&self) -> Membership {
        self.state.lock().clone()
    }

    pub fn node_by_addr(&self, addr: &str) -> Option<NodeId> {
        self.addrs.iter().position(|a| a == addr)
    }

    /// Marks `node` dead. Returns the new membership when this report
    /// changed anything; repeated reports are no-ops.
    pub fn mark_failed(&self, node: NodeId) -> Option<Membership> {
        let mut st = self.state.lock();
        if !st.live.remove(&node) {
            return None;
        }
        st.epoch += 1;
        tracing::warn!(node, addr = %self.addrs.get(node).map(String::as_str).unwrap_or("?"), epoch = st.epoch, "node marked failed");
        Some(st.clone())
    }
}
