//! Consistent-hash ring shared by every node.

use std::collections::BTreeSet;

use xxhash_rust::xxh3::{xxh3_64, Xxh3};

use crate::error::{Error, Result};

pub type NodeId = usize;

/// Virtual points placed on the ring per live node.
pub const VIRTUAL_POINTS: usize = 64;

/// Position of `(key, function)` on the ring.
pub fn route_hash(key: &[u8], function: &str) -> u64 {
    let mut h = Xxh3::new();
    h.update(key);
    h.update(&[0xff]);
    h.update(function.as_bytes());
    h.digest()
}

/// Maps `(event key, destination function)` pairs to owning nodes.
///
/// Built purely from the node address list, the live set and the epoch, so
/// every node holding the same membership computes the same owners.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HashRing {
    points: Vec<(u64, NodeId)>,
    live: BTreeSet<NodeId>,
    epoch: u64,
}

impl HashRing {
    pub fn new(addrs: &[String], live: &BTreeSet<NodeId>, epoch: u64) -> Self {
        let mut points = Vec::with_capacity(live.len() * VIRTUAL_POINTS);
        for &node in live {
            for v in 0..VIRTUAL_POINTS {
                let label = format!("{}#{v}", addrs[node]);
                points.push((xxh3_64(label.as_bytes()), node));
            }
        }
        points.sort_unstable();
        Self {
            points,
            live: live.clone(),
            epoch,
        }
    }

    /// A ring with every listed node alive at epoch 0.
    pub fn all_live(addrs: &[String]) -> Self {
        Self::new(addrs, &(0..addrs.len()).collect(), 0)
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    pub fn live_nodes(&self) -> &BTreeSet<NodeId> {
        &self.live
    }

    pub fn is_live(&self, node: NodeId) -> bool {
        self.live.contains(&node)
    }

    /// First ring point clockwise from the pair's hash.
    pub fn route(&self, key: &[u8], function: &str) -> Result<NodeId> {
        if self.points.is_empty() {
            return Err(Error::EmptyRing);
        }
        let h = route_hash(key, function);
        let idx = self.points.partition_point(|(pos, _)| *pos < h);
        Ok(self.points[idx % self.points.len()].1)
    }
}
