use std::time::Instant;

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

use crate::cluster::NodeId;
use crate::model::{Event, Timestamp};

/// One applied slate replacement.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SlateUpdate {
    pub updater: String,
    pub key: Vec<u8>,
    pub ts: Timestamp,
    pub body: Vec<u8>,
}

/// Where and when an invocation ran.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ProcessedTag {
    pub function: String,
    pub key: Vec<u8>,
    pub ts: Timestamp,
    pub node: NodeId,
    pub worker: usize,
    pub epoch: u64,
}

/// Run artifacts collected by a node when recording is enabled.
#[derive(Default)]
pub struct Recorder {
    enabled: bool,
    updates: Mutex<Vec<(Instant, SlateUpdate)>>,
    outputs: Mutex<Vec<Event>>,
    processed: Mutex<Vec<ProcessedTag>>,
    latencies_us: Mutex<Vec<u64>>,
    track_latency: bool,
}

impl Recorder {
    pub fn new(enabled: bool, track_latency: bool) -> Self {
        Self {
            enabled,
            track_latency,
            ..Default::default()
        }
    }

    pub fn enabled(&self) -> bool {
        self.enabled
    }

    pub fn slate_update(&self, u: SlateUpdate) {
        if self.enabled {
            self.updates.lock().push((Instant::now(), u));
        }
    }

    pub fn output(&self, e: &Event) {
        if self.enabled {
            self.outputs.lock().push(e.clone());
        }
    }

    pub fn processed(&self, tag: ProcessedTag) {
        if self.enabled {
            self.processed.lock().push(tag);
        }
    }

    pub fn latency(&self, micros: u64) {
        if self.track_latency {
            self.latencies_us.lock().push(micros);
        }
    }

    pub fn slate_updates(&self) -> Vec<SlateUpdate> {
        self.updates.lock().iter().map(|(_, u)| u.clone()).collect()
    }

    /// Updates with the instant each was applied, for merging across nodes.
    pub fn timed_slate_updates(&self) -> Vec<(Instant, SlateUpdate)> {
        self.updates.lock().clone()
    }

    pub fn outputs(&self) -> Vec<Event> {
        self.outputs.lock().clone()
    }

    pub fn processed_tags(&self) -> Vec<ProcessedTag> {
        self.processed.lock().clone()
    }

    pub fn take_latencies(&self) -> Vec<u64> {
        std::mem::take(&mut *self.latencies_us.lock())
    }
}
