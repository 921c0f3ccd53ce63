//! Per-slate mutual exclusion, optionally recording which workers ever
//! asked for each slate.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::hash::BuildHasher;

use parking_lot::{Condvar, Mutex};

use crate::store::SlateKey;

const SHARDS: usize = 64;

struct Shard {
    held: Mutex<HashSet<SlateKey>>,
    released: Condvar,
}

pub struct SlateLocks {
    shards: Vec<Shard>,
    hasher: std::collections::hash_map::RandomState,
    requesters: Option<Mutex<HashMap<SlateKey, BTreeSet<usize>>>>,
}

pub struct SlateGuard<'a> {
    shard: &'a Shard,
    key: SlateKey,
}

impl Drop for SlateGuard<'_> {
    fn drop(&mut self) {
        self.shard.held.lock().remove(&self.key);
        self.shard.released.notify_all();
    }
}

impl SlateLocks {
    pub fn new(instrument: bool) -> Self {
        Self {
            shards: (0..SHARDS)
                .map(|_| Shard {
                    held: Mutex::new(HashSet::new()),
                    released: Condvar::new(),
                })
                .collect(),
            hasher: Default::default(),
            requesters: instrument.then(|| Mutex::new(HashMap::new())),
        }
    }

    fn shard(&self, key: &SlateKey) -> &Shard {
        &self.shards[self.hasher.hash_one(key) as usize % SHARDS]
    }

    /// Blocks until no one else holds `key`. `worker` is recorded when
    /// instrumentation is on; readers pass `None`.
    pub fn acquire(&self, key: &SlateKey, worker: Option<usize>) -> SlateGuard<'_> {
        if let (Some(req), Some(w)) = (&self.requesters, worker) {
            req.lock().entry(key.clone()).or_default().insert(w);
        }
        let shard = self.shard(key);
        let mut held = shard.held.lock();
        while held.contains(key) {
            shard.released.wait(&mut held);
        }
        held.insert(key.clone());
        SlateGuard {
            shard,
            key: key.clone(),
        }
    }

    /// Distinct workers that ever requested each slate. Empty unless
    /// instrumented.
    pub fn requesters(&self) -> HashMap<SlateKey, BTreeSet<usize>> {
        self.requesters.as_ref().map(|r| r.lock().clone()).unwrap_or_default()
    }
}
