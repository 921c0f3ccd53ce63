//! Slate storage: a node-wide LRU slate cache in front of the durable store.

pub mod codec;
pub mod durable;

use std::collections::HashMap;
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use lru::LruCache;
use parking_lot::Mutex;

pub use durable::{DurableStore, StoredSlate};

use crate::clock::Clock;
use crate::error::StoreError;
use crate::workflow::{FlushPolicy, Ttl, Workflow};

/// Replica acknowledgement level for store reads and writes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Consistency {
    One,
    Quorum,
    All,
}

impl Consistency {
    /// Acks needed out of `replicas`: one, a strict majority, or all.
    pub fn required(self, replicas: usize) -> usize {
        match self {
            Consistency::One => 1,
            Consistency::Quorum => replicas / 2 + 1,
            Consistency::All => replicas,
        }
    }
}

/// Identifies one slate: an updater paired with an event key.
#[derive(Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SlateKey {
    pub updater: String,
    pub key: Vec<u8>,
}

impl SlateKey {
    pub fn new(updater: impl Into<String>, key: impl Into<Vec<u8>>) -> Self {
        Self {
            updater: updater.into(),
            key: key.into(),
        }
    }
}

impl fmt::Debug for SlateKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.updater, String::from_utf8_lossy(&self.key))
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SlateEntry {
    pub body: Vec<u8>,
    pub dirty: bool,
    pub last_write: u64,
    /// Wall time of the first write not yet flushed.
    pub pending_since: Option<u64>,
}

#[derive(Clone, Copy, Debug)]
struct UpdaterPolicy {
    ttl: Ttl,
    flush: FlushPolicy,
}

#[derive(Debug, Default)]
pub struct StoreCounters {
    pub hits: AtomicU64,
    pub misses: AtomicU64,
    pub evictions: AtomicU64,
    pub flushes: AtomicU64,
    pub flush_failures: AtomicU64,
}

/// Cache-then-store slate access shared by every worker on a node.
///
/// All durable writes issued on behalf of the cache (write-through,
/// interval flush, eviction, shutdown) happen under the cache lock, so the
/// store never sees an older body overwrite a newer one.
pub struct SlateStore {
    cache: Mutex<LruCache<SlateKey, SlateEntry>>,
    capacity: usize,
    durable: Arc<DurableStore>,
    policies: HashMap<String, UpdaterPolicy>,
    clock: Arc<dyn Clock>,
    counters: StoreCounters,
}

impl SlateStore {
    pub fn new(workflow: &Workflow, durable: Arc<DurableStore>, capacity: usize, clock: Arc<dyn Clock>) -> Self {
        let policies = workflow
            .functions()
            .iter()
            .filter(|f| f.is_update())
            .map(|f| {
                (
                    f.name.clone(),
                    UpdaterPolicy {
                        ttl: f.effective_ttl(),
                        flush: f.effective_flush(),
                    },
                )
            })
            .collect();
        Self {
            cache: Mutex::new(LruCache::unbounded()),
            capacity: capacity.max(1),
            durable,
            policies,
            clock,
            counters: StoreCounters::default(),
        }
    }

    pub fn durable(&self) -> &Arc<DurableStore> {
        &self.durable
    }

    pub fn counters(&self) -> &StoreCounters {
        &self.counters
    }

    pub fn cached_count(&self) -> usize {
        self.cache.lock().len()
    }

    fn policy(&self, updater: &str) -> UpdaterPolicy {
        self.policies.get(updater).copied().unwrap_or(UpdaterPolicy {
            ttl: Ttl::Forever,
            flush: FlushPolicy::default(),
        })
    }

    fn write_durable(&self, sk: &SlateKey, entry: &SlateEntry) -> Result<(), StoreError> {
        let slate = StoredSlate {
            codec: codec::CODEC_ZLIB,
            body: codec::compress(&entry.body),
            write_time: entry.last_write,
            ttl: self.policy(&sk.updater).ttl,
        };
        let res = self.durable.write(sk, slate);
        match &res {
            Ok(()) => self.counters.flushes.fetch_add(1, Ordering::Relaxed),
            Err(_) => self.counters.flush_failures.fetch_add(1, Ordering::Relaxed),
        };
        res
    }

    /// Returns the slate body, loading it from the durable store on a cache
    /// miss. `None` means the updater has no slate for this key (never
    /// written, or expired).
    pub fn get_slate(&self, sk: &SlateKey) -> Result<Option<Vec<u8>>, StoreError> {
        let mut cache = self.cache.lock();
        if let Some(entry) = cache.get(sk) {
            self.counters.hits.fetch_add(1, Ordering::Relaxed);
            return Ok(Some(entry.body.clone()));
        }
        self.counters.misses.fetch_add(1, Ordering::Relaxed);
        let now = self.clock.now_millis();
        let Some(stored) = self.durable.read(sk, now)? else {
            return Ok(None);
        };
        let body = codec::decode(stored.codec, &stored.body)?;
        cache.put(
            sk.clone(),
            SlateEntry {
                body: body.clone(),
                dirty: false,
                last_write: stored.write_time,
                pending_since: None,
            },
        );
        self.enforce_capacity(&mut cache);
        Ok(Some(body))
    }

    /// Peeks at the cached copy without loading or touching LRU order.
    pub fn peek_cached(&self, sk: &SlateKey) -> Option<SlateEntry> {
        self.cache.lock().peek(sk).cloned()
    }

    /// Installs a new slate body. Under write-through the durable store is
    /// updated before returning; a failed write leaves the entry dirty for
    /// the next flush cycle.
    pub fn put_slate(&self, sk: &SlateKey, body: Vec<u8>) {
        let now = self.clock.now_millis();
        let policy = self.policy(&sk.updater);
        let mut cache = self.cache.lock();
        let pending_since = cache.peek(sk).and_then(|e| e.pending_since).unwrap_or(now);
        let mut entry = SlateEntry {
            body,
            dirty: true,
            last_write: now,
            pending_since: Some(pending_since),
        };
        if policy.flush == FlushPolicy::WriteThrough && self.write_durable(sk, &entry).is_ok() {
            entry.dirty = false;
            entry.pending_since = None;
        }
        cache.put(sk.clone(), entry);
        self.enforce_capacity(&mut cache);
    }

    fn enforce_capacity(&self, cache: &mut LruCache<SlateKey, SlateEntry>) {
        while cache.len() > self.capacity {
            let Some((sk, entry)) = cache.pop_lru() else {
                return;
            };
            if entry.dirty && self.write_durable(&sk, &entry).is_err() {
                // Keep it rather than lose it; retried on the next flush.
                cache.put(sk, entry);
                return;
            }
            self.counters.evictions.fetch_add(1, Ordering::Relaxed);
        }
    }

    /// Flushes dirty slates whose interval has elapsed. Returns the number
    /// written; failed writes stay dirty.
    pub fn flush_dirty(&self, now: u64) -> usize {
        self.flush_matching(|policy, entry| match policy.flush {
            FlushPolicy::Interval(d) => entry.pending_since.is_some_and(|since| now.saturating_sub(since) >= d),
            _ => false,
        })
    }

    /// Flushes every dirty slate regardless of policy (clean shutdown).
    pub fn flush_all(&self) -> usize {
        self.flush_matching(|_, _| true)
    }

    fn flush_matching(&self, due: impl Fn(&UpdaterPolicy, &SlateEntry) -> bool) -> usize {
        let candidates: Vec<SlateKey> = {
            let cache = self.cache.lock();
            cache
                .iter()
                .filter(|(sk, e)| e.dirty && due(&self.policy(&sk.updater), e))
                .map(|(sk, _)| sk.clone())
                .collect()
        };
        let mut flushed = 0;
        for sk in candidates {
            let mut cache = self.cache.lock();
            let Some(entry) = cache.peek(&sk).cloned() else {
                continue;
            };
            if !entry.dirty {
                continue;
            }
            if self.write_durable(&sk, &entry).is_ok() {
                if let Some(e) = cache.peek_mut(&sk) {
                    e.dirty = false;
                    e.pending_since = None;
                }
                flushed += 1;
            }
        }
        flushed
    }

    /// Removes expired slates from the durable store and from the cache.
    /// Returns the number of distinct slates removed.
    pub fn gc_expired(&self, now: u64) -> usize {
        let mut removed: std::collections::HashSet<SlateKey> = self.durable.remove_expired(now).into_iter().collect();
        let mut cache = self.cache.lock();
        let stale: Vec<SlateKey> = cache
            .iter()
            .filter(|(sk, e)| match self.policy(&sk.updater).ttl {
                Ttl::Forever => false,
                Ttl::Millis(ttl) => e.last_write.saturating_add(ttl) < now,
            })
            .map(|(sk, _)| sk.clone())
            .collect();
        for sk in stale {
            cache.pop(&sk);
            removed.insert(sk);
        }
        for sk in &removed {
            // A clean copy of a removed durable row is no longer backed.
            if cache.peek(sk).is_some_and(|e| !e.dirty) {
                cache.pop(sk);
            }
        }
        removed.len()
    }

    /// Drops cached slates for which `keep` is false, flushing dirty ones
    /// first. Used when ownership moves after a membership change.
    pub fn retain(&self, keep: impl Fn(&SlateKey) -> bool) -> usize {
        let mut cache = self.cache.lock();
        let gone: Vec<SlateKey> = cache
            .iter()
            .filter(|(sk, _)| !keep(sk))
            .map(|(sk, _)| sk.clone())
            .collect();
        let mut dropped = 0;
        for sk in gone {
            if let Some(entry) = cache.peek(&sk).cloned() {
                if entry.dirty && self.write_durable(&sk, &entry).is_err() {
                    continue;
                }
                cache.pop(&sk);
                dropped += 1;
            }
        }
        dropped
    }

    /// Resident cache contents, sorted by key.
    pub fn cached_entries(&self) -> Vec<(SlateKey, SlateEntry)> {
        let cache = self.cache.lock();
        let mut out: Vec<_> = cache.iter().map(|(k, v)| (k.clone(), v.clone())).collect();
        out.sort_by(|a, b| a.0.cmp(&b.0));
        out
    }

    /// Reads the durable copy directly, bypassing the cache.
    pub fn store_read(&self, sk: &SlateKey) -> Result<Option<Vec<u8>>, StoreError> {
        match self.durable.read(sk, self.clock.now_millis())? {
            Some(s) => Ok(Some(codec::decode(s.codec, &s.body)?)),
            None => Ok(None),
        }
    }
}
