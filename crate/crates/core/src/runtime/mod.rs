//! Per-node execution: worker queues, two-lane dispatch, slate exclusion,
//! routing of emitted events and the background flusher.

pub mod dispatch;
pub mod locks;
pub mod queue;
pub mod recorder;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::sync::atomic::{AtomicBool, AtomicU64, AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use parking_lot::{Condvar, Mutex, RwLock};
use serde::Serialize;

use crate::clock::Clock;
use crate::cluster::{ControlPlane, FetchKind, HashRing, Inbox, LossReason, LostEventLog, NodeId, Transport};
use crate::config::RuntimeConfig;
use crate::flow::{throttle_sources, GateBoard, OverflowPolicy};
use crate::model::Event;
use crate::operators::{invoke, Operator};
use crate::store::{SlateKey, SlateStore};
use crate::workflow::Workflow;

pub use dispatch::{DispatchTable, LaneState};
pub use locks::SlateLocks;
pub use queue::{Task, WorkerQueue};
pub use recorder::{ProcessedTag, Recorder, SlateUpdate};

const OVERFLOW_EMITTER: &str = "overflow";
const STORE_RETRY_BACKOFF: Duration = Duration::from_millis(20);

#[derive(Clone, Debug)]
pub struct NodeOptions {
    pub id: NodeId,
    pub addrs: Vec<String>,
    pub runtime: RuntimeConfig,
    pub overflow: BTreeMap<String, OverflowPolicy>,
    /// Keep slate updates, outputs and processed tags in memory.
    pub record: bool,
    /// Track which workers request each slate.
    pub instrument_locks: bool,
    pub track_latency: bool,
}

impl NodeOptions {
    pub fn new(id: NodeId, addrs: Vec<String>, runtime: RuntimeConfig) -> Self {
        Self {
            id,
            addrs,
            runtime,
            overflow: BTreeMap::new(),
            record: false,
            instrument_locks: false,
            track_latency: false,
        }
    }
}

/// Everything a node is built from.
pub struct NodeParts {
    pub options: NodeOptions,
    pub workflow: Arc<Workflow>,
    pub operators: Vec<Operator>,
    pub store: Arc<SlateStore>,
    pub transport: Arc<dyn Transport>,
    pub control: Arc<dyn ControlPlane>,
    pub lost: Arc<LostEventLog>,
    pub clock: Arc<dyn Clock>,
}

#[derive(Default)]
struct Counters {
    processed: AtomicU64,
    dropped: AtomicU64,
    redirected: AtomicU64,
    lost: AtomicU64,
    sent_remote: AtomicU64,
    received_remote: AtomicU64,
}

/// Snapshot served by the status endpoint.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct NodeStats {
    pub node: NodeId,
    pub epoch: u64,
    pub queue_lengths: Vec<usize>,
    pub largest_queue: usize,
    pub processed: u64,
    pub dropped: u64,
    pub redirected: u64,
    pub lost: u64,
    pub cached_slates: usize,
    pub in_flight: usize,
}

struct DispatchState {
    /// Per worker: (function, key) → number of tasks enqueued or executing.
    pending: Vec<HashMap<(usize, Vec<u8>), usize>>,
    closed: bool,
}

pub struct Node {
    id: NodeId,
    addrs: Vec<String>,
    cfg: RuntimeConfig,
    workflow: Arc<Workflow>,
    operators: Vec<Operator>,
    store: Arc<SlateStore>,
    transport: Arc<dyn Transport>,
    control: Arc<dyn ControlPlane>,
    lost: Arc<LostEventLog>,
    clock: Arc<dyn Clock>,
    ring: RwLock<Arc<HashRing>>,
    table: DispatchTable,
    queues: Vec<WorkerQueue>,
    state: Mutex<DispatchState>,
    locks: SlateLocks,
    gates: GateBoard,
    policies: HashMap<String, OverflowPolicy>,
    throttle_targets: HashMap<String, Vec<String>>,
    /// Per worker: external streams this worker has paused.
    congested: Mutex<Vec<BTreeSet<String>>>,
    congested_count: AtomicUsize,
    recorder: Recorder,
    counters: Counters,
    in_flight: AtomicUsize,
    killed: AtomicBool,
    stopping: AtomicBool,
    flusher_stop: (Mutex<bool>, Condvar),
    threads: Mutex<Vec<JoinHandle<()>>>,
}

impl Node {
    pub fn new(parts: NodeParts) -> Arc<Self> {
        let NodeParts {
            options,
            workflow,
            operators,
            store,
            transport,
            control,
            lost,
            clock,
        } = parts;
        let cfg = options.runtime.clone();
        let workers = cfg.workers_per_node.max(1);
        let throttle_targets = options
            .overflow
            .iter()
            .filter(|(_, p)| **p == OverflowPolicy::ThrottleSource)
            .filter_map(|(s, _)| throttle_sources(&workflow, s).ok().map(|src| (s.clone(), src)))
            .collect();
        Arc::new(Self {
            id: options.id,
            ring: RwLock::new(Arc::new(HashRing::all_live(&options.addrs))),
            addrs: options.addrs,
            table: DispatchTable::new(workers, cfg.dispatch_threshold, cfg.dispatch_floor),
            queues: (0..workers).map(|_| WorkerQueue::new()).collect(),
            state: Mutex::new(DispatchState {
                pending: vec![HashMap::new(); workers],
                closed: false,
            }),
            locks: SlateLocks::new(options.instrument_locks),
            gates: GateBoard::new(&workflow),
            policies: options.overflow.into_iter().collect(),
            throttle_targets,
            congested: Mutex::new(vec![BTreeSet::new(); workers]),
            congested_count: AtomicUsize::new(0),
            recorder: Recorder::new(options.record, options.track_latency),
            counters: Counters::default(),
            in_flight: AtomicUsize::new(0),
            killed: AtomicBool::new(false),
            stopping: AtomicBool::new(false),
            flusher_stop: (Mutex::new(false), Condvar::new()),
            threads: Mutex::new(Vec::new()),
            cfg,
            workflow,
            operators,
            store,
            transport,
            control,
            lost,
            clock,
        })
    }

    /// Spawns the workers and the background flusher.
    pub fn start(self: &Arc<Self>) {
        let mut threads = self.threads.lock();
        for w in 0..self.queues.len() {
            let node = self.clone();
            threads.push(
                thread::Builder::new()
                    .name(format!("n{}-w{w}", self.id))
                    .spawn(move || node.worker_loop(w))
                    .expect("spawn worker"),
            );
        }
        let node = self.clone();
        threads.push(
            thread::Builder::new()
                .name(format!("n{}-flusher", self.id))
                .spawn(move || node.flusher_loop())
                .expect("spawn flusher"),
        );
    }

    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn workflow(&self) -> &Arc<Workflow> {
        &self.workflow
    }

    pub fn store(&self) -> &Arc<SlateStore> {
        &self.store
    }

    pub fn gates(&self) -> &GateBoard {
        &self.gates
    }

    pub fn recorder(&self) -> &Recorder {
        &self.recorder
    }

    pub fn locks(&self) -> &SlateLocks {
        &self.locks
    }

    pub fn ring(&self) -> Arc<HashRing> {
        self.ring.read().clone()
    }

    pub fn epoch(&self) -> u64 {
        self.ring.read().epoch()
    }

    pub fn is_killed(&self) -> bool {
        self.killed.load(Ordering::SeqCst)
    }

    pub fn in_flight(&self) -> usize {
        self.in_flight.load(Ordering::SeqCst)
    }

    /// Remote events sent and received; equal sums across a cluster mean
    /// nothing is on the wire.
    pub fn wire_counts(&self) -> (u64, u64) {
        (
            self.counters.sent_remote.load(Ordering::SeqCst),
            self.counters.received_remote.load(Ordering::SeqCst),
        )
    }

    pub fn stats(&self) -> NodeStats {
        let queue_lengths: Vec<usize> = self.queues.iter().map(|q| q.len()).collect();
        NodeStats {
            node: self.id,
            epoch: self.epoch(),
            largest_queue: queue_lengths.iter().copied().max().unwrap_or(0),
            queue_lengths,
            processed: self.counters.processed.load(Ordering::Relaxed),
            dropped: self.counters.dropped.load(Ordering::Relaxed),
            redirected: self.counters.redirected.load(Ordering::Relaxed),
            lost: self.counters.lost.load(Ordering::Relaxed),
            cached_slates: self.store.cached_count(),
            in_flight: self.in_flight(),
        }
    }

    fn lose(&self, event: &Event, dest: &str, reason: LossReason) {
        self.counters.lost.fetch_add(1, Ordering::Relaxed);
        self.lost.record(event, dest, reason);
    }

    /// Feeds an external event into the workflow: it is routed to the
    /// owner of each subscribing function.
    pub fn inject(&self, event: Event) {
        self.route(event, Instant::now());
    }

    /// Routes `event` to function `dest` only.
    pub fn inject_to(&self, event: Event, dest: &str) {
        match self.workflow.index_of(dest) {
            Some(f) => self.route_one(event, f, Instant::now()),
            None => self.lose(&event, dest, LossReason::OperatorError),
        }
    }

    fn route(&self, event: Event, origin: Instant) {
        let subs = self.workflow.subscribers(&event.sid);
        if let Some((&last, rest)) = subs.split_last() {
            for &f in rest {
                self.route_one(event.clone(), f, origin);
            }
            self.route_one(event, last, origin);
        }
    }

    fn route_one(&self, event: Event, function: usize, origin: Instant) {
        let name = &self.workflow.function(function).name;
        if self.is_killed() {
            self.lose(&event, name, LossReason::NodeCrashed);
            return;
        }
        let ring = self.ring();
        let owner = match ring.route(&event.key, name) {
            Ok(o) => o,
            Err(e) => {
                tracing::error!(error = %e, "no live node to route to");
                self.lose(&event, name, LossReason::SendFailed);
                return;
            }
        };
        if owner == self.id {
            self.dispatch(Task {
                event,
                function,
                origin,
            });
            return;
        }
        self.counters.sent_remote.fetch_add(1, Ordering::SeqCst);
        if let Err(e) = self.transport.send_event(owner, &event, name) {
            self.counters.sent_remote.fetch_sub(1, Ordering::SeqCst);
            tracing::warn!(node = e.node, reason = %e.reason, "send failed");
            self.lose(&event, name, LossReason::SendFailed);
            self.control.report_failure(ring.epoch(), owner);
        }
    }

    /// Places a task on the primary or secondary queue of its key.
    pub fn dispatch(&self, task: Task) {
        let def = self.workflow.function(task.function);
        let lanes = self.table.lanes(&task.event.key, &def.name);
        let mut st = self.state.lock();
        if st.closed {
            drop(st);
            self.lose(&task.event, &def.name, LossReason::NodeCrashed);
            return;
        }
        let pk = (task.function, task.event.key.clone());
        let lane = |w: usize, st: &DispatchState| LaneState {
            pending: st.pending[w].contains_key(&pk),
            len: self.queues[w].len(),
        };
        let w = self.table.choose(lanes, lane(lanes.0, &st), lane(lanes.1, &st));
        let full = self.queues[w].len() >= self.cfg.queue_capacity;
        let policy = if full {
            self.policies.get(&task.event.sid).cloned().unwrap_or_default()
        } else {
            OverflowPolicy::DropAndLog
        };
        let overflowed_already = task.event.producer.starts_with(OVERFLOW_EMITTER);
        match (&policy, full) {
            (_, false) | (OverflowPolicy::ThrottleSource, true) => {
                *st.pending[w].entry(pk).or_insert(0) += 1;
                self.in_flight.fetch_add(1, Ordering::SeqCst);
                let sid = full.then(|| task.event.sid.clone());
                self.queues[w].push(task);
                drop(st);
                if let Some(sid) = sid {
                    self.congest(w, &sid);
                }
            }
            (OverflowPolicy::OverflowStream(target), true) if !overflowed_already => {
                drop(st);
                self.counters.redirected.fetch_add(1, Ordering::Relaxed);
                let e = task.event.emit(
                    OVERFLOW_EMITTER,
                    0,
                    target.clone(),
                    task.event.key.clone(),
                    task.event.value.clone(),
                );
                self.route(e, task.origin);
            }
            _ => {
                drop(st);
                self.counters.dropped.fetch_add(1, Ordering::Relaxed);
                self.lose(&task.event, &def.name, LossReason::QueueDropped);
            }
        }
    }

    fn congest(&self, worker: usize, stream: &str) {
        let Some(sources) = self.throttle_targets.get(stream) else {
            return;
        };
        let fresh: Vec<String> = {
            let mut c = self.congested.lock();
            let was_idle = c[worker].is_empty();
            let fresh: Vec<String> = sources
                .iter()
                .filter(|s| c[worker].insert((*s).clone()))
                .cloned()
                .collect();
            if was_idle && !fresh.is_empty() {
                self.congested_count.fetch_add(1, Ordering::SeqCst);
            }
            fresh
        };
        if !fresh.is_empty() {
            tracing::debug!(worker, ?fresh, "queue full, pausing sources");
            self.control.set_throttle(&fresh, true);
        }
    }

    fn relieve(&self, worker: usize) {
        if self.congested_count.load(Ordering::SeqCst) == 0 {
            return;
        }
        let low = (self.cfg.queue_capacity as f64 * self.cfg.low_water) as usize;
        if self.queues[worker].len() > low {
            return;
        }
        let paused: Vec<String> = {
            let mut c = self.congested.lock();
            if c[worker].is_empty() {
                return;
            }
            self.congested_count.fetch_sub(1, Ordering::SeqCst);
            std::mem::take(&mut c[worker]).into_iter().collect()
        };
        tracing::debug!(worker, ?paused, "queue drained, resuming sources");
        self.control.set_throttle(&paused, false);
    }

    fn release(&self, worker: usize, function: usize, key: Vec<u8>) {
        let mut st = self.state.lock();
        let pk = (function, key);
        if let Some(n) = st.pending[worker].get_mut(&pk) {
            *n -= 1;
            if *n == 0 {
                st.pending[worker].remove(&pk);
            }
        }
    }

    fn worker_loop(self: Arc<Self>, w: usize) {
        let queue = &self.queues[w];
        loop {
            let Some(task) = queue.pop_timeout(Duration::from_millis(50)) else {
                let st = self.state.lock();
                if st.closed && queue.is_empty() && st.pending[w].is_empty() {
                    return;
                }
                continue;
            };
            let Task {
                event,
                function,
                origin,
            } = task;
            if self.is_killed() {
                self.lose(&event, &self.workflow.function(function).name, LossReason::NodeCrashed);
            } else {
                self.process(w, &event, function, origin);
            }
            self.release(w, function, event.key);
            self.relieve(w);
            self.in_flight.fetch_sub(1, Ordering::SeqCst);
        }
    }

    fn process(&self, w: usize, event: &Event, function: usize, origin: Instant) {
        let def = self.workflow.function(function);
        let op = &self.operators[function];
        let epoch = self.epoch();
        let outcome = match op {
            Operator::Map(_) => invoke(op, def, &self.workflow, event, None),
            Operator::Update(_) => {
                let sk = SlateKey::new(def.name.clone(), event.key.clone());
                let _guard = self.locks.acquire(&sk, Some(w));
                let slate = match self.store.get_slate(&sk) {
                    Ok(s) => s,
                    Err(e) if e.is_retriable() => {
                        thread::sleep(STORE_RETRY_BACKOFF);
                        match self.store.get_slate(&sk) {
                            Ok(s) => s,
                            Err(e) => {
                                tracing::warn!(error = %e, updater = %def.name, "slate read failed twice");
                                self.lose(event, &def.name, LossReason::StoreError);
                                return;
                            }
                        }
                    }
                    Err(e) => {
                        tracing::warn!(error = %e, updater = %def.name, "slate read failed");
                        self.lose(event, &def.name, LossReason::StoreError);
                        return;
                    }
                };
                let res = invoke(op, def, &self.workflow, event, slate.as_deref());
                if let Ok(r) = &res {
                    if let Some(body) = &r.slate_replacement {
                        self.store.put_slate(&sk, body.clone());
                        self.recorder.slate_update(SlateUpdate {
                            updater: def.name.clone(),
                            key: event.key.clone(),
                            ts: event.ts,
                            body: body.clone(),
                        });
                    }
                }
                res
            }
        };
        let result = match outcome {
            Ok(r) => r,
            Err(e) => {
                tracing::warn!(error = %e, "operator failed");
                self.lose(event, &def.name, LossReason::OperatorError);
                return;
            }
        };
        self.counters.processed.fetch_add(1, Ordering::Relaxed);
        self.recorder.processed(ProcessedTag {
            function: def.name.clone(),
            key: event.key.clone(),
            ts: event.ts,
            node: self.id,
            worker: w,
            epoch,
        });
        if matches!(op, Operator::Update(_)) {
            self.recorder.latency(origin.elapsed().as_micros() as u64);
        }
        for out in result.publishes {
            if self.workflow.is_output(&out.sid) {
                self.recorder.output(&out);
            }
            self.route(out, origin);
        }
    }

    fn flusher_loop(self: Arc<Self>) {
        let tick = Duration::from_millis(self.cfg.flush_tick_ms.max(1));
        let (lock, cv) = &self.flusher_stop;
        loop {
            {
                let mut stop = lock.lock();
                if !*stop {
                    cv.wait_for(&mut stop, tick);
                }
                if *stop {
                    return;
                }
            }
            let now = self.clock.now_millis();
            self.store.flush_dirty(now);
            self.store.gc_expired(now);
        }
    }

    fn stop_threads(&self) {
        *self.flusher_stop.0.lock() = true;
        self.flusher_stop.1.notify_all();
        for q in &self.queues {
            q.wake();
        }
        let threads: Vec<_> = std::mem::take(&mut *self.threads.lock());
        for t in threads {
            let _ = t.join();
        }
    }

    /// Clean shutdown: stop intake, drain queues, flush every dirty slate.
    pub fn shutdown(&self) {
        if self.stopping.swap(true, Ordering::SeqCst) {
            return;
        }
        while self.in_flight() > 0 && !self.is_killed() {
            thread::sleep(Duration::from_millis(2));
        }
        self.state.lock().closed = true;
        self.stop_threads();
        if !self.is_killed() {
            let n = self.store.flush_all();
            tracing::info!(node = self.id, flushed = n, "node shut down");
        }
    }

    /// Simulated crash. Queued events are logged as lost, unflushed cache
    /// contents are abandoned and any event the node still tries to emit is
    /// logged as lost.
    pub fn kill(&self) {
        {
            let mut st = self.state.lock();
            self.killed.store(true, Ordering::SeqCst);
            st.closed = true;
        }
        self.stopping.store(true, Ordering::SeqCst);
        self.stop_threads();
        tracing::warn!(node = self.id, "node killed");
    }

    /// Reads a slate on this node, or asks its owner.
    pub fn fetch_slate(&self, updater: &str, key: &[u8]) -> FetchKind {
        let owner = match self.ring().route(key, updater) {
            Ok(o) => o,
            Err(e) => return FetchKind::Error(e.to_string()),
        };
        if owner == self.id {
            return self.fetch_local(updater, key);
        }
        match self.transport.fetch_slate(owner, updater, key) {
            Ok(k) => k,
            Err(e) => FetchKind::Error(e.to_string()),
        }
    }

    pub fn address(&self) -> &str {
        &self.addrs[self.id]
    }
}

impl Inbox for Node {
    fn deliver(&self, event: Event, dest: &str) {
        self.counters.received_remote.fetch_add(1, Ordering::SeqCst);
        match self.workflow.index_of(dest) {
            Some(function) => self.dispatch(Task {
                event,
                function,
                origin: Instant::now(),
            }),
            None => self.lose(&event, dest, LossReason::OperatorError),
        }
    }

    fn fetch_local(&self, updater: &str, key: &[u8]) -> FetchKind {
        if !self.workflow.get(updater).is_some_and(|d| d.is_update()) {
            return FetchKind::NotFound;
        }
        let sk = SlateKey::new(updater, key.to_vec());
        let _guard = self.locks.acquire(&sk, None);
        match self.store.get_slate(&sk) {
            Ok(Some(body)) => FetchKind::Found(body),
            Ok(None) => FetchKind::NotFound,
            Err(e) => FetchKind::Error(e.to_string()),
        }
    }

    fn apply_membership(&self, epoch: u64, live: BTreeSet<NodeId>) {
        if self.is_killed() {
            return;
        }
        let ring = {
            let mut guard = self.ring.write();
            if epoch <= guard.epoch() {
                return;
            }
            let ring = Arc::new(HashRing::new(&self.addrs, &live, epoch));
            *guard = ring.clone();
            ring
        };
        let id = self.id;
        let moved = self
            .store
            .retain(|sk| ring.route(&sk.key, &sk.updater).is_ok_and(|o| o == id));
        tracing::info!(node = id, epoch, live = ?live, released = moved, "membership applied");
    }

    fn apply_throttle(&self, streams: &[String], paused: bool) {
        self.gates.apply_throttle(streams, paused);
    }
}
