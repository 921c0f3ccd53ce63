//! Queue-overflow policies, source gates and hot-key splitting helpers.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::sync::atomic::{AtomicI64, AtomicU64, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use xxhash_rust::xxh3::xxh3_64;

use crate::error::{Error, Result};
use crate::model::is_end_of_stream;
use crate::operators::{EmitContext, MapFunction, OpResult, UpdateFunction};
use crate::workflow::{Violation, Workflow, WorkflowGraph};

/// What happens to an event whose destination queue is full.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub enum OverflowPolicy {
    #[default]
    DropAndLog,
    /// Republish onto a degraded-service stream.
    OverflowStream(String),
    /// Admit the event and pause the external sources feeding the stream
    /// until the queue drains to its low-water mark.
    ThrottleSource,
}

impl OverflowPolicy {
    /// Parses `drop`, `overflow:<stream>` or `throttle_source`.
    pub fn parse(v: &str) -> Option<Self> {
        match v {
            "drop" => Some(Self::DropAndLog),
            "throttle_source" => Some(Self::ThrottleSource),
            _ => v
                .strip_prefix("overflow:")
                .filter(|s| !s.is_empty())
                .map(|s| Self::OverflowStream(s.to_string())),
        }
    }
}

impl fmt::Display for OverflowPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::DropAndLog => f.write_str("drop"),
            Self::OverflowStream(s) => write!(f, "overflow:{s}"),
            Self::ThrottleSource => f.write_str("throttle_source"),
        }
    }
}

/// Checks overflow targets exist and are consumed, and that throttled
/// streams sit on an acyclic path from external inputs.
pub fn validate_policies(graph: &WorkflowGraph, policies: &BTreeMap<String, OverflowPolicy>) -> Vec<Violation> {
    let Ok(wf) = Workflow::new(graph.clone()) else {
        return Vec::new();
    };
    let mut out = Vec::new();
    let violation = |stream: &str, reason: String| Violation::Policy {
        stream: stream.to_string(),
        reason,
    };
    for (stream, policy) in policies {
        if !graph.is_known_stream(stream) {
            out.push(violation(stream, "unknown stream".into()));
            continue;
        }
        match policy {
            OverflowPolicy::DropAndLog => {}
            OverflowPolicy::OverflowStream(target) => {
                if !graph.is_publishable(target) {
                    out.push(violation(
                        stream,
                        format!("overflow target {target} is not a declared internal stream"),
                    ));
                } else if wf.subscribers(target).is_empty() {
                    out.push(violation(
                        stream,
                        format!("overflow target {target} has no subscribers"),
                    ));
                }
            }
            OverflowPolicy::ThrottleSource => {
                if let Err(reason) = throttle_sources(&wf, stream) {
                    out.push(violation(stream, reason));
                }
            }
        }
    }
    out
}

/// External inputs whose gates relieve congestion on `stream`.
pub fn throttle_sources(wf: &Workflow, stream: &str) -> std::result::Result<Vec<String>, String> {
    if wf.is_external(stream) {
        return Ok(vec![stream.to_string()]);
    }
    let upstream = wf.upstream_of(stream);
    if upstream.contains(stream) {
        return Err("stream lies on a cycle; throttling it can deadlock".into());
    }
    let sources: Vec<String> = upstream.into_iter().filter(|s| wf.is_external(s)).collect();
    if sources.is_empty() {
        return Err("no external input feeds this stream".into());
    }
    Ok(sources)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Rate {
    Paused,
    PerSecond(u64),
    Unlimited,
}

const RATE_PAUSED: u64 = 0;
const RATE_UNLIMITED: u64 = u64::MAX;

/// Consumption gate for one external input stream. Reads are wait-free.
#[derive(Debug)]
pub struct SourceGate {
    rate: AtomicU64,
    /// Outstanding congestion pauses; the gate is closed while positive.
    congestion: AtomicI64,
    pauses: AtomicU64,
}

impl Default for SourceGate {
    fn default() -> Self {
        Self {
            rate: AtomicU64::new(RATE_UNLIMITED),
            congestion: AtomicI64::new(0),
            pauses: AtomicU64::new(0),
        }
    }
}

impl SourceGate {
    pub fn rate(&self) -> Rate {
        match self.rate.load(Ordering::Acquire) {
            RATE_PAUSED => Rate::Paused,
            RATE_UNLIMITED => Rate::Unlimited,
            r => Rate::PerSecond(r),
        }
    }

    pub fn set_rate(&self, rate: Rate) {
        let raw = match rate {
            Rate::Paused => RATE_PAUSED,
            Rate::Unlimited => RATE_UNLIMITED,
            Rate::PerSecond(0) => RATE_PAUSED,
            Rate::PerSecond(r) => r.min(RATE_UNLIMITED - 1),
        };
        self.rate.store(raw, Ordering::Release);
    }

    pub fn congestion_pause(&self) {
        self.pauses.fetch_add(1, Ordering::Relaxed);
        self.congestion.fetch_add(1, Ordering::AcqRel);
    }

    pub fn congestion_resume(&self) {
        let _ = self
            .congestion
            .fetch_update(Ordering::AcqRel, Ordering::Acquire, |c| Some((c - 1).max(0)));
    }

    pub fn is_open(&self) -> bool {
        self.congestion.load(Ordering::Acquire) <= 0 && self.rate() != Rate::Paused
    }

    /// Number of congestion pauses received so far.
    pub fn pause_count(&self) -> u64 {
        self.pauses.load(Ordering::Relaxed)
    }
}

/// Gates for every external input on a node.
#[derive(Debug, Default)]
pub struct GateBoard {
    gates: HashMap<String, Arc<SourceGate>>,
}

impl GateBoard {
    pub fn new(wf: &Workflow) -> Self {
        Self {
            gates: wf
                .graph()
                .external_inputs
                .iter()
                .map(|s| (s.clone(), Arc::new(SourceGate::default())))
                .collect(),
        }
    }

    pub fn gate(&self, stream: &str) -> Option<&Arc<SourceGate>> {
        self.gates.get(stream)
    }

    /// Operator control of source pace. Only external inputs can be gated.
    pub fn set_source_rate(&self, stream: &str, rate: Rate) -> Result<()> {
        let gate = self
            .gates
            .get(stream)
            .ok_or_else(|| Error::ThrottleInternal(stream.to_string()))?;
        gate.set_rate(rate);
        Ok(())
    }

    pub fn apply_throttle(&self, streams: &[String], paused: bool) {
        for s in streams {
            if let Some(g) = self.gates.get(s) {
                if paused {
                    g.congestion_pause();
                } else {
                    g.congestion_resume();
                }
            }
        }
    }
}

/// Per-source pacing state. Call [`Pacer::wait`] before consuming each
/// event.
#[derive(Debug)]
pub struct Pacer {
    next: Instant,
    blocked: Duration,
}

impl Default for Pacer {
    fn default() -> Self {
        Self {
            next: Instant::now(),
            blocked: Duration::ZERO,
        }
    }
}

impl Pacer {
    pub fn wait(&mut self, gate: &SourceGate) {
        let started = Instant::now();
        while !gate.is_open() {
            thread::sleep(Duration::from_micros(200));
        }
        self.blocked += started.elapsed();
        if let Rate::PerSecond(r) = gate.rate() {
            let interval = Duration::from_secs_f64(1.0 / r as f64);
            let now = Instant::now();
            if self.next > now {
                thread::sleep(self.next - now);
            }
            self.next = self.next.max(now) + interval;
        }
    }

    /// Time spent waiting on a closed gate.
    pub fn blocked(&self) -> Duration {
        self.blocked
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SplitStrategy {
    RoundRobin,
    /// Secondary hash of the event value; needs no shared state.
    ValueHash,
}

/// Rewrites a hot key into one of `fanout` derived keys `base‖i`, i in 1..=n.
#[derive(Debug)]
pub struct KeySplitter {
    fanout: usize,
    strategy: SplitStrategy,
    next: AtomicU64,
}

impl KeySplitter {
    pub fn new(fanout: usize, strategy: SplitStrategy) -> Result<Self> {
        if fanout < 1 {
            return Err(Error::InvalidFanout(fanout));
        }
        Ok(Self {
            fanout,
            strategy,
            next: AtomicU64::new(0),
        })
    }

    pub fn fanout(&self) -> usize {
        self.fanout
    }

    pub fn split(&self, base: &[u8], value: &[u8]) -> Vec<u8> {
        let slot = match self.strategy {
            SplitStrategy::RoundRobin => self.next.fetch_add(1, Ordering::Relaxed) % self.fanout as u64,
            SplitStrategy::ValueHash => xxh3_64(value) % self.fanout as u64,
        };
        let mut key = base.to_vec();
        key.extend_from_slice((slot + 1).to_string().as_bytes());
        key
    }

    /// All derived keys for `base`.
    pub fn derived_keys(&self, base: &[u8]) -> Vec<Vec<u8>> {
        (1..=self.fanout)
            .map(|i| {
                let mut k = base.to_vec();
                k.extend_from_slice(i.to_string().as_bytes());
                k
            })
            .collect()
    }
}

/// Wraps a map function so keys it emits (optionally only those in
/// `hot_keys`) are spread over derived keys.
pub struct SplitKeyMap {
    inner: Arc<dyn MapFunction>,
    splitter: KeySplitter,
    hot_keys: Option<Vec<Vec<u8>>>,
}

impl SplitKeyMap {
    pub fn new(inner: Arc<dyn MapFunction>, splitter: KeySplitter, hot_keys: Option<Vec<Vec<u8>>>) -> Self {
        Self {
            inner,
            splitter,
            hot_keys,
        }
    }
}

impl MapFunction for SplitKeyMap {
    fn map(&self, ctx: &mut EmitContext<'_>, stream: &str, key: &[u8], value: &[u8]) -> OpResult {
        let start = ctx.pending_publishes().len();
        self.inner.map(ctx, stream, key, value)?;
        ctx.rewrite_keys_from(start, |k, v| {
            let hot = self.hot_keys.as_ref().is_none_or(|h| h.iter().any(|x| x == k));
            hot.then(|| self.splitter.split(k, v))
        });
        Ok(())
    }
}

/// An associative, commutative fold over event values.
pub trait Combiner: Send + Sync {
    fn identity(&self) -> i64;
    fn lift(&self, value: &[u8]) -> i64;
    fn merge(&self, a: i64, b: i64) -> i64;
}

#[derive(Debug, Default, Clone, Copy)]
pub struct CountCombiner;

impl Combiner for CountCombiner {
    fn identity(&self) -> i64 {
        0
    }
    fn lift(&self, _value: &[u8]) -> i64 {
        1
    }
    fn merge(&self, a: i64, b: i64) -> i64 {
        a + b
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartialSlate {
    pub acc: i64,
    pub events: u64,
    pub since_emit: u64,
    pub last_emit_millis: Option<u64>,
}

/// A partial value re-emitted under the base key.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartialReport {
    pub partial: String,
    pub seq: u64,
    pub acc: i64,
}

/// Updater over split keys: folds events into a partial and re-emits the
/// cumulative partial under the base key every `every_events` events or
/// `every_millis` of event time, whichever first, and on end of stream.
pub struct PartialAggregate<C> {
    combiner: C,
    publish: String,
    fanout: usize,
    every_events: u64,
    every_millis: u64,
}

impl<C: Combiner> PartialAggregate<C> {
    pub fn new(combiner: C, publish: &str, fanout: usize, every_events: u64, every_millis: u64) -> Result<Self> {
        if fanout < 1 {
            return Err(Error::InvalidFanout(fanout));
        }
        Ok(Self {
            combiner,
            publish: publish.to_string(),
            fanout,
            every_events: every_events.max(1),
            every_millis,
        })
    }

    /// Strips the `‖i` suffix added by [`KeySplitter`].
    pub fn base_key<'k>(&self, key: &'k [u8]) -> &'k [u8] {
        let digits = self.fanout.to_string().len();
        let mut end = key.len();
        while end > 0 && key.len() - end < digits && key[end - 1].is_ascii_digit() {
            end -= 1;
        }
        &key[..end]
    }

    fn report(&self, ctx: &mut EmitContext<'_>, key: &[u8], slate: &mut PartialSlate, now: u64) -> OpResult {
        let report = PartialReport {
            partial: String::from_utf8_lossy(key).into_owned(),
            seq: slate.events,
            acc: slate.acc,
        };
        ctx.publish(&self.publish, self.base_key(key).to_vec(), serde_json::to_vec(&report)?)?;
        slate.since_emit = 0;
        slate.last_emit_millis = Some(now);
        Ok(())
    }
}

impl<C: Combiner> UpdateFunction for PartialAggregate<C> {
    fn update(
        &self,
        ctx: &mut EmitContext<'_>,
        _stream: &str,
        key: &[u8],
        value: &[u8],
        slate: Option<&[u8]>,
    ) -> OpResult {
        let mut st: PartialSlate = match slate {
            Some(b) => serde_json::from_slice(b)?,
            None => PartialSlate {
                acc: self.combiner.identity(),
                ..Default::default()
            },
        };
        let now = ctx.input().ts.millis;
        if is_end_of_stream(value) {
            if st.since_emit > 0 {
                self.report(ctx, key, &mut st, now)?;
            }
        } else {
            st.acc = self.combiner.merge(st.acc, self.combiner.lift(value));
            st.events += 1;
            st.since_emit += 1;
            let last = *st.last_emit_millis.get_or_insert(now);
            if st.since_emit >= self.every_events || now.saturating_sub(last) >= self.every_millis {
                self.report(ctx, key, &mut st, now)?;
            }
        }
        ctx.replace_slate(serde_json::to_vec(&st)?)?;
        Ok(())
    }

    fn wants_end_of_stream(&self) -> bool {
        true
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AggregateSlate {
    /// Latest report per partial key, as (seq, acc).
    pub partials: BTreeMap<String, (u64, i64)>,
    pub total: i64,
}

/// Combines partial reports into a total. Reports are cumulative, so a
/// newer report from the same partial replaces the older one.
pub struct Aggregator<C> {
    combiner: C,
}

impl<C: Combiner> Aggregator<C> {
    pub fn new(combiner: C) -> Self {
        Self { combiner }
    }
}

impl<C: Combiner> UpdateFunction for Aggregator<C> {
    fn update(
        &self,
        ctx: &mut EmitContext<'_>,
        _stream: &str,
        _key: &[u8],
        value: &[u8],
        slate: Option<&[u8]>,
    ) -> OpResult {
        let mut st: AggregateSlate = match slate {
            Some(b) => serde_json::from_slice(b)?,
            None => AggregateSlate::default(),
        };
        let report: PartialReport = serde_json::from_slice(value)?;
        let newer = st
            .partials
            .get(&report.partial)
            .is_none_or(|(seq, _)| report.seq > *seq);
        if newer {
            st.partials.insert(report.partial, (report.seq, report.acc));
        }
        st.total = st
            .partials
            .values()
            .fold(self.combiner.identity(), |acc, (_, v)| self.combiner.merge(acc, *v));
        ctx.replace_slate(serde_json::to_vec(&st)?)?;
        Ok(())
    }
}
