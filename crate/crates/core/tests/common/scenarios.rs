//! End-to-end scenarios shared by the acceptance runner and the smaller
//! integration tests. Each returns an [`Outcome`] instead of panicking so
//! the runner can report every criterion.

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use slateflow::apps::{builtin_registry, counter_update};
use slateflow::clock::ManualClock;
use slateflow::cluster::{HashRing, LossReason};
use slateflow::config::AppConfig;
use slateflow::flow::{AggregateSlate, OverflowPolicy};
use slateflow::harness::{ClusterOptions, LocalCluster};
use slateflow::model::Event;
use slateflow::operators::{EmitContext, OpResult, Registry};
use slateflow::oracle::{oracle_check, CheckMode};
use slateflow::runtime::DispatchTable;
use slateflow::sim::{sim_run, Trace, DEFAULT_MAX_STEPS};
use slateflow::store::SlateKey;
use slateflow::workflow::{FlushPolicy, FunctionDef, Ttl, Workflow, WorkflowGraph};

use super::*;

const SETTLE: Duration = Duration::from_secs(60);

#[derive(Debug)]
pub struct Outcome {
    pub pass: bool,
    pub detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self {
            pass,
            detail: detail.into(),
        }
    }

    fn fail(detail: impl Into<String>) -> Self {
        Self::new(false, detail)
    }

    /// Both must pass; details are joined.
    pub fn and(self, other: Outcome) -> Outcome {
        Outcome::new(self.pass && other.pass, format!("{}; {}", self.detail, other.detail))
    }
}

fn reference(cfg: &AppConfig, input: &[Event]) -> Trace {
    let wf = Workflow::new(cfg.workflow.clone()).unwrap();
    sim_run(&wf, &builtin_registry(), input, DEFAULT_MAX_STEPS).unwrap()
}

/// Feeds `input`, waits for quiescence and optionally ends the streams.
fn run_to_end(cluster: &LocalCluster, input: &[Event], end_of_stream: bool) -> bool {
    cluster.feed(ok_all(input), |_| {}).unwrap();
    if !cluster.wait_quiescent(SETTLE) {
        return false;
    }
    let end = input.iter().map(|e| e.ts.millis).max().unwrap_or(0);
    !end_of_stream || cluster.end_of_stream(end, SETTLE)
}

pub fn strict_equivalence(events: usize) -> Outcome {
    let cfg = example4(FlushPolicy::WriteThrough).with_runtime(|r| {
        r.workers_per_node = 1;
        r.queue_capacity = 1 << 20;
    });
    let (input, tally) = checkins(events, 11);
    let want = reference(&cfg, &input);
    let cluster = LocalCluster::start(&cfg, &builtin_registry(), ClusterOptions::default()).unwrap();
    if !run_to_end(&cluster, &input, false) {
        return Outcome::fail("did not settle");
    }
    let got = cluster.trace();
    let report = oracle_check(&want, &got, CheckMode::Strict);
    let finals = want.final_slates();
    let tallied = tally
        .iter()
        .all(|(r, n)| finals.get(&("U1".to_string(), r.as_bytes().to_vec())) == Some(&n.to_string().into_bytes()));
    Outcome::new(
        report.passed() && tallied && cluster.lost().is_empty(),
        format!(
            "{} slate updates, diffs {:?}",
            got.slate_updates.len(),
            report.diffs.first()
        ),
    )
}

#[derive(Clone, Copy, Debug)]
pub enum Pipeline {
    Retail,
    HotTopics,
}

pub fn relaxed_equivalence(pipeline: Pipeline, workers: usize) -> Outcome {
    let (cfg, input, eos) = match pipeline {
        Pipeline::Retail => (example4(FlushPolicy::WriteThrough), checkins(10_000, 12).0, false),
        Pipeline::HotTopics => (example5(2.0), tweets(10, 1_000, 13), true),
    };
    let cfg = cfg.with_runtime(|r| {
        r.workers_per_node = workers;
        r.queue_capacity = 1 << 20;
    });
    let want = reference(&cfg, &input);
    let cluster = LocalCluster::start(&cfg, &builtin_registry(), ClusterOptions::default()).unwrap();
    if !run_to_end(&cluster, &input, eos) {
        return Outcome::fail("did not settle");
    }
    let got = cluster.trace();
    let report = oracle_check(&want, &got, CheckMode::Relaxed);
    let finals_equal = want.final_slates() == got.final_slates();
    let outputs: usize = got.outputs.values().map(Vec::len).sum();
    Outcome::new(
        report.passed() && finals_equal && cluster.lost().is_empty(),
        format!(
            "{pipeline:?} w={workers}: {} updates, {outputs} outputs, diffs {:?}",
            got.slate_updates.len(),
            report.diffs.first()
        ),
    )
}

fn retailer_of(value: &[u8]) -> Option<&'static str> {
    let text = String::from_utf8_lossy(value);
    VENUES
        .iter()
        .find(|(v, _)| text.contains(&format!("\"{v}\"")))
        .and_then(|(_, r)| *r)
}

/// Crashes node `kill` after `kill_after` of `events` check-ins and audits
/// the result. Returns the outcome and how many counter updates ran on a
/// survivor for keys the crashed node used to own.
pub fn failure_injection(nodes: Vec<String>, kill: usize, events: usize, kill_after: u64) -> (Outcome, usize) {
    let mut cfg = example4(FlushPolicy::WriteThrough).with_runtime(|r| {
        r.workers_per_node = 4;
        r.queue_capacity = 1 << 20;
    });
    cfg.cluster.nodes = nodes.clone();
    let (input, tally) = checkins(events, 41);
    let cluster = LocalCluster::start(&cfg, &builtin_registry(), ClusterOptions::default()).unwrap();
    cluster
        .feed(ok_all(&input), |n| {
            if n == kill_after {
                cluster.kill(kill)
            }
        })
        .unwrap();
    if !cluster.wait_quiescent(SETTLE) {
        return (Outcome::fail("did not settle"), 0);
    }
    let mut problems = Vec::new();

    let epoch = cluster.master().membership().epoch;
    if epoch != 1 {
        problems.push(format!("master epoch {epoch}"));
    }
    for n in (0..nodes.len()).filter(|&n| n != kill) {
        if cluster.node(n).epoch() != 1 {
            problems.push(format!("node {n} at epoch {}", cluster.node(n).epoch()));
        }
    }

    let tags = cluster.processed_tags();
    if tags.iter().any(|t| t.node == kill && t.epoch >= 1) {
        problems.push("crashed node processed after the broadcast".into());
    }
    let mut owner = HashMap::new();
    for t in &tags {
        let prev = owner.insert((t.function.clone(), t.key.clone(), t.epoch), t.node);
        if prev.is_some_and(|p| p != t.node) {
            problems.push(format!(
                "two owners for {}/{:?}",
                t.function,
                String::from_utf8_lossy(&t.key)
            ));
            break;
        }
    }

    let lost = cluster.lost().entries();
    if lost
        .iter()
        .any(|l| !matches!(l.reason, LossReason::NodeCrashed | LossReason::SendFailed))
    {
        problems.push("unexpected loss reason".into());
    }
    let lost_m1: Vec<_> = lost.iter().filter(|l| l.dest == "M1").collect();
    let lost_u1: Vec<_> = lost.iter().filter(|l| l.dest == "U1").collect();
    let m1 = tags.iter().filter(|t| t.function == "M1").count();
    if m1 + lost_m1.len() != input.len() {
        problems.push(format!("M1 {m1} + lost {} != {}", lost_m1.len(), input.len()));
    }

    let mut expected: BTreeMap<String, u64> = tally.clone();
    for l in &lost_m1 {
        if let Some(r) = retailer_of(&l.event.value) {
            *expected.get_mut(r).unwrap() -= 1;
        }
    }
    let emitted: u64 = expected.values().sum();
    let u1 = tags.iter().filter(|t| t.function == "U1").count() as u64;
    if u1 + lost_u1.len() as u64 != emitted {
        problems.push(format!("U1 {u1} + lost {} != emitted {emitted}", lost_u1.len()));
    }
    for l in &lost_u1 {
        if let Some(n) = expected.get_mut(String::from_utf8_lossy(&l.event.key).as_ref()) {
            *n -= 1;
        }
    }

    let finals = cluster.trace().final_slates();
    let survivor = cluster.node(if kill == 0 { 1 } else { 0 });
    for (retailer, want) in &expected {
        let sk = SlateKey::new("U1", retailer.as_bytes().to_vec());
        let want = want.to_string().into_bytes();
        if finals.get(&("U1".to_string(), sk.key.clone())) != Some(&want) {
            problems.push(format!("{retailer}: final update differs from tally"));
        }
        if survivor.store().store_read(&sk).ok().flatten() != Some(want) {
            problems.push(format!("{retailer}: stored count differs from tally"));
        }
    }

    let ring = HashRing::all_live(&nodes);
    let moved = tags
        .iter()
        .filter(|t| t.function == "U1" && t.node != kill && t.epoch >= 1)
        .filter(|t| ring.route(&t.key, "U1").unwrap() == kill)
        .count();
    let processed = m1 as u64 + u1;
    let detail = format!(
        "inputs: processed {m1} + lost {} = {}; all pairs: processed {processed} + lost {} = {}; {moved} moved counter updates, {}",
        lost_m1.len(),
        m1 + lost_m1.len(),
        lost.len(),
        processed + lost.len() as u64,
        if problems.is_empty() { "audit clean".to_string() } else { problems.join(", ") }
    );
    cluster.shutdown();
    (Outcome::new(problems.is_empty(), detail), moved)
}

/// Three nodes where a non-source node owns the Walmart counter.
pub fn nodes_with_counter_owner() -> (Vec<String>, usize) {
    (0..)
        .map(|i| (0..3).map(|n| format!("10.0.{i}.{n}:7000")).collect::<Vec<String>>())
        .find_map(|nodes| {
            let owner = HashRing::all_live(&nodes).route(b"Walmart", "U1").unwrap();
            (owner != 0).then_some((nodes, owner))
        })
        .unwrap()
}

fn counter_graph() -> WorkflowGraph {
    WorkflowGraph::new()
        .external("S_1")
        .function(FunctionDef::update("U1", &["S_1"]).with_impl("counter"))
}

pub fn contention(events: usize, workers: usize) -> Outcome {
    let cfg = AppConfig::new(counter_graph()).with_runtime(|r| {
        r.workers_per_node = workers;
        r.queue_capacity = 1 << 20;
    });
    let input = zipf_keys(events, 10_000, 1.2, 17);
    let mut tally: HashMap<Vec<u8>, u64> = HashMap::new();
    for e in &input {
        *tally.entry(e.key.clone()).or_default() += 1;
    }
    let opts = ClusterOptions {
        instrument_locks: true,
        ..Default::default()
    };
    let cluster = LocalCluster::start(&cfg, &builtin_registry(), opts).unwrap();
    if !run_to_end(&cluster, &input, false) {
        return Outcome::fail("did not settle");
    }
    let requesters = cluster.node(0).locks().requesters();
    let widest = requesters.values().map(|s| s.len()).max().unwrap_or(0);
    let hottest = tally.values().max().copied().unwrap_or(0);

    let mut last: HashMap<Vec<u8>, slateflow::model::Timestamp> = HashMap::new();
    let mut reorders = 0;
    let mut counts: HashMap<Vec<u8>, u64> = HashMap::new();
    for u in cluster.trace().slate_updates {
        if last.get(&u.key).is_some_and(|prev| *prev >= u.ts) {
            reorders += 1;
        }
        last.insert(u.key.clone(), u.ts);
        counts.insert(u.key, String::from_utf8_lossy(&u.body).parse().unwrap_or(0));
    }
    let counted = counts == tally;
    Outcome::new(
        widest <= 2 && reorders == 0 && counted && !requesters.is_empty(),
        format!(
            "{} keys, hottest {hottest} events, max requesting workers {widest}, reorders {reorders}, counts exact {counted}",
            requesters.len()
        ),
    )
}

/// A counter that takes a while per event.
fn slow_registry(per_event: Duration) -> Registry {
    let mut r = builtin_registry();
    r.update_instance(
        "slow_counter",
        move |ctx: &mut EmitContext<'_>, _: &str, _: &[u8], _: &[u8], slate: Option<&[u8]>| -> OpResult {
            thread::sleep(per_event);
            ctx.replace_slate(counter_update(slate))?;
            Ok(())
        },
    );
    r
}

fn overflow_config(policy: Option<OverflowPolicy>, capacity: usize) -> AppConfig {
    let graph = WorkflowGraph::new()
        .external("S_1")
        .internal("S_ovf")
        .function(FunctionDef::update("U1", &["S_1"]).with_impl("slow_counter"))
        .function(FunctionDef::update("U2", &["S_ovf"]).with_impl("counter"));
    let mut cfg = AppConfig::new(graph).with_runtime(|r| {
        r.workers_per_node = BURST_WORKERS;
        r.dispatch_threshold = 0.5;
        r.dispatch_floor = 16;
        r.queue_capacity = capacity;
    });
    if let Some(p) = policy {
        cfg = cfg.with_overflow("S_1", p);
    }
    cfg
}

/// Offered rate of the overflow burst, about four times what the slow
/// counter sustains.
pub const BURST_PER_SEC: u64 = 40_000;

const BURST_WORKERS: usize = 4;

/// A key whose primary and degraded updaters share no worker lane, so the
/// degraded path is not starved by the saturated one.
fn burst_key() -> String {
    let table = DispatchTable::new(BURST_WORKERS, 0.5, 16);
    (0..)
        .map(|i| format!("hot{i}"))
        .find(|k| {
            let (a, b) = table.lanes(k.as_bytes(), "U1");
            let (c, d) = table.lanes(k.as_bytes(), "U2");
            a != c && a != d && b != c && b != d
        })
        .unwrap()
}

fn burst(events: usize) -> Vec<Event> {
    let key = burst_key();
    (0..events as u64)
        .map(|i| src("S_1", 1_000 + i, 0, &key, "x"))
        .collect()
}

/// Sleeps until the `n`th event is due.
fn pace(start: Instant, gap: Duration, n: u64) {
    if let Some(wait) = (start + gap * n as u32).checked_duration_since(Instant::now()) {
        thread::sleep(wait);
    }
}

struct BurstRun {
    processed: HashMap<String, u64>,
    lost: Vec<slateflow::cluster::LostEvent>,
    finals: BTreeMap<(String, Vec<u8>), Vec<u8>>,
    feed_time: Duration,
    pauses: u64,
    redirected: u64,
}

fn run_burst(cfg: &AppConfig, events: usize) -> Option<BurstRun> {
    let cluster = LocalCluster::start(
        cfg,
        &slow_registry(Duration::from_micros(50)),
        ClusterOptions::default(),
    )
    .unwrap();
    let input = burst(events);
    let start = Instant::now();
    let gap = Duration::from_secs_f64(1.0 / BURST_PER_SEC as f64);
    cluster.feed(ok_all(&input), |n| pace(start, gap, n)).unwrap();
    let feed_time = start.elapsed();
    if !cluster.wait_quiescent(SETTLE) {
        return None;
    }
    let mut processed = HashMap::new();
    for t in cluster.processed_tags() {
        *processed.entry(t.function).or_default() += 1;
    }
    let run = BurstRun {
        processed,
        lost: cluster.lost().entries(),
        finals: cluster.trace().final_slates(),
        feed_time,
        pauses: cluster
            .source_node()
            .gates()
            .gate("S_1")
            .map(|g| g.pause_count())
            .unwrap_or(0),
        redirected: cluster.stats().iter().map(|s| s.redirected).sum(),
    };
    cluster.shutdown();
    Some(run)
}

fn count_of(finals: &BTreeMap<(String, Vec<u8>), Vec<u8>>, updater: &str) -> u64 {
    finals
        .get(&(updater.to_string(), burst_key().into_bytes()))
        .map(|b| String::from_utf8_lossy(b).parse().unwrap())
        .unwrap_or(0)
}

pub fn overflow_drop(events: usize, capacity: usize) -> Outcome {
    let Some(run) = run_burst(&overflow_config(Some(OverflowPolicy::DropAndLog), capacity), events) else {
        return Outcome::fail("did not settle");
    };
    let processed = run.processed.get("U1").copied().unwrap_or(0);
    let dropped = run.lost.iter().filter(|l| l.reason == LossReason::QueueDropped).count() as u64;
    Outcome::new(
        dropped > 0 && dropped == events as u64 - processed && dropped == run.lost.len() as u64,
        format!("drop: injected {events}, processed {processed}, logged drops {dropped}"),
    )
}

pub fn overflow_stream(events: usize, capacity: usize) -> Outcome {
    let policy = OverflowPolicy::OverflowStream("S_ovf".into());
    let Some(run) = run_burst(&overflow_config(Some(policy), capacity), events) else {
        return Outcome::fail("did not settle");
    };
    let (u1, u2) = (count_of(&run.finals, "U1"), count_of(&run.finals, "U2"));
    Outcome::new(
        run.lost.is_empty() && run.redirected > 0 && u1 + u2 == events as u64 && u2 == run.redirected,
        format!(
            "overflow: primary {u1} + degraded {u2} = {}, redirected {}, lost {}",
            u1 + u2,
            run.redirected,
            run.lost.len()
        ),
    )
}

pub fn overflow_throttle(events: usize, capacity: usize) -> Outcome {
    let Some(free) = run_burst(&overflow_config(None, 1 << 20), events) else {
        return Outcome::fail("baseline did not settle");
    };
    let Some(run) = run_burst(&overflow_config(Some(OverflowPolicy::ThrottleSource), capacity), events) else {
        return Outcome::fail("did not settle");
    };
    let rate = |d: Duration| events as f64 / d.as_secs_f64().max(1e-6);
    let (free_rate, throttled_rate) = (rate(free.feed_time), rate(run.feed_time));
    let counted = count_of(&run.finals, "U1");
    Outcome::new(
        run.lost.is_empty() && counted == events as u64 && run.pauses > 0 && throttled_rate < 0.5 * free_rate,
        format!(
            "throttle: counted {counted}, lost {}, {} pauses, source rate {throttled_rate:.0}/s vs {free_rate:.0}/s unthrottled",
            run.lost.len(),
            run.pauses
        ),
    )
}

fn ttl_config(flush: FlushPolicy, ttl: Ttl) -> AppConfig {
    AppConfig::new(
        WorkflowGraph::new().external("S_1").function(
            FunctionDef::update("U1", &["S_1"])
                .with_impl("counter")
                .with_flush(flush)
                .with_ttl(ttl),
        ),
    )
    .with_runtime(|r| {
        r.workers_per_node = 2;
        r.flush_tick_ms = 10;
    })
}

fn wait_for(timeout: Duration, mut cond: impl FnMut() -> bool) -> bool {
    let deadline = Instant::now() + timeout;
    while Instant::now() < deadline {
        if cond() {
            return true;
        }
        thread::sleep(Duration::from_millis(5));
    }
    cond()
}

pub fn ttl_expiry() -> Outcome {
    let clock = Arc::new(ManualClock::new(1_000_000));
    let opts = ClusterOptions {
        clock: clock.clone(),
        ..Default::default()
    };
    let cluster = LocalCluster::start(
        &ttl_config(FlushPolicy::WriteThrough, Ttl::Millis(2_000)),
        &builtin_registry(),
        opts,
    )
    .unwrap();
    let sk = SlateKey::new("U1", b"k".to_vec());
    let node = cluster.node(0).clone();
    let read = || node.store().store_read(&sk).ok().flatten();

    cluster.feed(ok_all(&[src("S_1", 1, 0, "k", "x")]), |_| {}).unwrap();
    let written = cluster.wait_quiescent(SETTLE) && read() == Some(b"1".to_vec());
    clock.advance(1_000);
    thread::sleep(Duration::from_millis(50));
    let kept = read() == Some(b"1".to_vec()) && node.store().peek_cached(&sk).is_some();
    clock.advance(2_000);
    let expired = wait_for(Duration::from_secs(2), || {
        read().is_none() && node.store().peek_cached(&sk).is_none()
    });
    cluster.feed(ok_all(&[src("S_1", 2, 0, "k", "x")]), |_| {}).unwrap();
    let fresh = cluster.wait_quiescent(SETTLE)
        && node.fetch_slate("U1", b"k") == slateflow::cluster::FetchKind::Found(b"1".to_vec());
    Outcome::new(
        written && kept && expired && fresh,
        format!("written {written}, kept at 1s {kept}, gone at 3s {expired}, restarted at 1 {fresh}"),
    )
}

pub fn write_through_matches_cache(events: usize) -> Outcome {
    let cluster = LocalCluster::start(
        &ttl_config(FlushPolicy::WriteThrough, Ttl::Forever),
        &builtin_registry(),
        ClusterOptions::default(),
    )
    .unwrap();
    let node = cluster.node(0).clone();
    let mut mismatches = 0;
    for i in 0..events as u64 {
        let key = format!("k{}", i % 10);
        cluster.feed(ok_all(&[src("S_1", i, 0, &key, "x")]), |_| {}).unwrap();
        if !cluster.wait_quiescent(SETTLE) {
            return Outcome::fail("did not settle");
        }
        let sk = SlateKey::new("U1", key.into_bytes());
        let cached = node.store().peek_cached(&sk).map(|e| e.body);
        if cached.is_none() || cached != node.store().store_read(&sk).ok().flatten() {
            mismatches += 1;
        }
    }
    Outcome::new(
        mismatches == 0,
        format!("write-through: {mismatches} mismatches over {events} events"),
    )
}

pub fn on_evict_matches_after_shutdown(events: usize) -> Outcome {
    let cluster = LocalCluster::start(
        &ttl_config(FlushPolicy::OnEvict, Ttl::Forever),
        &builtin_registry(),
        ClusterOptions::default(),
    )
    .unwrap();
    let input: Vec<Event> = (0..events as u64)
        .map(|i| src("S_1", i, 0, &format!("k{}", i % 25), "x"))
        .collect();
    if !run_to_end(&cluster, &input, false) {
        return Outcome::fail("did not settle");
    }
    let node = cluster.node(0).clone();
    let cached = node.store().cached_entries();
    let unflushed = cached
        .iter()
        .all(|(sk, _)| node.store().store_read(sk).ok().flatten().is_none());
    cluster.shutdown();
    let equal = cached
        .iter()
        .all(|(sk, e)| node.store().store_read(sk).ok().flatten().as_ref() == Some(&e.body));
    Outcome::new(
        unflushed && equal && cached.len() == 25,
        format!(
            "on-evict: {} slates, deferred until shutdown {unflushed}, equal after {equal}",
            cached.len()
        ),
    )
}

pub fn split_merge(fanout: usize, events: usize) -> Outcome {
    let cfg = AppConfig::new(
        WorkflowGraph::new()
            .external("S_1")
            .internal("S_2")
            .internal("S_3")
            .function(
                FunctionDef::map("M1", &["S_1"])
                    .with_impl("split_map")
                    .with_param("publish", "S_2")
                    .with_param("fanout", &fanout.to_string()),
            )
            .function(
                FunctionDef::update("U1", &["S_2"])
                    .with_impl("partial_counter")
                    .with_param("publish", "S_3")
                    .with_param("fanout", &fanout.to_string()),
            )
            .function(FunctionDef::update("U2", &["S_3"]).with_impl("aggregator")),
    )
    .with_runtime(|r| {
        r.workers_per_node = 4;
        r.queue_capacity = 1 << 20;
    });
    let input: Vec<Event> = (0..events as u64)
        .map(|i| src("S_1", 1_000 + i / 8, i % 8, "Best Buy", "checkin"))
        .collect();
    let cluster = LocalCluster::start(&cfg, &builtin_registry(), ClusterOptions::default()).unwrap();
    if !run_to_end(&cluster, &input, true) {
        return Outcome::fail("did not settle");
    }
    let finals = cluster.trace().final_slates();
    let partial_keys = finals.keys().filter(|(u, _)| u == "U1").count();
    let total = finals
        .get(&("U2".to_string(), b"Best Buy".to_vec()))
        .and_then(|b| serde_json::from_slice::<AggregateSlate>(b).ok())
        .map(|s| s.total);
    Outcome::new(
        total == Some(events as i64) && partial_keys == fanout && cluster.lost().is_empty(),
        format!("fanout {fanout}: {partial_keys} partial slates, total {total:?}"),
    )
}

pub fn hot_topic(threshold: f64, expected_hot: usize) -> Outcome {
    let cfg = example5(threshold).with_runtime(|r| r.workers_per_node = 4);
    let input = hot_fixture();
    let want = reference(&cfg, &input);
    let cluster = LocalCluster::start(&cfg, &builtin_registry(), ClusterOptions::default()).unwrap();
    if !run_to_end(&cluster, &input, true) {
        return Outcome::fail("did not settle");
    }
    let got = cluster.trace();
    let hot: Vec<_> = got.outputs.get("S_4").cloned().unwrap_or_default();
    let keys: Vec<String> = hot
        .iter()
        .map(|e| String::from_utf8_lossy(&e.key).into_owned())
        .collect();
    let values: Vec<String> = hot
        .iter()
        .map(|e| String::from_utf8_lossy(&e.value).into_owned())
        .collect();
    let agrees = oracle_check(&want, &got, CheckMode::Relaxed).passed();
    let right = keys.len() == expected_hot && keys.iter().all(|k| k == "earthquake.14");
    let ratio_ok = expected_hot == 0 || values.iter().all(|v| v.parse::<f64>().ok() == Some(5.0));
    Outcome::new(
        right && ratio_ok && agrees,
        format!("theta {threshold}: hot events {keys:?} values {values:?}, matches reference {agrees}"),
    )
}

fn env_or(name: &str, default: f64) -> f64 {
    std::env::var(name).ok().and_then(|v| v.parse().ok()).unwrap_or(default)
}

pub fn throughput(events: usize) -> (f64, Outcome) {
    let floor = env_or("SLATEFLOW_MIN_EVENTS_PER_SEC", 50_000.0);
    let cfg = example4(FlushPolicy::default()).with_runtime(|r| {
        r.workers_per_node = 4;
        r.queue_capacity = 1 << 20;
    });
    let (input, _) = checkins(events, 21);
    let opts = ClusterOptions {
        record: false,
        ..Default::default()
    };
    let cluster = LocalCluster::start(&cfg, &builtin_registry(), opts).unwrap();
    let start = Instant::now();
    cluster.feed(ok_all(&input), |_| {}).unwrap();
    if !cluster.wait_quiescent(SETTLE) {
        return (0.0, Outcome::fail("did not settle"));
    }
    let rate = events as f64 / start.elapsed().as_secs_f64();
    cluster.shutdown();
    (
        rate,
        Outcome::new(rate >= floor, format!("{rate:.0} events/s (floor {floor:.0})")),
    )
}

pub fn latency(offered_per_sec: u64, seconds: u64) -> Outcome {
    let ceiling_ms = env_or("SLATEFLOW_MAX_P99_MS", 100.0);
    let cfg = example4(FlushPolicy::default()).with_runtime(|r| r.workers_per_node = 4);
    let events = (offered_per_sec * seconds) as usize;
    let (input, _) = checkins(events, 22);
    let opts = ClusterOptions {
        record: false,
        track_latency: true,
        ..Default::default()
    };
    let cluster = LocalCluster::start(&cfg, &builtin_registry(), opts).unwrap();
    let start = Instant::now();
    let gap = Duration::from_secs_f64(1.0 / offered_per_sec as f64);
    cluster.feed(ok_all(&input), |n| pace(start, gap, n)).unwrap();
    if !cluster.wait_quiescent(SETTLE) {
        return Outcome::fail("did not settle");
    }
    let mut lat = cluster.latencies_us();
    lat.sort_unstable();
    cluster.shutdown();
    if lat.is_empty() {
        return Outcome::fail("no latency samples");
    }
    let p99 = lat[(lat.len() * 99 / 100).min(lat.len() - 1)] as f64 / 1000.0;
    Outcome::new(
        p99 < ceiling_ms,
        format!(
            "p99 {p99:.2} ms at {offered_per_sec}/s over {} samples (ceiling {ceiling_ms} ms)",
            lat.len()
        ),
    )
}
