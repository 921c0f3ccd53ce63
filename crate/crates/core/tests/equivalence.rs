mod common;

use std::time::Duration;

use common::*;
use slateflow::apps::builtin_registry;
use slateflow::harness::{ClusterOptions, LocalCluster};
use slateflow::oracle::{oracle_check, CheckMode};
use slateflow::sim::{sim_run, DEFAULT_MAX_STEPS};
use slateflow::workflow::{FlushPolicy, Workflow};

fn run_engine(
    cfg: &slateflow::config::AppConfig,
    input: &[slateflow::model::Event],
    end_of_stream: bool,
) -> slateflow::sim::Trace {
    let cluster = LocalCluster::start(cfg, &builtin_registry(), ClusterOptions::default()).unwrap();
    cluster.feed(ok_all(input), |_| {}).unwrap();
    assert!(cluster.wait_quiescent(Duration::from_secs(30)));
    if end_of_stream {
        let end = input.iter().map(|e| e.ts.millis).max().unwrap_or(0);
        assert!(cluster.end_of_stream(end, Duration::from_secs(30)));
    }
    assert!(
        cluster.lost().is_empty(),
        "lost: {:?}",
        cluster.lost().entries().first()
    );
    let t = cluster.trace();
    cluster.shutdown();
    t
}

#[test]
fn counter_strict_single_worker() {
    let cfg = example4(FlushPolicy::WriteThrough).with_runtime(|r| {
        r.workers_per_node = 1;
        r.queue_capacity = 1 << 20;
    });
    let (input, tally) = checkins(2_000, 7);
    let wf = Workflow::new(cfg.workflow.clone()).unwrap();
    let reference = sim_run(&wf, &builtin_registry(), &input, DEFAULT_MAX_STEPS).unwrap();
    let run = run_engine(&cfg, &input, false);
    let report = oracle_check(&reference, &run, CheckMode::Strict);
    assert!(report.passed(), "{:?}", report.diffs);
    let finals = reference.final_slates();
    for (r, n) in tally {
        assert_eq!(finals[&("U1".to_string(), r.into_bytes())], n.to_string().into_bytes());
    }
}

#[test]
fn hot_topics_relaxed_four_workers() {
    let cfg = example5(2.0).with_runtime(|r| {
        r.workers_per_node = 4;
        r.queue_capacity = 1 << 20;
    });
    let input = tweets(5, 400, 3);
    let wf = Workflow::new(cfg.workflow.clone()).unwrap();
    let reference = sim_run(&wf, &builtin_registry(), &input, DEFAULT_MAX_STEPS).unwrap();
    assert!(!reference.outputs.is_empty());
    let run = run_engine(&cfg, &input, true);
    let report = oracle_check(&reference, &run, CheckMode::Relaxed);
    assert!(report.passed(), "{:?}", report.diffs);
}
