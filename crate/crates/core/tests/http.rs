mod common;

use std::time::Duration;

use common::*;
use slateflow::apps::builtin_registry;
use slateflow::harness::{ClusterOptions, LocalCluster};
use slateflow::http::{fetch, get, serve};
use slateflow::workflow::FlushPolicy;

const T: Duration = Duration::from_secs(5);

fn cluster(nodes: usize) -> LocalCluster {
    let mut cfg = example4(FlushPolicy::WriteThrough);
    cfg.cluster.nodes = (0..nodes).map(|i| format!("n{i}:1")).collect();
    LocalCluster::start(&cfg, &builtin_registry(), ClusterOptions::default()).unwrap()
}

fn walmart(n: u64) -> Vec<slateflow::model::Event> {
    (0..n)
        .map(|i| {
            src(
                "S_1",
                1000 + i,
                0,
                &format!("u{i}"),
                "{\"venue\":\"Walmart Supercenter\"}",
            )
        })
        .collect()
}

#[test]
fn five_checkins_read_back_as_five() {
    let c = cluster(1);
    c.feed(ok_all(&walmart(5)), |_| {}).unwrap();
    assert!(c.wait_quiescent(T));
    let svc = serve("127.0.0.1:0", c.node(0).clone()).unwrap();
    assert_eq!(fetch(svc.addr(), "U1", b"Walmart", T).unwrap(), (200, b"5".to_vec()));
    assert_eq!(fetch(svc.addr(), "U1", b"Target", T).unwrap(), (404, Vec::new()));
    assert_eq!(fetch(svc.addr(), "M1", b"Walmart", T).unwrap().0, 404);
    assert_eq!(fetch(svc.addr(), "U9", b"Walmart", T).unwrap().0, 404);
    assert_eq!(get(&format!("http://{}/nowhere", svc.addr()), T).unwrap().0, 404);
}

#[test]
fn reserved_characters_in_keys_round_trip() {
    let c = cluster(1);
    let events = vec![src("S_1", 1, 0, "u", "{\"venue\":\"Sam's Club\"}")];
    c.feed(ok_all(&events), |_| {}).unwrap();
    assert!(c.wait_quiescent(T));
    let svc = serve("127.0.0.1:0", c.node(0).clone()).unwrap();
    assert_eq!(fetch(svc.addr(), "U1", b"Sam's Club", T).unwrap(), (200, b"1".to_vec()));
}

#[test]
fn every_node_answers_with_the_owners_body() {
    let c = cluster(3);
    c.feed(ok_all(&walmart(7)), |_| {}).unwrap();
    assert!(c.wait_quiescent(T));
    let services: Vec<_> = c
        .nodes()
        .iter()
        .map(|n| serve("127.0.0.1:0", n.clone()).unwrap())
        .collect();
    for svc in &services {
        assert_eq!(fetch(svc.addr(), "U1", b"Walmart", T).unwrap(), (200, b"7".to_vec()));
    }
}

#[test]
fn status_reports_node_stats() {
    let c = cluster(1);
    c.feed(ok_all(&walmart(3)), |_| {}).unwrap();
    assert!(c.wait_quiescent(T));
    let svc = serve("127.0.0.1:0", c.node(0).clone()).unwrap();
    let (status, body) = get(&format!("http://{}/status", svc.addr()), T).unwrap();
    assert_eq!(status, 200);
    let v: serde_json::Value = serde_json::from_slice(&body).unwrap();
    assert_eq!(v["processed"], 6);
    assert_eq!(v["epoch"], 0);
}

#[test]
fn unreachable_owner_is_a_bad_gateway() {
    let c = cluster(3);
    c.feed(ok_all(&walmart(2)), |_| {}).unwrap();
    assert!(c.wait_quiescent(T));
    let owner = c.node(0).ring().route(b"Walmart", "U1").unwrap();
    let asker = (0..3).find(|&n| n != owner).unwrap();
    c.kill(owner);
    let svc = serve("127.0.0.1:0", c.node(asker).clone()).unwrap();
    let (status, body) = fetch(svc.addr(), "U1", b"Walmart", T).unwrap();
    assert_eq!(status, 502);
    assert!(!body.is_empty());
}

#[test]
fn non_get_is_rejected() {
    let c = cluster(1);
    let svc = serve("127.0.0.1:0", c.node(0).clone()).unwrap();
    let resp = ureq::post(&format!("http://{}/status", svc.addr())).call();
    assert!(matches!(resp, Err(ureq::Error::Status(405, _))));
}
