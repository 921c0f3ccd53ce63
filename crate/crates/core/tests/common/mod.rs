#![allow(dead_code)]

use rand::distributions::Distribution;
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use rand_distr::Zipf;

use slateflow::config::AppConfig;
use slateflow::model::{Event, Timestamp};
use slateflow::workflow::{FlushPolicy, FunctionDef, WorkflowGraph};

pub mod scenarios;

pub const DAY_MS: u64 = 86_400_000;
pub const MINUTE_MS: u64 = 60_000;

pub fn src(sid: &str, millis: u64, seq: u64, key: &str, value: &str) -> Event {
    Event::new(
        sid,
        Timestamp::new(millis, seq),
        key.as_bytes().to_vec(),
        value.as_bytes().to_vec(),
        format!("src:{sid}"),
    )
}

/// Check-in counting per retailer.
pub fn example4(flush: FlushPolicy) -> AppConfig {
    AppConfig::new(
        WorkflowGraph::new()
            .external("S_1")
            .internal("S_2")
            .function(
                FunctionDef::map("M1", &["S_1"])
                    .with_impl("retailer_map")
                    .with_param("publish", "S_2"),
            )
            .function(
                FunctionDef::update("U1", &["S_2"])
                    .with_impl("counter")
                    .with_flush(flush)
                    .with_param("publish", ""),
            ),
    )
}

/// Hot-topic detection.
pub fn example5(threshold: f64) -> AppConfig {
    AppConfig::new(
        WorkflowGraph::new()
            .external("S_1")
            .internal("S_2")
            .internal("S_3")
            .output("S_4")
            .function(
                FunctionDef::map("M1", &["S_1"])
                    .with_impl("topic_map")
                    .with_param("publish", "S_2")
                    .with_param(
                        "topics",
                        "earthquake=earthquake|quake, fire=fire|blaze, traffic=traffic|jam",
                    ),
            )
            .function(
                FunctionDef::update("U1", &["S_2"])
                    .with_impl("minute_counter")
                    .with_param("publish", "S_3"),
            )
            .function(
                FunctionDef::update("U2", &["S_3"])
                    .with_impl("hot_detector")
                    .with_param("publish", "S_4")
                    .with_param("threshold", &threshold.to_string()),
            ),
    )
}

pub const VENUES: &[(&str, Option<&str>)] = &[
    ("Walmart Supercenter", Some("Walmart")),
    ("Wal-Mart #1234", Some("Walmart")),
    ("walmart neighborhood market", Some("Walmart")),
    ("Sams Club #123", Some("Sam's Club")),
    ("Sam's Club", Some("Sam's Club")),
    ("Corner Cafe", None),
    ("Best Buy", None),
    ("City Library", None),
];

/// `n` check-ins, one per millisecond, keyed by user; returns the events
/// and the per-retailer tally.
pub fn checkins(n: usize, seed: u64) -> (Vec<Event>, std::collections::BTreeMap<String, u64>) {
    let mut rng = StdRng::seed_from_u64(seed);
    let mut tally = std::collections::BTreeMap::new();
    let events = (0..n)
        .map(|i| {
            let (venue, retailer) = VENUES[rng.gen_range(0..VENUES.len())];
            if let Some(r) = retailer {
                *tally.entry(r.to_string()).or_insert(0) += 1;
            }
            let value = format!("{{\"venue\":\"{venue}\",\"user\":{}}}", rng.gen_range(0..1000));
            src(
                "S_1",
                1_000_000 + i as u64,
                0,
                &format!("user{}", rng.gen_range(0..1000)),
                &value,
            )
        })
        .collect();
    (events, tally)
}

/// Check-ins that all hit a retailer, so every one reaches the counter.
pub fn retailer_checkins(n: usize, seed: u64) -> (Vec<Event>, std::collections::BTreeMap<String, u64>) {
    let mut rng = StdRng::seed_from_u64(seed);
    let mut tally = std::collections::BTreeMap::new();
    let retailers: Vec<_> = VENUES.iter().filter(|(_, r)| r.is_some()).collect();
    let events = (0..n)
        .map(|i| {
            let (venue, retailer) = retailers[rng.gen_range(0..retailers.len())];
            *tally.entry(retailer.unwrap().to_string()).or_insert(0) += 1;
            src(
                "S_1",
                1_000_000 + i as u64,
                0,
                &format!("user{i}"),
                &format!("{{\"venue\":\"{venue}\"}}"),
            )
        })
        .collect();
    (events, tally)
}

/// Tweets over several days. Events are keyed by minute of day so the
/// source preserves per-minute order.
pub fn tweets(days: u64, per_day: usize, seed: u64) -> Vec<Event> {
    let mut rng = StdRng::seed_from_u64(seed);
    let texts = [
        "earthquake downtown!",
        "felt a quake just now",
        "huge traffic jam on the bridge",
        "fire near the station",
        "lovely weather",
        "quake and fire reported",
        "nothing to see",
    ];
    let mut out = Vec::new();
    for d in 0..days {
        let mut stamps: Vec<u64> = (0..per_day)
            .map(|_| d * DAY_MS + rng.gen_range(0..30) * MINUTE_MS + rng.gen_range(0..MINUTE_MS))
            .collect();
        stamps.sort_unstable();
        for t in stamps {
            let text = texts[rng.gen_range(0..texts.len())];
            let minute = (t % DAY_MS) / MINUTE_MS;
            out.push(src("S_1", t, 0, &minute.to_string(), text));
        }
    }
    dedupe_seq(out)
}

/// Days 1..=10 carry 10 earthquake tweets in minute 14; day 11 carries 50.
pub fn hot_fixture() -> Vec<Event> {
    let mut out = Vec::new();
    for d in 0..11u64 {
        let n = if d == 10 { 50 } else { 10 };
        for i in 0..n {
            let t = d * DAY_MS + 14 * MINUTE_MS + i * 1000;
            out.push(src("S_1", t, 0, "14", "earthquake downtown!"));
        }
    }
    out
}

/// Zipf-distributed keys (exponent `s`) over `keys` distinct keys.
pub fn zipf_keys(n: usize, keys: u64, s: f64, seed: u64) -> Vec<Event> {
    let mut rng = StdRng::seed_from_u64(seed);
    let zipf = Zipf::new(keys, s).unwrap();
    (0..n)
        .map(|i| {
            let k = zipf.sample(&mut rng) as u64;
            src("S_1", 1_000_000 + i as u64 / 4, i as u64 % 4, &format!("k{k}"), "x")
        })
        .collect()
}

/// Assigns increasing seq values to events sharing a millisecond.
pub fn dedupe_seq(mut events: Vec<Event>) -> Vec<Event> {
    let mut last = None;
    let mut seq = 0;
    for e in &mut events {
        if last == Some(e.ts.millis) {
            seq += 1;
        } else {
            seq = 0;
            last = Some(e.ts.millis);
        }
        e.ts.seq = seq * 16;
    }
    events
}

pub fn ok_all(events: &[Event]) -> impl Iterator<Item = slateflow::Result<Event>> + '_ {
    events.iter().cloned().map(Ok)
}
