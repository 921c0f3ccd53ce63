//! Example applications: retailer check-in counting, hot-topic detection
//! and the split-key variant of the counter.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{Aggregator, CountCombiner, KeySplitter, PartialAggregate, SplitKeyMap, SplitStrategy};
use crate::model::{is_end_of_stream, Timestamp};
use crate::operators::{EmitContext, MapFunction, OpResult, Registry, UpdateFunction};
use crate::workflow::FunctionDef;

const DAY_MS: u64 = 86_400_000;
const MINUTE_MS: u64 = 60_000;

/// Minute of the day in `[0, 1439]`.
pub fn minute_of(ts: Timestamp) -> u32 {
    ((ts.millis % DAY_MS) / MINUTE_MS) as u32
}

pub fn day_of(ts: Timestamp) -> u64 {
    ts.millis / DAY_MS
}

fn param_or<'a>(def: &'a FunctionDef, key: &str, default: &'a str) -> &'a str {
    def.param(key).unwrap_or(default)
}

fn num_param<T: std::str::FromStr>(def: &FunctionDef, key: &str, default: T) -> Result<T> {
    match def.param(key) {
        None => Ok(default),
        Some(v) => v.parse().map_err(|_| Error::Operator {
            function: def.name.clone(),
            message: format!("param.{key}: invalid value {v:?}"),
        }),
    }
}

/// Maps check-ins to retailer names.
pub struct RetailerMap {
    publish: String,
    walmart: Regex,
    samsclub: Regex,
    undecodable: AtomicU64,
}

impl RetailerMap {
    pub fn new(publish: &str) -> Self {
        Self {
            publish: publish.to_string(),
            walmart: Regex::new(r"(?i)^\s*wal.*mart.*").expect("static regex"),
            samsclub: Regex::new(r"(?i)^\s*sam.*s\s*club\s*").expect("static regex"),
            undecodable: AtomicU64::new(0),
        }
    }

    /// The venue name: the `venue` field of a JSON check-in, or the whole
    /// text otherwise.
    pub fn venue(checkin: &str) -> String {
        #[derive(Deserialize)]
        struct Checkin {
            venue: String,
        }
        match serde_json::from_str::<Checkin>(checkin) {
            Ok(c) => c.venue,
            Err(_) => checkin.to_string(),
        }
    }

    pub fn retailer(&self, venue: &str) -> Option<&'static str> {
        if self.walmart.is_match(venue) {
            Some("Walmart")
        } else if self.samsclub.is_match(venue) {
            Some("Sam's Club")
        } else {
            None
        }
    }

    /// Check-ins that were not valid UTF-8.
    pub fn undecodable(&self) -> u64 {
        self.undecodable.load(Ordering::Relaxed)
    }
}

impl MapFunction for RetailerMap {
    fn map(&self, ctx: &mut EmitContext<'_>, _stream: &str, _key: &[u8], value: &[u8]) -> OpResult {
        let Ok(text) = std::str::from_utf8(value) else {
            self.undecodable.fetch_add(1, Ordering::Relaxed);
            return Ok(());
        };
        if let Some(r) = self.retailer(&Self::venue(text)) {
            ctx.publish(&self.publish, r.as_bytes().to_vec(), value.to_vec())?;
        }
        Ok(())
    }
}

/// Next counter slate: an absent or unparsable slate counts as 0.
pub fn counter_update(slate: Option<&[u8]>) -> Vec<u8> {
    let count = slate
        .and_then(|s| std::str::from_utf8(s).ok())
        .and_then(|s| s.parse::<i32>().ok())
        .unwrap_or(0);
    count.wrapping_add(1).to_string().into_bytes()
}

pub struct Counter;

impl UpdateFunction for Counter {
    fn update(&self, ctx: &mut EmitContext<'_>, _: &str, _: &[u8], _: &[u8], slate: Option<&[u8]>) -> OpResult {
        ctx.replace_slate(counter_update(slate))?;
        Ok(())
    }
}

/// Publishes each event unchanged, keyed by its value when `key_from_value`
/// is set.
pub struct Forward {
    publish: String,
    key_from_value: bool,
}

impl MapFunction for Forward {
    fn map(&self, ctx: &mut EmitContext<'_>, _: &str, key: &[u8], value: &[u8]) -> OpResult {
        let k = if self.key_from_value { value } else { key };
        ctx.publish(&self.publish, k.to_vec(), value.to_vec())?;
        Ok(())
    }
}

/// Keyword-table topic classifier. Each topic lists the words that signal
/// it; a tweet mentions a topic when any of its words appears as a token.
pub struct TopicMap {
    publish: String,
    table: Vec<(String, Vec<String>)>,
}

impl TopicMap {
    /// Parses `topic=word|word, topic2` (a bare topic is its own keyword).
    pub fn parse_table(spec: &str) -> Vec<(String, Vec<String>)> {
        spec.split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|entry| match entry.split_once('=') {
                Some((topic, words)) => (
                    topic.trim().to_string(),
                    words
                        .split('|')
                        .map(|w| w.trim().to_lowercase())
                        .filter(|w| !w.is_empty())
                        .collect(),
                ),
                None => (entry.to_string(), vec![entry.to_lowercase()]),
            })
            .collect()
    }

    pub fn new(publish: &str, table: Vec<(String, Vec<String>)>) -> Self {
        Self {
            publish: publish.to_string(),
            table,
        }
    }

    pub fn topics(&self, text: &str) -> Vec<&str> {
        let lower = text.to_lowercase();
        let tokens: Vec<&str> = lower
            .split(|c: char| !c.is_alphanumeric())
            .filter(|t| !t.is_empty())
            .collect();
        self.table
            .iter()
            .filter(|(_, words)| words.iter().any(|w| tokens.contains(&w.as_str())))
            .map(|(t, _)| t.as_str())
            .collect()
    }
}

impl MapFunction for TopicMap {
    fn map(&self, ctx: &mut EmitContext<'_>, _: &str, _: &[u8], value: &[u8]) -> OpResult {
        let text = String::from_utf8_lossy(value);
        let m = minute_of(ctx.input().ts);
        for topic in self.topics(&text) {
            ctx.publish(&self.publish, format!("{topic}.{m}").into_bytes(), value.to_vec())?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MinuteSlate {
    pub count: u64,
    pub first_seen: Option<u64>,
}

/// Counts events per key in one-minute windows that open at the first
/// event and close at the first event a minute or more later.
pub struct MinuteCounter {
    publish: String,
}

impl MinuteCounter {
    pub fn new(publish: &str) -> Self {
        Self {
            publish: publish.to_string(),
        }
    }
}

impl UpdateFunction for MinuteCounter {
    fn update(&self, ctx: &mut EmitContext<'_>, _: &str, key: &[u8], value: &[u8], slate: Option<&[u8]>) -> OpResult {
        let mut st: MinuteSlate = match slate {
            Some(b) => serde_json::from_slice(b)?,
            None => MinuteSlate::default(),
        };
        let now = ctx.input().ts.millis;
        let close = |ctx: &mut EmitContext<'_>, st: &MinuteSlate| -> OpResult {
            if st.count > 0 {
                ctx.publish(&self.publish, key.to_vec(), st.count.to_string().into_bytes())?;
            }
            Ok(())
        };
        if is_end_of_stream(value) {
            close(ctx, &st)?;
            st = MinuteSlate::default();
        } else {
            if st.first_seen.is_some_and(|f| now >= f + MINUTE_MS) {
                close(ctx, &st)?;
                st = MinuteSlate::default();
            }
            st.first_seen.get_or_insert(now);
            st.count += 1;
        }
        ctx.replace_slate(serde_json::to_vec(&st)?)?;
        Ok(())
    }

    fn wants_end_of_stream(&self) -> bool {
        true
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct HotSlate {
    pub total_count: u64,
    pub days: u64,
    pub first_day: Option<u64>,
}

/// `count / (total_count / days)`; a first observation has ratio 1.
pub fn hot_ratio(count: u64, st: &HotSlate) -> f64 {
    if st.days == 0 {
        return 1.0;
    }
    let avg = st.total_count as f64 / st.days as f64;
    if avg == 0.0 {
        if count > 0 {
            f64::INFINITY
        } else {
            0.0
        }
    } else {
        count as f64 / avg
    }
}

/// Flags per-minute counts that exceed the historical average for that
/// minute by more than `threshold` times.
pub struct HotDetector {
    publish: String,
    threshold: f64,
}

impl HotDetector {
    pub fn new(publish: &str, threshold: f64) -> Self {
        Self {
            publish: publish.to_string(),
            threshold,
        }
    }
}

impl UpdateFunction for HotDetector {
    fn update(&self, ctx: &mut EmitContext<'_>, _: &str, key: &[u8], value: &[u8], slate: Option<&[u8]>) -> OpResult {
        let mut st: HotSlate = match slate {
            Some(b) => serde_json::from_slice(b)?,
            None => HotSlate::default(),
        };
        let count: u64 = std::str::from_utf8(value)?.trim().parse()?;
        let ratio = hot_ratio(count, &st);
        if ratio > self.threshold {
            ctx.publish(&self.publish, key.to_vec(), format!("{ratio}").into_bytes())?;
        }
        let day = day_of(ctx.input().ts);
        let first = *st.first_day.get_or_insert(day);
        st.total_count += count;
        st.days = 1 + day.saturating_sub(first);
        ctx.replace_slate(serde_json::to_vec(&st)?)?;
        Ok(())
    }
}

/// Operators for every built-in implementation name.
///
/// | impl | kind | params |
/// |---|---|---|
/// | `retailer_map` | map | `publish` (S_2) |
/// | `forward` | map | `publish`, `key_from_value` |
/// | `split_map` | map | `publish`, `fanout`, `strategy` (round_robin, hash), `hot_keys`, `key_from_value` |
/// | `topic_map` | map | `publish` (S_2), `topics` |
/// | `counter`, `approx_counter` | update | |
/// | `minute_counter` | update | `publish` (S_3) |
/// | `hot_detector` | update | `publish` (S_4), `threshold` (4) |
/// | `partial_counter` | update | `publish`, `fanout`, `every_events` (100), `every_ms` (1000) |
/// | `aggregator` | update | |
pub fn builtin_registry() -> Registry {
    let mut r = Registry::new();
    r.register_map("retailer_map", |d| {
        Ok(Arc::new(RetailerMap::new(param_or(d, "publish", "S_2"))))
    });
    r.register_map("forward", |d| Ok(Arc::new(forward(d)?)));
    r.register_map("split_map", |d| {
        let strategy = match param_or(d, "strategy", "round_robin") {
            "round_robin" => SplitStrategy::RoundRobin,
            "hash" => SplitStrategy::ValueHash,
            other => {
                return Err(Error::Operator {
                    function: d.name.clone(),
                    message: format!("unknown split strategy {other}"),
                })
            }
        };
        let splitter = KeySplitter::new(num_param(d, "fanout", 2usize)?, strategy)?;
        let hot = d
            .param("hot_keys")
            .map(|v| v.split(',').map(|k| k.trim().as_bytes().to_vec()).collect());
        Ok(Arc::new(SplitKeyMap::new(Arc::new(forward(d)?), splitter, hot)))
    });
    r.register_map("topic_map", |d| {
        Ok(Arc::new(TopicMap::new(
            param_or(d, "publish", "S_2"),
            TopicMap::parse_table(param_or(d, "topics", "")),
        )))
    });
    r.register_update("counter", |_| Ok(Arc::new(Counter)));
    r.register_update("approx_counter", |_| Ok(Arc::new(Counter)));
    r.register_update("minute_counter", |d| {
        Ok(Arc::new(MinuteCounter::new(param_or(d, "publish", "S_3"))))
    });
    r.register_update("hot_detector", |d| {
        Ok(Arc::new(HotDetector::new(
            param_or(d, "publish", "S_4"),
            num_param(d, "threshold", 4.0)?,
        )))
    });
    r.register_update("partial_counter", |d| {
        Ok(Arc::new(PartialAggregate::new(
            CountCombiner,
            param_or(d, "publish", "S_3"),
            num_param(d, "fanout", 2usize)?,
            num_param(d, "every_events", 100u64)?,
            num_param(d, "every_ms", 1_000u64)?,
        )?))
    });
    r.register_update("aggregator", |_| Ok(Arc::new(Aggregator::new(CountCombiner))));
    r
}

fn forward(d: &FunctionDef) -> Result<Forward> {
    Ok(Forward {
        publish: param_or(d, "publish", "S_2").to_string(),
        key_from_value: num_param(d, "key_from_value", false)?,
    })
}
