//! Events, timestamps and the deterministic event order.

use std::cmp::Ordering;
use std::fmt;

use serde::{Deserialize, Serialize};
use xxhash_rust::xxh3::Xxh3;

/// Global event time: wall-clock milliseconds plus a sub-sequence.
///
/// Ordered lexicographically on `(millis, seq)`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Timestamp {
    pub millis: u64,
    pub seq: u64,
}

impl Timestamp {
    pub const fn new(millis: u64, seq: u64) -> Self {
        Self { millis, seq }
    }

    /// Timestamp of the `position`-th event emitted while processing an
    /// event stamped `self`. Always strictly greater than `self`.
    pub fn derived(&self, position: usize) -> Timestamp {
        Timestamp {
            millis: self.millis,
            seq: self.seq + position as u64 + 1,
        }
    }
}

impl fmt::Display for Timestamp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{}", self.millis, self.seq)
    }
}

/// The unit of flow: `<sid, ts, key, value>` plus the producer used for
/// tie-breaking.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Event {
    pub sid: String,
    pub ts: Timestamp,
    pub key: Vec<u8>,
    pub value: Vec<u8>,
    pub producer: String,
}

impl Event {
    pub fn new(
        sid: impl Into<String>,
        ts: Timestamp,
        key: impl Into<Vec<u8>>,
        value: impl Into<Vec<u8>>,
        producer: impl Into<String>,
    ) -> Self {
        Self {
            sid: sid.into(),
            ts,
            key: key.into(),
            value: value.into(),
            producer: producer.into(),
        }
    }

    /// Builds the event that `emitter` publishes at `position` while
    /// processing `self`.
    ///
    /// The producer tag carries a digest of the input event so that two
    /// emissions landing on the same derived timestamp still compare
    /// unequal.
    pub fn emit(
        &self,
        emitter: &str,
        position: usize,
        sid: impl Into<String>,
        key: impl Into<Vec<u8>>,
        value: impl Into<Vec<u8>>,
    ) -> Event {
        Event {
            sid: sid.into(),
            ts: self.ts.derived(position),
            key: key.into(),
            value: value.into(),
            producer: format!("{emitter}:{:016x}", self.lineage_digest()),
        }
    }

    fn lineage_digest(&self) -> u64 {
        let mut h = Xxh3::new();
        h.update(self.sid.as_bytes());
        h.update(&[0]);
        h.update(&self.ts.millis.to_be_bytes());
        h.update(&self.ts.seq.to_be_bytes());
        h.update(&(self.key.len() as u64).to_be_bytes());
        h.update(&self.key);
        h.update(self.producer.as_bytes());
        h.digest()
    }

    pub fn key_str(&self) -> String {
        String::from_utf8_lossy(&self.key).into_owned()
    }
}

/// Value of the control event delivered to every live slate of an updater
/// that asks for it once the input is exhausted.
pub const END_OF_STREAM: &[u8] = b"\x00slateflow:eos";

pub fn is_end_of_stream(value: &[u8]) -> bool {
    value == END_OF_STREAM
}

/// Deterministic total order over events: timestamp, then stream id, then
/// key bytes, then producer.
pub fn compare_events(a: &Event, b: &Event) -> Ordering {
    a.ts.cmp(&b.ts)
        .then_with(|| a.sid.cmp(&b.sid))
        .then_with(|| a.key.cmp(&b.key))
        .then_with(|| a.producer.cmp(&b.producer))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ev(sid: &str, millis: u64, seq: u64, key: &[u8], producer: &str) -> Event {
        Event::new(sid, Timestamp::new(millis, seq), key, b"".to_vec(), producer)
    }

    #[test]
    fn earlier_checkin_sorts_first() {
        let hour = 3_600_000;
        let minute = 60_000;
        let e = ev("S_1", 21 * hour + 23 * minute, 0, b"a", "src");
        let f = ev("S_1", 21 * hour + 25 * minute, 0, b"a", "src");
        assert_eq!(compare_events(&e, &f), Ordering::Less);
        assert_eq!(compare_events(&f, &e), Ordering::Greater);
    }

    #[test]
    fn ties_break_on_sid_then_key() {
        let a = ev("S1", 5, 0, b"k", "p");
        let b = ev("S2", 5, 0, b"k", "p");
        assert_eq!(compare_events(&a, &b), Ordering::Less);

        let a = ev("S1", 5, 0, &[0x01], "p");
        let b = ev("S1", 5, 0, &[0x02], "p");
        assert_eq!(compare_events(&a, &b), Ordering::Less);
    }

    #[test]
    fn emitted_events_follow_their_input() {
        let input = ev("S_1", 100, 7, b"k", "src");
        for pos in 0..3 {
            let out = input.emit("M1", pos, "S_2", b"k".to_vec(), b"v".to_vec());
            assert_eq!(out.ts, Timestamp::new(100, 7 + pos as u64 + 1));
            assert_eq!(compare_events(&input, &out), Ordering::Less);
        }
    }

    #[test]
    fn colliding_derived_timestamps_stay_distinct() {
        // (100,1) at position 1 and (100,2) at position 0 both land on (100,3).
        let a = ev("S_1", 100, 1, b"k", "src").emit("M1", 1, "S_2", b"x".to_vec(), vec![]);
        let b = ev("S_1", 100, 2, b"k", "src").emit("M1", 0, "S_2", b"x".to_vec(), vec![]);
        assert_eq!(a.ts, b.ts);
        assert_ne!(compare_events(&a, &b), Ordering::Equal);
    }

    fn arb_event() -> impl Strategy<Value = Event> {
        (
            prop::sample::select(vec!["S1", "S2", "S3"]),
            0u64..4,
            0u64..4,
            prop::collection::vec(0u8..3, 1..3),
            prop::sample::select(vec!["a", "b"]),
        )
            .prop_map(|(sid, m, s, key, p)| ev(sid, m, s, &key, p))
    }

    proptest! {
        #[test]
        fn compare_is_a_strict_total_order(a in arb_event(), b in arb_event(), c in arb_event()) {
            // irreflexive on distinct identity, antisymmetric
            prop_assert_eq!(compare_events(&a, &a), Ordering::Equal);
            prop_assert_eq!(compare_events(&a, &b), compare_events(&b, &a).reverse());
            if compare_events(&a, &b) == Ordering::Equal {
                prop_assert_eq!(&a, &b);
            }
            if compare_events(&a, &b) == Ordering::Less && compare_events(&b, &c) == Ordering::Less {
                prop_assert_eq!(compare_events(&a, &c), Ordering::Less);
            }
        }
    }
}
