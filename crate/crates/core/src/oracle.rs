//! Compares an engine run against the reference trace.

use std::collections::BTreeMap;

use crate::runtime::SlateUpdate;
use crate::sim::Trace;
use crate::source::{encode_key, format_record};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CheckMode {
    /// Bit-identical slate-update sequence and output streams.
    Strict,
    /// Equal per-slate sequences of slate bodies, hence equal final
    /// slates, and equal output multisets.
    Relaxed,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Report {
    pub diffs: Vec<String>,
}

impl Report {
    pub fn passed(&self) -> bool {
        self.diffs.is_empty()
    }
}

fn describe(u: Option<&SlateUpdate>) -> String {
    match u {
        None => "<none>".into(),
        Some(u) => format!(
            "{}/{} @{} = {:?}",
            u.updater,
            encode_key(&u.key),
            u.ts,
            String::from_utf8_lossy(&u.body)
        ),
    }
}

fn first_divergence<T: PartialEq>(a: &[T], b: &[T]) -> Option<usize> {
    (0..a.len().max(b.len())).find(|&i| a.get(i) != b.get(i))
}

pub fn oracle_check(reference: &Trace, run: &Trace, mode: CheckMode) -> Report {
    let mut diffs = Vec::new();
    match mode {
        CheckMode::Strict => {
            if let Some(i) = first_divergence(&reference.slate_updates, &run.slate_updates) {
                diffs.push(format!(
                    "slate update #{i}: expected {}, got {}",
                    describe(reference.slate_updates.get(i)),
                    describe(run.slate_updates.get(i))
                ));
            }
        }
        CheckMode::Relaxed => {
            let per_key = |t: &Trace| {
                let mut m: BTreeMap<(String, Vec<u8>), Vec<SlateUpdate>> = BTreeMap::new();
                for u in &t.slate_updates {
                    m.entry((u.updater.clone(), u.key.clone())).or_default().push(u.clone());
                }
                m
            };
            let (want, got) = (per_key(reference), per_key(run));
            let empty = Vec::new();
            for k in want.keys().chain(got.keys().filter(|k| !want.contains_key(*k))) {
                let (a, b) = (want.get(k).unwrap_or(&empty), got.get(k).unwrap_or(&empty));
                let bodies = |v: &[SlateUpdate]| v.iter().map(|u| u.body.clone()).collect::<Vec<_>>();
                if let Some(i) = first_divergence(&bodies(a), &bodies(b)) {
                    diffs.push(format!(
                        "{}/{} update #{i}: expected {}, got {} ({} vs {} updates)",
                        k.0,
                        encode_key(&k.1),
                        describe(a.get(i)),
                        describe(b.get(i)),
                        a.len(),
                        b.len()
                    ));
                }
            }
        }
    }
    let streams: std::collections::BTreeSet<&String> = reference.outputs.keys().chain(run.outputs.keys()).collect();
    for s in streams {
        let lines = |t: &Trace| -> Vec<String> {
            t.outputs
                .get(s)
                .map(|v| v.iter().map(format_record).collect())
                .unwrap_or_default()
        };
        let (mut a, mut b) = (lines(reference), lines(run));
        if mode == CheckMode::Relaxed {
            a.sort();
            b.sort();
        }
        if let Some(i) = first_divergence(&a, &b) {
            diffs.push(format!(
                "stream {s} event #{i}: expected {:?}, got {:?} ({} vs {} events)",
                a.get(i),
                b.get(i),
                a.len(),
                b.len()
            ));
        }
    }
    Report { diffs }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Timestamp;

    fn up(key: &str, seq: u64, body: &str) -> SlateUpdate {
        SlateUpdate {
            updater: "U1".into(),
            key: key.as_bytes().to_vec(),
            ts: Timestamp::new(1, seq),
            body: body.as_bytes().to_vec(),
        }
    }

    #[test]
    fn relaxed_accepts_interleaving_strict_does_not() {
        let reference = Trace {
            slate_updates: vec![up("a", 1, "1"), up("b", 2, "1"), up("a", 3, "2")],
            ..Default::default()
        };
        let run = Trace {
            slate_updates: vec![up("b", 2, "1"), up("a", 1, "1"), up("a", 3, "2")],
            ..Default::default()
        };
        assert!(oracle_check(&reference, &run, CheckMode::Relaxed).passed());
        assert!(!oracle_check(&reference, &run, CheckMode::Strict).passed());
        assert!(oracle_check(&reference, &reference, CheckMode::Strict).passed());
    }

    #[test]
    fn relaxed_ignores_which_input_produced_a_body() {
        let reference = Trace {
            slate_updates: vec![up("a", 1, "1"), up("a", 2, "2")],
            ..Default::default()
        };
        let run = Trace {
            slate_updates: vec![up("a", 2, "1"), up("a", 1, "2")],
            ..Default::default()
        };
        assert!(oracle_check(&reference, &run, CheckMode::Relaxed).passed());
    }

    #[test]
    fn dropped_update_is_reported_per_key() {
        let reference = Trace {
            slate_updates: vec![up("a", 1, "1"), up("a", 3, "2"), up("b", 2, "1")],
            ..Default::default()
        };
        let run = Trace {
            slate_updates: vec![up("a", 1, "1"), up("b", 2, "1")],
            ..Default::default()
        };
        let r = oracle_check(&reference, &run, CheckMode::Relaxed);
        assert_eq!(r.diffs.len(), 1);
        assert!(r.diffs[0].starts_with("U1/a update #1"), "{:?}", r.diffs);
    }
}
