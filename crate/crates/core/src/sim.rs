//! Single-threaded reference execution: every event, external or emitted,
//! goes through one priority queue ordered by the global event order.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;

use crate::error::{Error, Result};
use crate::model::{compare_events, Event, Timestamp, END_OF_STREAM};
use crate::operators::{invoke, Operator, Registry};
use crate::runtime::SlateUpdate;
use crate::source::{decode_key, encode_key, format_record, parse_record};
use crate::workflow::{FunctionDef, Workflow};

pub const DEFAULT_MAX_STEPS: u64 = 50_000_000;

/// Sequence numbers of end-of-stream events start here so they sort after
/// anything a source can produce at the same millisecond.
const EOS_SEQ_BASE: u64 = 1 << 48;

/// Slate updates in application order plus the events of every output
/// stream.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Trace {
    pub slate_updates: Vec<SlateUpdate>,
    pub outputs: BTreeMap<String, Vec<Event>>,
}

impl Trace {
    /// Last body written for every slate.
    pub fn final_slates(&self) -> BTreeMap<(String, Vec<u8>), Vec<u8>> {
        self.slate_updates
            .iter()
            .map(|u| ((u.updater.clone(), u.key.clone()), u.body.clone()))
            .collect()
    }

    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir.join("streams"))?;
        let mut w = std::io::BufWriter::new(fs::File::create(dir.join("slate_updates.tsv"))?);
        for u in &self.slate_updates {
            writeln!(
                w,
                "{}\t{}\t{}\t{}\t{}",
                u.updater,
                encode_key(&u.key),
                u.ts.millis,
                u.ts.seq,
                STANDARD.encode(&u.body)
            )?;
        }
        w.flush()?;
        for (stream, events) in &self.outputs {
            let mut w = std::io::BufWriter::new(fs::File::create(dir.join("streams").join(format!("{stream}.tsv")))?);
            for e in events {
                writeln!(w, "{}", format_record(e))?;
            }
            w.flush()?;
        }
        Ok(())
    }

    pub fn read_dir(dir: &Path) -> Result<Trace> {
        let path = dir.join("slate_updates.tsv");
        let bad = |line: usize, message: String| Error::Source {
            path: path.display().to_string(),
            line,
            message,
        };
        let mut slate_updates = Vec::new();
        for (i, line) in BufReader::new(fs::File::open(&path)?).lines().enumerate() {
            let line = line?;
            if line.is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 5 {
                return Err(bad(i + 1, "expected 5 fields".into()));
            }
            let num = |s: &str| s.parse::<u64>().map_err(|e| bad(i + 1, e.to_string()));
            slate_updates.push(SlateUpdate {
                updater: f[0].to_string(),
                key: decode_key(f[1]),
                ts: Timestamp::new(num(f[2])?, num(f[3])?),
                body: STANDARD.decode(f[4]).map_err(|e| bad(i + 1, e.to_string()))?,
            });
        }
        let mut outputs = BTreeMap::new();
        let streams = dir.join("streams");
        if streams.is_dir() {
            let mut entries: Vec<_> = fs::read_dir(&streams)?.collect::<std::io::Result<_>>()?;
            entries.sort_by_key(|e| e.file_name());
            for entry in entries {
                let p = entry.path();
                let Some(name) = p.file_stem().and_then(|s| s.to_str()).map(str::to_string) else {
                    continue;
                };
                let mut events = Vec::new();
                for (i, line) in BufReader::new(fs::File::open(&p)?).lines().enumerate() {
                    let line = line?;
                    if line.is_empty() {
                        continue;
                    }
                    let e = parse_record(&line, None).map_err(|m| Error::Source {
                        path: p.display().to_string(),
                        line: i + 1,
                        message: m,
                    })?;
                    events.push(e);
                }
                outputs.insert(name, events);
            }
        }
        Ok(Trace { slate_updates, outputs })
    }
}

/// End-of-stream control events for `keys` of `updater`, stamped after
/// `end_millis`.
pub fn end_of_stream_events(updater: &FunctionDef, keys: &[Vec<u8>], end_millis: u64) -> Vec<Event> {
    let sid = updater.subscriptions.iter().next().cloned().unwrap_or_default();
    keys.iter()
        .enumerate()
        .map(|(i, k)| {
            Event::new(
                sid.clone(),
                Timestamp::new(end_millis, EOS_SEQ_BASE + i as u64),
                k.clone(),
                END_OF_STREAM.to_vec(),
                "eos",
            )
        })
        .collect()
}

/// Updaters whose operators ask for end-of-stream events.
pub fn end_of_stream_updaters(workflow: &Workflow, ops: &[Operator]) -> Vec<usize> {
    ops.iter()
        .enumerate()
        .filter(|(_, op)| matches!(op, Operator::Update(u) if u.wants_end_of_stream()))
        .map(|(i, _)| i)
        .filter(|&i| workflow.function(i).is_update())
        .collect()
}

struct Pending {
    event: Event,
    dest: usize,
    order: u64,
}

impl PartialEq for Pending {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for Pending {}
impl PartialOrd for Pending {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Pending {
    // Reversed: BinaryHeap pops the greatest.
    fn cmp(&self, other: &Self) -> Ordering {
        compare_events(&other.event, &self.event)
            .then_with(|| other.dest.cmp(&self.dest))
            .then_with(|| other.order.cmp(&self.order))
    }
}

struct Sim<'a> {
    workflow: &'a Workflow,
    ops: Vec<Operator>,
    heap: BinaryHeap<Pending>,
    slates: BTreeMap<(usize, Vec<u8>), Vec<u8>>,
    trace: Trace,
    order: u64,
    steps: u64,
    max_steps: u64,
}

impl Sim<'_> {
    fn push(&mut self, event: Event) {
        for &dest in self.workflow.subscribers(&event.sid) {
            self.push_to(event.clone(), dest);
        }
    }

    fn push_to(&mut self, event: Event, dest: usize) {
        self.order += 1;
        self.heap.push(Pending {
            event,
            dest,
            order: self.order,
        });
    }

    fn drain(&mut self) -> Result<()> {
        while let Some(Pending { event, dest, .. }) = self.heap.pop() {
            self.steps += 1;
            if self.steps > self.max_steps {
                return Err(Error::StepLimit(self.max_steps));
            }
            let def = self.workflow.function(dest);
            let slot = (dest, event.key.clone());
            let slate = self.slates.get(&slot).cloned();
            let out = match invoke(&self.ops[dest], def, self.workflow, &event, slate.as_deref()) {
                Ok(o) => o,
                Err(e) => {
                    tracing::warn!(error = %e, "reference run skipped a failing invocation");
                    continue;
                }
            };
            if let Some(body) = out.slate_replacement {
                self.trace.slate_updates.push(SlateUpdate {
                    updater: def.name.clone(),
                    key: event.key.clone(),
                    ts: event.ts,
                    body: body.clone(),
                });
                self.slates.insert(slot, body);
            }
            for e in out.publishes {
                if self.workflow.is_output(&e.sid) {
                    self.trace.outputs.entry(e.sid.clone()).or_default().push(e.clone());
                }
                self.push(e);
            }
        }
        Ok(())
    }
}

/// Runs the workflow over `input` in one thread and returns the reference
/// trace. After the input is exhausted, updaters that ask for it get one
/// end-of-stream event per slate.
pub fn sim_run(workflow: &Workflow, registry: &Registry, input: &[Event], max_steps: u64) -> Result<Trace> {
    let mut sim = Sim {
        workflow,
        ops: registry.instantiate(workflow)?,
        heap: BinaryHeap::new(),
        slates: BTreeMap::new(),
        trace: Trace::default(),
        order: 0,
        steps: 0,
        max_steps,
    };
    for e in input {
        sim.push(e.clone());
    }
    sim.drain()?;
    let end = input.iter().map(|e| e.ts.millis).max().unwrap_or(0);
    for u in end_of_stream_updaters(workflow, &sim.ops) {
        let keys: Vec<Vec<u8>> = sim
            .slates
            .keys()
            .filter(|(f, _)| *f == u)
            .map(|(_, k)| k.clone())
            .collect();
        for e in end_of_stream_events(workflow.function(u), &keys, end) {
            sim.push_to(e, u);
        }
    }
    sim.drain()?;
    Ok(sim.trace)
}
