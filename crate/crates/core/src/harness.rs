//! In-process clusters: N nodes over the local transport, one master, one
//! shared durable store. Used by the CLI's single-process mode and by the
//! test suites.

use std::collections::{BTreeSet, HashMap};
use std::path::PathBuf;
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use crate::clock::{Clock, SystemClock};
use crate::cluster::{LocalControl, LocalNet, LostEventLog, Master, NodeId};
use crate::config::AppConfig;
use crate::error::Result;
use crate::flow::Pacer;
use crate::model::Event;
use crate::operators::Registry;
use crate::runtime::{Node, NodeOptions, NodeParts, NodeStats, ProcessedTag};
use crate::sim::{end_of_stream_events, end_of_stream_updaters, Trace};
use crate::store::{DurableStore, SlateStore};
use crate::workflow::Workflow;

#[derive(Clone)]
pub struct ClusterOptions {
    pub record: bool,
    pub instrument_locks: bool,
    pub track_latency: bool,
    pub clock: Arc<dyn Clock>,
    /// Shared durable store; built from the config when absent.
    pub durable: Option<Arc<DurableStore>>,
    pub lost_file: Option<PathBuf>,
}

impl Default for ClusterOptions {
    fn default() -> Self {
        Self {
            record: true,
            instrument_locks: false,
            track_latency: false,
            clock: Arc::new(SystemClock),
            durable: None,
            lost_file: None,
        }
    }
}

pub struct LocalCluster {
    workflow: Arc<Workflow>,
    net: Arc<LocalNet>,
    control: Arc<LocalControl>,
    nodes: Vec<Arc<Node>>,
    lost: Arc<LostEventLog>,
    durable: Arc<DurableStore>,
    clock: Arc<dyn Clock>,
    eos_updaters: Vec<usize>,
}

impl LocalCluster {
    pub fn start(cfg: &AppConfig, registry: &Registry, opts: ClusterOptions) -> Result<Self> {
        cfg.validate()?;
        let workflow = Arc::new(Workflow::new(cfg.workflow.clone())?);
        let addrs = if cfg.cluster.nodes.is_empty() {
            vec!["local".to_string()]
        } else {
            cfg.cluster.nodes.clone()
        };
        let durable = match (opts.durable, &cfg.store.path) {
            (Some(d), _) => d,
            (None, Some(path)) => Arc::new(DurableStore::open(
                path,
                cfg.store.replicas,
                cfg.store.consistency,
                "local",
            )?),
            (None, None) => Arc::new(DurableStore::in_memory(cfg.store.replicas, cfg.store.consistency)),
        };
        let lost = Arc::new(match &opts.lost_file {
            Some(p) => LostEventLog::with_file(p)?,
            None => LostEventLog::new(),
        });
        let net = Arc::new(LocalNet::new(addrs.len()));
        let master = Arc::new(Master::new(addrs.clone()));
        let control = Arc::new(LocalControl::new(master, net.clone()));
        let eos_updaters = end_of_stream_updaters(&workflow, &registry.instantiate(&workflow)?);
        let mut nodes = Vec::new();
        for id in 0..addrs.len() {
            let mut options = NodeOptions::new(id, addrs.clone(), cfg.runtime.clone());
            options.overflow = cfg.overflow.clone();
            options.record = opts.record;
            options.instrument_locks = opts.instrument_locks;
            options.track_latency = opts.track_latency;
            let node = Node::new(NodeParts {
                options,
                operators: registry.instantiate(&workflow)?,
                store: Arc::new(SlateStore::new(
                    &workflow,
                    durable.clone(),
                    cfg.runtime.cache_capacity,
                    opts.clock.clone(),
                )),
                workflow: workflow.clone(),
                transport: net.clone(),
                control: control.clone(),
                lost: lost.clone(),
                clock: opts.clock.clone(),
            });
            net.register(id, node.clone());
            nodes.push(node);
        }
        for n in &nodes {
            n.start();
        }
        Ok(Self {
            workflow,
            net,
            control,
            nodes,
            lost,
            durable,
            clock: opts.clock,
            eos_updaters,
        })
    }

    pub fn workflow(&self) -> &Arc<Workflow> {
        &self.workflow
    }

    pub fn nodes(&self) -> &[Arc<Node>] {
        &self.nodes
    }

    pub fn node(&self, id: NodeId) -> &Arc<Node> {
        &self.nodes[id]
    }

    pub fn master(&self) -> &Arc<Master> {
        self.control.master()
    }

    pub fn net(&self) -> &Arc<LocalNet> {
        &self.net
    }

    pub fn lost(&self) -> &Arc<LostEventLog> {
        &self.lost
    }

    pub fn durable(&self) -> &Arc<DurableStore> {
        &self.durable
    }

    fn live(&self) -> impl Iterator<Item = &Arc<Node>> {
        self.nodes.iter().filter(|n| !n.is_killed())
    }

    /// The node sources inject through: the first live one.
    pub fn source_node(&self) -> &Arc<Node> {
        self.live().next().expect("at least one live node")
    }

    /// Replays `events` through the source node, honouring each stream's
    /// gate. `after_each` sees the running count.
    pub fn feed<I>(&self, events: I, mut after_each: impl FnMut(u64)) -> Result<u64>
    where
        I: IntoIterator<Item = Result<Event>>,
    {
        let mut pacers: HashMap<String, Pacer> = HashMap::new();
        let mut n = 0;
        for ev in events {
            let ev = ev?;
            let node = self.source_node().clone();
            if let Some(gate) = node.gates().gate(&ev.sid) {
                pacers.entry(ev.sid.clone()).or_default().wait(gate);
            }
            node.inject(ev);
            n += 1;
            after_each(n);
        }
        Ok(n)
    }

    pub fn is_quiescent(&self) -> bool {
        self.live().all(|n| n.in_flight() == 0)
    }

    /// Waits until no live node has work in flight. Returns false on
    /// timeout.
    pub fn wait_quiescent(&self, timeout: Duration) -> bool {
        let deadline = Instant::now() + timeout;
        let mut calm = 0;
        while Instant::now() < deadline {
            if self.is_quiescent() {
                calm += 1;
                if calm >= 3 {
                    return true;
                }
            } else {
                calm = 0;
            }
            thread::sleep(Duration::from_millis(1));
        }
        false
    }

    /// Delivers one end-of-stream event to every slate of each updater
    /// that asks for it, then waits for the effects to settle.
    pub fn end_of_stream(&self, end_millis: u64, timeout: Duration) -> bool {
        let now = self.clock.now_millis();
        let stored = self.durable.snapshot(now);
        for &u in &self.eos_updaters {
            let def = self.workflow.function(u);
            let mut keys: BTreeSet<Vec<u8>> = stored
                .iter()
                .filter(|(sk, _)| sk.updater == def.name)
                .map(|(sk, _)| sk.key.clone())
                .collect();
            for n in self.live() {
                keys.extend(
                    n.store()
                        .cached_entries()
                        .into_iter()
                        .filter(|(sk, _)| sk.updater == def.name)
                        .map(|(sk, _)| sk.key),
                );
            }
            let keys: Vec<Vec<u8>> = keys.into_iter().collect();
            for e in end_of_stream_events(def, &keys, end_millis) {
                self.source_node().inject_to(e, &def.name);
            }
        }
        self.wait_quiescent(timeout)
    }

    /// Crashes a node: it stops processing and becomes unreachable.
    pub fn kill(&self, id: NodeId) {
        self.nodes[id].kill();
        self.net.disconnect(id);
    }

    /// Merged run artifacts of every node. Slate updates are interleaved
    /// in the order they were applied.
    pub fn trace(&self) -> Trace {
        let mut t = Trace::default();
        let mut timed: Vec<_> = self
            .nodes
            .iter()
            .flat_map(|n| n.recorder().timed_slate_updates())
            .collect();
        timed.sort_by_key(|(at, _)| *at);
        t.slate_updates = timed.into_iter().map(|(_, u)| u).collect();
        for n in &self.nodes {
            for e in n.recorder().outputs() {
                t.outputs.entry(e.sid.clone()).or_default().push(e);
            }
        }
        t
    }

    pub fn processed_tags(&self) -> Vec<ProcessedTag> {
        self.nodes.iter().flat_map(|n| n.recorder().processed_tags()).collect()
    }

    pub fn latencies_us(&self) -> Vec<u64> {
        self.nodes.iter().flat_map(|n| n.recorder().take_latencies()).collect()
    }

    pub fn stats(&self) -> Vec<NodeStats> {
        self.nodes.iter().map(|n| n.stats()).collect()
    }

    pub fn processed(&self) -> u64 {
        self.nodes.iter().map(|n| n.stats().processed).sum()
    }

    /// Clean shutdown of every live node.
    pub fn shutdown(&self) {
        for n in self.live() {
            n.shutdown();
        }
    }
}

impl Drop for LocalCluster {
    fn drop(&mut self) {
        for n in &self.nodes {
            if !n.is_killed() {
                n.shutdown();
            }
            self.net.disconnect(n.id());
        }
    }
}
