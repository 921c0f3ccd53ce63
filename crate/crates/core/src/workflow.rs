//! Workflow graph of map and update functions connected by named streams.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum FunctionKind {
    Map,
    Update,
}

/// Slate time-to-live.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Ttl {
    #[default]
    Forever,
    Millis(u64),
}

impl Ttl {
    /// Encoding used in store records: 0 means forever.
    pub fn as_record_millis(self) -> u64 {
        match self {
            Ttl::Forever => 0,
            Ttl::Millis(ms) => ms.max(1),
        }
    }

    pub fn from_record_millis(ms: u64) -> Ttl {
        if ms == 0 {
            Ttl::Forever
        } else {
            Ttl::Millis(ms)
        }
    }
}

/// When dirty slates of an updater are written to the durable store.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FlushPolicy {
    WriteThrough,
    Interval(u64),
    OnEvict,
}

impl Default for FlushPolicy {
    fn default() -> Self {
        FlushPolicy::Interval(1_000)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FunctionDef {
    pub name: String,
    pub kind: FunctionKind,
    pub subscriptions: BTreeSet<String>,
    pub ttl: Option<Ttl>,
    pub flush_policy: Option<FlushPolicy>,
    /// Registered implementation to instantiate; defaults to `name`.
    pub implementation: String,
    /// Free-form parameters handed to the implementation's constructor.
    pub params: BTreeMap<String, String>,
}

impl FunctionDef {
    pub fn map(name: &str, subscriptions: &[&str]) -> Self {
        Self::new(name, FunctionKind::Map, subscriptions)
    }

    pub fn update(name: &str, subscriptions: &[&str]) -> Self {
        Self::new(name, FunctionKind::Update, subscriptions)
    }

    fn new(name: &str, kind: FunctionKind, subscriptions: &[&str]) -> Self {
        Self {
            name: name.to_string(),
            kind,
            subscriptions: subscriptions.iter().map(|s| s.to_string()).collect(),
            ttl: None,
            flush_policy: None,
            implementation: name.to_string(),
            params: BTreeMap::new(),
        }
    }

    pub fn with_impl(mut self, implementation: &str) -> Self {
        self.implementation = implementation.to_string();
        self
    }

    pub fn with_ttl(mut self, ttl: Ttl) -> Self {
        self.ttl = Some(ttl);
        self
    }

    pub fn with_flush(mut self, policy: FlushPolicy) -> Self {
        self.flush_policy = Some(policy);
        self
    }

    pub fn with_param(mut self, key: &str, value: &str) -> Self {
        self.params.insert(key.to_string(), value.to_string());
        self
    }

    pub fn param(&self, key: &str) -> Option<&str> {
        self.params.get(key).map(String::as_str)
    }

    pub fn is_update(&self) -> bool {
        self.kind == FunctionKind::Update
    }

    pub fn effective_ttl(&self) -> Ttl {
        self.ttl.unwrap_or_default()
    }

    pub fn effective_flush(&self) -> FlushPolicy {
        self.flush_policy.unwrap_or_default()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct WorkflowGraph {
    pub functions: Vec<FunctionDef>,
    pub external_inputs: BTreeSet<String>,
    pub declared_streams: BTreeSet<String>,
    pub output_streams: BTreeSet<String>,
}

impl WorkflowGraph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn external(mut self, stream: &str) -> Self {
        self.external_inputs.insert(stream.to_string());
        self
    }

    pub fn internal(mut self, stream: &str) -> Self {
        self.declared_streams.insert(stream.to_string());
        self
    }

    pub fn output(mut self, stream: &str) -> Self {
        self.output_streams.insert(stream.to_string());
        self
    }

    pub fn function(mut self, def: FunctionDef) -> Self {
        self.functions.push(def);
        self
    }

    /// Any stream an operator may legally publish into.
    pub fn is_publishable(&self, stream: &str) -> bool {
        !self.external_inputs.contains(stream)
            && (self.declared_streams.contains(stream) || self.output_streams.contains(stream))
    }

    pub fn is_known_stream(&self, stream: &str) -> bool {
        self.external_inputs.contains(stream) || self.is_publishable(stream)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Violation {
    DuplicateName(String),
    DanglingSubscription {
        function: String,
        stream: String,
    },
    TtlOnMap(String),
    FlushOnMap(String),
    NoSubscriptions(String),
    ExternalAlsoInternal(String),
    /// Raised by policy validation for overflow targets and throttled streams.
    Policy {
        stream: String,
        reason: String,
    },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::DuplicateName(n) => write!(f, "duplicate name: {n}"),
            Violation::DanglingSubscription { function, stream } => {
                write!(
                    f,
                    "dangling subscription: {function} subscribes to undeclared stream {stream}"
                )
            }
            Violation::TtlOnMap(n) => write!(f, "ttl on map: {n}"),
            Violation::FlushOnMap(n) => write!(f, "flush policy on map: {n}"),
            Violation::NoSubscriptions(n) => write!(f, "no subscriptions: {n}"),
            Violation::ExternalAlsoInternal(s) => {
                write!(f, "stream {s} declared both external and internal")
            }
            Violation::Policy { stream, reason } => write!(f, "overflow policy on {stream}: {reason}"),
        }
    }
}

/// Collects every structural violation in `g`. An empty result means the
/// graph is well-defined.
pub fn validate_workflow(g: &WorkflowGraph) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut seen = BTreeSet::new();
    for f in &g.functions {
        if !seen.insert(f.name.as_str()) {
            out.push(Violation::DuplicateName(f.name.clone()));
        }
        if f.subscriptions.is_empty() {
            out.push(Violation::NoSubscriptions(f.name.clone()));
        }
        for s in &f.subscriptions {
            if !g.is_known_stream(s) {
                out.push(Violation::DanglingSubscription {
                    function: f.name.clone(),
                    stream: s.clone(),
                });
            }
        }
        if f.kind == FunctionKind::Map {
            if f.ttl.is_some() {
                out.push(Violation::TtlOnMap(f.name.clone()));
            }
            if f.flush_policy.is_some() {
                out.push(Violation::FlushOnMap(f.name.clone()));
            }
        }
    }
    for s in g
        .external_inputs
        .iter()
        .filter(|s| g.declared_streams.contains(*s) || g.output_streams.contains(*s))
    {
        out.push(Violation::ExternalAlsoInternal(s.clone()));
    }
    out
}

/// A validated workflow indexed for routing.
#[derive(Debug)]
pub struct Workflow {
    graph: WorkflowGraph,
    by_name: HashMap<String, usize>,
    subscribers: HashMap<String, Vec<usize>>,
}

impl Workflow {
    pub fn new(graph: WorkflowGraph) -> Result<Self> {
        let violations = validate_workflow(&graph);
        if !violations.is_empty() {
            return Err(Error::InvalidWorkflow(violations));
        }
        let by_name = graph
            .functions
            .iter()
            .enumerate()
            .map(|(i, f)| (f.name.clone(), i))
            .collect();
        let mut subscribers: HashMap<String, Vec<usize>> = HashMap::new();
        for (i, f) in graph.functions.iter().enumerate() {
            for s in &f.subscriptions {
                subscribers.entry(s.clone()).or_default().push(i);
            }
        }
        Ok(Self {
            graph,
            by_name,
            subscribers,
        })
    }

    pub fn graph(&self) -> &WorkflowGraph {
        &self.graph
    }

    pub fn functions(&self) -> &[FunctionDef] {
        &self.graph.functions
    }

    pub fn function(&self, idx: usize) -> &FunctionDef {
        &self.graph.functions[idx]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.by_name.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&FunctionDef> {
        self.index_of(name).map(|i| &self.graph.functions[i])
    }

    /// Function indices subscribed to `stream`, in declaration order.
    pub fn subscribers(&self, stream: &str) -> &[usize] {
        self.subscribers.get(stream).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn is_external(&self, stream: &str) -> bool {
        self.graph.external_inputs.contains(stream)
    }

    pub fn is_output(&self, stream: &str) -> bool {
        self.graph.output_streams.contains(stream)
    }

    /// Checks that an operator may publish into `stream`.
    pub fn check_publish(&self, stream: &str) -> Result<()> {
        if self.is_external(stream) {
            Err(Error::PublishToExternal(stream.to_string()))
        } else if !self.graph.is_publishable(stream) {
            Err(Error::UndeclaredStream(stream.to_string()))
        } else {
            Ok(())
        }
    }

    /// Streams that feed `stream`, transitively, through any function.
    ///
    /// Publishing edges are not part of the graph (operators choose streams
    /// at runtime), so a function is conservatively treated as able to
    /// publish into any stream named in its `publish` parameter, or into
    /// every publishable stream when it declares none.
    pub fn upstream_of(&self, stream: &str) -> BTreeSet<String> {
        let mut seen = BTreeSet::new();
        let mut frontier = vec![stream.to_string()];
        while let Some(s) = frontier.pop() {
            for f in &self.graph.functions {
                if self.publishes_into(f, &s) {
                    for sub in &f.subscriptions {
                        if seen.insert(sub.clone()) {
                            frontier.push(sub.clone());
                        }
                    }
                }
            }
        }
        seen
    }

    fn publishes_into(&self, f: &FunctionDef, stream: &str) -> bool {
        match f.param("publish") {
            Some(list) => list.split(',').any(|s| s.trim() == stream),
            None => self.graph.is_publishable(stream),
        }
    }
}
