//! Application configuration file.
//!
//! The format is line-oriented `key = value` pairs grouped under section
//! headers: `[function <name>]`, `[cluster]`, `[store]`, `[streams]` and
//! `[runtime]`. `#` starts a comment.

use std::collections::BTreeMap;
use std::path::PathBuf;

use crate::error::{Error, Result};
use crate::flow::{validate_policies, OverflowPolicy};
use crate::store::Consistency;
use crate::workflow::{validate_workflow, FlushPolicy, FunctionDef, FunctionKind, Ttl, WorkflowGraph};

#[derive(Clone, Debug, PartialEq)]
pub struct ClusterConfig {
    /// Internal wire addresses; a node's id is its index in this list.
    pub nodes: Vec<String>,
    pub master: String,
    /// Optional HTTP listen addresses, parallel to `nodes`.
    pub http: Vec<String>,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        Self {
            nodes: vec!["127.0.0.1:7101".to_string()],
            master: "127.0.0.1:7100".to_string(),
            http: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StoreConfig {
    /// Directory for replica segment files; `None` keeps the store in memory.
    pub path: Option<PathBuf>,
    pub consistency: Consistency,
    pub replicas: usize,
}

impl Default for StoreConfig {
    fn default() -> Self {
        Self {
            path: None,
            consistency: Consistency::Quorum,
            replicas: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RuntimeConfig {
    pub queue_capacity: usize,
    pub workers_per_node: usize,
    pub cache_capacity: usize,
    pub flush_tick_ms: u64,
    /// Secondary queue is chosen when shorter than `threshold * primary`.
    pub dispatch_threshold: f64,
    /// Minimum primary length before diversion is considered.
    pub dispatch_floor: usize,
    pub send_timeout_ms: u64,
    /// Fraction of capacity at which throttled sources resume.
    pub low_water: f64,
}

impl Default for RuntimeConfig {
    fn default() -> Self {
        Self {
            queue_capacity: 10_000,
            workers_per_node: 8,
            cache_capacity: 100_000,
            flush_tick_ms: 1_000,
            dispatch_threshold: 0.5,
            dispatch_floor: 16,
            send_timeout_ms: 500,
            low_water: 0.5,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AppConfig {
    pub workflow: WorkflowGraph,
    pub cluster: ClusterConfig,
    pub store: StoreConfig,
    pub runtime: RuntimeConfig,
    /// Per-stream overflow policy; streams not listed use drop-and-log.
    pub overflow: BTreeMap<String, OverflowPolicy>,
}

impl AppConfig {
    pub fn new(workflow: WorkflowGraph) -> Self {
        Self {
            workflow,
            ..Default::default()
        }
    }

    pub fn overflow_policy(&self, stream: &str) -> OverflowPolicy {
        self.overflow.get(stream).cloned().unwrap_or_default()
    }

    pub fn with_runtime(mut self, f: impl FnOnce(&mut RuntimeConfig)) -> Self {
        f(&mut self.runtime);
        self
    }

    pub fn with_overflow(mut self, stream: &str, policy: OverflowPolicy) -> Self {
        self.overflow.insert(stream.to_string(), policy);
        self
    }

    /// Structural checks that do not depend on the workflow graph.
    fn check_bounds(&self) -> Result<()> {
        let bad = |message: &str| {
            Err(Error::ConfigSyntax {
                line: 0,
                message: message.to_string(),
            })
        };
        if self.runtime.queue_capacity == 0 {
            return bad("queue_capacity must be at least 1");
        }
        if self.runtime.workers_per_node == 0 {
            return bad("workers must be at least 1");
        }
        if self.cluster.nodes.is_empty() {
            return bad("cluster must list at least one node");
        }
        if !self.cluster.http.is_empty() && self.cluster.http.len() != self.cluster.nodes.len() {
            return bad("http addresses must match nodes one to one");
        }
        if self.store.replicas == 0 {
            return bad("replicas must be at least 1");
        }
        Ok(())
    }

    /// Runs every semantic check: bounds, workflow structure, overflow policies.
    pub fn validate(&self) -> Result<()> {
        self.check_bounds()?;
        let mut violations = validate_workflow(&self.workflow);
        if violations.is_empty() {
            violations.extend(validate_policies(&self.workflow, &self.overflow));
        }
        if violations.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidWorkflow(violations))
        }
    }
}

enum Section {
    None,
    Function(usize),
    Cluster,
    Store,
    Streams,
    Runtime,
}

fn syntax(line: usize, message: impl Into<String>) -> Error {
    Error::ConfigSyntax {
        line,
        message: message.into(),
    }
}

fn split_list(v: &str) -> Vec<String> {
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(str::to_string)
        .collect()
}

/// Parses durations such as `500ms`, `5s`, `2m`, `1h`, `86400s` into millis.
pub fn parse_duration_ms(v: &str) -> Option<u64> {
    let v = v.trim();
    let split = v.find(|c: char| !c.is_ascii_digit())?;
    let (num, unit) = v.split_at(split);
    let n: u64 = num.parse().ok()?;
    let factor = match unit {
        "ms" => 1,
        "s" => 1_000,
        "m" => 60_000,
        "h" => 3_600_000,
        "d" => 86_400_000,
        _ => return None,
    };
    n.checked_mul(factor)
}

fn parse_ttl(v: &str) -> Option<Ttl> {
    if v == "forever" {
        Some(Ttl::Forever)
    } else {
        parse_duration_ms(v).map(Ttl::Millis)
    }
}

fn parse_flush(v: &str) -> Option<FlushPolicy> {
    match v {
        "write_through" => Some(FlushPolicy::WriteThrough),
        "on_evict" => Some(FlushPolicy::OnEvict),
        _ => v
            .strip_prefix("interval:")
            .and_then(parse_duration_ms)
            .map(FlushPolicy::Interval),
    }
}

fn parse_num<T: std::str::FromStr>(line: usize, key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| syntax(line, format!("{key}: invalid number {v:?}")))
}

/// Parses and validates a configuration file.
pub fn parse_config(text: &[u8]) -> Result<AppConfig> {
    let text = std::str::from_utf8(text).map_err(|e| {
        let line = 1 + text[..e.valid_up_to()].iter().filter(|&&b| b == b'\n').count();
        syntax(line, "config is not valid UTF-8")
    })?;

    let mut cfg = AppConfig::default();
    let mut section = Section::None;
    let mut saw_content = false;

    for (i, raw) in text.lines().enumerate() {
        let lineno = i + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        saw_content = true;

        if let Some(header) = line.strip_prefix('[') {
            let header = header
                .strip_suffix(']')
                .ok_or_else(|| syntax(lineno, "unterminated section header"))?
                .trim();
            section = match header.split_whitespace().collect::<Vec<_>>().as_slice() {
                ["function", name] => {
                    cfg.workflow.functions.push(FunctionDef::map(name, &[]));
                    Section::Function(cfg.workflow.functions.len() - 1)
                }
                ["cluster"] => Section::Cluster,
                ["store"] => Section::Store,
                ["streams"] => Section::Streams,
                ["runtime"] => Section::Runtime,
                _ => return Err(syntax(lineno, format!("unknown section [{header}]"))),
            };
            continue;
        }

        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| syntax(lineno, "expected key = value"))?;
        let (key, value) = (key.trim(), value.trim());
        let bad_value = || syntax(lineno, format!("{key}: invalid value {value:?}"));

        match section {
            Section::None => return Err(syntax(lineno, "key outside of any section")),
            Section::Function(idx) => {
                let f = &mut cfg.workflow.functions[idx];
                match key {
                    "kind" => {
                        f.kind = match value {
                            "map" => FunctionKind::Map,
                            "update" => FunctionKind::Update,
                            _ => return Err(bad_value()),
                        }
                    }
                    "subscribe" => f.subscriptions = split_list(value).into_iter().collect(),
                    "ttl" => f.ttl = Some(parse_ttl(value).ok_or_else(bad_value)?),
                    "flush" => f.flush_policy = Some(parse_flush(value).ok_or_else(bad_value)?),
                    "impl" => f.implementation = value.to_string(),
                    _ => match key.strip_prefix("param.") {
                        Some(p) if !p.is_empty() => {
                            f.params.insert(p.to_string(), value.to_string());
                        }
                        _ => return Err(syntax(lineno, format!("unknown function key {key}"))),
                    },
                }
            }
            Section::Cluster => match key {
                "nodes" => cfg.cluster.nodes = split_list(value),
                "master" => cfg.cluster.master = value.to_string(),
                "http" => cfg.cluster.http = split_list(value),
                _ => return Err(syntax(lineno, format!("unknown cluster key {key}"))),
            },
            Section::Store => match key {
                "path" => cfg.store.path = Some(PathBuf::from(value)),
                "consistency" => {
                    cfg.store.consistency = match value {
                        "one" => Consistency::One,
                        "quorum" => Consistency::Quorum,
                        "all" => Consistency::All,
                        _ => return Err(bad_value()),
                    }
                }
                "replicas" => cfg.store.replicas = parse_num(lineno, key, value)?,
                _ => return Err(syntax(lineno, format!("unknown store key {key}"))),
            },
            Section::Streams => match key {
                "external" => cfg.workflow.external_inputs = split_list(value).into_iter().collect(),
                "internal" => cfg.workflow.declared_streams = split_list(value).into_iter().collect(),
                "outputs" => cfg.workflow.output_streams = split_list(value).into_iter().collect(),
                _ => match key.strip_prefix("overflow.") {
                    Some(stream) if !stream.is_empty() => {
                        let policy = OverflowPolicy::parse(value).ok_or_else(bad_value)?;
                        cfg.overflow.insert(stream.to_string(), policy);
                    }
                    _ => return Err(syntax(lineno, format!("unknown streams key {key}"))),
                },
            },
            Section::Runtime => {
                let rt = &mut cfg.runtime;
                match key {
                    "queue_capacity" => rt.queue_capacity = parse_num(lineno, key, value)?,
                    "workers" => rt.workers_per_node = parse_num(lineno, key, value)?,
                    "cache_capacity" => rt.cache_capacity = parse_num(lineno, key, value)?,
                    "flush_tick" => rt.flush_tick_ms = parse_duration_ms(value).ok_or_else(bad_value)?,
                    "send_timeout" => rt.send_timeout_ms = parse_duration_ms(value).ok_or_else(bad_value)?,
                    "dispatch_threshold" => {
                        let t: f64 = parse_num(lineno, key, value)?;
                        if !(t > 0.0 && t < 1.0) {
                            return Err(bad_value());
                        }
                        rt.dispatch_threshold = t;
                    }
                    "dispatch_floor" => rt.dispatch_floor = parse_num(lineno, key, value)?,
                    "low_water" => {
                        let t: f64 = parse_num(lineno, key, value)?;
                        if !(t > 0.0 && t < 1.0) {
                            return Err(bad_value());
                        }
                        rt.low_water = t;
                    }
                    _ => return Err(syntax(lineno, format!("unknown runtime key {key}"))),
                }
            }
        }
    }

    if !saw_content {
        return Err(syntax(1, "empty config"));
    }
    cfg.validate()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::workflow::Violation;

    const MINIMAL: &str = "\
# checkin counter, single node
[function M1]
kind = map
subscribe = S_1
impl = retailer_map
param.publish = S_2

[function U1]
kind = update
subscribe = S_2
impl = counter
ttl = forever
flush = write_through

[streams]
external = S_1
internal = S_2

[cluster]
nodes = 127.0.0.1:7001
master = 127.0.0.1:7000

[runtime]
queue_capacity = 100
workers = 1
";

    #[test]
    fn minimal_single_node_config() {
        let cfg = parse_config(MINIMAL.as_bytes()).unwrap();
        assert_eq!(cfg.workflow.functions.len(), 2);
        let u1 = &cfg.workflow.functions[1];
        assert_eq!(u1.kind, FunctionKind::Update);
        assert_eq!(u1.flush_policy, Some(FlushPolicy::WriteThrough));
        assert_eq!(u1.ttl, Some(Ttl::Forever));
        assert_eq!(cfg.workflow.functions[0].param("publish"), Some("S_2"));
        assert_eq!(cfg.cluster.nodes, vec!["127.0.0.1:7001"]);
        assert_eq!(cfg.runtime.queue_capacity, 100);
        assert_eq!(cfg.runtime.workers_per_node, 1);
    }

    #[test]
    fn empty_input_is_a_syntax_error() {
        assert!(matches!(parse_config(b""), Err(Error::ConfigSyntax { line: 1, .. })));
        assert!(matches!(
            parse_config(b"# nothing\n\n"),
            Err(Error::ConfigSyntax { .. })
        ));
    }

    #[test]
    fn undeclared_subscription_is_a_violation() {
        let text = MINIMAL.replace("subscribe = S_2", "subscribe = S9");
        match parse_config(text.as_bytes()) {
            Err(Error::InvalidWorkflow(v)) => assert_eq!(
                v,
                vec![Violation::DanglingSubscription {
                    function: "U1".into(),
                    stream: "S9".into()
                }]
            ),
            other => panic!("expected violation, got {other:?}"),
        }
    }

    #[test]
    fn syntax_errors_carry_line_numbers() {
        let text = "[runtime]\nworkers = 2\nqueue_capacity\n";
        match parse_config(text.as_bytes()) {
            Err(Error::ConfigSyntax { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
        let text = "[function M1]\nkind = sideways\n";
        assert!(matches!(
            parse_config(text.as_bytes()),
            Err(Error::ConfigSyntax { line: 2, .. })
        ));
    }

    #[test]
    fn durations_and_policies() {
        assert_eq!(parse_duration_ms("86400s"), Some(86_400_000));
        assert_eq!(parse_duration_ms("500ms"), Some(500));
        assert_eq!(parse_duration_ms("5"), None);
        assert_eq!(parse_flush("interval:5s"), Some(FlushPolicy::Interval(5_000)));
        assert_eq!(parse_ttl("forever"), Some(Ttl::Forever));
    }

    #[test]
    fn zero_workers_rejected() {
        let text = MINIMAL.replace("workers = 1", "workers = 0");
        assert!(parse_config(text.as_bytes()).is_err());
    }
}
