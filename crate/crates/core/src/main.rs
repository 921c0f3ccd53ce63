use std::io::Write;
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use clap::{Parser, Subcommand};
use serde::Serialize;

use slateflow::apps::builtin_registry;
use slateflow::clock::SystemClock;
use slateflow::cluster::tcp::{serve_master, serve_node, TcpControl, TcpTransport};
use slateflow::cluster::{LossReason, LostEventLog, Master};
use slateflow::config::{parse_config, AppConfig};
use slateflow::flow::Pacer;
use slateflow::harness::{ClusterOptions, LocalCluster};
use slateflow::oracle::{oracle_check, CheckMode};
use slateflow::runtime::{Node, NodeOptions, NodeParts};
use slateflow::sim::{sim_run, Trace, DEFAULT_MAX_STEPS};
use slateflow::source::{encode_key, read_source, FileSource};
use slateflow::store::durable::dump_dir;
use slateflow::store::{DurableStore, SlateStore};
use slateflow::workflow::Workflow;
use slateflow::Error;

const EXIT_DIFF: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_FATAL: u8 = 3;

#[derive(Parser)]
#[command(name = "slateflow", version, about = "Keyed stream processing with per-key slates")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a workflow. Without --node or --master every node runs in this
    /// process and the input file is replayed to completion.
    Run {
        config: PathBuf,
        /// Run only this node, talking TCP to its peers.
        #[arg(long, conflicts_with = "master")]
        node: Option<usize>,
        /// Run the membership master.
        #[arg(long)]
        master: bool,
        /// Source file to replay.
        #[arg(long)]
        input: Option<PathBuf>,
        /// Directory for the run trace.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Append lost events to this file.
        #[arg(long)]
        lost: Option<PathBuf>,
        /// Seconds to wait for the workflow to go idle.
        #[arg(long, default_value_t = 600)]
        idle_timeout: u64,
    },
    /// Produce the reference trace for an input file.
    Sim {
        config: PathBuf,
        input: PathBuf,
        #[arg(long, default_value = "reference")]
        out: PathBuf,
        #[arg(long, default_value_t = DEFAULT_MAX_STEPS)]
        max_steps: u64,
    },
    /// Compare a run trace against a reference trace.
    Check {
        reference: PathBuf,
        run: PathBuf,
        /// Require bit-identical ordering (single node, single worker).
        #[arg(long)]
        strict: bool,
    },
    /// Print every live slate in a store directory.
    DumpSlates {
        path: PathBuf,
        #[arg(long)]
        updater: Option<String>,
    },
    /// Replay an input in-process and crash one node part way through.
    Inject {
        config: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        kill_node: usize,
        #[arg(long)]
        after: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fetch one slate over HTTP.
    Fetch {
        /// host:port of any node's HTTP service.
        node: String,
        updater: String,
        key: String,
    },
}

enum Failure {
    Config(Error),
    Fatal(Error),
    Diff(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::ConfigSyntax { .. } | Error::InvalidWorkflow(_) | Error::UnknownFunction(_) => Failure::Config(e),
            other => Failure::Fatal(other),
        }
    }
}

impl From<slateflow::error::StoreError> for Failure {
    fn from(e: slateflow::error::StoreError) -> Self {
        Failure::Fatal(e.into())
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Fatal(e.into())
    }
}

fn load_config(path: &Path) -> Result<AppConfig, Failure> {
    let text = std::fs::read(path).map_err(|e| Failure::Config(e.into()))?;
    let cfg = parse_config(&text).map_err(Failure::Config)?;
    builtin_registry()
        .instantiate(&Workflow::new(cfg.workflow.clone()).map_err(Failure::Config)?)
        .map_err(Failure::Config)?;
    Ok(cfg)
}

#[derive(Serialize)]
struct Summary {
    injected: u64,
    processed: u64,
    lost: usize,
    lost_by_reason: Vec<(String, usize)>,
    epoch: u64,
    nodes: Vec<slateflow::runtime::NodeStats>,
}

fn summary(cluster: &LocalCluster, injected: u64) -> Summary {
    let reasons = [
        LossReason::SendFailed,
        LossReason::QueueDropped,
        LossReason::OperatorError,
        LossReason::StoreError,
        LossReason::NodeCrashed,
    ];
    Summary {
        injected,
        processed: cluster.processed(),
        lost: cluster.lost().len(),
        lost_by_reason: reasons
            .iter()
            .map(|r| (r.to_string(), cluster.lost().count(*r)))
            .filter(|(_, n)| *n > 0)
            .collect(),
        epoch: cluster.master().membership().epoch,
        nodes: cluster.stats(),
    }
}

fn print_json<T: Serialize>(v: &T) {
    let _ = writeln!(
        std::io::stdout(),
        "{}",
        serde_json::to_string_pretty(v).unwrap_or_default()
    );
}

fn run_in_process(
    cfg: &AppConfig,
    input: &Path,
    out: Option<&Path>,
    lost: Option<PathBuf>,
    idle: Duration,
    kill: Option<(usize, u64)>,
) -> Result<(), Failure> {
    if let Some((node, _)) = kill {
        if node >= cfg.cluster.nodes.len().max(1) {
            return Err(Failure::Config(Error::ConfigSyntax {
                line: 0,
                message: format!("no node {node} in the cluster"),
            }));
        }
    }
    let opts = ClusterOptions {
        lost_file: lost,
        ..Default::default()
    };
    let cluster = LocalCluster::start(cfg, &builtin_registry(), opts)?;
    let mut end = 0;
    let events = FileSource::open(input)?.inspect(|e| {
        if let Ok(e) = e {
            end = end.max(e.ts.millis);
        }
    });
    let injected = cluster.feed(events, |n| {
        if let Some((node, after)) = kill {
            if n == after {
                cluster.kill(node);
            }
        }
    })?;
    if !cluster.wait_quiescent(idle) || !cluster.end_of_stream(end, idle) {
        return Err(Failure::Fatal(Error::Io(std::io::Error::other(
            "workflow did not go idle",
        ))));
    }
    cluster.shutdown();
    if let Some(dir) = out {
        cluster.trace().write_dir(dir)?;
    }
    print_json(&summary(&cluster, injected));
    Ok(())
}

fn run_master(cfg: &AppConfig) -> Result<(), Failure> {
    let master = Arc::new(Master::new(cfg.cluster.nodes.clone()));
    let listener = TcpListener::bind(&cfg.cluster.master)?;
    let _server = serve_master(listener, master, Duration::from_millis(cfg.runtime.send_timeout_ms))?;
    tracing::info!(addr = %cfg.cluster.master, "master running");
    loop {
        thread::park();
    }
}

fn run_node(
    cfg: &AppConfig,
    id: usize,
    input: Option<&Path>,
    lost: Option<PathBuf>,
    idle: Duration,
) -> Result<(), Failure> {
    let addrs = cfg.cluster.nodes.clone();
    if id >= addrs.len() {
        return Err(Failure::Config(Error::ConfigSyntax {
            line: 0,
            message: format!("no node {id} in [cluster] nodes"),
        }));
    }
    let workflow = Arc::new(Workflow::new(cfg.workflow.clone())?);
    let timeout = Duration::from_millis(cfg.runtime.send_timeout_ms);
    let clock = Arc::new(SystemClock);
    let durable = Arc::new(match &cfg.store.path {
        Some(p) => DurableStore::open(p, cfg.store.replicas, cfg.store.consistency, &format!("node{id}"))?,
        None => DurableStore::in_memory(cfg.store.replicas, cfg.store.consistency),
    });
    let mut options = NodeOptions::new(id, addrs.clone(), cfg.runtime.clone());
    options.overflow = cfg.overflow.clone();
    let node = Node::new(NodeParts {
        options,
        operators: builtin_registry().instantiate(&workflow)?,
        store: Arc::new(SlateStore::new(
            &workflow,
            durable,
            cfg.runtime.cache_capacity,
            clock.clone(),
        )),
        workflow: workflow.clone(),
        transport: Arc::new(TcpTransport::new(addrs.clone(), timeout)),
        control: Arc::new(TcpControl::new(cfg.cluster.master.clone(), addrs.clone(), timeout)),
        lost: Arc::new(match lost {
            Some(p) => LostEventLog::with_file(&p)?,
            None => LostEventLog::new(),
        }),
        clock,
    });
    node.start();
    let _server = serve_node(TcpListener::bind(&addrs[id])?, node.clone(), addrs.clone())?;
    let _http = match cfg.cluster.http.get(id) {
        Some(addr) => Some(slateflow::http::serve(addr, node.clone())?),
        None => None,
    };
    if let Some(input) = input {
        let mut pacers: std::collections::HashMap<String, Pacer> = Default::default();
        for ev in FileSource::open(input)? {
            let ev = ev?;
            if let Some(gate) = node.gates().gate(&ev.sid) {
                pacers.entry(ev.sid.clone()).or_default().wait(gate);
            }
            node.inject(ev);
        }
        let deadline = std::time::Instant::now() + idle;
        while node.in_flight() > 0 && std::time::Instant::now() < deadline {
            thread::sleep(Duration::from_millis(10));
        }
        tracing::info!("input replayed");
    }
    loop {
        thread::park();
    }
}

fn execute(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Run {
            config,
            node,
            master,
            input,
            out,
            lost,
            idle_timeout,
        } => {
            let cfg = load_config(&config)?;
            let idle = Duration::from_secs(idle_timeout);
            if master {
                run_master(&cfg)
            } else if let Some(id) = node {
                run_node(&cfg, id, input.as_deref(), lost, idle)
            } else {
                let input = input.ok_or_else(|| {
                    Failure::Config(Error::ConfigSyntax {
                        line: 0,
                        message: "--input is required when running all nodes in one process".into(),
                    })
                })?;
                run_in_process(&cfg, &input, out.as_deref(), lost, idle, None)
            }
        }
        Command::Sim {
            config,
            input,
            out,
            max_steps,
        } => {
            let cfg = load_config(&config)?;
            let wf = Workflow::new(cfg.workflow.clone())?;
            let trace = sim_run(&wf, &builtin_registry(), &read_source(&input)?, max_steps)?;
            trace.write_dir(&out)?;
            println!(
                "{} slate updates written to {}",
                trace.slate_updates.len(),
                out.display()
            );
            Ok(())
        }
        Command::Check { reference, run, strict } => {
            let mode = if strict { CheckMode::Strict } else { CheckMode::Relaxed };
            let report = oracle_check(&Trace::read_dir(&reference)?, &Trace::read_dir(&run)?, mode);
            if report.passed() {
                println!("pass");
                Ok(())
            } else {
                Err(Failure::Diff(report.diffs.join("\n")))
            }
        }
        Command::DumpSlates { path, updater } => {
            let mut out = std::io::stdout().lock();
            for (sk, slate) in dump_dir(&path).map_err(Error::from)? {
                if updater.as_deref().is_some_and(|u| u != sk.updater) {
                    continue;
                }
                let body = slateflow::store::codec::decode(slate.codec, &slate.body).map_err(Error::from)?;
                let line = writeln!(
                    out,
                    "{}\t{}\t{}\t{}",
                    sk.updater,
                    encode_key(&sk.key),
                    slate.write_time,
                    body.escape_ascii()
                );
                if line.is_err() {
                    break;
                }
            }
            Ok(())
        }
        Command::Inject {
            config,
            input,
            kill_node,
            after,
            out,
        } => {
            let cfg = load_config(&config)?;
            run_in_process(
                &cfg,
                &input,
                out.as_deref(),
                None,
                Duration::from_secs(600),
                Some((kill_node, after)),
            )
        }
        Command::Fetch { node, updater, key } => {
            let (status, body) = slateflow::http::fetch(&node, &updater, key.as_bytes(), Duration::from_secs(5))?;
            match status {
                200 => {
                    println!("{}", String::from_utf8_lossy(&body));
                    Ok(())
                }
                404 => Err(Failure::Diff("not found".into())),
                _ => Err(Failure::Fatal(Error::Io(std::io::Error::other(format!(
                    "HTTP {status}: {}",
                    String::from_utf8_lossy(&body)
                ))))),
            }
        }
    }
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::from_default_env())
        .with_writer(std::io::stderr)
        .init();
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Diff(d)) => {
            eprintln!("{d}");
            ExitCode::from(EXIT_DIFF)
        }
        Err(Failure::Config(e)) => {
            eprintln!("config error: {e}");
            ExitCode::from(EXIT_CONFIG)
        }
        Err(Failure::Fatal(e)) => {
            eprintln!("fatal: {e}");
            ExitCode::from(EXIT_FATAL)
        }
    }
}
