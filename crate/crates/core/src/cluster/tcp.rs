//! TCP transport: one persistent outbound connection per peer for events,
//! short-lived connections for slate-fetch forwarding and control traffic.

use std::collections::{BTreeSet, HashMap};
use std::io::{BufReader, BufWriter};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::Duration;

use parking_lot::Mutex;

use super::wire::{FetchKind, Message};
use super::{ControlPlane, Inbox, Master, NodeId, SendError, Transport};
use crate::error::{Error, Result};
use crate::model::Event;

fn resolve(addr: &str) -> std::io::Result<SocketAddr> {
    addr.to_socket_addrs()?
        .next()
        .ok_or_else(|| std::io::Error::new(std::io::ErrorKind::NotFound, format!("cannot resolve {addr}")))
}

fn connect(addr: &str, timeout: Duration) -> std::io::Result<TcpStream> {
    let stream = TcpStream::connect_timeout(&resolve(addr)?, timeout)?;
    stream.set_write_timeout(Some(timeout))?;
    stream.set_read_timeout(Some(timeout))?;
    stream.set_nodelay(true)?;
    Ok(stream)
}

pub struct TcpTransport {
    addrs: Vec<String>,
    conns: Vec<Mutex<Option<BufWriter<TcpStream>>>>,
    timeout: Duration,
    next_request: AtomicU64,
}

impl TcpTransport {
    pub fn new(addrs: Vec<String>, timeout: Duration) -> Self {
        let conns = addrs.iter().map(|_| Mutex::new(None)).collect();
        Self {
            addrs,
            conns,
            timeout,
            next_request: AtomicU64::new(1),
        }
    }

    fn fail(&self, node: NodeId, e: impl ToString) -> SendError {
        SendError {
            node,
            reason: e.to_string(),
        }
    }
}

impl Transport for TcpTransport {
    fn send_event(&self, to: NodeId, event: &Event, dest: &str) -> Result<(), SendError> {
        let frame = Message::Event {
            event: event.clone(),
            dest: dest.to_string(),
        }
        .encode()
        .map_err(|e| self.fail(to, e))?;
        let mut slot = self.conns[to].lock();
        if slot.is_none() {
            let stream = connect(&self.addrs[to], self.timeout).map_err(|e| self.fail(to, e))?;
            *slot = Some(BufWriter::new(stream));
        }
        let w = slot.as_mut().expect("connection just established");
        let res = std::io::Write::write_all(w, &frame).and_then(|_| std::io::Write::flush(w));
        if let Err(e) = res {
            *slot = None;
            return Err(self.fail(to, e));
        }
        Ok(())
    }

    fn fetch_slate(&self, to: NodeId, updater: &str, key: &[u8]) -> Result<FetchKind, SendError> {
        let request_id = self.next_request.fetch_add(1, Ordering::Relaxed);
        let mut stream = connect(&self.addrs[to], self.timeout).map_err(|e| self.fail(to, e))?;
        Message::SlateFetch {
            request_id,
            kind: FetchKind::Request {
                updater: updater.to_string(),
                key: key.to_vec(),
            },
        }
        .write_to(&mut stream)
        .map_err(|e| self.fail(to, e))?;
        match Message::read_from(&mut BufReader::new(stream)) {
            Ok(Some(Message::SlateFetch { request_id: id, kind })) if id == request_id => Ok(kind),
            Ok(other) => Err(self.fail(to, format!("unexpected reply {other:?}"))),
            Err(e) => Err(self.fail(to, e)),
        }
    }
}

/// A background accept loop. Stopping it also severs every accepted
/// connection, so peers see the server as gone.
pub struct Server {
    pub local_addr: SocketAddr,
    stop: Arc<AtomicBool>,
    conns: Conns,
    handle: Option<JoinHandle<()>>,
}

type Conns = Arc<Mutex<HashMap<u64, TcpStream>>>;

/// Held by a connection handler; unregisters the connection when dropped.
struct ConnGuard {
    id: u64,
    conns: Conns,
}

impl Drop for ConnGuard {
    fn drop(&mut self) {
        self.conns.lock().remove(&self.id);
    }
}

impl Server {
    pub fn stop(mut self) {
        self.shutdown();
    }

    fn shutdown(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
        for (_, c) in self.conns.lock().drain() {
            let _ = c.shutdown(Shutdown::Both);
        }
    }
}

impl Drop for Server {
    fn drop(&mut self) {
        self.shutdown();
    }
}

fn accept_loop(
    listener: TcpListener,
    stop: Arc<AtomicBool>,
    on_conn: impl Fn(TcpStream, ConnGuard) + Send + 'static,
) -> Result<Server> {
    listener.set_nonblocking(true)?;
    let local_addr = listener.local_addr()?;
    let stop2 = stop.clone();
    let conns: Conns = Arc::new(Mutex::new(HashMap::new()));
    let conns2 = conns.clone();
    let handle = thread::Builder::new()
        .name(format!("accept-{local_addr}"))
        .spawn(move || {
            let mut next_id = 0u64;
            while !stop2.load(Ordering::SeqCst) {
                match listener.accept() {
                    Ok((stream, _)) => {
                        let _ = stream.set_nonblocking(false);
                        let _ = stream.set_nodelay(true);
                        next_id += 1;
                        if let Ok(c) = stream.try_clone() {
                            conns2.lock().insert(next_id, c);
                        }
                        on_conn(
                            stream,
                            ConnGuard {
                                id: next_id,
                                conns: conns2.clone(),
                            },
                        );
                    }
                    Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => {
                        thread::sleep(Duration::from_millis(5));
                    }
                    Err(e) => {
                        tracing::warn!(error = %e, "accept failed");
                        thread::sleep(Duration::from_millis(50));
                    }
                }
            }
        })?;
    Ok(Server {
        local_addr,
        stop,
        conns,
        handle: Some(handle),
    })
}

/// Serves the internal protocol for one node: one receiver thread per
/// inbound connection, feeding the node's inbox.
pub fn serve_node(listener: TcpListener, inbox: Arc<dyn Inbox>, addrs: Vec<String>) -> Result<Server> {
    let stop = Arc::new(AtomicBool::new(false));
    let stop_conn = stop.clone();
    accept_loop(listener, stop, move |stream, guard| {
        let inbox = inbox.clone();
        let addrs = addrs.clone();
        let stop = stop_conn.clone();
        let _ = thread::Builder::new().name("receiver".into()).spawn(move || {
            let _guard = guard;
            if let Err(e) = receive(stream, inbox.as_ref(), &addrs, &stop) {
                tracing::debug!(error = %e, "receiver closed");
            }
        });
    })
}

fn receive(stream: TcpStream, inbox: &dyn Inbox, addrs: &[String], stop: &AtomicBool) -> Result<()> {
    let mut writer = stream.try_clone()?;
    let mut reader = BufReader::new(stream);
    loop {
        if stop.load(Ordering::SeqCst) {
            return Ok(());
        }
        let Some(msg) = Message::read_from(&mut reader)? else {
            return Ok(());
        };
        match msg {
            Message::Event { event, dest } => inbox.deliver(event, &dest),
            Message::Membership { epoch, nodes } => {
                let live: BTreeSet<NodeId> = nodes.iter().filter_map(|n| addrs.iter().position(|a| a == n)).collect();
                inbox.apply_membership(epoch, live);
            }
            Message::Throttle { paused, streams } => inbox.apply_throttle(&streams, paused),
            Message::SlateFetch {
                request_id,
                kind: FetchKind::Request { updater, key },
            } => {
                let kind = inbox.fetch_local(&updater, &key);
                Message::SlateFetch { request_id, kind }.write_to(&mut writer)?;
            }
            other => tracing::warn!(?other, "unexpected frame on node connection"),
        }
    }
}

/// Serves the master: failure reports become membership broadcasts, and
/// throttle requests are fanned out to every live node.
pub fn serve_master(listener: TcpListener, master: Arc<Master>, timeout: Duration) -> Result<Server> {
    let stop = Arc::new(AtomicBool::new(false));
    accept_loop(listener, stop, move |stream, guard| {
        let master = master.clone();
        let _ = thread::Builder::new().name("master-conn".into()).spawn(move || {
            let _guard = guard;
            let mut reader = BufReader::new(stream);
            while let Ok(Some(msg)) = Message::read_from(&mut reader) {
                match msg {
                    Message::FailureReport { node, .. } => {
                        let Some(id) = master.node_by_addr(&node) else {
                            tracing::warn!(%node, "failure report for unknown node");
                            continue;
                        };
                        if let Some(m) = master.mark_failed(id) {
                            let nodes: Vec<String> = m.live.iter().map(|&n| master.addrs()[n].clone()).collect();
                            broadcast(
                                &master,
                                &m.live,
                                &Message::Membership { epoch: m.epoch, nodes },
                                timeout,
                            );
                        }
                    }
                    Message::Throttle { .. } => {
                        let live = master.membership().live;
                        broadcast(&master, &live, &msg, timeout);
                    }
                    other => tracing::warn!(?other, "unexpected frame at master"),
                }
            }
        });
    })
}

fn broadcast(master: &Master, live: &BTreeSet<NodeId>, msg: &Message, timeout: Duration) {
    for &n in live {
        let addr = &master.addrs()[n];
        let sent = connect(addr, timeout)
            .map_err(Error::from)
            .and_then(|mut s| msg.write_to(&mut s));
        if let Err(e) = sent {
            tracing::warn!(%addr, error = %e, "broadcast failed");
        }
    }
}

/// Control plane that talks to a remote master. Failure reports are retried
/// with exponential backoff on a helper thread so the reporting worker is
/// never blocked.
pub struct TcpControl {
    master_addr: String,
    addrs: Vec<String>,
    timeout: Duration,
}

impl TcpControl {
    pub fn new(master_addr: String, addrs: Vec<String>, timeout: Duration) -> Self {
        Self {
            master_addr,
            addrs,
            timeout,
        }
    }

    fn send_with_retry(master: String, msg: Message, timeout: Duration, attempts: u32) {
        let mut backoff = Duration::from_millis(50);
        for attempt in 0..attempts {
            let sent = connect(&master, timeout)
                .map_err(Error::from)
                .and_then(|mut s| msg.write_to(&mut s));
            match sent {
                Ok(()) => return,
                Err(e) => {
                    tracing::warn!(attempt, error = %e, "master unreachable");
                    thread::sleep(backoff);
                    backoff = (backoff * 2).min(Duration::from_secs(2));
                }
            }
        }
    }
}

impl ControlPlane for TcpControl {
    fn report_failure(&self, observed_epoch: u64, node: NodeId) {
        let msg = Message::FailureReport {
            epoch: observed_epoch,
            node: self.addrs[node].clone(),
        };
        let (master, timeout) = (self.master_addr.clone(), self.timeout);
        let _ = thread::Builder::new()
            .name("report-failure".into())
            .spawn(move || Self::send_with_retry(master, msg, timeout, 8));
    }

    fn set_throttle(&self, streams: &[String], paused: bool) {
        let msg = Message::Throttle {
            paused,
            streams: streams.to_vec(),
        };
        Self::send_with_retry(self.master_addr.clone(), msg, self.timeout, 3);
    }
}
