//! Per-node HTTP service: live slate reads and node status.
//!
//! `GET /slates/{updater}/{percent-encoded key}` answers from the owner's
//! cache (forwarding internally when this node is not the owner).
//! `GET /status` returns the node's statistics as JSON.

use std::io::Read;
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::Duration;

use tiny_http::{Header, Method, Response, Server};

use crate::cluster::FetchKind;
use crate::error::{Error, Result};
use crate::runtime::Node;
use crate::source::{decode_key, encode_key};

const HANDLER_THREADS: usize = 4;

pub struct HttpService {
    server: Arc<Server>,
    threads: Vec<JoinHandle<()>>,
    addr: String,
}

impl HttpService {
    pub fn addr(&self) -> &str {
        &self.addr
    }

    pub fn stop(mut self) {
        self.halt();
    }

    fn halt(&mut self) {
        for _ in 0..self.threads.len() {
            self.server.unblock();
        }
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
    }
}

impl Drop for HttpService {
    fn drop(&mut self) {
        self.halt();
    }
}

pub fn serve(addr: &str, node: Arc<Node>) -> Result<HttpService> {
    let server = Arc::new(Server::http(addr).map_err(|e| Error::Io(std::io::Error::other(e.to_string())))?);
    let bound = server
        .server_addr()
        .to_ip()
        .map(|a| a.to_string())
        .unwrap_or_else(|| addr.to_string());
    let threads = (0..HANDLER_THREADS)
        .map(|i| {
            let (server, node) = (server.clone(), node.clone());
            thread::Builder::new()
                .name(format!("http-{i}"))
                .spawn(move || {
                    while let Ok(req) = server.recv() {
                        let (status, body, json) = route(&node, req.method(), req.url());
                        let ctype = if json {
                            "application/json"
                        } else {
                            "application/octet-stream"
                        };
                        let mut resp = Response::from_data(body).with_status_code(status);
                        if status == 200 {
                            resp = resp.with_header(Header::from_bytes("Content-Type", ctype).expect("static header"));
                        }
                        let _ = req.respond(resp);
                    }
                })
                .expect("spawn http handler")
        })
        .collect();
    tracing::info!(addr = %bound, node = node.id(), "http service listening");
    Ok(HttpService {
        server,
        threads,
        addr: bound,
    })
}

fn route(node: &Node, method: &Method, url: &str) -> (u16, Vec<u8>, bool) {
    if *method != Method::Get {
        return (405, Vec::new(), false);
    }
    let path = url.split('?').next().unwrap_or("");
    if path == "/status" {
        let body = serde_json::to_vec(&node.stats()).unwrap_or_default();
        return (200, body, true);
    }
    let Some(rest) = path.strip_prefix("/slates/") else {
        return (404, Vec::new(), false);
    };
    let Some((updater, key)) = rest.split_once('/') else {
        return (404, Vec::new(), false);
    };
    let updater = String::from_utf8_lossy(&decode_key(updater)).into_owned();
    if !node.workflow().get(&updater).is_some_and(|d| d.is_update()) {
        return (404, Vec::new(), false);
    }
    match node.fetch_slate(&updater, &decode_key(key)) {
        FetchKind::Found(body) => (200, body, false),
        FetchKind::NotFound => (404, Vec::new(), false),
        FetchKind::Error(reason) => (502, reason.into_bytes(), false),
        FetchKind::Request { .. } => (502, b"unexpected reply".to_vec(), false),
    }
}

/// Client side of the slate endpoint. Returns the status code and body.
pub fn fetch(base: &str, updater: &str, key: &[u8], timeout: Duration) -> Result<(u16, Vec<u8>)> {
    let base = if base.starts_with("http://") {
        base.to_string()
    } else {
        format!("http://{base}")
    };
    let url = format!(
        "{}/slates/{}/{}",
        base.trim_end_matches('/'),
        encode_key(updater.as_bytes()),
        encode_key(key)
    );
    get(&url, timeout)
}

pub fn get(url: &str, timeout: Duration) -> Result<(u16, Vec<u8>)> {
    let agent = ureq::AgentBuilder::new().timeout(timeout).build();
    let resp = match agent.get(url).call() {
        Ok(r) => r,
        Err(ureq::Error::Status(_, r)) => r,
        Err(e) => return Err(Error::Io(std::io::Error::other(e.to_string()))),
    };
    let status = resp.status();
    let mut body = Vec::new();
    resp.into_reader().read_to_end(&mut body)?;
    Ok((status, body))
}
