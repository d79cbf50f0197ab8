//! Closed-loop load generator.
//!
//! Each logical loop keeps exactly one request outstanding: send, wait
//! for the matching response, verify it, repeat. HTTP/1.1 runs one
//! loop per connection; the multiplexed protocol can run several
//! concurrent loops over a shared connection, each with a fixed
//! stream id.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::sync::Arc;
use std::time::{Duration, Instant};

use tokio::io::{AsyncReadExt, AsyncWriteExt};
use tokio::net::TcpStream;
use tokio::sync::{oneshot, Mutex};

use xlb_core::codec::{self, Protocol, Request, Response};

use crate::report::{merge_reports, LoadReport};

#[derive(Debug, Clone)]
pub struct LoadOptions {
    pub target: SocketAddr,
    pub protocol: Protocol,
    pub connections: usize,
    /// Concurrent loops per connection; must be 1 for `Http11`.
    pub streams_per_conn: usize,
    /// Request body size in bytes.
    pub payload: usize,
    /// Stop after this long (exclusive with `requests_per_loop`).
    pub duration: Option<Duration>,
    /// Stop each loop after this many requests.
    pub requests_per_loop: Option<u64>,
    pub path: String,
    /// Per-request timeout before the loop counts an error and moves on.
    pub request_timeout: Duration,
}

impl LoadOptions {
    pub fn new(target: SocketAddr, protocol: Protocol) -> Self {
        LoadOptions {
            target,
            protocol,
            connections: 1,
            streams_per_conn: 1,
            payload: 0,
            duration: None,
            requests_per_loop: None,
            path: "/".to_string(),
            request_timeout: Duration::from_secs(30),
        }
    }

    pub fn connections(mut self, n: usize) -> Self {
        self.connections = n;
        self
    }

    pub fn streams(mut self, n: usize) -> Self {
        self.streams_per_conn = n;
        self
    }

    pub fn payload(mut self, bytes: usize) -> Self {
        self.payload = bytes;
        self
    }

    pub fn duration(mut self, d: Duration) -> Self {
        self.duration = Some(d);
        self
    }

    pub fn requests(mut self, per_loop: u64) -> Self {
        self.requests_per_loop = Some(per_loop);
        self
    }

    pub fn path(mut self, p: &str) -> Self {
        self.path = p.to_string();
        self
    }
}

#[derive(Default)]
struct LoopStats {
    sent: u64,
    ok: u64,
    errors: u64,
    affinity_violations: u64,
    latencies_us: Vec<u64>,
}

/// Nonce-prefixed body padded to the payload size, so an echoed body
/// identifies exactly which request it answers.
fn nonce_body(nonce: &str, payload: usize) -> Vec<u8> {
    let mut body = vec![b'x'; payload];
    let n = nonce.as_bytes();
    let k = n.len().min(payload);
    body[..k].copy_from_slice(&n[..k]);
    body
}

fn make_request(opts: &LoadOptions, nonce: &str) -> Request {
    Request::new("GET", &opts.path)
        .with_header("x-nonce", nonce)
        .with_body(nonce_body(nonce, opts.payload))
}

fn check_response(resp: &Response, nonce: &str, opts: &LoadOptions, stats: &mut LoopStats) {
    if resp.status != 200 {
        stats.errors += 1;
        return;
    }
    if resp.header("x-nonce") != Some(nonce) || resp.body != nonce_body(nonce, opts.payload) {
        stats.affinity_violations += 1;
        return;
    }
    stats.ok += 1;
}

/// Drive the configured load and aggregate a report. Connection
/// failures are counted as one error per affected loop.
pub async fn run_load(opts: LoadOptions) -> LoadReport {
    assert!(
        opts.protocol == Protocol::Mux || opts.streams_per_conn == 1,
        "http/1.1 supports one loop per connection"
    );
    assert!(
        opts.duration.is_some() || opts.requests_per_loop.is_some(),
        "either a duration or a request count is required"
    );
    let deadline = opts.duration.map(|d| Instant::now() + d);
    let started = Instant::now();
    let mut tasks = Vec::with_capacity(opts.connections);
    for conn_idx in 0..opts.connections {
        let opts = opts.clone();
        tasks.push(tokio::spawn(async move {
            match opts.protocol {
                Protocol::Http11 => vec![http_loop(&opts, conn_idx, deadline).await],
                Protocol::Mux => mux_conn(&opts, conn_idx, deadline).await,
            }
        }));
    }
    let mut parts = Vec::new();
    let mut lats = Vec::new();
    for t in tasks {
        for s in t.await.expect("load task panicked") {
            parts.push(LoadReport {
                loops: 1,
                sent: s.sent,
                ok: s.ok,
                errors: s.errors,
                affinity_violations: s.affinity_violations,
                elapsed: started.elapsed(),
                ..Default::default()
            });
            lats.extend(s.latencies_us);
        }
    }
    merge_reports(&parts, lats)
}

fn loop_done(stats: &LoopStats, opts: &LoadOptions, deadline: Option<Instant>) -> bool {
    if let Some(limit) = opts.requests_per_loop {
        if stats.sent >= limit {
            return true;
        }
    }
    if let Some(d) = deadline {
        if Instant::now() >= d {
            return true;
        }
    }
    false
}

async fn http_loop(opts: &LoadOptions, conn_idx: usize, deadline: Option<Instant>) -> LoopStats {
    let mut stats = LoopStats::default();
    let mut sock = match TcpStream::connect(opts.target).await {
        Ok(s) => {
            let _ = s.set_nodelay(true);
            s
        }
        Err(_) => {
            stats.errors += 1;
            return stats;
        }
    };
    let mut buf = Vec::with_capacity(16 * 1024);
    let mut seq = 0u64;
    let salt = rand::random::<u64>();
    while !loop_done(&stats, opts, deadline) {
        let nonce = format!("{salt:x}:{conn_idx}:{seq}");
        seq += 1;
        let wire = codec::encode_request(&make_request(opts, &nonce));
        stats.sent += 1;
        let t0 = Instant::now();
        if sock.write_all(&wire).await.is_err() {
            stats.errors += 1;
            break;
        }
        let resp = tokio::time::timeout(opts.request_timeout, async {
            loop {
                if let Some((resp, n)) = codec::decode_response(&buf)? {
                    buf.drain(..n);
                    return Ok::<_, anyhow::Error>(resp);
                }
                if sock.read_buf(&mut buf).await? == 0 {
                    anyhow::bail!("connection closed mid-response");
                }
            }
        })
        .await;
        match resp {
            Ok(Ok(resp)) => {
                stats.latencies_us.push(t0.elapsed().as_micros() as u64);
                check_response(&resp, &nonce, opts, &mut stats);
                // A failure response may arrive on a poisoned
                // connection; reconnect so the loop keeps running.
                if resp.status != 200 {
                    match TcpStream::connect(opts.target).await {
                        Ok(s) => {
                            let _ = s.set_nodelay(true);
                            sock = s;
                            buf.clear();
                        }
                        Err(_) => break,
                    }
                }
            }
            _ => {
                stats.errors += 1;
                match TcpStream::connect(opts.target).await {
                    Ok(s) => {
                        let _ = s.set_nodelay(true);
                        sock = s;
                        buf.clear();
                    }
                    Err(_) => break,
                }
            }
        }
    }
    stats
}

type Pending = Arc<Mutex<HashMap<u32, oneshot::Sender<Response>>>>;

async fn mux_conn(opts: &LoadOptions, conn_idx: usize, deadline: Option<Instant>) -> Vec<LoopStats> {
    let fail_all = || {
        (0..opts.streams_per_conn)
            .map(|_| LoopStats { errors: 1, ..Default::default() })
            .collect::<Vec<_>>()
    };
    let sock = match TcpStream::connect(opts.target).await {
        Ok(s) => {
            let _ = s.set_nodelay(true);
            s
        }
        Err(_) => return fail_all(),
    };
    let (mut rd, wr) = sock.into_split();
    let wr = Arc::new(Mutex::new(wr));
    let pending: Pending = Arc::default();

    let reader_pending = pending.clone();
    let reader = tokio::spawn(async move {
        let mut buf = Vec::with_capacity(16 * 1024);
        loop {
            match codec::decode_response(&buf) {
                Ok(Some((resp, n))) => {
                    buf.drain(..n);
                    if let Some(sid) = resp.stream_id {
                        if let Some(tx) = reader_pending.lock().await.remove(&sid) {
                            let _ = tx.send(resp);
                        }
                    }
                    continue;
                }
                Ok(None) => {}
                Err(_) => break,
            }
            match rd.read_buf(&mut buf).await {
                Ok(0) | Err(_) => break,
                Ok(_) => {}
            }
        }
        // Wake every waiter so loops observe the dead connection.
        reader_pending.lock().await.clear();
    });

    let mut loops = Vec::new();
    for stream_idx in 0..opts.streams_per_conn {
        let opts = opts.clone();
        let wr = wr.clone();
        let pending = pending.clone();
        loops.push(tokio::spawn(async move {
            let mut stats = LoopStats::default();
            let sid = stream_idx as u32;
            let mut seq = 0u64;
            let salt = rand::random::<u64>();
            while !loop_done(&stats, &opts, deadline) {
                let nonce = format!("{salt:x}:{conn_idx}:{stream_idx}:{seq}");
                seq += 1;
                let wire = codec::encode_request(&make_request(&opts, &nonce).into_mux(sid));
                let (tx, rx) = oneshot::channel();
                pending.lock().await.insert(sid, tx);
                stats.sent += 1;
                let t0 = Instant::now();
                if wr.lock().await.write_all(&wire).await.is_err() {
                    pending.lock().await.remove(&sid);
                    stats.errors += 1;
                    break;
                }
                match tokio::time::timeout(opts.request_timeout, rx).await {
                    Ok(Ok(resp)) => {
                        stats.latencies_us.push(t0.elapsed().as_micros() as u64);
                        check_response(&resp, &nonce, &opts, &mut stats);
                    }
                    Ok(Err(_)) => {
                        // Reader task dropped our sender: connection died.
                        stats.errors += 1;
                        break;
                    }
                    Err(_) => {
                        pending.lock().await.remove(&sid);
                        stats.errors += 1;
                    }
                }
            }
            stats
        }));
    }
    let mut out = Vec::new();
    for l in loops {
        out.push(l.await.expect("mux loop panicked"));
    }
    reader.abort();
    out
}
