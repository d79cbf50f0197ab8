//! Echo backend with strict protocol-discipline checks.
//!
//! The backend is deliberately unforgiving: any traffic pattern the
//! relay is required to prevent — a second HTTP/1.1 request arriving
//! before the previous response was written, or two concurrent
//! multiplexed requests sharing a stream id — is counted as a
//! violation and reported on stderr. A clean run proves the relay
//! upheld the discipline, because nothing else sits between it and
//! this code.

use std::io;
use std::net::SocketAddr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use tokio::io::{AsyncReadExt, AsyncWriteExt};
use tokio::net::{TcpListener, TcpStream};
use tokio::sync::Mutex;
use tokio::task::JoinHandle;

use xlb_core::codec::{self, Protocol, Response};

#[derive(Debug, Clone)]
pub struct BackendOptions {
    pub addr: SocketAddr,
    pub protocol: Protocol,
    /// Fixed response body size; `None` echoes the request body.
    pub response_bytes: Option<usize>,
    /// Artificial service time per request.
    pub think: Duration,
}

impl BackendOptions {
    pub fn new(protocol: Protocol) -> Self {
        BackendOptions {
            addr: "127.0.0.1:0".parse().unwrap(),
            protocol,
            response_bytes: None,
            think: Duration::ZERO,
        }
    }
}

/// Handle to a running backend task.
pub struct Backend {
    pub addr: SocketAddr,
    pub requests: Arc<AtomicU64>,
    pub violations: Arc<AtomicU64>,
    accept_task: JoinHandle<()>,
    conn_tasks: Arc<std::sync::Mutex<Vec<tokio::task::AbortHandle>>>,
}

impl Backend {
    pub fn violation_count(&self) -> u64 {
        self.violations.load(Ordering::Relaxed)
    }

    pub fn request_count(&self) -> u64 {
        self.requests.load(Ordering::Relaxed)
    }

    /// Stop accepting and sever every open connection, as a crashed
    /// process would.
    pub fn abort(&self) {
        self.accept_task.abort();
        for t in self.conn_tasks.lock().unwrap().drain(..) {
            t.abort();
        }
    }
}

impl Drop for Backend {
    fn drop(&mut self) {
        self.abort();
    }
}

pub async fn spawn_backend(opts: BackendOptions) -> io::Result<Backend> {
    let listener = TcpListener::bind(opts.addr).await?;
    let addr = listener.local_addr()?;
    let requests = Arc::new(AtomicU64::new(0));
    let violations = Arc::new(AtomicU64::new(0));
    let conn_tasks: Arc<std::sync::Mutex<Vec<tokio::task::AbortHandle>>> = Arc::default();
    let req2 = requests.clone();
    let vio2 = violations.clone();
    let tasks2 = conn_tasks.clone();
    let accept_task = tokio::spawn(async move {
        loop {
            let Ok((sock, _)) = listener.accept().await else {
                break;
            };
            let opts = opts.clone();
            let requests = req2.clone();
            let violations = vio2.clone();
            let task = tokio::spawn(async move {
                let _ = sock.set_nodelay(true);
                let r = match opts.protocol {
                    Protocol::Http11 => serve_http(sock, &opts, &requests, &violations).await,
                    Protocol::Mux => serve_mux(sock, &opts, &requests, &violations).await,
                };
                if let Err(e) = r {
                    if e.kind() != io::ErrorKind::UnexpectedEof {
                        tracing::debug!(error = %e, "backend connection error");
                    }
                }
            });
            let mut tasks = tasks2.lock().unwrap();
            tasks.retain(|t| !t.is_finished());
            tasks.push(task.abort_handle());
        }
    });
    Ok(Backend { addr, requests, violations, accept_task, conn_tasks })
}

fn violation(counter: &AtomicU64, what: &str) {
    counter.fetch_add(1, Ordering::Relaxed);
    eprintln!("BACKEND VIOLATION: {what}");
}

fn respond_to(req: &codec::Request, opts: &BackendOptions, port: u16) -> Response {
    let body = match opts.response_bytes {
        Some(n) => vec![b'r'; n],
        None => req.body.clone(),
    };
    let mut resp =
        Response::new(200).with_body(body).with_header("x-backend-port", &port.to_string());
    if let Some(nonce) = req.header("x-nonce") {
        resp = resp.with_header("x-nonce", nonce);
    }
    resp
}

async fn serve_http(
    mut sock: TcpStream,
    opts: &BackendOptions,
    requests: &AtomicU64,
    violations: &AtomicU64,
) -> io::Result<()> {
    let port = sock.local_addr()?.port();
    let mut buf = Vec::with_capacity(16 * 1024);
    loop {
        let (req, consumed) = loop {
            match codec::decode_request(&buf) {
                Ok(Some(hit)) => break hit,
                Ok(None) => {}
                Err(e) => {
                    return Err(io::Error::new(io::ErrorKind::InvalidData, e.to_string()));
                }
            }
            if sock.read_buf(&mut buf).await? == 0 {
                if buf.is_empty() {
                    return Ok(());
                }
                return Err(io::ErrorKind::UnexpectedEof.into());
            }
        };
        buf.drain(..consumed);
        requests.fetch_add(1, Ordering::Relaxed);
        // The relay must hold request n+1 until response n is written.
        // A complete request already buffered here means it did not.
        if let Ok(Some(_)) = codec::decode_request(&buf) {
            violation(violations, "http1 request received while previous response unsent");
        }
        if opts.think > Duration::ZERO {
            tokio::time::sleep(opts.think).await;
        }
        let resp = respond_to(&req, opts, port);
        sock.write_all(&codec::encode_response(&resp)).await?;
    }
}

async fn serve_mux(
    sock: TcpStream,
    opts: &BackendOptions,
    requests: &AtomicU64,
    violations: &AtomicU64,
) -> io::Result<()> {
    let port = sock.local_addr()?.port();
    let (mut rd, wr) = sock.into_split();
    let wr = Arc::new(Mutex::new(wr));
    let in_flight: Arc<Mutex<std::collections::HashSet<u32>>> = Arc::default();
    let mut buf = Vec::with_capacity(16 * 1024);
    loop {
        let (msg, consumed) = loop {
            match codec::decode_request(&buf) {
                Ok(Some(hit)) => break hit,
                Ok(None) => {}
                Err(e) => {
                    return Err(io::Error::new(io::ErrorKind::InvalidData, e.to_string()));
                }
            }
            if rd.read_buf(&mut buf).await? == 0 {
                if buf.is_empty() {
                    return Ok(());
                }
                return Err(io::ErrorKind::UnexpectedEof.into());
            }
        };
        buf.drain(..consumed);
        requests.fetch_add(1, Ordering::Relaxed);
        let sid = match msg.stream_id {
            Some(sid) => sid,
            None => {
                violation(violations, "mux backend received a frame without a stream id");
                continue;
            }
        };
        if !in_flight.lock().await.insert(sid) {
            violation(violations, &format!("duplicate in-flight stream id {sid}"));
            // Still answer it so the run does not hang; the counter is
            // what fails the check.
        }
        let resp = respond_to(&msg, opts, port).with_header("x-seen-id", &sid.to_string());
        let think = opts.think;
        let wr = wr.clone();
        let in_flight = in_flight.clone();
        tokio::spawn(async move {
            if think > Duration::ZERO {
                tokio::time::sleep(think).await;
            }
            let bytes = codec::encode_response(&resp.into_mux(sid));
            let mut w = wr.lock().await;
            let _ = w.write_all(&bytes).await;
            drop(w);
            in_flight.lock().await.remove(&sid);
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use xlb_core::codec::Request;

    async fn roundtrip(backend: &Backend, req: &Request) -> Response {
        let mut sock = TcpStream::connect(backend.addr).await.unwrap();
        sock.write_all(&codec::encode_request(req)).await.unwrap();
        let mut buf = Vec::new();
        loop {
            if let Some((resp, n)) = codec::decode_response(&buf).unwrap() {
                buf.drain(..n);
                return resp;
            }
            assert_ne!(sock.read_buf(&mut buf).await.unwrap(), 0);
        }
    }

    #[tokio::test]
    async fn echoes_body_and_nonce() {
        let b = spawn_backend(BackendOptions::new(Protocol::Http11)).await.unwrap();
        let req = Request::new("GET", "/x").with_header("x-nonce", "n-17").with_body(b"payload".to_vec());
        let resp = roundtrip(&b, &req).await;
        assert_eq!(resp.status, 200);
        assert_eq!(resp.body, b"payload");
        assert_eq!(resp.header("x-nonce"), Some("n-17"));
        assert_eq!(b.request_count(), 1);
        assert_eq!(b.violation_count(), 0);
    }

    #[tokio::test]
    async fn fixed_response_size_overrides_echo() {
        let mut opts = BackendOptions::new(Protocol::Http11);
        opts.response_bytes = Some(64);
        let b = spawn_backend(opts).await.unwrap();
        let resp = roundtrip(&b, &Request::new("GET", "/").with_body(vec![1, 2, 3])).await;
        assert_eq!(resp.body.len(), 64);
    }

    #[tokio::test]
    async fn detects_http1_pipelining() {
        let mut opts = BackendOptions::new(Protocol::Http11);
        opts.think = Duration::from_millis(20);
        let b = spawn_backend(opts).await.unwrap();
        let mut sock = TcpStream::connect(b.addr).await.unwrap();
        let one = codec::encode_request(&Request::new("GET", "/a"));
        let two = codec::encode_request(&Request::new("GET", "/b"));
        sock.write_all(&[one, two].concat()).await.unwrap();
        let mut buf = Vec::new();
        for _ in 0..2 {
            loop {
                if let Some((_, n)) = codec::decode_response(&buf).unwrap() {
                    buf.drain(..n);
                    break;
                }
                assert_ne!(sock.read_buf(&mut buf).await.unwrap(), 0);
            }
        }
        assert_eq!(b.violation_count(), 1);
    }

    #[tokio::test]
    async fn detects_duplicate_mux_stream_ids() {
        let mut opts = BackendOptions::new(Protocol::Mux);
        opts.think = Duration::from_millis(30);
        let b = spawn_backend(opts).await.unwrap();
        let mut sock = TcpStream::connect(b.addr).await.unwrap();
        let f1 = codec::encode_request(&Request::new("GET", "/a").into_mux(7));
        let f2 = codec::encode_request(&Request::new("GET", "/b").into_mux(7));
        sock.write_all(&[f1, f2].concat()).await.unwrap();
        let mut buf = Vec::new();
        let mut got = 0;
        while got < 2 {
            if let Some((_, n)) = codec::decode_response(&buf).unwrap() {
                buf.drain(..n);
                got += 1;
                continue;
            }
            assert_ne!(sock.read_buf(&mut buf).await.unwrap(), 0);
        }
        assert_eq!(b.violation_count(), 1);
    }

    #[tokio::test]
    async fn mux_distinct_ids_are_clean() {
        let mut opts = BackendOptions::new(Protocol::Mux);
        opts.think = Duration::from_millis(10);
        let b = spawn_backend(opts).await.unwrap();
        let mut sock = TcpStream::connect(b.addr).await.unwrap();
        let frames: Vec<u8> = (0..4u32)
            .flat_map(|i| codec::encode_request(&Request::new("GET", "/").into_mux(i)))
            .collect();
        sock.write_all(&frames).await.unwrap();
        let mut buf = Vec::new();
        let mut got = 0;
        while got < 4 {
            if let Some((resp, n)) = codec::decode_response(&buf).unwrap() {
                assert!(resp.stream_id.is_some());
                buf.drain(..n);
                got += 1;
                continue;
            }
            assert_ne!(sock.read_buf(&mut buf).await.unwrap(), 0);
        }
        assert_eq!(b.violation_count(), 0);
        assert_eq!(b.request_count(), 4);
    }
}
