//! The endpoint relay: proxy sockets (PS) on the client side, instance
//! connections (IS) on the backend side, and the dispatch machinery in
//! between.
//!
//! Every client connection is served by its own task. Routed traffic is
//! decoded message by message; each request is matched, an endpoint is
//! picked, and the original wire bytes are handed to the chosen IS task
//! through its mailbox. The IS task owns the backend socket outright: it
//! serializes writes, tracks who is owed a response in its request map,
//! and routes decoded responses back to the originating PS with the
//! client's own stream id restored. Listeners without filters tunnel
//! bytes verbatim to their default cluster instead.

use std::collections::{HashMap, VecDeque};
use std::net::SocketAddr;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use bytes::BytesMut;
use tokio::io::{AsyncReadExt, AsyncWriteExt};
use tokio::net::tcp::{OwnedReadHalf, OwnedWriteHalf};
use tokio::net::TcpStream;
use tokio::sync::{mpsc, oneshot};

use xlb_core::codec::{
    decode_request, decode_response, encode_response, rewrite_stream_id, Protocol, Request,
    Response,
};
use xlb_core::lb;
use xlb_core::limits::HOLD_QUEUE_MAX;
use xlb_core::metrics::{bump, slots, FlowMetrics};
use xlb_core::router::{self, ListenerView};
use xlb_core::store::InnerMap;

use crate::state::ProxyState;

const READ_CHUNK: usize = 16 * 1024;

/// What a dispatch resolved to, as handed back to the proxy socket.
#[derive(Debug)]
pub enum Outcome {
    /// Raw wire bytes ready for the client; mux stream ids have already
    /// been rewritten back to the client's originals.
    Bytes(Vec<u8>),
    /// The request never produced a backend response.
    Failed { status: u16, reason: &'static str },
}

#[derive(Debug)]
pub struct Delivery {
    pub original_id: Option<u32>,
    pub outcome: Outcome,
}

impl Delivery {
    fn failed(original_id: Option<u32>, status: u16, reason: &'static str) -> Self {
        Delivery {
            original_id,
            outcome: Outcome::Failed { status, reason },
        }
    }

    /// Bytes to put on the client socket, synthesizing an error message
    /// in the client's protocol when the backend never answered.
    pub fn into_bytes(self, client_proto: Protocol) -> Vec<u8> {
        match self.outcome {
            Outcome::Bytes(b) => b,
            Outcome::Failed { status, reason } => {
                synth_error(client_proto, self.original_id, status, reason)
            }
        }
    }
}

fn synth_error(proto: Protocol, original_id: Option<u32>, status: u16, reason: &'static str) -> Vec<u8> {
    let mut resp = Response::new(status)
        .with_header("x-xlb-error", reason)
        .with_body(reason.as_bytes().to_vec());
    if proto == Protocol::Mux {
        resp = resp.into_mux(original_id.unwrap_or(0));
    }
    encode_response(&resp)
}

/// Reply channel back to the owning PS. HTTP/1.1 handlers wait on one
/// response at a time; mux handlers fan responses into a writer task.
pub enum ReplyTo {
    Once(oneshot::Sender<Delivery>),
    Stream(mpsc::UnboundedSender<Delivery>),
}

impl ReplyTo {
    /// False when the client is gone (PSGone): the caller discards.
    fn deliver(self, d: Delivery) -> bool {
        match self {
            ReplyTo::Once(tx) => tx.send(d).is_ok(),
            ReplyTo::Stream(tx) => tx.send(d).is_ok(),
        }
    }
}

/// Pairs every dispatch with exactly one completion: `arm` counts the
/// dispatch and raises the endpoint's outstanding gauge, `fire` (or the
/// drop guard) settles it. Conservation of dispatches vs completions
/// rests on this being unskippable.
pub struct Completion {
    inner: Option<(Arc<InnerMap>, usize, Option<Arc<InnerMap>>)>,
}

impl Completion {
    pub fn arm(lb_map: Arc<InnerMap>, endpoint: usize, metrics: Option<Arc<InnerMap>>) -> Self {
        lb::on_dispatch(&lb_map, endpoint);
        if let Some(m) = &metrics {
            bump(m, slots::DISPATCHES, 1);
        }
        Completion {
            inner: Some((lb_map, endpoint, metrics)),
        }
    }

    pub fn fire(mut self) {
        self.settle();
    }

    fn settle(&mut self) {
        if let Some((lb_map, endpoint, metrics)) = self.inner.take() {
            let clean = lb::on_complete(&lb_map, endpoint);
            if let Some(m) = &metrics {
                bump(m, slots::COMPLETIONS, 1);
                if !clean {
                    bump(m, slots::UNDERFLOW_GUARDS, 1);
                }
            }
        }
    }
}

impl Drop for Completion {
    fn drop(&mut self) {
        self.settle();
    }
}

/// One request handed from a PS to an IS mailbox.
pub struct Dispatch {
    /// Original wire bytes of the request; for mux the stream id field
    /// is rewritten before hitting the backend, everything else is
    /// forwarded untouched.
    pub frame: Vec<u8>,
    pub original_id: Option<u32>,
    pub reply: ReplyTo,
    pub completion: Completion,
}

impl Dispatch {
    fn fail(self, status: u16, reason: &'static str) {
        self.completion.fire();
        let _ = self
            .reply
            .deliver(Delivery::failed(self.original_id, status, reason));
    }
}

/// A response owed to some PS.
struct PendingReply {
    original_id: Option<u32>,
    reply: ReplyTo,
    completion: Completion,
    dispatched_at: Instant,
}

impl PendingReply {
    fn of(d: Dispatch) -> Self {
        PendingReply {
            original_id: d.original_id,
            reply: d.reply,
            completion: d.completion,
            dispatched_at: Instant::now(),
        }
    }

    fn finish(self, sh: &IsShared, raw: Vec<u8>) {
        self.completion.fire();
        sh.outstanding.fetch_sub(1, Ordering::AcqRel);
        // Send failure here is PSGone: the client hung up while the
        // backend worked; the response is discarded.
        let _ = self.reply.deliver(Delivery {
            original_id: self.original_id,
            outcome: Outcome::Bytes(raw),
        });
    }

    fn fail(self, sh: &IsShared, status: u16, reason: &'static str) {
        self.completion.fire();
        sh.outstanding.fetch_sub(1, Ordering::AcqRel);
        let _ = self
            .reply
            .deliver(Delivery::failed(self.original_id, status, reason));
    }
}

/// State shared between an IS task and its pool handle.
pub(crate) struct IsShared {
    pub id: u64,
    pub endpoint: SocketAddr,
    pub protocol: Protocol,
    pub timeout: Duration,
    pub metrics: Option<Arc<InnerMap>>,
    pub outstanding: Arc<AtomicUsize>,
    pub closed: Arc<AtomicBool>,
}

impl IsShared {
    fn orphan(&self) {
        if let Some(m) = &self.metrics {
            bump(m, slots::ORPHAN_RESPONSES, 1);
        }
    }
}

enum IsLogic {
    Http {
        in_flight: Option<PendingReply>,
        hold: VecDeque<Dispatch>,
    },
    Mux {
        map: HashMap<u32, PendingReply>,
        next_internal_id: u32,
    },
}

impl IsLogic {
    fn idle(&self) -> bool {
        match self {
            IsLogic::Http { in_flight, hold } => in_flight.is_none() && hold.is_empty(),
            IsLogic::Mux { map, .. } => map.is_empty(),
        }
    }
}

/// Backend connection task. Owns the socket; all writes are serialized
/// through the mailbox, so ordering toward one backend is total.
pub(crate) async fn run_is(sh: IsShared, sock: TcpStream, mut rx: mpsc::Receiver<Dispatch>) {
    let _ = sock.set_nodelay(true);
    let (mut rd, mut wr) = sock.into_split();
    let mut buf = BytesMut::with_capacity(READ_CHUNK);
    let mut logic = match sh.protocol {
        Protocol::Http11 => IsLogic::Http {
            in_flight: None,
            hold: VecDeque::new(),
        },
        Protocol::Mux => IsLogic::Mux {
            map: HashMap::new(),
            next_internal_id: 1,
        },
    };
    let tick_every = (sh.timeout / 4)
        .max(Duration::from_millis(10))
        .min(Duration::from_millis(500));
    let mut tick = tokio::time::interval(tick_every);
    tick.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Skip);
    let mut draining = false;

    let alive = loop {
        if draining && logic.idle() {
            break true;
        }
        tokio::select! {
            m = rx.recv(), if !draining => match m {
                Some(d) => {
                    if !accept_dispatch(&sh, &mut logic, &mut wr, d).await {
                        break false;
                    }
                }
                None => draining = true,
            },
            r = rd.read_buf(&mut buf) => match r {
                Ok(0) | Err(_) => break false,
                Ok(_) => {
                    if !drain_responses(&sh, &mut logic, &mut wr, &mut buf).await {
                        break false;
                    }
                }
            },
            _ = tick.tick() => {
                if !expire_stale(&sh, &mut logic) {
                    break false;
                }
            }
        }
    };

    sh.closed.store(true, Ordering::Release);
    tracing::debug!(is = sh.id, endpoint = %sh.endpoint, drained = alive, "instance connection closed");
    if !alive {
        fail_all(&sh, logic, "backend_unavailable");
    }
    // Anything still sitting in the mailbox can no longer be served.
    rx.close();
    while let Ok(d) = rx.try_recv() {
        sh.outstanding.fetch_sub(1, Ordering::AcqRel);
        d.fail(503, "backend_unavailable");
    }
}

fn fail_all(sh: &IsShared, logic: IsLogic, reason: &'static str) {
    match logic {
        IsLogic::Http { in_flight, hold } => {
            if let Some(p) = in_flight {
                p.fail(sh, 503, reason);
            }
            for d in hold {
                sh.outstanding.fetch_sub(1, Ordering::AcqRel);
                d.fail(503, reason);
            }
        }
        IsLogic::Mux { map, .. } => {
            for (_, p) in map {
                p.fail(sh, 503, reason);
            }
        }
    }
}

async fn accept_dispatch(
    sh: &IsShared,
    logic: &mut IsLogic,
    wr: &mut OwnedWriteHalf,
    d: Dispatch,
) -> bool {
    match logic {
        IsLogic::Http { in_flight, hold } => {
            if in_flight.is_some() {
                // One outstanding request per HTTP/1.1 backend; the rest
                // wait their turn.
                if hold.len() >= HOLD_QUEUE_MAX {
                    sh.outstanding.fetch_sub(1, Ordering::AcqRel);
                    d.fail(503, "backend_overloaded");
                    return true;
                }
                hold.push_back(d);
                return true;
            }
            if wr.write_all(&d.frame).await.is_err() {
                sh.outstanding.fetch_sub(1, Ordering::AcqRel);
                d.fail(503, "backend_unavailable");
                return false;
            }
            *in_flight = Some(PendingReply::of(d));
            true
        }
        IsLogic::Mux {
            map,
            next_internal_id,
        } => {
            let internal = alloc_internal_id(map, next_internal_id);
            let rewritten = match rewrite_stream_id(&d.frame, internal) {
                Ok(b) => b,
                Err(_) => {
                    sh.outstanding.fetch_sub(1, Ordering::AcqRel);
                    d.fail(500, "relay_internal");
                    return true;
                }
            };
            if wr.write_all(&rewritten).await.is_err() {
                sh.outstanding.fetch_sub(1, Ordering::AcqRel);
                d.fail(503, "backend_unavailable");
                return false;
            }
            map.insert(internal, PendingReply::of(d));
            true
        }
    }
}

/// Next free internal id; wraps and skips ids still owed a response.
fn alloc_internal_id(map: &HashMap<u32, PendingReply>, next: &mut u32) -> u32 {
    loop {
        let id = *next;
        *next = next.wrapping_add(1);
        if !map.contains_key(&id) {
            return id;
        }
    }
}

async fn drain_responses(
    sh: &IsShared,
    logic: &mut IsLogic,
    wr: &mut OwnedWriteHalf,
    buf: &mut BytesMut,
) -> bool {
    loop {
        let (resp, consumed) = match decode_response(buf) {
            Ok(Some(x)) => x,
            Ok(None) => return true,
            // A backend we can no longer frame against is unusable.
            Err(_) => return false,
        };
        let raw = buf.split_to(consumed).to_vec();
        match logic {
            IsLogic::Http { in_flight, hold } => {
                match in_flight.take() {
                    Some(p) => p.finish(sh, raw),
                    None => {
                        // Unsolicited HTTP/1.1 bytes leave the stream
                        // unsynchronized; drop the connection.
                        sh.orphan();
                        return false;
                    }
                }
                if let Some(d) = hold.pop_front() {
                    if wr.write_all(&d.frame).await.is_err() {
                        sh.outstanding.fetch_sub(1, Ordering::AcqRel);
                        d.fail(503, "backend_unavailable");
                        return false;
                    }
                    *in_flight = Some(PendingReply::of(d));
                }
            }
            IsLogic::Mux { map, .. } => {
                let sid = resp.stream_id.unwrap_or(0);
                match map.remove(&sid) {
                    None => sh.orphan(),
                    Some(p) => {
                        let restored = p.original_id.unwrap_or(0);
                        match rewrite_stream_id(&raw, restored) {
                            Ok(bytes) => p.finish(sh, bytes),
                            Err(_) => p.fail(sh, 500, "relay_internal"),
                        }
                    }
                }
            }
        }
    }
}

/// True to keep the connection; false poisons it (a wedged HTTP/1.1
/// backend cannot be re-framed, so the whole IS goes down).
fn expire_stale(sh: &IsShared, logic: &mut IsLogic) -> bool {
    match logic {
        IsLogic::Http { in_flight, .. } => match in_flight {
            Some(p) if p.dispatched_at.elapsed() > sh.timeout => {
                if let Some(p) = in_flight.take() {
                    p.fail(sh, 504, "dispatch_timeout");
                }
                false
            }
            _ => true,
        },
        IsLogic::Mux { map, .. } => {
            let stale: Vec<u32> = map
                .iter()
                .filter(|(_, p)| p.dispatched_at.elapsed() > sh.timeout)
                .map(|(id, _)| *id)
                .collect();
            for id in stale {
                if let Some(p) = map.remove(&id) {
                    p.fail(sh, 504, "dispatch_timeout");
                }
            }
            true
        }
    }
}

/// Listener identity captured at accept time. Routing re-resolves the
/// listener by bind address on every request so config deltas take
/// effect mid-connection; the tenant pool binding is fixed at accept.
pub(crate) struct ListenerIdent {
    pub bind: SocketAddr,
    pub tenant: String,
}

/// Serve one accepted client connection.
pub async fn serve_ps(state: Arc<ProxyState>, bind: SocketAddr, sock: TcpStream) {
    let _ = sock.set_nodelay(true);
    let Some(view) = lookup_view(&state, bind) else {
        // Listener removed between accept and here; refuse.
        return;
    };
    let metrics = state.metrics();
    let flow = state.flows.open(metrics.as_deref());
    let flow_id = flow.id();

    if view.filter_count == 0 {
        serve_tunnel(&state, &view, sock, &flow).await;
    } else {
        let ident = ListenerIdent {
            bind,
            tenant: view.tenant_group.clone(),
        };
        serve_routed(&state, ident, sock, &flow).await;
    }
    state.flows.close(flow_id, metrics.as_deref());
}

fn lookup_view(state: &ProxyState, bind: SocketAddr) -> Option<ListenerView> {
    let idx = router::find_listener(&state.store, bind).ok()??;
    router::listener_at(&state.store, idx).ok()
}

/// Read until one full request is decoded; returns the parsed message
/// plus its raw wire bytes. `None` means the connection is done (clean
/// EOF between messages, mid-message cut, or framing error).
async fn read_request(
    rd: &mut OwnedReadHalf,
    buf: &mut BytesMut,
) -> Option<(Request, Vec<u8>)> {
    loop {
        match decode_request(buf) {
            Ok(Some((req, consumed))) => {
                let raw = buf.split_to(consumed).to_vec();
                return Some((req, raw));
            }
            Ok(None) => {}
            Err(_) => return None,
        }
        match rd.read_buf(buf).await {
            Ok(0) | Err(_) => return None,
            Ok(_) => {}
        }
    }
}

async fn serve_routed(
    state: &Arc<ProxyState>,
    ident: ListenerIdent,
    sock: TcpStream,
    flow: &Arc<FlowMetrics>,
) {
    let (mut rd, wr) = sock.into_split();
    let mut buf = BytesMut::with_capacity(READ_CHUNK);
    let t_parse = Instant::now();
    let Some(first) = read_request(&mut rd, &mut buf).await else {
        return;
    };
    state.profile.add(&state.profile.parse_ns, t_parse);
    match first.0.protocol {
        Protocol::Http11 => http1_ps(state, ident, rd, wr, buf, first, flow).await,
        Protocol::Mux => mux_ps(state, ident, rd, wr, buf, first, flow).await,
    }
}

/// Sequential request/response loop: at most one pending dispatch per
/// HTTP/1.1 proxy socket; later requests wait in the read buffer.
async fn http1_ps(
    state: &Arc<ProxyState>,
    ident: ListenerIdent,
    mut rd: OwnedReadHalf,
    mut wr: OwnedWriteHalf,
    mut buf: BytesMut,
    first: (Request, Vec<u8>),
    flow: &Arc<FlowMetrics>,
) {
    let mut next = Some(first);
    loop {
        let (req, raw) = match next.take() {
            Some(x) => x,
            None => {
                let t_parse = Instant::now();
                match read_request(&mut rd, &mut buf).await {
                    Some(x) => {
                        state.profile.add(&state.profile.parse_ns, t_parse);
                        x
                    }
                    None => return,
                }
            }
        };
        flow.inc_requests();
        let (tx, rx) = oneshot::channel();
        dispatch_request(state, &ident, raw, &req, ReplyTo::Once(tx), flow).await;
        let delivery = rx
            .await
            .unwrap_or_else(|_| Delivery::failed(None, 500, "relay_internal"));
        let t_reply = Instant::now();
        let bytes = delivery.into_bytes(Protocol::Http11);
        if wr.write_all(&bytes).await.is_err() {
            return;
        }
        flow.add_rx(bytes.len() as u64);
        state.profile.add(&state.profile.reply_ns, t_reply);
    }
}

/// Pipelined mux handling: the reader keeps dispatching while a writer
/// task fans completed responses back, whatever order they arrive in.
async fn mux_ps(
    state: &Arc<ProxyState>,
    ident: ListenerIdent,
    mut rd: OwnedReadHalf,
    mut wr: OwnedWriteHalf,
    mut buf: BytesMut,
    first: (Request, Vec<u8>),
    flow: &Arc<FlowMetrics>,
) {
    let (tx, mut rx) = mpsc::unbounded_channel::<Delivery>();
    let writer_state = state.clone();
    let writer_flow = flow.clone();
    let writer = tokio::spawn(async move {
        while let Some(delivery) = rx.recv().await {
            let t_reply = Instant::now();
            let bytes = delivery.into_bytes(Protocol::Mux);
            if wr.write_all(&bytes).await.is_err() {
                break;
            }
            writer_flow.add_rx(bytes.len() as u64);
            writer_state
                .profile
                .add(&writer_state.profile.reply_ns, t_reply);
        }
    });

    let mut next = Some(first);
    loop {
        if tx.is_closed() {
            break;
        }
        let (req, raw) = match next.take() {
            Some(x) => x,
            None => {
                let t_parse = Instant::now();
                match read_request(&mut rd, &mut buf).await {
                    Some(x) => {
                        state.profile.add(&state.profile.parse_ns, t_parse);
                        x
                    }
                    None => break,
                }
            }
        };
        flow.inc_requests();
        dispatch_request(state, &ident, raw, &req, ReplyTo::Stream(tx.clone()), flow).await;
    }
    drop(tx);
    let _ = writer.await;
}

/// Route, pick, acquire, hand off. All failures are answered through
/// `reply`; the caller never sees an error.
pub(crate) async fn dispatch_request(
    state: &Arc<ProxyState>,
    ident: &ListenerIdent,
    raw: Vec<u8>,
    req: &Request,
    reply: ReplyTo,
    flow: &Arc<FlowMetrics>,
) {
    let t_balance = Instant::now();
    let listener_idx = match router::find_listener(&state.store, ident.bind) {
        Ok(Some(idx)) => idx,
        Ok(None) => {
            // Listener dropped by a delta; its rules are gone.
            flow.inc_no_route();
            reply.deliver(Delivery::failed(req.stream_id, 404, "no_route_match"));
            return;
        }
        Err(e) => {
            tracing::error!(error = %e, "listener lookup failed");
            reply.deliver(Delivery::failed(req.stream_id, 500, "relay_internal"));
            return;
        }
    };
    let resolved = router::route_and_resolve(
        &state.store,
        listener_idx,
        req,
        state.match_order,
        &state.cache,
    );
    let cluster = match resolved {
        Ok(Some((_, cluster))) => cluster,
        Ok(None) => {
            flow.inc_no_route();
            reply.deliver(Delivery::failed(req.stream_id, 404, "no_route_match"));
            return;
        }
        Err(e) => {
            tracing::error!(error = %e, "route lookup failed");
            reply.deliver(Delivery::failed(req.stream_id, 500, "relay_internal"));
            return;
        }
    };
    let weights = cluster.weights();
    let endpoint = match state.lbrt.pick(&cluster.lb_map, cluster.policy, &weights) {
        Ok(i) => i,
        Err(_) => {
            reply.deliver(Delivery::failed(req.stream_id, 503, "backend_unavailable"));
            return;
        }
    };
    let (addr, _) = cluster.endpoints[endpoint];
    state.profile.add(&state.profile.balance_ns, t_balance);

    let t_relay = Instant::now();
    let is = match state
        .pools
        .acquire(&ident.tenant, addr, cluster.protocol)
        .await
    {
        Ok(h) => h,
        Err(e) => {
            tracing::debug!(endpoint = %addr, error = %e, "backend unreachable");
            reply.deliver(Delivery::failed(req.stream_id, 503, "backend_unavailable"));
            return;
        }
    };
    let completion = Completion::arm(cluster.lb_map.clone(), endpoint, state.metrics());
    flow.add_tx(raw.len() as u64);
    let dispatch = Dispatch {
        frame: raw,
        original_id: req.stream_id,
        reply,
        completion,
    };
    if let Err(d) = is.dispatch(dispatch).await {
        d.fail(503, "backend_unavailable");
    }
    state.profile.add(&state.profile.relay_ns, t_relay);
    state.profile.sampled();
}

/// Byte tunnel for filterless listeners: endpoint chosen once at
/// accept, bytes forwarded verbatim both ways. Client requests are
/// still counted by running the decoder over the client-to-backend
/// stream, so stats reflect messages even on the bypass path.
async fn serve_tunnel(
    state: &Arc<ProxyState>,
    view: &ListenerView,
    sock: TcpStream,
    flow: &Arc<FlowMetrics>,
) {
    let Some(dc) = view.default_cluster else {
        return;
    };
    let Ok(cluster) = router::resolve_cluster(&state.store, dc) else {
        return;
    };
    let weights = cluster.weights();
    let Ok(endpoint) = state.lbrt.pick(&cluster.lb_map, cluster.policy, &weights) else {
        return;
    };
    let (addr, _) = cluster.endpoints[endpoint];
    let backend = match tokio::time::timeout(state.pools.connect_timeout(), TcpStream::connect(addr)).await
    {
        Ok(Ok(s)) => s,
        _ => return,
    };
    let _ = backend.set_nodelay(true);
    let metrics = state.metrics();
    let (mut crd, mut cwr) = sock.into_split();
    let (mut brd, mut bwr) = backend.into_split();

    let up_metrics = metrics.clone();
    let up_flow = flow.clone();
    let upstream = tokio::spawn(async move {
        let mut chunk = vec![0u8; READ_CHUNK];
        let mut acc = BytesMut::new();
        let mut counting = true;
        loop {
            let n = match crd.read(&mut chunk).await {
                Ok(0) | Err(_) => break,
                Ok(n) => n,
            };
            if let Some(m) = &up_metrics {
                bump(m, slots::TUNNELED_TX, n as u64);
            }
            if counting {
                acc.extend_from_slice(&chunk[..n]);
                loop {
                    match decode_request(&acc) {
                        Ok(Some((_, consumed))) => {
                            let _ = acc.split_to(consumed);
                            up_flow.inc_requests();
                        }
                        Ok(None) => break,
                        Err(_) => {
                            // Not message-shaped traffic; keep relaying,
                            // stop counting.
                            counting = false;
                            acc.clear();
                            break;
                        }
                    }
                }
            }
            if bwr.write_all(&chunk[..n]).await.is_err() {
                break;
            }
        }
        let _ = bwr.shutdown().await;
    });

    let down_metrics = metrics;
    let downstream = tokio::spawn(async move {
        let mut chunk = vec![0u8; READ_CHUNK];
        loop {
            let n = match brd.read(&mut chunk).await {
                Ok(0) | Err(_) => break,
                Ok(n) => n,
            };
            if let Some(m) = &down_metrics {
                bump(m, slots::TUNNELED_RX, n as u64);
            }
            if cwr.write_all(&chunk[..n]).await.is_err() {
                break;
            }
        }
        let _ = cwr.shutdown().await;
    });

    let _ = upstream.await;
    let _ = downstream.await;
}
