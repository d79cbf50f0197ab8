//! End-to-end relay behavior over real sockets: routing, protocol
//! discipline, error answers, pools, deltas, and accounting.

use std::net::SocketAddr;
use std::time::{Duration, Instant};

use tokio::io::{AsyncReadExt, AsyncWriteExt};
use tokio::net::TcpStream;

use xlb_bench::backend::{spawn_backend, BackendOptions};
use xlb_bench::loadgen::{run_load, LoadOptions};
use xlb_bench::scenario::{passthrough_config, routed_config};
use xlb_core::codec::{self, Protocol, Request, Response};
use xlb_core::config::{
    serialize_config, Cluster, ConfigSnapshot, Endpoint, Filter, LbPolicy, Listener, MatchField,
    MatchKind, RouteRule,
};
use xlb_core::metrics::slots;
use xlb_proxy::{boot, Daemon, DaemonOptions};

async fn up(snap: &ConfigSnapshot) -> (Daemon, SocketAddr) {
    up_with(snap, |_| {}).await
}

async fn up_with(
    snap: &ConfigSnapshot,
    tweak: impl FnOnce(&mut DaemonOptions),
) -> (Daemon, SocketAddr) {
    let mut opts = DaemonOptions::new(serialize_config(snap).into_bytes());
    opts.admin_addr = "127.0.0.1:0".parse().unwrap();
    tweak(&mut opts);
    let daemon = boot(opts).await.expect("daemon boot");
    let target = daemon
        .listener_addr(snap.listeners[0].bind)
        .await
        .expect("listener bound");
    (daemon, target)
}

fn ep(addr: SocketAddr) -> Endpoint {
    Endpoint { addr: addr.ip(), port: addr.port(), weight: 1 }
}

/// Single listener with per-path exact routes to dedicated clusters.
fn fanout_config(routes: &[(&str, SocketAddr)], protocol: Protocol) -> ConfigSnapshot {
    ConfigSnapshot {
        version: 1,
        listeners: vec![Listener {
            name: "front".into(),
            bind: "127.0.0.1:0".parse().unwrap(),
            virtual_ip: None,
            tenant_group: "t0".into(),
            filters: vec![Filter {
                protocol,
                routes: routes
                    .iter()
                    .enumerate()
                    .map(|(i, (path, _))| RouteRule {
                        field: MatchField::Path,
                        kind: MatchKind::Exact,
                        value: path.to_string(),
                        cluster: format!("c{i}"),
                    })
                    .collect(),
            }],
            default_cluster: None,
        }],
        clusters: routes
            .iter()
            .enumerate()
            .map(|(i, (_, addr))| Cluster {
                name: format!("c{i}"),
                policy: LbPolicy::RoundRobin,
                endpoints: vec![ep(*addr)],
            })
            .collect(),
    }
}

struct Client {
    sock: TcpStream,
    buf: Vec<u8>,
}

impl Client {
    async fn connect(addr: SocketAddr) -> Client {
        let sock = TcpStream::connect(addr).await.expect("client connect");
        sock.set_nodelay(true).unwrap();
        Client { sock, buf: Vec::new() }
    }

    async fn send(&mut self, req: &Request) {
        self.sock.write_all(&codec::encode_request(req)).await.expect("client write");
    }

    async fn recv(&mut self) -> Response {
        loop {
            if let Some((resp, n)) = codec::decode_response(&self.buf).expect("client decode") {
                self.buf.drain(..n);
                return resp;
            }
            let n = self.sock.read_buf(&mut self.buf).await.expect("client read");
            assert_ne!(n, 0, "connection closed while awaiting a response");
        }
    }

    async fn roundtrip(&mut self, req: &Request) -> Response {
        self.send(req).await;
        self.recv().await
    }
}

fn backend_port(resp: &Response) -> u16 {
    resp.header("x-backend-port").expect("x-backend-port header").parse().expect("port")
}

#[tokio::test]
async fn http1_routes_and_echoes_over_one_connection() {
    let backend = spawn_backend(BackendOptions::new(Protocol::Http11)).await.unwrap();
    let (daemon, target) = up(&routed_config(&[backend.addr], Protocol::Http11, LbPolicy::RoundRobin)).await;

    let mut client = Client::connect(target).await;
    for i in 0..3 {
        let body = format!("payload-{i}").into_bytes();
        let req = Request::new("GET", "/svc").with_header("x-nonce", &i.to_string()).with_body(body.clone());
        let resp = client.roundtrip(&req).await;
        assert_eq!(resp.status, 200);
        assert_eq!(resp.body, body);
        assert_eq!(resp.header("x-nonce"), Some(i.to_string().as_str()));
    }
    assert_eq!(backend.request_count(), 3);
    assert_eq!(backend.violation_count(), 0);
    daemon.shutdown().await;
}

#[tokio::test]
async fn routes_by_path_to_distinct_clusters() {
    let a = spawn_backend(BackendOptions::new(Protocol::Http11)).await.unwrap();
    let b = spawn_backend(BackendOptions::new(Protocol::Http11)).await.unwrap();
    let snap = fanout_config(&[("/alpha", a.addr), ("/beta", b.addr)], Protocol::Http11);
    let (daemon, target) = up(&snap).await;

    let mut client = Client::connect(target).await;
    let ra = client.roundtrip(&Request::new("GET", "/alpha")).await;
    let rb = client.roundtrip(&Request::new("GET", "/beta")).await;
    assert_eq!(backend_port(&ra), a.addr.port());
    assert_eq!(backend_port(&rb), b.addr.port());
    daemon.shutdown().await;
}

#[tokio::test]
async fn unroutable_request_gets_404_and_connection_survives() {
    let a = spawn_backend(BackendOptions::new(Protocol::Http11)).await.unwrap();
    let snap = fanout_config(&[("/known", a.addr)], Protocol::Http11);
    let (daemon, target) = up(&snap).await;

    let mut client = Client::connect(target).await;
    let miss = client.roundtrip(&Request::new("GET", "/unknown")).await;
    assert_eq!(miss.status, 404);
    assert_eq!(miss.body, b"no_route_match");
    assert_eq!(miss.header("x-xlb-error"), Some("no_route_match"));

    let hit = client.roundtrip(&Request::new("GET", "/known")).await;
    assert_eq!(hit.status, 200);

    let totals = xlb_core::metrics::totals(
        &daemon.state().flows,
        &daemon.state().metrics().expect("metrics map"),
    );
    assert_eq!(totals.no_route_match, 1);
    daemon.shutdown().await;
}

#[tokio::test]
async fn mux_remaps_colliding_stream_ids() {
    let mut bopts = BackendOptions::new(Protocol::Mux);
    bopts.think = Duration::from_millis(50);
    let backend = spawn_backend(bopts).await.unwrap();
    let (daemon, target) = up(&routed_config(&[backend.addr], Protocol::Mux, LbPolicy::RoundRobin)).await;

    // Two clients, both stream id 7, in flight simultaneously. The
    // relay must present distinct ids to the shared backend connection
    // and return each response under the client's original id.
    let mut c1 = Client::connect(target).await;
    let mut c2 = Client::connect(target).await;
    c1.send(&Request::new("GET", "/").with_body(b"from-c1".to_vec()).into_mux(7)).await;
    c2.send(&Request::new("GET", "/").with_body(b"from-c2".to_vec()).into_mux(7)).await;
    let r1 = c1.recv().await;
    let r2 = c2.recv().await;

    assert_eq!(r1.stream_id, Some(7));
    assert_eq!(r2.stream_id, Some(7));
    assert_eq!(r1.body, b"from-c1");
    assert_eq!(r2.body, b"from-c2");
    assert_eq!(backend.violation_count(), 0, "backend saw colliding ids");
    let seen1: u32 = r1.header("x-seen-id").unwrap().parse().unwrap();
    let seen2: u32 = r2.header("x-seen-id").unwrap().parse().unwrap();
    assert_ne!(seen1, seen2, "backend-side ids must differ while both in flight");
    daemon.shutdown().await;
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn mux_pipelines_many_streams_cleanly() {
    let mut bopts = BackendOptions::new(Protocol::Mux);
    bopts.think = Duration::from_millis(2);
    let backend = spawn_backend(bopts).await.unwrap();
    let (daemon, target) = up(&routed_config(&[backend.addr], Protocol::Mux, LbPolicy::RoundRobin)).await;

    let report = run_load(
        LoadOptions::new(target, Protocol::Mux).connections(4).streams(8).payload(64).requests(30),
    )
    .await;
    assert_eq!(report.ok, 4 * 8 * 30);
    assert_eq!(report.errors, 0);
    assert_eq!(report.affinity_violations, 0);
    assert_eq!(backend.violation_count(), 0);
    daemon.shutdown().await;
}

#[tokio::test]
async fn http1_pipelined_client_is_serialized_toward_backend() {
    let mut bopts = BackendOptions::new(Protocol::Http11);
    bopts.think = Duration::from_millis(5);
    let backend = spawn_backend(bopts).await.unwrap();
    let (daemon, target) = up(&routed_config(&[backend.addr], Protocol::Http11, LbPolicy::RoundRobin)).await;

    // Burst five requests in one write; the relay must deliver them
    // one at a time and in order.
    let mut client = Client::connect(target).await;
    let mut wire = Vec::new();
    for i in 0..5 {
        let req = Request::new("GET", "/").with_body(format!("b{i}").into_bytes());
        wire.extend_from_slice(&codec::encode_request(&req));
    }
    client.sock.write_all(&wire).await.unwrap();
    for i in 0..5 {
        let resp = client.recv().await;
        assert_eq!(resp.status, 200);
        assert_eq!(resp.body, format!("b{i}").into_bytes());
    }
    assert_eq!(backend.violation_count(), 0, "backend observed pipelining");
    daemon.shutdown().await;
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn concurrent_clients_share_a_bounded_pool() {
    let backend = spawn_backend(BackendOptions::new(Protocol::Http11)).await.unwrap();
    let (daemon, target) = up(&routed_config(&[backend.addr], Protocol::Http11, LbPolicy::RoundRobin)).await;

    let report = run_load(
        LoadOptions::new(target, Protocol::Http11).connections(8).payload(128).requests(40),
    )
    .await;
    assert_eq!(report.ok, 8 * 40);
    assert_eq!(report.errors + report.affinity_violations, 0);
    assert_eq!(backend.violation_count(), 0);

    let pools = daemon.state().pools.stats().await;
    let total_conns: usize = pools.iter().map(|p| p.connections).sum();
    assert!(
        total_conns <= xlb_core::limits::POOL_MAX_PER_ENDPOINT,
        "pool exceeded cap: {total_conns}"
    );
    assert!(total_conns >= 1);
    daemon.shutdown().await;
}

#[tokio::test]
async fn backend_death_yields_503_then_recovers() {
    let backend = spawn_backend(BackendOptions::new(Protocol::Http11)).await.unwrap();
    let addr = backend.addr;
    let (daemon, target) = up(&routed_config(&[addr], Protocol::Http11, LbPolicy::RoundRobin)).await;

    let mut client = Client::connect(target).await;
    assert_eq!(client.roundtrip(&Request::new("GET", "/")).await.status, 200);

    backend.abort();
    drop(backend);
    tokio::time::sleep(Duration::from_millis(50)).await;

    // Dead backend: requests answer 503 instead of hanging. The relay
    // may need one request to notice the stale pooled connection.
    let mut saw_503 = false;
    for _ in 0..5 {
        let mut c = Client::connect(target).await;
        let resp = c.roundtrip(&Request::new("GET", "/")).await;
        if resp.status == 503 {
            assert_eq!(resp.header("x-xlb-error"), Some("backend_unavailable"));
            saw_503 = true;
            break;
        }
    }
    assert!(saw_503, "no 503 after backend death");

    // Same address comes back: traffic must flow again.
    let mut opts = BackendOptions::new(Protocol::Http11);
    opts.addr = addr;
    let revived = spawn_backend(opts).await.expect("rebind backend port");
    let deadline = Instant::now() + Duration::from_secs(5);
    loop {
        let mut c = Client::connect(target).await;
        let resp = c.roundtrip(&Request::new("GET", "/")).await;
        if resp.status == 200 {
            break;
        }
        assert!(Instant::now() < deadline, "never recovered after backend restart");
        tokio::time::sleep(Duration::from_millis(50)).await;
    }
    drop(revived);
    drop(client);
    daemon.shutdown().await;
}

#[tokio::test]
async fn slow_backend_times_out_with_504() {
    let mut bopts = BackendOptions::new(Protocol::Http11);
    bopts.think = Duration::from_secs(5);
    let backend = spawn_backend(bopts).await.unwrap();
    let (daemon, target) = up_with(
        &routed_config(&[backend.addr], Protocol::Http11, LbPolicy::RoundRobin),
        |o| o.dispatch_timeout = Duration::from_millis(300),
    )
    .await;

    let mut client = Client::connect(target).await;
    let t0 = Instant::now();
    let resp = client.roundtrip(&Request::new("GET", "/")).await;
    assert_eq!(resp.status, 504);
    assert_eq!(resp.header("x-xlb-error"), Some("dispatch_timeout"));
    assert!(t0.elapsed() < Duration::from_secs(3), "timeout fired too late");
    daemon.shutdown().await;
}

#[tokio::test]
async fn mux_timeout_fails_stream_and_counts_late_orphan() {
    let mut bopts = BackendOptions::new(Protocol::Mux);
    bopts.think = Duration::from_millis(900);
    let backend = spawn_backend(bopts).await.unwrap();
    let (daemon, target) = up_with(
        &routed_config(&[backend.addr], Protocol::Mux, LbPolicy::RoundRobin),
        |o| o.dispatch_timeout = Duration::from_millis(200),
    )
    .await;

    let mut client = Client::connect(target).await;
    let resp = client.roundtrip(&Request::new("GET", "/").into_mux(3)).await;
    assert_eq!(resp.status, 504);
    assert_eq!(resp.stream_id, Some(3));

    // The backend answers ~700ms after the failure; that response no
    // longer has a requester and must be counted, not delivered.
    tokio::time::sleep(Duration::from_millis(1200)).await;
    let m = daemon.state().metrics().expect("metrics map");
    assert!(
        m.counter_load(slots::ORPHAN_RESPONSES) >= 1,
        "late response was not recorded as an orphan"
    );
    daemon.shutdown().await;
}

#[tokio::test]
async fn passthrough_tunnels_and_accounts_bytes() {
    let backend = spawn_backend(BackendOptions::new(Protocol::Http11)).await.unwrap();
    let (daemon, target) = up(&passthrough_config(backend.addr)).await;

    let mut client = Client::connect(target).await;
    for _ in 0..2 {
        let resp = client.roundtrip(&Request::new("GET", "/x").with_body(vec![7u8; 256])).await;
        assert_eq!(resp.status, 200);
        assert_eq!(resp.body, vec![7u8; 256]);
    }
    drop(client);
    tokio::time::sleep(Duration::from_millis(50)).await;

    let state = daemon.state();
    let totals = xlb_core::metrics::totals(&state.flows, &state.metrics().unwrap());
    assert_eq!(totals.requests, 2, "tunneled requests are still counted");
    assert!(totals.tunneled_tx_bytes > 512, "tx {}", totals.tunneled_tx_bytes);
    assert!(totals.tunneled_rx_bytes > 512, "rx {}", totals.tunneled_rx_bytes);
    // The bypass path never uses the dispatch machinery.
    assert_eq!(totals.dispatches, 0);
    daemon.shutdown().await;
}

#[tokio::test]
async fn tenants_get_separate_pools_to_a_shared_backend() {
    let backend = spawn_backend(BackendOptions::new(Protocol::Http11)).await.unwrap();
    let binds: Vec<SocketAddr> = {
        let l1 = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
        let l2 = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
        vec![l1.local_addr().unwrap(), l2.local_addr().unwrap()]
    };
    let mk = |name: &str, tenant: &str, bind: SocketAddr| Listener {
        name: name.into(),
        bind,
        virtual_ip: None,
        tenant_group: tenant.into(),
        filters: vec![Filter {
            protocol: Protocol::Http11,
            routes: vec![RouteRule {
                field: MatchField::Path,
                kind: MatchKind::Prefix,
                value: "/".into(),
                cluster: "shared".into(),
            }],
        }],
        default_cluster: None,
    };
    let snap = ConfigSnapshot {
        version: 1,
        listeners: vec![mk("one", "tenant-a", binds[0]), mk("two", "tenant-b", binds[1])],
        clusters: vec![Cluster {
            name: "shared".into(),
            policy: LbPolicy::RoundRobin,
            endpoints: vec![ep(backend.addr)],
        }],
    };
    let (daemon, _) = up_with(&snap, |o| o.preconnect = false).await;
    let t1 = daemon.listener_addr(binds[0]).await.unwrap();
    let t2 = daemon.listener_addr(binds[1]).await.unwrap();

    let mut c1 = Client::connect(t1).await;
    let mut c2 = Client::connect(t2).await;
    assert_eq!(c1.roundtrip(&Request::new("GET", "/")).await.status, 200);
    assert_eq!(c2.roundtrip(&Request::new("GET", "/")).await.status, 200);

    let pools = daemon.state().pools.stats().await;
    let tenants: std::collections::HashSet<&str> =
        pools.iter().map(|p| p.tenant.as_str()).collect();
    assert_eq!(tenants.len(), 2, "expected one pool per tenant: {pools:?}");
    daemon.shutdown().await;
}

#[tokio::test]
async fn preconnect_establishes_minimum_pool() {
    let backend = spawn_backend(BackendOptions::new(Protocol::Http11)).await.unwrap();
    let snap = routed_config(&[backend.addr], Protocol::Http11, LbPolicy::RoundRobin);

    let (eager, _) = up(&snap).await;
    tokio::time::sleep(Duration::from_millis(100)).await;
    let conns: usize = eager.state().pools.stats().await.iter().map(|p| p.connections).sum();
    assert!(conns >= xlb_core::limits::POOL_MIN_PER_ENDPOINT, "no warm connection");
    eager.shutdown().await;

    let (lazy, _) = up_with(&snap, |o| o.preconnect = false).await;
    tokio::time::sleep(Duration::from_millis(100)).await;
    let conns: usize = lazy.state().pools.stats().await.iter().map(|p| p.connections).sum();
    assert_eq!(conns, 0, "lazy boot should not dial backends");
    lazy.shutdown().await;
}

#[tokio::test]
async fn config_delta_reroutes_live_connections() {
    let a = spawn_backend(BackendOptions::new(Protocol::Http11)).await.unwrap();
    let b = spawn_backend(BackendOptions::new(Protocol::Http11)).await.unwrap();
    let mut snap = routed_config(&[a.addr], Protocol::Http11, LbPolicy::RoundRobin);
    let (daemon, target) = up(&snap).await;

    let mut client = Client::connect(target).await;
    assert_eq!(backend_port(&client.roundtrip(&Request::new("GET", "/")).await), a.addr.port());

    // Repoint the cluster at backend B; the connected client must
    // follow without reconnecting.
    snap.clusters[0].endpoints = vec![ep(b.addr)];
    snap.version = 2;
    let applied = daemon.submit(serialize_config(&snap).as_bytes()).await.expect("delta apply");
    assert_eq!(applied.version, 2);

    assert_eq!(backend_port(&client.roundtrip(&Request::new("GET", "/")).await), b.addr.port());
    daemon.shutdown().await;
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn dispatch_completion_conservation_after_churn() {
    let mut bopts = BackendOptions::new(Protocol::Http11);
    bopts.think = Duration::from_millis(1);
    let backend = spawn_backend(bopts).await.unwrap();
    let (daemon, target) = up(&routed_config(&[backend.addr], Protocol::Http11, LbPolicy::RoundRobin)).await;

    let report = run_load(
        LoadOptions::new(target, Protocol::Http11).connections(6).payload(32).requests(50),
    )
    .await;
    assert_eq!(report.ok, 300);

    // Kill the backend mid-burst on a second wave to force failures.
    let load = tokio::spawn(run_load(
        LoadOptions::new(target, Protocol::Http11).connections(4).requests(200),
    ));
    tokio::time::sleep(Duration::from_millis(30)).await;
    backend.abort();
    let _ = load.await;

    // Once quiet, every armed dispatch must have been completed,
    // successfully or not.
    tokio::time::sleep(Duration::from_millis(300)).await;
    let m = daemon.state().metrics().unwrap();
    let dispatches = m.counter_load(slots::DISPATCHES);
    let completions = m.counter_load(slots::COMPLETIONS);
    assert!(dispatches >= 300);
    assert_eq!(dispatches, completions, "dispatch/completion imbalance");
    daemon.shutdown().await;
}
