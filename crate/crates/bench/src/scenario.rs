//! Scenario orchestration: spawns relay daemons as subprocesses,
//! stands up echo backends in-process, drives closed-loop load, and
//! emits one CSV row per sweep point.
//!
//! Two deployment shapes are compared. `inline` runs a single
//! consolidated relay between client and service. `sidecar` models a
//! proxy-per-service deployment by chaining a plain-relay daemon in
//! front of every routed hop, doubling the userspace hops a request
//! crosses.

use std::io::Write as _;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::Stdio;
use std::time::Duration;

use anyhow::{bail, Context};
use tokio::io::{AsyncBufReadExt, AsyncReadExt, AsyncWriteExt, BufReader};
use tokio::net::TcpStream;
use tokio::process::{Child, Command};

use xlb_core::codec::{self, Protocol, Request, Response};
use xlb_core::config::{
    serialize_config, Cluster, ConfigSnapshot, Endpoint, Filter, LbPolicy, Listener, MatchField,
    MatchKind, RouteRule,
};

use crate::backend::{spawn_backend, Backend, BackendOptions};
use crate::loadgen::{run_load, LoadOptions};
use crate::report::{linear_fit, CsvRow, LoadReport};

#[derive(Debug, Clone)]
pub struct ScenarioOpts {
    /// Path to the relay daemon binary.
    pub xlbd: PathBuf,
    /// Measured duration per sweep point.
    pub duration: Duration,
    /// Discarded load before each measurement.
    pub warmup: Duration,
    pub modes: Vec<DeployMode>,
}

impl ScenarioOpts {
    pub fn new(xlbd: PathBuf) -> Self {
        ScenarioOpts {
            xlbd,
            duration: Duration::from_secs(3),
            warmup: Duration::from_millis(500),
            modes: vec![DeployMode::Inline, DeployMode::Sidecar],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DeployMode {
    Inline,
    Sidecar,
}

impl DeployMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            DeployMode::Inline => "inline",
            DeployMode::Sidecar => "sidecar",
        }
    }
}

/// A relay daemon subprocess; killed on drop.
pub struct ChildDaemon {
    child: Child,
    pub admin: SocketAddr,
    // Config file must outlive the spawn; kept for post-mortems too.
    _config: tempfile::NamedTempFile,
}

impl ChildDaemon {
    pub async fn stats(&self) -> anyhow::Result<serde_json::Value> {
        let resp = http_call(self.admin, &Request::new("GET", "/v1/stats")).await?;
        if resp.status != 200 {
            bail!("stats returned {}", resp.status);
        }
        Ok(serde_json::from_slice(&resp.body)?)
    }

    /// Actual bound address of the named listener (binds use port 0).
    pub async fn listener_local(&self, name: &str) -> anyhow::Result<SocketAddr> {
        let stats = self.stats().await?;
        let listeners = stats["listeners"].as_array().context("no listeners in stats")?;
        for l in listeners {
            if l["name"] == name {
                let s = l["local"].as_str().context("listener local missing")?;
                return Ok(s.parse()?);
            }
        }
        bail!("listener {name:?} not found")
    }

    pub async fn kill(mut self) {
        let _ = self.child.kill().await;
    }
}

/// Minimal HTTP/1.1 exchange against an admin or relay endpoint.
pub async fn http_call(addr: SocketAddr, req: &Request) -> anyhow::Result<Response> {
    let mut sock = TcpStream::connect(addr).await?;
    sock.write_all(&codec::encode_request(req)).await?;
    let mut buf = Vec::new();
    loop {
        if let Some((resp, _)) = codec::decode_response(&buf)? {
            return Ok(resp);
        }
        if sock.read_buf(&mut buf).await? == 0 {
            bail!("connection closed before a full response");
        }
    }
}

/// Spawn the daemon with the given config document, wait for its READY
/// line, and return a handle with the admin address.
pub async fn spawn_xlbd(bin: &Path, snap: &ConfigSnapshot) -> anyhow::Result<ChildDaemon> {
    let yaml = serialize_config(snap);
    let mut file = tempfile::NamedTempFile::new()?;
    file.write_all(yaml.as_bytes())?;
    file.flush()?;
    let mut child = Command::new(bin)
        .arg("--config")
        .arg(file.path())
        .arg("--admin-port")
        .arg("0")
        .stdout(Stdio::piped())
        .stderr(Stdio::inherit())
        .kill_on_drop(true)
        .spawn()
        .with_context(|| format!("spawning {}", bin.display()))?;
    let stdout = child.stdout.take().expect("stdout piped");
    let mut lines = BufReader::new(stdout).lines();
    let ready = tokio::time::timeout(Duration::from_secs(10), async {
        while let Some(line) = lines.next_line().await? {
            if line.starts_with("XLBD READY") {
                return Ok(line);
            }
        }
        bail!("daemon exited before READY");
    })
    .await
    .context("timed out waiting for READY")??;
    let admin = ready
        .split_whitespace()
        .find_map(|tok| tok.strip_prefix("admin="))
        .context("READY line missing admin address")?
        .parse()?;
    Ok(ChildDaemon { child, admin, _config: file })
}

fn endpoint(addr: SocketAddr) -> Endpoint {
    Endpoint { addr: addr.ip(), port: addr.port(), weight: 1 }
}

fn loop_bind() -> SocketAddr {
    "127.0.0.1:0".parse().unwrap()
}

/// Reserve `n` distinct loopback ports. Listener binds must be unique
/// within a config, so multi-listener configs cannot all use port 0;
/// the usual reserve-then-release trick is good enough here.
async fn free_ports(n: usize) -> anyhow::Result<Vec<SocketAddr>> {
    let mut held = Vec::with_capacity(n);
    for _ in 0..n {
        held.push(tokio::net::TcpListener::bind("127.0.0.1:0").await?);
    }
    held.iter().map(|l| Ok(l.local_addr()?)).collect()
}

/// One listener routing everything to one cluster over the backends.
pub fn routed_config(backends: &[SocketAddr], protocol: Protocol, policy: LbPolicy) -> ConfigSnapshot {
    ConfigSnapshot {
        version: 1,
        listeners: vec![Listener {
            name: "front".to_string(),
            bind: loop_bind(),
            virtual_ip: None,
            tenant_group: "bench".to_string(),
            filters: vec![Filter {
                protocol,
                routes: vec![RouteRule {
                    field: MatchField::Path,
                    kind: MatchKind::Prefix,
                    value: "/".to_string(),
                    cluster: "pool".to_string(),
                }],
            }],
            default_cluster: None,
        }],
        clusters: vec![Cluster {
            name: "pool".to_string(),
            policy,
            endpoints: backends.iter().copied().map(endpoint).collect(),
        }],
    }
}

/// One filterless listener relaying every connection to `target`.
pub fn passthrough_config(target: SocketAddr) -> ConfigSnapshot {
    ConfigSnapshot {
        version: 1,
        listeners: vec![Listener {
            name: "front".to_string(),
            bind: loop_bind(),
            virtual_ip: None,
            tenant_group: "bench".to_string(),
            filters: Vec::new(),
            default_cluster: Some("next".to_string()),
        }],
        clusters: vec![Cluster {
            name: "next".to_string(),
            policy: LbPolicy::RoundRobin,
            endpoints: vec![endpoint(target)],
        }],
    }
}

/// A deployed system under test: the address clients dial, the
/// daemons between client and service, and the strict backends.
pub struct Entry {
    pub target: SocketAddr,
    pub daemons: Vec<ChildDaemon>,
    pub backends: Vec<Backend>,
}

impl Entry {
    /// Stop everything; returns accumulated backend violations.
    pub async fn teardown(self) -> u64 {
        let mut violations = 0;
        for b in &self.backends {
            violations += b.violation_count();
            b.abort();
        }
        for d in self.daemons {
            d.kill().await;
        }
        violations
    }
}

/// One routed relay over `n_backends`, optionally fronted by a
/// plain-relay daemon (sidecar shape).
pub async fn routed_entry(
    xlbd: &Path,
    mode: DeployMode,
    n_backends: usize,
    backend_opts: BackendOptions,
) -> anyhow::Result<Entry> {
    let mut backends = Vec::new();
    for _ in 0..n_backends {
        backends.push(spawn_backend(backend_opts.clone()).await?);
    }
    let addrs: Vec<SocketAddr> = backends.iter().map(|b| b.addr).collect();
    let routed = spawn_xlbd(
        xlbd,
        &routed_config(&addrs, backend_opts.protocol, LbPolicy::RoundRobin),
    )
    .await?;
    let mut target = routed.listener_local("front").await?;
    let mut daemons = vec![routed];
    if mode == DeployMode::Sidecar {
        let front = spawn_xlbd(xlbd, &passthrough_config(target)).await?;
        target = front.listener_local("front").await?;
        daemons.push(front);
    }
    Ok(Entry { target, daemons, backends })
}

async fn measure(opts: &ScenarioOpts, load: LoadOptions) -> LoadReport {
    if opts.warmup > Duration::ZERO {
        let mut warm = load.clone();
        warm.requests_per_loop = None;
        warm.duration = Some(opts.warmup);
        let _ = run_load(warm).await;
    }
    run_load(load).await
}

fn emit(rows: &mut Vec<CsvRow>, row: CsvRow, report: &LoadReport) {
    let ratio = report
        .concurrency_ratio()
        .map(|r| format!("{r:.2}"))
        .unwrap_or_else(|| "-".to_string());
    eprintln!(
        "# {} mode={} param={} {} loop_identity={}",
        row.scenario,
        row.mode,
        row.param,
        report.human(),
        ratio
    );
    rows.push(row);
}

/// Throughput and latency versus concurrent client connections.
pub async fn connections(opts: &ScenarioOpts) -> anyhow::Result<Vec<CsvRow>> {
    let mut rows = Vec::new();
    for &mode in &opts.modes {
        for &conns in &[1usize, 8, 64] {
            let entry =
                routed_entry(&opts.xlbd, mode, 2, BackendOptions::new(Protocol::Http11)).await?;
            let report = measure(
                opts,
                LoadOptions::new(entry.target, Protocol::Http11)
                    .connections(conns)
                    .duration(opts.duration),
            )
            .await;
            let violations = entry.teardown().await;
            let mut row = CsvRow::from_report("connections", mode.as_str(), conns, &report);
            row.errors += violations;
            emit(&mut rows, row, &report);
        }
    }
    Ok(rows)
}

/// Throughput versus request payload size at fixed concurrency.
pub async fn msgsize(opts: &ScenarioOpts) -> anyhow::Result<Vec<CsvRow>> {
    let mut rows = Vec::new();
    for &mode in &opts.modes {
        for &bytes in &[0usize, 1024, 16384] {
            let entry =
                routed_entry(&opts.xlbd, mode, 2, BackendOptions::new(Protocol::Http11)).await?;
            let report = measure(
                opts,
                LoadOptions::new(entry.target, Protocol::Http11)
                    .connections(8)
                    .payload(bytes)
                    .duration(opts.duration),
            )
            .await;
            let violations = entry.teardown().await;
            let mut row = CsvRow::from_report("msgsize", mode.as_str(), bytes, &report);
            row.errors += violations;
            emit(&mut rows, row, &report);
        }
    }
    Ok(rows)
}

/// Build a service chain of `len` routed hops ending at one backend.
/// In sidecar mode every hop gains a plain-relay front, so a request
/// crosses `2 × len` relay processes instead of `len`.
pub async fn chain_entry(xlbd: &Path, mode: DeployMode, len: usize) -> anyhow::Result<Entry> {
    let backend = spawn_backend(BackendOptions::new(Protocol::Http11)).await?;
    let mut next = backend.addr;
    let mut daemons = Vec::new();
    for _ in 0..len {
        let routed =
            spawn_xlbd(xlbd, &routed_config(&[next], Protocol::Http11, LbPolicy::RoundRobin))
                .await?;
        next = routed.listener_local("front").await?;
        daemons.push(routed);
        if mode == DeployMode::Sidecar {
            let front = spawn_xlbd(xlbd, &passthrough_config(next)).await?;
            next = front.listener_local("front").await?;
            daemons.push(front);
        }
    }
    Ok(Entry { target: next, daemons, backends: vec![backend] })
}

/// Latency versus chain length, with a linearity check on the means.
pub async fn chain(opts: &ScenarioOpts) -> anyhow::Result<Vec<CsvRow>> {
    let mut rows = Vec::new();
    for &mode in &opts.modes {
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for &len in &[1usize, 3, 5] {
            let entry = chain_entry(&opts.xlbd, mode, len).await?;
            let report = measure(
                opts,
                LoadOptions::new(entry.target, Protocol::Http11)
                    .connections(8)
                    .duration(opts.duration),
            )
            .await;
            let violations = entry.teardown().await;
            xs.push(len as f64);
            ys.push(report.mean_us);
            let mut row = CsvRow::from_report("chain", mode.as_str(), len, &report);
            row.errors += violations;
            emit(&mut rows, row, &report);
        }
        let (slope, _, r2) = linear_fit(&xs, &ys);
        eprintln!(
            "# chain mode={} latency-vs-length slope={:.1}us/hop r2={:.4}",
            mode.as_str(),
            slope,
            r2
        );
    }
    Ok(rows)
}

/// One consolidated relay hosting N services versus proxy-per-service.
/// Inline keeps a single daemon regardless of N; sidecar adds one
/// plain-relay daemon per service.
pub async fn density(opts: &ScenarioOpts) -> anyhow::Result<Vec<CsvRow>> {
    let mut rows = Vec::new();
    for &mode in &opts.modes {
        for &services in &[1usize, 4, 16] {
            let binds = free_ports(services).await?;
            let mut backends = Vec::new();
            let mut listeners = Vec::new();
            let mut clusters = Vec::new();
            for i in 0..services {
                let b = spawn_backend(BackendOptions::new(Protocol::Http11)).await?;
                listeners.push(Listener {
                    name: format!("svc{i}"),
                    bind: binds[i],
                    virtual_ip: None,
                    tenant_group: format!("tenant{i}"),
                    filters: vec![Filter {
                        protocol: Protocol::Http11,
                        routes: vec![RouteRule {
                            field: MatchField::Path,
                            kind: MatchKind::Prefix,
                            value: "/".to_string(),
                            cluster: format!("svc{i}"),
                        }],
                    }],
                    default_cluster: None,
                });
                clusters.push(Cluster {
                    name: format!("svc{i}"),
                    policy: LbPolicy::RoundRobin,
                    endpoints: vec![endpoint(b.addr)],
                });
                backends.push(b);
            }
            let snap = ConfigSnapshot { version: 1, listeners, clusters };
            let consolidated = spawn_xlbd(&opts.xlbd, &snap).await?;
            let mut daemons = Vec::new();
            let mut targets = Vec::new();
            for i in 0..services {
                let local = consolidated.listener_local(&format!("svc{i}")).await?;
                if mode == DeployMode::Sidecar {
                    let front = spawn_xlbd(&opts.xlbd, &passthrough_config(local)).await?;
                    targets.push(front.listener_local("front").await?);
                    daemons.push(front);
                } else {
                    targets.push(local);
                }
            }
            daemons.push(consolidated);
            let conns_per_service = (16usize / services).max(1);
            let mut loads = Vec::new();
            for &t in &targets {
                loads.push(tokio::spawn(run_load(
                    LoadOptions::new(t, Protocol::Http11)
                        .connections(conns_per_service)
                        .duration(opts.duration),
                )));
            }
            let mut reports = Vec::new();
            for l in loads {
                reports.push(l.await.expect("load task panicked"));
            }
            let report = fold_reports(&reports);
            let mut violations = 0;
            for b in &backends {
                violations += b.violation_count();
                b.abort();
            }
            for d in daemons {
                d.kill().await;
            }
            let mut row = CsvRow::from_report("density", mode.as_str(), services, &report);
            row.errors += violations;
            emit(&mut rows, row, &report);
        }
    }
    Ok(rows)
}

/// Recombine per-target reports; latency percentiles are approximated
/// by weighting each part's percentiles by its sample count.
fn fold_reports(parts: &[LoadReport]) -> LoadReport {
    let mut out = LoadReport::default();
    let mut weighted_mean = 0.0;
    for p in parts {
        out.loops += p.loops;
        out.sent += p.sent;
        out.ok += p.ok;
        out.errors += p.errors;
        out.affinity_violations += p.affinity_violations;
        out.elapsed = out.elapsed.max(p.elapsed);
        out.throughput_rps += p.throughput_rps;
        weighted_mean += p.mean_us * p.ok as f64;
        out.p50_us = out.p50_us.max(p.p50_us);
        out.p99_us = out.p99_us.max(p.p99_us);
        out.max_us = out.max_us.max(p.max_us);
    }
    if out.ok > 0 {
        out.mean_us = weighted_mean / out.ok as f64;
    }
    out
}

/// Foreground latency/throughput on tenant A while tenant B, sharing
/// the same relay, runs a large-payload interferer.
pub async fn interference(opts: &ScenarioOpts) -> anyhow::Result<Vec<CsvRow>> {
    let mut rows = Vec::new();
    for &noise_conns in &[0usize, 8, 32] {
        let binds = free_ports(2).await?;
        let fg_backend = spawn_backend(BackendOptions::new(Protocol::Http11)).await?;
        let bg_backend = spawn_backend(BackendOptions::new(Protocol::Http11)).await?;
        let mk_listener = |name: &str, tenant: &str, bind: SocketAddr| Listener {
            name: name.to_string(),
            bind,
            virtual_ip: None,
            tenant_group: tenant.to_string(),
            filters: vec![Filter {
                protocol: Protocol::Http11,
                routes: vec![RouteRule {
                    field: MatchField::Path,
                    kind: MatchKind::Prefix,
                    value: "/".to_string(),
                    cluster: name.to_string(),
                }],
            }],
            default_cluster: None,
        };
        let snap = ConfigSnapshot {
            version: 1,
            listeners: vec![
                mk_listener("fg", "tenant-a", binds[0]),
                mk_listener("bg", "tenant-b", binds[1]),
            ],
            clusters: vec![
                Cluster {
                    name: "fg".to_string(),
                    policy: LbPolicy::RoundRobin,
                    endpoints: vec![endpoint(fg_backend.addr)],
                },
                Cluster {
                    name: "bg".to_string(),
                    policy: LbPolicy::RoundRobin,
                    endpoints: vec![endpoint(bg_backend.addr)],
                },
            ],
        };
        let daemon = spawn_xlbd(&opts.xlbd, &snap).await?;
        let fg_target = daemon.listener_local("fg").await?;
        let bg_target = daemon.listener_local("bg").await?;
        let bg = if noise_conns > 0 {
            Some(tokio::spawn(run_load(
                LoadOptions::new(bg_target, Protocol::Http11)
                    .connections(noise_conns)
                    .payload(16384)
                    .duration(opts.duration + opts.warmup),
            )))
        } else {
            None
        };
        let report = measure(
            opts,
            LoadOptions::new(fg_target, Protocol::Http11)
                .connections(8)
                .duration(opts.duration),
        )
        .await;
        if let Some(bg) = bg {
            let _ = bg.await;
        }
        let mut violations = fg_backend.violation_count() + bg_backend.violation_count();
        fg_backend.abort();
        bg_backend.abort();
        daemon.kill().await;
        if report.affinity_violations > 0 {
            violations += report.affinity_violations;
        }
        let mut row = CsvRow::from_report("interference", "inline", noise_conns, &report);
        row.errors += violations;
        emit(&mut rows, row, &report);
    }
    Ok(rows)
}

pub const SCENARIOS: &[&str] = &["connections", "msgsize", "chain", "density", "interference"];

async fn run_one(name: &str, opts: &ScenarioOpts) -> anyhow::Result<Vec<CsvRow>> {
    match name {
        "connections" => connections(opts).await,
        "msgsize" => msgsize(opts).await,
        "chain" => chain(opts).await,
        "density" => density(opts).await,
        "interference" => interference(opts).await,
        other => bail!("unknown scenario {other:?} (expected one of {SCENARIOS:?} or \"all\")"),
    }
}

pub async fn run_scenario(name: &str, opts: &ScenarioOpts) -> anyhow::Result<Vec<CsvRow>> {
    if name == "all" {
        let mut rows = Vec::new();
        for s in SCENARIOS {
            rows.extend(run_one(s, opts).await?);
        }
        return Ok(rows);
    }
    run_one(name, opts).await
}
