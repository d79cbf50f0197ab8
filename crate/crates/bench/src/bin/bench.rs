use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Duration;

use clap::{Parser, Subcommand};

use xlb_bench::backend::{spawn_backend, BackendOptions};
use xlb_bench::loadgen::{run_load, LoadOptions};
use xlb_bench::report::CsvRow;
use xlb_bench::scenario::{run_scenario, DeployMode, ScenarioOpts, SCENARIOS};
use xlb_core::codec::Protocol;

#[derive(Parser)]
#[command(name = "bench", about = "Load-balancer benchmark harness")]
struct Args {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a strict echo backend until interrupted.
    Backend {
        #[arg(long, default_value = "127.0.0.1:0")]
        bind: SocketAddr,
        #[arg(long, default_value = "http1", value_parser = parse_protocol)]
        protocol: Protocol,
        /// Fixed response body size; omitted means echo the request body.
        #[arg(long)]
        response_bytes: Option<usize>,
        /// Artificial service time per request, milliseconds.
        #[arg(long, default_value_t = 0)]
        think_ms: u64,
    },
    /// Drive closed-loop load against a target and print a report.
    Load {
        #[arg(long)]
        target: SocketAddr,
        #[arg(long, default_value = "http1", value_parser = parse_protocol)]
        protocol: Protocol,
        #[arg(long, default_value_t = 1)]
        connections: usize,
        /// Concurrent streams per connection (mux only).
        #[arg(long, default_value_t = 1)]
        streams: usize,
        #[arg(long, default_value_t = 0)]
        payload: usize,
        /// Run for this long; exclusive with --requests.
        #[arg(long, conflicts_with = "requests")]
        duration_secs: Option<u64>,
        /// Requests per loop; exclusive with --duration-secs.
        #[arg(long)]
        requests: Option<u64>,
        #[arg(long, default_value = "/")]
        path: String,
    },
    /// Run a benchmark scenario sweep; CSV on stdout.
    Scenario {
        /// One of the scenario names, or "all".
        #[arg(long, default_value = "all")]
        name: String,
        /// Path to the relay daemon; defaults to an `xlbd` next to this
        /// binary.
        #[arg(long)]
        xlbd_path: Option<PathBuf>,
        #[arg(long, default_value_t = 3)]
        duration_secs: u64,
        #[arg(long, default_value = "both", value_parser = parse_modes)]
        mode: Vec<DeployMode>,
        /// Also write the CSV to this file.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
}

fn parse_protocol(s: &str) -> Result<Protocol, String> {
    match s {
        "http1" | "http11" | "http/1.1" => Ok(Protocol::Http11),
        "mux" => Ok(Protocol::Mux),
        other => Err(format!("unknown protocol {other:?} (expected http1 or mux)")),
    }
}

#[allow(clippy::unnecessary_wraps)]
fn parse_modes(s: &str) -> Result<Vec<DeployMode>, String> {
    match s {
        "inline" => Ok(vec![DeployMode::Inline]),
        "sidecar" => Ok(vec![DeployMode::Sidecar]),
        "both" => Ok(vec![DeployMode::Inline, DeployMode::Sidecar]),
        other => Err(format!("unknown mode {other:?} (expected inline, sidecar, or both)")),
    }
}

fn default_xlbd() -> anyhow::Result<PathBuf> {
    let me = std::env::current_exe()?;
    let dir = me.parent().ok_or_else(|| anyhow::anyhow!("no parent dir for {me:?}"))?;
    let candidate = dir.join("xlbd");
    if candidate.exists() {
        return Ok(candidate);
    }
    anyhow::bail!(
        "xlbd not found at {}; build it or pass --xlbd-path",
        candidate.display()
    )
}

async fn cmd_backend(
    bind: SocketAddr,
    protocol: Protocol,
    response_bytes: Option<usize>,
    think_ms: u64,
) -> anyhow::Result<ExitCode> {
    let mut opts = BackendOptions::new(protocol);
    opts.addr = bind;
    opts.response_bytes = response_bytes;
    opts.think = Duration::from_millis(think_ms);
    let backend = spawn_backend(opts).await?;
    println!("BACKEND READY port={}", backend.addr.port());
    tokio::signal::ctrl_c().await?;
    let violations = backend.violation_count();
    eprintln!(
        "backend served {} requests, {} violations",
        backend.request_count(),
        violations
    );
    Ok(if violations == 0 { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}

#[allow(clippy::too_many_arguments)]
async fn cmd_load(
    target: SocketAddr,
    protocol: Protocol,
    connections: usize,
    streams: usize,
    payload: usize,
    duration_secs: Option<u64>,
    requests: Option<u64>,
    path: String,
) -> anyhow::Result<ExitCode> {
    let mut opts = LoadOptions::new(target, protocol)
        .connections(connections)
        .streams(streams)
        .payload(payload)
        .path(&path);
    match (duration_secs, requests) {
        (Some(d), _) => opts = opts.duration(Duration::from_secs(d)),
        (None, Some(n)) => opts = opts.requests(n),
        (None, None) => opts = opts.duration(Duration::from_secs(10)),
    }
    let report = run_load(opts).await;
    println!("{}", report.human());
    if let Some(ratio) = report.concurrency_ratio() {
        println!("closed_loop_identity={ratio:.3}");
    }
    Ok(if report.errors == 0 && report.affinity_violations == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    })
}

async fn cmd_scenario(
    name: String,
    xlbd_path: Option<PathBuf>,
    duration_secs: u64,
    modes: Vec<DeployMode>,
    csv: Option<PathBuf>,
) -> anyhow::Result<ExitCode> {
    let xlbd = match xlbd_path {
        Some(p) => p,
        None => default_xlbd()?,
    };
    if name != "all" && !SCENARIOS.contains(&name.as_str()) {
        anyhow::bail!("unknown scenario {name:?}; available: {SCENARIOS:?} or \"all\"");
    }
    let mut opts = ScenarioOpts::new(xlbd);
    opts.duration = Duration::from_secs(duration_secs);
    opts.modes = modes;
    let rows = run_scenario(&name, &opts).await?;
    let mut out = String::from(CsvRow::HEADER);
    out.push('\n');
    for row in &rows {
        out.push_str(&row.line());
        out.push('\n');
    }
    print!("{out}");
    if let Some(path) = csv {
        std::fs::write(&path, &out)?;
        eprintln!("# wrote {}", path.display());
    }
    let errored: u64 = rows.iter().map(|r| r.errors).sum();
    Ok(if errored == 0 { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}

fn main() -> ExitCode {
    let args = Args::parse();
    let rt = tokio::runtime::Runtime::new().expect("tokio runtime");
    let result = rt.block_on(async {
        match args.cmd {
            Cmd::Backend { bind, protocol, response_bytes, think_ms } => {
                cmd_backend(bind, protocol, response_bytes, think_ms).await
            }
            Cmd::Load {
                target,
                protocol,
                connections,
                streams,
                payload,
                duration_secs,
                requests,
                path,
            } => {
                cmd_load(
                    target,
                    protocol,
                    connections,
                    streams,
                    payload,
                    duration_secs,
                    requests,
                    path,
                )
                .await
            }
            Cmd::Scenario { name, xlbd_path, duration_secs, mode, csv } => {
                cmd_scenario(name, xlbd_path, duration_secs, mode, csv).await
            }
        }
    });
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
