use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Duration;

use clap::Parser;

use xlb_core::router::MatchOrder;
use xlb_proxy::{boot, DaemonOptions, Mode};

/// Userspace L7 load-balancing daemon.
#[derive(Parser)]
#[command(name = "xlbd", version, about)]
struct Args {
    /// Config file path; falls back to the XLB_CONFIG env var.
    #[arg(long)]
    config: Option<PathBuf>,

    /// Admin API port on 127.0.0.1.
    #[arg(long, default_value_t = xlb_core::limits::DEFAULT_ADMIN_PORT)]
    admin_port: u16,

    /// Deployment flavor label: inline | sidecar.
    #[arg(long, default_value = "inline", value_parser = parse_mode)]
    mode: Mode,

    /// Route rule selection when several match: first | last.
    #[arg(long, default_value = "first", value_parser = parse_order)]
    match_order: MatchOrder,

    /// Log filter (tracing syntax), e.g. info or xlb_proxy=debug.
    #[arg(long, default_value = "info")]
    log_level: String,

    /// Give up on a backend response after this many seconds.
    #[arg(long, default_value_t = xlb_core::limits::DISPATCH_TIMEOUT_SECS)]
    dispatch_timeout_secs: u64,
}

fn parse_order(s: &str) -> Result<MatchOrder, String> {
    s.parse()
}

fn parse_mode(s: &str) -> Result<Mode, String> {
    s.parse()
}

fn main() -> ExitCode {
    let args = Args::parse();

    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env()
                .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new(&args.log_level)),
        )
        .with_writer(std::io::stderr)
        .init();

    let path = match args
        .config
        .or_else(|| std::env::var_os("XLB_CONFIG").map(PathBuf::from))
    {
        Some(p) => p,
        None => {
            eprintln!("xlbd: no config: pass --config or set XLB_CONFIG");
            return ExitCode::from(2);
        }
    };
    let doc = match std::fs::read(&path) {
        Ok(d) => d,
        Err(e) => {
            eprintln!("xlbd: cannot read {}: {e}", path.display());
            return ExitCode::from(2);
        }
    };

    let mut opts = DaemonOptions::new(doc);
    opts.admin_addr = SocketAddr::from(([127, 0, 0, 1], args.admin_port));
    opts.mode = args.mode;
    opts.match_order = args.match_order;
    opts.dispatch_timeout = Duration::from_secs(args.dispatch_timeout_secs);

    let rt = tokio::runtime::Runtime::new().expect("tokio runtime");
    rt.block_on(async move {
        match boot(opts).await {
            Err(e) => {
                eprintln!("xlbd: {e}");
                ExitCode::from(e.exit_code() as u8)
            }
            Ok(daemon) => {
                println!(
                    "XLBD READY admin={} version={}",
                    daemon.admin_addr(),
                    daemon.state().store.version()
                );
                use std::io::Write;
                let _ = std::io::stdout().flush();
                let _ = tokio::signal::ctrl_c().await;
                daemon.shutdown().await;
                ExitCode::SUCCESS
            }
        }
    })
}
