//! Shared daemon state: the config store plus every runtime side table
//! the data plane needs.

use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use xlb_core::lb::LbRuntime;
use xlb_core::metrics::FlowRegistry;
use xlb_core::router::{MatchOrder, RegexCache};
use xlb_core::store::InnerMap;
use xlb_core::NestedMapStore;

use crate::pool::PoolSet;

/// Deployment flavor, reported in stats so harnesses can label runs.
/// `Sidecar` marks a process inserted as an extra hop in front of the
/// routing relay; the daemon itself behaves identically either way —
/// the topology difference lives in the config.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Inline,
    Sidecar,
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "inline" => Ok(Mode::Inline),
            "sidecar" => Ok(Mode::Sidecar),
            other => Err(format!("unknown mode {other:?} (expected inline|sidecar)")),
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Mode::Inline => f.write_str("inline"),
            Mode::Sidecar => f.write_str("sidecar"),
        }
    }
}

/// Nanosecond totals per data-path phase, sampled on every routed
/// request. Cheap enough to keep always-on; the stats endpoint turns
/// them into per-request averages.
#[derive(Default)]
pub struct PhaseProfile {
    /// Wire-to-message decode.
    pub parse_ns: AtomicU64,
    /// Route match + endpoint pick.
    pub balance_ns: AtomicU64,
    /// Pool acquire + handoff to the instance connection.
    pub relay_ns: AtomicU64,
    /// Writing the response back to the client.
    pub reply_ns: AtomicU64,
    /// Requests sampled.
    pub samples: AtomicU64,
}

impl PhaseProfile {
    pub fn add(&self, counter: &AtomicU64, since: Instant) {
        counter.fetch_add(since.elapsed().as_nanos() as u64, Ordering::Relaxed);
    }

    pub fn sampled(&self) {
        self.samples.fetch_add(1, Ordering::Relaxed);
    }
}

/// Everything a connection handler needs, shared once per daemon.
pub struct ProxyState {
    pub store: Arc<NestedMapStore>,
    pub lbrt: LbRuntime,
    pub cache: RegexCache,
    pub flows: FlowRegistry,
    pub pools: PoolSet,
    pub match_order: MatchOrder,
    pub mode: Mode,
    pub dispatch_timeout: Duration,
    pub started: Instant,
    pub profile: PhaseProfile,
    /// Serializes config submissions (plan + apply must be atomic with
    /// respect to other submitters).
    pub(crate) apply_lock: tokio::sync::Mutex<()>,
}

impl ProxyState {
    pub fn new(
        store: Arc<NestedMapStore>,
        match_order: MatchOrder,
        mode: Mode,
        dispatch_timeout: Duration,
        connect_timeout: Duration,
    ) -> Arc<Self> {
        let metrics = store.map(store.roots().metrics);
        Arc::new(ProxyState {
            store,
            lbrt: LbRuntime::new(),
            cache: RegexCache::new(),
            flows: FlowRegistry::new(),
            pools: PoolSet::new(metrics, connect_timeout, dispatch_timeout),
            match_order,
            mode,
            dispatch_timeout,
            started: Instant::now(),
            profile: PhaseProfile::default(),
            apply_lock: tokio::sync::Mutex::new(()),
        })
    }

    /// The aggregate counters map; present whenever a config has been
    /// flattened into the store.
    pub fn metrics(&self) -> Option<Arc<InnerMap>> {
        self.store.map(self.store.roots().metrics)
    }
}
