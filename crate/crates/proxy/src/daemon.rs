//! Daemon shell: parse and flatten the config, bind listeners, keep
//! pools pre-established, and apply submitted config documents as
//! store deltas without interrupting traffic.

use std::collections::{HashMap, HashSet};
use std::net::SocketAddr;
use std::sync::Arc;
use std::time::Duration;

use tokio::net::TcpListener;
use tokio::task::JoinHandle;

use xlb_core::codec::Protocol;
use xlb_core::config::{cluster_protocols, parse_config_versioned, ConfigSnapshot};
use xlb_core::router::MatchOrder;
use xlb_core::store::StoreError;
use xlb_core::NestedMapStore;

use crate::pool::PoolKey;
use crate::relay::serve_ps;
use crate::state::{Mode, ProxyState};

#[derive(Debug, thiserror::Error)]
pub enum BootError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("bind {0} failed: {1}")]
    Bind(SocketAddr, String),
}

impl BootError {
    /// Process exit code the daemon maps this failure to.
    pub fn exit_code(&self) -> i32 {
        match self {
            BootError::Config(_) => 2,
            BootError::Bind(_, _) => 3,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ApplyError {
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("version conflict: store at {current}, submitted {proposed}")]
    VersionConflict { current: u64, proposed: u64 },
    #[error("bind {0} failed: {1}")]
    Bind(SocketAddr, String),
    #[error("apply failed: {0}")]
    Internal(String),
}

/// Result of a successful config submission.
#[derive(Debug, Clone, Copy)]
pub struct Applied {
    pub version: u64,
    pub ops: usize,
}

pub struct DaemonOptions {
    pub doc: Vec<u8>,
    pub admin_addr: SocketAddr,
    pub mode: Mode,
    pub match_order: MatchOrder,
    pub dispatch_timeout: Duration,
    pub connect_timeout: Duration,
    /// Pre-establish pool connections at boot and after config applies.
    pub preconnect: bool,
}

impl DaemonOptions {
    pub fn new(doc: Vec<u8>) -> Self {
        DaemonOptions {
            doc,
            admin_addr: ([127, 0, 0, 1], xlb_core::limits::DEFAULT_ADMIN_PORT).into(),
            mode: Mode::Inline,
            match_order: MatchOrder::First,
            dispatch_timeout: Duration::from_secs(xlb_core::limits::DISPATCH_TIMEOUT_SECS),
            connect_timeout: Duration::from_secs(5),
            preconnect: true,
        }
    }
}

pub(crate) struct ListenerTask {
    local: SocketAddr,
    handle: JoinHandle<()>,
}

/// Shared by the admin server and the daemon facade.
pub struct DaemonCore {
    pub state: Arc<ProxyState>,
    pub(crate) binds: tokio::sync::Mutex<HashMap<SocketAddr, ListenerTask>>,
}

impl DaemonCore {
    /// Configured bind → actually bound address (differs for port 0).
    pub async fn listener_addrs(&self) -> HashMap<SocketAddr, SocketAddr> {
        self.binds
            .lock()
            .await
            .iter()
            .map(|(k, v)| (*k, v.local))
            .collect()
    }
}

/// A running daemon. Dropping it does not stop the tasks; call
/// [`Daemon::shutdown`] or let the process exit.
pub struct Daemon {
    core: Arc<DaemonCore>,
    admin_local: SocketAddr,
    admin_task: JoinHandle<()>,
}

impl Daemon {
    pub fn admin_addr(&self) -> SocketAddr {
        self.admin_local
    }

    pub fn state(&self) -> &Arc<ProxyState> {
        &self.core.state
    }

    pub fn core(&self) -> &Arc<DaemonCore> {
        &self.core
    }

    /// Actual accept address for a configured listener bind.
    pub async fn listener_addr(&self, configured: SocketAddr) -> Option<SocketAddr> {
        self.core.binds.lock().await.get(&configured).map(|t| t.local)
    }

    /// Submit a full config document, as the admin POST endpoint does.
    pub async fn submit(&self, body: &[u8]) -> Result<Applied, ApplyError> {
        apply_document(&self.core, body).await
    }

    pub async fn shutdown(self) {
        self.admin_task.abort();
        let mut binds = self.core.binds.lock().await;
        for (_, t) in binds.drain() {
            t.handle.abort();
        }
    }
}

/// Bring a daemon up: flatten, bind, pre-establish, serve admin.
pub async fn boot(opts: DaemonOptions) -> Result<Daemon, BootError> {
    let snap =
        parse_config_versioned(&opts.doc, 1).map_err(|e| BootError::Config(e.to_string()))?;
    let store = Arc::new(
        NestedMapStore::flatten(&snap).map_err(|e| BootError::Config(e.to_string()))?,
    );
    let state = ProxyState::new(
        store,
        opts.match_order,
        opts.mode,
        opts.dispatch_timeout,
        opts.connect_timeout,
    );
    let core = Arc::new(DaemonCore {
        state: state.clone(),
        binds: tokio::sync::Mutex::new(HashMap::new()),
    });

    {
        let mut binds = core.binds.lock().await;
        for l in &snap.listeners {
            let task = bind_listener(state.clone(), l.bind).await?;
            binds.insert(l.bind, task);
        }
    }

    let admin = TcpListener::bind(opts.admin_addr)
        .await
        .map_err(|e| BootError::Bind(opts.admin_addr, e.to_string()))?;
    let admin_local = admin
        .local_addr()
        .map_err(|e| BootError::Bind(opts.admin_addr, e.to_string()))?;
    let admin_task = tokio::spawn(crate::admin::serve(core.clone(), admin));

    if opts.preconnect {
        pre_establish(&state, &snap).await;
    }

    Ok(Daemon {
        core,
        admin_local,
        admin_task,
    })
}

async fn bind_listener(state: Arc<ProxyState>, configured: SocketAddr) -> Result<ListenerTask, BootError> {
    let listener = TcpListener::bind(configured)
        .await
        .map_err(|e| BootError::Bind(configured, e.to_string()))?;
    let local = listener
        .local_addr()
        .map_err(|e| BootError::Bind(configured, e.to_string()))?;
    let handle = tokio::spawn(async move {
        loop {
            match listener.accept().await {
                Ok((sock, _)) => {
                    tokio::spawn(serve_ps(state.clone(), configured, sock));
                }
                Err(_) => tokio::time::sleep(Duration::from_millis(10)).await,
            }
        }
    });
    Ok(ListenerTask { local, handle })
}

/// Every (tenant, endpoint, protocol) the snapshot's listeners can
/// reach, i.e. the pool keys that should exist.
fn desired_pools(snap: &ConfigSnapshot) -> HashSet<PoolKey> {
    let (protos, _) = cluster_protocols(snap);
    let mut out = HashSet::new();
    for l in &snap.listeners {
        let mut clusters: HashSet<&str> = HashSet::new();
        for f in &l.filters {
            for r in &f.routes {
                clusters.insert(r.cluster.as_str());
            }
        }
        if let Some(dc) = &l.default_cluster {
            clusters.insert(dc.as_str());
        }
        for name in clusters {
            let Some(c) = snap.cluster(name) else { continue };
            let protocol = protos.get(name).copied().unwrap_or(Protocol::Http11);
            for ep in &c.endpoints {
                out.insert(PoolKey {
                    tenant: l.tenant_group.clone(),
                    endpoint: ep.socket_addr(),
                    protocol,
                });
            }
        }
    }
    out
}

/// Warm every desired pool up to the per-endpoint minimum. Unreachable
/// backends are logged and skipped; they connect lazily on first use.
async fn pre_establish(state: &Arc<ProxyState>, snap: &ConfigSnapshot) {
    for key in desired_pools(snap) {
        if let Err(e) = state
            .pools
            .ensure_min(&key.tenant, key.endpoint, key.protocol)
            .await
        {
            tracing::warn!(endpoint = %key.endpoint, error = %e, "pre-establish failed");
        }
    }
}

/// Parse, plan, bind added listeners, apply, retire removed listeners,
/// and reconcile pools. Serialized by the state's apply lock; traffic
/// keeps flowing under whichever rules are published at each instant.
pub async fn apply_document(core: &Arc<DaemonCore>, body: &[u8]) -> Result<Applied, ApplyError> {
    let state = &core.state;
    let _g = state.apply_lock.lock().await;

    let current = state.store.version();
    let snap = parse_config_versioned(body, current + 1)
        .map_err(|e| ApplyError::Invalid(e.to_string()))?;
    let plan = state.store.plan_delta(&snap).map_err(|e| match e {
        StoreError::VersionMismatch { current, proposed } => {
            ApplyError::VersionConflict { current, proposed }
        }
        other => ApplyError::Invalid(other.to_string()),
    })?;
    let ops = plan.op_count();

    // Bind listeners the new config adds before mutating the store, so
    // a failed bind rejects the submission with the old config intact.
    let desired_binds: HashSet<SocketAddr> = snap.listeners.iter().map(|l| l.bind).collect();
    {
        let mut binds = core.binds.lock().await;
        let mut added: Vec<SocketAddr> = Vec::new();
        for &bind in &desired_binds {
            if binds.contains_key(&bind) {
                continue;
            }
            match bind_listener(state.clone(), bind).await {
                Ok(task) => {
                    binds.insert(bind, task);
                    added.push(bind);
                }
                Err(BootError::Bind(addr, msg)) => {
                    for a in added {
                        if let Some(t) = binds.remove(&a) {
                            t.handle.abort();
                        }
                    }
                    return Err(ApplyError::Bind(addr, msg));
                }
                Err(BootError::Config(msg)) => return Err(ApplyError::Internal(msg)),
            }
        }
    }

    // Grace periods in the apply park the calling thread; keep that off
    // the async workers.
    let store = state.store.clone();
    let version = tokio::task::spawn_blocking(move || store.apply_delta(&plan))
        .await
        .map_err(|e| ApplyError::Internal(e.to_string()))?
        .map_err(|e| match e {
            StoreError::VersionMismatch { current, proposed } => {
                ApplyError::VersionConflict { current, proposed }
            }
            other => ApplyError::Internal(other.to_string()),
        })?;

    {
        let mut binds = core.binds.lock().await;
        let stale: Vec<SocketAddr> = binds
            .keys()
            .filter(|b| !desired_binds.contains(b))
            .copied()
            .collect();
        for b in stale {
            if let Some(t) = binds.remove(&b) {
                t.handle.abort();
            }
        }
    }

    let desired = desired_pools(&snap);
    for key in &desired {
        if let Err(e) = state
            .pools
            .ensure_min(&key.tenant, key.endpoint, key.protocol)
            .await
        {
            tracing::warn!(endpoint = %key.endpoint, error = %e, "pre-establish failed");
        }
    }
    state.pools.prune_to(&desired).await;

    Ok(Applied { version, ops })
}
