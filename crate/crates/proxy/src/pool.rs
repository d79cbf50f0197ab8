//! Per-tenant pools of pre-established backend connections.
//!
//! Pools are keyed by (tenant group, endpoint, protocol): listeners of
//! one tenant group never touch another group's sockets. Within one
//! key the pool grows on demand up to `POOL_MAX_PER_ENDPOINT`; beyond
//! that, dispatches share the least-loaded connection through its
//! request map or hold queue.

use std::collections::HashSet;
use std::net::SocketAddr;
use std::sync::atomic::{AtomicBool, AtomicU64, AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Duration;

use dashmap::DashMap;
use tokio::net::TcpStream;
use tokio::sync::{mpsc, Mutex};

use xlb_core::codec::Protocol;
use xlb_core::limits::{POOL_MAX_PER_ENDPOINT, POOL_MIN_PER_ENDPOINT};
use xlb_core::store::InnerMap;

use crate::relay::{run_is, Dispatch, IsShared};

const IS_MAILBOX: usize = 256;

/// Outstanding requests a multiplexed connection absorbs before the
/// pool opens another socket to the same endpoint.
const MUX_SHARE_DEPTH: usize = 64;

#[derive(Debug, thiserror::Error)]
pub enum PoolError {
    #[error("connect to {0} failed: {1}")]
    Connect(SocketAddr, String),
    #[error("connect to {0} timed out")]
    Timeout(SocketAddr),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct PoolKey {
    pub tenant: String,
    pub endpoint: SocketAddr,
    pub protocol: Protocol,
}

/// Cheap cloneable reference to a live instance connection.
#[derive(Clone)]
pub struct IsHandle {
    pub id: u64,
    pub endpoint: SocketAddr,
    pub protocol: Protocol,
    tx: mpsc::Sender<Dispatch>,
    outstanding: Arc<AtomicUsize>,
    closed: Arc<AtomicBool>,
}

impl IsHandle {
    pub fn outstanding(&self) -> usize {
        self.outstanding.load(Ordering::Acquire)
    }

    pub fn is_closed(&self) -> bool {
        self.closed.load(Ordering::Acquire) || self.tx.is_closed()
    }

    /// Hand a dispatch to the connection task. On failure the dispatch
    /// comes back so the caller can settle it.
    pub(crate) async fn dispatch(&self, d: Dispatch) -> Result<(), Dispatch> {
        self.outstanding.fetch_add(1, Ordering::AcqRel);
        match self.tx.send(d).await {
            Ok(()) => Ok(()),
            Err(e) => {
                self.outstanding.fetch_sub(1, Ordering::AcqRel);
                Err(e.0)
            }
        }
    }
}

#[derive(Default)]
struct EndpointPool {
    conns: Vec<IsHandle>,
    /// Connections currently being established, counted so concurrent
    /// acquires cannot overshoot the per-endpoint cap.
    connecting: usize,
}

/// Occupancy of one pool key, for the stats endpoint.
#[derive(Debug, Clone, serde::Serialize)]
pub struct PoolStat {
    pub tenant: String,
    pub endpoint: String,
    pub protocol: String,
    pub connections: usize,
    pub outstanding: usize,
}

pub struct PoolSet {
    pools: DashMap<PoolKey, Arc<Mutex<EndpointPool>>>,
    next_id: AtomicU64,
    metrics: Option<Arc<InnerMap>>,
    connect_timeout: Duration,
    dispatch_timeout: Duration,
}

impl PoolSet {
    pub fn new(
        metrics: Option<Arc<InnerMap>>,
        connect_timeout: Duration,
        dispatch_timeout: Duration,
    ) -> Self {
        PoolSet {
            pools: DashMap::new(),
            next_id: AtomicU64::new(1),
            metrics,
            connect_timeout,
            dispatch_timeout,
        }
    }

    pub fn connect_timeout(&self) -> Duration {
        self.connect_timeout
    }

    fn slot(&self, key: PoolKey) -> Arc<Mutex<EndpointPool>> {
        self.pools.entry(key).or_default().clone()
    }

    /// An IS for `endpoint`: an idle pooled one, a freshly established
    /// one while below the cap, or the least-loaded one to share.
    pub async fn acquire(
        &self,
        tenant: &str,
        endpoint: SocketAddr,
        protocol: Protocol,
    ) -> Result<IsHandle, PoolError> {
        let key = PoolKey {
            tenant: tenant.to_string(),
            endpoint,
            protocol,
        };
        let slot = self.slot(key);
        loop {
            {
                let mut p = slot.lock().await;
                p.conns.retain(|h| !h.is_closed());
                match protocol {
                    // One outstanding request per connection; only an
                    // idle one can take the dispatch directly.
                    Protocol::Http11 => {
                        if let Some(h) = p.conns.iter().find(|h| h.outstanding() == 0) {
                            return Ok(h.clone());
                        }
                    }
                    // Interleaving is what the id remap buys: share the
                    // least-loaded connection until its pipeline is deep
                    // enough to justify another socket.
                    Protocol::Mux => {
                        if let Some(h) = p.conns.iter().min_by_key(|h| h.outstanding()) {
                            if h.outstanding() < MUX_SHARE_DEPTH
                                || p.conns.len() + p.connecting >= POOL_MAX_PER_ENDPOINT
                            {
                                return Ok(h.clone());
                            }
                        }
                    }
                }
                if p.conns.len() + p.connecting < POOL_MAX_PER_ENDPOINT {
                    p.connecting += 1;
                } else if let Some(h) = p.conns.iter().min_by_key(|h| h.outstanding()) {
                    return Ok(h.clone());
                } else {
                    // Every slot is mid-establishment; wait for one.
                    drop(p);
                    tokio::time::sleep(Duration::from_millis(2)).await;
                    continue;
                }
            }
            let established = self.establish(endpoint, protocol).await;
            let mut p = slot.lock().await;
            p.connecting -= 1;
            return match established {
                Ok(h) => {
                    p.conns.push(h.clone());
                    Ok(h)
                }
                Err(e) => Err(e),
            };
        }
    }

    /// Grow the pool for one endpoint to at least
    /// `POOL_MIN_PER_ENDPOINT` connections.
    pub async fn ensure_min(
        &self,
        tenant: &str,
        endpoint: SocketAddr,
        protocol: Protocol,
    ) -> Result<usize, PoolError> {
        let key = PoolKey {
            tenant: tenant.to_string(),
            endpoint,
            protocol,
        };
        let slot = self.slot(key);
        loop {
            {
                let mut p = slot.lock().await;
                p.conns.retain(|h| !h.is_closed());
                if p.conns.len() >= POOL_MIN_PER_ENDPOINT {
                    return Ok(p.conns.len());
                }
            }
            let h = self.establish(endpoint, protocol).await?;
            slot.lock().await.conns.push(h);
        }
    }

    /// Drop every pool key not in `desired`. Their idle connections
    /// close immediately; connections with responses still owed drain
    /// first (the IS task exits once its request map empties).
    pub async fn prune_to(&self, desired: &HashSet<PoolKey>) {
        let stale: Vec<PoolKey> = self
            .pools
            .iter()
            .map(|e| e.key().clone())
            .filter(|k| !desired.contains(k))
            .collect();
        for key in stale {
            if let Some((_, slot)) = self.pools.remove(&key) {
                slot.lock().await.conns.clear();
            }
        }
    }

    pub async fn stats(&self) -> Vec<PoolStat> {
        let mut out = Vec::new();
        let slots: Vec<(PoolKey, Arc<Mutex<EndpointPool>>)> = self
            .pools
            .iter()
            .map(|e| (e.key().clone(), e.value().clone()))
            .collect();
        for (key, slot) in slots {
            let p = slot.lock().await;
            let live: Vec<&IsHandle> = p.conns.iter().filter(|h| !h.is_closed()).collect();
            out.push(PoolStat {
                tenant: key.tenant,
                endpoint: key.endpoint.to_string(),
                protocol: key.protocol.to_string(),
                connections: live.len(),
                outstanding: live.iter().map(|h| h.outstanding()).sum(),
            });
        }
        out.sort_by(|a, b| (&a.tenant, &a.endpoint).cmp(&(&b.tenant, &b.endpoint)));
        out
    }

    async fn establish(
        &self,
        endpoint: SocketAddr,
        protocol: Protocol,
    ) -> Result<IsHandle, PoolError> {
        let sock = tokio::time::timeout(self.connect_timeout, TcpStream::connect(endpoint))
            .await
            .map_err(|_| PoolError::Timeout(endpoint))?
            .map_err(|e| PoolError::Connect(endpoint, e.to_string()))?;
        let id = self.next_id.fetch_add(1, Ordering::Relaxed);
        let outstanding = Arc::new(AtomicUsize::new(0));
        let closed = Arc::new(AtomicBool::new(false));
        let (tx, rx) = mpsc::channel(IS_MAILBOX);
        let shared = IsShared {
            id,
            endpoint,
            protocol,
            timeout: self.dispatch_timeout,
            metrics: self.metrics.clone(),
            outstanding: outstanding.clone(),
            closed: closed.clone(),
        };
        tokio::spawn(run_is(shared, sock, rx));
        Ok(IsHandle {
            id,
            endpoint,
            protocol,
            tx,
            outstanding,
            closed,
        })
    }
}
