//! Flat configuration store: every level of the config tree lives in a
//! fixed-capacity inner map of binary records, and parents reference
//! children by map id rather than pointer. A top-level directory maps
//! ids to maps, so the whole structure is traversed as
//! `root id -> record -> child id -> record -> ...`.
//!
//! Concurrency model:
//! - readers traverse lock-free under a [`ReadGuard`]; record slots are
//!   atomically swappable so a slot read yields either the old or the
//!   new record, never a mix;
//! - one writer at a time applies a [`delta::DeltaPlan`]: additions
//!   bottom-up (children before the parent record that announces them),
//!   then one grace wait, then deletions top-down, so a traversal that
//!   began before the delta still resolves every reference it can see;
//! - load-balancer state and traffic counters live in counter-flavored
//!   maps whose slots are plain atomics updated in place, surviving
//!   config deltas that do not remove their owner.
//!
//! Occupancy counts live config records (listener, filter, route,
//! cluster, endpoint) against [`MAP_CAPACITY`]; bookkeeping maps
//! (string chunks, lb directory, counters) do not consume that budget.

mod delta;
mod dump;
mod epoch;
pub(crate) mod record;
mod walk;

use std::collections::HashMap;
use std::sync::atomic::{AtomicU32, AtomicU64, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use arc_swap::{ArcSwap, ArcSwapOption};

use crate::config::ConfigSnapshot;

pub use delta::{AddOp, DeleteOp, DeltaPlan, RootKind};
pub use epoch::EpochGate;

/// Identifier of an inner map; 0 is the null id and never allocated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct MapId(pub u32);

impl MapId {
    pub const NULL: MapId = MapId(0);

    pub fn is_null(self) -> bool {
        self.0 == 0
    }
}

impl std::fmt::Display for MapId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "m{}", self.0)
    }
}

/// What one inner map stores; fixes record shape and flavor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MapRole {
    Listeners,
    Filters,
    Routes,
    Clusters,
    Endpoints,
    /// Pairs cluster indices with their lb counter maps.
    LbDirectory,
    /// 64-byte string chunks backing long record strings.
    StringChunks,
    /// Per-cluster balancer counters (cursor, rng, outstanding).
    LbState,
    /// Global traffic counters.
    Metrics,
}

impl MapRole {
    pub fn is_counters(self) -> bool {
        matches!(self, MapRole::LbState | MapRole::Metrics)
    }

    /// Whether records of this role count against [`MAP_CAPACITY`].
    pub(crate) fn counted(self) -> bool {
        matches!(
            self,
            MapRole::Listeners
                | MapRole::Filters
                | MapRole::Routes
                | MapRole::Clusters
                | MapRole::Endpoints
        )
    }

    pub(crate) fn entry_size(self) -> usize {
        match self {
            MapRole::Listeners => record::LISTENER_LEN,
            MapRole::Filters => record::FILTER_LEN,
            MapRole::Routes => record::ROUTE_LEN,
            MapRole::Clusters => record::CLUSTER_LEN,
            MapRole::Endpoints => record::ENDPOINT_LEN,
            MapRole::LbDirectory => record::LB_DIR_LEN,
            MapRole::StringChunks => record::CHUNK_LEN,
            MapRole::LbState | MapRole::Metrics => 8,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            MapRole::Listeners => "listeners",
            MapRole::Filters => "filters",
            MapRole::Routes => "routes",
            MapRole::Clusters => "clusters",
            MapRole::Endpoints => "endpoints",
            MapRole::LbDirectory => "lb_dir",
            MapRole::StringChunks => "strings",
            MapRole::LbState => "lb_state",
            MapRole::Metrics => "metrics",
        }
    }
}

enum Slots {
    Records {
        slots: Box<[ArcSwapOption<Vec<u8>>]>,
        live: AtomicUsize,
    },
    Counters(Box<[AtomicU64]>),
}

/// One fixed-capacity map of records or counters.
pub struct InnerMap {
    id: MapId,
    role: MapRole,
    slots: Slots,
}

impl InnerMap {
    fn new(id: MapId, role: MapRole, capacity: u32) -> Self {
        let slots = if role.is_counters() {
            Slots::Counters((0..capacity).map(|_| AtomicU64::new(0)).collect())
        } else {
            Slots::Records {
                slots: (0..capacity).map(|_| ArcSwapOption::const_empty()).collect(),
                live: AtomicUsize::new(0),
            }
        };
        InnerMap { id, role, slots }
    }

    pub fn id(&self) -> MapId {
        self.id
    }

    pub fn role(&self) -> MapRole {
        self.role
    }

    pub fn capacity(&self) -> usize {
        match &self.slots {
            Slots::Records { slots, .. } => slots.len(),
            Slots::Counters(c) => c.len(),
        }
    }

    /// Live record count (counter maps report 0).
    pub fn live(&self) -> usize {
        match &self.slots {
            Slots::Records { live, .. } => live.load(Ordering::Acquire),
            Slots::Counters(_) => 0,
        }
    }

    /// Read a record slot; counter slots are materialized as 8
    /// little-endian bytes for uniformity.
    pub fn get(&self, index: u32) -> Option<Arc<Vec<u8>>> {
        match &self.slots {
            Slots::Records { slots, .. } => {
                slots.get(index as usize)?.load_full()
            }
            Slots::Counters(c) => {
                let v = c.get(index as usize)?.load(Ordering::Acquire);
                Some(Arc::new(v.to_le_bytes().to_vec()))
            }
        }
    }

    /// Install a record; returns whether the slot was previously vacant.
    fn put(&self, index: u32, bytes: Vec<u8>) -> bool {
        let Slots::Records { slots, live } = &self.slots else {
            panic!("record write to counter map {}", self.id);
        };
        assert_eq!(bytes.len(), self.role.entry_size(), "record size for {:?}", self.role);
        let was = slots[index as usize].swap(Some(Arc::new(bytes)));
        if was.is_none() {
            live.fetch_add(1, Ordering::AcqRel);
        }
        was.is_none()
    }

    /// Vacate a slot; returns whether it held a record.
    fn clear(&self, index: u32) -> bool {
        let Slots::Records { slots, live } = &self.slots else {
            panic!("record clear on counter map {}", self.id);
        };
        let was = slots[index as usize].swap(None);
        if was.is_some() {
            live.fetch_sub(1, Ordering::AcqRel);
        }
        was.is_some()
    }

    fn counters(&self) -> &[AtomicU64] {
        let Slots::Counters(c) = &self.slots else {
            panic!("counter op on record map {}", self.id);
        };
        c
    }

    pub fn counter_load(&self, index: u32) -> u64 {
        self.counters()[index as usize].load(Ordering::Acquire)
    }

    /// Add and return the previous value.
    pub fn counter_fetch_add(&self, index: u32, delta: u64) -> u64 {
        self.counters()[index as usize].fetch_add(delta, Ordering::AcqRel)
    }

    pub fn counter_store(&self, index: u32, value: u64) {
        self.counters()[index as usize].store(value, Ordering::Release)
    }

    /// Decrement if positive; `false` signals an underflow attempt.
    pub fn counter_try_decrement(&self, index: u32) -> bool {
        let c = &self.counters()[index as usize];
        let mut cur = c.load(Ordering::Acquire);
        loop {
            if cur == 0 {
                return false;
            }
            match c.compare_exchange_weak(cur, cur - 1, Ordering::AcqRel, Ordering::Acquire) {
                Ok(_) => return true,
                Err(now) => cur = now,
            }
        }
    }
}

#[cfg(test)]
pub(crate) mod test_support {
    use super::*;

    /// A free-standing counters map for policy tests.
    pub(crate) fn counters_map(capacity: u32) -> InnerMap {
        InnerMap::new(MapId(u32::MAX - 1), MapRole::LbState, capacity)
    }
}

impl std::fmt::Debug for InnerMap {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("InnerMap")
            .field("id", &self.id)
            .field("role", &self.role)
            .field("capacity", &self.capacity())
            .field("live", &self.live())
            .finish()
    }
}

/// Resolved root map ids.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RootDirectory {
    pub listeners: MapId,
    pub clusters: MapId,
    pub lb_state: MapId,
    pub metrics: MapId,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum StoreError {
    #[error("no record in {map} slot {index}")]
    NotFound { map: MapId, index: u32 },
    #[error("unknown map {0}")]
    UnknownMap(MapId),
    #[error("version {proposed} is not newer than {current}")]
    VersionMismatch { current: u64, proposed: u64 },
    #[error("record count {needed} exceeds capacity {bound}")]
    CapacityExceeded { needed: usize, bound: usize },
    #[error("invalid delta plan: {0}")]
    InvalidPlan(String),
    #[error("corrupt store: {0}")]
    Corrupt(String),
}

/// The store. See the module docs for the concurrency model.
pub struct NestedMapStore {
    table: ArcSwap<HashMap<u32, Arc<InnerMap>>>,
    listeners_root: AtomicU32,
    clusters_root: AtomicU32,
    lb_root: AtomicU32,
    metrics_root: AtomicU32,
    version: AtomicU64,
    occupancy: AtomicUsize,
    occupancy_peak: AtomicUsize,
    resolves: AtomicU64,
    next_map_id: AtomicU32,
    gate: EpochGate,
    apply_lock: Mutex<()>,
}

/// Keeps the reclamation grace period open while a traversal runs.
/// Hold only across synchronous store walks.
pub struct ReadGuard<'a> {
    gate: &'a EpochGate,
    ticket: Option<epoch::Ticket>,
}

impl Drop for ReadGuard<'_> {
    fn drop(&mut self) {
        if let Some(t) = self.ticket.take() {
            self.gate.leave(t);
        }
    }
}

impl NestedMapStore {
    /// A store with no configuration; roots are null until the first
    /// delta lands.
    pub fn empty() -> Self {
        NestedMapStore {
            table: ArcSwap::from_pointee(HashMap::new()),
            listeners_root: AtomicU32::new(0),
            clusters_root: AtomicU32::new(0),
            lb_root: AtomicU32::new(0),
            metrics_root: AtomicU32::new(0),
            version: AtomicU64::new(0),
            occupancy: AtomicUsize::new(0),
            occupancy_peak: AtomicUsize::new(0),
            resolves: AtomicU64::new(0),
            next_map_id: AtomicU32::new(1),
            gate: EpochGate::new(),
            apply_lock: Mutex::new(()),
        }
    }

    /// Build a store holding `snap`; equivalent to planning and
    /// applying a delta against an empty store.
    pub fn flatten(snap: &ConfigSnapshot) -> Result<Self, StoreError> {
        let store = Self::empty();
        let plan = store.plan_delta(snap)?;
        store.apply_delta(&plan)?;
        Ok(store)
    }

    pub fn begin_read(&self) -> ReadGuard<'_> {
        ReadGuard {
            gate: &self.gate,
            ticket: Some(self.gate.enter()),
        }
    }

    pub fn roots(&self) -> RootDirectory {
        RootDirectory {
            listeners: MapId(self.listeners_root.load(Ordering::Acquire)),
            clusters: MapId(self.clusters_root.load(Ordering::Acquire)),
            lb_state: MapId(self.lb_root.load(Ordering::Acquire)),
            metrics: MapId(self.metrics_root.load(Ordering::Acquire)),
        }
    }

    pub fn version(&self) -> u64 {
        self.version.load(Ordering::Acquire)
    }

    /// Live config records counted against [`crate::limits::MAP_CAPACITY`].
    pub fn occupancy(&self) -> usize {
        self.occupancy.load(Ordering::Acquire)
    }

    /// High-water mark of [`Self::occupancy`] over the store's life.
    pub fn occupancy_peak(&self) -> usize {
        self.occupancy_peak.load(Ordering::Acquire)
    }

    /// Total `resolve` calls served; lookup-work accounting for tests
    /// and stats.
    pub fn resolve_count(&self) -> u64 {
        self.resolves.load(Ordering::Relaxed)
    }

    pub fn map(&self, id: MapId) -> Option<Arc<InnerMap>> {
        self.table.load().get(&id.0).cloned()
    }

    pub fn map_count(&self) -> usize {
        self.table.load().len()
    }

    /// Look up one record by map id and slot index.
    pub fn resolve(&self, map: MapId, index: u32) -> Result<Arc<Vec<u8>>, StoreError> {
        self.resolves.fetch_add(1, Ordering::Relaxed);
        let table = self.table.load();
        let inner = table.get(&map.0).ok_or(StoreError::UnknownMap(map))?;
        inner.get(index).ok_or(StoreError::NotFound { map, index })
    }

    pub(crate) fn alloc_map_id(&self) -> MapId {
        let id = self.next_map_id.fetch_add(1, Ordering::AcqRel);
        assert_ne!(id, u32::MAX, "map id space exhausted");
        MapId(id)
    }

    fn bump_occupancy(&self, delta: isize) {
        if delta >= 0 {
            let now = self.occupancy.fetch_add(delta as usize, Ordering::AcqRel) + delta as usize;
            self.occupancy_peak.fetch_max(now, Ordering::AcqRel);
        } else {
            self.occupancy.fetch_sub((-delta) as usize, Ordering::AcqRel);
        }
    }

    fn set_root(&self, root: RootKind, id: MapId) {
        let cell = match root {
            RootKind::Listeners => &self.listeners_root,
            RootKind::Clusters => &self.clusters_root,
            RootKind::LbState => &self.lb_root,
            RootKind::Metrics => &self.metrics_root,
        };
        cell.store(id.0, Ordering::Release);
    }

    fn table_insert(&self, map: Arc<InnerMap>) {
        self.table.rcu(|t| {
            let mut t = HashMap::clone(t);
            t.insert(map.id().0, map.clone());
            t
        });
    }

    fn table_remove(&self, id: MapId) -> Option<Arc<InnerMap>> {
        let mut removed = None;
        self.table.rcu(|t| {
            let mut t = HashMap::clone(t);
            removed = t.remove(&id.0);
            t
        });
        removed
    }

    /// Writer-side grace wait; used by callers that hand out raw map
    /// references outside guard scope (e.g. draining relays).
    pub fn synchronize(&self) {
        let _g = self.apply_lock.lock().unwrap();
        self.gate.synchronize();
    }
}

impl std::fmt::Debug for NestedMapStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("NestedMapStore")
            .field("version", &self.version())
            .field("maps", &self.map_count())
            .field("occupancy", &self.occupancy())
            .finish()
    }
}
