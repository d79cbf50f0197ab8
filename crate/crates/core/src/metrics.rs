//! Traffic counters: per-flow scratch metrics plus the shared
//! aggregate counters map.
//!
//! Each client connection gets a [`FlowMetrics`] block that only its
//! owning task writes; scrapers read it concurrently. When the flow
//! closes its totals fold into the store's metrics counters map, so
//! the aggregate view is "everything folded so far" plus the live
//! flows still registered.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use dashmap::DashMap;
use serde::Serialize;

use crate::store::InnerMap;

/// Slot assignments in the metrics counters map.
pub mod slots {
    pub const REQUESTS: u32 = 0;
    pub const TX_BYTES: u32 = 1;
    pub const RX_BYTES: u32 = 2;
    pub const NO_ROUTE: u32 = 3;
    pub const ORPHAN_RESPONSES: u32 = 4;
    pub const UNDERFLOW_GUARDS: u32 = 5;
    pub const DISPATCHES: u32 = 6;
    pub const COMPLETIONS: u32 = 7;
    pub const TUNNELED_TX: u32 = 8;
    pub const TUNNELED_RX: u32 = 9;
    pub const FLOWS_OPENED: u32 = 10;
    pub const FLOWS_CLOSED: u32 = 11;
}

pub fn bump(metrics: &InnerMap, slot: u32, n: u64) {
    if n > 0 {
        metrics.counter_fetch_add(slot, n);
    }
}

/// Counters for one client flow. Single-writer: only the flow's task
/// calls the `add_*`/`inc_*` methods.
pub struct FlowMetrics {
    id: u64,
    tx_bytes: AtomicU64,
    rx_bytes: AtomicU64,
    requests: AtomicU64,
    no_route: AtomicU64,
    orphans: AtomicU64,
}

#[derive(Debug, Clone, Serialize, PartialEq, Eq)]
pub struct FlowSnapshot {
    pub id: u64,
    pub tx_bytes: u64,
    pub rx_bytes: u64,
    pub requests: u64,
    pub no_route: u64,
    pub orphans: u64,
}

impl FlowMetrics {
    fn new(id: u64) -> Self {
        Self {
            id,
            tx_bytes: AtomicU64::new(0),
            rx_bytes: AtomicU64::new(0),
            requests: AtomicU64::new(0),
            no_route: AtomicU64::new(0),
            orphans: AtomicU64::new(0),
        }
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn add_tx(&self, n: u64) {
        self.tx_bytes.fetch_add(n, Ordering::Relaxed);
    }

    pub fn add_rx(&self, n: u64) {
        self.rx_bytes.fetch_add(n, Ordering::Relaxed);
    }

    pub fn inc_requests(&self) {
        self.requests.fetch_add(1, Ordering::Relaxed);
    }

    pub fn inc_no_route(&self) {
        self.no_route.fetch_add(1, Ordering::Relaxed);
    }

    pub fn inc_orphans(&self) {
        self.orphans.fetch_add(1, Ordering::Relaxed);
    }

    pub fn snapshot(&self) -> FlowSnapshot {
        FlowSnapshot {
            id: self.id,
            tx_bytes: self.tx_bytes.load(Ordering::Acquire),
            rx_bytes: self.rx_bytes.load(Ordering::Acquire),
            requests: self.requests.load(Ordering::Acquire),
            no_route: self.no_route.load(Ordering::Acquire),
            orphans: self.orphans.load(Ordering::Acquire),
        }
    }
}

/// Registry of live flows.
#[derive(Default)]
pub struct FlowRegistry {
    next: AtomicU64,
    flows: DashMap<u64, Arc<FlowMetrics>>,
}

impl FlowRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn open(&self, metrics: Option<&InnerMap>) -> Arc<FlowMetrics> {
        let id = self.next.fetch_add(1, Ordering::Relaxed);
        let flow = Arc::new(FlowMetrics::new(id));
        self.flows.insert(id, flow.clone());
        if let Some(m) = metrics {
            bump(m, slots::FLOWS_OPENED, 1);
        }
        flow
    }

    /// Remove the flow and fold its totals into the aggregate map.
    pub fn close(&self, id: u64, metrics: Option<&InnerMap>) -> Option<FlowSnapshot> {
        let (_, flow) = self.flows.remove(&id)?;
        let snap = flow.snapshot();
        if let Some(m) = metrics {
            bump(m, slots::REQUESTS, snap.requests);
            bump(m, slots::TX_BYTES, snap.tx_bytes);
            bump(m, slots::RX_BYTES, snap.rx_bytes);
            bump(m, slots::NO_ROUTE, snap.no_route);
            bump(m, slots::ORPHAN_RESPONSES, snap.orphans);
            bump(m, slots::FLOWS_CLOSED, 1);
        }
        Some(snap)
    }

    pub fn live(&self) -> usize {
        self.flows.len()
    }
}

/// Aggregate view used by the stats endpoint.
#[derive(Debug, Clone, Default, Serialize, PartialEq, Eq)]
pub struct TrafficTotals {
    pub requests: u64,
    pub tx_bytes: u64,
    pub rx_bytes: u64,
    pub no_route_match: u64,
    pub orphan_responses: u64,
    pub underflow_guards: u64,
    pub dispatches: u64,
    pub completions: u64,
    pub tunneled_tx_bytes: u64,
    pub tunneled_rx_bytes: u64,
    pub flows_opened: u64,
    pub flows_closed: u64,
    pub live_flows: u64,
}

/// Folded counters plus everything still held by live flows.
pub fn totals(registry: &FlowRegistry, metrics: &InnerMap) -> TrafficTotals {
    let mut t = TrafficTotals {
        requests: metrics.counter_load(slots::REQUESTS),
        tx_bytes: metrics.counter_load(slots::TX_BYTES),
        rx_bytes: metrics.counter_load(slots::RX_BYTES),
        no_route_match: metrics.counter_load(slots::NO_ROUTE),
        orphan_responses: metrics.counter_load(slots::ORPHAN_RESPONSES),
        underflow_guards: metrics.counter_load(slots::UNDERFLOW_GUARDS),
        dispatches: metrics.counter_load(slots::DISPATCHES),
        completions: metrics.counter_load(slots::COMPLETIONS),
        tunneled_tx_bytes: metrics.counter_load(slots::TUNNELED_TX),
        tunneled_rx_bytes: metrics.counter_load(slots::TUNNELED_RX),
        flows_opened: metrics.counter_load(slots::FLOWS_OPENED),
        flows_closed: metrics.counter_load(slots::FLOWS_CLOSED),
        live_flows: registry.live() as u64,
    };
    for entry in registry.flows.iter() {
        let s = entry.value().snapshot();
        t.requests += s.requests;
        t.tx_bytes += s.tx_bytes;
        t.rx_bytes += s.rx_bytes;
        t.no_route_match += s.no_route;
        t.orphan_responses += s.orphans;
    }
    t
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::store::test_support::counters_map;

    #[test]
    fn close_folds_into_aggregate() {
        let reg = FlowRegistry::new();
        let m = counters_map(16);
        let f = reg.open(Some(&m));
        f.add_tx(100);
        f.add_rx(40);
        f.inc_requests();
        f.inc_requests();
        f.inc_no_route();
        let snap = reg.close(f.id(), Some(&m)).unwrap();
        assert_eq!(snap.requests, 2);
        assert_eq!(m.counter_load(slots::REQUESTS), 2);
        assert_eq!(m.counter_load(slots::TX_BYTES), 100);
        assert_eq!(m.counter_load(slots::RX_BYTES), 40);
        assert_eq!(m.counter_load(slots::NO_ROUTE), 1);
        assert_eq!(m.counter_load(slots::FLOWS_OPENED), 1);
        assert_eq!(m.counter_load(slots::FLOWS_CLOSED), 1);
        assert_eq!(reg.live(), 0);
        // double close is a no-op
        assert!(reg.close(snap.id, Some(&m)).is_none());
        assert_eq!(m.counter_load(slots::FLOWS_CLOSED), 1);
    }

    #[test]
    fn totals_include_live_flows() {
        let reg = FlowRegistry::new();
        let m = counters_map(16);
        let done = reg.open(Some(&m));
        done.add_tx(10);
        done.inc_requests();
        reg.close(done.id(), Some(&m));

        let live = reg.open(Some(&m));
        live.add_tx(5);
        live.inc_requests();

        let t = totals(&reg, &m);
        assert_eq!(t.requests, 2);
        assert_eq!(t.tx_bytes, 15);
        assert_eq!(t.flows_opened, 2);
        assert_eq!(t.flows_closed, 1);
        assert_eq!(t.live_flows, 1);
    }

    #[test]
    fn snapshot_is_readable_during_writes() {
        let reg = std::sync::Arc::new(FlowRegistry::new());
        let f = reg.open(None);
        let writer = {
            let f = f.clone();
            std::thread::spawn(move || {
                for _ in 0..10_000 {
                    f.add_tx(1);
                    f.inc_requests();
                }
            })
        };
        let mut last = 0;
        for _ in 0..100 {
            let s = f.snapshot();
            assert!(s.tx_bytes >= last);
            last = s.tx_bytes;
        }
        writer.join().unwrap();
        assert_eq!(f.snapshot().tx_bytes, 10_000);
    }
}
