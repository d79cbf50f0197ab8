//! Delta planning and application.
//!
//! A plan is computed by diffing the stored config against a new
//! snapshot, matching listeners and clusters by name so unchanged
//! subtrees keep their maps (and the lb counters keep their values).
//! Additions run bottom-up — child records and maps land before the
//! parent record that announces them. Deletions run top-down in two
//! steps: after a grace period drains traversals of the old tree,
//! parent slots are vacated; after a second grace period, the subtree
//! maps those slots referenced are dropped. A traversal holding a
//! read ticket therefore resolves every reference it can reach, old
//! or new.
//!
//! `apply_delta` dry-runs the whole plan against a simulation of the
//! directory first: reference resolution, slot bounds, record sizes,
//! bottom-up ordering, and the occupancy bound are all checked before
//! the first real mutation.

use std::collections::{HashMap, HashSet};

use crate::codec::Protocol;
use crate::config::{cluster_protocols, ConfigSnapshot, RouteRule};
use crate::limits::{FILTER_MAX_NUM, MAP_CAPACITY, MAX_ENDPOINTS, ROUTE_MAX_NUM};

use super::record::{
    string_chunks, ClusterRec, EndpointRec, FilterRec, LbDirRec, ListenerRec, MapRef, RouteRec,
    StrVal, STR_INLINE_MAX,
};
use super::walk::{OldFilter, OldListener};
use super::{MapId, MapRole, NestedMapStore, StoreError};

/// Counter slots per lb-state map: cursor, rng, requests, and one
/// outstanding counter per endpoint slot.
pub(crate) const LB_STATE_CAP: u32 = 3 + MAX_ENDPOINTS as u32;
pub(crate) const METRICS_CAP: u32 = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RootKind {
    Listeners,
    Clusters,
    LbState,
    Metrics,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AddOp {
    CreateMap { id: MapId, role: MapRole, capacity: u32 },
    Write { map: MapId, index: u32, bytes: Vec<u8> },
    SetRoot { root: RootKind, map: MapId },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DeleteOp {
    Clear { map: MapId, index: u32 },
    DropMap { id: MapId },
}

/// An ordered two-phase mutation taking the store from one config
/// version to the next.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DeltaPlan {
    pub version_from: u64,
    pub version_to: u64,
    pub adds: Vec<AddOp>,
    pub deletes: Vec<DeleteOp>,
}

impl DeltaPlan {
    pub fn op_count(&self) -> usize {
        self.adds.len() + self.deletes.len()
    }

    pub fn summary(&self) -> String {
        format!(
            "v{} -> v{}: {} adds, {} deletes",
            self.version_from,
            self.version_to,
            self.adds.len(),
            self.deletes.len()
        )
    }
}

fn initial_root_capacity(n: usize) -> u32 {
    ((2 * n.max(1)).next_power_of_two() as u32).max(8)
}

fn grow_capacity(old: u32, need: usize) -> u32 {
    let mut cap = old.max(1);
    while (cap as usize) < need {
        cap *= 2;
    }
    cap
}

struct Planner<'a> {
    store: &'a NestedMapStore,
    adds: Vec<AddOp>,
    /// Writes that occupy a previously vacant counted slot; bounds the
    /// occupancy high-water mark of the apply.
    increments: usize,
}

impl Planner<'_> {
    fn create_map(&mut self, role: MapRole, capacity: u32) -> MapId {
        let id = self.store.alloc_map_id();
        self.adds.push(AddOp::CreateMap { id, role, capacity });
        id
    }

    fn write(&mut self, map: MapId, index: u32, bytes: Vec<u8>, fresh_counted: bool) {
        if fresh_counted {
            self.increments += 1;
        }
        self.adds.push(AddOp::Write { map, index, bytes });
    }

    /// Storage for a string value, spilling to a fresh chunk map when
    /// it does not fit inline.
    fn strval(&mut self, s: &str) -> StrVal {
        if s.len() <= STR_INLINE_MAX {
            StrVal::Inline(s.to_string())
        } else {
            let map = self.create_map(MapRole::StringChunks, StrVal::chunks_for(s.len()));
            for (i, chunk) in string_chunks(s).into_iter().enumerate() {
                self.write(map, i as u32, chunk, false);
            }
            StrVal::Chunked {
                map,
                len: s.len() as u32,
            }
        }
    }

    /// Like [`Self::strval`], but reuses the previous storage when the
    /// value is unchanged, and schedules the old chunk map for removal
    /// when it is not.
    fn strval_rewrite(
        &mut self,
        s: &str,
        old: Option<(&str, Option<MapId>)>,
        drops: &mut Vec<DeleteOp>,
    ) -> StrVal {
        match old {
            Some((os, om)) if os == s => match om {
                Some(map) => StrVal::Chunked {
                    map,
                    len: s.len() as u32,
                },
                None => StrVal::Inline(s.to_string()),
            },
            other => {
                if let Some((_, Some(map))) = other {
                    drops.push(DeleteOp::DropMap { id: map });
                }
                self.strval(s)
            }
        }
    }
}

/// Emit the delete ops for one filter subtree (routes map and any
/// spilled route strings).
fn drop_filter_subtree(f: &OldFilter, out: &mut Vec<DeleteOp>) {
    out.push(DeleteOp::DropMap { id: f.routes_map });
    for r in &f.routes {
        for m in [r.header_map, r.value_map].into_iter().flatten() {
            out.push(DeleteOp::DropMap { id: m });
        }
    }
}

fn drop_listener_subtree(l: &OldListener, out: &mut Vec<DeleteOp>) {
    out.push(DeleteOp::DropMap { id: l.filters_map });
    for f in &l.filters {
        drop_filter_subtree(f, out);
    }
    for m in [l.name_map, l.tenant_map].into_iter().flatten() {
        out.push(DeleteOp::DropMap { id: m });
    }
}

pub(crate) fn plan(store: &NestedMapStore, new: &ConfigSnapshot) -> Result<DeltaPlan, StoreError> {
    let current = store.version();
    if new.version <= current {
        return Err(StoreError::VersionMismatch {
            current,
            proposed: new.version,
        });
    }
    let needed = new.node_count();
    if needed > MAP_CAPACITY {
        return Err(StoreError::CapacityExceeded {
            needed,
            bound: MAP_CAPACITY,
        });
    }
    for l in &new.listeners {
        if l.filters.len() > FILTER_MAX_NUM {
            return Err(StoreError::InvalidPlan(format!(
                "listener {:?} exceeds filter bound",
                l.name
            )));
        }
        for f in &l.filters {
            if f.routes.len() > ROUTE_MAX_NUM {
                return Err(StoreError::InvalidPlan(format!(
                    "listener {:?} exceeds route bound",
                    l.name
                )));
            }
        }
    }
    for c in &new.clusters {
        if c.endpoints.len() > MAX_ENDPOINTS {
            return Err(StoreError::InvalidPlan(format!(
                "cluster {:?} exceeds endpoint bound",
                c.name
            )));
        }
    }

    let old = if current == 0 {
        None
    } else {
        Some(store.read_old_state()?)
    };
    let (protos, _) = cluster_protocols(new);
    let proto_of =
        |name: &str| -> Protocol { protos.get(name).copied().unwrap_or(Protocol::Http11) };

    let mut p = Planner {
        store,
        adds: Vec::new(),
        increments: 0,
    };
    let mut listener_deletes: Vec<DeleteOp> = Vec::new();
    let mut cluster_deletes: Vec<DeleteOp> = Vec::new();
    let mut root_drops: Vec<DeleteOp> = Vec::new();

    if old.is_none() {
        let m = p.create_map(MapRole::Metrics, METRICS_CAP);
        p.adds.push(AddOp::SetRoot {
            root: RootKind::Metrics,
            map: m,
        });
    }

    // ---- cluster side ----
    let n_new_c = new.clusters.len() as u32;
    let no_clusters = [];
    let old_clusters = old.as_ref().map(|o| &o.clusters[..]).unwrap_or(&no_clusters);
    let old_n_c = old_clusters.len() as u32;
    let old_c_by_name: HashMap<&str, &super::walk::OldCluster> = old_clusters
        .iter()
        .map(|c| (c.cluster.name.as_str(), c))
        .collect();

    let (c_root, lb_root, c_rebuilt) = match old.as_ref() {
        None => {
            let cap = initial_root_capacity(new.clusters.len());
            (
                p.create_map(MapRole::Clusters, cap),
                p.create_map(MapRole::LbDirectory, cap),
                true,
            )
        }
        Some(o) if n_new_c as usize > o.clusters_cap as usize => {
            let cap = grow_capacity(o.clusters_cap, n_new_c as usize);
            let nc = p.create_map(MapRole::Clusters, cap);
            let nl = p.create_map(MapRole::LbDirectory, cap);
            root_drops.push(DeleteOp::DropMap { id: o.clusters_root });
            root_drops.push(DeleteOp::DropMap { id: o.lb_root });
            (nc, nl, true)
        }
        Some(o) => (o.clusters_root, o.lb_root, false),
    };

    let mut matched_c: HashSet<&str> = HashSet::new();
    for (i, nc) in new.clusters.iter().enumerate() {
        let i = i as u32;
        let proto = proto_of(&nc.name);
        let cluster_fresh = c_rebuilt || i >= old_n_c;
        match old_c_by_name.get(nc.name.as_str()) {
            Some(oc) => {
                matched_c.insert(nc.name.as_str());
                let old_eps = &oc.cluster.endpoints;
                let (n_old_e, n_new_e) = (old_eps.len(), nc.endpoints.len());
                for (j, ne) in nc.endpoints.iter().enumerate() {
                    if old_eps.get(j) != Some(ne) {
                        let rec = EndpointRec {
                            addr: ne.addr,
                            port: ne.port,
                            weight: ne.weight,
                        };
                        p.write(oc.endpoints_map, j as u32, rec.encode(), j >= n_old_e);
                    }
                }
                for j in n_new_e..n_old_e {
                    cluster_deletes.push(DeleteOp::Clear {
                        map: oc.endpoints_map,
                        index: j as u32,
                    });
                }
                let sem_changed = oc.cluster.policy != nc.policy
                    || oc.protocol != proto
                    || n_old_e != n_new_e;
                if c_rebuilt || oc.index != i || sem_changed {
                    let name = p.strval_rewrite(
                        &nc.name,
                        Some((oc.cluster.name.as_str(), oc.name_map)),
                        &mut cluster_deletes,
                    );
                    let rec = ClusterRec {
                        name,
                        policy: nc.policy,
                        protocol: proto,
                        endpoints: MapRef {
                            id: oc.endpoints_map,
                            scan: n_new_e as u32,
                        },
                    };
                    p.write(c_root, i, rec.encode(), cluster_fresh);
                }
                if c_rebuilt || oc.index != i || n_old_e != n_new_e {
                    let rec = LbDirRec {
                        lb_map: oc.lb_map,
                        endpoint_count: n_new_e as u32,
                    };
                    p.write(lb_root, i, rec.encode(), false);
                }
            }
            None => {
                let ep_map = p.create_map(MapRole::Endpoints, MAX_ENDPOINTS as u32);
                for (j, ne) in nc.endpoints.iter().enumerate() {
                    let rec = EndpointRec {
                        addr: ne.addr,
                        port: ne.port,
                        weight: ne.weight,
                    };
                    p.write(ep_map, j as u32, rec.encode(), true);
                }
                let lb_map = p.create_map(MapRole::LbState, LB_STATE_CAP);
                let name = p.strval(&nc.name);
                let rec = ClusterRec {
                    name,
                    policy: nc.policy,
                    protocol: proto,
                    endpoints: MapRef {
                        id: ep_map,
                        scan: nc.endpoints.len() as u32,
                    },
                };
                p.write(c_root, i, rec.encode(), cluster_fresh);
                let dir = LbDirRec {
                    lb_map,
                    endpoint_count: nc.endpoints.len() as u32,
                };
                p.write(lb_root, i, dir.encode(), false);
            }
        }
    }
    if c_rebuilt {
        // lb directory first: readers load the clusters root before the
        // lb root, so the directory must always cover at least the
        // clusters they can see
        p.adds.push(AddOp::SetRoot {
            root: RootKind::LbState,
            map: lb_root,
        });
        p.adds.push(AddOp::SetRoot {
            root: RootKind::Clusters,
            map: c_root,
        });
    } else {
        // vacate the tail the new config no longer covers: highest slot
        // first so the occupied prefix stays dense, and the clusters
        // root before the lb directory for the same coverage reason
        for idx in (n_new_c..old_n_c).rev() {
            cluster_deletes.push(DeleteOp::Clear { map: c_root, index: idx });
        }
        for idx in (n_new_c..old_n_c).rev() {
            cluster_deletes.push(DeleteOp::Clear { map: lb_root, index: idx });
        }
    }
    for oc in old_clusters {
        if !matched_c.contains(oc.cluster.name.as_str()) {
            cluster_deletes.push(DeleteOp::DropMap { id: oc.endpoints_map });
            cluster_deletes.push(DeleteOp::DropMap { id: oc.lb_map });
            if let Some(m) = oc.name_map {
                cluster_deletes.push(DeleteOp::DropMap { id: m });
            }
        }
    }

    // ---- listener side ----
    let cluster_index: HashMap<&str, u32> = new
        .clusters
        .iter()
        .enumerate()
        .map(|(i, c)| (c.name.as_str(), i as u32))
        .collect();
    let idx_of = |name: &str| -> Result<u32, StoreError> {
        cluster_index.get(name).copied().ok_or_else(|| {
            StoreError::InvalidPlan(format!("route references unknown cluster {name:?}"))
        })
    };

    let n_new_l = new.listeners.len() as u32;
    let no_listeners = [];
    let old_listeners = old.as_ref().map(|o| &o.listeners[..]).unwrap_or(&no_listeners);
    let old_n_l = old_listeners.len() as u32;
    let old_l_by_name: HashMap<&str, &OldListener> = old_listeners
        .iter()
        .map(|l| (l.listener.name.as_str(), l))
        .collect();

    let (l_root, l_rebuilt) = match old.as_ref() {
        None => (
            p.create_map(MapRole::Listeners, initial_root_capacity(new.listeners.len())),
            true,
        ),
        Some(o) if n_new_l as usize > o.listeners_cap as usize => {
            let cap = grow_capacity(o.listeners_cap, n_new_l as usize);
            let nl = p.create_map(MapRole::Listeners, cap);
            root_drops.push(DeleteOp::DropMap { id: o.listeners_root });
            (nl, true)
        }
        Some(o) => (o.listeners_root, false),
    };

    let encode_route = |p: &mut Planner,
                        nr: &RouteRule,
                        want_idx: u32,
                        old: Option<&super::walk::OldRoute>,
                        drops: &mut Vec<DeleteOp>|
     -> Vec<u8> {
        use crate::config::MatchField;
        let (hdr_name, old_hdr) = match (&nr.field, old) {
            (MatchField::Header(h), Some(o)) => {
                let old_h = match &o.rule.field {
                    MatchField::Header(oh) => Some((oh.as_str(), o.header_map)),
                    _ => None,
                };
                (h.as_str(), old_h)
            }
            (MatchField::Header(h), None) => (h.as_str(), None),
            (_, Some(o)) => {
                // field no longer a header match; retire old name storage
                if let Some(m) = o.header_map {
                    drops.push(DeleteOp::DropMap { id: m });
                }
                ("", None)
            }
            _ => ("", None),
        };
        let header_name = p.strval_rewrite(hdr_name, old_hdr, drops);
        let value = p.strval_rewrite(
            &nr.value,
            old.map(|o| (o.rule.value.as_str(), o.value_map)),
            drops,
        );
        RouteRec {
            field: nr.field.clone(),
            header_name,
            kind: nr.kind,
            value,
            cluster_idx: want_idx,
        }
        .encode()
    };

    let mut matched_l: HashSet<&str> = HashSet::new();
    for (i, nl) in new.listeners.iter().enumerate() {
        let i = i as u32;
        let listener_fresh = l_rebuilt || i >= old_n_l;
        let want_dc = match &nl.default_cluster {
            Some(name) => Some(idx_of(name)?),
            None => None,
        };
        match old_l_by_name.get(nl.name.as_str()) {
            Some(ol) => {
                matched_l.insert(nl.name.as_str());
                let (n_old_f, n_new_f) = (ol.filters.len(), nl.filters.len());
                for (j, nf) in nl.filters.iter().enumerate() {
                    match ol.filters.get(j) {
                        Some(of) => {
                            let (n_old_r, n_new_r) = (of.routes.len(), nf.routes.len());
                            for (k, nr) in nf.routes.iter().enumerate() {
                                let want_idx = idx_of(&nr.cluster)?;
                                let or = of.routes.get(k);
                                let differs = match or {
                                    Some(o) => {
                                        o.rule.field != nr.field
                                            || o.rule.kind != nr.kind
                                            || o.rule.value != nr.value
                                            || o.cluster_idx != want_idx
                                    }
                                    None => true,
                                };
                                if differs {
                                    let bytes = encode_route(
                                        &mut p,
                                        nr,
                                        want_idx,
                                        or,
                                        &mut listener_deletes,
                                    );
                                    p.write(of.routes_map, k as u32, bytes, k >= n_old_r);
                                }
                            }
                            for k in n_new_r..n_old_r {
                                listener_deletes.push(DeleteOp::Clear {
                                    map: of.routes_map,
                                    index: k as u32,
                                });
                                let o = &of.routes[k];
                                for m in [o.header_map, o.value_map].into_iter().flatten() {
                                    listener_deletes.push(DeleteOp::DropMap { id: m });
                                }
                            }
                            if of.protocol != nf.protocol || n_old_r != n_new_r {
                                let rec = FilterRec {
                                    protocol: nf.protocol,
                                    routes: MapRef {
                                        id: of.routes_map,
                                        scan: n_new_r as u32,
                                    },
                                };
                                p.write(ol.filters_map, j as u32, rec.encode(), j >= n_old_f);
                            }
                        }
                        None => {
                            let routes_map = p.create_map(MapRole::Routes, ROUTE_MAX_NUM as u32);
                            for (k, nr) in nf.routes.iter().enumerate() {
                                let want_idx = idx_of(&nr.cluster)?;
                                let bytes =
                                    encode_route(&mut p, nr, want_idx, None, &mut listener_deletes);
                                p.write(routes_map, k as u32, bytes, true);
                            }
                            let rec = FilterRec {
                                protocol: nf.protocol,
                                routes: MapRef {
                                    id: routes_map,
                                    scan: nf.routes.len() as u32,
                                },
                            };
                            p.write(ol.filters_map, j as u32, rec.encode(), true);
                        }
                    }
                }
                for j in n_new_f..n_old_f {
                    listener_deletes.push(DeleteOp::Clear {
                        map: ol.filters_map,
                        index: j as u32,
                    });
                    drop_filter_subtree(&ol.filters[j], &mut listener_deletes);
                }
                let sem_changed = ol.listener.bind != nl.bind
                    || ol.listener.virtual_ip != nl.virtual_ip
                    || ol.listener.tenant_group != nl.tenant_group
                    || ol.dc_idx != want_dc
                    || n_old_f != n_new_f;
                if l_rebuilt || ol.index != i || sem_changed {
                    let name = p.strval_rewrite(
                        &nl.name,
                        Some((ol.listener.name.as_str(), ol.name_map)),
                        &mut listener_deletes,
                    );
                    let tenant = p.strval_rewrite(
                        &nl.tenant_group,
                        Some((ol.listener.tenant_group.as_str(), ol.tenant_map)),
                        &mut listener_deletes,
                    );
                    let rec = ListenerRec {
                        name,
                        tenant,
                        bind: nl.bind,
                        virtual_ip: nl.virtual_ip,
                        filters: MapRef {
                            id: ol.filters_map,
                            scan: n_new_f as u32,
                        },
                        default_cluster: want_dc,
                    };
                    p.write(l_root, i, rec.encode(), listener_fresh);
                }
            }
            None => {
                let filters_map = p.create_map(MapRole::Filters, FILTER_MAX_NUM as u32);
                for (j, nf) in nl.filters.iter().enumerate() {
                    let routes_map = p.create_map(MapRole::Routes, ROUTE_MAX_NUM as u32);
                    for (k, nr) in nf.routes.iter().enumerate() {
                        let want_idx = idx_of(&nr.cluster)?;
                        let bytes = encode_route(&mut p, nr, want_idx, None, &mut listener_deletes);
                        p.write(routes_map, k as u32, bytes, true);
                    }
                    let rec = FilterRec {
                        protocol: nf.protocol,
                        routes: MapRef {
                            id: routes_map,
                            scan: nf.routes.len() as u32,
                        },
                    };
                    p.write(filters_map, j as u32, rec.encode(), true);
                }
                let name = p.strval(&nl.name);
                let tenant = p.strval(&nl.tenant_group);
                let rec = ListenerRec {
                    name,
                    tenant,
                    bind: nl.bind,
                    virtual_ip: nl.virtual_ip,
                    filters: MapRef {
                        id: filters_map,
                        scan: nl.filters.len() as u32,
                    },
                    default_cluster: want_dc,
                };
                p.write(l_root, i, rec.encode(), listener_fresh);
            }
        }
    }
    if l_rebuilt {
        p.adds.push(AddOp::SetRoot {
            root: RootKind::Listeners,
            map: l_root,
        });
    } else {
        for idx in (n_new_l..old_n_l).rev() {
            listener_deletes.push(DeleteOp::Clear { map: l_root, index: idx });
        }
    }
    for ol in old_listeners {
        if !matched_l.contains(ol.listener.name.as_str()) {
            drop_listener_subtree(ol, &mut listener_deletes);
        }
    }

    let peak = store.occupancy() + p.increments;
    if peak > MAP_CAPACITY {
        return Err(StoreError::CapacityExceeded {
            needed: peak,
            bound: MAP_CAPACITY,
        });
    }

    // deletions run top-down: referencing side (listeners) first, then
    // clusters, then any replaced root maps
    let mut deletes = listener_deletes;
    deletes.extend(cluster_deletes);
    deletes.extend(root_drops);

    Ok(DeltaPlan {
        version_from: current,
        version_to: new.version,
        adds: p.adds,
        deletes,
    })
}

// ---- application ----

struct SimMap {
    role: MapRole,
    capacity: u32,
    occupied: HashSet<u32>,
}

struct Sim {
    maps: HashMap<u32, SimMap>,
    occupancy: usize,
    listeners_root: MapId,
    clusters_root: MapId,
    lb_root: MapId,
    metrics_root: MapId,
}

impl Sim {
    fn map(&self, id: MapId) -> Result<&SimMap, StoreError> {
        self.maps
            .get(&id.0)
            .ok_or_else(|| StoreError::InvalidPlan(format!("op references missing map {id}")))
    }

    fn require_role(&self, id: MapId, role: MapRole, what: &str) -> Result<(), StoreError> {
        let m = self.map(id)?;
        if m.role != role {
            return Err(StoreError::InvalidPlan(format!(
                "{what} references {id} of role {:?}, expected {:?}",
                m.role, role
            )));
        }
        Ok(())
    }

    fn require_scan(&self, id: MapId, scan: u32, what: &str) -> Result<(), StoreError> {
        let m = self.map(id)?;
        if scan > m.capacity {
            return Err(StoreError::InvalidPlan(format!(
                "{what} scan {scan} exceeds capacity {} of {id}",
                m.capacity
            )));
        }
        for i in 0..scan {
            if !m.occupied.contains(&i) {
                return Err(StoreError::InvalidPlan(format!(
                    "{what} announces {scan} records in {id} but slot {i} is vacant"
                )));
            }
        }
        Ok(())
    }

    fn require_str(&self, v: &StrVal, what: &str) -> Result<(), StoreError> {
        if let StrVal::Chunked { map, len } = v {
            self.require_role(*map, MapRole::StringChunks, what)?;
            self.require_scan(*map, StrVal::chunks_for(*len as usize), what)?;
        }
        Ok(())
    }

    fn require_cluster_slot(&self, idx: u32, what: &str) -> Result<(), StoreError> {
        let root = self.clusters_root;
        if root.is_null() {
            return Err(StoreError::InvalidPlan(format!(
                "{what} references cluster {idx} before a clusters root exists"
            )));
        }
        let m = self.map(root)?;
        if !m.occupied.contains(&idx) {
            return Err(StoreError::InvalidPlan(format!(
                "{what} references vacant cluster slot {idx}"
            )));
        }
        Ok(())
    }

    /// Role-aware record validation: every reference a reader could
    /// follow out of this record must already resolve.
    fn check_record(&self, role: MapRole, bytes: &[u8]) -> Result<(), StoreError> {
        let bad = |e: String| StoreError::InvalidPlan(format!("undecodable record: {e}"));
        match role {
            MapRole::Listeners => {
                let rec = ListenerRec::decode(bytes).map_err(bad)?;
                self.require_str(&rec.name, "listener name")?;
                self.require_str(&rec.tenant, "listener tenant")?;
                self.require_role(rec.filters.id, MapRole::Filters, "listener")?;
                self.require_scan(rec.filters.id, rec.filters.scan, "listener")?;
                if let Some(idx) = rec.default_cluster {
                    self.require_cluster_slot(idx, "listener default")?;
                }
            }
            MapRole::Filters => {
                let rec = FilterRec::decode(bytes).map_err(bad)?;
                self.require_role(rec.routes.id, MapRole::Routes, "filter")?;
                self.require_scan(rec.routes.id, rec.routes.scan, "filter")?;
            }
            MapRole::Routes => {
                let rec = RouteRec::decode(bytes).map_err(bad)?;
                self.require_str(&rec.value, "route value")?;
                if rec.is_header_match() {
                    self.require_str(&rec.header_name, "route header")?;
                }
                self.require_cluster_slot(rec.cluster_idx, "route")?;
            }
            MapRole::Clusters => {
                let rec = ClusterRec::decode(bytes).map_err(bad)?;
                self.require_str(&rec.name, "cluster name")?;
                self.require_role(rec.endpoints.id, MapRole::Endpoints, "cluster")?;
                self.require_scan(rec.endpoints.id, rec.endpoints.scan, "cluster")?;
            }
            MapRole::Endpoints => {
                EndpointRec::decode(bytes).map_err(bad)?;
            }
            MapRole::LbDirectory => {
                let rec = LbDirRec::decode(bytes).map_err(bad)?;
                self.require_role(rec.lb_map, MapRole::LbState, "lb directory")?;
            }
            MapRole::StringChunks => {}
            MapRole::LbState | MapRole::Metrics => {
                return Err(StoreError::InvalidPlan(
                    "record write to a counter map".into(),
                ));
            }
        }
        Ok(())
    }

    fn is_root(&self, id: MapId) -> bool {
        id == self.listeners_root
            || id == self.clusters_root
            || id == self.lb_root
            || id == self.metrics_root
    }
}

fn simulate(store: &NestedMapStore, plan: &DeltaPlan) -> Result<(), StoreError> {
    let table = store.table.load();
    let roots = store.roots();
    let mut sim = Sim {
        maps: table
            .iter()
            .map(|(k, m)| {
                (
                    *k,
                    SimMap {
                        role: m.role(),
                        capacity: m.capacity() as u32,
                        occupied: m.occupied_indices(),
                    },
                )
            })
            .collect(),
        occupancy: store.occupancy(),
        listeners_root: roots.listeners,
        clusters_root: roots.clusters,
        lb_root: roots.lb_state,
        metrics_root: roots.metrics,
    };

    for op in &plan.adds {
        match op {
            AddOp::CreateMap { id, role, capacity } => {
                if id.is_null() {
                    return Err(StoreError::InvalidPlan("cannot create the null map".into()));
                }
                if *capacity == 0 || *capacity > (1 << 20) {
                    return Err(StoreError::InvalidPlan(format!(
                        "unreasonable capacity {capacity} for {id}"
                    )));
                }
                if sim
                    .maps
                    .insert(
                        id.0,
                        SimMap {
                            role: *role,
                            capacity: *capacity,
                            occupied: HashSet::new(),
                        },
                    )
                    .is_some()
                {
                    return Err(StoreError::InvalidPlan(format!("map {id} already exists")));
                }
            }
            AddOp::Write { map, index, bytes } => {
                let m = sim.map(*map)?;
                if *index >= m.capacity {
                    return Err(StoreError::InvalidPlan(format!(
                        "write at {index} exceeds capacity {} of {map}",
                        m.capacity
                    )));
                }
                if bytes.len() != m.role.entry_size() {
                    return Err(StoreError::InvalidPlan(format!(
                        "record of {} bytes in {map} expecting {}",
                        bytes.len(),
                        m.role.entry_size()
                    )));
                }
                let role = m.role;
                sim.check_record(role, bytes)?;
                let m = sim.maps.get_mut(&map.0).unwrap();
                if m.occupied.insert(*index) && role.counted() {
                    sim.occupancy += 1;
                    if sim.occupancy > MAP_CAPACITY {
                        return Err(StoreError::CapacityExceeded {
                            needed: sim.occupancy,
                            bound: MAP_CAPACITY,
                        });
                    }
                }
            }
            AddOp::SetRoot { root, map } => {
                let expect = match root {
                    RootKind::Listeners => MapRole::Listeners,
                    RootKind::Clusters => MapRole::Clusters,
                    RootKind::LbState => MapRole::LbDirectory,
                    RootKind::Metrics => MapRole::Metrics,
                };
                sim.require_role(*map, expect, "root")?;
                match root {
                    RootKind::Listeners => sim.listeners_root = *map,
                    RootKind::Clusters => sim.clusters_root = *map,
                    RootKind::LbState => sim.lb_root = *map,
                    RootKind::Metrics => sim.metrics_root = *map,
                }
            }
        }
    }

    for op in &plan.deletes {
        match op {
            DeleteOp::Clear { map, index } => {
                let m = sim.map(*map)?;
                if m.role.is_counters() {
                    return Err(StoreError::InvalidPlan(format!(
                        "clear on counter map {map}"
                    )));
                }
                if *index >= m.capacity {
                    return Err(StoreError::InvalidPlan(format!(
                        "clear at {index} exceeds capacity {} of {map}",
                        m.capacity
                    )));
                }
                let counted = m.role.counted();
                let m = sim.maps.get_mut(&map.0).unwrap();
                if m.occupied.remove(index) && counted {
                    sim.occupancy -= 1;
                }
            }
            DeleteOp::DropMap { id } => {
                if sim.is_root(*id) {
                    return Err(StoreError::InvalidPlan(format!("dropping live root {id}")));
                }
                let m = sim
                    .maps
                    .remove(&id.0)
                    .ok_or_else(|| StoreError::InvalidPlan(format!("dropping missing map {id}")))?;
                if m.role.counted() {
                    sim.occupancy -= m.occupied.len();
                }
            }
        }
    }
    Ok(())
}

impl super::InnerMap {
    pub(crate) fn occupied_indices(&self) -> HashSet<u32> {
        match &self.slots {
            super::Slots::Records { slots, .. } => (0..slots.len() as u32)
                .filter(|i| slots[*i as usize].load().is_some())
                .collect(),
            super::Slots::Counters(_) => HashSet::new(),
        }
    }
}

pub(crate) fn apply(store: &NestedMapStore, plan: &DeltaPlan) -> Result<u64, StoreError> {
    let _g = store.apply_lock.lock().unwrap();
    let current = store.version();
    if current != plan.version_from {
        return Err(StoreError::VersionMismatch {
            current,
            proposed: plan.version_to,
        });
    }
    if plan.version_to <= plan.version_from {
        return Err(StoreError::InvalidPlan("version does not advance".into()));
    }
    simulate(store, plan)?;

    for op in &plan.adds {
        match op {
            AddOp::CreateMap { id, role, capacity } => {
                store.table_insert(std::sync::Arc::new(super::InnerMap::new(
                    *id, *role, *capacity,
                )));
            }
            AddOp::Write { map, index, bytes } => {
                let inner = store.map(*map).expect("simulated");
                let fresh = inner.put(*index, bytes.clone());
                if fresh && inner.role().counted() {
                    store.bump_occupancy(1);
                }
            }
            AddOp::SetRoot { root, map } => store.set_root(*root, *map),
        }
    }

    // let traversals that saw the old tree drain before unpublishing
    // anything they might still reference
    store.gate.synchronize();

    for op in &plan.deletes {
        if let DeleteOp::Clear { map, index } = op {
            let inner = store.map(*map).expect("simulated");
            let was = inner.clear(*index);
            if was && inner.role().counted() {
                store.bump_occupancy(-1);
            }
        }
    }

    // second grace: a reader may have picked up a parent record just
    // before its slot was vacated above, so its subtree cannot be
    // reclaimed until that reader leaves
    store.gate.synchronize();

    for op in &plan.deletes {
        if let DeleteOp::DropMap { id } = op {
            let inner = store.table_remove(*id).expect("simulated");
            if inner.role().counted() {
                store.bump_occupancy(-(inner.live() as isize));
            }
        }
    }

    store.version.store(plan.version_to, std::sync::atomic::Ordering::Release);
    Ok(plan.version_to)
}

impl NestedMapStore {
    /// Compute the op sequence taking this store's config to `new`.
    /// `new` must carry a higher version and have passed validation.
    pub fn plan_delta(&self, new: &ConfigSnapshot) -> Result<DeltaPlan, StoreError> {
        plan(self, new)
    }

    /// Validate and execute a plan: additions, a grace period, slot
    /// clears, another grace period, then map drops. No mutation
    /// happens if validation fails.
    pub fn apply_delta(&self, plan: &DeltaPlan) -> Result<u64, StoreError> {
        apply(self, plan)
    }
}
