//! Read-side traversals: reconstructing the configuration from records
//! (with enough bookkeeping for the delta planner) and integrity
//! checking.

use std::collections::HashSet;
use std::sync::Arc;

use crate::codec::Protocol;
use crate::config::{Cluster, ConfigSnapshot, Endpoint, Filter, Listener, MatchField, RouteRule};

use super::record::{
    ClusterRec, EndpointRec, FilterRec, LbDirRec, ListenerRec, RouteRec, StrVal,
};
use super::{InnerMap, MapId, NestedMapStore, StoreError};

/// Annotated image of the stored config, used to diff against a new
/// snapshot without losing track of which map holds what.
pub(crate) struct OldState {
    pub listeners_root: MapId,
    pub listeners_cap: u32,
    pub clusters_root: MapId,
    pub clusters_cap: u32,
    pub lb_root: MapId,
    pub listeners: Vec<OldListener>,
    pub clusters: Vec<OldCluster>,
}

pub(crate) struct OldListener {
    pub listener: Listener,
    pub index: u32,
    pub filters_map: MapId,
    pub filters: Vec<OldFilter>,
    pub dc_idx: Option<u32>,
    pub name_map: Option<MapId>,
    pub tenant_map: Option<MapId>,
}

pub(crate) struct OldFilter {
    pub protocol: Protocol,
    pub routes_map: MapId,
    pub routes: Vec<OldRoute>,
}

pub(crate) struct OldRoute {
    pub rule: RouteRule,
    pub cluster_idx: u32,
    pub header_map: Option<MapId>,
    pub value_map: Option<MapId>,
}

pub(crate) struct OldCluster {
    pub cluster: Cluster,
    pub index: u32,
    pub protocol: Protocol,
    pub endpoints_map: MapId,
    pub lb_map: MapId,
    pub name_map: Option<MapId>,
}

/// Result of a full-store integrity walk.
#[derive(Debug)]
pub struct ReachabilityReport {
    /// Maps reachable from the roots.
    pub reachable_maps: usize,
    /// Maps present in the directory but reachable from no root.
    pub leaked: Vec<MapId>,
    /// Live records seen during the walk.
    pub records: usize,
}

fn corrupt(what: impl Into<String>) -> StoreError {
    StoreError::Corrupt(what.into())
}

impl NestedMapStore {
    pub(crate) fn require_map(&self, id: MapId, what: &str) -> Result<Arc<InnerMap>, StoreError> {
        self.map(id)
            .ok_or_else(|| corrupt(format!("{what} references missing map {id}")))
    }

    /// Records 0..cap of a root map must form a dense prefix.
    fn dense_prefix(&self, map: &InnerMap, what: &str) -> Result<Vec<Arc<Vec<u8>>>, StoreError> {
        let mut out = Vec::new();
        let mut vacant = false;
        for i in 0..map.capacity() as u32 {
            match map.get(i) {
                Some(rec) if !vacant => out.push(rec),
                Some(_) => return Err(corrupt(format!("{what} has a hole before slot {i}"))),
                None => vacant = true,
            }
        }
        Ok(out)
    }

    /// First `scan` records of a child map, all of which must exist.
    fn scan_records(
        &self,
        map: &InnerMap,
        scan: u32,
        what: &str,
    ) -> Result<Vec<Arc<Vec<u8>>>, StoreError> {
        if scan as usize > map.capacity() {
            return Err(corrupt(format!(
                "{what} scan length {scan} exceeds capacity {}",
                map.capacity()
            )));
        }
        (0..scan)
            .map(|i| {
                map.get(i)
                    .ok_or_else(|| corrupt(format!("{what} slot {i} vacant within scan range")))
            })
            .collect()
    }

    pub(crate) fn read_string(&self, v: &StrVal, what: &str) -> Result<(String, Option<MapId>), StoreError> {
        match v {
            StrVal::Inline(s) => Ok((s.clone(), None)),
            StrVal::Chunked { map, len } => {
                let chunks_map = self.require_map(*map, what)?;
                let n = StrVal::chunks_for(*len as usize);
                let chunks = self.scan_records(&chunks_map, n, what)?;
                let owned: Vec<Vec<u8>> = chunks.iter().map(|c| c.as_ref().clone()).collect();
                let s = super::record::string_from_chunks(&owned, *len).map_err(corrupt)?;
                Ok((s, Some(*map)))
            }
        }
    }

    /// Walk the full tree into an [`OldState`]. The store must hold a
    /// flattened config (version > 0).
    pub(crate) fn read_old_state(&self) -> Result<OldState, StoreError> {
        let _g = self.begin_read();
        let roots = self.roots();
        let listeners_map = self.require_map(roots.listeners, "listeners root")?;
        let clusters_map = self.require_map(roots.clusters, "clusters root")?;
        let lb_map = self.require_map(roots.lb_state, "lb root")?;
        self.require_map(roots.metrics, "metrics root")?;

        let mut clusters = Vec::new();
        for (i, bytes) in self.dense_prefix(&clusters_map, "clusters root")?.iter().enumerate() {
            let rec = ClusterRec::decode(bytes).map_err(corrupt)?;
            let (name, name_map) = self.read_string(&rec.name, "cluster name")?;
            let ep_map = self.require_map(rec.endpoints.id, "cluster endpoints")?;
            let mut endpoints = Vec::new();
            for b in self.scan_records(&ep_map, rec.endpoints.scan, "endpoints")? {
                let e = EndpointRec::decode(&b).map_err(corrupt)?;
                endpoints.push(Endpoint {
                    addr: e.addr,
                    port: e.port,
                    weight: e.weight,
                });
            }
            let dir_bytes = lb_map
                .get(i as u32)
                .ok_or_else(|| corrupt(format!("lb dir slot {i} vacant")))?;
            let dir = LbDirRec::decode(&dir_bytes).map_err(corrupt)?;
            self.require_map(dir.lb_map, "lb counters")?;
            clusters.push(OldCluster {
                cluster: Cluster {
                    name,
                    policy: rec.policy,
                    endpoints,
                },
                index: i as u32,
                protocol: rec.protocol,
                endpoints_map: rec.endpoints.id,
                lb_map: dir.lb_map,
                name_map,
            });
        }

        let cluster_name = |idx: u32| -> Result<String, StoreError> {
            clusters
                .get(idx as usize)
                .map(|c: &OldCluster| c.cluster.name.clone())
                .ok_or_else(|| corrupt(format!("record references cluster index {idx}")))
        };

        let mut listeners = Vec::new();
        for (i, bytes) in self.dense_prefix(&listeners_map, "listeners root")?.iter().enumerate() {
            let rec = ListenerRec::decode(bytes).map_err(corrupt)?;
            let (name, name_map) = self.read_string(&rec.name, "listener name")?;
            let (tenant, tenant_map) = self.read_string(&rec.tenant, "tenant group")?;
            let filters_map = self.require_map(rec.filters.id, "listener filters")?;
            let mut filters = Vec::new();
            for fb in self.scan_records(&filters_map, rec.filters.scan, "filters")? {
                let frec = FilterRec::decode(&fb).map_err(corrupt)?;
                let routes_map = self.require_map(frec.routes.id, "filter routes")?;
                let mut routes = Vec::new();
                for rb in self.scan_records(&routes_map, frec.routes.scan, "routes")? {
                    let rrec = RouteRec::decode(&rb).map_err(corrupt)?;
                    let (value, value_map) = self.read_string(&rrec.value, "route value")?;
                    let (field, header_map) = if rrec.is_header_match() {
                        let (hname, hmap) = self.read_string(&rrec.header_name, "header name")?;
                        (MatchField::Header(hname), hmap)
                    } else {
                        (rrec.field.clone(), None)
                    };
                    routes.push(OldRoute {
                        rule: RouteRule {
                            field,
                            kind: rrec.kind,
                            value,
                            cluster: cluster_name(rrec.cluster_idx)?,
                        },
                        cluster_idx: rrec.cluster_idx,
                        header_map,
                        value_map,
                    });
                }
                filters.push(OldFilter {
                    protocol: frec.protocol,
                    routes_map: frec.routes.id,
                    routes,
                });
            }
            let default_cluster = match rec.default_cluster {
                Some(idx) => Some(cluster_name(idx)?),
                None => None,
            };
            listeners.push(OldListener {
                listener: Listener {
                    name,
                    bind: rec.bind,
                    virtual_ip: rec.virtual_ip,
                    tenant_group: tenant,
                    filters: filters
                        .iter()
                        .map(|f| Filter {
                            protocol: f.protocol,
                            routes: f.routes.iter().map(|r| r.rule.clone()).collect(),
                        })
                        .collect(),
                    default_cluster,
                },
                index: i as u32,
                filters_map: rec.filters.id,
                filters,
                dc_idx: rec.default_cluster,
                name_map,
                tenant_map,
            });
        }

        Ok(OldState {
            listeners_root: roots.listeners,
            listeners_cap: listeners_map.capacity() as u32,
            clusters_root: roots.clusters,
            clusters_cap: clusters_map.capacity() as u32,
            lb_root: roots.lb_state,
            listeners,
            clusters,
        })
    }

    /// Reconstruct the configuration the store currently holds.
    pub fn unflatten(&self) -> Result<ConfigSnapshot, StoreError> {
        let st = self.read_old_state()?;
        Ok(ConfigSnapshot {
            version: self.version(),
            listeners: st.listeners.into_iter().map(|l| l.listener).collect(),
            clusters: st.clusters.into_iter().map(|c| c.cluster).collect(),
        })
    }

    /// Follow every reference reachable from the roots, requiring each
    /// one to resolve and every record to decode. This asserts exactly
    /// what the data path relies on, so unlike
    /// [`Self::verify_reachability`] it is safe to run concurrently
    /// with `apply_delta`: it tolerates the transient mix of old and
    /// new branches but never a dangling reference. Returns the number
    /// of records visited.
    pub fn probe(&self) -> Result<usize, StoreError> {
        let _g = self.begin_read();
        let roots = self.roots();
        let mut records = 0usize;

        let visit_str = |v: &StrVal| -> Result<(), StoreError> {
            if let StrVal::Chunked { map, len } = v {
                let m = self.require_map(*map, "string chunk")?;
                self.scan_records(&m, StrVal::chunks_for(*len as usize), "string chunks")?;
            }
            Ok(())
        };

        if !roots.clusters.is_null() {
            let clusters_map = self.require_map(roots.clusters, "clusters root")?;
            let lb_dir = self.require_map(roots.lb_state, "lb root")?;
            for i in 0..clusters_map.capacity() as u32 {
                let Some(bytes) = clusters_map.get(i) else { break };
                records += 1;
                let rec = ClusterRec::decode(&bytes).map_err(corrupt)?;
                visit_str(&rec.name)?;
                let ep = self.require_map(rec.endpoints.id, "cluster endpoints")?;
                records += self.scan_records(&ep, rec.endpoints.scan, "endpoints")?.len();
                let dir_bytes = lb_dir
                    .get(i)
                    .ok_or_else(|| corrupt(format!("lb dir slot {i} vacant for visible cluster")))?;
                let dir = LbDirRec::decode(&dir_bytes).map_err(corrupt)?;
                self.require_map(dir.lb_map, "lb counters")?;
            }
        }

        if !roots.listeners.is_null() {
            let listeners_map = self.require_map(roots.listeners, "listeners root")?;
            for i in 0..listeners_map.capacity() as u32 {
                let Some(bytes) = listeners_map.get(i) else { break };
                records += 1;
                let rec = ListenerRec::decode(&bytes).map_err(corrupt)?;
                visit_str(&rec.name)?;
                visit_str(&rec.tenant)?;
                let filters = self.require_map(rec.filters.id, "listener filters")?;
                for fb in self.scan_records(&filters, rec.filters.scan, "filters")? {
                    records += 1;
                    let frec = FilterRec::decode(&fb).map_err(corrupt)?;
                    let routes = self.require_map(frec.routes.id, "filter routes")?;
                    for rb in self.scan_records(&routes, frec.routes.scan, "routes")? {
                        records += 1;
                        let rrec = RouteRec::decode(&rb).map_err(corrupt)?;
                        visit_str(&rrec.value)?;
                        if rrec.is_header_match() {
                            visit_str(&rrec.header_name)?;
                        }
                    }
                }
            }
        }
        Ok(records)
    }

    /// Walk every reference from the roots, failing on any that does
    /// not resolve, and report maps no root reaches. The cross-map
    /// invariants asserted here (dense root prefixes, route index
    /// bounds, directory pairing) hold between deltas, not during one.
    pub fn verify_reachability(&self) -> Result<ReachabilityReport, StoreError> {
        let _g = self.begin_read();
        let mut seen: HashSet<MapId> = HashSet::new();
        let mut records = 0usize;
        let roots = self.roots();

        let mark = |id: MapId, seen: &mut HashSet<MapId>| -> Result<Arc<InnerMap>, StoreError> {
            seen.insert(id);
            self.require_map(id, "walk")
        };

        let metrics = mark(roots.metrics, &mut seen)?;
        if !metrics.role().is_counters() {
            return Err(corrupt("metrics root is not a counter map"));
        }

        let visit_str = |v: &StrVal, seen: &mut HashSet<MapId>| -> Result<(), StoreError> {
            if let StrVal::Chunked { map, len } = v {
                let m = self.require_map(*map, "string chunk")?;
                seen.insert(*map);
                let need = StrVal::chunks_for(*len as usize);
                self.scan_records(&m, need, "string chunks")?;
            }
            Ok(())
        };

        let clusters_map = mark(roots.clusters, &mut seen)?;
        let lb_dir = mark(roots.lb_state, &mut seen)?;
        let cluster_recs = self.dense_prefix(&clusters_map, "clusters root")?;
        let n_clusters = cluster_recs.len();
        for (i, bytes) in cluster_recs.iter().enumerate() {
            records += 1;
            let rec = ClusterRec::decode(bytes).map_err(corrupt)?;
            visit_str(&rec.name, &mut seen)?;
            let ep = mark(rec.endpoints.id, &mut seen)?;
            records += self.scan_records(&ep, rec.endpoints.scan, "endpoints")?.len();
            let dir_bytes = lb_dir
                .get(i as u32)
                .ok_or_else(|| corrupt(format!("lb dir slot {i} vacant")))?;
            let dir = LbDirRec::decode(&dir_bytes).map_err(corrupt)?;
            mark(dir.lb_map, &mut seen)?;
        }

        let listeners_map = mark(roots.listeners, &mut seen)?;
        for bytes in self.dense_prefix(&listeners_map, "listeners root")? {
            records += 1;
            let rec = ListenerRec::decode(&bytes).map_err(corrupt)?;
            visit_str(&rec.name, &mut seen)?;
            visit_str(&rec.tenant, &mut seen)?;
            if let Some(idx) = rec.default_cluster {
                if idx as usize >= n_clusters {
                    return Err(corrupt(format!("default cluster index {idx} out of range")));
                }
            }
            let filters = mark(rec.filters.id, &mut seen)?;
            for fb in self.scan_records(&filters, rec.filters.scan, "filters")? {
                records += 1;
                let frec = FilterRec::decode(&fb).map_err(corrupt)?;
                let routes = mark(frec.routes.id, &mut seen)?;
                for rb in self.scan_records(&routes, frec.routes.scan, "routes")? {
                    records += 1;
                    let rrec = RouteRec::decode(&rb).map_err(corrupt)?;
                    visit_str(&rrec.value, &mut seen)?;
                    if rrec.is_header_match() {
                        visit_str(&rrec.header_name, &mut seen)?;
                    }
                    if rrec.cluster_idx as usize >= n_clusters {
                        return Err(corrupt(format!(
                            "route references cluster index {} of {n_clusters}",
                            rrec.cluster_idx
                        )));
                    }
                }
            }
        }

        let table = self.table.load();
        let leaked: Vec<MapId> = table
            .keys()
            .map(|k| MapId(*k))
            .filter(|id| !seen.contains(id))
            .collect();
        Ok(ReachabilityReport {
            reachable_maps: seen.len(),
            leaked,
            records,
        })
    }
}
