//! Content-based routing over the flattened listener tree.
//!
//! A lookup walks listener record → filter records → route records
//! through the store's indirection table, so every step lands on
//! whatever the most recent delta published. The work per call is
//! bounded by the per-listener filter and per-filter route limits:
//! one listener record, at most `FILTER_MAX_NUM` filter records, at
//! most `ROUTE_MAX_NUM` route records, and one cluster record.
//! Strings embedded in those records decode inline and cost no extra
//! resolutions unless they spilled to chunk maps.

use std::net::{IpAddr, SocketAddr};
use std::str::FromStr;
use std::sync::Arc;

use dashmap::DashMap;
use regex::Regex;

use crate::codec::{get_field, Protocol, Request};
use crate::config::{LbPolicy, MatchKind};
use crate::limits::{FILTER_MAX_NUM, ROUTE_MAX_NUM};
use crate::store::record::{ClusterRec, EndpointRec, FilterRec, LbDirRec, ListenerRec, RouteRec};
use crate::store::{InnerMap, MapId, NestedMapStore, StoreError};

/// Which matching rule wins when several in a filter apply.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MatchOrder {
    #[default]
    First,
    Last,
}

impl FromStr for MatchOrder {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "first" => Ok(MatchOrder::First),
            "last" => Ok(MatchOrder::Last),
            other => Err(format!("unknown match order {other:?} (expected first|last)")),
        }
    }
}

impl std::fmt::Display for MatchOrder {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            MatchOrder::First => "first",
            MatchOrder::Last => "last",
        })
    }
}

/// Compiled-pattern cache shared across lookups. Compilation failures
/// are cached too and simply never match.
#[derive(Default)]
pub struct RegexCache {
    compiled: DashMap<String, Option<Arc<Regex>>>,
}

impl RegexCache {
    pub fn new() -> Self {
        Self::default()
    }

    fn matches(&self, pattern: &str, value: &str) -> bool {
        if let Some(entry) = self.compiled.get(pattern) {
            return entry.as_ref().map(|re| re.is_match(value)).unwrap_or(false);
        }
        let compiled = crate::config::pattern::compile(pattern).ok().map(Arc::new);
        let hit = compiled.as_ref().map(|re| re.is_match(value)).unwrap_or(false);
        self.compiled.insert(pattern.to_string(), compiled);
        hit
    }

    pub fn len(&self) -> usize {
        self.compiled.len()
    }

    pub fn is_empty(&self) -> bool {
        self.compiled.is_empty()
    }
}

/// Outcome of a successful route lookup.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RouteDecision {
    pub listener: String,
    pub listener_index: u32,
    pub filter_index: u32,
    pub rule_index: u32,
    pub cluster: String,
    pub cluster_index: u32,
}

/// Listener record plus decoded strings, as the relay needs it at
/// accept time.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ListenerView {
    pub index: u32,
    pub name: String,
    pub bind: SocketAddr,
    pub virtual_ip: Option<IpAddr>,
    pub tenant_group: String,
    pub filter_count: u32,
    pub default_cluster: Option<u32>,
}

/// Everything the relay needs to dispatch to a cluster.
pub struct ResolvedCluster {
    pub index: u32,
    pub name: String,
    pub policy: LbPolicy,
    pub protocol: Protocol,
    pub endpoints: Vec<(SocketAddr, u32)>,
    pub lb_map: Arc<InnerMap>,
}

impl ResolvedCluster {
    pub fn weights(&self) -> Vec<u32> {
        self.endpoints.iter().map(|(_, w)| *w).collect()
    }
}

fn corrupt(what: impl Into<String>) -> StoreError {
    StoreError::Corrupt(what.into())
}

fn listener_rec(store: &NestedMapStore, index: u32) -> Result<ListenerRec, StoreError> {
    let root = store.roots().listeners;
    if root.is_null() {
        return Err(StoreError::UnknownMap(MapId::NULL));
    }
    let bytes = store.resolve(root, index)?;
    ListenerRec::decode(&bytes).map_err(corrupt)
}

fn view_of(store: &NestedMapStore, index: u32, rec: &ListenerRec) -> Result<ListenerView, StoreError> {
    let (name, _) = store.read_string(&rec.name, "listener name")?;
    let (tenant_group, _) = store.read_string(&rec.tenant, "tenant group")?;
    Ok(ListenerView {
        index,
        name,
        bind: rec.bind,
        virtual_ip: rec.virtual_ip,
        tenant_group,
        filter_count: rec.filters.scan,
        default_cluster: rec.default_cluster,
    })
}

pub fn listener_at(store: &NestedMapStore, index: u32) -> Result<ListenerView, StoreError> {
    let _g = store.begin_read();
    let rec = listener_rec(store, index)?;
    view_of(store, index, &rec)
}

/// All listeners currently published, in slot order.
pub fn listeners(store: &NestedMapStore) -> Result<Vec<ListenerView>, StoreError> {
    let _g = store.begin_read();
    let root = store.roots().listeners;
    if root.is_null() {
        return Ok(Vec::new());
    }
    let map = store
        .map(root)
        .ok_or(StoreError::UnknownMap(root))?;
    let mut out = Vec::new();
    for i in 0..map.capacity() as u32 {
        match map.get(i) {
            Some(bytes) => {
                let rec = ListenerRec::decode(&bytes).map_err(corrupt)?;
                out.push(view_of(store, i, &rec)?);
            }
            None => break,
        }
    }
    Ok(out)
}

/// Find the listener bound to `bind`, if any.
pub fn find_listener(store: &NestedMapStore, bind: SocketAddr) -> Result<Option<u32>, StoreError> {
    Ok(listeners(store)?.into_iter().find(|l| l.bind == bind).map(|l| l.index))
}

/// First filter on the listener speaking `protocol`.
pub fn match_filter(
    store: &NestedMapStore,
    listener_index: u32,
    protocol: Protocol,
) -> Result<Option<u32>, StoreError> {
    let _g = store.begin_read();
    let rec = listener_rec(store, listener_index)?;
    let scan = rec.filters.scan.min(FILTER_MAX_NUM as u32);
    for j in 0..scan {
        let fb = store.resolve(rec.filters.id, j)?;
        let frec = FilterRec::decode(&fb).map_err(corrupt)?;
        if frec.protocol == protocol {
            return Ok(Some(j));
        }
    }
    Ok(None)
}

fn rule_matches(
    store: &NestedMapStore,
    rrec: &RouteRec,
    req: &Request,
    cache: &RegexCache,
) -> Result<bool, StoreError> {
    let field = if rrec.is_header_match() {
        let (name, _) = store.read_string(&rrec.header_name, "header name")?;
        crate::codec::FieldRef::Header(name)
    } else {
        match &rrec.field {
            crate::config::MatchField::Path => crate::codec::FieldRef::Path,
            crate::config::MatchField::Method => crate::codec::FieldRef::Method,
            crate::config::MatchField::Header(_) => unreachable!("handled above"),
        }
    };
    let Some(value) = get_field(req, &field) else {
        return Ok(false);
    };
    let (pattern, _) = store.read_string(&rrec.value, "route value")?;
    Ok(match rrec.kind {
        MatchKind::Exact => value == pattern,
        MatchKind::Prefix => value.starts_with(&pattern),
        MatchKind::Regex => cache.matches(&pattern, value),
    })
}

/// Scan one filter's rules against `req`; returns (rule index,
/// cluster index) of the winning rule.
pub fn match_route(
    store: &NestedMapStore,
    listener_index: u32,
    filter_index: u32,
    req: &Request,
    order: MatchOrder,
    cache: &RegexCache,
) -> Result<Option<(u32, u32)>, StoreError> {
    let _g = store.begin_read();
    let lrec = listener_rec(store, listener_index)?;
    let fb = store.resolve(lrec.filters.id, filter_index)?;
    let frec = FilterRec::decode(&fb).map_err(corrupt)?;
    let scan = frec.routes.scan.min(ROUTE_MAX_NUM as u32);
    let mut winner = None;
    for k in 0..scan {
        let rb = store.resolve(frec.routes.id, k)?;
        let rrec = RouteRec::decode(&rb).map_err(corrupt)?;
        if rule_matches(store, &rrec, req, cache)? {
            winner = Some((k, rrec.cluster_idx));
            if order == MatchOrder::First {
                break;
            }
        }
    }
    Ok(winner)
}

/// Full lookup: protocol selects the filter, the filter's rules pick
/// the cluster.
pub fn route(
    store: &NestedMapStore,
    listener_index: u32,
    req: &Request,
    order: MatchOrder,
    cache: &RegexCache,
) -> Result<Option<RouteDecision>, StoreError> {
    let _g = store.begin_read();
    let lrec = listener_rec(store, listener_index)?;
    let (listener, _) = store.read_string(&lrec.name, "listener name")?;

    let scan_f = lrec.filters.scan.min(FILTER_MAX_NUM as u32);
    let mut hit = None;
    for j in 0..scan_f {
        let fb = store.resolve(lrec.filters.id, j)?;
        let frec = FilterRec::decode(&fb).map_err(corrupt)?;
        if frec.protocol != req.protocol {
            continue;
        }
        let scan_r = frec.routes.scan.min(ROUTE_MAX_NUM as u32);
        for k in 0..scan_r {
            let rb = store.resolve(frec.routes.id, k)?;
            let rrec = RouteRec::decode(&rb).map_err(corrupt)?;
            if rule_matches(store, &rrec, req, cache)? {
                hit = Some((j, k, rrec.cluster_idx));
                if order == MatchOrder::First {
                    break;
                }
            }
        }
        break; // only the first filter for the protocol applies
    }

    let Some((filter_index, rule_index, cluster_index)) = hit else {
        return Ok(None);
    };
    let cb = store.resolve(store.roots().clusters, cluster_index)?;
    let crec = ClusterRec::decode(&cb).map_err(corrupt)?;
    let (cluster, _) = store.read_string(&crec.name, "cluster name")?;
    Ok(Some(RouteDecision {
        listener,
        listener_index,
        filter_index,
        rule_index,
        cluster,
        cluster_index,
    }))
}

/// Load a cluster's endpoints and lb-state map for dispatch.
pub fn resolve_cluster(
    store: &NestedMapStore,
    cluster_index: u32,
) -> Result<ResolvedCluster, StoreError> {
    let _g = store.begin_read();
    let roots = store.roots();
    let cb = store.resolve(roots.clusters, cluster_index)?;
    let crec = ClusterRec::decode(&cb).map_err(corrupt)?;
    let (name, _) = store.read_string(&crec.name, "cluster name")?;
    let mut endpoints = Vec::with_capacity(crec.endpoints.scan as usize);
    for i in 0..crec.endpoints.scan {
        let eb = store.resolve(crec.endpoints.id, i)?;
        let erec = EndpointRec::decode(&eb).map_err(corrupt)?;
        endpoints.push((SocketAddr::new(erec.addr, erec.port), erec.weight));
    }
    let dir_bytes = store.resolve(roots.lb_state, cluster_index)?;
    let dir = LbDirRec::decode(&dir_bytes).map_err(corrupt)?;
    let lb_map = store
        .map(dir.lb_map)
        .ok_or(StoreError::UnknownMap(dir.lb_map))?;
    Ok(ResolvedCluster {
        index: cluster_index,
        name,
        policy: crec.policy,
        protocol: crec.protocol,
        endpoints,
        lb_map,
    })
}

/// Route and resolve under a single read guard.
pub fn route_and_resolve(
    store: &NestedMapStore,
    listener_index: u32,
    req: &Request,
    order: MatchOrder,
    cache: &RegexCache,
) -> Result<Option<(RouteDecision, ResolvedCluster)>, StoreError> {
    let _g = store.begin_read();
    match route(store, listener_index, req, order, cache)? {
        Some(decision) => {
            let cluster = resolve_cluster(store, decision.cluster_index)?;
            Ok(Some((decision, cluster)))
        }
        None => Ok(None),
    }
}
