//! Deterministic test scaffolding: a reference implementation of route
//! matching that works directly on [`ConfigSnapshot`], plus seeded
//! generators for snapshots, requests, and config mutations. Nothing
//! here touches the store; differential tests compare these results
//! against the real lookup path.

use rand::Rng;

use crate::codec::{Protocol, Request};
use crate::config::{
    Cluster, ConfigSnapshot, Endpoint, Filter, LbPolicy, Listener, MatchField, MatchKind,
    RouteRule,
};
use crate::router::MatchOrder;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NaiveDecision {
    pub filter_index: usize,
    pub rule_index: usize,
    pub cluster: String,
}

/// Straight-line route matching over the parsed config; the oracle the
/// store-backed router must agree with.
pub fn naive_route(
    snap: &ConfigSnapshot,
    listener: &str,
    req: &Request,
    order: MatchOrder,
) -> Option<NaiveDecision> {
    let l = snap.listeners.iter().find(|l| l.name == listener)?;
    let (filter_index, filter) = l
        .filters
        .iter()
        .enumerate()
        .find(|(_, f)| f.protocol == req.protocol)?;
    let mut winner = None;
    for (rule_index, rule) in filter.routes.iter().enumerate() {
        let value = match &rule.field {
            MatchField::Path => Some(req.path.as_str()),
            MatchField::Method => Some(req.method.as_str()),
            MatchField::Header(name) => req.header(name),
        };
        let Some(value) = value else { continue };
        let hit = match rule.kind {
            MatchKind::Exact => value == rule.value,
            MatchKind::Prefix => value.starts_with(&rule.value),
            MatchKind::Regex => crate::config::pattern::compile(&rule.value)
                .map(|re| re.is_match(value))
                .unwrap_or(false),
        };
        if hit {
            winner = Some(NaiveDecision {
                filter_index,
                rule_index,
                cluster: rule.cluster.clone(),
            });
            if order == MatchOrder::First {
                break;
            }
        }
    }
    winner
}

/// Shape of a generated snapshot.
#[derive(Debug, Clone, Copy)]
pub struct GenDims {
    pub listeners: usize,
    pub filters_per_listener: usize,
    pub routes_per_filter: usize,
    pub clusters: usize,
    pub endpoints_per_cluster: usize,
}

impl Default for GenDims {
    fn default() -> Self {
        GenDims {
            listeners: 3,
            filters_per_listener: 2,
            routes_per_filter: 8,
            clusters: 4,
            endpoints_per_cluster: 3,
        }
    }
}

// (pattern, sample that matches, sample that does not)
const PATTERN_POOL: &[(&str, &str, &str)] = &[
    ("/api/v[0-9]+/.*", "/api/v7/users", "/api/vx/users"),
    ("/static/.*\\.(css|js)", "/static/app.css", "/static/app.png"),
    ("/t-[a-z]+", "/t-abc", "/t-ABC"),
    ("/(shop|cart)/.+", "/shop/1", "/shop/"),
];

const PATH_POOL: &[&str] = &[
    "/api/", "/health", "/admin/", "/v1/items", "/shop/cart", "/login", "/static/", "/metrics",
];
const METHOD_POOL: &[&str] = &["GET", "POST", "PUT", "DELETE", "PATCH"];
const HEADER_NAMES: &[&str] = &["x-tenant", "x-debug", "accept", "x-variant"];
const HEADER_VALUES: &[&str] = &["a", "b", "blue", "green", "1"];

fn pick<'a, T>(rng: &mut impl Rng, pool: &'a [T]) -> &'a T {
    &pool[rng.gen_range(0..pool.len())]
}

/// A cluster may only be referenced from filters of one protocol, so
/// generated rules partition clusters by name suffix: even suffixes
/// serve http1 filters, odd ones mux. The name travels with the
/// cluster, so the split survives reordering mutations.
fn affinity(name: &str) -> Protocol {
    let n: usize = name
        .strip_prefix('c')
        .and_then(|s| s.parse().ok())
        .unwrap_or(0);
    if n % 2 == 0 {
        Protocol::Http11
    } else {
        Protocol::Mux
    }
}

fn gen_rule(rng: &mut impl Rng, clusters: &[Cluster], proto: Protocol) -> RouteRule {
    let pool: Vec<&Cluster> = clusters.iter().filter(|c| affinity(&c.name) == proto).collect();
    let cluster = if pool.is_empty() {
        clusters[0].name.clone()
    } else {
        pool[rng.gen_range(0..pool.len())].name.clone()
    };
    match rng.gen_range(0..5) {
        0 => RouteRule {
            field: MatchField::Path,
            kind: MatchKind::Exact,
            value: pick(rng, PATH_POOL).to_string(),
            cluster,
        },
        1 => RouteRule {
            field: MatchField::Path,
            kind: MatchKind::Prefix,
            value: pick(rng, PATH_POOL).to_string(),
            cluster,
        },
        2 => RouteRule {
            field: MatchField::Method,
            kind: MatchKind::Exact,
            value: pick(rng, METHOD_POOL).to_string(),
            cluster,
        },
        3 => RouteRule {
            field: MatchField::Header(pick(rng, HEADER_NAMES).to_string()),
            kind: MatchKind::Exact,
            value: pick(rng, HEADER_VALUES).to_string(),
            cluster,
        },
        _ => RouteRule {
            field: MatchField::Path,
            kind: MatchKind::Regex,
            value: pick(rng, PATTERN_POOL).0.to_string(),
            cluster,
        },
    }
}

/// A valid snapshot with the requested shape. Filters alternate
/// protocols so each listener speaks at most one of each.
pub fn gen_snapshot(rng: &mut impl Rng, dims: &GenDims) -> ConfigSnapshot {
    let clusters: Vec<Cluster> = (0..dims.clusters.max(2))
        .map(|i| Cluster {
            name: format!("c{i}"),
            policy: match i % 3 {
                0 => LbPolicy::RoundRobin,
                1 => LbPolicy::Random,
                _ => LbPolicy::LeastRequest,
            },
            endpoints: (0..dims.endpoints_per_cluster.max(1))
                .map(|k| Endpoint {
                    addr: format!("10.0.{i}.{k}").parse().unwrap(),
                    port: 1000 + k as u16,
                    weight: rng.gen_range(1..=4),
                })
                .collect(),
        })
        .collect();

    let listeners: Vec<Listener> = (0..dims.listeners.max(1))
        .map(|i| {
            let filters: Vec<Filter> = (0..dims.filters_per_listener.clamp(1, 2))
                .map(|j| {
                    let protocol = if j == 0 { Protocol::Http11 } else { Protocol::Mux };
                    Filter {
                        protocol,
                        routes: (0..dims.routes_per_filter.max(1))
                            .map(|_| gen_rule(rng, &clusters, protocol))
                            .collect(),
                    }
                })
                .collect();
            Listener {
                name: format!("l{i}"),
                bind: format!("127.0.0.1:{}", 9100 + i).parse().unwrap(),
                virtual_ip: if i % 2 == 0 {
                    Some(format!("10.99.0.{i}").parse().unwrap())
                } else {
                    None
                },
                tenant_group: format!("t{}", i % 2),
                filters,
                default_cluster: None,
            }
        })
        .collect();

    ConfigSnapshot {
        version: 1,
        listeners,
        clusters,
    }
}

/// A request aimed at the given listener. Most of the time it is built
/// to satisfy one of the listener's rules; sometimes it is noise.
pub fn gen_request(rng: &mut impl Rng, snap: &ConfigSnapshot, listener: &str) -> Request {
    let l = match snap.listeners.iter().find(|l| l.name == listener) {
        Some(l) => l,
        None => return Request::new("GET", "/"),
    };
    let filter = &l.filters[rng.gen_range(0..l.filters.len().max(1))];
    let mut req = Request::new(*pick(rng, METHOD_POOL), *pick(rng, PATH_POOL));

    if !filter.routes.is_empty() && rng.gen_bool(0.8) {
        let rule = &filter.routes[rng.gen_range(0..filter.routes.len())];
        match (&rule.field, rule.kind) {
            (MatchField::Path, MatchKind::Exact) => req.path = rule.value.clone(),
            (MatchField::Path, MatchKind::Prefix) => req.path = format!("{}x", rule.value),
            (MatchField::Path, MatchKind::Regex) => {
                let sample = PATTERN_POOL
                    .iter()
                    .find(|(p, _, _)| *p == rule.value)
                    .map(|(_, hit, miss)| if rng.gen_bool(0.7) { *hit } else { *miss })
                    .unwrap_or("/");
                req.path = sample.to_string();
            }
            (MatchField::Method, _) => req.method = rule.value.clone(),
            (MatchField::Header(name), _) => {
                req = req.with_header(name, &rule.value);
            }
        }
    }
    if rng.gen_bool(0.3) {
        req = req.with_header(pick(rng, HEADER_NAMES), pick(rng, HEADER_VALUES));
    }
    if filter.protocol == Protocol::Mux {
        req = req.into_mux(rng.gen_range(1..=0x7fff_ffff));
    }
    req
}

fn next_suffix(names: impl Iterator<Item = String>, prefix: &str) -> usize {
    names
        .filter_map(|n| n.strip_prefix(prefix).and_then(|s| s.parse::<usize>().ok()))
        .max()
        .map(|m| m + 1)
        .unwrap_or(0)
}

/// One random structure-preserving evolution of `snap`, with the
/// version bumped. Every result is a valid config.
pub fn mutate_snapshot(rng: &mut impl Rng, snap: &ConfigSnapshot) -> ConfigSnapshot {
    let mut next = snap.clone();
    next.version += 1;
    let n_clusters = next.clusters.len();
    match rng.gen_range(0..10u32) {
        // grow a cluster by one endpoint
        0 => {
            let ci = rng.gen_range(0..n_clusters);
            let c = &mut next.clusters[ci];
            if c.endpoints.len() < 255 {
                let k = c.endpoints.len();
                c.endpoints.push(Endpoint {
                    addr: format!("10.8.{}.{}", ci % 256, k % 256).parse().unwrap(),
                    port: 20_000 + k as u16,
                    weight: rng.gen_range(1..=4),
                });
            }
        }
        // shrink a cluster
        1 => {
            let c = &mut next.clusters[rng.gen_range(0..n_clusters)];
            if c.endpoints.len() > 1 {
                c.endpoints.pop();
            }
        }
        // reweight an endpoint
        2 => {
            let c = &mut next.clusters[rng.gen_range(0..n_clusters)];
            let k = rng.gen_range(0..c.endpoints.len());
            c.endpoints[k].weight = rng.gen_range(1..=8);
        }
        // add a route
        3 => {
            let clusters = next.clusters.clone();
            let l = &mut next.listeners[rng.gen_range(0..snap.listeners.len())];
            if !l.filters.is_empty() {
                let f = rng.gen_range(0..l.filters.len());
                if l.filters[f].routes.len() < 1024 {
                    let rule = gen_rule(rng, &clusters, l.filters[f].protocol);
                    l.filters[f].routes.push(rule);
                }
            }
        }
        // drop a route
        4 => {
            let l = &mut next.listeners[rng.gen_range(0..snap.listeners.len())];
            if !l.filters.is_empty() {
                let f = rng.gen_range(0..l.filters.len());
                if l.filters[f].routes.len() > 1 {
                    let r = rng.gen_range(0..l.filters[f].routes.len());
                    l.filters[f].routes.remove(r);
                }
            }
        }
        // add an (initially unreferenced) cluster
        5 => {
            let i = next_suffix(next.clusters.iter().map(|c| c.name.clone()), "c");
            next.clusters.push(Cluster {
                name: format!("c{i}"),
                policy: LbPolicy::Random,
                endpoints: vec![Endpoint {
                    addr: format!("10.7.{}.1", i % 256).parse().unwrap(),
                    port: 1000,
                    weight: 1,
                }],
            });
        }
        // add a listener
        6 => {
            let i = next_suffix(next.listeners.iter().map(|l| l.name.clone()), "l");
            let clusters = next.clusters.clone();
            let routes = (0..4).map(|_| gen_rule(rng, &clusters, Protocol::Http11)).collect();
            next.listeners.push(Listener {
                name: format!("l{i}"),
                bind: format!("127.0.0.1:{}", 9100 + (i % 400)).parse().unwrap(),
                virtual_ip: None,
                tenant_group: "t0".into(),
                filters: vec![Filter {
                    protocol: Protocol::Http11,
                    routes,
                }],
                default_cluster: None,
            });
            // binds must stay unique
            let bind = next.listeners.last().unwrap().bind;
            if next.listeners[..next.listeners.len() - 1]
                .iter()
                .any(|l| l.bind == bind)
            {
                next.listeners.pop();
            }
        }
        // drop a listener
        7 => {
            if next.listeners.len() > 1 {
                let i = rng.gen_range(0..next.listeners.len());
                next.listeners.remove(i);
            }
        }
        // rotate listeners: contents unchanged, indices move
        8 => {
            if next.listeners.len() > 1 {
                next.listeners.rotate_left(1);
            }
        }
        // rotate clusters: routes follow names, indices move
        _ => {
            if next.clusters.len() > 1 {
                next.clusters.rotate_left(1);
            }
        }
    }
    next
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn generated_snapshots_validate() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let snap = gen_snapshot(&mut rng, &GenDims::default());
            assert!(crate::config::validate_snapshot(&snap).is_empty());
        }
    }

    #[test]
    fn mutations_stay_valid_over_long_chains() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut snap = gen_snapshot(&mut rng, &GenDims::default());
        for step in 0..200 {
            snap = mutate_snapshot(&mut rng, &snap);
            let viols = crate::config::validate_snapshot(&snap);
            assert!(viols.is_empty(), "step {step}: {viols:?}");
        }
    }

    #[test]
    fn naive_route_respects_order() {
        let snap = crate::config::parse_config(
            br#"
listeners:
  - name: web
    bind: "127.0.0.1:9000"
    tenant_group: t
    filters:
      - type: http1
        routes:
          - { field: path, kind: prefix, value: "/a", cluster: one }
          - { field: path, kind: prefix, value: "/ab", cluster: two }
clusters:
  - name: one
    policy: round_robin
    endpoints: [ { addr: "10.0.0.1", port: 80 } ]
  - name: two
    policy: round_robin
    endpoints: [ { addr: "10.0.0.2", port: 80 } ]
"#,
        )
        .unwrap();
        let req = Request::new("GET", "/abc");
        let first = naive_route(&snap, "web", &req, MatchOrder::First).unwrap();
        assert_eq!((first.rule_index, first.cluster.as_str()), (0, "one"));
        let last = naive_route(&snap, "web", &req, MatchOrder::Last).unwrap();
        assert_eq!((last.rule_index, last.cluster.as_str()), (1, "two"));
    }

    #[test]
    fn generated_requests_often_match() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let snap = gen_snapshot(&mut rng, &GenDims::default());
        let mut hits = 0;
        for _ in 0..200 {
            let req = gen_request(&mut rng, &snap, "l0");
            if naive_route(&snap, "l0", &req, MatchOrder::First).is_some() {
                hits += 1;
            }
        }
        assert!(hits > 60, "only {hits}/200 generated requests matched");
    }
}
