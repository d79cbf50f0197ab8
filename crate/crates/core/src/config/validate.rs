//! Semantic validation of parsed snapshots.

use std::collections::{HashMap, HashSet};

use crate::codec::Protocol;
use crate::limits::{FILTER_MAX_NUM, MAX_ENDPOINTS, ROUTE_MAX_NUM, WEIGHT_SUM_MAX};

use super::pattern::validate_pattern;
use super::{ConfigSnapshot, MatchKind};

/// One semantic problem, located by a path into the document.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub path: String,
    pub message: String,
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.path, self.message)
    }
}

/// Derive the protocol each cluster is addressed with, from the filters
/// that route to it. Unreferenced clusters default to HTTP/1.1.
/// Returns an error list entry per cluster claimed by both protocols.
pub fn cluster_protocols(snap: &ConfigSnapshot) -> (HashMap<String, Protocol>, Vec<String>) {
    let mut seen: HashMap<String, Protocol> = HashMap::new();
    let mut conflicts: Vec<String> = Vec::new();
    let mut claim = |cluster: &str, proto: Protocol, conflicts: &mut Vec<String>| {
        match seen.get(cluster) {
            None => {
                seen.insert(cluster.to_string(), proto);
            }
            Some(p) if *p != proto && !conflicts.iter().any(|c| c == cluster) => {
                conflicts.push(cluster.to_string());
            }
            Some(_) => {}
        }
    };
    for l in &snap.listeners {
        for f in &l.filters {
            for r in &f.routes {
                claim(&r.cluster, f.protocol, &mut conflicts);
            }
        }
        if let Some(dc) = &l.default_cluster {
            // plain relays tunnel bytes; treat as http1 for pool purposes
            claim(dc, Protocol::Http11, &mut conflicts);
        }
    }
    for c in &snap.clusters {
        seen.entry(c.name.clone()).or_insert(Protocol::Http11);
    }
    (seen, conflicts)
}

/// Validate a snapshot; empty result means valid.
pub fn validate_snapshot(snap: &ConfigSnapshot) -> Vec<Violation> {
    validate(snap, false)
}

/// Like [`validate_snapshot`] but additionally flags clusters that no
/// route or default references.
pub fn validate_snapshot_strict(snap: &ConfigSnapshot) -> Vec<Violation> {
    validate(snap, true)
}

fn validate(snap: &ConfigSnapshot, strict: bool) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut push = |path: String, message: String| out.push(Violation { path, message });

    if snap.version == 0 {
        push("version".into(), "version must be >= 1".into());
    }

    let cluster_names: HashSet<&str> = snap.clusters.iter().map(|c| c.name.as_str()).collect();

    let mut seen_cluster = HashSet::new();
    for (i, c) in snap.clusters.iter().enumerate() {
        let at = |field: &str| format!("clusters[{i}].{field}");
        if c.name.is_empty() {
            push(at("name"), "cluster name must not be empty".into());
        }
        if !seen_cluster.insert(c.name.as_str()) {
            push(at("name"), format!("duplicate cluster name {:?}", c.name));
        }
        if c.endpoints.is_empty() {
            push(at("endpoints"), "cluster has no endpoints".into());
        }
        if c.endpoints.len() > MAX_ENDPOINTS {
            push(
                at("endpoints"),
                format!(
                    "endpoint count {} exceeds bound {MAX_ENDPOINTS}",
                    c.endpoints.len()
                ),
            );
        }
        let mut seen_addr = HashSet::new();
        let mut weight_sum: u64 = 0;
        for (j, e) in c.endpoints.iter().enumerate() {
            let at = |field: &str| format!("clusters[{i}].endpoints[{j}].{field}");
            if e.weight == 0 {
                push(at("weight"), "endpoint weight must be >= 1".into());
            }
            if e.port == 0 {
                push(at("port"), "endpoint port must not be 0".into());
            }
            if !seen_addr.insert((e.addr, e.port)) {
                push(
                    format!("clusters[{i}].endpoints[{j}]"),
                    format!("duplicate endpoint {}:{}", e.addr, e.port),
                );
            }
            weight_sum += u64::from(e.weight);
        }
        if weight_sum > WEIGHT_SUM_MAX {
            push(
                at("endpoints"),
                format!("weight sum {weight_sum} exceeds bound {WEIGHT_SUM_MAX}"),
            );
        }
    }

    let mut seen_listener = HashSet::new();
    let mut seen_bind = HashSet::new();
    for (i, l) in snap.listeners.iter().enumerate() {
        let at = |field: &str| format!("listeners[{i}].{field}");
        if l.name.is_empty() {
            push(at("name"), "listener name must not be empty".into());
        }
        if !seen_listener.insert(l.name.as_str()) {
            push(at("name"), format!("duplicate listener name {:?}", l.name));
        }
        if !seen_bind.insert(l.bind) {
            push(at("bind"), format!("duplicate bind address {}", l.bind));
        }
        if l.tenant_group.is_empty() {
            push(at("tenant_group"), "tenant group must not be empty".into());
        }
        if l.filters.len() > FILTER_MAX_NUM {
            push(
                at("filters"),
                format!(
                    "filter count {} exceeds bound {FILTER_MAX_NUM}",
                    l.filters.len()
                ),
            );
        }
        if l.filters.is_empty() && l.default_cluster.is_none() {
            push(
                at("filters"),
                "listener needs at least one filter or a default_cluster".into(),
            );
        }
        if let Some(dc) = &l.default_cluster {
            if !cluster_names.contains(dc.as_str()) {
                push(
                    at("default_cluster"),
                    format!("references unknown cluster {dc:?}"),
                );
            }
        }
        for (j, f) in l.filters.iter().enumerate() {
            let at = |field: &str| format!("listeners[{i}].filters[{j}].{field}");
            if f.routes.is_empty() {
                push(at("routes"), "filter has no routes".into());
            }
            if f.routes.len() > ROUTE_MAX_NUM {
                push(
                    at("routes"),
                    format!(
                        "route count {} exceeds bound {ROUTE_MAX_NUM}",
                        f.routes.len()
                    ),
                );
            }
            for (k, r) in f.routes.iter().enumerate() {
                let at = |field: &str| format!("listeners[{i}].filters[{j}].routes[{k}].{field}");
                if r.kind == MatchKind::Regex {
                    if let Err(e) = validate_pattern(&r.value) {
                        push(at("value"), e.to_string());
                    }
                }
                if !cluster_names.contains(r.cluster.as_str()) {
                    push(
                        at("cluster"),
                        format!("references unknown cluster {:?}", r.cluster),
                    );
                }
            }
        }
    }

    let (_, conflicts) = cluster_protocols(snap);
    for name in conflicts {
        if let Some(i) = snap.clusters.iter().position(|c| c.name == name) {
            push(
                format!("clusters[{i}]"),
                format!("cluster {name:?} is referenced by both http1 and mux filters"),
            );
        }
    }

    if strict {
        let mut referenced: HashSet<&str> = HashSet::new();
        for l in &snap.listeners {
            if let Some(dc) = &l.default_cluster {
                referenced.insert(dc.as_str());
            }
            for f in &l.filters {
                for r in &f.routes {
                    referenced.insert(r.cluster.as_str());
                }
            }
        }
        for (i, c) in snap.clusters.iter().enumerate() {
            if !referenced.contains(c.name.as_str()) {
                push(
                    format!("clusters[{i}]"),
                    format!("cluster {:?} is not referenced by any route", c.name),
                );
            }
        }
    }

    out
}

#[cfg(test)]
mod tests {
    use super::super::{parse_config, ConfigError};
    use super::*;

    fn doc(listeners: &str, clusters: &str) -> String {
        format!("version: 1\nlisteners:\n{listeners}clusters:\n{clusters}")
    }

    fn listener_with_route(route: &str) -> String {
        format!(
            "  - name: web\n    bind: 127.0.0.1:9001\n    tenant_group: t\n    filters:\n      - type: http1\n        routes:\n          - {route}\n"
        )
    }

    const ONE_CLUSTER: &str =
        "  - name: backend\n    policy: round_robin\n    endpoints:\n      - { addr: 127.0.0.1, port: 9101 }\n";

    #[test]
    fn dangling_cluster_reference_has_exact_path() {
        let text = doc(
            &listener_with_route("{ field: path, kind: prefix, value: /, cluster: nope }"),
            ONE_CLUSTER,
        );
        let Err(ConfigError::Invalid(violations)) = parse_config(text.as_bytes()) else {
            panic!("expected validation failure");
        };
        assert_eq!(violations.len(), 1);
        assert_eq!(violations[0].path, "listeners[0].filters[0].routes[0].cluster");
        assert!(violations[0].message.contains("nope"));
    }

    #[test]
    fn route_count_bound() {
        let mut routes = String::new();
        for _ in 0..(ROUTE_MAX_NUM + 1) {
            routes.push_str("          - { field: path, kind: prefix, value: /, cluster: backend }\n");
        }
        let listeners = format!(
            "  - name: web\n    bind: 127.0.0.1:9001\n    tenant_group: t\n    filters:\n      - type: http1\n        routes:\n{routes}"
        );
        let text = doc(&listeners, ONE_CLUSTER);
        let Err(ConfigError::Invalid(v)) = parse_config(text.as_bytes()) else {
            panic!("expected validation failure");
        };
        assert_eq!(v[0].path, "listeners[0].filters[0].routes");
        assert_eq!(v[0].message, "route count 1025 exceeds bound 1024");
    }

    #[test]
    fn bad_regex_is_reported_at_the_value() {
        let text = doc(
            &listener_with_route(
                "{ field: path, kind: regex, value: \"a{2,3}\", cluster: backend }",
            ),
            ONE_CLUSTER,
        );
        let Err(ConfigError::Invalid(v)) = parse_config(text.as_bytes()) else {
            panic!("expected validation failure");
        };
        assert_eq!(v[0].path, "listeners[0].filters[0].routes[0].value");
        assert!(v[0].message.contains("counted repetition"));
    }

    #[test]
    fn endpoint_and_weight_rules() {
        let clusters = "  - name: backend\n    policy: round_robin\n    endpoints:\n      - { addr: 127.0.0.1, port: 9101, weight: 0 }\n      - { addr: 127.0.0.1, port: 9101 }\n      - { addr: 127.0.0.1, port: 0 }\n";
        let text = doc(
            &listener_with_route("{ field: path, kind: prefix, value: /, cluster: backend }"),
            clusters,
        );
        let Err(ConfigError::Invalid(v)) = parse_config(text.as_bytes()) else {
            panic!("expected validation failure");
        };
        let paths: Vec<&str> = v.iter().map(|x| x.path.as_str()).collect();
        assert!(paths.contains(&"clusters[0].endpoints[0].weight"));
        assert!(paths.contains(&"clusters[0].endpoints[1]"));
        assert!(paths.contains(&"clusters[0].endpoints[2].port"));
    }

    #[test]
    fn duplicate_names_and_binds() {
        let listeners = "  - name: web\n    bind: 127.0.0.1:9001\n    tenant_group: t\n    default_cluster: backend\n  - name: web\n    bind: 127.0.0.1:9001\n    tenant_group: t\n    default_cluster: backend\n";
        let text = doc(listeners, ONE_CLUSTER);
        let Err(ConfigError::Invalid(v)) = parse_config(text.as_bytes()) else {
            panic!("expected validation failure");
        };
        let msgs: Vec<&str> = v.iter().map(|x| x.message.as_str()).collect();
        assert!(msgs.iter().any(|m| m.contains("duplicate listener name")));
        assert!(msgs.iter().any(|m| m.contains("duplicate bind address")));
    }

    #[test]
    fn empty_filters_require_default_cluster() {
        let listeners = "  - name: plain\n    bind: 127.0.0.1:9001\n    tenant_group: t\n";
        let text = doc(listeners, ONE_CLUSTER);
        let Err(ConfigError::Invalid(v)) = parse_config(text.as_bytes()) else {
            panic!("expected validation failure");
        };
        assert_eq!(v[0].path, "listeners[0].filters");

        let listeners =
            "  - name: plain\n    bind: 127.0.0.1:9001\n    tenant_group: t\n    default_cluster: backend\n";
        let text = doc(listeners, ONE_CLUSTER);
        parse_config(text.as_bytes()).unwrap();
    }

    #[test]
    fn protocol_conflict_is_flagged() {
        let listeners = "  - name: a\n    bind: 127.0.0.1:9001\n    tenant_group: t\n    filters:\n      - type: http1\n        routes:\n          - { field: path, kind: prefix, value: /, cluster: backend }\n      - type: mux\n        routes:\n          - { field: path, kind: prefix, value: /, cluster: backend }\n";
        let text = doc(listeners, ONE_CLUSTER);
        let Err(ConfigError::Invalid(v)) = parse_config(text.as_bytes()) else {
            panic!("expected validation failure");
        };
        assert!(v[0].message.contains("both http1 and mux"));
    }

    #[test]
    fn strict_mode_flags_orphan_clusters() {
        let text = doc(
            &listener_with_route("{ field: path, kind: prefix, value: /, cluster: backend }"),
            &format!("{ONE_CLUSTER}  - name: spare\n    policy: random\n    endpoints:\n      - {{ addr: 127.0.0.1, port: 9102 }}\n"),
        );
        let snap = parse_config(text.as_bytes()).unwrap();
        assert!(validate_snapshot(&snap).is_empty());
        let v = validate_snapshot_strict(&snap);
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].path, "clusters[1]");
    }

    #[test]
    fn protocol_derivation_defaults_to_http1() {
        let text = doc(
            &listener_with_route("{ field: path, kind: prefix, value: /, cluster: backend }"),
            &format!("{ONE_CLUSTER}  - name: spare\n    policy: random\n    endpoints:\n      - {{ addr: 127.0.0.1, port: 9102 }}\n"),
        );
        let snap = parse_config(text.as_bytes()).unwrap();
        let (protos, conflicts) = cluster_protocols(&snap);
        assert!(conflicts.is_empty());
        assert_eq!(protos["backend"], Protocol::Http11);
        assert_eq!(protos["spare"], Protocol::Http11);
    }
}
