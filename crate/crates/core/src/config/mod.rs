//! Configuration model: the listener → filter → route → cluster →
//! endpoint hierarchy, its YAML/JSON document schema, and validation.
//!
//! Documents are accepted in YAML (JSON being a subset). The schema is
//! strict: unknown keys are rejected at parse time, semantic problems
//! are reported as a list of violations with a path into the document,
//! e.g. `listeners[0].filters[0].routes[2].cluster`.

pub mod pattern;
mod validate;

use std::net::{IpAddr, SocketAddr};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::codec::Protocol;

pub use validate::{cluster_protocols, validate_snapshot, validate_snapshot_strict, Violation};

/// A complete configuration generation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigSnapshot {
    /// Monotonically increasing generation number, starting at 1.
    pub version: u64,
    pub listeners: Vec<Listener>,
    pub clusters: Vec<Cluster>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Listener {
    pub name: String,
    /// Accept address, `host:port` form.
    pub bind: SocketAddr,
    /// Advertised address this listener answers for; informational.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub virtual_ip: Option<IpAddr>,
    /// Connection-pool partition this listener's traffic belongs to.
    pub tenant_group: String,
    #[serde(default)]
    pub filters: Vec<Filter>,
    /// Cluster used when no filters are configured (plain relay mode).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub default_cluster: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Filter {
    #[serde(rename = "type")]
    pub protocol: Protocol,
    pub routes: Vec<RouteRule>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RouteRule {
    pub field: MatchField,
    pub kind: MatchKind,
    pub value: String,
    /// Name of the target cluster.
    pub cluster: String,
}

/// Request field a rule inspects: `path`, `method`, or `header:<name>`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum MatchField {
    Path,
    Method,
    Header(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MatchKind {
    Exact,
    Prefix,
    Regex,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Cluster {
    pub name: String,
    pub policy: LbPolicy,
    pub endpoints: Vec<Endpoint>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LbPolicy {
    RoundRobin,
    Random,
    LeastRequest,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Endpoint {
    pub addr: IpAddr,
    pub port: u16,
    #[serde(default = "default_weight")]
    pub weight: u32,
}

fn default_weight() -> u32 {
    1
}

impl Endpoint {
    pub fn socket_addr(&self) -> SocketAddr {
        SocketAddr::new(self.addr, self.port)
    }
}

impl std::fmt::Display for MatchField {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            MatchField::Path => f.write_str("path"),
            MatchField::Method => f.write_str("method"),
            MatchField::Header(name) => write!(f, "header:{name}"),
        }
    }
}

impl FromStr for MatchField {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "path" => Ok(MatchField::Path),
            "method" => Ok(MatchField::Method),
            _ => match s.strip_prefix("header:") {
                Some("") => Err("empty header name in match field".to_string()),
                Some(name) => Ok(MatchField::Header(name.to_ascii_lowercase())),
                None => Err(format!("unknown match field {s:?}")),
            },
        }
    }
}

impl Serialize for MatchField {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for MatchField {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Document-shaped mirror of [`ConfigSnapshot`]; only difference is the
/// optional version.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawDoc {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    version: Option<u64>,
    #[serde(default)]
    listeners: Vec<Listener>,
    #[serde(default)]
    clusters: Vec<Cluster>,
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("config syntax: {0}")]
    Syntax(String),
    #[error("config invalid: {}", summarize(.0))]
    Invalid(Vec<Violation>),
}

fn summarize(violations: &[Violation]) -> String {
    let mut parts: Vec<String> = violations.iter().take(3).map(|v| v.to_string()).collect();
    if violations.len() > 3 {
        parts.push(format!("... {} more", violations.len() - 3));
    }
    parts.join("; ")
}

/// Parse and validate a config document. A missing `version` key
/// defaults to `default_version`; see [`parse_config`] for the common
/// entry point.
pub fn parse_config_versioned(
    bytes: &[u8],
    default_version: u64,
) -> Result<ConfigSnapshot, ConfigError> {
    let raw: RawDoc =
        serde_yaml::from_slice(bytes).map_err(|e| ConfigError::Syntax(e.to_string()))?;
    let snap = ConfigSnapshot {
        version: raw.version.unwrap_or(default_version),
        listeners: raw.listeners,
        clusters: raw.clusters,
    };
    let violations = validate_snapshot(&snap);
    if violations.is_empty() {
        Ok(snap)
    } else {
        Err(ConfigError::Invalid(violations))
    }
}

/// Parse and validate a config document (YAML or JSON).
pub fn parse_config(bytes: &[u8]) -> Result<ConfigSnapshot, ConfigError> {
    parse_config_versioned(bytes, 1)
}

/// Render a snapshot back to YAML. `parse_config` of the output yields
/// an equal snapshot.
pub fn serialize_config(snap: &ConfigSnapshot) -> String {
    let raw = RawDoc {
        version: Some(snap.version),
        listeners: snap.listeners.clone(),
        clusters: snap.clusters.clone(),
    };
    serde_yaml::to_string(&raw).expect("config snapshots always serialize")
}

impl ConfigSnapshot {
    /// Number of flattened records this snapshot occupies in the store:
    /// one per listener, filter, route, cluster, and endpoint.
    pub fn node_count(&self) -> usize {
        let per_listener: usize = self
            .listeners
            .iter()
            .map(|l| 1 + l.filters.len() + l.filters.iter().map(|f| f.routes.len()).sum::<usize>())
            .sum();
        let per_cluster: usize = self.clusters.iter().map(|c| 1 + c.endpoints.len()).sum();
        per_listener + per_cluster
    }

    pub fn cluster(&self, name: &str) -> Option<&Cluster> {
        self.clusters.iter().find(|c| c.name == name)
    }

    pub fn listener(&self, name: &str) -> Option<&Listener> {
        self.listeners.iter().find(|l| l.name == name)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
version: 1
listeners:
  - name: web
    bind: 127.0.0.1:9001
    tenant_group: default
    filters:
      - type: http1
        routes:
          - { field: path, kind: prefix, value: "/", cluster: backend }
clusters:
  - name: backend
    policy: round_robin
    endpoints:
      - { addr: 127.0.0.1, port: 9101 }
"#;

    #[test]
    fn parses_minimal_document() {
        let snap = parse_config(MINIMAL.as_bytes()).unwrap();
        assert_eq!(snap.version, 1);
        assert_eq!(snap.listeners.len(), 1);
        assert_eq!(snap.clusters.len(), 1);
        let l = &snap.listeners[0];
        assert_eq!(l.name, "web");
        assert_eq!(l.bind, "127.0.0.1:9001".parse().unwrap());
        assert_eq!(l.tenant_group, "default");
        assert_eq!(l.filters[0].protocol, Protocol::Http11);
        let r = &l.filters[0].routes[0];
        assert_eq!(r.field, MatchField::Path);
        assert_eq!(r.kind, MatchKind::Prefix);
        assert_eq!(r.cluster, "backend");
        let c = &snap.clusters[0];
        assert_eq!(c.policy, LbPolicy::RoundRobin);
        assert_eq!(c.endpoints[0].weight, 1);
        assert_eq!(snap.node_count(), 5);
    }

    #[test]
    fn accepts_json_documents() {
        let doc = r#"{
            "version": 2,
            "listeners": [],
            "clusters": [
                {"name": "b", "policy": "random",
                 "endpoints": [{"addr": "10.0.0.1", "port": 80, "weight": 3}]}
            ]
        }"#;
        let snap = parse_config(doc.as_bytes()).unwrap();
        assert_eq!(snap.version, 2);
        assert_eq!(snap.clusters[0].endpoints[0].weight, 3);
    }

    #[test]
    fn missing_version_takes_default() {
        let doc = "listeners: []\nclusters: []\n";
        assert_eq!(parse_config(doc.as_bytes()).unwrap().version, 1);
        assert_eq!(
            parse_config_versioned(doc.as_bytes(), 7).unwrap().version,
            7
        );
    }

    #[test]
    fn unknown_keys_are_syntax_errors() {
        let doc = "version: 1\nlisteners: []\nclusters: []\nsurprise: true\n";
        assert!(matches!(
            parse_config(doc.as_bytes()),
            Err(ConfigError::Syntax(_))
        ));
    }

    #[test]
    fn match_field_forms() {
        assert_eq!("path".parse::<MatchField>().unwrap(), MatchField::Path);
        assert_eq!("method".parse::<MatchField>().unwrap(), MatchField::Method);
        assert_eq!(
            "header:X-Tenant".parse::<MatchField>().unwrap(),
            MatchField::Header("x-tenant".to_string())
        );
        assert!("header:".parse::<MatchField>().is_err());
        assert!("query".parse::<MatchField>().is_err());
        assert_eq!(MatchField::Header("x-a".into()).to_string(), "header:x-a");
    }

    #[test]
    fn serialize_parse_round_trip() {
        let snap = parse_config(MINIMAL.as_bytes()).unwrap();
        let text = serialize_config(&snap);
        let back = parse_config(text.as_bytes()).unwrap();
        assert_eq!(back, snap);
    }
}
