//! Fixed-size binary record layouts for the flat store.
//!
//! Every inner map holds records of exactly one shape; all integers are
//! little-endian. Variable-length strings are inlined when they fit in
//! 64 bytes, otherwise the record carries the id of a dedicated
//! string-chunk map holding the bytes in 64-byte slots.

use std::net::{IpAddr, Ipv4Addr, Ipv6Addr, SocketAddr};

use crate::codec::Protocol;
use crate::config::{LbPolicy, MatchField, MatchKind};

use super::MapId;

pub(crate) const STR_INLINE_MAX: usize = 64;
pub(crate) const CHUNK_LEN: usize = 64;

// str field: kind u8 (0 inline, 1 chunked), len u32, then payload:
// inline bytes padded to 64, or a chunk-map id.
const STR_LEN: usize = 1 + 4 + STR_INLINE_MAX;
// addr field: family u8 (4 or 6), ip bytes (v4 left-aligned), port u16
const ADDR_LEN: usize = 1 + 16 + 2;
// optional ip: present u8, family u8, ip bytes
const OPT_IP_LEN: usize = 1 + 1 + 16;
// map ref: map id u32, scan length u32
const MAP_REF_LEN: usize = 4 + 4;

pub(crate) const LISTENER_LEN: usize = STR_LEN + STR_LEN + ADDR_LEN + OPT_IP_LEN + MAP_REF_LEN + 1 + 4;
pub(crate) const FILTER_LEN: usize = 1 + MAP_REF_LEN;
pub(crate) const ROUTE_LEN: usize = 1 + STR_LEN + 1 + STR_LEN + 4;
pub(crate) const CLUSTER_LEN: usize = STR_LEN + 1 + 1 + MAP_REF_LEN;
pub(crate) const ENDPOINT_LEN: usize = 1 + 16 + 2 + 4;
pub(crate) const LB_DIR_LEN: usize = 4 + 4;

/// Reference to an inner map plus how many leading slots a reader
/// should scan.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MapRef {
    pub id: MapId,
    pub scan: u32,
}

/// A string as stored: inline, or spilled into a chunk map.
#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) enum StrVal {
    Inline(String),
    Chunked { map: MapId, len: u32 },
}

impl StrVal {
    /// Number of 64-byte chunks a spilled string of `len` bytes needs.
    pub(crate) fn chunks_for(len: usize) -> u32 {
        len.div_ceil(CHUNK_LEN) as u32
    }
}

fn put_u32(buf: &mut [u8], off: usize, v: u32) {
    buf[off..off + 4].copy_from_slice(&v.to_le_bytes());
}

fn get_u32(buf: &[u8], off: usize) -> u32 {
    u32::from_le_bytes(buf[off..off + 4].try_into().unwrap())
}

fn put_str(buf: &mut [u8], off: usize, s: &str, chunk_map: Option<MapId>) {
    let bytes = s.as_bytes();
    match chunk_map {
        None => {
            assert!(bytes.len() <= STR_INLINE_MAX, "inline string too long");
            buf[off] = 0;
            put_u32(buf, off + 1, bytes.len() as u32);
            buf[off + 5..off + 5 + bytes.len()].copy_from_slice(bytes);
        }
        Some(map) => {
            buf[off] = 1;
            put_u32(buf, off + 1, bytes.len() as u32);
            put_u32(buf, off + 5, map.0);
        }
    }
}

fn get_str(buf: &[u8], off: usize) -> Result<StrVal, String> {
    let len = get_u32(buf, off + 1);
    match buf[off] {
        0 => {
            if len as usize > STR_INLINE_MAX {
                return Err(format!("inline string length {len} out of range"));
            }
            let bytes = &buf[off + 5..off + 5 + len as usize];
            String::from_utf8(bytes.to_vec())
                .map(StrVal::Inline)
                .map_err(|_| "non-utf8 string record".to_string())
        }
        1 => Ok(StrVal::Chunked {
            map: MapId(get_u32(buf, off + 5)),
            len,
        }),
        k => Err(format!("bad string kind {k}")),
    }
}

fn put_ip(buf: &mut [u8], off: usize, ip: &IpAddr) {
    match ip {
        IpAddr::V4(v4) => {
            buf[off] = 4;
            buf[off + 1..off + 5].copy_from_slice(&v4.octets());
        }
        IpAddr::V6(v6) => {
            buf[off] = 6;
            buf[off + 1..off + 17].copy_from_slice(&v6.octets());
        }
    }
}

fn get_ip(buf: &[u8], off: usize) -> Result<IpAddr, String> {
    match buf[off] {
        4 => {
            let o: [u8; 4] = buf[off + 1..off + 5].try_into().unwrap();
            Ok(IpAddr::V4(Ipv4Addr::from(o)))
        }
        6 => {
            let o: [u8; 16] = buf[off + 1..off + 17].try_into().unwrap();
            Ok(IpAddr::V6(Ipv6Addr::from(o)))
        }
        f => Err(format!("bad address family {f}")),
    }
}

fn put_map_ref(buf: &mut [u8], off: usize, r: MapRef) {
    put_u32(buf, off, r.id.0);
    put_u32(buf, off + 4, r.scan);
}

fn get_map_ref(buf: &[u8], off: usize) -> MapRef {
    MapRef {
        id: MapId(get_u32(buf, off)),
        scan: get_u32(buf, off + 4),
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) struct ListenerRec {
    pub name: StrVal,
    pub tenant: StrVal,
    pub bind: SocketAddr,
    pub virtual_ip: Option<IpAddr>,
    pub filters: MapRef,
    pub default_cluster: Option<u32>,
}

impl ListenerRec {
    pub fn encode(&self) -> Vec<u8> {
        let mut b = vec![0u8; LISTENER_LEN];
        put_strval(&mut b, 0, &self.name);
        put_strval(&mut b, STR_LEN, &self.tenant);
        let off = 2 * STR_LEN;
        put_ip(&mut b, off, &self.bind.ip());
        b[off + 17..off + 19].copy_from_slice(&self.bind.port().to_le_bytes());
        let off = off + ADDR_LEN;
        if let Some(ip) = &self.virtual_ip {
            b[off] = 1;
            put_ip(&mut b, off + 1, ip);
        }
        let off = off + OPT_IP_LEN;
        put_map_ref(&mut b, off, self.filters);
        let off = off + MAP_REF_LEN;
        if let Some(idx) = self.default_cluster {
            b[off] = 1;
            put_u32(&mut b, off + 1, idx);
        }
        b
    }

    pub fn decode(b: &[u8]) -> Result<Self, String> {
        if b.len() != LISTENER_LEN {
            return Err(format!("listener record length {}", b.len()));
        }
        let name = get_str(b, 0)?;
        let tenant = get_str(b, STR_LEN)?;
        let off = 2 * STR_LEN;
        let bind_ip = get_ip(b, off)?;
        let port = u16::from_le_bytes(b[off + 17..off + 19].try_into().unwrap());
        let off = off + ADDR_LEN;
        let virtual_ip = if b[off] == 1 { Some(get_ip(b, off + 1)?) } else { None };
        let off = off + OPT_IP_LEN;
        let filters = get_map_ref(b, off);
        let off = off + MAP_REF_LEN;
        let default_cluster = if b[off] == 1 { Some(get_u32(b, off + 1)) } else { None };
        Ok(ListenerRec {
            name,
            tenant,
            bind: SocketAddr::new(bind_ip, port),
            virtual_ip,
            filters,
            default_cluster,
        })
    }
}

fn put_strval(buf: &mut [u8], off: usize, v: &StrVal) {
    match v {
        StrVal::Inline(s) => put_str(buf, off, s, None),
        StrVal::Chunked { map, len } => {
            buf[off] = 1;
            put_u32(buf, off + 1, *len);
            put_u32(buf, off + 5, map.0);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct FilterRec {
    pub protocol: Protocol,
    pub routes: MapRef,
}

impl FilterRec {
    pub fn encode(&self) -> Vec<u8> {
        let mut b = vec![0u8; FILTER_LEN];
        b[0] = proto_tag(self.protocol);
        put_map_ref(&mut b, 1, self.routes);
        b
    }

    pub fn decode(b: &[u8]) -> Result<Self, String> {
        if b.len() != FILTER_LEN {
            return Err(format!("filter record length {}", b.len()));
        }
        Ok(FilterRec {
            protocol: proto_from(b[0])?,
            routes: get_map_ref(b, 1),
        })
    }
}

fn proto_tag(p: Protocol) -> u8 {
    match p {
        Protocol::Http11 => 1,
        Protocol::Mux => 2,
    }
}

fn proto_from(t: u8) -> Result<Protocol, String> {
    match t {
        1 => Ok(Protocol::Http11),
        2 => Ok(Protocol::Mux),
        _ => Err(format!("bad protocol tag {t}")),
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) struct RouteRec {
    pub field: MatchField,
    /// Header name storage; `Inline("")` for path/method fields.
    pub header_name: StrVal,
    pub kind: MatchKind,
    pub value: StrVal,
    pub cluster_idx: u32,
}

impl RouteRec {
    pub fn encode(&self) -> Vec<u8> {
        let mut b = vec![0u8; ROUTE_LEN];
        b[0] = match self.field {
            MatchField::Path => 0,
            MatchField::Method => 1,
            MatchField::Header(_) => 2,
        };
        put_strval(&mut b, 1, &self.header_name);
        b[1 + STR_LEN] = match self.kind {
            MatchKind::Exact => 0,
            MatchKind::Prefix => 1,
            MatchKind::Regex => 2,
        };
        put_strval(&mut b, 2 + STR_LEN, &self.value);
        put_u32(&mut b, 2 + 2 * STR_LEN, self.cluster_idx);
        b
    }

    pub fn decode(b: &[u8]) -> Result<Self, String> {
        if b.len() != ROUTE_LEN {
            return Err(format!("route record length {}", b.len()));
        }
        let header_name = get_str(b, 1)?;
        let field = match b[0] {
            0 => MatchField::Path,
            1 => MatchField::Method,
            2 => MatchField::Header(String::new()), // name resolved by the walker
            t => return Err(format!("bad field tag {t}")),
        };
        let kind = match b[1 + STR_LEN] {
            0 => MatchKind::Exact,
            1 => MatchKind::Prefix,
            2 => MatchKind::Regex,
            t => return Err(format!("bad kind tag {t}")),
        };
        Ok(RouteRec {
            field,
            header_name,
            kind,
            value: get_str(b, 2 + STR_LEN)?,
            cluster_idx: get_u32(b, 2 + 2 * STR_LEN),
        })
    }

    pub fn is_header_match(&self) -> bool {
        matches!(self.field, MatchField::Header(_))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) struct ClusterRec {
    pub name: StrVal,
    pub policy: LbPolicy,
    pub protocol: Protocol,
    pub endpoints: MapRef,
}

impl ClusterRec {
    pub fn encode(&self) -> Vec<u8> {
        let mut b = vec![0u8; CLUSTER_LEN];
        put_strval(&mut b, 0, &self.name);
        b[STR_LEN] = match self.policy {
            LbPolicy::RoundRobin => 0,
            LbPolicy::Random => 1,
            LbPolicy::LeastRequest => 2,
        };
        b[STR_LEN + 1] = proto_tag(self.protocol);
        put_map_ref(&mut b, STR_LEN + 2, self.endpoints);
        b
    }

    pub fn decode(b: &[u8]) -> Result<Self, String> {
        if b.len() != CLUSTER_LEN {
            return Err(format!("cluster record length {}", b.len()));
        }
        let policy = match b[STR_LEN] {
            0 => LbPolicy::RoundRobin,
            1 => LbPolicy::Random,
            2 => LbPolicy::LeastRequest,
            t => return Err(format!("bad policy tag {t}")),
        };
        Ok(ClusterRec {
            name: get_str(b, 0)?,
            policy,
            protocol: proto_from(b[STR_LEN + 1])?,
            endpoints: get_map_ref(b, STR_LEN + 2),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct EndpointRec {
    pub addr: IpAddr,
    pub port: u16,
    pub weight: u32,
}

impl EndpointRec {
    pub fn encode(&self) -> Vec<u8> {
        let mut b = vec![0u8; ENDPOINT_LEN];
        put_ip(&mut b, 0, &self.addr);
        b[17..19].copy_from_slice(&self.port.to_le_bytes());
        put_u32(&mut b, 19, self.weight);
        b
    }

    pub fn decode(b: &[u8]) -> Result<Self, String> {
        if b.len() != ENDPOINT_LEN {
            return Err(format!("endpoint record length {}", b.len()));
        }
        Ok(EndpointRec {
            addr: get_ip(b, 0)?,
            port: u16::from_le_bytes(b[17..19].try_into().unwrap()),
            weight: get_u32(b, 19),
        })
    }
}

/// Entry in the lb-state directory: pairs a cluster index with its
/// counters map.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct LbDirRec {
    pub lb_map: MapId,
    pub endpoint_count: u32,
}

impl LbDirRec {
    pub fn encode(&self) -> Vec<u8> {
        let mut b = vec![0u8; LB_DIR_LEN];
        put_u32(&mut b, 0, self.lb_map.0);
        put_u32(&mut b, 4, self.endpoint_count);
        b
    }

    pub fn decode(b: &[u8]) -> Result<Self, String> {
        if b.len() != LB_DIR_LEN {
            return Err(format!("lb dir record length {}", b.len()));
        }
        Ok(LbDirRec {
            lb_map: MapId(get_u32(b, 0)),
            endpoint_count: get_u32(b, 4),
        })
    }
}

/// Split a string into padded 64-byte chunk records.
pub(crate) fn string_chunks(s: &str) -> Vec<Vec<u8>> {
    s.as_bytes()
        .chunks(CHUNK_LEN)
        .map(|c| {
            let mut b = vec![0u8; CHUNK_LEN];
            b[..c.len()].copy_from_slice(c);
            b
        })
        .collect()
}

/// Reassemble a string of `len` bytes from chunk records.
pub(crate) fn string_from_chunks(chunks: &[Vec<u8>], len: u32) -> Result<String, String> {
    let len = len as usize;
    let need = len.div_ceil(CHUNK_LEN);
    if chunks.len() < need {
        return Err(format!("string needs {need} chunks, found {}", chunks.len()));
    }
    let mut bytes = Vec::with_capacity(len);
    for (i, c) in chunks.iter().take(need).enumerate() {
        let take = (len - i * CHUNK_LEN).min(CHUNK_LEN);
        bytes.extend_from_slice(&c[..take]);
    }
    String::from_utf8(bytes).map_err(|_| "non-utf8 chunked string".to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn listener_record_round_trip() {
        let rec = ListenerRec {
            name: StrVal::Inline("web".into()),
            tenant: StrVal::Inline("default".into()),
            bind: "127.0.0.1:9001".parse().unwrap(),
            virtual_ip: Some("10.1.2.3".parse().unwrap()),
            filters: MapRef { id: MapId(7), scan: 2 },
            default_cluster: Some(4),
        };
        let b = rec.encode();
        assert_eq!(b.len(), LISTENER_LEN);
        assert_eq!(ListenerRec::decode(&b).unwrap(), rec);

        let rec = ListenerRec {
            name: StrVal::Chunked { map: MapId(9), len: 100 },
            tenant: StrVal::Inline(String::new()),
            bind: "[::1]:80".parse().unwrap(),
            virtual_ip: None,
            filters: MapRef { id: MapId::NULL, scan: 0 },
            default_cluster: None,
        };
        assert_eq!(ListenerRec::decode(&rec.encode()).unwrap(), rec);
    }

    #[test]
    fn route_and_filter_round_trip() {
        let rec = RouteRec {
            field: MatchField::Header(String::new()),
            header_name: StrVal::Inline("x-tenant".into()),
            kind: MatchKind::Regex,
            value: StrVal::Inline("blue|green".into()),
            cluster_idx: 3,
        };
        let b = rec.encode();
        assert_eq!(b.len(), ROUTE_LEN);
        assert_eq!(RouteRec::decode(&b).unwrap(), rec);

        let f = FilterRec {
            protocol: Protocol::Mux,
            routes: MapRef { id: MapId(12), scan: 40 },
        };
        assert_eq!(FilterRec::decode(&f.encode()).unwrap(), f);
    }

    #[test]
    fn cluster_endpoint_lbdir_round_trip() {
        let c = ClusterRec {
            name: StrVal::Inline("backend".into()),
            policy: LbPolicy::LeastRequest,
            protocol: Protocol::Http11,
            endpoints: MapRef { id: MapId(3), scan: 2 },
        };
        assert_eq!(ClusterRec::decode(&c.encode()).unwrap(), c);

        let e = EndpointRec {
            addr: "192.168.1.10".parse().unwrap(),
            port: 8080,
            weight: 5,
        };
        let b = e.encode();
        assert_eq!(b.len(), ENDPOINT_LEN);
        assert_eq!(EndpointRec::decode(&b).unwrap(), e);

        let d = LbDirRec { lb_map: MapId(44), endpoint_count: 3 };
        assert_eq!(LbDirRec::decode(&d.encode()).unwrap(), d);
    }

    #[test]
    fn rejects_wrong_lengths_and_tags() {
        assert!(ListenerRec::decode(&[0u8; 10]).is_err());
        let mut b = FilterRec {
            protocol: Protocol::Http11,
            routes: MapRef { id: MapId(1), scan: 0 },
        }
        .encode();
        b[0] = 9;
        assert!(FilterRec::decode(&b).is_err());
    }

    #[test]
    fn string_chunking_round_trip() {
        let s = "x".repeat(150);
        let chunks = string_chunks(&s);
        assert_eq!(chunks.len(), 3);
        assert_eq!(StrVal::chunks_for(150), 3);
        assert!(chunks.iter().all(|c| c.len() == CHUNK_LEN));
        assert_eq!(string_from_chunks(&chunks, 150).unwrap(), s);

        let exact = "y".repeat(128);
        let chunks = string_chunks(&exact);
        assert_eq!(chunks.len(), 2);
        assert_eq!(string_from_chunks(&chunks, 128).unwrap(), exact);
    }
}
