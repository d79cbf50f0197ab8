//! Localhost admin endpoint: stats scraping and config submission over
//! plain HTTP/1.1.
//!
//! `GET /v1/stats` returns a JSON document; `GET /v1/config` returns
//! the active config as YAML; `POST /v1/config` submits a full
//! replacement document and applies it as a delta. Reads touch only
//! atomics and never block the data path.

use std::sync::atomic::Ordering;
use std::sync::Arc;

use bytes::BytesMut;
use tokio::io::{AsyncReadExt, AsyncWriteExt};
use tokio::net::{TcpListener, TcpStream};

use xlb_core::codec::{decode_request, encode_response, Request, Response};
use xlb_core::config::serialize_config;
use xlb_core::metrics::totals;
use xlb_core::{lb, router};

use crate::daemon::{apply_document, ApplyError, DaemonCore};

pub(crate) async fn serve(core: Arc<DaemonCore>, listener: TcpListener) {
    loop {
        match listener.accept().await {
            Ok((sock, _)) => {
                tokio::spawn(handle_conn(core.clone(), sock));
            }
            Err(_) => tokio::time::sleep(std::time::Duration::from_millis(10)).await,
        }
    }
}

async fn handle_conn(core: Arc<DaemonCore>, sock: TcpStream) {
    let _ = sock.set_nodelay(true);
    let (mut rd, mut wr) = sock.into_split();
    let mut buf = BytesMut::with_capacity(8 * 1024);
    loop {
        let req = loop {
            match decode_request(&buf) {
                Ok(Some((req, consumed))) => {
                    let _ = buf.split_to(consumed);
                    break req;
                }
                Ok(None) => {}
                Err(_) => return,
            }
            match rd.read_buf(&mut buf).await {
                Ok(0) | Err(_) => return,
                Ok(_) => {}
            }
        };
        let resp = handle(&core, &req).await;
        if wr.write_all(&encode_response(&resp)).await.is_err() {
            return;
        }
    }
}

async fn handle(core: &Arc<DaemonCore>, req: &Request) -> Response {
    match (req.method.as_str(), req.path.as_str()) {
        ("GET", "/v1/stats") => stats(core).await,
        ("GET", "/v1/config") => config_get(core),
        ("POST", "/v1/config") => config_post(core, &req.body).await,
        _ => json(404, serde_json::json!({ "error": "not_found" })),
    }
}

fn json(status: u16, value: serde_json::Value) -> Response {
    Response::new(status)
        .with_header("content-type", "application/json")
        .with_body(value.to_string().into_bytes())
}

fn config_get(core: &Arc<DaemonCore>) -> Response {
    match core.state.store.unflatten() {
        Ok(snap) => Response::new(200)
            .with_header("content-type", "application/yaml")
            .with_body(serialize_config(&snap).into_bytes()),
        Err(e) => json(500, serde_json::json!({ "error": e.to_string() })),
    }
}

async fn config_post(core: &Arc<DaemonCore>, body: &[u8]) -> Response {
    match apply_document(core, body).await {
        Ok(applied) => json(
            200,
            serde_json::json!({ "version": applied.version, "ops": applied.ops }),
        ),
        Err(ApplyError::Invalid(msg)) => json(400, serde_json::json!({ "error": msg })),
        Err(ApplyError::VersionConflict { current, proposed }) => json(
            409,
            serde_json::json!({
                "error": "version_conflict",
                "current": current,
                "proposed": proposed,
            }),
        ),
        Err(ApplyError::Bind(addr, msg)) => json(
            400,
            serde_json::json!({ "error": format!("bind {addr} failed: {msg}") }),
        ),
        Err(ApplyError::Internal(msg)) => json(500, serde_json::json!({ "error": msg })),
    }
}

async fn stats(core: &Arc<DaemonCore>) -> Response {
    let state = &core.state;
    let store = &state.store;

    let traffic = match state.metrics() {
        Some(m) => totals(&state.flows, &m),
        None => Default::default(),
    };

    let bound = core.listener_addrs().await;
    let listeners: Vec<serde_json::Value> = router::listeners(store)
        .unwrap_or_default()
        .into_iter()
        .map(|v| {
            serde_json::json!({
                "name": v.name,
                "bind": v.bind.to_string(),
                "local": bound.get(&v.bind).map(|a| a.to_string()),
                "tenant_group": v.tenant_group,
                "filters": v.filter_count,
                "passthrough": v.filter_count == 0,
            })
        })
        .collect();

    let mut clusters = Vec::new();
    for idx in 0..u32::MAX {
        let Ok(c) = router::resolve_cluster(store, idx) else {
            break;
        };
        let endpoints: Vec<serde_json::Value> = c
            .endpoints
            .iter()
            .enumerate()
            .map(|(i, (addr, weight))| {
                serde_json::json!({
                    "addr": addr.to_string(),
                    "weight": weight,
                    "outstanding": lb::outstanding(&c.lb_map, i),
                })
            })
            .collect();
        clusters.push(serde_json::json!({
            "name": c.name,
            "policy": format!("{:?}", c.policy),
            "protocol": c.protocol.to_string(),
            "requests_total": lb::requests_total(&c.lb_map),
            "endpoints": endpoints,
        }));
    }

    let p = &state.profile;
    let doc = serde_json::json!({
        "version": store.version(),
        "mode": state.mode.to_string(),
        "match_order": state.match_order.to_string(),
        "uptime_ms": state.started.elapsed().as_millis() as u64,
        "totals": traffic,
        "listeners": listeners,
        "clusters": clusters,
        "pools": state.pools.stats().await,
        "store": {
            "occupancy": store.occupancy(),
            "occupancy_peak": store.occupancy_peak(),
            "maps": store.map_count(),
            "resolves": store.resolve_count(),
        },
        "profile": {
            "parse_us": p.parse_ns.load(Ordering::Relaxed) / 1_000,
            "balance_us": p.balance_ns.load(Ordering::Relaxed) / 1_000,
            "relay_us": p.relay_ns.load(Ordering::Relaxed) / 1_000,
            "reply_us": p.reply_ns.load(Ordering::Relaxed) / 1_000,
            "samples": p.samples.load(Ordering::Relaxed),
        },
    });
    json(200, doc)
}
