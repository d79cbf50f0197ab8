//! Deterministic textual dump of the store's map graph, for the admin
//! endpoint and golden tests.

use std::fmt::Write as _;

use crate::config::MatchField;

use super::record::{ClusterRec, EndpointRec, FilterRec, LbDirRec, ListenerRec, RouteRec, StrVal};
use super::{InnerMap, NestedMapStore};

impl NestedMapStore {
    /// Render every reachable map in a fixed order: clusters subtree,
    /// lb directory, listeners subtree, metrics. Errors are embedded
    /// in the output rather than failing the dump.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        let roots = self.roots();
        let _ = writeln!(out, "version {}", self.version());
        let _ = writeln!(
            out,
            "occupancy {} peak {} maps {}",
            self.occupancy(),
            self.occupancy_peak(),
            self.map_count()
        );
        let _ = writeln!(out, "root clusters {}", roots.clusters);
        let _ = writeln!(out, "root lb_state {}", roots.lb_state);
        let _ = writeln!(out, "root listeners {}", roots.listeners);
        let _ = writeln!(out, "root metrics {}", roots.metrics);

        let guard = self.begin_read();
        self.dump_clusters(&mut out);
        self.dump_listeners(&mut out);
        if let Some(m) = self.map(roots.metrics) {
            self.dump_counters(&mut out, &m);
        }
        drop(guard);
        out
    }

    fn str_of(&self, v: &StrVal) -> String {
        match v {
            StrVal::Inline(s) => format!("{s:?}"),
            StrVal::Chunked { map, len } => {
                match self.read_string(v, "dump") {
                    Ok((s, _)) => format!("{s:?} (chunked {map})"),
                    Err(_) => format!("<unreadable {len} bytes in {map}>"),
                }
            }
        }
    }

    fn header(&self, out: &mut String, m: &InnerMap) {
        let _ = writeln!(
            out,
            "{} {} cap={} live={}",
            m.id(),
            m.role().name(),
            m.capacity(),
            m.live()
        );
    }

    fn dump_counters(&self, out: &mut String, m: &InnerMap) {
        let nonzero: Vec<String> = (0..m.capacity() as u32)
            .filter_map(|i| {
                let v = m.counter_load(i);
                (v != 0).then(|| format!("[{i}]={v}"))
            })
            .collect();
        let _ = writeln!(
            out,
            "{} {} cap={} nonzero={{{}}}",
            m.id(),
            m.role().name(),
            m.capacity(),
            nonzero.join(" ")
        );
    }

    fn dump_clusters(&self, out: &mut String) {
        let roots = self.roots();
        let Some(cmap) = self.map(roots.clusters) else {
            return;
        };
        self.header(out, &cmap);
        let mut children = Vec::new();
        for i in 0..cmap.capacity() as u32 {
            let Some(bytes) = cmap.get(i) else { continue };
            match ClusterRec::decode(&bytes) {
                Ok(rec) => {
                    let _ = writeln!(
                        out,
                        "  [{i}] cluster name={} policy={:?} protocol={} endpoints={}#{}",
                        self.str_of(&rec.name),
                        rec.policy,
                        rec.protocol,
                        rec.endpoints.id,
                        rec.endpoints.scan
                    );
                    children.push(rec.endpoints.id);
                }
                Err(e) => {
                    let _ = writeln!(out, "  [{i}] !! {e}");
                }
            }
        }
        for id in children {
            if let Some(em) = self.map(id) {
                self.header(out, &em);
                for i in 0..em.capacity() as u32 {
                    let Some(bytes) = em.get(i) else { continue };
                    match EndpointRec::decode(&bytes) {
                        Ok(rec) => {
                            let _ = writeln!(
                                out,
                                "  [{i}] endpoint {}:{} weight={}",
                                rec.addr, rec.port, rec.weight
                            );
                        }
                        Err(e) => {
                            let _ = writeln!(out, "  [{i}] !! {e}");
                        }
                    }
                }
            }
        }
        if let Some(dir) = self.map(roots.lb_state) {
            self.header(out, &dir);
            let mut lb_maps = Vec::new();
            for i in 0..dir.capacity() as u32 {
                let Some(bytes) = dir.get(i) else { continue };
                match LbDirRec::decode(&bytes) {
                    Ok(rec) => {
                        let _ = writeln!(
                            out,
                            "  [{i}] lbdir map={} endpoints={}",
                            rec.lb_map, rec.endpoint_count
                        );
                        lb_maps.push(rec.lb_map);
                    }
                    Err(e) => {
                        let _ = writeln!(out, "  [{i}] !! {e}");
                    }
                }
            }
            for id in lb_maps {
                if let Some(m) = self.map(id) {
                    self.dump_counters(out, &m);
                }
            }
        }
    }

    fn dump_listeners(&self, out: &mut String) {
        let roots = self.roots();
        let Some(lmap) = self.map(roots.listeners) else {
            return;
        };
        self.header(out, &lmap);
        let mut filter_maps = Vec::new();
        for i in 0..lmap.capacity() as u32 {
            let Some(bytes) = lmap.get(i) else { continue };
            match ListenerRec::decode(&bytes) {
                Ok(rec) => {
                    let vip = rec
                        .virtual_ip
                        .map(|ip| ip.to_string())
                        .unwrap_or_else(|| "-".into());
                    let dc = rec
                        .default_cluster
                        .map(|d| d.to_string())
                        .unwrap_or_else(|| "-".into());
                    let _ = writeln!(
                        out,
                        "  [{i}] listener name={} bind={} tenant={} vip={} filters={}#{} default={}",
                        self.str_of(&rec.name),
                        rec.bind,
                        self.str_of(&rec.tenant),
                        vip,
                        rec.filters.id,
                        rec.filters.scan,
                        dc
                    );
                    filter_maps.push(rec.filters.id);
                }
                Err(e) => {
                    let _ = writeln!(out, "  [{i}] !! {e}");
                }
            }
        }
        for id in filter_maps {
            let Some(fm) = self.map(id) else { continue };
            self.header(out, &fm);
            let mut route_maps = Vec::new();
            for i in 0..fm.capacity() as u32 {
                let Some(bytes) = fm.get(i) else { continue };
                match FilterRec::decode(&bytes) {
                    Ok(rec) => {
                        let _ = writeln!(
                            out,
                            "  [{i}] filter protocol={} routes={}#{}",
                            rec.protocol, rec.routes.id, rec.routes.scan
                        );
                        route_maps.push(rec.routes.id);
                    }
                    Err(e) => {
                        let _ = writeln!(out, "  [{i}] !! {e}");
                    }
                }
            }
            for id in route_maps {
                let Some(rm) = self.map(id) else { continue };
                self.header(out, &rm);
                for i in 0..rm.capacity() as u32 {
                    let Some(bytes) = rm.get(i) else { continue };
                    match RouteRec::decode(&bytes) {
                        Ok(rec) => {
                            let field = match &rec.field {
                                MatchField::Header(_) => {
                                    format!("header:{}", self.str_of(&rec.header_name))
                                }
                                f => f.to_string(),
                            };
                            let _ = writeln!(
                                out,
                                "  [{i}] route {field} {:?} {} -> cluster {}",
                                rec.kind,
                                self.str_of(&rec.value),
                                rec.cluster_idx
                            );
                        }
                        Err(e) => {
                            let _ = writeln!(out, "  [{i}] !! {e}");
                        }
                    }
                }
            }
        }
    }
}
