//! Delta planning and application: minimal plans for small edits,
//! ordered teardown, version gating, counter survival, and long
//! mutation chains staying leak-free.

use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use xlb_core::codec::Request;
use xlb_core::config::parse_config;
use xlb_core::config::Endpoint;
use xlb_core::lb;
use xlb_core::limits::MAP_CAPACITY;
use xlb_core::router::{self, MatchOrder, RegexCache};
use xlb_core::store::{AddOp, DeleteOp, NestedMapStore, StoreError};
use xlb_core::testkit::{gen_snapshot, mutate_snapshot, GenDims};

const BASE: &str = r#"
listeners:
  - name: edge
    bind: "127.0.0.1:9450"
    tenant_group: blue
    filters:
      - type: http1
        routes:
          - { field: path, kind: prefix, value: "/api/", cluster: api }
          - { field: path, kind: exact, value: "/health", cluster: health }
  - name: second
    bind: "127.0.0.1:9451"
    tenant_group: green
    filters:
      - type: http1
        routes:
          - { field: method, kind: exact, value: "GET", cluster: api }
clusters:
  - name: api
    policy: round_robin
    endpoints:
      - { addr: "10.0.0.1", port: 8080 }
      - { addr: "10.0.0.2", port: 8080 }
  - name: health
    policy: round_robin
    endpoints:
      - { addr: "10.0.1.1", port: 9000 }
"#;

#[test]
fn adding_an_endpoint_touches_only_the_cluster_subtree() {
    let base = parse_config(BASE.as_bytes()).unwrap();
    let store = NestedMapStore::flatten(&base).unwrap();
    let maps_before = store.map_count();

    let mut next = base.clone();
    next.version = 2;
    next.clusters[0].endpoints.push(Endpoint {
        addr: "10.0.0.3".parse().unwrap(),
        port: 8080,
        weight: 1,
    });

    let plan = store.plan_delta(&next).unwrap();
    assert!(plan.deletes.is_empty(), "unexpected deletes: {:?}", plan.deletes);
    // no maps are created or dropped and no listener map is touched:
    // the new endpoint record lands first, then the parent cluster
    // record announcing the longer scan, then the lb directory entry
    // with the new endpoint count
    assert_eq!(plan.adds.len(), 3, "plan not minimal: {:?}", plan.adds);
    match &plan.adds[0] {
        AddOp::Write { map, index, .. } => {
            assert_ne!(*map, store.roots().clusters);
            assert_eq!(*index, 2);
        }
        other => panic!("expected endpoint write, got {other:?}"),
    }
    match &plan.adds[1] {
        AddOp::Write { map, index, .. } => {
            assert_eq!(*map, store.roots().clusters);
            assert_eq!(*index, 0);
        }
        other => panic!("expected cluster record rewrite, got {other:?}"),
    }
    match &plan.adds[2] {
        AddOp::Write { map, index, .. } => {
            assert_eq!(*map, store.roots().lb_state);
            assert_eq!(*index, 0);
        }
        other => panic!("expected lb directory rewrite, got {other:?}"),
    }
    let listener_maps = [store.roots().listeners];
    for op in &plan.adds {
        if let AddOp::Write { map, .. } = op {
            assert!(!listener_maps.contains(map), "listener map touched: {op:?}");
        }
    }

    store.apply_delta(&plan).unwrap();
    assert_eq!(store.version(), 2);
    assert_eq!(store.unflatten().unwrap(), next);
    assert_eq!(store.occupancy(), next.node_count());
    assert_eq!(store.map_count(), maps_before);
    assert!(store.verify_reachability().unwrap().leaked.is_empty());
}

#[test]
fn removing_a_listener_clears_parent_before_dropping_subtree() {
    let base = parse_config(BASE.as_bytes()).unwrap();
    let store = NestedMapStore::flatten(&base).unwrap();
    let maps_before = store.map_count();

    let mut next = base.clone();
    next.version = 2;
    next.listeners.pop();

    let plan = store.plan_delta(&next).unwrap();
    assert!(plan.adds.is_empty(), "unexpected adds: {:?}", plan.adds);
    // parent slot vacated first, then the filters map and its routes map
    assert_eq!(
        plan.deletes[0],
        DeleteOp::Clear {
            map: store.roots().listeners,
            index: 1
        }
    );
    let drops: Vec<_> = plan.deletes[1..]
        .iter()
        .map(|d| match d {
            DeleteOp::DropMap { id } => *id,
            other => panic!("expected DropMap after Clear, got {other:?}"),
        })
        .collect();
    assert_eq!(drops.len(), 2, "filters map + routes map: {drops:?}");

    store.apply_delta(&plan).unwrap();
    assert_eq!(store.unflatten().unwrap(), next);
    assert_eq!(store.map_count(), maps_before - 2);
    assert!(store.verify_reachability().unwrap().leaked.is_empty());
}

#[test]
fn unchanged_config_planned_at_next_version_is_root_only() {
    let base = parse_config(BASE.as_bytes()).unwrap();
    let store = NestedMapStore::flatten(&base).unwrap();
    let mut next = base.clone();
    next.version = 2;
    let plan = store.plan_delta(&next).unwrap();
    assert_eq!(plan.op_count(), 0, "no-op delta should carry no ops: {plan:?}");
    store.apply_delta(&plan).unwrap();
    assert_eq!(store.version(), 2);
    assert_eq!(store.unflatten().unwrap(), next);
}

#[test]
fn version_must_advance() {
    let base = parse_config(BASE.as_bytes()).unwrap();
    let store = NestedMapStore::flatten(&base).unwrap();
    let same = base.clone();
    match store.plan_delta(&same) {
        Err(StoreError::VersionMismatch { current, proposed }) => {
            assert_eq!((current, proposed), (1, 1));
        }
        other => panic!("expected VersionMismatch, got {other:?}"),
    }
}

#[test]
fn stale_plan_is_rejected_whole() {
    let base = parse_config(BASE.as_bytes()).unwrap();
    let store = NestedMapStore::flatten(&base).unwrap();

    let mut next = base.clone();
    next.version = 2;
    next.clusters[0].endpoints.pop();
    let plan_a = store.plan_delta(&next).unwrap();
    let plan_b = store.plan_delta(&next).unwrap();

    store.apply_delta(&plan_a).unwrap();
    let occupancy = store.occupancy();
    match store.apply_delta(&plan_b) {
        Err(StoreError::VersionMismatch { current, proposed }) => {
            assert_eq!((current, proposed), (2, 2));
        }
        other => panic!("expected VersionMismatch, got {other:?}"),
    }
    // the rejected plan changed nothing
    assert_eq!(store.occupancy(), occupancy);
    assert_eq!(store.unflatten().unwrap(), next);
}

#[test]
fn lb_counters_survive_unrelated_and_related_deltas() {
    let base = parse_config(BASE.as_bytes()).unwrap();
    let store = NestedMapStore::flatten(&base).unwrap();

    let api = router::resolve_cluster(&store, 0).unwrap();
    assert_eq!(api.name, "api");
    lb::on_dispatch(&api.lb_map, 0);
    lb::on_dispatch(&api.lb_map, 1);
    lb::on_dispatch(&api.lb_map, 1);
    assert!(lb::on_complete(&api.lb_map, 1));

    // unrelated: drop the second listener
    let mut next = base.clone();
    next.version = 2;
    next.listeners.pop();
    store.apply_delta(&store.plan_delta(&next).unwrap()).unwrap();

    let api2 = router::resolve_cluster(&store, 0).unwrap();
    assert_eq!(api2.lb_map.id(), api.lb_map.id());
    assert_eq!(lb::requests_total(&api2.lb_map), 3);
    assert_eq!(lb::outstanding(&api2.lb_map, 0), 1);
    assert_eq!(lb::outstanding(&api2.lb_map, 1), 1);

    // related: grow the cluster itself
    let mut third = next.clone();
    third.version = 3;
    third.clusters[0].endpoints.push(Endpoint {
        addr: "10.0.0.9".parse().unwrap(),
        port: 8080,
        weight: 1,
    });
    store.apply_delta(&store.plan_delta(&third).unwrap()).unwrap();
    let api3 = router::resolve_cluster(&store, 0).unwrap();
    assert_eq!(api3.endpoints.len(), 3);
    assert_eq!(lb::requests_total(&api3.lb_map), 3);
    assert_eq!(lb::outstanding(&api3.lb_map, 0), 1);
}

#[test]
fn cluster_reorder_keeps_lb_state_paired() {
    let base = parse_config(BASE.as_bytes()).unwrap();
    let store = NestedMapStore::flatten(&base).unwrap();

    let api = router::resolve_cluster(&store, 0).unwrap();
    lb::on_dispatch(&api.lb_map, 0);

    let mut next = base.clone();
    next.version = 2;
    next.clusters.rotate_left(1); // health now index 0, api index 1
    store.apply_delta(&store.plan_delta(&next).unwrap()).unwrap();

    let health = router::resolve_cluster(&store, 0).unwrap();
    let api_moved = router::resolve_cluster(&store, 1).unwrap();
    assert_eq!(health.name, "health");
    assert_eq!(api_moved.name, "api");
    // the api cluster kept its counters map across the move
    assert_eq!(api_moved.lb_map.id(), api.lb_map.id());
    assert_eq!(lb::requests_total(&api_moved.lb_map), 1);
    assert_eq!(lb::requests_total(&health.lb_map), 0);
    assert!(store.verify_reachability().unwrap().leaked.is_empty());
}

#[test]
fn root_growth_rebuilds_without_leaks() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let small = gen_snapshot(
        &mut rng,
        &GenDims {
            listeners: 2,
            clusters: 2,
            ..GenDims::default()
        },
    );
    let store = NestedMapStore::flatten(&small).unwrap();
    let roots_before = store.roots();

    // push listener count past the initial root capacity
    let mut big = small.clone();
    big.version = 2;
    for i in 0..20 {
        let mut l = big.listeners[0].clone();
        l.name = format!("extra{i}");
        l.bind = format!("127.0.0.1:{}", 9500 + i).parse().unwrap();
        big.listeners.push(l);
    }
    store.apply_delta(&store.plan_delta(&big).unwrap()).unwrap();

    assert_ne!(store.roots().listeners, roots_before.listeners);
    assert_eq!(store.unflatten().unwrap(), big);
    assert!(store.verify_reachability().unwrap().leaked.is_empty());
    assert_eq!(store.occupancy(), big.node_count());
}

#[test]
fn occupancy_peak_covers_transient_double_count() {
    let base = parse_config(BASE.as_bytes()).unwrap();
    let store = NestedMapStore::flatten(&base).unwrap();
    let n = base.node_count();

    // replace every listener and cluster name: whole tree is rebuilt,
    // so both generations briefly coexist
    let mut next = base.clone();
    next.version = 2;
    for l in &mut next.listeners {
        l.name = format!("renamed-{}", l.name);
    }
    for c in &mut next.clusters {
        let old = c.name.clone();
        c.name = format!("renamed-{old}");
        for l in &mut next.listeners {
            for f in &mut l.filters {
                for r in &mut f.routes {
                    if r.cluster == old {
                        r.cluster = c.name.clone();
                    }
                }
            }
        }
    }
    store.apply_delta(&store.plan_delta(&next).unwrap()).unwrap();
    assert_eq!(store.occupancy(), n);
    assert!(
        store.occupancy_peak() > n,
        "peak {} should exceed steady-state {n}",
        store.occupancy_peak()
    );
    assert!(store.occupancy_peak() <= 2 * n);
    assert!(store.verify_reachability().unwrap().leaked.is_empty());
}

#[test]
fn transient_peak_over_capacity_is_rejected_before_mutation() {
    // fill the store to the brim, then try a delta that rebuilds
    // everything: steady state still fits, the transient does not
    let mut clusters = Vec::new();
    for i in 0..39 {
        clusters.push(xlb_core::config::Cluster {
            name: format!("c{i}"),
            policy: xlb_core::config::LbPolicy::RoundRobin,
            endpoints: (0..127)
                .map(|k| Endpoint {
                    addr: format!("10.{i}.0.{k}").parse().unwrap(),
                    port: 1000,
                    weight: 1,
                })
                .collect(),
        });
    }
    let snap = xlb_core::config::ConfigSnapshot {
        version: 1,
        listeners: vec![],
        clusters,
    };
    assert_eq!(snap.node_count(), 39 * 128); // 4992 of 10,000
    let store = NestedMapStore::flatten(&snap).unwrap();

    let mut renamed = snap.clone();
    renamed.version = 2;
    for c in &mut renamed.clusters {
        c.name = format!("fresh-{}", c.name);
    }
    // doubling 4992 fits; now also grow each cluster a little so the
    // transient would cross the line: 4992 live + 39*(128+3) new > 10,000
    for c in &mut renamed.clusters {
        for k in 0..3 {
            c.endpoints.push(Endpoint {
                addr: format!("10.200.{k}.{}", c.endpoints.len() % 250).parse().unwrap(),
                port: 2000 + k as u16,
                weight: 1,
            });
        }
    }
    assert!(renamed.node_count() <= MAP_CAPACITY);
    match store.plan_delta(&renamed) {
        Err(StoreError::CapacityExceeded { needed, bound }) => {
            assert!(needed > bound);
            assert_eq!(bound, MAP_CAPACITY);
        }
        Ok(_) => panic!("transient over-capacity plan was admitted"),
        Err(other) => panic!("expected CapacityExceeded, got {other:?}"),
    }
    // store untouched
    assert_eq!(store.version(), 1);
    assert_eq!(store.unflatten().unwrap(), snap);
}

#[test]
fn long_mutation_chain_stays_leak_free() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let mut snap = gen_snapshot(&mut rng, &GenDims::default());
    let store = NestedMapStore::flatten(&snap).unwrap();
    for step in 0..150 {
        snap = mutate_snapshot(&mut rng, &snap);
        let plan = store
            .plan_delta(&snap)
            .unwrap_or_else(|e| panic!("step {step}: plan failed: {e}"));
        store
            .apply_delta(&plan)
            .unwrap_or_else(|e| panic!("step {step}: apply failed: {e}"));
        assert_eq!(store.unflatten().unwrap(), snap, "step {step}");
        assert_eq!(store.occupancy(), snap.node_count(), "step {step}");
        let report = store.verify_reachability().unwrap();
        assert!(report.leaked.is_empty(), "step {step}: leaked {:?}", report.leaked);
    }
}

#[test]
fn readers_never_observe_dangling_refs_during_deltas() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let snap = gen_snapshot(&mut rng, &GenDims::default());
    let store = Arc::new(NestedMapStore::flatten(&snap).unwrap());
    let stop = Arc::new(AtomicBool::new(false));
    let lookups = Arc::new(AtomicU64::new(0));

    let mut readers = Vec::new();
    for seed in 0..4u64 {
        let store = store.clone();
        let stop = stop.clone();
        let lookups = lookups.clone();
        readers.push(std::thread::spawn(move || {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let cache = RegexCache::new();
            let mut local_snap = None;
            while !stop.load(Ordering::Relaxed) {
                // listener 0 and cluster 0 exist in every generation
                let req = match &local_snap {
                    Some(s) => xlb_core::testkit::gen_request(&mut rng, s, "l0"),
                    None => Request::new("GET", "/api/"),
                };
                if local_snap.is_none() {
                    local_snap = store.unflatten().ok();
                }
                if let Err(e) = router::route(&store, 0, &req, MatchOrder::First, &cache) {
                    panic!("route hit dangling state: {e}");
                }
                if let Err(e) = router::resolve_cluster(&store, 0) {
                    panic!("resolve_cluster hit dangling state: {e}");
                }
                if let Err(e) = store.probe() {
                    panic!("traversal hit dangling state: {e}");
                }
                lookups.fetch_add(1, Ordering::Relaxed);
            }
        }));
    }

    let mut cur = snap;
    for _ in 0..60 {
        cur = mutate_snapshot(&mut rng, &cur);
        let plan = store.plan_delta(&cur).unwrap();
        store.apply_delta(&plan).unwrap();
    }
    stop.store(true, Ordering::Relaxed);
    for r in readers {
        r.join().unwrap();
    }
    assert!(lookups.load(Ordering::Relaxed) > 0);
    assert_eq!(store.unflatten().unwrap(), cur);
}
