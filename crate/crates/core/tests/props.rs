//! Property tests over the config schema and the store, driven by seeded
//! generation rather than proptest's own value trees: the seed is the
//! shrinkable input, the generator does the structuring.

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use xlb_core::config::{parse_config, serialize_config};
use xlb_core::testkit::{gen_snapshot, mutate_snapshot, GenDims};
use xlb_core::{ConfigSnapshot, NestedMapStore};

fn arb_snapshot(seed: u64, mutations: usize) -> ConfigSnapshot {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut snap = gen_snapshot(&mut rng, &GenDims::default());
    for _ in 0..mutations {
        snap = mutate_snapshot(&mut rng, &snap);
    }
    snap
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 32, ..ProptestConfig::default() })]

    #[test]
    fn config_roundtrips_through_yaml(seed in any::<u64>(), mutations in 0usize..6) {
        let snap = arb_snapshot(seed, mutations);
        let text = serialize_config(&snap);
        let back = parse_config(text.as_bytes()).expect("serialized config must reparse");
        prop_assert_eq!(back, snap);
    }

    #[test]
    fn flatten_then_unflatten_is_identity(seed in any::<u64>(), mutations in 0usize..6) {
        let snap = arb_snapshot(seed, mutations);
        let store = NestedMapStore::flatten(&snap).expect("flatten");
        prop_assert_eq!(store.unflatten().expect("unflatten"), snap.clone());
        prop_assert_eq!(store.occupancy() as usize, snap.node_count());
        let report = store.verify_reachability().expect("reachability");
        prop_assert!(report.leaked.is_empty());
    }

    /// A chain of deltas must land on the same logical state as one
    /// direct flatten of the final snapshot.
    #[test]
    fn delta_chain_matches_direct_flatten(seed in any::<u64>(), chain in 1usize..8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut snap = gen_snapshot(&mut rng, &GenDims::default());
        let evolved = NestedMapStore::flatten(&snap).expect("flatten");
        for _ in 0..chain {
            snap = mutate_snapshot(&mut rng, &snap);
            let plan = evolved.plan_delta(&snap).expect("plan");
            evolved.apply_delta(&plan).expect("apply");
        }
        let direct = NestedMapStore::flatten(&snap).expect("direct flatten");
        prop_assert_eq!(evolved.unflatten().expect("unflatten"), snap.clone());
        prop_assert_eq!(
            evolved.unflatten().expect("unflatten"),
            direct.unflatten().expect("unflatten")
        );
        prop_assert_eq!(evolved.occupancy(), direct.occupancy());
        prop_assert_eq!(evolved.version(), snap.version);
        let report = evolved.verify_reachability().expect("reachability");
        prop_assert!(report.leaked.is_empty(), "leaked: {:?}", report.leaked);
    }
}
