//! Load-balancing policies over per-cluster counter maps.
//!
//! All policy state lives in the store's lb-state maps so it survives
//! config deltas that leave the cluster in place: slot 0 is the
//! round-robin cursor, slot 1 the random state, slot 2 a request
//! counter, and slots 3.. hold one outstanding-request gauge per
//! endpoint. Round-robin and random picks are a single atomic op on
//! the shared slot; least-request serializes pickers of one cluster
//! around its scan so two concurrent picks cannot select the same
//! least-loaded endpoint before either dispatch lands.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};
use std::sync::{Arc, Mutex};

use dashmap::DashMap;

use crate::config::LbPolicy;
use crate::store::InnerMap;

pub const SLOT_CURSOR: u32 = 0;
pub const SLOT_RNG: u32 = 1;
pub const SLOT_REQUESTS: u32 = 2;
pub const SLOT_OUTSTANDING_BASE: u32 = 3;

const SPLITMIX_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

fn splitmix_mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
pub enum LbError {
    #[error("cluster has no endpoints")]
    EmptyCluster,
}

/// Process-wide helper state the counter maps cannot hold: expanded
/// weighted round-robin schedules and per-cluster pick locks.
#[derive(Default)]
pub struct LbRuntime {
    schedules: DashMap<(u32, u64), Arc<Vec<u32>>>,
    locks: DashMap<u32, Arc<Mutex<()>>>,
}

/// Smooth weighted round-robin expansion: each step advances every
/// endpoint by its weight and picks the largest accumulator, keeping
/// heavier endpoints spread out rather than bunched.
fn smooth_schedule(weights: &[u32]) -> Vec<u32> {
    let total: i64 = weights.iter().map(|w| i64::from(*w)).sum();
    let mut current = vec![0i64; weights.len()];
    let mut out = Vec::with_capacity(total as usize);
    for _ in 0..total {
        for (c, w) in current.iter_mut().zip(weights) {
            *c += i64::from(*w);
        }
        let (best, _) = current
            .iter()
            .enumerate()
            .fold((0usize, i64::MIN), |(bi, bv), (i, v)| {
                if *v > bv {
                    (i, *v)
                } else {
                    (bi, bv)
                }
            });
        current[best] -= total;
        out.push(best as u32);
    }
    out
}

fn weights_key(weights: &[u32]) -> u64 {
    let mut h = DefaultHasher::new();
    weights.hash(&mut h);
    h.finish()
}

impl LbRuntime {
    pub fn new() -> Self {
        Self::default()
    }

    fn schedule(&self, map_id: u32, weights: &[u32]) -> Arc<Vec<u32>> {
        let key = (map_id, weights_key(weights));
        if let Some(s) = self.schedules.get(&key) {
            return s.clone();
        }
        if self.schedules.len() > 256 {
            self.schedules.clear();
        }
        let s = Arc::new(smooth_schedule(weights));
        self.schedules.insert(key, s.clone());
        s
    }

    /// Choose an endpoint slot. `weights` must describe the cluster's
    /// endpoints in slot order.
    pub fn pick(&self, lb: &InnerMap, policy: LbPolicy, weights: &[u32]) -> Result<usize, LbError> {
        let n = weights.len();
        if n == 0 {
            return Err(LbError::EmptyCluster);
        }
        let idx = match policy {
            LbPolicy::RoundRobin => {
                let uniform = weights.iter().all(|w| *w == weights[0]);
                let ticket = lb.counter_fetch_add(SLOT_CURSOR, 1);
                if uniform {
                    (ticket % n as u64) as usize
                } else {
                    let seq = self.schedule(lb.id().0, weights);
                    seq[(ticket % seq.len() as u64) as usize] as usize
                }
            }
            LbPolicy::Random => {
                let state = lb
                    .counter_fetch_add(SLOT_RNG, SPLITMIX_GAMMA)
                    .wrapping_add(SPLITMIX_GAMMA);
                let r = splitmix_mix(state);
                let total: u64 = weights.iter().map(|w| u64::from(*w)).sum();
                let mut t = r % total.max(1);
                let mut chosen = n - 1;
                for (i, w) in weights.iter().enumerate() {
                    if t < u64::from(*w) {
                        chosen = i;
                        break;
                    }
                    t -= u64::from(*w);
                }
                chosen
            }
            LbPolicy::LeastRequest => {
                let lock = self
                    .locks
                    .entry(lb.id().0)
                    .or_default()
                    .clone();
                let _g = lock.lock().unwrap();
                let mut best = 0usize;
                let mut best_v = u64::MAX;
                for i in 0..n {
                    let v = lb.counter_load(SLOT_OUTSTANDING_BASE + i as u32);
                    if v < best_v {
                        best = i;
                        best_v = v;
                    }
                }
                best
            }
        };
        Ok(idx)
    }
}

/// Account a dispatch to `endpoint`.
pub fn on_dispatch(lb: &InnerMap, endpoint: usize) {
    lb.counter_fetch_add(SLOT_REQUESTS, 1);
    lb.counter_fetch_add(SLOT_OUTSTANDING_BASE + endpoint as u32, 1);
}

/// Account a completion; returns `false` when the gauge was already
/// zero (double completion), leaving it clamped.
#[must_use]
pub fn on_complete(lb: &InnerMap, endpoint: usize) -> bool {
    lb.counter_try_decrement(SLOT_OUTSTANDING_BASE + endpoint as u32)
}

pub fn outstanding(lb: &InnerMap, endpoint: usize) -> u64 {
    lb.counter_load(SLOT_OUTSTANDING_BASE + endpoint as u32)
}

pub fn requests_total(lb: &InnerMap) -> u64 {
    lb.counter_load(SLOT_REQUESTS)
}
