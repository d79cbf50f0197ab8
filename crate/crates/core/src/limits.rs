//! Fixed sizing bounds shared by the config model, store, and data plane.
//!
//! These are deliberately compile-time constants rather than tunables:
//! every lookup loop in the hot path is bounded by one of them, and the
//! store's slot arrays are sized from them so that config deltas can be
//! applied in place without reallocating inner maps.

/// Maximum number of filters attached to one listener.
pub const FILTER_MAX_NUM: usize = 64;

/// Maximum number of route rules attached to one filter.
pub const ROUTE_MAX_NUM: usize = 1024;

/// Maximum number of endpoints in one cluster.
pub const MAX_ENDPOINTS: usize = 256;

/// Hard bound on live records across all record-bearing inner maps.
pub const MAP_CAPACITY: usize = 10_000;

/// Largest accepted HTTP/1.1 head (request/status line plus headers).
pub const MAX_HEADER_BYTES: usize = 16 * 1024;

/// Largest accepted MUX frame payload.
pub const MUX_MAX_PAYLOAD: usize = 16 * 1024 * 1024;

/// Per-instance-socket bound on requests parked behind an in-flight
/// HTTP/1.1 exchange.
pub const HOLD_QUEUE_MAX: usize = 1024;

/// Connection-pool sizing per (tenant group, endpoint).
pub const POOL_MIN_PER_ENDPOINT: usize = 1;
pub const POOL_MAX_PER_ENDPOINT: usize = 4;

/// How long a dispatched request may wait for its response before the
/// instance socket is torn down.
pub const DISPATCH_TIMEOUT_SECS: u64 = 30;

/// Default admin API port.
pub const DEFAULT_ADMIN_PORT: u16 = 15001;

/// Upper bound on the sum of endpoint weights within one cluster; keeps
/// the expanded weighted round-robin schedule small.
pub const WEIGHT_SUM_MAX: u64 = 65_536;
