//! Core building blocks for the xlb layer-7 load balancer.
//!
//! This crate contains everything that does not touch the network:
//! the hierarchical configuration model and its file schema, the flat
//! map-id-indirected store that serves routing lookups under concurrent
//! delta updates, the HTTP/1.1 and MUX codecs, the content-based router,
//! the load-balancing policies, and per-flow traffic metrics.
//!
//! The daemon and benchmark binaries live in sibling crates and drive
//! these pieces over real sockets.

pub mod codec;
pub mod config;
pub mod lb;
pub mod limits;
pub mod metrics;
pub mod router;
pub mod store;
pub mod testkit;

pub use codec::{Protocol, Request, Response};
pub use config::{ConfigSnapshot, Cluster, Endpoint, Filter, Listener, RouteRule};
pub use store::NestedMapStore;
