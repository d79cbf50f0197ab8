//! The xlbd daemon: listener relay, connection pools, and the admin
//! control surface, built on the routing core.

pub mod admin;
pub mod daemon;
pub mod pool;
pub mod relay;
pub mod state;

pub use daemon::{boot, ApplyError, Applied, BootError, Daemon, DaemonOptions};
pub use state::{Mode, ProxyState};
