//! Agent-based simulator for self-organizing mobile ad-hoc networks.

pub mod agent;
pub mod error;
pub mod control;
pub mod events;
pub mod headless;
pub mod metrics;
pub mod model;
pub mod protocol;
pub mod realtime;
pub mod scenario;
pub mod smb;
pub mod transport;
pub mod wire;
pub mod world;

pub use error::{Error, Result};
