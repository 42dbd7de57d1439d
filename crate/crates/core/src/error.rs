use thiserror::Error;

use crate::model::AgentId;

/// Errors surfaced by the simulator library.
#[derive(Debug, Error)]
pub enum Error {
    /// A parameter is outside its permitted domain.
    #[error("parameter error: {0}")]
    Param(String),

    /// An id that is not part of the current topology or route table.
    #[error("unknown agent {0}")]
    Lookup(AgentId),

    /// A uid is already live (or was used earlier in this run).
    #[error("uid {0} is already in use")]
    Identity(AgentId),

    /// Operation on an endpoint or agent that is closed / dead.
    #[error("lifecycle error: {0}")]
    Lifecycle(String),

    /// Transport address already bound.
    #[error("address in use: {0}")]
    AddrInUse(String),

    /// Operation is not available in the current scheduler mode.
    #[error("mode error: {0}")]
    Mode(String),

    /// Barrier or settle timed out.
    #[error("synchronization error: {0}")]
    Sync(String),

    /// Operation requires a role the agent does not hold.
    #[error("role error: {0}")]
    Role(String),

    /// Wire payload could not be decoded.
    #[error("decode error: {0}")]
    Decode(String),

    /// Scenario failed to parse or validate.
    #[error("{0}")]
    Scenario(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
