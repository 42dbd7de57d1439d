//! Self-organization protocols run inside each agent.
//!
//! A protocol never touches the transport directly: handlers receive a
//! [`Ctx`] that exposes the agent's identity, the current time, the routes
//! SMB has published, and an outbox. The agent runtime flushes the outbox
//! through SMB authorization after every handler call.

pub mod clustering;
pub mod leader;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::model::{AgentId, Role};
use crate::smb::RouteTable;
use crate::wire::{MessageBody, ProtocolMessage};

pub use clustering::{classify_role, ClusterState, HeadEntry};
pub use leader::{elect, resource_score, CloudState, MemberEntry, ResourceProfile, ScoreWeights};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProtocolKind {
    Clustering,
    Leader,
}

/// Protocol timing knobs, all in ticks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProtocolConfig {
    pub solicit_timeout: u64,
    pub beacon_rounds: u32,
    pub heartbeat_period: u64,
    pub heartbeat_timeout: u64,
    pub weights: ScoreWeights,
}

pub const SOLICIT_TIMEOUT: u64 = 5;
pub const BEACON_ROUNDS: u32 = 3;
pub const HEARTBEAT_PERIOD: u64 = 5;
pub const HEARTBEAT_TIMEOUT: u64 = 15;

impl Default for ProtocolConfig {
    fn default() -> Self {
        ProtocolConfig {
            solicit_timeout: SOLICIT_TIMEOUT,
            beacon_rounds: BEACON_ROUNDS,
            heartbeat_period: HEARTBEAT_PERIOD,
            heartbeat_timeout: HEARTBEAT_TIMEOUT,
            weights: ScoreWeights::default(),
        }
    }
}

impl ProtocolConfig {
    pub fn validate(&self) -> Result<()> {
        use crate::error::Error;
        if self.solicit_timeout == 0 || self.heartbeat_period == 0 || self.heartbeat_timeout == 0 {
            return Err(Error::Param("protocol timeouts must be positive".into()));
        }
        if self.beacon_rounds == 0 {
            return Err(Error::Param("beacon_rounds must be positive".into()));
        }
        self.weights.validate()
    }
}

/// Outgoing message queued by a handler.
#[derive(Debug, Clone, PartialEq)]
pub struct Outgoing {
    pub dst: AgentId,
    pub message: ProtocolMessage,
}

/// Protocol-level observation the runtime turns into an event.
#[derive(Debug, Clone, PartialEq)]
pub enum Note {
    RoleChange { from: Role, to: Role, affiliation: Option<AgentId> },
    Conflict { winner: AgentId, winner_score: f64, loser: AgentId, loser_score: f64 },
    Violation { src: Option<AgentId>, reason: String },
}

/// Handler context for one agent.
pub struct Ctx<'a> {
    pub me: AgentId,
    pub now: u64,
    pub k: u32,
    pub cfg: &'a ProtocolConfig,
    pub routes: &'a RouteTable,
    pub out: Vec<Outgoing>,
    pub notes: Vec<Note>,
}

impl<'a> Ctx<'a> {
    pub fn new(me: AgentId, now: u64, k: u32, cfg: &'a ProtocolConfig, routes: &'a RouteTable) -> Self {
        Ctx { me, now, k, cfg, routes, out: Vec::new(), notes: Vec::new() }
    }

    pub fn version(&self) -> u64 {
        self.routes.snapshot_version
    }

    pub fn send(&mut self, dst: AgentId, body: MessageBody) {
        let stamp = self.version();
        self.send_stamped(dst, stamp, body);
    }

    pub fn send_stamped(&mut self, dst: AgentId, stamp: u64, body: MessageBody) {
        self.out.push(Outgoing { dst, message: ProtocolMessage::new(self.me, stamp, body) });
    }

    pub fn neighbors(&self) -> Vec<AgentId> {
        self.routes.neighbors(self.me).map(|n| n.iter().copied().collect()).unwrap_or_default()
    }

    /// Send to every 1-hop neighbor except `skip`.
    pub fn to_neighbors(&mut self, stamp: u64, body: MessageBody, skip: Option<AgentId>) {
        for n in self.neighbors() {
            if Some(n) != skip {
                self.send_stamped(n, stamp, body.clone());
            }
        }
    }

    /// Send to every agent SMB says is reachable.
    pub fn to_reachable(&mut self, body: MessageBody) {
        let targets = self.routes.reachable_from(self.me).unwrap_or_default();
        for t in targets {
            self.send(t, body.clone());
        }
    }

    pub fn note(&mut self, n: Note) {
        self.notes.push(n);
    }

    pub fn violation(&mut self, src: Option<AgentId>, reason: impl Into<String>) {
        self.notes.push(Note::Violation { src, reason: reason.into() });
    }
}

/// Per-agent protocol state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProtocolState {
    Clustering(ClusterState),
    Leader(CloudState),
}

impl ProtocolState {
    pub fn new(kind: ProtocolKind, score: f64) -> Self {
        match kind {
            ProtocolKind::Clustering => ProtocolState::Clustering(ClusterState::default()),
            ProtocolKind::Leader => ProtocolState::Leader(CloudState::new(score)),
        }
    }

    pub fn kind(&self) -> ProtocolKind {
        match self {
            ProtocolState::Clustering(_) => ProtocolKind::Clustering,
            ProtocolState::Leader(_) => ProtocolKind::Leader,
        }
    }

    pub fn role(&self) -> Role {
        match self {
            ProtocolState::Clustering(s) => s.role,
            ProtocolState::Leader(s) => s.role,
        }
    }

    /// Cluster head a clustering node belongs to, or the leader a cloud
    /// node follows.
    pub fn affiliation(&self) -> Option<AgentId> {
        match self {
            ProtocolState::Clustering(s) => s.cluster_id,
            ProtocolState::Leader(s) => s.leader_id,
        }
    }

    pub fn is_settled(&self) -> bool {
        match self {
            ProtocolState::Clustering(s) => s.is_settled(),
            ProtocolState::Leader(s) => s.is_settled(),
        }
    }

    pub fn on_boot(&mut self, ctx: &mut Ctx) {
        match self {
            ProtocolState::Clustering(s) => s.on_boot(ctx),
            ProtocolState::Leader(s) => s.on_boot(ctx),
        }
    }

    pub fn on_message(&mut self, ctx: &mut Ctx, msg: ProtocolMessage) {
        match self {
            ProtocolState::Clustering(s) => s.on_message(ctx, msg),
            ProtocolState::Leader(s) => s.on_message(ctx, msg),
        }
    }

    pub fn manage(&mut self, ctx: &mut Ctx) {
        match self {
            ProtocolState::Clustering(s) => s.manage(ctx),
            ProtocolState::Leader(s) => s.manage(ctx),
        }
    }

    pub fn on_topology(&mut self, ctx: &mut Ctx, links_changed: bool) {
        match self {
            ProtocolState::Clustering(s) => s.recluster_on_change(ctx, links_changed),
            ProtocolState::Leader(s) => s.on_topology(ctx),
        }
    }

    pub fn on_shutdown(&mut self, ctx: &mut Ctx) {
        match self {
            ProtocolState::Clustering(s) => s.on_shutdown(ctx),
            ProtocolState::Leader(s) => s.on_shutdown(ctx),
        }
    }

    /// Whether this protocol goes silent once settled. Cloud nodes keep
    /// exchanging heartbeats forever.
    pub fn silent_when_settled(&self) -> bool {
        matches!(self, ProtocolState::Clustering(_))
    }
}
