//! Post-run results: metrics from final states, and replay of an event log
//! back into final states.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::agent::NodeState;
use crate::events::{Actor, EventDetail, EventKind, SimEvent};
use crate::model::{build_adjacency, AgentId, Position, Role, VersionClock};

/// The parts of a node's final state that metrics depend on.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NodeSummary {
    pub id: AgentId,
    pub pos: Position,
    pub role: Role,
    pub affiliation: Option<AgentId>,
}

impl From<&NodeState> for NodeSummary {
    fn from(s: &NodeState) -> Self {
        NodeSummary { id: s.id, pos: s.pos, role: s.role, affiliation: s.affiliation() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentLeaders {
    pub nodes: Vec<AgentId>,
    pub leaders: Vec<AgentId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub node_count: usize,
    /// Number of cluster heads.
    pub cluster_count: usize,
    /// Cluster size (head plus its members) -> number of clusters that size.
    pub cluster_sizes: BTreeMap<usize, usize>,
    pub member_count: usize,
    pub gateway_count: usize,
    pub leader_count: usize,
    pub client_count: usize,
    pub unassigned_count: usize,
    /// Tick of the last role change, if any happened.
    pub convergence_tick: Option<u64>,
    /// `None` when the log alone cannot tell (replayed runs).
    pub converged: Option<bool>,
    pub messages_total: u64,
    pub messages_delivered: u64,
    pub messages_dropped: u64,
    pub violations: u64,
    pub conflicts: u64,
    pub components: Vec<ComponentLeaders>,
}

/// Radio range in force at the end of the log.
fn last_radio_range(log: &[SimEvent]) -> Option<f64> {
    log.iter().rev().find_map(|e| match e.detail {
        EventDetail::TopologyChange { radio_range, .. } => Some(radio_range),
        _ => None,
    })
}

pub fn compute_metrics(log: &[SimEvent], nodes: &[NodeSummary], converged: Option<bool>) -> RunMetrics {
    let count = |r: Role| nodes.iter().filter(|n| n.role == r).count();
    let mut per_head: BTreeMap<AgentId, usize> =
        nodes.iter().filter(|n| n.role == Role::Head).map(|n| (n.id, 1)).collect();
    for n in nodes.iter().filter(|n| n.role == Role::Member) {
        if let Some(c) = n.affiliation.and_then(|h| per_head.get_mut(&h)) {
            *c += 1;
        }
    }
    let mut cluster_sizes = BTreeMap::new();
    for &size in per_head.values() {
        *cluster_sizes.entry(size).or_insert(0) += 1;
    }

    let kinds = |k: EventKind| log.iter().filter(|e| e.kind() == k).count() as u64;
    let convergence_tick =
        log.iter().filter(|e| e.kind() == EventKind::RoleChange).map(|e| e.time).max();

    let positions: BTreeMap<AgentId, Position> = nodes.iter().map(|n| (n.id, n.pos)).collect();
    let components = match last_radio_range(log) {
        Some(r) if !positions.is_empty() => build_adjacency(&mut VersionClock::new(), &positions, r)
            .map(|t| t.components())
            .unwrap_or_default(),
        _ => positions.keys().map(|&id| vec![id]).collect(),
    };
    let roles: BTreeMap<AgentId, Role> = nodes.iter().map(|n| (n.id, n.role)).collect();
    let components = components
        .into_iter()
        .map(|c| ComponentLeaders {
            leaders: c.iter().copied().filter(|id| roles[id] == Role::Leader).collect(),
            nodes: c,
        })
        .collect();

    RunMetrics {
        node_count: nodes.len(),
        cluster_count: per_head.len(),
        cluster_sizes,
        member_count: count(Role::Member),
        gateway_count: count(Role::Gateway),
        leader_count: count(Role::Leader),
        client_count: count(Role::Client),
        unassigned_count: count(Role::Unassigned),
        convergence_tick,
        converged,
        messages_total: kinds(EventKind::MsgSent),
        messages_delivered: kinds(EventKind::MsgDelivered),
        messages_dropped: kinds(EventKind::MsgDropped),
        violations: kinds(EventKind::ProtocolViolation),
        conflicts: kinds(EventKind::ElectionConflict),
        components,
    }
}

/// Rebuilds the final node set from a log: spawns and despawns give
/// membership, topology changes carry moves, role changes give roles.
pub fn replay(log: &[SimEvent]) -> Vec<NodeSummary> {
    let mut nodes: BTreeMap<AgentId, NodeSummary> = BTreeMap::new();
    for e in log {
        match (&e.detail, e.actor) {
            (EventDetail::Spawn { position, .. }, Actor::Agent(id)) => {
                nodes.insert(id, NodeSummary { id, pos: *position, role: Role::Unassigned, affiliation: None });
            }
            (EventDetail::Despawn { .. }, Actor::Agent(id)) => {
                nodes.remove(&id);
            }
            (EventDetail::TopologyChange { moved, .. }, _) => {
                for m in moved {
                    if let Some(n) = nodes.get_mut(&m.uid) {
                        n.pos = Position::new(m.x, m.y);
                    }
                }
            }
            (EventDetail::RoleChange { to, affiliation, .. }, Actor::Agent(id)) => {
                if let Some(n) = nodes.get_mut(&id) {
                    n.role = *to;
                    n.affiliation = *affiliation;
                }
            }
            _ => {}
        }
    }
    nodes.into_values().collect()
}

pub fn replay_metrics(log: &[SimEvent]) -> RunMetrics {
    compute_metrics(log, &replay(log), None)
}
