//! Mobile-cloud leader selection.
//!
//! Every agent scores its resources. A booting (or orphaned) agent beacons
//! its score to every reachable agent for `beacon_rounds` ticks and then
//! elects the best score it heard, lowest uid on ties. The winner claims
//! leadership and heartbeats every `heartbeat_period` ticks; clients beacon
//! their leader on the same period so it can track membership. A client
//! that misses heartbeats for `heartbeat_timeout` ticks starts over.
//!
//! Two leaders that hear each other exchange claims and the weaker one
//! resigns to CLIENT. A client only ever follows an agent it believes
//! outranks itself; learning otherwise triggers a fresh election.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{Ctx, Note};
use crate::error::{Error, Result};
use crate::model::{AgentId, Role};
use crate::wire::{MessageBody, ProtocolMessage};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResourceProfile {
    pub battery: f64,
    pub cpu_free: f64,
    pub mem_free: f64,
}

impl ResourceProfile {
    pub fn new(battery: f64, cpu_free: f64, mem_free: f64) -> Result<Self> {
        let r = ResourceProfile { battery, cpu_free, mem_free };
        r.validate()?;
        Ok(r)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("battery", self.battery), ("cpu_free", self.cpu_free), ("mem_free", self.mem_free)] {
            if !(v.is_finite() && (0.0..=1.0).contains(&v)) {
                return Err(Error::Param(format!("resource {name} must be in [0,1], got {v}")));
            }
        }
        Ok(())
    }
}

impl Default for ResourceProfile {
    fn default() -> Self {
        ResourceProfile { battery: 1.0, cpu_free: 1.0, mem_free: 1.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoreWeights {
    pub battery: f64,
    pub cpu_free: f64,
    pub mem_free: f64,
}

impl Default for ScoreWeights {
    fn default() -> Self {
        ScoreWeights { battery: 0.5, cpu_free: 0.25, mem_free: 0.25 }
    }
}

impl ScoreWeights {
    pub fn validate(&self) -> Result<()> {
        let w = [self.battery, self.cpu_free, self.mem_free];
        if w.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Param("score weights must be non-negative".into()));
        }
        let sum: f64 = w.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Param(format!("score weights must sum to 1, got {sum}")));
        }
        Ok(())
    }
}

pub fn resource_score(r: &ResourceProfile, w: &ScoreWeights) -> Result<f64> {
    w.validate()?;
    r.validate()?;
    let s = w.battery * r.battery + w.cpu_free * r.cpu_free + w.mem_free * r.mem_free;
    Ok(s.clamp(0.0, 1.0))
}

/// Whether `(a, a_id)` outranks `(b, b_id)`: higher score, then lower uid.
pub fn outranks(a: f64, a_id: AgentId, b: f64, b_id: AgentId) -> bool {
    a > b || (a == b && a_id < b_id)
}

/// Argmax by score, ties to the lowest uid.
pub fn elect(beacons: &BTreeMap<AgentId, f64>) -> Result<AgentId> {
    let mut it = beacons.iter();
    let (mut best, mut best_s) = it.next().map(|(&a, &s)| (a, s)).ok_or_else(|| {
        Error::Param("cannot elect from an empty beacon set".into())
    })?;
    for (&a, &s) in it {
        if outranks(s, a, best_s, best) {
            best = a;
            best_s = s;
        }
    }
    Ok(best)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MemberEntry {
    pub score: f64,
    pub last_seen: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Election {
    pub started_at: u64,
    pub rounds_sent: u32,
    /// Claims heard while the election ran.
    pub claims: BTreeMap<AgentId, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CloudState {
    pub role: Role,
    pub leader_id: Option<AgentId>,
    /// Score of the followed leader, once known.
    pub leader_score: Option<f64>,
    /// Clients tracked by a leader.
    pub members: BTreeMap<AgentId, MemberEntry>,
    pub my_score: f64,
    /// Leader: next heartbeat. Client: tick at which the leader is presumed lost.
    pub heartbeat_deadline: u64,
    /// Client: next liveness beacon to the leader.
    pub next_beacon: u64,
    /// Most recent score heard from each peer.
    pub peers: BTreeMap<AgentId, MemberEntry>,
    pub election: Option<Election>,
}

impl CloudState {
    pub fn new(my_score: f64) -> Self {
        CloudState {
            role: Role::Unassigned,
            leader_id: None,
            leader_score: None,
            members: BTreeMap::new(),
            my_score,
            heartbeat_deadline: 0,
            next_beacon: 0,
            peers: BTreeMap::new(),
            election: None,
        }
    }

    pub fn is_settled(&self) -> bool {
        self.election.is_none()
            && (self.role == Role::Leader || (self.role == Role::Client && self.leader_id.is_some()))
    }

    /// Members of the cloud this agent leads, sorted by uid.
    pub fn membership_report(&self) -> Result<Vec<(AgentId, MemberEntry)>> {
        if self.role != Role::Leader {
            return Err(Error::Role(format!("membership report requires LEADER, agent is {}", self.role)));
        }
        Ok(self.members.iter().map(|(&a, &e)| (a, e)).collect())
    }

    fn set_role(&mut self, ctx: &mut Ctx, role: Role, leader: Option<AgentId>) {
        let (old_role, old_leader) = (self.role, self.leader_id);
        self.role = role;
        self.leader_id = leader;
        if old_role != role || old_leader != leader {
            ctx.note(Note::RoleChange { from: old_role, to: role, affiliation: leader });
        }
    }

    fn start_election(&mut self, ctx: &mut Ctx) {
        self.members.clear();
        self.leader_score = None;
        self.set_role(ctx, Role::Unassigned, None);
        self.election = Some(Election { started_at: ctx.now, rounds_sent: 0, claims: BTreeMap::new() });
    }

    pub fn on_boot(&mut self, ctx: &mut Ctx) {
        self.start_election(ctx);
    }

    fn follow(&mut self, ctx: &mut Ctx, leader: AgentId, score: Option<f64>) {
        if let Some(s) = score {
            if outranks(self.my_score, ctx.me, s, leader) {
                self.start_election(ctx);
                return;
            }
        }
        self.members.clear();
        self.leader_score = score;
        self.set_role(ctx, Role::Client, Some(leader));
        self.heartbeat_deadline = ctx.now + ctx.cfg.heartbeat_timeout;
        ctx.send(leader, MessageBody::ScoreBeacon { score: self.my_score });
        self.next_beacon = ctx.now + ctx.cfg.heartbeat_period;
    }

    fn lead(&mut self, ctx: &mut Ctx, initial: impl IntoIterator<Item = (AgentId, f64)>) {
        let now = ctx.now;
        self.members =
            initial.into_iter().map(|(a, score)| (a, MemberEntry { score, last_seen: now })).collect();
        self.leader_score = Some(self.my_score);
        let me = ctx.me;
        self.set_role(ctx, Role::Leader, Some(me));
        ctx.to_reachable(MessageBody::LeaderClaim { score: self.my_score });
        self.heartbeat(ctx);
    }

    fn heartbeat(&mut self, ctx: &mut Ctx) {
        let count = self.members.len() as u32;
        ctx.to_reachable(MessageBody::LeaderHeartbeat { member_count: count });
        self.heartbeat_deadline = ctx.now + ctx.cfg.heartbeat_period;
    }

    fn conclude_election(&mut self, ctx: &mut Ctx) {
        let e = self.election.take().expect("election in progress");
        let since = e.started_at.saturating_sub(u64::from(ctx.cfg.beacon_rounds));
        let mut candidates: BTreeMap<AgentId, f64> = self
            .peers
            .iter()
            .filter(|(_, p)| p.last_seen >= since)
            .map(|(&a, p)| (a, p.score))
            .collect();
        candidates.extend(e.claims.iter().map(|(&a, &s)| (a, s)));
        candidates.insert(ctx.me, self.my_score);
        let winner = elect(&candidates).expect("candidates include self");
        if winner == ctx.me {
            let initial: Vec<_> = candidates.into_iter().filter(|&(a, _)| a != ctx.me).collect();
            self.lead(ctx, initial);
        } else {
            let s = candidates[&winner];
            self.follow(ctx, winner, Some(s));
        }
    }

    pub fn on_message(&mut self, ctx: &mut Ctx, msg: ProtocolMessage) {
        let src = msg.src;
        match msg.body {
            MessageBody::ScoreBeacon { score } => {
                self.peers.insert(src, MemberEntry { score, last_seen: ctx.now });
                if self.role == Role::Leader {
                    self.members.insert(src, MemberEntry { score, last_seen: ctx.now });
                    ctx.send(src, MessageBody::LeaderClaim { score: self.my_score });
                }
            }
            MessageBody::LeaderClaim { score } => {
                self.peers.insert(src, MemberEntry { score, last_seen: ctx.now });
                self.handle_claim(ctx, src, score);
            }
            MessageBody::LeaderHeartbeat { .. } => self.handle_heartbeat(ctx, src),
            MessageBody::Resign => {
                self.peers.remove(&src);
                self.members.remove(&src);
                if let Some(e) = &mut self.election {
                    e.claims.remove(&src);
                } else if self.role == Role::Client && self.leader_id == Some(src) {
                    self.start_election(ctx);
                }
            }
            other => ctx.violation(Some(src), format!("{} is not a cloud message", other.variant())),
        }
    }

    fn handle_claim(&mut self, ctx: &mut Ctx, src: AgentId, score: f64) {
        if let Some(e) = &mut self.election {
            e.claims.insert(src, score);
            return;
        }
        match self.role {
            Role::Leader => {
                if outranks(score, src, self.my_score, ctx.me) {
                    ctx.note(Note::Conflict {
                        winner: src,
                        winner_score: score,
                        loser: ctx.me,
                        loser_score: self.my_score,
                    });
                    ctx.to_reachable(MessageBody::Resign);
                    self.follow(ctx, src, Some(score));
                } else {
                    ctx.send(src, MessageBody::LeaderClaim { score: self.my_score });
                }
            }
            Role::Client if self.leader_id == Some(src) => {
                self.leader_score = Some(score);
                self.heartbeat_deadline = ctx.now + ctx.cfg.heartbeat_timeout;
                if outranks(self.my_score, ctx.me, score, src) {
                    self.start_election(ctx);
                }
            }
            _ => {
                let better = match (self.leader_id, self.leader_score) {
                    (Some(l), Some(ls)) => outranks(score, src, ls, l),
                    _ => true,
                };
                if better {
                    self.follow(ctx, src, Some(score));
                }
            }
        }
    }

    fn handle_heartbeat(&mut self, ctx: &mut Ctx, src: AgentId) {
        if self.election.is_some() {
            return;
        }
        match self.role {
            Role::Leader => ctx.send(src, MessageBody::LeaderClaim { score: self.my_score }),
            Role::Client if self.leader_id == Some(src) => {
                self.heartbeat_deadline = ctx.now + ctx.cfg.heartbeat_timeout;
            }
            _ if self.leader_id.is_none() => {
                let score = self.peers.get(&src).map(|p| p.score);
                self.follow(ctx, src, score);
            }
            _ => {}
        }
    }

    /// Per-tick timers: beacon rounds, heartbeats, member pruning and
    /// leader-loss detection.
    pub fn manage(&mut self, ctx: &mut Ctx) {
        if let Some(e) = &mut self.election {
            if e.rounds_sent < ctx.cfg.beacon_rounds {
                e.rounds_sent += 1;
                ctx.to_reachable(MessageBody::ScoreBeacon { score: self.my_score });
            } else {
                self.conclude_election(ctx);
            }
            return;
        }
        match self.role {
            Role::Leader => {
                let horizon = ctx.now.saturating_sub(ctx.cfg.heartbeat_timeout);
                self.members.retain(|_, m| m.last_seen >= horizon);
                if ctx.now >= self.heartbeat_deadline {
                    self.heartbeat(ctx);
                }
            }
            Role::Client => {
                if ctx.now >= self.heartbeat_deadline {
                    self.on_leader_timeout(ctx);
                } else if ctx.now >= self.next_beacon {
                    if let Some(l) = self.leader_id {
                        ctx.send(l, MessageBody::ScoreBeacon { score: self.my_score });
                    }
                    self.next_beacon = ctx.now + ctx.cfg.heartbeat_period;
                }
            }
            _ => {}
        }
    }

    pub fn on_leader_timeout(&mut self, ctx: &mut Ctx) {
        if let Some(l) = self.leader_id {
            self.peers.remove(&l);
        }
        self.start_election(ctx);
    }

    /// A client whose leader SMB reports unreachable gives up at once;
    /// a leader drops members it can no longer reach.
    pub fn on_topology(&mut self, ctx: &mut Ctx) {
        let me = ctx.me;
        let reachable = |a: AgentId| ctx.routes.authorize(me, a).unwrap_or(false);
        match self.role {
            Role::Client if self.election.is_none() => {
                if let Some(l) = self.leader_id {
                    if !reachable(l) {
                        self.on_leader_timeout(ctx);
                    }
                }
            }
            Role::Leader => self.members.retain(|&a, _| reachable(a)),
            _ => {}
        }
    }

    pub fn on_shutdown(&mut self, ctx: &mut Ctx) {
        if self.role == Role::Leader {
            ctx.to_reachable(MessageBody::Resign);
        }
    }
}
