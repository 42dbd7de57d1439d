//! One simulated device: its state, mobility and the turn routine that
//! runs its messaging, processing and management steps.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::events::{Actor, DropReason, EventDetail, EventLog};
use crate::model::{euclidean_distance, AgentId, Position, Role, WorldBounds};
use crate::protocol::{
    resource_score, Ctx, Note, ProtocolConfig, ProtocolKind, ProtocolState, ResourceProfile,
};
use crate::smb::Publication;
use crate::transport::Endpoint;
use crate::wire::{decode_message, encode_message, MessageBody};

/// Most datagrams an agent handles in one turn.
pub const MAX_DRAIN: usize = 64;

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "pattern", rename_all = "snake_case", deny_unknown_fields)]
pub enum Mobility {
    #[default]
    Static,
    RandomWaypoint { speed: f64 },
}

impl Mobility {
    pub fn validate(&self) -> Result<()> {
        match *self {
            Mobility::Static => Ok(()),
            Mobility::RandomWaypoint { speed } if speed.is_finite() && speed > 0.0 => Ok(()),
            Mobility::RandomWaypoint { speed } => {
                Err(Error::Param(format!("waypoint speed must be positive, got {speed}")))
            }
        }
    }
}

/// What a caller supplies to spawn an agent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentSpec {
    pub uid: AgentId,
    pub kind: String,
    pub position: Position,
    #[serde(default)]
    pub mobility: Mobility,
    #[serde(default)]
    pub resources: ResourceProfile,
}

impl AgentSpec {
    pub fn new(uid: impl Into<AgentId>, position: Position) -> Self {
        AgentSpec {
            uid: uid.into(),
            kind: "SampleAgent".into(),
            position,
            mobility: Mobility::Static,
            resources: ResourceProfile::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeState {
    pub id: AgentId,
    pub pos: Position,
    pub vel: (f64, f64),
    pub role: Role,
    pub resources: ResourceProfile,
    pub score: f64,
    pub mobility: Mobility,
    pub waypoint: Option<Position>,
    pub protocol_state: ProtocolState,
    pub alive: bool,
}

impl NodeState {
    pub fn new(spec: &AgentSpec, protocol: ProtocolKind, cfg: &ProtocolConfig) -> Result<Self> {
        spec.mobility.validate()?;
        let score = resource_score(&spec.resources, &cfg.weights)?;
        Ok(NodeState {
            id: spec.uid,
            pos: spec.position,
            vel: (0.0, 0.0),
            role: Role::Unassigned,
            resources: spec.resources,
            score,
            mobility: spec.mobility,
            waypoint: None,
            protocol_state: ProtocolState::new(protocol, score),
            alive: true,
        })
    }

    pub fn affiliation(&self) -> Option<AgentId> {
        self.protocol_state.affiliation()
    }
}

/// Mirrors a coordinate back into `[0, max]`.
fn reflect(v: f64, max: f64) -> f64 {
    let period = 2.0 * max;
    let m = v.rem_euclid(period);
    if m > max {
        period - m
    } else {
        m
    }
}

/// Advances one tick of movement. Static nodes never move; waypoint nodes
/// head for their waypoint at `speed` and draw a new uniform waypoint once
/// they are within one step of it.
pub fn mobility_step(s: &NodeState, world: &WorldBounds, rng: &mut impl Rng) -> NodeState {
    let mut next = s.clone();
    let Mobility::RandomWaypoint { speed } = s.mobility else {
        next.vel = (0.0, 0.0);
        return next;
    };
    let pick = |rng: &mut dyn rand::RngCore| {
        Position::new(rng.gen_range(0.0..=world.width), rng.gen_range(0.0..=world.height))
    };
    let target = s.waypoint.unwrap_or_else(|| pick(rng));
    let d = euclidean_distance(s.pos, target);
    if d <= speed {
        next.vel = (target.x - s.pos.x, target.y - s.pos.y);
        next.pos = target;
        next.waypoint = Some(pick(rng));
    } else {
        let (vx, vy) = ((target.x - s.pos.x) / d * speed, (target.y - s.pos.y) / d * speed);
        next.vel = (vx, vy);
        next.pos = Position::new(s.pos.x + vx, s.pos.y + vy);
        next.waypoint = Some(target);
    }
    next.pos = Position::new(reflect(next.pos.x, world.width), reflect(next.pos.y, world.height));
    next
}

/// Per-agent RNG stream derived from the run seed.
pub fn agent_rng(seed: u64, uid: AgentId) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(u64::from(uid.0));
    rng
}

/// Counters for one or more agent turns.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TurnReport {
    pub sent: u64,
    pub delivered: u64,
    pub dropped: u64,
    pub role_changes: u64,
    pub violations: u64,
    pub conflicts: u64,
}

impl TurnReport {
    pub fn add(&mut self, o: &TurnReport) {
        self.sent += o.sent;
        self.delivered += o.delivered;
        self.dropped += o.dropped;
        self.role_changes += o.role_changes;
        self.violations += o.violations;
        self.conflicts += o.conflicts;
    }
}

/// A live agent: state plus its endpoint and private RNG.
pub struct Agent {
    pub state: NodeState,
    pub kind: String,
    pub endpoint: Endpoint,
    pub rng: ChaCha8Rng,
    pub booted: bool,
    seen_version: Option<u64>,
    seen_links_epoch: u64,
}

/// Shared inputs for one turn.
pub struct TurnEnv<'a> {
    pub now: u64,
    pub k: u32,
    pub cfg: &'a ProtocolConfig,
    pub publication: &'a Publication,
    pub log: &'a EventLog,
    pub max_drain: usize,
}

impl Agent {
    pub fn new(state: NodeState, kind: String, endpoint: Endpoint, seed: u64) -> Self {
        let rng = agent_rng(seed, state.id);
        Agent { state, kind, endpoint, rng, booted: false, seen_version: None, seen_links_epoch: 0 }
    }

    pub fn id(&self) -> AgentId {
        self.state.id
    }

    pub fn is_settled(&self) -> bool {
        self.booted && self.state.protocol_state.is_settled()
    }

    pub fn move_once(&mut self, world: &WorldBounds) -> bool {
        if self.state.mobility == Mobility::Static {
            return false;
        }
        let next = mobility_step(&self.state, world, &mut self.rng);
        let moved = next.pos != self.state.pos;
        self.state = next;
        moved
    }

    /// Runs one handler against a fresh context and flushes its outbox and notes.
    fn handle(
        &mut self,
        env: &TurnEnv,
        report: &mut TurnReport,
        f: impl FnOnce(&mut ProtocolState, &mut Ctx),
    ) {
        let routes = &env.publication.routes;
        let mut ctx = Ctx::new(self.state.id, env.now, env.k, env.cfg, routes);
        f(&mut self.state.protocol_state, &mut ctx);
        let Ctx { out, notes, .. } = ctx;
        self.state.role = self.state.protocol_state.role();
        let me = self.state.id;
        let actor = Actor::Agent(me);
        for n in notes {
            let detail = match n {
                Note::RoleChange { from, to, affiliation } => {
                    report.role_changes += 1;
                    EventDetail::RoleChange { from, to, affiliation }
                }
                Note::Conflict { winner, winner_score, loser, loser_score } => {
                    report.conflicts += 1;
                    EventDetail::ElectionConflict { winner, winner_score, loser, loser_score }
                }
                Note::Violation { src, reason } => {
                    report.violations += 1;
                    EventDetail::ProtocolViolation { src, reason }
                }
            };
            env.log.emit(env.now, actor, detail);
        }
        for o in out {
            let variant = o.message.body.variant().to_string();
            let hops = match o.message.body {
                MessageBody::HeadAdvert { hops, .. } => Some(hops),
                _ => None,
            };
            if !routes.authorize(me, o.dst).unwrap_or(false) {
                report.dropped += 1;
                env.log.emit(
                    env.now,
                    actor,
                    EventDetail::MsgDropped { dst: o.dst, variant, reason: DropReason::Unauthorized },
                );
                continue;
            }
            match self.endpoint.send(o.dst, &encode_message(&o.message)) {
                Ok(()) => {
                    report.sent += 1;
                    env.log.emit(
                        env.now,
                        actor,
                        EventDetail::MsgSent {
                            dst: o.dst,
                            variant,
                            route_version: routes.snapshot_version,
                            hops,
                        },
                    );
                }
                Err(_) => {
                    report.dropped += 1;
                    env.log.emit(
                        env.now,
                        actor,
                        EventDetail::MsgDropped { dst: o.dst, variant, reason: DropReason::Transport },
                    );
                }
            }
        }
    }

    /// Topology notice, first-turn boot, bounded mailbox drain, then
    /// management. Mobility is applied separately by the scheduler.
    pub fn turn(&mut self, env: &TurnEnv) -> TurnReport {
        let mut report = TurnReport::default();
        let version = env.publication.routes.snapshot_version;
        if self.booted && self.seen_version != Some(version) {
            let changed = env.publication.links_epoch != self.seen_links_epoch;
            self.handle(env, &mut report, |p, ctx| p.on_topology(ctx, changed));
        }
        self.seen_version = Some(version);
        self.seen_links_epoch = env.publication.links_epoch;
        if !self.booted {
            self.booted = true;
            self.handle(env, &mut report, |p, ctx| p.on_boot(ctx));
        }
        for dg in self.endpoint.poll_receive_up_to(env.max_drain).unwrap_or_default() {
            match decode_message(&dg.payload) {
                Ok(msg) => {
                    report.delivered += 1;
                    env.log.emit(
                        env.now,
                        Actor::Agent(self.state.id),
                        EventDetail::MsgDelivered { src: msg.src, variant: msg.body.variant().into() },
                    );
                    self.handle(env, &mut report, |p, ctx| p.on_message(ctx, msg));
                }
                Err(e) => {
                    report.violations += 1;
                    env.log.emit(
                        env.now,
                        Actor::Agent(self.state.id),
                        EventDetail::ProtocolViolation { src: Some(dg.src), reason: e.to_string() },
                    );
                }
            }
        }
        self.handle(env, &mut report, |p, ctx| p.manage(ctx));
        report
    }

    pub fn shutdown(&mut self, env: &TurnEnv) -> TurnReport {
        let mut report = TurnReport::default();
        if self.booted {
            self.handle(env, &mut report, |p, ctx| p.on_shutdown(ctx));
        }
        self.state.alive = false;
        self.endpoint.close();
        report
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn node(m: Mobility, pos: Position) -> NodeState {
        let mut spec = AgentSpec::new(0, pos);
        spec.mobility = m;
        NodeState::new(&spec, ProtocolKind::Clustering, &ProtocolConfig::default()).unwrap()
    }

    #[test]
    fn static_never_moves() {
        let w = WorldBounds::new(100.0, 100.0).unwrap();
        let mut s = node(Mobility::Static, Position::new(3.0, 4.0));
        let mut rng = agent_rng(1, AgentId(0));
        for _ in 0..500 {
            s = mobility_step(&s, &w, &mut rng);
        }
        assert_eq!(s.pos, Position::new(3.0, 4.0));
    }

    #[test]
    fn reaches_waypoint_straight_ahead() {
        let w = WorldBounds::new(100.0, 100.0).unwrap();
        let mut s = node(Mobility::RandomWaypoint { speed: 1.0 }, Position::new(10.0, 10.0));
        let target = Position::new(15.0, 10.0);
        s.waypoint = Some(target);
        let mut rng = agent_rng(1, AgentId(0));
        for _ in 0..4 {
            s = mobility_step(&s, &w, &mut rng);
            assert_eq!(s.waypoint, Some(target));
        }
        assert!(euclidean_distance(s.pos, target) <= 1.0 + 1e-12);
        s = mobility_step(&s, &w, &mut rng);
        assert_eq!(s.pos, target);
        assert_ne!(s.waypoint, Some(target));
    }

    #[test]
    fn stays_inside_world_for_1000_ticks() {
        let w = WorldBounds::new(60.0, 40.0).unwrap();
        let mut rng = agent_rng(17, AgentId(0));
        let mut nodes: Vec<_> = (0..20)
            .map(|i| node(Mobility::RandomWaypoint { speed: 0.5 + i as f64 }, Position::new(30.0, 20.0)))
            .collect();
        for _ in 0..1000 {
            for n in &mut nodes {
                *n = mobility_step(n, &w, &mut rng);
                assert!(w.contains(n.pos), "{:?}", n.pos);
            }
        }
    }

    #[test]
    fn reflect_mirrors() {
        assert_eq!(reflect(-2.0, 10.0), 2.0);
        assert_eq!(reflect(12.0, 10.0), 8.0);
        assert_eq!(reflect(10.0, 10.0), 10.0);
        assert_eq!(reflect(5.0, 10.0), 5.0);
    }

    #[test]
    fn bad_speed_rejected() {
        assert!(Mobility::RandomWaypoint { speed: 0.0 }.validate().is_err());
    }
}
