//! The simulated world: agents, SMB, transport and the event log, plus the
//! deterministic round-robin scheduler.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::agent::{Agent, AgentSpec, NodeState, TurnEnv, TurnReport, MAX_DRAIN};
use crate::error::{Error, Result};
use crate::events::{Actor, EventDetail, EventLog};
use crate::model::{AgentId, Position, SimParams, TopologySnapshot};
use crate::protocol::{ProtocolConfig, ProtocolKind};
use crate::smb::{Publication, Smb};
use crate::transport::{Backend, Transport, TransportConfig};

/// How long a UDP-backed deterministic run waits for in-flight datagrams
/// after each agent turn.
pub const UDP_SETTLE: Duration = Duration::from_secs(2);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum SchedulerMode {
    /// One thread per agent, ticking every `tick_ms` of wall-clock time.
    Realtime,
    /// Single thread, agents processed in ascending uid each tick.
    Deterministic,
}

/// A whitelisted parameter edit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "key", content = "value", rename_all = "snake_case")]
pub enum ParamChange {
    K(u32),
    RadioRange(f64),
    TickMs(u64),
}

/// A world mutation, applied either immediately or at a scheduled tick.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case")]
pub enum Action {
    Spawn(AgentSpec),
    Despawn { uid: AgentId },
    Move { uid: AgentId, position: Position },
    SetParam(ParamChange),
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorldConfig {
    pub params: SimParams,
    pub protocol: ProtocolKind,
    pub protocol_cfg: ProtocolConfig,
    pub transport: TransportConfig,
    pub mode: SchedulerMode,
    pub max_drain: usize,
}

impl WorldConfig {
    pub fn new(params: SimParams, protocol: ProtocolKind) -> Self {
        WorldConfig {
            params,
            protocol,
            protocol_cfg: ProtocolConfig::default(),
            transport: TransportConfig::default(),
            mode: SchedulerMode::Deterministic,
            max_drain: MAX_DRAIN,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TickReport {
    pub tick: u64,
    pub agents: usize,
    pub sent: u64,
    pub delivered: u64,
    pub dropped: u64,
    pub role_changes: u64,
    pub events: u64,
    pub topology_version: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunOutcome {
    pub converged: bool,
    /// Ticks executed by this call.
    pub ticks: u64,
    /// World clock when the run stopped.
    pub final_tick: u64,
}

pub struct World {
    pub(crate) cfg: WorldConfig,
    pub(crate) transport: Transport,
    pub(crate) log: EventLog,
    pub(crate) smb: Smb,
    pub(crate) agents: BTreeMap<AgentId, Agent>,
    pub(crate) retired: BTreeSet<AgentId>,
    pub(crate) schedule: BTreeMap<u64, Vec<Action>>,
    now: u64,
    quiet_ticks: u64,
    totals: TurnReport,
}

impl World {
    pub fn new(cfg: WorldConfig) -> Result<Self> {
        Self::with_log(cfg, EventLog::new())
    }

    pub fn with_log(cfg: WorldConfig, log: EventLog) -> Result<Self> {
        cfg.params.validate()?;
        cfg.protocol_cfg.validate()?;
        if cfg.max_drain == 0 {
            return Err(Error::Param("max_drain must be positive".into()));
        }
        let transport = Transport::new(cfg.transport, cfg.params.seed)?;
        let smb = Smb::new(cfg.params.radio_range)?;
        Ok(World {
            cfg,
            transport,
            log,
            smb,
            agents: BTreeMap::new(),
            retired: BTreeSet::new(),
            schedule: BTreeMap::new(),
            now: 0,
            quiet_ticks: 0,
            totals: TurnReport::default(),
        })
    }

    pub fn config(&self) -> &WorldConfig {
        &self.cfg
    }

    pub fn params(&self) -> &SimParams {
        &self.cfg.params
    }

    pub fn protocol(&self) -> ProtocolKind {
        self.cfg.protocol
    }

    pub fn now(&self) -> u64 {
        self.now
    }

    pub fn log(&self) -> &EventLog {
        &self.log
    }

    pub fn totals(&self) -> TurnReport {
        self.totals
    }

    pub fn publication(&self) -> &Publication {
        self.smb.current()
    }

    pub fn topology(&self) -> Arc<TopologySnapshot> {
        self.smb.routes().snapshot().clone()
    }

    pub fn len(&self) -> usize {
        self.agents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.agents.is_empty()
    }

    pub fn contains(&self, id: AgentId) -> bool {
        self.agents.contains_key(&id)
    }

    pub fn ids(&self) -> Vec<AgentId> {
        self.agents.keys().copied().collect()
    }

    pub fn state(&self, id: AgentId) -> Result<&NodeState> {
        self.agents.get(&id).map(|a| &a.state).ok_or(Error::Lookup(id))
    }

    pub fn states(&self) -> Vec<NodeState> {
        self.agents.values().map(|a| a.state.clone()).collect()
    }

    pub fn port_of(&self, id: AgentId) -> Result<u16> {
        Ok(self.agents.get(&id).ok_or(Error::Lookup(id))?.endpoint.address().port)
    }

    /// True once nothing is scheduled, every agent has settled into a role,
    /// and the last `window` ticks passed without protocol activity.
    pub fn is_quiescent(&self, window: u64) -> bool {
        self.schedule.is_empty()
            && self.agents.values().all(Agent::is_settled)
            && self.quiet_ticks >= window
    }

    pub fn schedule(&mut self, at_tick: u64, action: Action) {
        self.schedule.entry(at_tick).or_default().push(action);
    }

    fn spawn_inner(&mut self, spec: AgentSpec) -> Result<AgentId> {
        self.quiet_ticks = 0;
        let id = spec.uid;
        if self.agents.contains_key(&id) || self.retired.contains(&id) {
            return Err(Error::Identity(id));
        }
        if !spec.position.is_finite() || !self.cfg.params.world.contains(spec.position) {
            return Err(Error::Param(format!(
                "position ({}, {}) of agent {id} is outside the world",
                spec.position.x, spec.position.y
            )));
        }
        let state = NodeState::new(&spec, self.cfg.protocol, &self.cfg.protocol_cfg)?;
        let endpoint = self.transport.bind(id)?;
        let port = endpoint.address().port;
        self.log.emit(
            self.now,
            Actor::Agent(id),
            EventDetail::Spawn { agent_kind: spec.kind.clone(), position: spec.position, port },
        );
        self.smb.register(id, spec.position);
        self.agents.insert(id, Agent::new(state, spec.kind, endpoint, self.cfg.params.seed));
        Ok(id)
    }

    fn despawn_inner(&mut self, id: AgentId, reason: &str) -> Result<()> {
        self.quiet_ticks = 0;
        let Some(mut agent) = self.agents.remove(&id) else {
            return Err(Error::Lifecycle(format!("agent {id} is not alive")));
        };
        let publication = self.smb.current().clone();
        let env = self.env(&publication);
        let r = agent.shutdown(&env);
        self.totals.add(&r);
        self.settle();
        self.log.emit(self.now, Actor::Agent(id), EventDetail::Despawn { reason: reason.into() });
        self.smb.unregister(id);
        self.retired.insert(id);
        Ok(())
    }

    fn move_inner(&mut self, id: AgentId, pos: Position) -> Result<()> {
        if !pos.is_finite() || !self.cfg.params.world.contains(pos) {
            return Err(Error::Param(format!("position ({}, {}) is outside the world", pos.x, pos.y)));
        }
        let agent = self.agents.get_mut(&id).ok_or(Error::Lookup(id))?;
        agent.state.pos = pos;
        agent.state.waypoint = None;
        self.smb.update_position(id, pos);
        Ok(())
    }

    fn set_param_inner(&mut self, change: ParamChange) -> Result<()> {
        match change {
            ParamChange::K(k) => {
                if k == 0 {
                    return Err(Error::Param("k must be at least 1".into()));
                }
                self.cfg.params.k = k;
                self.smb.invalidate();
            }
            ParamChange::RadioRange(r) => self.smb.set_radio_range(r).map(|_| self.cfg.params.radio_range = r)?,
            ParamChange::TickMs(t) => {
                if t == 0 {
                    return Err(Error::Param("tick_ms must be positive".into()));
                }
                self.cfg.params.tick_ms = t;
            }
        }
        Ok(())
    }

    fn apply_inner(&mut self, action: Action) -> Result<()> {
        self.quiet_ticks = 0;
        match action {
            Action::Spawn(spec) => self.spawn_inner(spec).map(|_| ()),
            Action::Despawn { uid } => self.despawn_inner(uid, "removed"),
            Action::Move { uid, position } => self.move_inner(uid, position),
            Action::SetParam(c) => self.set_param_inner(c),
        }
    }

    fn refresh(&mut self) {
        self.smb.refresh(&self.log, self.now);
    }

    /// Applies one mutation now and republishes the topology.
    pub fn apply(&mut self, action: Action) -> Result<()> {
        let r = self.apply_inner(action);
        self.refresh();
        r
    }

    pub fn spawn_agent(&mut self, spec: AgentSpec) -> Result<AgentId> {
        let r = self.spawn_inner(spec);
        self.refresh();
        r
    }

    pub fn despawn_agent(&mut self, id: AgentId) -> Result<()> {
        let r = self.despawn_inner(id, "removed");
        self.refresh();
        r
    }

    pub fn move_agent(&mut self, id: AgentId, pos: Position) -> Result<()> {
        self.apply(Action::Move { uid: id, position: pos })
    }

    pub fn set_param(&mut self, change: ParamChange) -> Result<()> {
        self.apply(Action::SetParam(change))
    }

    fn env<'a>(&'a self, publication: &'a Publication) -> TurnEnv<'a> {
        TurnEnv {
            now: self.now,
            k: self.cfg.params.k,
            cfg: &self.cfg.protocol_cfg,
            publication,
            log: &self.log,
            max_drain: self.cfg.max_drain,
        }
    }

    fn settle(&self) {
        if self.cfg.transport.backend == Backend::Udp {
            // A timeout means datagrams were lost on loopback; the run
            // carries on, matching an unreliable link.
            let _ = self.transport.settle(UDP_SETTLE);
        }
    }

    /// One scheduler step: scheduled actions, then every agent in ascending
    /// uid (move, notice topology, boot, drain, manage), then a topology
    /// refresh for whatever moved.
    pub fn tick(&mut self) -> Result<TickReport> {
        if self.cfg.mode == SchedulerMode::Realtime {
            return Err(Error::Mode("tick() requires deterministic mode".into()));
        }
        let first_seq = self.log.next_seq();
        self.transport.clock().set(self.now);
        let mut scripted = false;
        if let Some(actions) = self.schedule.remove(&self.now) {
            scripted = true;
            for a in actions {
                if let Err(e) = self.apply_inner(a) {
                    self.refresh();
                    return Err(Error::Scenario(format!("scheduled action at tick {}: {e}", self.now)));
                }
            }
        }
        self.refresh();

        let publication = self.smb.current().clone();
        let world = self.cfg.params.world;
        let mut report = TurnReport::default();
        let mut moved = Vec::new();
        let env = TurnEnv {
            now: self.now,
            k: self.cfg.params.k,
            cfg: &self.cfg.protocol_cfg,
            publication: &publication,
            log: &self.log,
            max_drain: self.cfg.max_drain,
        };
        let udp = self.cfg.transport.backend == Backend::Udp;
        for (&id, agent) in self.agents.iter_mut() {
            if agent.move_once(&world) {
                moved.push((id, agent.state.pos));
            }
            report.add(&agent.turn(&env));
            if udp {
                let _ = self.transport.settle(UDP_SETTLE);
            }
        }
        for (id, pos) in moved {
            self.smb.update_position(id, pos);
        }
        self.refresh();
        self.totals.add(&report);

        let pending = self.agents.values().any(|a| a.endpoint.pending() > 0);
        let chatty = self.agents.values().any(|a| a.state.protocol_state.silent_when_settled());
        let active = scripted
            || report.role_changes > 0
            || (chatty && (report.sent > 0 || pending));
        self.quiet_ticks = if active { 0 } else { self.quiet_ticks + 1 };

        let out = TickReport {
            tick: self.now,
            agents: self.agents.len(),
            sent: report.sent,
            delivered: report.delivered,
            dropped: report.dropped,
            role_changes: report.role_changes,
            events: self.log.next_seq() - first_seq,
            topology_version: self.smb.version(),
        };
        self.now += 1;
        Ok(out)
    }

    /// Ticks until quiescent or until the clock reaches `max_ticks`.
    pub fn run(&mut self, max_ticks: u64, window: u64) -> Result<RunOutcome> {
        let start = self.now;
        loop {
            if self.is_quiescent(window) {
                return Ok(RunOutcome { converged: true, ticks: self.now - start, final_tick: self.now });
            }
            if self.now >= max_ticks {
                return Ok(RunOutcome { converged: false, ticks: self.now - start, final_tick: self.now });
            }
            self.tick()?;
        }
    }
}
