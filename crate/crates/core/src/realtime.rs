//! Thread-per-agent scheduler. Every agent runs its own timer loop, the SMB
//! rebuilds routes in a thread of its own, and a controller boots agents,
//! applies scripted actions and watches for quiescence. Agents share no
//! mutable state: they read the SMB's latest publication and talk to each
//! other through the transport.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::sync::atomic::{AtomicU32, Ordering};
use std::sync::{Arc, RwLock};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use crossbeam_channel::{Receiver, RecvTimeoutError, Sender};

use crate::agent::{Agent, NodeState, TurnEnv, TurnReport};
use crate::error::{Error, Result};
use crate::events::{Actor, EventDetail, EventLog};
use crate::model::{AgentId, Position, WorldBounds};
use crate::protocol::{ProtocolConfig, ProtocolState};
use crate::scenario::{BootMode, Scenario};
use crate::smb::{Publication, Smb, SyncBarrier};
use crate::transport::Transport;
use crate::world::{Action, ParamChange, WorldConfig};

/// How long the controller waits for an agent thread to acknowledge a stop.
const EXIT_TIMEOUT: Duration = Duration::from_secs(10);

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RealtimeOptions {
    /// Wall-clock length of one tick.
    pub tick: Duration,
    /// The run is abandoned as non-converged after this much wall time.
    pub wall_limit: Duration,
}

impl RealtimeOptions {
    pub fn new(tick: Duration, wall_limit: Duration) -> Self {
        RealtimeOptions { tick, wall_limit }
    }
}

pub struct RealtimeOutcome {
    pub converged: bool,
    /// Elapsed ticks when the run stopped.
    pub final_tick: u64,
    pub elapsed: Duration,
    /// Final state of every agent alive at the end, in uid order.
    pub states: Vec<NodeState>,
    pub log: EventLog,
    pub totals: TurnReport,
}

/// Elapsed wall-clock time measured in ticks.
#[derive(Debug, Clone, Copy)]
struct WallClock {
    start: Instant,
    tick: Duration,
}

impl WallClock {
    fn now(&self) -> u64 {
        (self.start.elapsed().as_nanos() / self.tick.as_nanos()) as u64
    }

    fn at(&self, t: u64) -> Instant {
        self.start + Duration::from_nanos((self.tick.as_nanos() as u64).saturating_mul(t))
    }
}

enum SmbCmd {
    Register(AgentId, Position, Sender<()>),
    Unregister(AgentId),
    Moved(AgentId, Position),
    SetRange(f64),
    Invalidate,
    Stop,
}

enum AgentCmd {
    Move(Position),
    Despawn,
    Halt,
}

enum Status {
    Turn { id: AgentId, now: u64, settled: bool, pending: usize, report: TurnReport },
    Exit { state: Box<NodeState>, report: TurnReport },
}

struct Shared {
    publication: RwLock<Publication>,
    k: AtomicU32,
    log: EventLog,
    cfg: ProtocolConfig,
    world: WorldBounds,
    max_drain: usize,
    clock: WallClock,
    smb: Sender<SmbCmd>,
    status: Sender<Status>,
    barrier: Option<SyncBarrier>,
}

impl Shared {
    fn env<'a>(&'a self, now: u64, publication: &'a Publication) -> TurnEnv<'a> {
        TurnEnv {
            now,
            k: self.k.load(Ordering::Relaxed),
            cfg: &self.cfg,
            publication,
            log: &self.log,
            max_drain: self.max_drain,
        }
    }

    fn publication(&self) -> Publication {
        self.publication.read().unwrap().clone()
    }
}

fn smb_loop(mut smb: Smb, rx: Receiver<SmbCmd>, sh: Arc<Shared>) {
    while let Ok(first) = rx.recv() {
        let mut acks = Vec::new();
        let mut stop = false;
        for cmd in std::iter::once(first).chain(rx.try_iter()) {
            match cmd {
                SmbCmd::Register(id, pos, ack) => {
                    smb.register(id, pos);
                    acks.push(ack);
                }
                SmbCmd::Unregister(id) => smb.unregister(id),
                SmbCmd::Moved(id, pos) => smb.update_position(id, pos),
                SmbCmd::SetRange(r) => {
                    // Validated by the controller before it is sent.
                    let _ = smb.set_radio_range(r);
                }
                SmbCmd::Invalidate => smb.invalidate(),
                SmbCmd::Stop => stop = true,
            }
        }
        if let Some(p) = smb.refresh(&sh.log, sh.clock.now()) {
            *sh.publication.write().unwrap() = p;
        }
        for ack in acks {
            let _ = ack.send(());
        }
        if stop {
            return;
        }
    }
}

fn agent_loop(mut agent: Agent, cmds: Receiver<AgentCmd>, sh: Arc<Shared>) {
    let id = agent.id();
    if let Some(b) = &sh.barrier {
        if let Err(e) = b.wait(id, sh.clock.now(), EXIT_TIMEOUT) {
            sh.log.emit(sh.clock.now(), Actor::Agent(id), EventDetail::ProtocolViolation { src: None, reason: e.to_string() });
        }
    }
    let mut next = sh.clock.now();
    loop {
        match cmds.recv_deadline(sh.clock.at(next)) {
            Ok(AgentCmd::Move(pos)) => {
                agent.state.pos = pos;
                agent.state.waypoint = None;
                let _ = sh.smb.send(SmbCmd::Moved(id, pos));
                continue;
            }
            Ok(AgentCmd::Despawn) => {
                let publication = sh.publication();
                let report = agent.shutdown(&sh.env(sh.clock.now(), &publication));
                let _ = sh.status.send(Status::Exit { state: Box::new(agent.state.clone()), report });
                return;
            }
            Ok(AgentCmd::Halt) | Err(RecvTimeoutError::Disconnected) => {
                let _ = sh.status.send(Status::Exit { state: Box::new(agent.state.clone()), report: TurnReport::default() });
                return;
            }
            Err(RecvTimeoutError::Timeout) => {}
        }
        let now = sh.clock.now();
        if agent.move_once(&sh.world) {
            let _ = sh.smb.send(SmbCmd::Moved(id, agent.state.pos));
        }
        let publication = sh.publication();
        let report = agent.turn(&sh.env(now, &publication));
        let _ = sh.status.send(Status::Turn {
            id,
            now,
            settled: agent.is_settled(),
            pending: agent.endpoint.pending(),
            report,
        });
        // A late thread skips the ticks it missed rather than bursting.
        next = now + 1;
    }
}

struct Live {
    cmds: Sender<AgentCmd>,
    handle: JoinHandle<()>,
    settled: bool,
}

struct Controller {
    cfg: WorldConfig,
    sh: Arc<Shared>,
    transport: Transport,
    status: Receiver<Status>,
    live: BTreeMap<AgentId, Live>,
    retired: BTreeSet<AgentId>,
    totals: TurnReport,
    chatty: bool,
    last_active: u64,
}

impl Controller {
    fn absorb(&mut self, st: Status) -> Option<NodeState> {
        match st {
            Status::Turn { id, now, settled, pending, report } => {
                self.totals.add(&report);
                if let Some(l) = self.live.get_mut(&id) {
                    l.settled = settled;
                }
                if report.role_changes > 0 || (self.chatty && (report.sent > 0 || pending > 0)) {
                    self.last_active = self.last_active.max(now);
                }
                None
            }
            Status::Exit { state, report } => {
                self.totals.add(&report);
                Some(*state)
            }
        }
    }

    /// Waits for `n` exit statuses, folding in any turn reports on the way.
    fn await_exits(&mut self, n: usize) -> Result<Vec<NodeState>> {
        let mut out = Vec::with_capacity(n);
        let deadline = Instant::now() + EXIT_TIMEOUT;
        while out.len() < n {
            match self.status.recv_deadline(deadline) {
                Ok(st) => out.extend(self.absorb(st)),
                Err(_) => return Err(Error::Sync(format!("{} agent threads did not stop", n - out.len()))),
            }
        }
        Ok(out)
    }

    fn spawn(&mut self, spec: crate::agent::AgentSpec) -> Result<()> {
        let id = spec.uid;
        if self.live.contains_key(&id) || self.retired.contains(&id) {
            return Err(Error::Identity(id));
        }
        if !spec.position.is_finite() || !self.cfg.params.world.contains(spec.position) {
            return Err(Error::Param(format!("position ({}, {}) of agent {id} is outside the world", spec.position.x, spec.position.y)));
        }
        let state = NodeState::new(&spec, self.cfg.protocol, &self.cfg.protocol_cfg)?;
        let endpoint = self.transport.bind(id)?;
        let port = endpoint.address().port;
        self.sh.log.emit(
            self.sh.clock.now(),
            Actor::Agent(id),
            EventDetail::Spawn { agent_kind: spec.kind.clone(), position: spec.position, port },
        );
        let (ack_tx, ack_rx) = crossbeam_channel::bounded(1);
        let _ = self.sh.smb.send(SmbCmd::Register(id, spec.position, ack_tx));
        ack_rx.recv_timeout(EXIT_TIMEOUT).map_err(|_| Error::Sync("SMB did not register agent".into()))?;
        let agent = Agent::new(state, spec.kind, endpoint, self.cfg.params.seed);
        let (tx, rx) = crossbeam_channel::unbounded();
        let sh = self.sh.clone();
        let handle = thread::Builder::new().name(format!("agent-{id}")).spawn(move || agent_loop(agent, rx, sh))?;
        self.live.insert(id, Live { cmds: tx, handle, settled: false });
        Ok(())
    }

    fn despawn(&mut self, id: AgentId) -> Result<()> {
        let Some(l) = self.live.remove(&id) else {
            return Err(Error::Lifecycle(format!("agent {id} is not alive")));
        };
        let _ = l.cmds.send(AgentCmd::Despawn);
        self.await_exits(1)?;
        l.handle.join().map_err(|_| Error::Sync(format!("agent {id} panicked")))?;
        self.sh.log.emit(self.sh.clock.now(), Actor::Agent(id), EventDetail::Despawn { reason: "removed".into() });
        let _ = self.sh.smb.send(SmbCmd::Unregister(id));
        self.retired.insert(id);
        Ok(())
    }

    fn apply(&mut self, action: Action) -> Result<()> {
        self.last_active = self.sh.clock.now();
        match action {
            Action::Spawn(spec) => self.spawn(spec),
            Action::Despawn { uid } => self.despawn(uid),
            Action::Move { uid, position } => {
                if !position.is_finite() || !self.cfg.params.world.contains(position) {
                    return Err(Error::Param(format!("position ({}, {}) is outside the world", position.x, position.y)));
                }
                let l = self.live.get(&uid).ok_or(Error::Lookup(uid))?;
                let _ = l.cmds.send(AgentCmd::Move(position));
                Ok(())
            }
            Action::SetParam(ParamChange::K(k)) => {
                if k == 0 {
                    return Err(Error::Param("k must be at least 1".into()));
                }
                self.cfg.params.k = k;
                self.sh.k.store(k, Ordering::Relaxed);
                let _ = self.sh.smb.send(SmbCmd::Invalidate);
                Ok(())
            }
            Action::SetParam(ParamChange::RadioRange(r)) => {
                if !(r.is_finite() && r > 0.0) {
                    return Err(Error::Param(format!("radio_range must be positive, got {r}")));
                }
                self.cfg.params.radio_range = r;
                let _ = self.sh.smb.send(SmbCmd::SetRange(r));
                Ok(())
            }
            Action::SetParam(ParamChange::TickMs(_)) => {
                Err(Error::Mode("tick_ms cannot change during a realtime run".into()))
            }
        }
    }

    fn quiescent(&self, now: u64, window: u64) -> bool {
        self.live.values().all(|l| l.settled) && now >= self.last_active + window
    }

    /// Stops every agent without running its shutdown handler.
    fn halt_all(&mut self) -> Result<Vec<NodeState>> {
        let live = std::mem::take(&mut self.live);
        for l in live.values() {
            let _ = l.cmds.send(AgentCmd::Halt);
        }
        let mut states = self.await_exits(live.len())?;
        for (id, l) in live {
            l.handle.join().map_err(|_| Error::Sync(format!("agent {id} panicked")))?;
        }
        states.sort_by_key(|s| s.id);
        Ok(states)
    }
}

/// Runs `scenario` with one thread per agent until quiescence, the
/// scenario's `max_ticks`, or the wall-clock limit, whichever comes first.
/// Boot and script times are interpreted as elapsed ticks. End-of-run
/// halting does not invoke shutdown handlers, so final roles are those the
/// agents held when the run stopped.
pub fn run_realtime(scenario: &Scenario, opts: RealtimeOptions) -> Result<RealtimeOutcome> {
    if opts.tick.is_zero() {
        return Err(Error::Param("tick length must be positive".into()));
    }
    let cfg = scenario.world_config();
    cfg.params.validate()?;
    cfg.protocol_cfg.validate()?;
    let log = EventLog::new();
    let transport = Transport::new(cfg.transport, cfg.params.seed)?;
    let smb = Smb::new(cfg.params.radio_range)?;

    let mut pending: Vec<(u64, Action)> =
        scenario.boot_schedule().into_iter().map(|(at, spec)| (at, Action::Spawn(spec))).collect();
    let barrier = match scenario.boot {
        BootMode::AllAtOnce if !pending.is_empty() => {
            let ids = scenario.resolve_agents().iter().map(|a| a.uid).collect();
            Some(SyncBarrier::new(ids, "boot", log.clone())?)
        }
        _ => None,
    };
    pending.extend(scenario.script.iter().map(|s| (s.at_tick, s.action.clone())));
    pending.sort_by_key(|(at, _)| *at);
    let mut pending: VecDeque<_> = pending.into();

    let clock = WallClock { start: Instant::now(), tick: opts.tick };
    let (smb_tx, smb_rx) = crossbeam_channel::unbounded();
    let (status_tx, status_rx) = crossbeam_channel::unbounded();
    let sh = Arc::new(Shared {
        publication: RwLock::new(smb.current().clone()),
        k: AtomicU32::new(cfg.params.k),
        log: log.clone(),
        cfg: cfg.protocol_cfg,
        world: cfg.params.world,
        max_drain: cfg.max_drain,
        clock,
        smb: smb_tx,
        status: status_tx,
        barrier,
    });
    let smb_handle = {
        let sh = sh.clone();
        thread::Builder::new().name("smb".into()).spawn(move || smb_loop(smb, smb_rx, sh))?
    };

    let mut ctl = Controller {
        chatty: ProtocolState::new(cfg.protocol, 0.0).silent_when_settled(),
        cfg,
        sh: sh.clone(),
        transport,
        status: status_rx,
        live: BTreeMap::new(),
        retired: BTreeSet::new(),
        totals: TurnReport::default(),
        last_active: 0,
    };
    let window = scenario.run.quiescence_window;
    let wall_deadline = clock.start + opts.wall_limit;
    let run = (|| -> Result<bool> {
        loop {
            let now = clock.now();
            ctl.transport.clock().set(now);
            while pending.front().is_some_and(|(at, _)| *at <= now) {
                let (at, action) = pending.pop_front().unwrap();
                ctl.apply(action).map_err(|e| Error::Scenario(format!("scheduled action at tick {at}: {e}")))?;
            }
            if pending.is_empty() && ctl.quiescent(now, window) {
                return Ok(true);
            }
            if now >= scenario.run.max_ticks || Instant::now() >= wall_deadline {
                return Ok(false);
            }
            let wake = clock.at(now + 1).min(wall_deadline);
            while let Ok(st) = ctl.status.recv_deadline(wake) {
                ctl.absorb(st);
            }
        }
    })();
    let final_tick = clock.now();
    let states = ctl.halt_all();
    let _ = sh.smb.send(SmbCmd::Stop);
    let _ = smb_handle.join();
    let converged = run?;
    Ok(RealtimeOutcome {
        converged,
        final_tick,
        elapsed: clock.start.elapsed(),
        states: states?,
        log,
        totals: ctl.totals,
    })
}
