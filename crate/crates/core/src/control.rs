//! Control stream: a TCP server that lets a UI watch and steer a live
//! deterministic world.
//!
//! Every frame is a 4-byte big-endian length followed by a UTF-8 JSON
//! object carrying `"v": 1`. The server sends `SNAPSHOT`, `EVENT`, `DELTA`
//! and `ACK` frames (tag field `"type"`); clients send commands (tag field
//! `"cmd"`) with a caller-chosen `"id"` that the matching `ACK` echoes:
//!
//! ```text
//! {"v":1,"id":1,"cmd":"START"}
//! {"v":1,"id":2,"cmd":"PAUSE"}
//! {"v":1,"id":3,"cmd":"STEP","n":5}
//! {"v":1,"id":4,"cmd":"SET_PARAM","key":"k","value":3}
//! {"v":1,"id":5,"cmd":"ADD_NODE","position":{"x":40,"y":60}}
//! {"v":1,"id":6,"cmd":"REMOVE_NODE","uid":7}
//! {"v":1,"id":7,"cmd":"MOVE_NODE","uid":7,"position":{"x":10,"y":10}}
//! {"v":1,"id":8,"cmd":"SNAPSHOT"}
//! ```
//!
//! A client first receives a `SNAPSHOT`, then every event with a higher
//! `seq` and a `DELTA` after each tick or command that changed nodes or
//! links. Commands are applied between ticks by the simulation thread, so
//! no frame ever reflects a half-applied command. A client whose outgoing
//! buffer fills up is disconnected; the simulation never waits for it.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{self, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use crossbeam_channel::{Receiver, Sender, TrySendError};
use serde::{Deserialize, Serialize};

use crate::agent::{AgentSpec, Mobility};
use crate::error::{Error, Result};
use crate::events::SimEvent;
use crate::model::{AgentId, Position, Role, SimParams};
use crate::protocol::{ProtocolKind, ResourceProfile};
use crate::world::{ParamChange, World};

pub const CONTROL_VERSION: u32 = 1;

/// Largest frame either side accepts.
pub const MAX_FRAME: usize = 1 << 22;

const POLL: Duration = Duration::from_millis(20);
const EVENT_FEED: usize = 1 << 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "cmd", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ControlCommand {
    Start,
    Pause,
    Step {
        n: u64,
    },
    SetParam {
        key: String,
        value: f64,
    },
    /// `uid` defaults to one past the highest uid this world has used.
    AddNode {
        #[serde(default)]
        uid: Option<AgentId>,
        position: Position,
        #[serde(default)]
        kind: Option<String>,
        #[serde(default)]
        mobility: Option<Mobility>,
        #[serde(default)]
        resources: Option<ResourceProfile>,
    },
    RemoveNode {
        uid: AgentId,
    },
    MoveNode {
        uid: AgentId,
        position: Position,
    },
    Snapshot,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CommandFrame {
    pub v: u32,
    pub id: u64,
    #[serde(flatten)]
    pub command: ControlCommand,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NodeView {
    pub uid: AgentId,
    pub position: Position,
    pub role: Role,
    pub score: f64,
    pub affiliation: Option<AgentId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub tick: u64,
    /// Sequence number the next event will carry.
    pub next_seq: u64,
    pub protocol: ProtocolKind,
    pub params: SimParams,
    pub running: bool,
    pub nodes: Vec<NodeView>,
    pub edges: Vec<(AgentId, AgentId)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Delta {
    pub tick: u64,
    pub next_seq: u64,
    /// Nodes that appeared or whose view changed.
    pub nodes: Vec<NodeView>,
    pub removed: Vec<AgentId>,
    pub edges_added: Vec<(AgentId, AgentId)>,
    pub edges_removed: Vec<(AgentId, AgentId)>,
}

impl Delta {
    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty() && self.removed.is_empty() && self.edges_added.is_empty() && self.edges_removed.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ack {
    /// `None` when the command was too malformed to carry an id.
    pub id: Option<u64>,
    pub ok: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ServerMessage {
    Snapshot(Snapshot),
    Event { event: SimEvent },
    Delta(Delta),
    Ack(Ack),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServerFrame {
    pub v: u32,
    #[serde(flatten)]
    pub msg: ServerMessage,
}

pub fn write_frame(w: &mut impl Write, payload: &[u8]) -> io::Result<()> {
    if payload.len() > MAX_FRAME {
        return Err(io::Error::new(io::ErrorKind::InvalidInput, "frame too large"));
    }
    w.write_all(&(payload.len() as u32).to_be_bytes())?;
    w.write_all(payload)?;
    w.flush()
}

pub fn read_frame(r: &mut impl Read) -> io::Result<Vec<u8>> {
    let mut len = [0u8; 4];
    r.read_exact(&mut len)?;
    let len = u32::from_be_bytes(len) as usize;
    if len > MAX_FRAME {
        return Err(io::Error::new(io::ErrorKind::InvalidData, format!("frame of {len} bytes exceeds limit")));
    }
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    Ok(buf)
}

fn encode(msg: ServerMessage) -> Vec<u8> {
    serde_json::to_vec(&ServerFrame { v: CONTROL_VERSION, msg }).expect("server frames serialize")
}

/// Parses one client frame. Errors carry the command id when it could be read.
pub fn parse_command(bytes: &[u8]) -> std::result::Result<CommandFrame, (Option<u64>, String)> {
    let value: serde_json::Value =
        serde_json::from_slice(bytes).map_err(|e| (None, format!("malformed frame: {e}")))?;
    let id = value.get("id").and_then(serde_json::Value::as_u64);
    match value.get("v").and_then(serde_json::Value::as_u64) {
        Some(v) if v == u64::from(CONTROL_VERSION) => {}
        Some(v) => return Err((id, format!("unsupported control version {v}"))),
        None => return Err((id, "missing control version".into())),
    }
    serde_json::from_value(value).map_err(|e| (id, format!("bad command: {e}")))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ServeOptions {
    /// Tick continuously from the start instead of waiting for `START`.
    pub running: bool,
    /// Frames buffered per client before it is dropped.
    pub client_buffer: usize,
}

impl Default for ServeOptions {
    fn default() -> Self {
        ServeOptions { running: false, client_buffer: 4096 }
    }
}

enum Inbound {
    Connect { client: u64, tx: Sender<Vec<u8>>, stream: TcpStream },
    Command { client: u64, frame: std::result::Result<CommandFrame, (Option<u64>, String)> },
    Gone { client: u64 },
}

struct Client {
    tx: Sender<Vec<u8>>,
    stream: TcpStream,
}

struct SimLoop {
    world: World,
    events: Receiver<SimEvent>,
    clients: BTreeMap<u64, Client>,
    running: bool,
    steps_due: u64,
    next_uid: u32,
    view: BTreeMap<AgentId, NodeView>,
    edges: BTreeSet<(AgentId, AgentId)>,
    error: Option<String>,
}

fn views(world: &World) -> BTreeMap<AgentId, NodeView> {
    world
        .agents
        .values()
        .map(|a| {
            let s = &a.state;
            (s.id, NodeView { uid: s.id, position: s.pos, role: s.role, score: s.score, affiliation: s.affiliation() })
        })
        .collect()
}

impl SimLoop {
    fn send_to(&mut self, client: u64, frame: Vec<u8>) {
        let Some(c) = self.clients.get(&client) else { return };
        if let Err(TrySendError::Full(_) | TrySendError::Disconnected(_)) = c.tx.try_send(frame) {
            self.drop_client(client);
        }
    }

    fn broadcast(&mut self, frame: &[u8]) {
        let ids: Vec<u64> = self.clients.keys().copied().collect();
        for id in ids {
            self.send_to(id, frame.to_vec());
        }
    }

    fn drop_client(&mut self, client: u64) {
        if let Some(c) = self.clients.remove(&client) {
            let _ = c.stream.shutdown(std::net::Shutdown::Both);
        }
    }

    fn snapshot(&self) -> Snapshot {
        Snapshot {
            tick: self.world.now(),
            next_seq: self.world.log().next_seq(),
            protocol: self.world.protocol(),
            params: *self.world.params(),
            running: self.running,
            nodes: self.view.values().copied().collect(),
            edges: self.edges.iter().copied().collect(),
        }
    }

    /// Forwards new events, then a delta if the node or link view changed.
    fn publish(&mut self) {
        let events: Vec<SimEvent> = self.events.try_iter().collect();
        for event in events {
            if let crate::events::EventDetail::Spawn { .. } = event.detail {
                if let crate::events::Actor::Agent(id) = event.actor {
                    self.next_uid = self.next_uid.max(id.0.saturating_add(1));
                }
            }
            self.broadcast(&encode(ServerMessage::Event { event }));
        }
        let view = views(&self.world);
        let edges: BTreeSet<_> = self.world.topology().edges().into_iter().collect();
        let delta = Delta {
            tick: self.world.now(),
            next_seq: self.world.log().next_seq(),
            nodes: view.iter().filter(|(id, v)| self.view.get(id) != Some(v)).map(|(_, v)| *v).collect(),
            removed: self.view.keys().filter(|id| !view.contains_key(id)).copied().collect(),
            edges_added: edges.difference(&self.edges).copied().collect(),
            edges_removed: self.edges.difference(&edges).copied().collect(),
        };
        self.view = view;
        self.edges = edges;
        if !delta.is_empty() {
            self.broadcast(&encode(ServerMessage::Delta(delta)));
        }
    }

    fn apply(&mut self, cmd: ControlCommand) -> Result<()> {
        match cmd {
            ControlCommand::Start => self.running = true,
            ControlCommand::Pause => self.running = false,
            ControlCommand::Step { n: 0 } => return Err(Error::Param("STEP needs n >= 1".into())),
            ControlCommand::Step { n } => self.steps_due = self.steps_due.saturating_add(n),
            ControlCommand::SetParam { key, value } => self.world.set_param(ParamChange::parse(&key, value)?)?,
            ControlCommand::AddNode { uid, position, kind, mobility, resources } => {
                let mut spec = AgentSpec::new(uid.unwrap_or(AgentId(self.next_uid)), position);
                if let Some(k) = kind {
                    spec.kind = k;
                }
                spec.mobility = mobility.unwrap_or_default();
                spec.resources = resources.unwrap_or_default();
                self.world.spawn_agent(spec)?;
            }
            ControlCommand::RemoveNode { uid } => self.world.despawn_agent(uid)?,
            ControlCommand::MoveNode { uid, position } => self.world.move_agent(uid, position)?,
            ControlCommand::Snapshot => {}
        }
        Ok(())
    }

    fn handle(&mut self, msg: Inbound) {
        match msg {
            Inbound::Connect { client, tx, stream } => {
                self.publish();
                self.clients.insert(client, Client { tx, stream });
                let snap = encode(ServerMessage::Snapshot(self.snapshot()));
                self.send_to(client, snap);
            }
            Inbound::Gone { client } => self.drop_client(client),
            Inbound::Command { client, frame } => {
                let (ack, snapshot) = match frame {
                    Err((id, error)) => (Ack { id, ok: false, error: Some(error) }, false),
                    Ok(f) => {
                        let snapshot = f.command == ControlCommand::Snapshot;
                        match self.apply(f.command) {
                            Ok(()) => (Ack { id: Some(f.id), ok: true, error: None }, snapshot),
                            Err(e) => (Ack { id: Some(f.id), ok: false, error: Some(e.to_string()) }, false),
                        }
                    }
                };
                self.publish();
                self.send_to(client, encode(ServerMessage::Ack(ack)));
                if snapshot {
                    let snap = encode(ServerMessage::Snapshot(self.snapshot()));
                    self.send_to(client, snap);
                }
            }
        }
    }

    fn run(mut self, inbound: Receiver<Inbound>, stop: Arc<AtomicBool>) -> (World, Option<String>) {
        self.view = views(&self.world);
        self.edges = self.world.topology().edges().into_iter().collect();
        let mut next_tick = Instant::now();
        while !stop.load(Ordering::Relaxed) {
            let deadline = if self.steps_due > 0 {
                Instant::now()
            } else if self.running {
                next_tick.min(Instant::now() + POLL)
            } else {
                Instant::now() + POLL
            };
            if let Ok(m) = inbound.recv_deadline(deadline) {
                self.handle(m);
                while let Ok(m) = inbound.try_recv() {
                    self.handle(m);
                }
            }
            let due = self.steps_due > 0 || (self.running && Instant::now() >= next_tick);
            if !due {
                continue;
            }
            self.steps_due = self.steps_due.saturating_sub(1);
            next_tick = Instant::now() + Duration::from_millis(self.world.params().tick_ms);
            if let Err(e) = self.world.tick() {
                self.error = Some(e.to_string());
                self.running = false;
                self.steps_due = 0;
            }
            self.publish();
        }
        for id in self.clients.keys().copied().collect::<Vec<_>>() {
            self.drop_client(id);
        }
        (self.world, self.error)
    }
}

fn reader(mut stream: TcpStream, client: u64, inbound: Sender<Inbound>) {
    loop {
        match read_frame(&mut stream) {
            Ok(bytes) => {
                let frame = parse_command(&bytes);
                if inbound.send(Inbound::Command { client, frame }).is_err() {
                    return;
                }
            }
            Err(_) => {
                let _ = inbound.send(Inbound::Gone { client });
                return;
            }
        }
    }
}

fn writer(mut stream: TcpStream, rx: Receiver<Vec<u8>>) {
    for frame in rx {
        if write_frame(&mut stream, &frame).is_err() {
            break;
        }
    }
    let _ = stream.shutdown(std::net::Shutdown::Both);
}

fn acceptor(listener: TcpListener, inbound: Sender<Inbound>, stop: Arc<AtomicBool>, buffer: usize) {
    let mut next_client = 0u64;
    while !stop.load(Ordering::Relaxed) {
        match listener.accept() {
            Ok((stream, _)) => {
                let _ = stream.set_nonblocking(false);
                let _ = stream.set_nodelay(true);
                let (Ok(r), Ok(w)) = (stream.try_clone(), stream.try_clone()) else { continue };
                let client = next_client;
                next_client += 1;
                let (tx, rx) = crossbeam_channel::bounded(buffer.max(1));
                let ib = inbound.clone();
                thread::spawn(move || reader(r, client, ib));
                thread::spawn(move || writer(w, rx));
                if inbound.send(Inbound::Connect { client, tx, stream }).is_err() {
                    return;
                }
            }
            Err(e) if e.kind() == io::ErrorKind::WouldBlock => thread::sleep(POLL),
            Err(_) => thread::sleep(POLL),
        }
    }
}

/// A running control server; dropping it without [`ControlServer::shutdown`]
/// leaves the threads running until the process exits.
pub struct ControlServer {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    sim: JoinHandle<(World, Option<String>)>,
    accept: JoinHandle<()>,
}

impl ControlServer {
    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    /// Stops the server and hands back the world together with the error
    /// that halted ticking, if any.
    pub fn shutdown(self) -> Result<(World, Option<String>)> {
        self.stop.store(true, Ordering::Relaxed);
        let _ = self.accept.join();
        self.sim.join().map_err(|_| Error::Sync("control simulation thread panicked".into()))
    }

    /// Blocks until the server is stopped from elsewhere.
    pub fn join(self) -> Result<(World, Option<String>)> {
        let _ = self.accept.join();
        self.sim.join().map_err(|_| Error::Sync("control simulation thread panicked".into()))
    }
}

/// Serves `world` on `127.0.0.1:port`; port 0 picks a free port.
pub fn serve_control(world: World, port: u16, opts: ServeOptions) -> Result<ControlServer> {
    let listener = TcpListener::bind(("127.0.0.1", port)).map_err(|e| match e.kind() {
        io::ErrorKind::AddrInUse => Error::AddrInUse(format!("127.0.0.1:{port}")),
        _ => Error::Io(e),
    })?;
    listener.set_nonblocking(true)?;
    let addr = listener.local_addr()?;
    let stop = Arc::new(AtomicBool::new(false));
    let (tx, rx) = crossbeam_channel::unbounded();
    let events = world.log().subscribe(EVENT_FEED);
    let next_uid = world.ids().iter().map(|a| a.0.saturating_add(1)).max().unwrap_or(0).max(
        world.retired.iter().map(|a| a.0.saturating_add(1)).max().unwrap_or(0),
    );
    let sim = SimLoop {
        running: opts.running,
        world,
        events,
        clients: BTreeMap::new(),
        steps_due: 0,
        next_uid,
        view: BTreeMap::new(),
        edges: BTreeSet::new(),
        error: None,
    };
    let sim = {
        let stop = stop.clone();
        thread::Builder::new().name("control-sim".into()).spawn(move || sim.run(rx, stop))?
    };
    let accept = {
        let stop = stop.clone();
        let buffer = opts.client_buffer;
        thread::Builder::new().name("control-accept".into()).spawn(move || acceptor(listener, tx, stop, buffer))?
    };
    Ok(ControlServer { addr, stop, sim, accept })
}

/// Blocking client for the control stream.
pub struct ControlClient {
    stream: TcpStream,
    next_id: u64,
}

impl ControlClient {
    pub fn connect(addr: SocketAddr) -> Result<Self> {
        let stream = TcpStream::connect(addr)?;
        stream.set_nodelay(true)?;
        Ok(ControlClient { stream, next_id: 1 })
    }

    /// Sends a command and returns the id it was given.
    pub fn send(&mut self, command: ControlCommand) -> Result<u64> {
        let id = self.next_id;
        self.next_id += 1;
        let bytes = serde_json::to_vec(&CommandFrame { v: CONTROL_VERSION, id, command })?;
        write_frame(&mut self.stream, &bytes)?;
        Ok(id)
    }

    pub fn send_raw(&mut self, payload: &[u8]) -> Result<()> {
        Ok(write_frame(&mut self.stream, payload)?)
    }

    /// Next frame, or a timeout error after `timeout`.
    pub fn recv(&mut self, timeout: Duration) -> Result<ServerFrame> {
        self.stream.set_read_timeout(Some(timeout))?;
        let bytes = read_frame(&mut self.stream)?;
        Ok(serde_json::from_slice(&bytes)?)
    }

    /// Reads frames until the `ACK` for `id`, returning it together with
    /// everything received before it.
    pub fn wait_ack(&mut self, id: u64, timeout: Duration) -> Result<(Ack, Vec<ServerFrame>)> {
        let deadline = Instant::now() + timeout;
        let mut seen = Vec::new();
        loop {
            let left = deadline.saturating_duration_since(Instant::now());
            if left.is_zero() {
                return Err(Error::Sync(format!("no ack for command {id}")));
            }
            let f = self.recv(left)?;
            if let ServerMessage::Ack(a) = &f.msg {
                if a.id == Some(id) {
                    return Ok((a.clone(), seen));
                }
            }
            seen.push(f);
        }
    }
}
