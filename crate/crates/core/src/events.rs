//! The run's ordered event log.
//!
//! Every observable interaction becomes one [`SimEvent`] with a run-unique,
//! strictly increasing `seq`. The log is persisted as line-delimited JSON,
//! one record per line with the stable fields `seq`, `time`, `kind`,
//! `actor` and `detail`.

use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Seek, SeekFrom, Write};
use std::path::Path;
use std::sync::{Arc, Mutex};

use crossbeam_channel::{Receiver, Sender, TrySendError};
use serde::de::{self, Deserializer};
use serde::{Deserialize, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::model::{AgentId, Position, Role};

/// Who emitted an event. Serialized as the bare uid or the string `"SMB"`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Actor {
    Agent(AgentId),
    Smb,
}

impl Serialize for Actor {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Actor::Agent(id) => s.serialize_u32(id.0),
            Actor::Smb => s.serialize_str("SMB"),
        }
    }
}

impl<'de> Deserialize<'de> for Actor {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Uid(u32),
            Name(String),
        }
        match Raw::deserialize(d)? {
            Raw::Uid(u) => Ok(Actor::Agent(AgentId(u))),
            Raw::Name(n) if n == "SMB" => Ok(Actor::Smb),
            Raw::Name(n) => Err(de::Error::custom(format!("unknown actor {n:?}"))),
        }
    }
}

impl fmt::Display for Actor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Actor::Agent(id) => write!(f, "{id}"),
            Actor::Smb => f.write_str("SMB"),
        }
    }
}

/// Closed event vocabulary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum EventKind {
    Spawn,
    Despawn,
    MsgSent,
    MsgDelivered,
    MsgDropped,
    RoleChange,
    ElectionConflict,
    ProtocolViolation,
    TopologyChange,
    Barrier,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum DropReason {
    /// SMB found no route between sender and receiver.
    Unauthorized,
    /// The transport refused the send (closed endpoint, oversized payload).
    Transport,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum BarrierStage {
    Enter,
    Release,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MovedNode {
    pub uid: AgentId,
    pub x: f64,
    pub y: f64,
}

/// Kind-specific event payload.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "detail", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum EventDetail {
    Spawn {
        agent_kind: String,
        position: Position,
        port: u16,
    },
    Despawn {
        reason: String,
    },
    MsgSent {
        dst: AgentId,
        variant: String,
        route_version: u64,
        /// Hop count carried by a HEAD_ADVERT.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        hops: Option<u32>,
    },
    MsgDelivered {
        src: AgentId,
        variant: String,
    },
    MsgDropped {
        dst: AgentId,
        variant: String,
        reason: DropReason,
    },
    RoleChange {
        from: Role,
        to: Role,
        /// Owning cluster head or elected leader, when the role has one.
        affiliation: Option<AgentId>,
    },
    ElectionConflict {
        winner: AgentId,
        winner_score: f64,
        loser: AgentId,
        loser_score: f64,
    },
    ProtocolViolation {
        src: Option<AgentId>,
        reason: String,
    },
    TopologyChange {
        version: u64,
        radio_range: f64,
        nodes: usize,
        edges: usize,
        moved: Vec<MovedNode>,
    },
    Barrier {
        phase: String,
        stage: BarrierStage,
        participant: Option<AgentId>,
        arrived: usize,
        total: usize,
    },
}

impl EventDetail {
    pub fn kind(&self) -> EventKind {
        match self {
            EventDetail::Spawn { .. } => EventKind::Spawn,
            EventDetail::Despawn { .. } => EventKind::Despawn,
            EventDetail::MsgSent { .. } => EventKind::MsgSent,
            EventDetail::MsgDelivered { .. } => EventKind::MsgDelivered,
            EventDetail::MsgDropped { .. } => EventKind::MsgDropped,
            EventDetail::RoleChange { .. } => EventKind::RoleChange,
            EventDetail::ElectionConflict { .. } => EventKind::ElectionConflict,
            EventDetail::ProtocolViolation { .. } => EventKind::ProtocolViolation,
            EventDetail::TopologyChange { .. } => EventKind::TopologyChange,
            EventDetail::Barrier { .. } => EventKind::Barrier,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimEvent {
    pub seq: u64,
    /// Scheduler tick; in real-time mode, elapsed wall-clock time in ticks.
    pub time: u64,
    pub actor: Actor,
    #[serde(flatten)]
    pub detail: EventDetail,
}

impl SimEvent {
    pub fn kind(&self) -> EventKind {
        self.detail.kind()
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("events always serialize")
    }
}

/// Default number of events held in memory before older ones spill to disk.
pub const DEFAULT_MEMORY_LIMIT: usize = 1 << 20;

struct LogInner {
    next_seq: u64,
    memory: Vec<SimEvent>,
    spill: Option<BufWriter<File>>,
    spilled: usize,
    memory_limit: usize,
    subscribers: Vec<Sender<SimEvent>>,
}

/// Append-only event log shared by every execution context of one run.
#[derive(Clone)]
pub struct EventLog {
    inner: Arc<Mutex<LogInner>>,
}

impl Default for EventLog {
    fn default() -> Self {
        Self::new()
    }
}

impl EventLog {
    pub fn new() -> Self {
        Self::with_memory_limit(DEFAULT_MEMORY_LIMIT)
    }

    pub fn with_memory_limit(limit: usize) -> Self {
        EventLog {
            inner: Arc::new(Mutex::new(LogInner {
                next_seq: 0,
                memory: Vec::new(),
                spill: None,
                spilled: 0,
                memory_limit: limit.max(1),
                subscribers: Vec::new(),
            })),
        }
    }

    /// Appends an event, assigns its sequence number and fans it out to live
    /// subscribers. Subscribers whose buffer is full are disconnected.
    pub fn emit(&self, time: u64, actor: Actor, detail: EventDetail) -> u64 {
        let mut inner = self.inner.lock().unwrap();
        let seq = inner.next_seq;
        inner.next_seq += 1;
        let ev = SimEvent { seq, time, actor, detail };
        inner.subscribers.retain(|tx| match tx.try_send(ev.clone()) {
            Ok(()) => true,
            Err(TrySendError::Full(_)) | Err(TrySendError::Disconnected(_)) => false,
        });
        inner.memory.push(ev);
        if inner.memory.len() >= inner.memory_limit {
            // Logging must never fail the run; if the spill file cannot be
            // created the events simply stay in memory.
            let _ = spill(&mut inner);
        }
        seq
    }

    /// Live feed of subsequently emitted events, bounded to `capacity`.
    pub fn subscribe(&self, capacity: usize) -> Receiver<SimEvent> {
        let (tx, rx) = crossbeam_channel::bounded(capacity.max(1));
        self.inner.lock().unwrap().subscribers.push(tx);
        rx
    }

    pub fn len(&self) -> usize {
        let inner = self.inner.lock().unwrap();
        inner.spilled + inner.memory.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn next_seq(&self) -> u64 {
        self.inner.lock().unwrap().next_seq
    }

    pub fn spilled(&self) -> usize {
        self.inner.lock().unwrap().spilled
    }

    /// Full ordered log, including anything spilled to disk.
    pub fn events(&self) -> Vec<SimEvent> {
        let mut inner = self.inner.lock().unwrap();
        let mut out = Vec::with_capacity(inner.spilled + inner.memory.len());
        if let Some(w) = inner.spill.as_mut() {
            w.flush().expect("spill flush");
            let f = w.get_mut();
            f.seek(SeekFrom::Start(0)).expect("spill seek");
            let mut reader = BufReader::new(&*f);
            let mut line = String::new();
            while reader.read_line(&mut line).expect("spill read") > 0 {
                out.push(serde_json::from_str(line.trim_end()).expect("spilled event"));
                line.clear();
            }
            f.seek(SeekFrom::End(0)).expect("spill seek");
        }
        out.extend(inner.memory.iter().cloned());
        out
    }

    pub fn events_since(&self, seq: u64) -> Vec<SimEvent> {
        self.events().into_iter().filter(|e| e.seq >= seq).collect()
    }

    pub fn to_jsonl(&self) -> String {
        to_jsonl(&self.events())
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        for ev in self.events() {
            writeln!(w, "{}", ev.to_json_line())?;
        }
        w.flush()?;
        Ok(())
    }
}

fn spill(inner: &mut LogInner) -> Result<()> {
    if inner.spill.is_none() {
        inner.spill = Some(BufWriter::new(tempfile::tempfile()?));
    }
    let events = std::mem::take(&mut inner.memory);
    let w = inner.spill.as_mut().unwrap();
    for ev in &events {
        writeln!(w, "{}", ev.to_json_line())?;
    }
    inner.spilled += events.len();
    Ok(())
}

pub fn to_jsonl(events: &[SimEvent]) -> String {
    let mut s = String::new();
    for ev in events {
        s.push_str(&ev.to_json_line());
        s.push('\n');
    }
    s
}

/// Parses a line-delimited log; blank lines are ignored.
pub fn parse_jsonl(text: &str) -> Result<Vec<SimEvent>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l)
                .map_err(|e| Error::Decode(format!("event log line {}: {e}", i + 1)))
        })
        .collect()
}
