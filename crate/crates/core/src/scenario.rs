//! Scenario files.
//!
//! A scenario is a TOML document:
//!
//! ```toml
//! schema = 1
//! name = "fig6-k3"
//! protocol = "clustering"          # or "leader"
//!
//! [params]
//! k = 3                            # required for clustering
//! radio_range = 15.0
//! world = [100.0, 100.0]
//! seed = 42
//! tick_ms = 100
//!
//! [timing]                         # optional protocol timers, in ticks
//! solicit_timeout = 5
//!
//! [boot]
//! mode = "sequential"              # or "all_at_once"
//! delay = 11                       # ticks between consecutive boots
//!
//! [transport]
//! backend = "sim"                  # or "udp"
//!
//! [run]
//! max_ticks = 2000
//! quiescence_window = 10
//!
//! [[agents]]
//! uid = 0
//! position = [10.0, 20.0]          # or "random"
//! mobility = { pattern = "static" }
//! resources = { battery = 0.8, cpu_free = 0.4, mem_free = 0.6 }   # or "random"
//!
//! [generate]                       # optional bulk agents
//! count = 40
//! origin = [0.0, 0.0]              # with step: agent n at origin + n * step
//! step = [10.0, 5.0]               # omitted: random placement
//!
//! [[script]]
//! at_tick = 300
//! action = "despawn"               # spawn | despawn | move | set_param
//! uid = 0
//! ```

use std::collections::BTreeMap;
use std::ops::Range;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use toml::Spanned;

use crate::agent::{AgentSpec, Mobility};
use crate::error::{Error, Result};
use crate::model::{AgentId, Position, SimParams, WorldBounds};
use crate::protocol::{ProtocolConfig, ProtocolKind, ResourceProfile};
use crate::transport::TransportConfig;
use crate::world::{Action, ParamChange, World, WorldConfig};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum BootMode {
    /// Agents boot one at a time in ascending uid, `delay` ticks apart.
    Sequential { delay: u64 },
    AllAtOnce,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunLimits {
    pub max_ticks: u64,
    pub quiescence_window: u64,
}

/// Where an agent starts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Placement {
    At(Position),
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentEntry {
    pub uid: AgentId,
    pub kind: String,
    pub placement: Placement,
    pub mobility: Mobility,
    /// `None` draws a uniform random profile.
    pub resources: Option<ResourceProfile>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptStep {
    pub at_tick: u64,
    pub action: Action,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub name: String,
    pub protocol: ProtocolKind,
    pub params: SimParams,
    pub timing: ProtocolConfig,
    pub boot: BootMode,
    pub transport: TransportConfig,
    pub run: RunLimits,
    pub agents: Vec<AgentEntry>,
    pub script: Vec<ScriptStep>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawScenario {
    schema: Option<Spanned<u32>>,
    name: String,
    protocol: ProtocolKind,
    #[serde(default)]
    params: RawParams,
    #[serde(default)]
    timing: ProtocolConfig,
    #[serde(default)]
    boot: RawBoot,
    #[serde(default)]
    transport: TransportConfig,
    #[serde(default)]
    run: RawRun,
    #[serde(default)]
    agents: Vec<Spanned<RawAgent>>,
    generate: Option<Spanned<RawGenerate>>,
    #[serde(default)]
    script: Vec<Spanned<RawStep>>,
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct RawParams {
    k: Option<Spanned<u32>>,
    radio_range: Option<Spanned<f64>>,
    world: Option<Spanned<[f64; 2]>>,
    seed: Option<u64>,
    tick_ms: Option<u64>,
}

#[derive(Deserialize, Default, Clone, Copy)]
#[serde(rename_all = "snake_case")]
enum BootKind {
    #[default]
    Sequential,
    AllAtOnce,
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct RawBoot {
    #[serde(default)]
    mode: BootKind,
    delay: Option<u64>,
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct RawRun {
    max_ticks: Option<u64>,
    quiescence_window: Option<u64>,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum RawPosition {
    Xy([f64; 2]),
    Word(String),
}

#[derive(Deserialize)]
#[serde(untagged)]
enum RawResources {
    Profile(ResourceProfile),
    Word(String),
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawAgent {
    uid: Spanned<u32>,
    kind: Option<String>,
    position: Spanned<RawPosition>,
    mobility: Option<Mobility>,
    resources: Option<Spanned<RawResources>>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawGenerate {
    count: u32,
    first_uid: Option<u32>,
    kind: Option<String>,
    mobility: Option<Mobility>,
    /// With `step`, agent `n` is placed at `origin + n * step`; otherwise
    /// placement is random.
    origin: Option<[f64; 2]>,
    step: Option<[f64; 2]>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawStep {
    at_tick: u64,
    action: String,
    uid: Option<u32>,
    kind: Option<String>,
    position: Option<[f64; 2]>,
    mobility: Option<Mobility>,
    resources: Option<ResourceProfile>,
    key: Option<String>,
    value: Option<f64>,
}

/// Line counter for diagnostics.
struct Source<'a> {
    origin: &'a str,
    text: &'a str,
}

impl Source<'_> {
    fn line(&self, span: &Range<usize>) -> usize {
        self.text[..span.start.min(self.text.len())].matches('\n').count() + 1
    }

    fn err(&self, span: Option<Range<usize>>, field: &str, msg: impl std::fmt::Display) -> Error {
        match span {
            Some(s) => Error::Scenario(format!("{}:{}: {field}: {msg}", self.origin, self.line(&s))),
            None => Error::Scenario(format!("{}: {field}: {msg}", self.origin)),
        }
    }
}

impl ParamChange {
    /// Parses a whitelisted `key = value` edit. The world size is fixed for
    /// the lifetime of a run.
    pub fn parse(key: &str, value: f64) -> Result<ParamChange> {
        let whole = |v: f64| -> Result<u64> {
            if v.is_finite() && v >= 0.0 && v.fract() == 0.0 && v <= u32::MAX as f64 {
                Ok(v as u64)
            } else {
                Err(Error::Param(format!("{key} needs a non-negative integer, got {v}")))
            }
        };
        match key {
            "k" => Ok(ParamChange::K(whole(value)? as u32)),
            "radio_range" => Ok(ParamChange::RadioRange(value)),
            "tick_ms" => Ok(ParamChange::TickMs(whole(value)?)),
            "world" | "width" | "height" => Err(Error::Param("world size cannot change mid-run".into())),
            other => Err(Error::Param(format!("parameter {other:?} is not settable; use k, radio_range or tick_ms"))),
        }
    }
}

fn position(xy: [f64; 2]) -> Position {
    Position::new(xy[0], xy[1])
}

pub fn parse_scenario(text: &str, origin: &str) -> Result<Scenario> {
    let src = Source { origin, text };
    let raw: RawScenario =
        toml::from_str(text).map_err(|e| src.err(e.span(), "parse", e.message().trim()))?;

    if let Some(s) = &raw.schema {
        if *s.get_ref() != SCHEMA_VERSION {
            return Err(src.err(Some(s.span()), "schema", format!("unsupported schema {}", s.get_ref())));
        }
    }
    if raw.name.trim().is_empty() {
        return Err(src.err(None, "name", "must not be empty"));
    }

    let defaults = SimParams::default();
    let k = match (&raw.params.k, raw.protocol) {
        (Some(k), _) if *k.get_ref() == 0 => return Err(src.err(Some(k.span()), "params.k", "must be >= 1")),
        (Some(k), _) => *k.get_ref(),
        (None, ProtocolKind::Clustering) => {
            return Err(src.err(None, "params.k", "required when protocol = \"clustering\""))
        }
        (None, ProtocolKind::Leader) => defaults.k,
    };
    let radio_range = match &raw.params.radio_range {
        Some(r) if !(r.get_ref().is_finite() && *r.get_ref() > 0.0) => {
            return Err(src.err(Some(r.span()), "params.radio_range", "must be positive"))
        }
        Some(r) => *r.get_ref(),
        None => defaults.radio_range,
    };
    let world = match &raw.params.world {
        Some(w) => WorldBounds::new(w.get_ref()[0], w.get_ref()[1])
            .map_err(|e| src.err(Some(w.span()), "params.world", e))?,
        None => defaults.world,
    };
    let params = SimParams {
        k,
        radio_range,
        world,
        seed: raw.params.seed.unwrap_or(defaults.seed),
        tick_ms: raw.params.tick_ms.unwrap_or(defaults.tick_ms),
    };
    params.validate().map_err(|e| src.err(None, "params", e))?;
    raw.timing.validate().map_err(|e| src.err(None, "timing", e))?;
    raw.transport.validate().map_err(|e| src.err(None, "transport", e))?;

    let boot = match raw.boot.mode {
        BootKind::AllAtOnce => BootMode::AllAtOnce,
        BootKind::Sequential => BootMode::Sequential {
            delay: raw.boot.delay.unwrap_or(default_boot_delay(&raw.timing, k)),
        },
    };

    let mut agents = Vec::new();
    let mut seen: BTreeMap<u32, (usize, usize)> = BTreeMap::new();
    for (i, a) in raw.agents.iter().enumerate() {
        let span = a.span();
        let a = a.get_ref();
        let uid = *a.uid.get_ref();
        let field = format!("agents[{i}]");
        if let Some(&(j, line)) = seen.get(&uid) {
            return Err(src.err(
                Some(a.uid.span()),
                &format!("{field}.uid"),
                format!("duplicate uid {uid}, also used by agents[{j}] at line {line}"),
            ));
        }
        seen.insert(uid, (i, src.line(&span)));
        let placement = match a.position.get_ref() {
            RawPosition::Xy(xy) => {
                let p = position(*xy);
                if !p.is_finite() || !world.contains(p) {
                    return Err(src.err(
                        Some(a.position.span()),
                        &format!("{field}.position"),
                        format!("({}, {}) is outside the {}x{} world", p.x, p.y, world.width, world.height),
                    ));
                }
                Placement::At(p)
            }
            RawPosition::Word(w) if w.eq_ignore_ascii_case("random") => Placement::Random,
            RawPosition::Word(w) => {
                return Err(src.err(
                    Some(a.position.span()),
                    &format!("{field}.position"),
                    format!("expected [x, y] or \"random\", got {w:?}"),
                ))
            }
        };
        let mobility = a.mobility.unwrap_or_default();
        mobility.validate().map_err(|e| src.err(Some(span.clone()), &format!("{field}.mobility"), e))?;
        let resources = match &a.resources {
            None => Some(ResourceProfile::default()),
            Some(r) => match r.get_ref() {
                RawResources::Profile(p) => {
                    p.validate().map_err(|e| src.err(Some(r.span()), &format!("{field}.resources"), e))?;
                    Some(*p)
                }
                RawResources::Word(w) if w.eq_ignore_ascii_case("random") => None,
                RawResources::Word(w) => {
                    return Err(src.err(
                        Some(r.span()),
                        &format!("{field}.resources"),
                        format!("expected a profile table or \"random\", got {w:?}"),
                    ))
                }
            },
        };
        agents.push(AgentEntry {
            uid: AgentId(uid),
            kind: a.kind.clone().unwrap_or_else(|| "SampleAgent".into()),
            placement,
            mobility,
            resources,
        });
    }

    if let Some(g) = &raw.generate {
        let span = g.span();
        let g = g.get_ref();
        let mobility = g.mobility.unwrap_or_default();
        mobility.validate().map_err(|e| src.err(Some(span.clone()), "generate.mobility", e))?;
        let first = g.first_uid.unwrap_or_else(|| seen.keys().next_back().map_or(0, |m| m + 1));
        for n in 0..g.count {
            let uid = first.checked_add(n).ok_or_else(|| src.err(Some(span.clone()), "generate", "uid overflow"))?;
            if let Some(&(j, line)) = seen.get(&uid) {
                return Err(src.err(
                    Some(span.clone()),
                    "generate",
                    format!("generated uid {uid} collides with agents[{j}] at line {line}"),
                ));
            }
            let placement = match g.step {
                None => Placement::Random,
                Some(step) => {
                    let o = g.origin.unwrap_or([0.0, 0.0]);
                    let p = Position::new(o[0] + f64::from(n) * step[0], o[1] + f64::from(n) * step[1]);
                    if !p.is_finite() || !world.contains(p) {
                        return Err(src.err(
                            Some(span.clone()),
                            "generate.step",
                            format!("agent {n} lands at ({}, {}), outside the world", p.x, p.y),
                        ));
                    }
                    Placement::At(p)
                }
            };
            agents.push(AgentEntry {
                uid: AgentId(uid),
                kind: g.kind.clone().unwrap_or_else(|| "SampleAgent".into()),
                placement,
                mobility,
                resources: None,
            });
        }
    }
    agents.sort_by_key(|a| a.uid);

    let boot_end = match boot {
        BootMode::Sequential { delay } => delay * agents.len().saturating_sub(1) as u64,
        BootMode::AllAtOnce => 0,
    };
    let mut script = Vec::new();
    for (i, s) in raw.script.iter().enumerate() {
        let span = s.span();
        let s = s.get_ref();
        let field = format!("script[{i}]");
        let need_uid =
            || s.uid.map(AgentId).ok_or_else(|| src.err(Some(span.clone()), &format!("{field}.uid"), "required"));
        let need_pos = || {
            let p = s.position.map(position).ok_or_else(|| {
                src.err(Some(span.clone()), &format!("{field}.position"), "required")
            })?;
            if world.contains(p) {
                Ok(p)
            } else {
                Err(src.err(Some(span.clone()), &format!("{field}.position"), "outside the world"))
            }
        };
        let action = match s.action.as_str() {
            "despawn" => Action::Despawn { uid: need_uid()? },
            "move" => Action::Move { uid: need_uid()?, position: need_pos()? },
            "spawn" => {
                let uid = need_uid()?;
                if seen.contains_key(&uid.0) || agents.iter().any(|a| a.uid == uid) {
                    return Err(src.err(Some(span.clone()), &format!("{field}.uid"), format!("uid {uid} already used")));
                }
                let mobility = s.mobility.unwrap_or_default();
                mobility.validate().map_err(|e| src.err(Some(span.clone()), &format!("{field}.mobility"), e))?;
                Action::Spawn(AgentSpec {
                    uid,
                    kind: s.kind.clone().unwrap_or_else(|| "SampleAgent".into()),
                    position: need_pos()?,
                    mobility,
                    resources: s.resources.unwrap_or_default(),
                })
            }
            "set_param" => {
                let key = s.key.as_deref().ok_or_else(|| src.err(Some(span.clone()), &format!("{field}.key"), "required"))?;
                let value = s.value.ok_or_else(|| src.err(Some(span.clone()), &format!("{field}.value"), "required"))?;
                Action::SetParam(
                    ParamChange::parse(key, value).map_err(|e| src.err(Some(span.clone()), &format!("{field}.key"), e))?,
                )
            }
            other => {
                return Err(src.err(
                    Some(span),
                    &format!("{field}.action"),
                    format!("unknown action {other:?}; expected spawn, despawn, move or set_param"),
                ))
            }
        };
        script.push(ScriptStep { at_tick: s.at_tick, action });
    }
    script.sort_by_key(|s| s.at_tick);
    let script_end = script.last().map_or(0, |s| s.at_tick);

    let window_default = match raw.protocol {
        ProtocolKind::Clustering => raw.timing.solicit_timeout + u64::from(k) + 2,
        ProtocolKind::Leader => 2 * (u64::from(raw.timing.beacon_rounds) + raw.timing.heartbeat_timeout),
    };
    let run = RunLimits {
        max_ticks: raw.run.max_ticks.unwrap_or(boot_end.max(script_end) + 1000),
        quiescence_window: raw.run.quiescence_window.unwrap_or(window_default),
    };

    Ok(Scenario {
        name: raw.name,
        protocol: raw.protocol,
        params,
        timing: raw.timing,
        boot,
        transport: raw.transport,
        run,
        agents,
        script,
    })
}

/// Gap between sequential boots: long enough for one agent to finish its
/// solicitation and for the resulting adverts to cover `k` hops.
pub fn default_boot_delay(timing: &ProtocolConfig, k: u32) -> u64 {
    timing.solicit_timeout + u64::from(k) + 3
}

pub fn load_scenario(path: &Path) -> Result<Scenario> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Scenario(format!("{}: {e}", path.display())))?;
    parse_scenario(&text, &path.display().to_string())
}

impl Scenario {
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.params.seed = seed;
        self
    }

    pub fn with_transport(mut self, t: TransportConfig) -> Self {
        self.transport = t;
        self
    }

    pub fn world_config(&self) -> WorldConfig {
        let mut cfg = WorldConfig::new(self.params, self.protocol);
        cfg.protocol_cfg = self.timing;
        cfg.transport = self.transport;
        cfg
    }

    /// Agent specs with random placements and profiles drawn from the seed.
    pub fn resolve_agents(&self) -> Vec<AgentSpec> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.params.seed);
        rng.set_stream(u64::MAX);
        let w = self.params.world;
        self.agents
            .iter()
            .map(|a| {
                let position = match a.placement {
                    Placement::At(p) => p,
                    Placement::Random => Position::new(rng.gen_range(0.0..=w.width), rng.gen_range(0.0..=w.height)),
                };
                let resources = a.resources.unwrap_or_else(|| ResourceProfile {
                    battery: rng.gen_range(0.0..=1.0),
                    cpu_free: rng.gen_range(0.0..=1.0),
                    mem_free: rng.gen_range(0.0..=1.0),
                });
                AgentSpec { uid: a.uid, kind: a.kind.clone(), position, mobility: a.mobility, resources }
            })
            .collect()
    }

    /// Tick at which each resolved agent boots.
    pub fn boot_schedule(&self) -> Vec<(u64, AgentSpec)> {
        self.resolve_agents()
            .into_iter()
            .enumerate()
            .map(|(i, spec)| {
                let at = match self.boot {
                    BootMode::Sequential { delay } => delay * i as u64,
                    BootMode::AllAtOnce => 0,
                };
                (at, spec)
            })
            .collect()
    }

    /// A deterministic world with every boot and script step scheduled.
    pub fn build_world(&self) -> Result<World> {
        let mut world = World::new(self.world_config())?;
        for (at, spec) in self.boot_schedule() {
            world.schedule(at, Action::Spawn(spec));
        }
        for s in &self.script {
            world.schedule(s.at_tick, s.action.clone());
        }
        Ok(world)
    }
}
