//! Batch runs: a scenario in, an event log, metrics and final states out.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::agent::NodeState;
use crate::error::Result;
use crate::events::EventLog;
use crate::metrics::{compute_metrics, NodeSummary, RunMetrics};
use crate::scenario::Scenario;
use crate::world::RunOutcome;

pub const EVENTS_FILE: &str = "events.jsonl";
pub const METRICS_FILE: &str = "metrics.json";
pub const FINAL_STATE_FILE: &str = "final_state.json";

/// Contents of `final_state.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalState {
    pub scenario: String,
    pub tick: u64,
    pub converged: bool,
    pub nodes: Vec<NodeState>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadlessReport {
    pub outcome: RunOutcome,
    pub metrics: RunMetrics,
    pub final_state: FinalState,
    pub events_path: PathBuf,
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

/// Runs the scenario in deterministic mode until quiescence or `max_ticks`
/// and writes the three output files into `out_dir`. A run that fails
/// mid-way still writes the log gathered so far before returning the error.
pub fn run_headless(scenario: &Scenario, out_dir: &Path) -> Result<HeadlessReport> {
    fs::create_dir_all(out_dir)?;
    let mut world = scenario.build_world()?;
    let run = world.run(scenario.run.max_ticks, scenario.run.quiescence_window);
    if run.is_err() {
        world.log().write_jsonl(&out_dir.join(EVENTS_FILE))?;
    }
    write_outputs(&scenario.name, run?, world.states(), world.log(), out_dir)
}

/// Writes the event log, metrics and final states of a finished run.
pub fn write_outputs(
    name: &str,
    outcome: RunOutcome,
    nodes: Vec<NodeState>,
    log: &EventLog,
    out_dir: &Path,
) -> Result<HeadlessReport> {
    fs::create_dir_all(out_dir)?;
    let events_path = out_dir.join(EVENTS_FILE);
    log.write_jsonl(&events_path)?;
    let summaries: Vec<NodeSummary> = nodes.iter().map(NodeSummary::from).collect();
    let metrics = compute_metrics(&log.events(), &summaries, Some(outcome.converged));
    let final_state = FinalState { scenario: name.to_owned(), tick: outcome.final_tick, converged: outcome.converged, nodes };
    write_json(&out_dir.join(METRICS_FILE), &metrics)?;
    write_json(&out_dir.join(FINAL_STATE_FILE), &final_state)?;
    Ok(HeadlessReport { outcome, metrics, final_state, events_path })
}
