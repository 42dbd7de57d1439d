//! `manetsim` command-line entry point.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use clap::{Parser, Subcommand};
use manetsim::control::{serve_control, ServeOptions};
use manetsim::events::parse_jsonl;
use manetsim::headless::{run_headless, write_outputs, HeadlessReport};
use manetsim::metrics::replay_metrics;
use manetsim::realtime::{run_realtime, RealtimeOptions};
use manetsim::scenario::{load_scenario, Scenario};
use manetsim::world::RunOutcome;

const EXIT_CONVERGED: u8 = 0;
const EXIT_ERROR: u8 = 1;
const EXIT_NOT_CONVERGED: u8 = 2;

#[derive(Parser)]
#[command(name = "manetsim", version, about = "Agent-based MANET clustering and leader election simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario to quiescence and write events, metrics and final states.
    Run {
        scenario: PathBuf,
        /// Override the scenario seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory.
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Thread-per-agent mode paced by `tick_ms` instead of the deterministic scheduler.
        #[arg(long)]
        realtime: bool,
    },
    /// Serve a scenario on the control stream.
    Serve {
        scenario: PathBuf,
        #[arg(long, default_value_t = 7400)]
        port: u16,
        /// Override the scenario seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Start ticking immediately instead of waiting for START.
        #[arg(long)]
        running: bool,
    },
    /// Recompute metrics from an event log.
    Replay {
        events: PathBuf,
        /// Write the metrics here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check scenario files without running them.
    Validate {
        #[arg(required = true)]
        scenarios: Vec<PathBuf>,
    },
}

type CliResult = Result<u8, String>;

fn load(path: &Path, seed: Option<u64>) -> Result<Scenario, String> {
    let s = load_scenario(path).map_err(|e| e.to_string())?;
    Ok(match seed {
        Some(seed) => s.with_seed(seed),
        None => s,
    })
}

fn summarize(report: &HeadlessReport) -> u8 {
    let m = &report.metrics;
    println!(
        "{} after {} ticks: {} nodes, {} clusters, {} leaders, {} messages",
        if report.outcome.converged { "converged" } else { "not converged" },
        report.outcome.final_tick,
        m.node_count,
        m.cluster_count,
        m.leader_count,
        m.messages_total,
    );
    println!("outputs in {}", report.events_path.parent().unwrap_or(Path::new(".")).display());
    if report.outcome.converged {
        EXIT_CONVERGED
    } else {
        EXIT_NOT_CONVERGED
    }
}

fn run(path: &Path, seed: Option<u64>, out: &Path, realtime: bool) -> CliResult {
    let scenario = load(path, seed)?;
    let report = if realtime {
        let tick = Duration::from_millis(scenario.params.tick_ms);
        let limit = tick * u32::try_from(scenario.run.max_ticks).unwrap_or(u32::MAX);
        let rt = run_realtime(&scenario, RealtimeOptions::new(tick, limit)).map_err(|e| e.to_string())?;
        let outcome = RunOutcome { converged: rt.converged, ticks: rt.final_tick, final_tick: rt.final_tick };
        write_outputs(&scenario.name, outcome, rt.states, &rt.log, out)
    } else {
        run_headless(&scenario, out)
    };
    report.map(|r| summarize(&r)).map_err(|e| e.to_string())
}

fn serve(path: &Path, port: u16, seed: Option<u64>, running: bool) -> CliResult {
    let scenario = load(path, seed)?;
    let world = scenario.build_world().map_err(|e| e.to_string())?;
    let server = serve_control(world, port, ServeOptions { running, ..ServeOptions::default() }).map_err(|e| e.to_string())?;
    println!("serving {} on {}", scenario.name, server.local_addr());
    let (world, err) = server.join().map_err(|e| e.to_string())?;
    if let Some(err) = err {
        return Err(err);
    }
    println!("stopped at tick {}", world.now());
    Ok(EXIT_CONVERGED)
}

fn replay(events: &Path, out: Option<&Path>) -> CliResult {
    let text = fs::read_to_string(events).map_err(|e| format!("{}: {e}", events.display()))?;
    let log = parse_jsonl(&text).map_err(|e| format!("{}: {e}", events.display()))?;
    let mut json = serde_json::to_string_pretty(&replay_metrics(&log)).map_err(|e| e.to_string())?;
    json.push('\n');
    match out {
        Some(p) => fs::write(p, json).map_err(|e| format!("{}: {e}", p.display()))?,
        None => std::io::stdout().write_all(json.as_bytes()).map_err(|e| e.to_string())?,
    }
    Ok(EXIT_CONVERGED)
}

fn validate(paths: &[PathBuf]) -> CliResult {
    let mut bad = 0;
    for p in paths {
        match load_scenario(p).and_then(|s| s.build_world().map(|_| s)) {
            Ok(s) => println!("ok {}: {} ({:?}, {} agents)", p.display(), s.name, s.protocol, s.agents.len()),
            Err(e) => {
                eprintln!("{e}");
                bad += 1;
            }
        }
    }
    if bad == 0 {
        Ok(EXIT_CONVERGED)
    } else {
        Err(format!("{bad} of {} scenarios invalid", paths.len()))
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_ERROR } else { EXIT_CONVERGED });
        }
    };
    let result = match &cli.command {
        Command::Run { scenario, seed, out, realtime } => run(scenario, *seed, out, *realtime),
        Command::Serve { scenario, port, seed, running } => serve(scenario, *port, *seed, *running),
        Command::Replay { events, out } => replay(events, out.as_deref()),
        Command::Validate { scenarios } => validate(scenarios),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(msg) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_ERROR)
        }
    }
}
