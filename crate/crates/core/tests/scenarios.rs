mod common;

use std::path::{Path, PathBuf};

use manetsim::headless::{run_headless, FinalState, EVENTS_FILE, FINAL_STATE_FILE, METRICS_FILE};
use manetsim::metrics::RunMetrics;
use manetsim::model::Role;
use manetsim::protocol::ProtocolKind;
use manetsim::scenario::{load_scenario, parse_scenario, BootMode};

fn dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios")
}

#[test]
fn every_bundled_scenario_loads() {
    let mut n = 0;
    for e in std::fs::read_dir(dir()).unwrap() {
        let p = e.unwrap().path();
        let s = load_scenario(&p).unwrap_or_else(|e| panic!("{}: {e}", p.display()));
        assert_eq!(p.file_stem().unwrap().to_str().unwrap(), s.name);
        n += 1;
    }
    assert!(n >= 7);
}

#[test]
fn fig6_scenario_is_clustering_with_k3() {
    let s = load_scenario(&dir().join("fig6-k3.toml")).unwrap();
    assert_eq!(s.protocol, ProtocolKind::Clustering);
    assert_eq!(s.params.k, 3);
    assert!(matches!(s.boot, BootMode::Sequential { .. }));
}

#[test]
fn staircase_places_each_agent_ten_right_five_up() {
    let s = load_scenario(&dir().join("staircase-50.toml")).unwrap();
    let specs = s.resolve_agents();
    assert_eq!(specs.len(), 50);
    for w in specs.windows(2) {
        assert_eq!(w[1].position.x - w[0].position.x, 10.0);
        assert_eq!(w[1].position.y - w[0].position.y, 5.0);
    }
}

#[test]
fn single_agent_headless_run_heads_by_solicit_timeout() {
    let s = parse_scenario("name = \"one\"\nprotocol = \"clustering\"\n[params]\nk = 2\n[[agents]]\nuid = 0\nposition = [5.0, 5.0]\n", "one").unwrap();
    let out = tempfile::tempdir().unwrap();
    let r = run_headless(&s, out.path()).unwrap();
    assert!(r.outcome.converged);
    assert!(r.metrics.convergence_tick.unwrap() <= s.timing.solicit_timeout + 1);
    assert_eq!(r.metrics.cluster_count, 1);
    assert_eq!(r.final_state.nodes[0].role, Role::Head);
    let metrics: RunMetrics = serde_json::from_str(&std::fs::read_to_string(out.path().join(METRICS_FILE)).unwrap()).unwrap();
    assert_eq!(metrics, r.metrics);
    let fs: FinalState = serde_json::from_str(&std::fs::read_to_string(out.path().join(FINAL_STATE_FILE)).unwrap()).unwrap();
    assert_eq!(fs, r.final_state);
}

#[test]
fn headless_logs_are_byte_identical_across_runs() {
    let s = load_scenario(&dir().join("fig6-k3.toml")).unwrap();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    run_headless(&s, a.path()).unwrap();
    run_headless(&s, b.path()).unwrap();
    let read = |d: &Path| std::fs::read(d.join(EVENTS_FILE)).unwrap();
    assert_eq!(read(a.path()), read(b.path()));
}

#[test]
fn seed_override_changes_random_placement() {
    let s = load_scenario(&dir().join("random-50.toml")).unwrap();
    let a = s.resolve_agents();
    let b = s.clone().with_seed(43).resolve_agents();
    assert_ne!(a, b);
}

#[test]
fn fifty_agent_headless_run_passes_invariants() {
    let s = load_scenario(&dir().join("random-50.toml")).unwrap();
    let out = tempfile::tempdir().unwrap();
    let r = run_headless(&s, out.path()).unwrap();
    assert!(r.outcome.converged);
    let events = manetsim::events::parse_jsonl(&std::fs::read_to_string(&r.events_path).unwrap()).unwrap();
    let bad = common::check_clustering(&r.final_state.nodes, &events, s.params.k, s.params.radio_range);
    assert!(bad.is_empty(), "{bad:?}");
}

#[test]
fn non_converged_run_still_writes_outputs() {
    let s = load_scenario(&dir().join("mobile-waypoint.toml")).unwrap();
    let out = tempfile::tempdir().unwrap();
    let r = run_headless(&s, out.path()).unwrap();
    assert!(!r.outcome.converged);
    assert_eq!(r.metrics.converged, Some(false));
    for f in [EVENTS_FILE, METRICS_FILE, FINAL_STATE_FILE] {
        assert!(out.path().join(f).exists(), "{f}");
    }
}

#[test]
fn diagnostics_name_line_and_field() {
    let text = "name = \"bad\"\nprotocol = \"clustering\"\n[params]\nk = 2\nworld = [50.0, 50.0]\n\
                [[agents]]\nuid = 1\nposition = [80.0, 10.0]\n";
    let e = parse_scenario(text, "bad.toml").unwrap_err().to_string();
    assert!(e.starts_with("bad.toml:8: agents[0].position:"), "{e}");

    let e = parse_scenario("name = \"x\"\nprotocol = \"clustering\"\n", "x.toml").unwrap_err().to_string();
    assert!(e.contains("params.k"), "{e}");

    let e = parse_scenario("name = \"x\"\nprotocol = \"leader\"\ncolour = 1\n", "x.toml").unwrap_err().to_string();
    assert!(e.starts_with("x.toml:3:"), "{e}");
}

#[test]
fn final_state_file_round_trips_for_both_protocols() {
    for name in ["fig6-k3", "cloud-demo"] {
        let s = load_scenario(&dir().join(format!("{name}.toml"))).unwrap();
        let out = tempfile::tempdir().unwrap();
        let report = run_headless(&s, out.path()).unwrap();
        let text = std::fs::read_to_string(out.path().join(FINAL_STATE_FILE)).unwrap();
        let back: FinalState = serde_json::from_str(&text).unwrap();
        assert_eq!(back, report.final_state, "{name}");
    }
}
