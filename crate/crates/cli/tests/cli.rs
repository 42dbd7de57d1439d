use std::fs;
use std::path::PathBuf;
use std::process::{Command, Output};

use manetsim::headless::{FinalState, EVENTS_FILE, FINAL_STATE_FILE, METRICS_FILE};
use manetsim::metrics::RunMetrics;

fn bin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_manetsim")).args(args).output().unwrap()
}

fn scenario(name: &str) -> String {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../scenarios").join(name).display().to_string()
}

#[test]
fn run_writes_outputs_and_exits_zero_on_convergence() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("r");
    let o = bin(&["run", &scenario("fig6-k3.toml"), "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stdout).starts_with("converged"));
    let m: RunMetrics = serde_json::from_str(&fs::read_to_string(out.join(METRICS_FILE)).unwrap()).unwrap();
    let f: FinalState = serde_json::from_str(&fs::read_to_string(out.join(FINAL_STATE_FILE)).unwrap()).unwrap();
    assert_eq!(m.node_count, 30);
    assert_eq!(f.nodes.len(), 30);
    assert!(f.converged);
}

#[test]
fn seed_override_changes_random_layout_and_replay_matches() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let s = scenario("random-50.toml");
    assert_eq!(bin(&["run", &s, "--out", a.to_str().unwrap()]).status.code(), Some(0));
    assert_eq!(bin(&["run", &s, "--seed", "7", "--out", b.to_str().unwrap()]).status.code(), Some(0));
    assert_ne!(fs::read(a.join(EVENTS_FILE)).unwrap(), fs::read(b.join(EVENTS_FILE)).unwrap());

    let o = bin(&["replay", a.join(EVENTS_FILE).to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0));
    let replayed: RunMetrics = serde_json::from_slice(&o.stdout).unwrap();
    let recorded: RunMetrics = serde_json::from_str(&fs::read_to_string(a.join(METRICS_FILE)).unwrap()).unwrap();
    assert_eq!(replayed.cluster_sizes, recorded.cluster_sizes);
    assert_eq!(replayed.convergence_tick, recorded.convergence_tick);
    assert_eq!(replayed.messages_total, recorded.messages_total);
}

#[test]
fn non_convergence_exits_two_and_keeps_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let text = fs::read_to_string(scenario("mobile-waypoint.toml")).unwrap().replace("max_ticks = 600", "max_ticks = 5");
    let path = dir.path().join("short.toml");
    fs::write(&path, text).unwrap();
    let out = dir.path().join("o");
    let o = bin(&["run", path.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(out.join(EVENTS_FILE).exists());
    assert!(out.join(FINAL_STATE_FILE).exists());
}

#[test]
fn usage_and_config_errors_exit_one() {
    assert_eq!(bin(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(bin(&["run"]).status.code(), Some(1));
    assert_eq!(bin(&["run", "/nonexistent.toml"]).status.code(), Some(1));
    assert_eq!(bin(&["--help"]).status.code(), Some(0));
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("dup.toml");
    fs::write(
        &bad,
        "schema = 1\nname = \"dup\"\nprotocol = \"clustering\"\n[params]\nk = 1\n\
         [[agents]]\nuid = 1\nposition = [1.0, 1.0]\n[[agents]]\nuid = 1\nposition = [2.0, 2.0]\n",
    )
    .unwrap();
    let o = bin(&["validate", &scenario("fig6-k3.toml"), bad.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stdout).contains("fig6-k3"));
    assert!(String::from_utf8_lossy(&o.stderr).contains("dup.toml"), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn validate_accepts_every_bundled_scenario() {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../scenarios");
    let mut args = vec!["validate".to_owned()];
    for e in fs::read_dir(dir).unwrap() {
        args.push(e.unwrap().path().display().to_string());
    }
    let o = Command::new(env!("CARGO_BIN_EXE_manetsim")).args(&args).output().unwrap();
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(String::from_utf8_lossy(&o.stdout).lines().count(), args.len() - 1);
}

#[test]
fn realtime_run_writes_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("rt");
    let o = bin(&["run", &scenario("leader-reelection.toml"), "--realtime", "--out", out.to_str().unwrap()]);
    assert!(matches!(o.status.code(), Some(0 | 2)), "{}", String::from_utf8_lossy(&o.stderr));
    let f: FinalState = serde_json::from_str(&fs::read_to_string(out.join(FINAL_STATE_FILE)).unwrap()).unwrap();
    assert_eq!(f.nodes.len(), 4);
}

#[test]
fn serve_prints_address_and_streams_a_snapshot() {
    use std::io::{BufRead, BufReader};
    use std::process::Stdio;
    use std::time::Duration;

    use manetsim::control::{ControlClient, ServerMessage};

    let mut child = Command::new(env!("CARGO_BIN_EXE_manetsim"))
        .args(["serve", &scenario("cloud-demo.toml"), "--port", "0"])
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    let mut line = String::new();
    BufReader::new(child.stdout.take().unwrap()).read_line(&mut line).unwrap();
    let addr = line.trim().rsplit(' ').next().unwrap().parse().unwrap();
    let mut c = ControlClient::connect(addr).unwrap();
    let frame = c.recv(Duration::from_secs(10)).unwrap();
    child.kill().unwrap();
    child.wait().unwrap();
    let ServerMessage::Snapshot(s) = frame.msg else { panic!("{frame:?}") };
    assert_eq!(s.tick, 0);
}
