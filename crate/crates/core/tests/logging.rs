mod common;

use std::collections::BTreeMap;
use std::path::Path;
use std::thread;

use manetsim::events::{parse_jsonl, Actor, EventDetail, EventKind, EventLog};
use manetsim::metrics::{compute_metrics, replay, NodeSummary};
use manetsim::model::Role;
use manetsim::scenario::{load_scenario, Scenario};

fn bundled(name: &str) -> Scenario {
    load_scenario(&Path::new(env!("CARGO_MANIFEST_DIR")).join(format!("../../scenarios/{name}.toml"))).unwrap()
}

const ALL: [&str; 7] =
    ["fig6-k3", "cloud-demo", "staircase-50", "random-50", "mobile-waypoint", "partitioned-leader", "leader-reelection"];

#[test]
fn metrics_match_state_scan_for_fifty_nodes_seed_42() {
    let s = bundled("random-50");
    assert_eq!(s.params.seed, 42);
    let mut w = s.build_world().unwrap();
    let out = w.run(s.run.max_ticks, s.run.quiescence_window).unwrap();
    assert!(out.converged);
    let states = w.states();
    let log = w.log().events();
    let nodes: Vec<NodeSummary> = states.iter().map(NodeSummary::from).collect();
    let m = compute_metrics(&log, &nodes, Some(out.converged));

    let heads: Vec<u32> = states.iter().filter(|s| s.role == Role::Head).map(|s| s.id.0).collect();
    let mut sizes: BTreeMap<u32, usize> = heads.iter().map(|&h| (h, 1)).collect();
    for st in states.iter().filter(|s| s.role == Role::Member) {
        *sizes.get_mut(&st.affiliation().unwrap().0).unwrap() += 1;
    }
    let mut hist = BTreeMap::new();
    for &n in sizes.values() {
        *hist.entry(n).or_insert(0) += 1;
    }
    let last_change = log
        .iter()
        .filter(|e| matches!(e.detail, EventDetail::RoleChange { .. }))
        .map(|e| e.time)
        .fold(None, |a: Option<u64>, t| Some(a.map_or(t, |a| a.max(t))));
    let sent = log.iter().filter(|e| matches!(e.detail, EventDetail::MsgSent { .. })).count() as u64;
    let gateways = states.iter().filter(|s| s.role == Role::Gateway).count();

    assert_eq!(m.node_count, 50);
    assert_eq!(m.cluster_count, heads.len());
    assert_eq!(m.cluster_sizes, hist);
    assert_eq!(m.gateway_count, gateways);
    assert_eq!(m.convergence_tick, last_change);
    assert_eq!(m.messages_total, sent);
    assert_eq!(m.unassigned_count, 0);
    let in_clusters: usize = m.cluster_sizes.iter().map(|(s, c)| s * c).sum();
    assert_eq!(in_clusters + m.gateway_count, m.node_count);
    let comps = common::components(&common::adjacency(&common::coords_of(&states), s.params.radio_range));
    assert_eq!(m.components.len(), comps.len());
}

#[test]
fn replay_rebuilds_final_nodes_for_every_bundled_scenario() {
    for name in ALL {
        let s = bundled(name);
        let mut w = s.build_world().unwrap();
        w.run(s.run.max_ticks, s.run.quiescence_window).unwrap();
        let live: Vec<NodeSummary> = w.states().iter().map(NodeSummary::from).collect();
        assert_eq!(replay(&w.log().events()), live, "{name}");
    }
}

#[test]
fn every_role_change_is_a_legal_transition() {
    for name in ALL {
        let s = bundled(name);
        let mut w = s.build_world().unwrap();
        w.run(s.run.max_ticks, s.run.quiescence_window).unwrap();
        let bad = common::check_transitions(&w.log().events());
        assert!(bad.is_empty(), "{name}: {bad:?}");
    }
}

#[test]
fn persisted_log_parses_back_to_the_same_events() {
    let s = bundled("cloud-demo");
    let mut w = s.build_world().unwrap();
    w.run(s.run.max_ticks, s.run.quiescence_window).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("events.jsonl");
    w.log().write_jsonl(&path).unwrap();
    let back = parse_jsonl(&std::fs::read_to_string(&path).unwrap()).unwrap();
    assert_eq!(back, w.log().events());
}

#[test]
fn concurrent_emitters_get_unique_contiguous_seqs() {
    let log = EventLog::with_memory_limit(1000);
    let handles: Vec<_> = (0..8u32)
        .map(|t| {
            let log = log.clone();
            thread::spawn(move || {
                for i in 0..1250u64 {
                    log.emit(i, Actor::Agent(t.into()), EventDetail::Despawn { reason: "stress".into() });
                }
            })
        })
        .collect();
    for h in handles {
        h.join().unwrap();
    }
    let events = log.events();
    assert_eq!(events.len(), 10_000);
    assert!(log.spilled() > 0);
    for (i, e) in events.iter().enumerate() {
        assert_eq!(e.seq, i as u64);
        assert_eq!(e.kind(), EventKind::Despawn);
    }
}
