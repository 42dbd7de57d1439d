//! Independent oracles shared by the integration tests. Nothing here calls
//! into the simulator's graph code: distances and hop counts are recomputed
//! from raw coordinates.

#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use manetsim::agent::NodeState;
use manetsim::events::{Actor, EventDetail, SimEvent};
use manetsim::model::{AgentId, Role};

pub type Coords = BTreeMap<u32, (f64, f64)>;

pub fn adjacency(coords: &Coords, range: f64) -> BTreeMap<u32, Vec<u32>> {
    let mut adj: BTreeMap<u32, Vec<u32>> = coords.keys().map(|&k| (k, Vec::new())).collect();
    for (&a, &(ax, ay)) in coords {
        for (&b, &(bx, by)) in coords {
            if a != b && (ax - bx) * (ax - bx) + (ay - by) * (ay - by) <= range * range {
                adj.get_mut(&a).unwrap().push(b);
            }
        }
    }
    adj
}

pub fn bfs(adj: &BTreeMap<u32, Vec<u32>>, src: u32) -> BTreeMap<u32, u32> {
    let mut dist = BTreeMap::from([(src, 0)]);
    let mut q = VecDeque::from([src]);
    while let Some(u) = q.pop_front() {
        let d = dist[&u];
        for &v in &adj[&u] {
            if let std::collections::btree_map::Entry::Vacant(e) = dist.entry(v) {
                e.insert(d + 1);
                q.push_back(v);
            }
        }
    }
    dist
}

pub fn components(adj: &BTreeMap<u32, Vec<u32>>) -> Vec<BTreeSet<u32>> {
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for &s in adj.keys() {
        if seen.contains(&s) {
            continue;
        }
        let c: BTreeSet<u32> = bfs(adj, s).into_keys().collect();
        seen.extend(c.iter().copied());
        out.push(c);
    }
    out
}

pub fn coords_of(states: &[NodeState]) -> Coords {
    states.iter().map(|s| (s.id.0, (s.pos.x, s.pos.y))).collect()
}

/// Checks the six quiescent clustering invariants. Returns one line per
/// violation; empty means all hold.
pub fn check_clustering(states: &[NodeState], log: &[SimEvent], k: u32, range: f64) -> Vec<String> {
    let mut bad = Vec::new();
    let coords = coords_of(states);
    let adj = adjacency(&coords, range);
    let roles: BTreeMap<u32, Role> = states.iter().map(|s| (s.id.0, s.role)).collect();
    let heads: BTreeSet<u32> = roles.iter().filter(|(_, &r)| r == Role::Head).map(|(&i, _)| i).collect();

    for s in states {
        let me = s.id.0;
        let dist = bfs(&adj, me);
        let near = heads.iter().filter(|h| **h != me && dist.get(h).is_some_and(|&d| d <= k)).count();
        match s.role {
            Role::Member if near != 1 => bad.push(format!("member {me} sees {near} heads within {k}")),
            Role::Gateway if near < 2 => bad.push(format!("gateway {me} sees {near} heads within {k}")),
            Role::Unassigned => bad.push(format!("{me} is unassigned")),
            Role::Leader | Role::Client => bad.push(format!("{me} has cloud role {:?}", s.role)),
            _ => {}
        }
        if s.role != Role::Head {
            match s.affiliation() {
                Some(h) if heads.contains(&h.0) => {}
                other => bad.push(format!("{me} affiliated with {other:?}, not a live head")),
            }
        }
    }
    for c in components(&adj) {
        if !c.iter().any(|n| heads.contains(n)) {
            bad.push(format!("component starting at {:?} has no head", c.iter().next()));
        }
    }
    bad.extend(check_head_assumptions(log, k));
    for e in log {
        if let EventDetail::MsgSent { variant, hops: Some(h), .. } = &e.detail {
            if variant == "HEAD_ADVERT" && *h > k {
                bad.push(format!("seq {}: HEAD_ADVERT with hops {h} > {k}", e.seq));
            }
        }
    }
    bad
}

/// Replays the log and checks that each HEAD had no other head within `k`
/// hops of the topology in force when it took the role.
pub fn check_head_assumptions(log: &[SimEvent], k: u32) -> Vec<String> {
    let mut bad = Vec::new();
    let mut coords: Coords = BTreeMap::new();
    let mut range = f64::NAN;
    let mut heads: BTreeSet<u32> = BTreeSet::new();
    for e in log {
        match (&e.detail, e.actor) {
            (EventDetail::Spawn { position, .. }, Actor::Agent(a)) => {
                coords.insert(a.0, (position.x, position.y));
            }
            (EventDetail::Despawn { .. }, Actor::Agent(a)) => {
                coords.remove(&a.0);
                heads.remove(&a.0);
            }
            (EventDetail::TopologyChange { radio_range, moved, .. }, _) => {
                range = *radio_range;
                for m in moved {
                    coords.insert(m.uid.0, (m.x, m.y));
                }
            }
            (EventDetail::RoleChange { from, to, .. }, Actor::Agent(a)) => {
                if *from == Role::Head {
                    heads.remove(&a.0);
                }
                if *to == Role::Head {
                    let dist = bfs(&adjacency(&coords, range), a.0);
                    for h in &heads {
                        if let Some(d) = dist.get(h) {
                            if *d <= k {
                                bad.push(format!("seq {}: {} became head with head {h} at {d} hops", e.seq, a.0));
                            }
                        }
                    }
                    heads.insert(a.0);
                }
            }
            _ => {}
        }
    }
    bad
}

/// Every ROLE_CHANGE starts from the role the agent last had and follows a
/// transition the protocol can make.
pub fn check_transitions(log: &[SimEvent]) -> Vec<String> {
    use Role::*;
    let mut bad = Vec::new();
    let mut role: BTreeMap<u32, Role> = BTreeMap::new();
    for e in log {
        match (&e.detail, e.actor) {
            (EventDetail::Spawn { .. }, Actor::Agent(a)) => {
                role.insert(a.0, Unassigned);
            }
            (EventDetail::RoleChange { from, to, .. }, Actor::Agent(a)) => {
                let cur = role.get(&a.0).copied();
                if cur != Some(*from) {
                    bad.push(format!("seq {}: {} changes from {from:?} but was {cur:?}", e.seq, a.0));
                }
                let ok = matches!(
                    (*from, *to),
                    (Unassigned, Head | Member | Gateway | Leader | Client)
                        | (Member | Gateway, Member | Gateway | Unassigned)
                        | (Client, Client | Unassigned)
                        | (Leader, Client)
                );
                if !ok {
                    bad.push(format!("seq {}: {} made illegal move {from:?} -> {to:?}", e.seq, a.0));
                }
                role.insert(a.0, *to);
            }
            _ => {}
        }
    }
    bad
}

/// Resource score under the default weights, recomputed from the profile.
pub fn oracle_score(s: &NodeState) -> f64 {
    0.5 * s.resources.battery + 0.25 * s.resources.cpu_free + 0.25 * s.resources.mem_free
}

/// Per component, the node with the highest oracle score; ties go to the
/// lowest uid.
pub fn component_argmax(states: &[NodeState], range: f64) -> Vec<(BTreeSet<u32>, u32)> {
    let adj = adjacency(&coords_of(states), range);
    let by_id: BTreeMap<u32, &NodeState> = states.iter().map(|s| (s.id.0, s)).collect();
    components(&adj)
        .into_iter()
        .map(|c| {
            let mut best: Option<(u32, f64)> = None;
            for &n in &c {
                let s = oracle_score(by_id[&n]);
                if best.is_none_or(|(_, bs)| s > bs) {
                    best = Some((n, s));
                }
            }
            let want = best.unwrap().0;
            (c, want)
        })
        .collect()
}

/// Leader oracle: per component, exactly one LEADER and it is the argmax
/// of score with lowest-uid tiebreak; clients follow their component's leader.
pub fn check_leaders(states: &[NodeState], range: f64) -> Vec<String> {
    let mut bad = Vec::new();
    let by_id: BTreeMap<u32, &NodeState> = states.iter().map(|s| (s.id.0, s)).collect();
    for (c, want) in component_argmax(states, range) {
        let leaders: Vec<u32> = c.iter().copied().filter(|n| by_id[n].role == Role::Leader).collect();
        if leaders != vec![want] {
            bad.push(format!("component {:?}: leaders {leaders:?}, argmax {want}", c.iter().next()));
        }
        for &n in &c {
            let s = by_id[&n];
            if n != want && (s.role != Role::Client || s.affiliation() != Some(AgentId(want))) {
                bad.push(format!("{n}: {:?} following {:?}, expected client of {want}", s.role, s.affiliation()));
            }
        }
    }
    bad
}

/// No datagram was delivered between agents that were in different
/// components of the topology in force at the time.
pub fn check_no_cross_partition(log: &[SimEvent]) -> Vec<String> {
    let mut bad = Vec::new();
    let mut coords: Coords = BTreeMap::new();
    let mut range = f64::NAN;
    let mut comp: BTreeMap<u32, usize> = BTreeMap::new();
    let mut dirty = true;
    for e in log {
        match (&e.detail, e.actor) {
            (EventDetail::Spawn { position, .. }, Actor::Agent(a)) => {
                coords.insert(a.0, (position.x, position.y));
            }
            (EventDetail::Despawn { .. }, Actor::Agent(a)) => {
                coords.remove(&a.0);
            }
            (EventDetail::TopologyChange { radio_range, moved, .. }, _) => {
                range = *radio_range;
                for m in moved {
                    coords.insert(m.uid.0, (m.x, m.y));
                }
                dirty = true;
            }
            (EventDetail::MsgSent { dst, .. }, Actor::Agent(a)) => {
                if dirty {
                    comp = components(&adjacency(&coords, range))
                        .into_iter()
                        .enumerate()
                        .flat_map(|(i, c)| c.into_iter().map(move |n| (n, i)))
                        .collect();
                    dirty = false;
                }
                if comp.get(&a.0) != comp.get(&dst.0) {
                    bad.push(format!("seq {}: {} sent across a partition to {}", e.seq, a.0, dst.0));
                }
            }
            _ => {}
        }
    }
    bad
}
