//! Shared domain types and the pure geometric / graph computations every
//! other module builds on. Everything here is an immutable value.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Unique identity of one agent within a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AgentId(pub u32);

impl AgentId {
    pub fn uid(self) -> u32 {
        self.0
    }
}

impl fmt::Display for AgentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl From<u32> for AgentId {
    fn from(uid: u32) -> Self {
        AgentId(uid)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Position {
    pub x: f64,
    pub y: f64,
}

impl Position {
    pub const fn new(x: f64, y: f64) -> Self {
        Position { x, y }
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }
}

/// The rectangle `[0, width] x [0, height]` that confines every node.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WorldBounds {
    pub width: f64,
    pub height: f64,
}

impl WorldBounds {
    pub fn new(width: f64, height: f64) -> Result<Self> {
        if !(width.is_finite() && height.is_finite() && width > 0.0 && height > 0.0) {
            return Err(Error::Param(format!(
                "world must have positive finite extent, got {width}x{height}"
            )));
        }
        Ok(WorldBounds { width, height })
    }

    pub fn contains(&self, p: Position) -> bool {
        p.is_finite() && (0.0..=self.width).contains(&p.x) && (0.0..=self.height).contains(&p.y)
    }

    pub fn clamp(&self, p: Position) -> Position {
        Position::new(p.x.clamp(0.0, self.width), p.y.clamp(0.0, self.height))
    }
}

/// Role an agent currently plays in its protocol.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Role {
    #[default]
    Unassigned,
    Head,
    Member,
    Gateway,
    Leader,
    Client,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::Unassigned => "UNASSIGNED",
            Role::Head => "HEAD",
            Role::Member => "MEMBER",
            Role::Gateway => "GATEWAY",
            Role::Leader => "LEADER",
            Role::Client => "CLIENT",
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Shortest-path length, with an explicit sentinel for partitions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Hops {
    Finite(u32),
    Unreachable,
}

impl Hops {
    pub fn finite(self) -> Option<u32> {
        match self {
            Hops::Finite(h) => Some(h),
            Hops::Unreachable => None,
        }
    }

    pub fn is_reachable(self) -> bool {
        matches!(self, Hops::Finite(_))
    }

    /// True when reachable in at most `k` hops.
    pub fn within(self, k: u32) -> bool {
        matches!(self, Hops::Finite(h) if h <= k)
    }
}

impl fmt::Display for Hops {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Hops::Finite(h) => write!(f, "{h}"),
            Hops::Unreachable => f.write_str("UNREACHABLE"),
        }
    }
}

/// Simulation-wide parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimParams {
    /// Maximum hops between a cluster member and its head.
    pub k: u32,
    pub radio_range: f64,
    pub world: WorldBounds,
    pub seed: u64,
    /// Timer period for real-time mode.
    pub tick_ms: u64,
}

impl SimParams {
    pub fn validate(&self) -> Result<()> {
        if self.k < 1 {
            return Err(Error::Param("k must be >= 1".into()));
        }
        check_range(self.radio_range)?;
        WorldBounds::new(self.world.width, self.world.height)?;
        if self.tick_ms == 0 {
            return Err(Error::Param("tick_ms must be positive".into()));
        }
        Ok(())
    }
}

impl Default for SimParams {
    fn default() -> Self {
        SimParams {
            k: 2,
            radio_range: 25.0,
            world: WorldBounds { width: 100.0, height: 100.0 },
            seed: 0,
            tick_ms: 100,
        }
    }
}

fn check_range(radio_range: f64) -> Result<()> {
    if radio_range.is_finite() && radio_range > 0.0 {
        Ok(())
    } else {
        Err(Error::Param(format!("radio_range must be positive, got {radio_range}")))
    }
}

pub fn euclidean_distance(a: Position, b: Position) -> f64 {
    (a.x - b.x).hypot(a.y - b.y)
}

/// Hands out strictly increasing snapshot versions for one run.
#[derive(Debug, Clone, Default)]
pub struct VersionClock {
    last: Option<u64>,
}

impl VersionClock {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn next_version(&mut self) -> u64 {
        let v = self.last.map_or(0, |v| v + 1);
        self.last = Some(v);
        v
    }

    pub fn current(&self) -> Option<u64> {
        self.last
    }
}

/// Immutable view of node positions and the unit-disk neighbor relation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopologySnapshot {
    pub version: u64,
    pub radio_range: f64,
    positions: BTreeMap<AgentId, Position>,
    adjacency: BTreeMap<AgentId, BTreeSet<AgentId>>,
}

/// Builds the unit-disk snapshot: `a ~ b` iff `a != b` and their distance is
/// at most `radio_range` (boundary inclusive).
pub fn build_adjacency(
    clock: &mut VersionClock,
    positions: &BTreeMap<AgentId, Position>,
    radio_range: f64,
) -> Result<TopologySnapshot> {
    check_range(radio_range)?;
    if let Some((id, _)) = positions.iter().find(|(_, p)| !p.is_finite()) {
        return Err(Error::Param(format!("agent {id} has a non-finite position")));
    }
    let ids: Vec<_> = positions.keys().copied().collect();
    let mut adjacency: BTreeMap<AgentId, BTreeSet<AgentId>> =
        ids.iter().map(|&id| (id, BTreeSet::new())).collect();
    for (i, &a) in ids.iter().enumerate() {
        for &b in &ids[i + 1..] {
            if euclidean_distance(positions[&a], positions[&b]) <= radio_range {
                adjacency.get_mut(&a).unwrap().insert(b);
                adjacency.get_mut(&b).unwrap().insert(a);
            }
        }
    }
    Ok(TopologySnapshot {
        version: clock.next_version(),
        radio_range,
        positions: positions.clone(),
        adjacency,
    })
}

impl TopologySnapshot {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn contains(&self, id: AgentId) -> bool {
        self.positions.contains_key(&id)
    }

    pub fn ids(&self) -> impl Iterator<Item = AgentId> + '_ {
        self.positions.keys().copied()
    }

    pub fn positions(&self) -> &BTreeMap<AgentId, Position> {
        &self.positions
    }

    pub fn position(&self, id: AgentId) -> Result<Position> {
        self.positions.get(&id).copied().ok_or(Error::Lookup(id))
    }

    pub fn neighbors(&self, id: AgentId) -> Result<&BTreeSet<AgentId>> {
        self.adjacency.get(&id).ok_or(Error::Lookup(id))
    }

    pub fn has_edge(&self, a: AgentId, b: AgentId) -> bool {
        self.adjacency.get(&a).is_some_and(|n| n.contains(&b))
    }

    /// Undirected edges as `(low, high)` pairs in ascending order.
    pub fn edges(&self) -> Vec<(AgentId, AgentId)> {
        self.adjacency
            .iter()
            .flat_map(|(&a, ns)| ns.iter().filter(move |&&b| a < b).map(move |&b| (a, b)))
            .collect()
    }

    pub fn edge_count(&self) -> usize {
        self.adjacency.values().map(BTreeSet::len).sum::<usize>() / 2
    }

    /// Breadth-first hop counts from `src` to every reachable node.
    pub fn bfs_from(&self, src: AgentId) -> Result<BTreeMap<AgentId, u32>> {
        if !self.contains(src) {
            return Err(Error::Lookup(src));
        }
        let mut dist = BTreeMap::new();
        let mut queue = VecDeque::new();
        dist.insert(src, 0);
        queue.push_back(src);
        while let Some(u) = queue.pop_front() {
            let du = dist[&u];
            for &v in &self.adjacency[&u] {
                if let std::collections::btree_map::Entry::Vacant(e) = dist.entry(v) {
                    e.insert(du + 1);
                    queue.push_back(v);
                }
            }
        }
        Ok(dist)
    }

    /// Connected components, each sorted, ordered by their lowest uid.
    pub fn components(&self) -> Vec<Vec<AgentId>> {
        let mut seen = BTreeSet::new();
        let mut out = Vec::new();
        for id in self.ids() {
            if seen.contains(&id) {
                continue;
            }
            let comp: Vec<_> = self.bfs_from(id).expect("id from snapshot").into_keys().collect();
            seen.extend(comp.iter().copied());
            out.push(comp);
        }
        out
    }
}

/// Shortest hop count between `a` and `b` in the snapshot.
pub fn hop_distance(t: &TopologySnapshot, a: AgentId, b: AgentId) -> Result<Hops> {
    if !t.contains(b) {
        return Err(Error::Lookup(b));
    }
    let dist = t.bfs_from(a)?;
    Ok(dist.get(&b).map_or(Hops::Unreachable, |&h| Hops::Finite(h)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn line(n: u32) -> TopologySnapshot {
        let pos = (0..n).map(|i| (AgentId(i), Position::new(i as f64 * 10.0, 0.0))).collect();
        build_adjacency(&mut VersionClock::new(), &pos, 10.0).unwrap()
    }

    fn random_positions(n: u32, seed: u64, w: f64) -> BTreeMap<AgentId, Position> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| (AgentId(i), Position::new(rng.gen_range(0.0..w), rng.gen_range(0.0..w))))
            .collect()
    }

    #[test]
    fn distance_trivial_cases() {
        let o = Position::new(0.0, 0.0);
        assert_eq!(euclidean_distance(o, o), 0.0);
        assert_eq!(euclidean_distance(o, Position::new(3.0, 4.0)), 5.0);
    }

    #[test]
    fn distance_matches_extended_precision_oracle() {
        // Oracle: squared distance accumulated as exact integers on a 2^-20
        // grid, then a Newton-refined square root.
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let scale = (1u64 << 20) as f64;
        for _ in 0..100 {
            let q = |rng: &mut ChaCha8Rng| rng.gen_range(0..(1000i64 << 20));
            let (ax, ay, bx, by) = (q(&mut rng), q(&mut rng), q(&mut rng), q(&mut rng));
            let d2 = ((ax - bx) as i128).pow(2) + ((ay - by) as i128).pow(2);
            let mut r = (d2 as f64).sqrt();
            for _ in 0..3 {
                r = 0.5 * (r + d2 as f64 / r.max(f64::MIN_POSITIVE));
            }
            let oracle = r / scale;
            let got = euclidean_distance(
                Position::new(ax as f64 / scale, ay as f64 / scale),
                Position::new(bx as f64 / scale, by as f64 / scale),
            );
            assert!((got - oracle).abs() <= 1e-9, "{got} vs {oracle}");
        }
    }

    #[test]
    fn single_node_has_no_edges() {
        let pos = BTreeMap::from([(AgentId(0), Position::new(1.0, 1.0))]);
        let t = build_adjacency(&mut VersionClock::new(), &pos, 5.0).unwrap();
        assert_eq!(t.edge_count(), 0);
    }

    #[test]
    fn boundary_distance_is_inclusive() {
        let pos = BTreeMap::from([
            (AgentId(0), Position::new(0.0, 0.0)),
            (AgentId(1), Position::new(3.0, 4.0)),
        ]);
        let t = build_adjacency(&mut VersionClock::new(), &pos, 5.0).unwrap();
        assert!(t.has_edge(AgentId(0), AgentId(1)));
    }

    #[test]
    fn rejects_non_positive_range() {
        let pos = BTreeMap::new();
        assert!(matches!(build_adjacency(&mut VersionClock::new(), &pos, 0.0), Err(Error::Param(_))));
        assert!(matches!(build_adjacency(&mut VersionClock::new(), &pos, -1.0), Err(Error::Param(_))));
    }

    #[test]
    fn adjacency_matches_pairwise_oracle() {
        let pos = random_positions(20, 42, 100.0);
        let t = build_adjacency(&mut VersionClock::new(), &pos, 25.0).unwrap();
        let mut oracle = Vec::new();
        for (&a, &pa) in &pos {
            for (&b, &pb) in &pos {
                let d2 = (pa.x - pb.x).powi(2) + (pa.y - pb.y).powi(2);
                if a < b && d2 <= 625.0 {
                    oracle.push((a, b));
                }
            }
        }
        assert_eq!(t.edges(), oracle);
    }

    #[test]
    fn versions_strictly_increase() {
        let mut clock = VersionClock::new();
        let pos = random_positions(3, 1, 10.0);
        let a = build_adjacency(&mut clock, &pos, 5.0).unwrap();
        let b = build_adjacency(&mut clock, &pos, 5.0).unwrap();
        assert!(b.version > a.version);
    }

    #[test]
    fn hop_distance_basics() {
        let t = line(3);
        assert_eq!(hop_distance(&t, AgentId(1), AgentId(1)).unwrap(), Hops::Finite(0));
        assert_eq!(hop_distance(&t, AgentId(0), AgentId(2)).unwrap(), Hops::Finite(2));
        assert!(matches!(hop_distance(&t, AgentId(0), AgentId(9)), Err(Error::Lookup(_))));
        assert!(matches!(hop_distance(&t, AgentId(9), AgentId(0)), Err(Error::Lookup(_))));
    }

    #[test]
    fn partition_is_unreachable() {
        let pos = BTreeMap::from([
            (AgentId(0), Position::new(0.0, 0.0)),
            (AgentId(1), Position::new(50.0, 0.0)),
        ]);
        let t = build_adjacency(&mut VersionClock::new(), &pos, 5.0).unwrap();
        assert_eq!(hop_distance(&t, AgentId(0), AgentId(1)).unwrap(), Hops::Unreachable);
    }

    fn floyd_warshall(t: &TopologySnapshot) -> BTreeMap<(AgentId, AgentId), Option<u32>> {
        let ids: Vec<_> = t.ids().collect();
        let n = ids.len();
        let inf = u32::MAX / 2;
        let mut d = vec![vec![inf; n]; n];
        for i in 0..n {
            d[i][i] = 0;
            for j in 0..n {
                if t.has_edge(ids[i], ids[j]) {
                    d[i][j] = 1;
                }
            }
        }
        for m in 0..n {
            for i in 0..n {
                for j in 0..n {
                    d[i][j] = d[i][j].min(d[i][m] + d[m][j]);
                }
            }
        }
        let mut out = BTreeMap::new();
        for i in 0..n {
            for j in 0..n {
                out.insert((ids[i], ids[j]), (d[i][j] < inf).then_some(d[i][j]));
            }
        }
        out
    }

    #[test]
    fn hop_distance_matches_floyd_warshall() {
        let pos = random_positions(30, 11, 100.0);
        let t = build_adjacency(&mut VersionClock::new(), &pos, 25.0).unwrap();
        for ((a, b), want) in floyd_warshall(&t) {
            assert_eq!(hop_distance(&t, a, b).unwrap().finite(), want, "{a}->{b}");
        }
    }

    proptest! {
        #[test]
        fn adjacency_is_unit_disk(
            pts in prop::collection::vec((0.0f64..100.0, 0.0f64..100.0), 0..30),
            range in 1.0f64..60.0,
        ) {
            let pos: BTreeMap<_, _> = pts.iter().enumerate()
                .map(|(i, &(x, y))| (AgentId(i as u32), Position::new(x, y))).collect();
            let t = build_adjacency(&mut VersionClock::new(), &pos, range).unwrap();
            for (&a, &pa) in &pos {
                prop_assert!(!t.has_edge(a, a));
                for (&b, &pb) in &pos {
                    prop_assert_eq!(t.has_edge(a, b), t.has_edge(b, a));
                    if a != b {
                        prop_assert_eq!(t.has_edge(a, b), euclidean_distance(pa, pb) <= range);
                    }
                }
            }
        }

        #[test]
        fn hops_satisfy_triangle_inequality(seed in any::<u64>(), n in 2u32..25) {
            let pos = random_positions(n, seed, 100.0);
            let t = build_adjacency(&mut VersionClock::new(), &pos, 30.0).unwrap();
            let all: BTreeMap<_, _> = t.ids().map(|a| (a, t.bfs_from(a).unwrap())).collect();
            for a in t.ids() {
                for b in t.ids() {
                    prop_assert_eq!(all[&a].get(&b), all[&b].get(&a));
                    for c in t.ids() {
                        if let (Some(ab), Some(bc), Some(ac)) =
                            (all[&a].get(&b), all[&b].get(&c), all[&a].get(&c)) {
                            prop_assert!(ac <= &(ab + bc));
                        }
                    }
                }
            }
        }
    }
}
