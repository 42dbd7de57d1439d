//! Simulation management block: owns the topology, answers hop and route
//! queries, authorizes sends, and provides phase barriers.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::sync::{Arc, Condvar, Mutex};
use std::time::{Duration, Instant};

use crate::error::{Error, Result};
use crate::events::{Actor, BarrierStage, EventDetail, EventLog, MovedNode};
use crate::model::{build_adjacency, AgentId, Hops, Position, TopologySnapshot, VersionClock};

const NONE: u32 = u32::MAX;

/// All-pairs shortest-hop routes derived from one snapshot.
#[derive(Debug, Clone, PartialEq)]
pub struct RouteTable {
    pub snapshot_version: u64,
    snapshot: Arc<TopologySnapshot>,
    /// Sorted ids; positions in this vector index the matrices below.
    ids: Vec<AgentId>,
    /// `hops[s * n + d]`, `NONE` when partitioned.
    hops: Vec<u32>,
    /// `next[s * n + d]` as an index into `ids`, `NONE` when there is no hop.
    next: Vec<u32>,
}

/// Rebuilds shortest-hop routes. Among equally short next hops the lowest
/// uid wins, so identical snapshots always give identical tables.
pub fn rebuild_routes(t: Arc<TopologySnapshot>) -> RouteTable {
    let ids: Vec<AgentId> = t.ids().collect();
    let n = ids.len();
    let index: BTreeMap<AgentId, u32> = ids.iter().enumerate().map(|(i, &a)| (a, i as u32)).collect();
    // Ascending index order equals ascending uid order.
    let adj: Vec<Vec<u32>> = ids
        .iter()
        .map(|&a| t.neighbors(a).expect("id from snapshot").iter().map(|b| index[b]).collect())
        .collect();
    let mut hops = vec![NONE; n * n];
    let mut next = vec![NONE; n * n];
    let mut dist = vec![NONE; n];
    let mut queue = VecDeque::with_capacity(n);
    for dst in 0..n {
        dist.fill(NONE);
        dist[dst] = 0;
        queue.push_back(dst as u32);
        while let Some(u) = queue.pop_front() {
            let du = dist[u as usize];
            for &v in &adj[u as usize] {
                if dist[v as usize] == NONE {
                    dist[v as usize] = du + 1;
                    queue.push_back(v);
                }
            }
        }
        for src in 0..n {
            let h = dist[src];
            hops[src * n + dst] = h;
            if h != NONE && h > 0 {
                let via = adj[src]
                    .iter()
                    .copied()
                    .find(|&v| dist[v as usize] == h - 1)
                    .expect("a shortest path has a predecessor");
                next[src * n + dst] = via;
            }
        }
    }
    RouteTable { snapshot_version: t.version, snapshot: t, ids, hops, next }
}

impl RouteTable {
    pub fn empty() -> Self {
        let t = build_adjacency(&mut VersionClock::new(), &BTreeMap::new(), 1.0).unwrap();
        rebuild_routes(Arc::new(t))
    }

    pub fn snapshot(&self) -> &Arc<TopologySnapshot> {
        &self.snapshot
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    fn index(&self, id: AgentId) -> Result<usize> {
        self.ids.binary_search(&id).map_err(|_| Error::Lookup(id))
    }

    pub fn contains(&self, id: AgentId) -> bool {
        self.index(id).is_ok()
    }

    fn row(&self, id: AgentId) -> Result<&[u32]> {
        let n = self.ids.len();
        let s = self.index(id)?;
        Ok(&self.hops[s * n..(s + 1) * n])
    }

    pub fn hops(&self, src: AgentId, dst: AgentId) -> Result<Hops> {
        let row = self.row(src)?;
        let h = row[self.index(dst)?];
        Ok(if h == NONE { Hops::Unreachable } else { Hops::Finite(h) })
    }

    /// First hop on the chosen shortest path; `None` when `src == dst` or
    /// the pair is partitioned.
    pub fn next_hop(&self, src: AgentId, dst: AgentId) -> Result<Option<AgentId>> {
        let (s, d) = (self.index(src)?, self.index(dst)?);
        let v = self.next[s * self.ids.len() + d];
        Ok((v != NONE).then(|| self.ids[v as usize]))
    }

    /// True iff `dst` is reachable from `src`.
    pub fn authorize(&self, src: AgentId, dst: AgentId) -> Result<bool> {
        Ok(self.hops(src, dst)?.is_reachable())
    }

    /// Hop count from `id` to every node it can reach, itself included,
    /// ascending by uid.
    pub fn hops_from(&self, id: AgentId) -> Result<Vec<(AgentId, u32)>> {
        Ok(self
            .row(id)?
            .iter()
            .zip(&self.ids)
            .filter(|(&h, _)| h != NONE)
            .map(|(&h, &a)| (a, h))
            .collect())
    }

    pub fn neighbors(&self, id: AgentId) -> Result<&BTreeSet<AgentId>> {
        self.snapshot.neighbors(id)
    }

    /// Every other node reachable from `id`, ascending.
    pub fn reachable_from(&self, id: AgentId) -> Result<Vec<AgentId>> {
        Ok(self
            .row(id)?
            .iter()
            .zip(&self.ids)
            .filter(|(&h, &a)| h != NONE && a != id)
            .map(|(_, &a)| a)
            .collect())
    }
}

/// 1-hop neighbors of `id` in the table's snapshot.
pub fn query_neighbors(rt: &RouteTable, id: AgentId) -> Result<BTreeSet<AgentId>> {
    rt.neighbors(id).cloned()
}

pub fn authorize(rt: &RouteTable, src: AgentId, dst: AgentId) -> Result<bool> {
    rt.authorize(src, dst)
}

/// The routes currently in force plus a counter bumped whenever the link
/// set changes. Readers compare epochs, so skipped publications still show
/// up as a link change.
#[derive(Debug, Clone)]
pub struct Publication {
    pub routes: Arc<RouteTable>,
    pub links_epoch: u64,
}

/// Topology authority for one run. Position updates are buffered until
/// [`Smb::refresh`], which rebuilds snapshot and routes in one step.
pub struct Smb {
    radio_range: f64,
    clock: VersionClock,
    positions: BTreeMap<AgentId, Position>,
    moved: BTreeSet<AgentId>,
    dirty: bool,
    force_links_changed: bool,
    current: Publication,
}

impl Smb {
    pub fn new(radio_range: f64) -> Result<Self> {
        let mut clock = VersionClock::new();
        let snap = build_adjacency(&mut clock, &BTreeMap::new(), radio_range)?;
        Ok(Smb {
            radio_range,
            clock,
            positions: BTreeMap::new(),
            moved: BTreeSet::new(),
            dirty: false,
            force_links_changed: false,
            current: Publication { routes: Arc::new(rebuild_routes(Arc::new(snap))), links_epoch: 0 },
        })
    }

    pub fn radio_range(&self) -> f64 {
        self.radio_range
    }

    pub fn set_radio_range(&mut self, r: f64) -> Result<()> {
        if !(r.is_finite() && r > 0.0) {
            return Err(Error::Param(format!("radio_range must be positive, got {r}")));
        }
        self.radio_range = r;
        self.dirty = true;
        Ok(())
    }

    pub fn register(&mut self, id: AgentId, pos: Position) {
        self.positions.insert(id, pos);
        self.moved.insert(id);
        self.dirty = true;
    }

    pub fn unregister(&mut self, id: AgentId) {
        if self.positions.remove(&id).is_some() {
            self.moved.remove(&id);
            self.dirty = true;
        }
    }

    pub fn update_position(&mut self, id: AgentId, pos: Position) {
        if let Some(p) = self.positions.get_mut(&id) {
            if *p != pos {
                *p = pos;
                self.moved.insert(id);
                self.dirty = true;
            }
        }
    }

    /// Forces the next refresh to publish a new version flagged as a link
    /// change even when positions are untouched (used after parameter edits).
    pub fn invalidate(&mut self) {
        self.dirty = true;
        self.force_links_changed = true;
    }

    pub fn current(&self) -> &Publication {
        &self.current
    }

    pub fn routes(&self) -> &Arc<RouteTable> {
        &self.current.routes
    }

    pub fn version(&self) -> u64 {
        self.current.routes.snapshot_version
    }

    /// Rebuilds if anything changed since the last refresh, logging a
    /// TOPOLOGY_CHANGE event. Returns the new publication, if any.
    pub fn refresh(&mut self, log: &EventLog, time: u64) -> Option<Publication> {
        if !self.dirty {
            return None;
        }
        let snap = build_adjacency(&mut self.clock, &self.positions, self.radio_range)
            .expect("range validated and positions finite");
        let links_changed =
            self.force_links_changed || snap.edges() != self.current.routes.snapshot().edges();
        let moved = std::mem::take(&mut self.moved)
            .into_iter()
            .filter_map(|uid| self.positions.get(&uid).map(|p| MovedNode { uid, x: p.x, y: p.y }))
            .collect();
        log.emit(
            time,
            Actor::Smb,
            EventDetail::TopologyChange {
                version: snap.version,
                radio_range: self.radio_range,
                nodes: snap.len(),
                edges: snap.edge_count(),
                moved,
            },
        );
        let links_epoch = self.current.links_epoch + u64::from(links_changed);
        self.current = Publication { routes: Arc::new(rebuild_routes(Arc::new(snap))), links_epoch };
        self.dirty = false;
        self.force_links_changed = false;
        Some(self.current.clone())
    }
}

/// Outcome of one arrival at a [`PhaseBarrier`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BarrierState {
    Waiting { remaining: usize },
    Released(Vec<AgentId>),
}

/// Cooperative barrier for the deterministic scheduler: participants
/// arrive one at a time, nobody is released until the last one arrives.
#[derive(Debug, Clone)]
pub struct PhaseBarrier {
    phase: String,
    participants: BTreeSet<AgentId>,
    arrived: BTreeSet<AgentId>,
}

impl PhaseBarrier {
    pub fn new(participants: BTreeSet<AgentId>, phase: impl Into<String>) -> Result<Self> {
        if participants.is_empty() {
            return Err(Error::Param("barrier needs at least one participant".into()));
        }
        Ok(PhaseBarrier { phase: phase.into(), participants, arrived: BTreeSet::new() })
    }

    pub fn phase(&self) -> &str {
        &self.phase
    }

    pub fn arrive(&mut self, id: AgentId, log: &EventLog, time: u64) -> Result<BarrierState> {
        if !self.participants.contains(&id) {
            return Err(Error::Lookup(id));
        }
        if self.arrived.len() == self.participants.len() {
            return Err(Error::Sync(format!("phase {:?} already released", self.phase)));
        }
        self.arrived.insert(id);
        let total = self.participants.len();
        log.emit(
            time,
            Actor::Agent(id),
            EventDetail::Barrier {
                phase: self.phase.clone(),
                stage: BarrierStage::Enter,
                participant: Some(id),
                arrived: self.arrived.len(),
                total,
            },
        );
        if self.arrived.len() < total {
            return Ok(BarrierState::Waiting { remaining: total - self.arrived.len() });
        }
        log.emit(
            time,
            Actor::Smb,
            EventDetail::Barrier {
                phase: self.phase.clone(),
                stage: BarrierStage::Release,
                participant: None,
                arrived: total,
                total,
            },
        );
        Ok(BarrierState::Released(self.participants.iter().copied().collect()))
    }
}

/// Blocking barrier for thread-per-agent runs. Waiters time out with a
/// synchronization error if the phase is not complete in time.
#[derive(Clone)]
pub struct SyncBarrier {
    inner: Arc<(Mutex<SyncState>, Condvar)>,
    log: EventLog,
}

struct SyncState {
    barrier: PhaseBarrier,
    released: bool,
}

impl SyncBarrier {
    pub fn new(participants: BTreeSet<AgentId>, phase: impl Into<String>, log: EventLog) -> Result<Self> {
        let barrier = PhaseBarrier::new(participants, phase)?;
        Ok(SyncBarrier {
            inner: Arc::new((Mutex::new(SyncState { barrier, released: false }), Condvar::new())),
            log,
        })
    }

    pub fn wait(&self, id: AgentId, time: u64, timeout: Duration) -> Result<()> {
        let (lock, cvar) = &*self.inner;
        let mut st = lock.lock().unwrap();
        if let BarrierState::Released(_) = st.barrier.arrive(id, &self.log, time)? {
            st.released = true;
            cvar.notify_all();
            return Ok(());
        }
        let deadline = Instant::now() + timeout;
        while !st.released {
            let now = Instant::now();
            if now >= deadline {
                return Err(Error::Sync(format!(
                    "barrier {:?} timed out waiting for {} participants",
                    st.barrier.phase,
                    st.barrier.participants.len() - st.barrier.arrived.len()
                )));
            }
            st = cvar.wait_timeout(st, deadline - now).unwrap().0;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::events::EventKind;
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::collections::VecDeque;

    fn snapshot(pos: &[(u32, f64, f64)], range: f64) -> Arc<TopologySnapshot> {
        let m = pos.iter().map(|&(i, x, y)| (AgentId(i), Position::new(x, y))).collect();
        Arc::new(build_adjacency(&mut VersionClock::new(), &m, range).unwrap())
    }

    fn random_snapshot(n: u32, seed: u64, range: f64) -> Arc<TopologySnapshot> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pos: Vec<_> =
            (0..n).map(|i| (i, rng.gen_range(0.0..100.0), rng.gen_range(0.0..100.0))).collect();
        snapshot(&pos, range)
    }

    fn line() -> RouteTable {
        rebuild_routes(snapshot(&[(0, 0.0, 0.0), (1, 10.0, 0.0), (2, 20.0, 0.0)], 10.0))
    }

    #[test]
    fn empty_topology_gives_empty_tables() {
        assert!(RouteTable::empty().is_empty());
    }

    #[test]
    fn line_routes() {
        let rt = line();
        let (a, b, c) = (AgentId(0), AgentId(1), AgentId(2));
        assert_eq!(rt.next_hop(a, c).unwrap(), Some(b));
        assert_eq!(rt.hops(a, c).unwrap(), Hops::Finite(2));
        assert_eq!(query_neighbors(&rt, b).unwrap(), BTreeSet::from([a, c]));
        assert!(authorize(&rt, a, a).unwrap());
    }

    #[test]
    fn unknown_ids_are_lookup_errors() {
        let rt = line();
        assert!(matches!(rt.hops(AgentId(0), AgentId(9)), Err(Error::Lookup(_))));
        assert!(matches!(authorize(&rt, AgentId(9), AgentId(0)), Err(Error::Lookup(_))));
        assert!(matches!(query_neighbors(&rt, AgentId(9)), Err(Error::Lookup(_))));
    }

    #[test]
    fn isolated_nodes() {
        let rt = rebuild_routes(snapshot(&[(0, 0.0, 0.0), (1, 50.0, 50.0)], 5.0));
        assert!(!authorize(&rt, AgentId(0), AgentId(1)).unwrap());
        assert!(query_neighbors(&rt, AgentId(0)).unwrap().is_empty());
    }

    #[test]
    fn ties_go_to_lowest_uid() {
        // Diamond 0-{1,2}-3: both middles are shortest, 1 must win.
        let rt = rebuild_routes(snapshot(
            &[(0, 0.0, 0.0), (2, 7.0, 7.0), (1, 7.0, -7.0), (3, 14.0, 0.0)],
            10.0,
        ));
        assert_eq!(rt.next_hop(AgentId(0), AgentId(3)).unwrap(), Some(AgentId(1)));
    }

    fn bfs_oracle(t: &TopologySnapshot, src: AgentId) -> BTreeMap<AgentId, u32> {
        let mut dist = BTreeMap::from([(src, 0)]);
        let mut q = VecDeque::from([src]);
        while let Some(u) = q.pop_front() {
            for v in t.ids() {
                let pu = t.position(u).unwrap();
                let pv = t.position(v).unwrap();
                let d = ((pu.x - pv.x).powi(2) + (pu.y - pv.y).powi(2)).sqrt();
                if u != v && d <= t.radio_range && !dist.contains_key(&v) {
                    dist.insert(v, dist[&u] + 1);
                    q.push_back(v);
                }
            }
        }
        dist
    }

    #[test]
    fn hops_match_all_pairs_bfs_oracle() {
        let t = random_snapshot(25, 3, 25.0);
        let rt = rebuild_routes(t.clone());
        for a in t.ids() {
            let oracle = bfs_oracle(&t, a);
            for b in t.ids() {
                assert_eq!(rt.hops(a, b).unwrap().finite(), oracle.get(&b).copied());
            }
        }
    }

    #[test]
    fn next_hop_chains_terminate_in_hops_steps() {
        let t = random_snapshot(40, 77, 22.0);
        let rt = rebuild_routes(t.clone());
        for a in t.ids() {
            for b in t.ids() {
                let Some(h) = rt.hops(a, b).unwrap().finite() else { continue };
                let (mut cur, mut steps) = (a, 0);
                while cur != b {
                    cur = rt.next_hop(cur, b).unwrap().unwrap();
                    steps += 1;
                    assert!(steps <= h);
                }
                assert_eq!(steps, h);
            }
        }
    }

    #[test]
    fn rebuild_is_pure() {
        let t = random_snapshot(30, 4, 20.0);
        assert_eq!(rebuild_routes(t.clone()), rebuild_routes(t));
    }

    fn find(parent: &mut Vec<usize>, i: usize) -> usize {
        if parent[i] != i {
            let r = find(parent, parent[i]);
            parent[i] = r;
        }
        parent[i]
    }

    #[test]
    fn authorization_matches_union_find_components() {
        let t = random_snapshot(10, 9, 20.0);
        let rt = rebuild_routes(t.clone());
        let mut parent: Vec<usize> = (0..10).collect();
        for (a, b) in t.edges() {
            let (ra, rb) = (find(&mut parent, a.0 as usize), find(&mut parent, b.0 as usize));
            parent[ra] = rb;
        }
        let mut partitioned = false;
        for a in 0..10u32 {
            for b in 0..10u32 {
                let same = find(&mut parent, a as usize) == find(&mut parent, b as usize);
                partitioned |= !same;
                assert_eq!(authorize(&rt, AgentId(a), AgentId(b)).unwrap(), same);
            }
        }
        assert!(partitioned, "seed 9 should yield a partitioned graph");
    }

    #[test]
    fn neighbors_match_pairwise_oracle() {
        let t = random_snapshot(20, 5, 25.0);
        let rt = rebuild_routes(t.clone());
        for a in t.ids() {
            let pa = t.position(a).unwrap();
            let want: BTreeSet<_> = t
                .ids()
                .filter(|&b| {
                    let pb = t.position(b).unwrap();
                    b != a && ((pa.x - pb.x).powi(2) + (pa.y - pb.y).powi(2)).sqrt() <= 25.0
                })
                .collect();
            assert_eq!(query_neighbors(&rt, a).unwrap(), want);
        }
    }

    #[test]
    fn smb_refresh_only_when_dirty() {
        let log = EventLog::new();
        let mut smb = Smb::new(10.0).unwrap();
        assert!(smb.refresh(&log, 0).is_none());
        smb.register(AgentId(0), Position::new(0.0, 0.0));
        smb.register(AgentId(1), Position::new(5.0, 0.0));
        let p = smb.refresh(&log, 0).unwrap();
        assert_eq!(p.links_epoch, 1);
        assert_eq!(p.routes.hops(AgentId(0), AgentId(1)).unwrap(), Hops::Finite(1));
        assert!(smb.refresh(&log, 1).is_none());
        smb.update_position(AgentId(1), Position::new(6.0, 0.0));
        let p2 = smb.refresh(&log, 1).unwrap();
        assert_eq!(p2.links_epoch, 1);
        assert!(p2.routes.snapshot_version > p.routes.snapshot_version);
        assert_eq!(log.events().iter().filter(|e| e.kind() == EventKind::TopologyChange).count(), 2);
    }

    #[test]
    fn single_participant_barrier_releases_immediately() {
        let log = EventLog::new();
        let mut b = PhaseBarrier::new(BTreeSet::from([AgentId(1)]), "boot").unwrap();
        assert_eq!(b.arrive(AgentId(1), &log, 0).unwrap(), BarrierState::Released(vec![AgentId(1)]));
    }

    #[test]
    fn three_participants_release_together() {
        let log = EventLog::new();
        let ids = BTreeSet::from([AgentId(1), AgentId(2), AgentId(3)]);
        let mut b = PhaseBarrier::new(ids, "p").unwrap();
        assert_eq!(b.arrive(AgentId(3), &log, 0).unwrap(), BarrierState::Waiting { remaining: 2 });
        assert_eq!(b.arrive(AgentId(1), &log, 0).unwrap(), BarrierState::Waiting { remaining: 1 });
        assert!(matches!(b.arrive(AgentId(2), &log, 0).unwrap(), BarrierState::Released(v) if v.len() == 3));
    }

    #[test]
    fn no_release_before_last_entry() {
        let log = EventLog::new();
        let mut ids: Vec<AgentId> = (0..50).map(AgentId).collect();
        ids.shuffle(&mut ChaCha8Rng::seed_from_u64(21));
        let mut b = PhaseBarrier::new(ids.iter().copied().collect(), "sync").unwrap();
        for &id in &ids {
            b.arrive(id, &log, 0).unwrap();
        }
        let evs = log.events();
        let release = evs
            .iter()
            .position(|e| matches!(e.detail, EventDetail::Barrier { stage: BarrierStage::Release, .. }))
            .unwrap();
        let last_enter = evs
            .iter()
            .rposition(|e| matches!(e.detail, EventDetail::Barrier { stage: BarrierStage::Enter, .. }))
            .unwrap();
        assert_eq!(release, evs.len() - 1);
        assert!(last_enter < release);
        assert_eq!(evs.iter().filter(|e| matches!(e.detail, EventDetail::Barrier { stage: BarrierStage::Enter, .. })).count(), 50);
    }

    #[test]
    fn threaded_barrier_releases_all_and_times_out_when_short() {
        let log = EventLog::new();
        let ids: BTreeSet<_> = (0..4).map(AgentId).collect();
        let b = SyncBarrier::new(ids.clone(), "start", log.clone()).unwrap();
        let handles: Vec<_> = ids
            .iter()
            .map(|&id| {
                let b = b.clone();
                std::thread::spawn(move || b.wait(id, 0, Duration::from_secs(5)))
            })
            .collect();
        for h in handles {
            h.join().unwrap().unwrap();
        }
        let short = SyncBarrier::new(ids, "never", log).unwrap();
        assert!(matches!(short.wait(AgentId(0), 0, Duration::from_millis(20)), Err(Error::Sync(_))));
    }
}
