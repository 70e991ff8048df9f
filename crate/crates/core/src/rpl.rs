//! RPL control plane: ETX link estimates, additive ETX rank, DIO/DIS/DAO
//! handling, default-parent selection and the trickle timer.

use std::collections::{BTreeMap, BTreeSet};

use thiserror::Error;

use crate::topology::NodeId;

pub mod message;

pub use message::{CodecError, ControlMessage, DaoMessage, DioMessage, DisMessage};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RplError {
    #[error("malformed-stats: {successes} successes out of {attempts} attempts")]
    MalformedStats { attempts: u64, successes: u64 },
    #[error("no-parent: parent set is empty")]
    NoParent,
    #[error("loop: default-parent chain from node {0} does not reach the gateway")]
    Loop(NodeId),
}

/// Position in the DODAG; the gateway sits at zero.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Default)]
pub struct Rank(pub f64);

impl Rank {
    pub const ROOT: Rank = Rank(0.0);
    pub const INFINITE: Rank = Rank(f64::INFINITY);

    pub fn value(self) -> f64 {
        self.0
    }

    pub fn is_finite(self) -> bool {
        self.0.is_finite()
    }
}

/// ETX assigned to a link that has never delivered.
pub const DEFAULT_ETX_MAX: f64 = 16.0;

/// `attempts / successes`, or `etx_max` for a link with no successes.
pub fn compute_etx(attempts: u64, successes: u64, etx_max: f64) -> Result<f64, RplError> {
    if successes > attempts {
        return Err(RplError::MalformedStats { attempts, successes });
    }
    if successes == 0 {
        return Ok(etx_max);
    }
    Ok(attempts as f64 / successes as f64)
}

/// Additive objective: `parent_rank + link_etx`.
pub fn compute_rank(parent_rank: Rank, link_etx: f64) -> Rank {
    debug_assert!(link_etx >= 1.0);
    Rank(parent_rank.0 + link_etx)
}

/// Running ETX estimate of one directed link.
///
/// `attempts`/`successes` are lifetime counters; `smoothed` starts from the
/// channel-model seed and then tracks per-hop observations with an EWMA.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EtxEstimate {
    pub attempts: u64,
    pub successes: u64,
    pub smoothed: f64,
}

impl EtxEstimate {
    pub fn seeded(success_prob: f64, etx_max: f64) -> Self {
        let etx = if success_prob > 0.0 { (1.0 / success_prob).min(etx_max) } else { etx_max };
        Self { attempts: 0, successes: 0, smoothed: etx.max(1.0) }
    }

    /// Lifetime ratio, or `None` before any traffic.
    pub fn observed(&self, etx_max: f64) -> Option<f64> {
        (self.attempts > 0).then(|| compute_etx(self.attempts, self.successes, etx_max).unwrap_or(etx_max))
    }

    pub fn record(&mut self, attempts: u64, successes: u64, alpha: f64, etx_max: f64) -> Result<(), RplError> {
        let sample = compute_etx(attempts, successes, etx_max)?;
        self.attempts += attempts;
        self.successes += successes;
        self.smoothed = ((1.0 - alpha) * self.smoothed + alpha * sample).max(1.0);
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ParentEntry {
    pub id: NodeId,
    pub rank: Rank,
    pub etx: f64,
}

impl ParentEntry {
    pub fn path_cost(&self) -> f64 {
        self.rank.0 + self.etx
    }
}

/// Parent minimising `rank + etx`; ties go to the lowest node id.
pub fn select_default_parent(parent_set: &[ParentEntry]) -> Result<NodeId, RplError> {
    best_parent(parent_set).map(|p| p.id).ok_or(RplError::NoParent)
}

fn best_parent(parent_set: &[ParentEntry]) -> Option<&ParentEntry> {
    parent_set.iter().min_by(|a, b| {
        a.path_cost()
            .total_cmp(&b.path_cost())
            .then(a.id.cmp(&b.id))
    })
}

/// Trickle timer state. Intervals are in milliseconds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TrickleState {
    pub interval_min: u64,
    pub interval_max_doublings: u32,
    pub redundancy_k: u32,
    pub current_interval: u64,
    pub counter: u32,
}

impl TrickleState {
    pub fn new(interval_min: u64, interval_max_doublings: u32, redundancy_k: u32) -> Self {
        Self {
            interval_min,
            interval_max_doublings,
            redundancy_k,
            current_interval: interval_min,
            counter: 0,
        }
    }

    pub fn interval_max(&self) -> u64 {
        self.interval_min << self.interval_max_doublings
    }

    /// Consistent reception heard during the current interval.
    pub fn hear_consistent(&mut self) {
        self.counter = self.counter.saturating_add(1);
    }

    pub fn reset(&mut self) {
        self.current_interval = self.interval_min;
        self.counter = 0;
    }
}

impl Default for TrickleState {
    fn default() -> Self {
        Self::new(100, 8, 10)
    }
}

/// Ends the current trickle interval. Returns whether to emit a DIO and the
/// length of the next interval.
pub fn trickle_fire(trickle: &mut TrickleState, consistent: bool) -> (bool, u64) {
    let emit = if consistent {
        let emit = trickle.counter < trickle.redundancy_k;
        trickle.current_interval = (trickle.current_interval * 2).min(trickle.interval_max());
        emit
    } else {
        trickle.current_interval = trickle.interval_min;
        true
    };
    trickle.counter = 0;
    (emit, trickle.current_interval)
}

#[derive(Debug, Clone, PartialEq)]
pub struct NodeState {
    pub id: NodeId,
    pub rank: Rank,
    pub parent_set: Vec<ParentEntry>,
    pub default_parent: Option<NodeId>,
    pub children: BTreeSet<NodeId>,
    pub active_connections: u32,
    pub selected_relay: Option<NodeId>,
    pub trickle: TrickleState,
}

impl NodeState {
    pub fn new(id: NodeId, trickle: TrickleState) -> Self {
        Self {
            id,
            rank: if id.is_gateway() { Rank::ROOT } else { Rank::INFINITE },
            parent_set: Vec::new(),
            default_parent: None,
            children: BTreeSet::new(),
            active_connections: 0,
            selected_relay: None,
            trickle,
        }
    }

    pub fn is_gateway(&self) -> bool {
        self.id.is_gateway()
    }

    pub fn is_joined(&self) -> bool {
        self.is_gateway() || self.default_parent.is_some()
    }

    pub fn children_count(&self) -> u32 {
        self.children.len() as u32
    }

    pub fn dio(&self, dodag_id: u32) -> DioMessage {
        DioMessage {
            sender: self.id,
            rank: self.rank,
            dodag_id,
            relay_suboption: self.selected_relay,
        }
    }

    fn upsert_parent(&mut self, entry: ParentEntry) {
        match self.parent_set.iter_mut().find(|p| p.id == entry.id) {
            Some(p) => *p = entry,
            None => self.parent_set.push(entry),
        }
    }

    fn prune_parents(&mut self) {
        let own = self.rank;
        self.parent_set.retain(|p| p.rank < own);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DioDecision {
    Join,
    Update,
    Ignore,
}

/// Applies a DIO heard over a link with ETX `link_etx`.
///
/// The sender is kept in the parent set whenever it advertises a lower rank
/// than ours. A joined node moves only when the best parent beats its rank
/// by more than `hysteresis`; a DIO from the current default parent always
/// re-anchors our rank on it.
pub fn process_dio(state: &mut NodeState, dio: &DioMessage, link_etx: f64, hysteresis: f64) -> DioDecision {
    if state.is_gateway() || dio.sender == state.id {
        return DioDecision::Ignore;
    }
    let entry = ParentEntry { id: dio.sender, rank: dio.rank, etx: link_etx };

    if !state.is_joined() {
        if !dio.rank.is_finite() {
            return DioDecision::Ignore;
        }
        state.upsert_parent(entry);
        let best = *best_parent(&state.parent_set).expect("nonempty");
        state.default_parent = Some(best.id);
        state.rank = compute_rank(best.rank, best.etx);
        state.prune_parents();
        return DioDecision::Join;
    }

    let from_default = state.default_parent == Some(dio.sender);
    if dio.rank < state.rank || from_default {
        state.upsert_parent(entry);
    } else {
        state.parent_set.retain(|p| p.id != dio.sender);
        return DioDecision::Ignore;
    }

    let best = *best_parent(&state.parent_set).expect("nonempty");
    let best_rank = compute_rank(best.rank, best.etx);
    if best_rank.0 < state.rank.0 - hysteresis {
        state.default_parent = Some(best.id);
        state.rank = best_rank;
        state.prune_parents();
        return DioDecision::Update;
    }
    if from_default {
        let anchored = compute_rank(dio.rank, link_etx);
        if anchored != state.rank {
            state.rank = anchored;
            state.prune_parents();
            if !state.parent_set.iter().any(|p| p.id == dio.sender) {
                state.parent_set.push(entry);
            }
            return DioDecision::Update;
        }
    }
    DioDecision::Ignore
}

/// A node that has heard no DIO for `timeout` solicits one.
pub fn emit_dis(state: &NodeState, now: u64, last_dio_heard: Option<u64>, timeout: u64) -> Option<DisMessage> {
    if state.is_joined() {
        return None;
    }
    let quiet_since = last_dio_heard.unwrap_or(0);
    (now.saturating_sub(quiet_since) >= timeout).then_some(DisMessage { sender: state.id })
}

/// A DIS resets the receiver's trickle timer so it advertises promptly.
pub fn process_dis(state: &mut NodeState) {
    state.trickle.reset();
}

/// Downward routes: target -> next hop.
pub type RouteTable = BTreeMap<NodeId, NodeId>;

/// Records `dao.target` reachable via `dao.sender`; the freshest DAO wins.
pub fn process_dao(routes: &mut RouteTable, dao: &DaoMessage) {
    routes.insert(dao.target, dao.sender);
}

/// Recomputes every node's children set and active-connection count from
/// the installed default parents.
///
/// A node's active connections are the number of joined sources whose
/// default path to the gateway passes through it as an intermediate hop.
pub fn update_children_and_connections(states: &mut [NodeState]) -> Result<(), RplError> {
    for s in states.iter_mut() {
        s.children.clear();
        s.active_connections = 0;
    }
    let parents: Vec<Option<NodeId>> = states.iter().map(|s| s.default_parent).collect();
    for (i, p) in parents.iter().enumerate() {
        if let Some(p) = p {
            states[p.index()].children.insert(NodeId(i as u32));
        }
    }
    let n = states.len();
    let mut nac = vec![0u32; n];
    for (i, first) in parents.iter().enumerate() {
        let Some(mut hop) = *first else { continue };
        let mut steps = 0;
        while !hop.is_gateway() {
            nac[hop.index()] += 1;
            steps += 1;
            match parents[hop.index()] {
                Some(next) if steps <= n => hop = next,
                _ => return Err(RplError::Loop(NodeId(i as u32))),
            }
        }
    }
    for (s, c) in states.iter_mut().zip(nac) {
        s.active_connections = c;
    }
    Ok(())
}

/// Default-parent path from `node` to the gateway, inclusive of both ends.
pub fn default_path(states: &[NodeState], node: NodeId) -> Result<Vec<NodeId>, RplError> {
    let mut path = vec![node];
    let mut cur = node;
    while !cur.is_gateway() {
        match states[cur.index()].default_parent {
            Some(p) if path.len() <= states.len() => {
                path.push(p);
                cur = p;
            }
            _ => return Err(RplError::Loop(node)),
        }
    }
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn node(id: u32) -> NodeState {
        NodeState::new(NodeId(id), TrickleState::default())
    }

    fn dio(sender: u32, rank: f64) -> DioMessage {
        DioMessage { sender: NodeId(sender), rank: Rank(rank), dodag_id: 1, relay_suboption: None }
    }

    #[test]
    fn etx_examples() {
        assert_eq!(compute_etx(10, 10, 16.0), Ok(1.0));
        assert_eq!(compute_etx(10, 5, 16.0), Ok(2.0));
        assert_eq!(compute_etx(8, 0, 16.0), Ok(16.0));
        assert_eq!(
            compute_etx(3, 4, 16.0),
            Err(RplError::MalformedStats { attempts: 3, successes: 4 })
        );
    }

    #[test]
    fn rank_is_additive() {
        assert_eq!(compute_rank(Rank(0.0), 1.0), Rank(1.0));
        assert_eq!(compute_rank(Rank(1.0), 2.0), Rank(3.0));
    }

    #[test]
    fn etx_seed_and_ewma() {
        let mut e = EtxEstimate::seeded(0.5, 16.0);
        assert_eq!(e.smoothed, 2.0);
        assert_eq!(e.observed(16.0), None);
        e.record(4, 1, 0.3, 16.0).unwrap();
        assert!((e.smoothed - (0.7 * 2.0 + 0.3 * 4.0)).abs() < 1e-12);
        assert_eq!(e.observed(16.0), Some(4.0));
        assert_eq!(EtxEstimate::seeded(0.0, 16.0).smoothed, 16.0);
    }

    #[test]
    fn first_join_from_gateway() {
        let mut n = node(5);
        assert_eq!(process_dio(&mut n, &dio(0, 0.0), 1.2, 0.5), DioDecision::Join);
        assert_eq!(n.rank, Rank(1.2));
        assert_eq!(n.default_parent, Some(NodeId(0)));
    }

    #[test]
    fn hysteresis_ignores_small_improvement() {
        let mut n = node(5);
        process_dio(&mut n, &dio(1, 2.0), 1.0, 0.5);
        assert_eq!(n.rank, Rank(3.0));
        // candidate via node 2 is 3.0 - 0.1
        assert_eq!(process_dio(&mut n, &dio(2, 1.9), 1.0, 0.5), DioDecision::Ignore);
        assert_eq!(n.default_parent, Some(NodeId(1)));
        assert_eq!(n.rank, Rank(3.0));
    }

    #[test]
    fn strict_improvement_updates() {
        let mut n = node(5);
        process_dio(&mut n, &dio(1, 4.0), 1.0, 0.5);
        assert_eq!(n.rank, Rank(5.0));
        assert_eq!(process_dio(&mut n, &dio(2, 1.0), 1.0, 0.5), DioDecision::Update);
        assert_eq!(n.rank, Rank(2.0));
        assert_eq!(n.default_parent, Some(NodeId(2)));
        // node 1 (rank 4) no longer qualifies as a parent
        assert!(n.parent_set.iter().all(|p| p.rank < n.rank));
    }

    #[test]
    fn higher_rank_sender_is_not_a_parent() {
        let mut n = node(5);
        process_dio(&mut n, &dio(1, 1.0), 1.0, 0.5);
        assert_eq!(process_dio(&mut n, &dio(2, 2.5), 1.0, 0.5), DioDecision::Ignore);
        assert_eq!(n.parent_set.len(), 1);
    }

    #[test]
    fn default_parent_selection() {
        let single = [ParentEntry { id: NodeId(4), rank: Rank(1.0), etx: 1.0 }];
        assert_eq!(select_default_parent(&single), Ok(NodeId(4)));
        let set = [
            ParentEntry { id: NodeId(1), rank: Rank(1.0), etx: 3.0 },
            ParentEntry { id: NodeId(2), rank: Rank(2.0), etx: 1.0 },
        ];
        assert_eq!(select_default_parent(&set), Ok(NodeId(2)));
        let tie = [
            ParentEntry { id: NodeId(9), rank: Rank(1.0), etx: 2.0 },
            ParentEntry { id: NodeId(3), rank: Rank(2.0), etx: 1.0 },
        ];
        assert_eq!(select_default_parent(&tie), Ok(NodeId(3)));
        assert_eq!(select_default_parent(&[]), Err(RplError::NoParent));
    }

    #[test]
    fn trickle_doubles_and_resets() {
        let mut t = TrickleState::new(100, 8, 10);
        assert_eq!(trickle_fire(&mut t, true), (true, 200));
        t.current_interval = 6400;
        assert_eq!(trickle_fire(&mut t, false), (true, 100));
        t.counter = 10;
        assert_eq!(trickle_fire(&mut t, true), (false, 200));
        t.current_interval = t.interval_max();
        assert_eq!(trickle_fire(&mut t, true), (true, 25_600));
    }

    #[test]
    fn dis_only_when_unjoined_and_quiet() {
        let mut n = node(3);
        assert_eq!(emit_dis(&n, 50, None, 50), Some(DisMessage { sender: NodeId(3) }));
        assert_eq!(emit_dis(&n, 40, None, 50), None);
        assert_eq!(emit_dis(&n, 120, Some(100), 50), None);
        process_dio(&mut n, &dio(0, 0.0), 1.0, 0.5);
        assert_eq!(emit_dis(&n, 10_000, None, 50), None);

        let mut g = node(0);
        g.trickle.current_interval = 6400;
        g.trickle.counter = 4;
        process_dis(&mut g);
        assert_eq!(g.trickle.current_interval, g.trickle.interval_min);
        assert_eq!(g.trickle.counter, 0);
    }

    #[test]
    fn dao_routes() {
        let mut routes = RouteTable::new();
        let dao = DaoMessage { sender: NodeId(3), target: NodeId(7), via_parent: NodeId(1) };
        process_dao(&mut routes, &dao);
        assert_eq!(routes.get(&NodeId(7)), Some(&NodeId(3)));
        let snapshot = routes.clone();
        process_dao(&mut routes, &dao);
        assert_eq!(routes, snapshot);
        process_dao(&mut routes, &DaoMessage { sender: NodeId(4), target: NodeId(7), via_parent: NodeId(1) });
        assert_eq!(routes.get(&NodeId(7)), Some(&NodeId(4)));
    }

    fn with_parents(parents: &[Option<u32>]) -> Vec<NodeState> {
        parents
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let mut s = node(i as u32);
                s.default_parent = p.map(NodeId);
                s
            })
            .collect()
    }

    #[test]
    fn children_and_connections_chain() {
        // 2 -> 1 -> 0
        let mut states = with_parents(&[None, Some(0), Some(1)]);
        update_children_and_connections(&mut states).unwrap();
        assert_eq!(states[1].active_connections, 1);
        assert_eq!(states[1].children.iter().copied().collect::<Vec<_>>(), vec![NodeId(2)]);
        assert_eq!(states[2].active_connections, 0);
        assert_eq!(states[0].active_connections, 0);
    }

    #[test]
    fn children_and_connections_star() {
        let mut states = with_parents(&[None, Some(0), Some(1), Some(1), Some(1), Some(1)]);
        update_children_and_connections(&mut states).unwrap();
        assert_eq!(states[1].children_count(), 4);
        assert_eq!(states[1].active_connections, 4);
        let total: u32 = states.iter().map(|s| s.children_count()).sum();
        assert_eq!(total, 5);
    }

    #[test]
    fn loop_is_reported() {
        let mut states = with_parents(&[None, Some(2), Some(1)]);
        assert!(matches!(update_children_and_connections(&mut states), Err(RplError::Loop(_))));
        assert!(default_path(&states, NodeId(1)).is_err());
    }
}
