//! Discrete-event scenario runner: placement, DAG formation, traffic and
//! metric collection.
//!
//! Events are processed in `(slot, kind, seq)` order. Formation runs the
//! full control plane (trickle-driven DIOs, DIS solicitation, DAO route
//! recording) over lossy links until the DAG has been quiet for the
//! stability window. The DAG is then frozen and upward traffic is carried
//! one transmission per slot, with all transmissions of a slot resolved as a
//! batch so they can interfere.

use std::cmp::{Ordering, Reverse};
use std::collections::BinaryHeap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::forwarding::{
    finish_hop, transmit, ForwardingParams, ForwardingSet, HopMachine, Packet, PacketStatus, Protocol,
    RoutingTables,
};
use crate::relay::{
    filter_candidates_by_rank, score_candidates, argmax, CandidateMetrics, RateScales, RateWeights,
    RoutingClass,
};
use crate::rng::{self, Stream};
use crate::rpl::{
    self, process_dao, process_dio, process_dis, trickle_fire, update_children_and_connections, DaoMessage,
    DioDecision, EtxEstimate, NodeState, RouteTable, TrickleState,
};
use crate::sweep::SweepSpec;
use crate::topology::{
    linear_to_db, place_nodes, ChannelParams, NodeId, NodePlacement, Region, Topology, TopologyError,
};
use crate::trace::{ControlEvent, PacketRecord, RelayDecision, TraceRecord};

const TRAFFIC_SALT: u64 = 0x7472_6166;

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Topology(#[from] TopologyError),
    #[error("no joined meter to generate traffic from")]
    NoSources,
    #[error("invalid config: {0}")]
    Invalid(#[from] ConfigIssue),
}

/// A semantic problem with one configuration key.
#[derive(Debug, Error, Clone, PartialEq)]
#[error("{key}: {message}")]
pub struct ConfigIssue {
    pub key: &'static str,
    pub message: String,
}

impl ConfigIssue {
    fn new(key: &'static str, message: impl Into<String>) -> Self {
        Self { key, message: message.into() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RplParams {
    pub etx_max: f64,
    pub ewma_alpha: f64,
    pub hysteresis: f64,
    pub trickle_imin_ms: u64,
    pub trickle_doublings: u32,
    pub trickle_k: u32,
    /// Slots an unjoined node waits for a DIO before soliciting with DIS.
    pub dis_timeout_slots: u64,
}

impl Default for RplParams {
    fn default() -> Self {
        Self {
            etx_max: rpl::DEFAULT_ETX_MAX,
            ewma_alpha: 0.3,
            hysteresis: 0.5,
            trickle_imin_ms: 100,
            trickle_doublings: 8,
            trickle_k: 10,
            dis_timeout_slots: 50,
        }
    }
}

/// Weight preset for each routing class.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassWeights(pub [RateWeights; 4]);

impl ClassWeights {
    pub fn get(&self, class: RoutingClass) -> RateWeights {
        self.0[Self::slot(class)]
    }

    pub fn set(&mut self, class: RoutingClass, w: RateWeights) {
        self.0[Self::slot(class)] = w;
    }

    fn slot(class: RoutingClass) -> usize {
        RoutingClass::ALL.iter().position(|&c| c == class).expect("known class")
    }
}

impl Default for ClassWeights {
    fn default() -> Self {
        Self(RoutingClass::ALL.map(RoutingClass::default_weights))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioConfig {
    pub region_side: f64,
    /// Meters per square metre at density ratio 1.
    pub base_intensity: f64,
    pub density_ratio: f64,
    pub placement_attempts: u32,
    pub channel: ChannelParams,
    pub protocol: Protocol,
    pub class: RoutingClass,
    pub weights: ClassWeights,
    pub p_coop: f64,
    pub per_slot_sinr: bool,
    pub max_retx: u32,
    pub relay_retx: u32,
    pub forwarding_set_size: usize,
    pub n_packets: u32,
    /// Slots over which packets are generated; 0 means `2 * n_packets`.
    pub traffic_window: u64,
    /// Upper bound on formation length in slots.
    pub warmup_slots: u64,
    pub stability_window: u64,
    pub slot_ms: f64,
    pub seed: u64,
    pub rpl: RplParams,
    pub sweep: SweepSpec,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            region_side: 300.0,
            base_intensity: 80.0 / (300.0 * 300.0),
            density_ratio: 1.0,
            placement_attempts: 100,
            channel: ChannelParams::default(),
            protocol: Protocol::CoopRpl,
            class: RoutingClass::BestEffort,
            weights: ClassWeights::default(),
            p_coop: 1.0,
            per_slot_sinr: false,
            max_retx: 3,
            relay_retx: 1,
            forwarding_set_size: 3,
            n_packets: 1000,
            traffic_window: 0,
            warmup_slots: 6000,
            stability_window: 20,
            slot_ms: 10.0,
            seed: 1,
            rpl: RplParams::default(),
            sweep: SweepSpec::default(),
        }
    }
}

fn probability(key: &'static str, p: f64) -> Result<(), ConfigIssue> {
    if (0.0..=1.0).contains(&p) {
        Ok(())
    } else {
        Err(ConfigIssue::new(key, format!("probability out of range: {p}")))
    }
}

fn positive(key: &'static str, x: f64) -> Result<(), ConfigIssue> {
    if x > 0.0 && x.is_finite() {
        Ok(())
    } else {
        Err(ConfigIssue::new(key, format!("must be positive: {x}")))
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<(), ConfigIssue> {
        positive("scenario.region_side", self.region_side)?;
        positive("scenario.base_intensity", self.base_intensity)?;
        positive("scenario.density_ratio", self.density_ratio)?;
        positive("channel.tx_power_w", self.channel.tx_power_w)?;
        positive("channel.path_loss_exponent", self.channel.path_loss_exponent)?;
        positive("channel.noise_floor_w", self.channel.noise_floor_w)?;
        positive("channel.tx_range", self.channel.tx_range)?;
        probability("channel.lsr_value", self.channel.lsr_value)?;
        probability("relay.p_coop", self.p_coop)?;
        for class in RoutingClass::ALL {
            let w = self.weights.get(class);
            if (w.sum() - 1.0).abs() > 1e-9 {
                return Err(ConfigIssue::new(
                    class_weight_key(class),
                    format!("weights must sum to 1 (got {})", w.sum()),
                ));
            }
            if w.as_array().iter().any(|x| !(0.0..=1.0).contains(x)) {
                return Err(ConfigIssue::new(class_weight_key(class), "each weight must lie in [0, 1]"));
            }
        }
        if self.n_packets == 0 {
            return Err(ConfigIssue::new("scenario.n_packets", "must be at least 1"));
        }
        if self.forwarding_set_size == 0 {
            return Err(ConfigIssue::new("forwarding.forwarding_set_size", "must be at least 1"));
        }
        positive("scenario.slot_ms", self.slot_ms)?;
        if self.stability_window == 0 {
            return Err(ConfigIssue::new("scenario.stability_window", "must be at least 1"));
        }
        probability("rpl.ewma_alpha", self.rpl.ewma_alpha)?;
        if self.rpl.etx_max < 1.0 {
            return Err(ConfigIssue::new("rpl.etx_max", "must be at least 1"));
        }
        if self.rpl.hysteresis < 0.0 {
            return Err(ConfigIssue::new("rpl.hysteresis", "must not be negative"));
        }
        if self.rpl.trickle_imin_ms == 0 {
            return Err(ConfigIssue::new("rpl.trickle_imin_ms", "must be at least 1"));
        }
        if self.rpl.dis_timeout_slots == 0 {
            return Err(ConfigIssue::new("rpl.dis_timeout_slots", "must be at least 1"));
        }
        self.sweep.validate()
    }

    pub fn intensity(&self) -> f64 {
        self.base_intensity * self.density_ratio
    }

    pub fn effective_traffic_window(&self) -> u64 {
        if self.traffic_window == 0 {
            2 * self.n_packets as u64
        } else {
            self.traffic_window
        }
    }

    pub fn forwarding_params(&self) -> ForwardingParams {
        ForwardingParams { max_retx: self.max_retx, relay_retx: self.relay_retx, p_coop: self.p_coop, seed: self.seed }
    }

    fn trickle(&self) -> TrickleState {
        TrickleState::new(self.rpl.trickle_imin_ms, self.rpl.trickle_doublings, self.rpl.trickle_k)
    }
}

pub fn class_weight_key(class: RoutingClass) -> &'static str {
    match class {
        RoutingClass::ClassA => "weights.class_a",
        RoutingClass::ClassB => "weights.class_b",
        RoutingClass::ClassC => "weights.class_c",
        RoutingClass::BestEffort => "weights.best_effort",
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub enum EventKind {
    TrickleFire,
    DioTx,
    DisTx,
    DaoTx,
    PacketGen,
    HopAttempt,
    MetricsSnapshot,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Payload {
    Node { node: NodeId, generation: u64 },
    Packet(u64),
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Event {
    slot: u64,
    kind: EventKind,
    seq: u64,
    payload: Payload,
}

impl Ord for Event {
    fn cmp(&self, other: &Self) -> Ordering {
        (self.slot, self.kind, self.seq).cmp(&(other.slot, other.kind, other.seq))
    }
}

impl PartialOrd for Event {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// One processed event, as recorded in the run's event log.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct LoggedEvent {
    pub slot: u64,
    pub kind: EventKind,
    pub seq: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PacketGen {
    pub packet_id: u64,
    pub source: NodeId,
    pub slot: u64,
}

/// `n_packets` generation events with sources uniform over `sources` and
/// slots uniform over `[start, start + window)`, sorted by slot then id.
pub fn generate_traffic(sources: &[NodeId], n_packets: u32, start: u64, window: u64, seed: u64) -> Vec<PacketGen> {
    if sources.is_empty() {
        return Vec::new();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng::derive_seed(seed, TRAFFIC_SALT));
    let window = window.max(1);
    let mut out: Vec<PacketGen> = (0..n_packets as u64)
        .map(|packet_id| {
            let source = sources[rng.random_range(0..sources.len())];
            let slot = start + rng.random_range(0..window);
            PacketGen { packet_id, source, slot }
        })
        .collect();
    out.sort_by_key(|g| (g.slot, g.packet_id));
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MetricsReport {
    pub pdr: f64,
    pub mean_retransmissions: f64,
    /// Over delivered packets; `None` when nothing was delivered.
    pub mean_delay_slots: Option<f64>,
    pub mean_delay_ms: Option<f64>,
    pub sent: u64,
    pub delivered: u64,
    pub dropped: u64,
}

/// Metrics over resolved packets. Retransmissions are averaged over every
/// packet, dropped ones included.
pub fn collect_metrics(packets: &[Packet], slot_ms: f64) -> MetricsReport {
    let sent = packets.len() as u64;
    let delivered: Vec<&Packet> = packets.iter().filter(|p| p.status == PacketStatus::Delivered).collect();
    let dropped = packets.iter().filter(|p| matches!(p.status, PacketStatus::Dropped(_))).count() as u64;
    let retx: u64 = packets.iter().map(|p| p.retransmissions() as u64).sum();
    let delay_sum: u64 = delivered.iter().filter_map(|p| p.delay_slots()).sum();
    let mean_delay_slots = (!delivered.is_empty()).then(|| delay_sum as f64 / delivered.len() as f64);
    MetricsReport {
        pdr: if sent == 0 { 0.0 } else { delivered.len() as f64 / sent as f64 },
        mean_retransmissions: if sent == 0 { 0.0 } else { retx as f64 / sent as f64 },
        mean_delay_slots,
        mean_delay_ms: mean_delay_slots.map(|d| d * slot_ms),
        sent,
        delivered: delivered.len() as u64,
        dropped,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct RunInfo {
    pub nodes: usize,
    pub reachable: usize,
    pub joined: usize,
    pub formation_slot: u64,
    /// Some meter has no path to the gateway; metrics cover reachable nodes.
    pub disconnected: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Snapshot {
    pub slot: u64,
    pub sent: u64,
    pub delivered: u64,
    pub dropped: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunReport {
    pub metrics: MetricsReport,
    pub info: RunInfo,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Phase {
    Formation,
    Traffic,
}

/// Per-link counts observed during the current hop of one packet.
#[derive(Debug, Clone, Default)]
struct HopObservations(Vec<(NodeId, NodeId, u64, u64)>);

impl HopObservations {
    fn add(&mut self, tx: NodeId, rx: NodeId, ok: bool) {
        match self.0.iter_mut().find(|o| o.0 == tx && o.1 == rx) {
            Some(o) => {
                o.2 += 1;
                o.3 += ok as u64;
            }
            None => self.0.push((tx, rx, 1, ok as u64)),
        }
    }
}

struct InFlight {
    machine: HopMachine,
    observed: HopObservations,
}

pub struct Simulation {
    config: ScenarioConfig,
    topo: Topology,
    scales: RateScales,
    states: Vec<NodeState>,
    /// ETX estimates aligned with `topo.neighbors(n)`.
    etx: Vec<Vec<EtxEstimate>>,
    routes: Vec<RouteTable>,
    reachable: Vec<bool>,
    queue: BinaryHeap<Reverse<Event>>,
    seq: u64,
    now: u64,
    phase: Phase,
    trickle_generation: Vec<u64>,
    trickle_fires: Vec<u64>,
    last_dio_heard: Vec<Option<u64>>,
    last_change: u64,
    formation_slot: Option<u64>,
    dag_dirty: bool,
    tables: RoutingTables,
    packets: Vec<Packet>,
    in_flight: Vec<Option<InFlight>>,
    resolved: usize,
    traffic_end: u64,
    log: Vec<LoggedEvent>,
    snapshots: Vec<Snapshot>,
    trace: Option<Vec<TraceRecord>>,
    control_seq: u64,
}

impl Simulation {
    /// Places nodes for the configured intensity and seed.
    pub fn new(config: ScenarioConfig) -> Result<Self, SimError> {
        config.validate()?;
        let region = Region::new(config.region_side)?;
        let placements = place_nodes(
            &region,
            config.intensity(),
            config.seed,
            config.channel.tx_range,
            config.placement_attempts,
        )?;
        Ok(Self::with_placements(config, placements))
    }

    pub fn with_placements(config: ScenarioConfig, placements: Vec<NodePlacement>) -> Self {
        let topo = Topology::new(placements, config.channel.clone());
        let n = topo.len();
        let p = &config.channel;
        let snr_db = |d: f64| {
            let rx = p.tx_power_w * crate::topology::path_loss_linear(d.max(1.0), p).unwrap_or(0.0);
            linear_to_db(rx / p.noise_floor_w)
        };
        let scales = RateScales {
            sinr_floor_db: snr_db(p.tx_range),
            sinr_ceiling_db: snr_db(1.0),
            count_max: n.saturating_sub(1).max(1) as f64,
            etx_max: config.rpl.etx_max,
        };
        let trickle = config.trickle();
        let states: Vec<NodeState> = (0..n).map(|i| NodeState::new(NodeId(i as u32), trickle)).collect();
        let etx = (0..n)
            .map(|i| {
                let a = NodeId(i as u32);
                topo.neighbors(a)
                    .iter()
                    .map(|&b| EtxEstimate::seeded(topo.success_probability(a, b, &[]), config.rpl.etx_max))
                    .collect()
            })
            .collect();
        let reachable = topo.reachable_from_gateway();
        let mut sim = Self {
            topo,
            scales,
            states,
            etx,
            routes: vec![RouteTable::new(); n],
            reachable,
            queue: BinaryHeap::new(),
            seq: 0,
            now: 0,
            phase: Phase::Formation,
            trickle_generation: vec![0; n],
            trickle_fires: vec![0; n],
            last_dio_heard: vec![None; n],
            last_change: 0,
            formation_slot: None,
            dag_dirty: true,
            tables: RoutingTables::default(),
            packets: Vec::new(),
            in_flight: Vec::new(),
            resolved: 0,
            traffic_end: 0,
            log: Vec::new(),
            snapshots: Vec::new(),
            trace: None,
            control_seq: 0,
            config,
        };
        if n > 0 {
            sim.schedule_trickle(NodeId::GATEWAY);
            for i in 1..n {
                let t = sim.config.rpl.dis_timeout_slots;
                sim.push(t, EventKind::DisTx, Payload::Node { node: NodeId(i as u32), generation: 0 });
            }
        }
        sim
    }

    pub fn enable_trace(&mut self) {
        self.trace.get_or_insert_with(Vec::new);
    }

    pub fn config(&self) -> &ScenarioConfig {
        &self.config
    }

    pub fn topology(&self) -> &Topology {
        &self.topo
    }

    pub fn states(&self) -> &[NodeState] {
        &self.states
    }

    pub fn routes(&self) -> &[RouteTable] {
        &self.routes
    }

    pub fn packets(&self) -> &[Packet] {
        &self.packets
    }

    pub fn event_log(&self) -> &[LoggedEvent] {
        &self.log
    }

    pub fn snapshots(&self) -> &[Snapshot] {
        &self.snapshots
    }

    pub fn trace(&self) -> &[TraceRecord] {
        self.trace.as_deref().unwrap_or(&[])
    }

    pub fn scales(&self) -> &RateScales {
        &self.scales
    }

    pub fn formation_slot(&self) -> Option<u64> {
        self.formation_slot
    }

    pub fn link_etx(&self, tx: NodeId, rx: NodeId) -> f64 {
        self.estimate(tx, rx).map_or(self.config.rpl.etx_max, |e| e.smoothed)
    }

    fn estimate(&self, tx: NodeId, rx: NodeId) -> Option<&EtxEstimate> {
        let k = self.topo.neighbors(tx).binary_search(&rx).ok()?;
        Some(&self.etx[tx.index()][k])
    }

    fn estimate_mut(&mut self, tx: NodeId, rx: NodeId) -> Option<&mut EtxEstimate> {
        let k = self.topo.neighbors(tx).binary_search(&rx).ok()?;
        Some(&mut self.etx[tx.index()][k])
    }

    fn push(&mut self, slot: u64, kind: EventKind, payload: Payload) {
        self.seq += 1;
        self.queue.push(Reverse(Event { slot, kind, seq: self.seq, payload }));
    }

    fn record(&mut self, r: TraceRecord) {
        if let Some(t) = &mut self.trace {
            t.push(r);
        }
    }

    fn trickle_slots(&self, ms: u64) -> u64 {
        ((ms as f64 / self.config.slot_ms).ceil() as u64).max(1)
    }

    /// Next trickle fire for `node` somewhere in the second half of its
    /// current interval. Older pending fires become stale.
    fn schedule_trickle(&mut self, node: NodeId) {
        let i = node.index();
        self.trickle_generation[i] += 1;
        self.trickle_fires[i] += 1;
        let interval = self.trickle_slots(self.states[i].trickle.current_interval);
        let half = interval / 2;
        let u = rng::keyed_uniform(self.config.seed, Stream::TrickleJitter, &[node.0 as u64, self.trickle_fires[i]]);
        let offset = (half + (u * (interval - half) as f64) as u64).max(1);
        let generation = self.trickle_generation[i];
        self.push(self.now + offset, EventKind::TrickleFire, Payload::Node { node, generation });
    }

    fn control_delivered(&mut self, tx: NodeId, rx: NodeId) -> bool {
        let p = self.topo.success_probability(tx, rx, &[]);
        rng::keyed_bernoulli(self.config.seed, Stream::Control, &[self.control_seq, tx.0 as u64, rx.0 as u64], p)
    }

    fn mark_changed(&mut self) {
        self.last_change = self.now;
        self.dag_dirty = true;
    }

    fn refresh_connections(&mut self) {
        if self.dag_dirty {
            // transient loops during formation only skew relay metrics
            let _ = update_children_and_connections(&mut self.states);
            self.dag_dirty = false;
        }
    }

    /// Metrics of every rank-filtered relay candidate for `sender`.
    /// Candidates must also hear the default parent.
    pub fn candidate_metrics(&self, sender: NodeId) -> Vec<CandidateMetrics> {
        let s = &self.states[sender.index()];
        let Some(parent) = s.default_parent else { return Vec::new() };
        let filtered = filter_candidates_by_rank(s, self.topo.neighbors(sender), &self.states);
        let sinr = |rx: NodeId, tx: NodeId| {
            if self.config.per_slot_sinr {
                self.topo.compute_sinr(rx, tx, &[], self.now, self.config.seed)
            } else {
                self.topo.mean_sinr(rx, tx, &[])
            }
        };
        let sinr_s_d = sinr(parent, sender);
        filtered
            .into_iter()
            .filter(|&r| self.topo.are_neighbors(r, parent))
            .map(|r| {
                let rs = &self.states[r.index()];
                CandidateMetrics {
                    relay: r,
                    sinr_s_r: sinr(r, sender),
                    sinr_r_d: sinr(parent, r),
                    sinr_s_d,
                    nac_r: rs.active_connections,
                    nac_s: s.active_connections,
                    nch_r: rs.children_count(),
                    nch_s: s.children_count(),
                    etx_s_r: self.link_etx(sender, r),
                    etx_r_d: self.link_etx(r, parent),
                    etx_s_d: self.link_etx(sender, parent),
                }
            })
            .collect()
    }

    fn weights(&self) -> RateWeights {
        self.config.weights.get(self.config.class)
    }

    /// Re-runs relay selection for `sender` under the configured class.
    fn refresh_relay(&mut self, sender: NodeId) {
        if self.config.protocol != Protocol::CoopRpl || sender.is_gateway() {
            return;
        }
        self.refresh_connections();
        let class = self.config.class;
        let admitted: Vec<CandidateMetrics> =
            self.candidate_metrics(sender).into_iter().filter(|m| class.admits(m)).collect();
        let scored = score_candidates(&admitted, &self.weights(), &self.scales);
        let selected = argmax(&scored);
        self.states[sender.index()].selected_relay = selected;
        if let Some(r) = self.tables.relay.get_mut(sender.index()) {
            *r = selected;
        }
        if self.trace.is_some() {
            self.record(TraceRecord::Relay(RelayDecision {
                slot: self.now,
                sender,
                class,
                candidates: scored,
                selected,
                used: selected.is_some() && self.config.p_coop > 0.0,
            }));
        }
    }

    fn trace_control(&mut self, kind: &'static str, sender: NodeId, relay: Option<NodeId>) {
        if self.trace.is_some() {
            let rank = self.states[sender.index()].rank;
            self.record(TraceRecord::Control(ControlEvent {
                slot: self.now,
                kind,
                sender,
                rank: rank.is_finite().then_some(rank.0),
                relay_suboption: relay,
            }));
        }
    }

    fn all_reachable_joined(&self) -> bool {
        self.states.iter().zip(&self.reachable).all(|(s, &r)| !r || s.is_joined())
    }

    /// Runs the control plane until the DAG is quiescent or the warm-up
    /// budget is spent, then freezes it.
    pub fn form_dag(&mut self) -> u64 {
        if let Some(t) = self.formation_slot {
            return t;
        }
        let end = loop {
            let Some(Reverse(next)) = self.queue.peek().copied() else {
                break self.now.max(self.last_change);
            };
            if self.all_reachable_joined() && next.slot > self.last_change + self.config.stability_window {
                break self.now.max(self.last_change + self.config.stability_window);
            }
            if next.slot > self.config.warmup_slots {
                break self.config.warmup_slots.max(self.now);
            }
            self.queue.pop();
            self.handle(next);
        };
        self.now = end;
        self.freeze();
        self.formation_slot = Some(end);
        end
    }

    /// Detaches nodes caught in default-parent cycles and builds the
    /// data-plane tables from the formed DAG.
    fn freeze(&mut self) {
        while let Err(rpl::RplError::Loop(start)) = update_children_and_connections(&mut self.states) {
            let mut cur = start;
            let mut seen = Vec::new();
            while let Some(p) = self.states[cur.index()].default_parent {
                if seen.contains(&cur) || cur.is_gateway() {
                    break;
                }
                seen.push(cur);
                cur = p;
            }
            let state = &mut self.states[cur.index()];
            state.default_parent = None;
            state.rank = rpl::Rank::INFINITE;
            state.parent_set.clear();
        }
        self.dag_dirty = false;
        self.phase = Phase::Traffic;
        let n = self.states.len();
        if self.config.protocol == Protocol::CoopRpl {
            for i in 1..n {
                self.refresh_relay(NodeId(i as u32));
            }
        }
        let size = self.config.forwarding_set_size;
        let forwarding_sets = (0..n)
            .map(|i| {
                (self.config.protocol == Protocol::OppRpl)
                    .then(|| {
                        ForwardingSet::build(
                            &self.states[i],
                            self.topo.neighbors(NodeId(i as u32)),
                            &self.states,
                            |a, b| self.link_etx(a, b),
                            size,
                        )
                    })
                    .flatten()
            })
            .collect();
        self.tables = RoutingTables {
            default_parent: self.states.iter().map(|s| s.default_parent).collect(),
            relay: self.states.iter().map(|s| s.selected_relay).collect(),
            forwarding_sets,
        };
    }

    /// Meters that can originate traffic.
    pub fn sources(&self) -> Vec<NodeId> {
        self.states.iter().filter(|s| !s.is_gateway() && s.is_joined()).map(|s| s.id).collect()
    }

    /// Generates the configured traffic after formation and runs until every
    /// packet is delivered or dropped.
    pub fn run_traffic(&mut self) -> Result<MetricsReport, SimError> {
        let formed = self.form_dag();
        let sources = self.sources();
        if sources.is_empty() {
            return Err(SimError::NoSources);
        }
        let window = self.config.effective_traffic_window();
        let gens = generate_traffic(&sources, self.config.n_packets, formed + 1, window, self.config.seed);
        self.traffic_end = formed + 1 + window;
        self.in_flight = (0..gens.len()).map(|_| None).collect();
        let mut packets: Vec<Packet> = gens.iter().map(|g| Packet::new(g.packet_id, g.source, g.slot)).collect();
        packets.sort_by_key(|p| p.packet_id);
        self.packets = packets;
        for g in &gens {
            self.push(g.slot, EventKind::PacketGen, Payload::Packet(g.packet_id));
        }
        self.push(self.traffic_end, EventKind::MetricsSnapshot, Payload::None);
        while self.resolved < self.packets.len() {
            let Some(Reverse(ev)) = self.queue.pop() else { break };
            if ev.kind == EventKind::HopAttempt {
                let mut batch = vec![ev];
                while let Some(Reverse(next)) = self.queue.peek() {
                    if next.slot == ev.slot && next.kind == EventKind::HopAttempt {
                        batch.push(self.queue.pop().expect("peeked").0);
                    } else {
                        break;
                    }
                }
                self.now = ev.slot;
                self.hop_batch(&batch);
            } else {
                self.handle(ev);
            }
        }
        self.snapshot();
        Ok(self.metrics())
    }

    pub fn metrics(&self) -> MetricsReport {
        collect_metrics(&self.packets, self.config.slot_ms)
    }

    pub fn info(&self) -> RunInfo {
        let reachable = self.reachable.iter().filter(|&&r| r).count();
        let joined = self.states.iter().filter(|s| s.is_joined()).count();
        RunInfo {
            nodes: self.states.len(),
            reachable,
            joined,
            formation_slot: self.formation_slot.unwrap_or(self.now),
            disconnected: reachable < self.states.len() || joined < reachable,
        }
    }

    fn snapshot(&mut self) {
        let m = self.metrics();
        let resolved = self.packets.iter().filter(|p| p.status != PacketStatus::InFlight);
        let (delivered, dropped) = resolved.fold((0, 0), |(d, x), p| match p.status {
            PacketStatus::Delivered => (d + 1, x),
            _ => (d, x + 1),
        });
        self.snapshots.push(Snapshot { slot: self.now, sent: m.sent, delivered, dropped });
    }

    fn handle(&mut self, ev: Event) {
        self.now = ev.slot;
        self.log.push(LoggedEvent { slot: ev.slot, kind: ev.kind, seq: ev.seq });
        match (ev.kind, ev.payload) {
            (EventKind::TrickleFire, Payload::Node { node, generation }) => self.on_trickle(node, generation),
            (EventKind::DioTx, Payload::Node { node, .. }) => self.on_dio(node),
            (EventKind::DisTx, Payload::Node { node, .. }) => self.on_dis(node),
            (EventKind::DaoTx, Payload::Node { node, .. }) => self.on_dao(node),
            (EventKind::PacketGen, Payload::Packet(id)) => self.on_packet_gen(id),
            (EventKind::MetricsSnapshot, _) => self.snapshot(),
            _ => {}
        }
    }

    fn on_trickle(&mut self, node: NodeId, generation: u64) {
        if self.trickle_generation[node.index()] != generation {
            return;
        }
        let (emit, _) = trickle_fire(&mut self.states[node.index()].trickle, true);
        if emit {
            self.push(self.now, EventKind::DioTx, Payload::Node { node, generation: 0 });
        }
        self.schedule_trickle(node);
    }

    fn on_dio(&mut self, sender: NodeId) {
        self.refresh_relay(sender);
        let dio = self.states[sender.index()].dio(1);
        self.trace_control("DIO", sender, dio.relay_suboption);
        if self.phase == Phase::Traffic {
            return;
        }
        self.control_seq += 1;
        let neighbors = self.topo.neighbors(sender).to_vec();
        for n in neighbors {
            if !self.control_delivered(sender, n) {
                continue;
            }
            self.last_dio_heard[n.index()] = Some(self.now);
            let link_etx = self.link_etx(n, sender);
            let before = self.states[n.index()].default_parent;
            let decision = process_dio(&mut self.states[n.index()], &dio, link_etx, self.config.rpl.hysteresis);
            match decision {
                DioDecision::Join | DioDecision::Update => {
                    self.mark_changed();
                    self.states[n.index()].trickle.reset();
                    self.schedule_trickle(n);
                    if self.states[n.index()].default_parent != before {
                        self.push(self.now + 1, EventKind::DaoTx, Payload::Node { node: n, generation: 0 });
                        self.refresh_relay(n);
                    }
                }
                DioDecision::Ignore => {
                    if self.states[n.index()].is_joined() {
                        self.states[n.index()].trickle.hear_consistent();
                    }
                }
            }
        }
    }

    fn on_dis(&mut self, node: NodeId) {
        if self.phase == Phase::Traffic || self.states[node.index()].is_joined() {
            return;
        }
        let timeout = self.config.rpl.dis_timeout_slots;
        let dis = rpl::emit_dis(&self.states[node.index()], self.now, self.last_dio_heard[node.index()], timeout);
        if dis.is_some() {
            self.trace_control("DIS", node, None);
            self.control_seq += 1;
            let neighbors = self.topo.neighbors(node).to_vec();
            for n in neighbors {
                if self.states[n.index()].is_joined() && self.control_delivered(node, n) {
                    process_dis(&mut self.states[n.index()]);
                    self.schedule_trickle(n);
                }
            }
        }
        self.push(self.now + timeout, EventKind::DisTx, Payload::Node { node, generation: 0 });
    }

    /// DAOs are carried reliably up the default path; every ancestor records
    /// the target behind the child it came from.
    fn on_dao(&mut self, node: NodeId) {
        let Some(parent) = self.states[node.index()].default_parent else { return };
        self.trace_control("DAO", node, None);
        let mut child = node;
        let mut hop = parent;
        for _ in 0..self.states.len() {
            process_dao(&mut self.routes[hop.index()], &DaoMessage { sender: child, target: node, via_parent: hop });
            match self.states[hop.index()].default_parent {
                Some(next) if !hop.is_gateway() => {
                    child = hop;
                    hop = next;
                }
                _ => break,
            }
        }
    }

    fn on_packet_gen(&mut self, id: u64) {
        let params = self.config.forwarding_params();
        let packet = &self.packets[id as usize];
        match self.tables.start_hop(self.config.protocol, packet, &params) {
            Ok(machine) => {
                self.in_flight[id as usize] = Some(InFlight { machine, observed: HopObservations::default() });
                self.push(self.now, EventKind::HopAttempt, Payload::Packet(id));
            }
            Err(reason) => {
                self.packets[id as usize].status = PacketStatus::Dropped(reason);
                self.resolve(id);
            }
        }
    }

    fn resolve(&mut self, id: u64) {
        self.resolved += 1;
        if self.trace.is_some() {
            let rec = PacketRecord::from(&self.packets[id as usize]);
            self.record(TraceRecord::Packet(rec));
        }
    }

    /// One slot of data transmissions. In `Physical` mode every other
    /// transmitter of the slot interferes.
    fn hop_batch(&mut self, batch: &[Event]) {
        let transmitters: Vec<NodeId> = batch
            .iter()
            .filter_map(|e| match e.payload {
                Payload::Packet(id) => self.in_flight[id as usize].as_ref().map(|f| f.machine.transmitter()),
                _ => None,
            })
            .collect();
        let seed = self.config.seed;
        for (k, ev) in batch.iter().enumerate() {
            self.log.push(LoggedEvent { slot: ev.slot, kind: ev.kind, seq: ev.seq });
            let Payload::Packet(id) = ev.payload else { continue };
            let Some(mut flight) = self.in_flight[id as usize].take() else { continue };
            let interferers: Vec<NodeId> = transmitters
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != k)
                .map(|(_, &t)| t)
                .collect();
            let topo = &self.topo;
            let observed = &mut flight.observed;
            let mut trial = |tx: NodeId, rx: NodeId, attempt: u32| {
                let p = topo.success_probability(tx, rx, &interferers);
                let ok = transmit(p, seed, id, tx, rx, attempt);
                observed.add(tx, rx, ok);
                ok
            };
            match flight.machine.step(&mut trial) {
                None => {
                    self.in_flight[id as usize] = Some(flight);
                    self.push(self.now + 1, EventKind::HopAttempt, Payload::Packet(id));
                }
                Some(outcome) => {
                    self.learn(&flight.observed);
                    let done = finish_hop(&mut self.packets[id as usize], &outcome, self.now);
                    if done {
                        self.resolve(id);
                        continue;
                    }
                    let params = self.config.forwarding_params();
                    match self.tables.start_hop(self.config.protocol, &self.packets[id as usize], &params) {
                        Ok(machine) => {
                            self.in_flight[id as usize] =
                                Some(InFlight { machine, observed: HopObservations::default() });
                            self.push(self.now + 1, EventKind::HopAttempt, Payload::Packet(id));
                        }
                        Err(reason) => {
                            self.packets[id as usize].status = PacketStatus::Dropped(reason);
                            self.resolve(id);
                        }
                    }
                }
            }
        }
    }

    fn learn(&mut self, observed: &HopObservations) {
        let (alpha, etx_max) = (self.config.rpl.ewma_alpha, self.config.rpl.etx_max);
        for &(tx, rx, attempts, successes) in &observed.0 {
            if let Some(e) = self.estimate_mut(tx, rx) {
                let _ = e.record(attempts, successes, alpha, etx_max);
            }
        }
    }

    pub fn tables(&self) -> &RoutingTables {
        &self.tables
    }

    pub fn report(&self) -> RunReport {
        RunReport { metrics: self.metrics(), info: self.info() }
    }
}

/// Places, forms, runs traffic and reports.
pub fn run_scenario(config: &ScenarioConfig) -> Result<RunReport, SimError> {
    let mut sim = Simulation::new(config.clone())?;
    sim.run_traffic()?;
    Ok(sim.report())
}
