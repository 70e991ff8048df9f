//! Node placement and the physical-layer channel model.
//!
//! Meters are dropped as a homogeneous Poisson point process over a square
//! region with the gateway at the centre. Links use log-distance path loss
//! with Rayleigh (unit-mean exponential power) fading.

use std::fmt;
use std::io::{self, Write};

use rand::SeedableRng;
use rand::distr::{Distribution, Uniform};
use rand_chacha::ChaCha8Rng;
use rand_distr::Poisson;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{self, Stream};

/// Identifier of a node. `NodeId::GATEWAY` (0) is the DODAG root.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(pub u32);

impl NodeId {
    pub const GATEWAY: NodeId = NodeId(0);

    pub fn index(self) -> usize {
        self.0 as usize
    }

    pub fn is_gateway(self) -> bool {
        self == Self::GATEWAY
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TopologyError {
    #[error("degenerate-link: zero distance between distinct nodes")]
    DegenerateLink,
    #[error("disconnected-root: gateway has no neighbor within range after {attempts} placement attempts")]
    DisconnectedRoot { attempts: u32 },
    #[error("invalid region: side length must be positive, got {0}")]
    InvalidRegion(f64),
    #[error("invalid intensity: must be positive, got {0}")]
    InvalidIntensity(f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Region {
    pub side_length: f64,
}

impl Region {
    pub fn new(side_length: f64) -> Result<Self, TopologyError> {
        if side_length > 0.0 && side_length.is_finite() {
            Ok(Self { side_length })
        } else {
            Err(TopologyError::InvalidRegion(side_length))
        }
    }

    pub fn area(&self) -> f64 {
        self.side_length * self.side_length
    }

    pub fn center(&self) -> (f64, f64) {
        (self.side_length / 2.0, self.side_length / 2.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NodePlacement {
    pub id: NodeId,
    pub x: f64,
    pub y: f64,
}

impl NodePlacement {
    pub fn distance_to(&self, other: &NodePlacement) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ChannelMode {
    /// Success probability from the Rayleigh outage of the mean SINR.
    Physical,
    /// Every link succeeds with the same swept probability.
    SweptLsr,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChannelParams {
    pub tx_power_w: f64,
    pub path_loss_exponent: f64,
    pub reference_loss_db: f64,
    pub noise_floor_w: f64,
    pub tx_range: f64,
    pub mode: ChannelMode,
    pub lsr_value: f64,
    /// Outage threshold for `Physical` mode.
    pub sinr_threshold_db: f64,
}

impl Default for ChannelParams {
    fn default() -> Self {
        Self {
            tx_power_w: 2.0,
            path_loss_exponent: 3.0,
            reference_loss_db: 40.0,
            noise_floor_w: dbm_to_watts(-100.0),
            tx_range: 50.0,
            mode: ChannelMode::SweptLsr,
            lsr_value: 0.7,
            sinr_threshold_db: 10.0,
        }
    }
}

pub fn dbm_to_watts(dbm: f64) -> f64 {
    10f64.powf((dbm - 30.0) / 10.0)
}

pub fn watts_to_dbm(w: f64) -> f64 {
    10.0 * w.log10() + 30.0
}

pub fn db_to_linear(db: f64) -> f64 {
    10f64.powf(db / 10.0)
}

pub fn linear_to_db(x: f64) -> f64 {
    10.0 * x.log10()
}

/// A directed link between two neighbours, with its mean-channel figures.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinkModel {
    pub src: NodeId,
    pub dst: NodeId,
    pub distance: f64,
    pub mean_rx_power: f64,
    pub success_prob: f64,
    /// Interference-free mean SNR in dB.
    pub sinr_db: f64,
}

/// Draws `Poisson(intensity * area)` meters uniformly in the region and puts
/// the gateway (node 0) at the centre.
///
/// A draw whose gateway has no neighbour within `tx_range` is rejected and
/// retried with the next sub-seed, up to `max_attempts` draws in total.
pub fn place_nodes(
    region: &Region,
    intensity: f64,
    seed: u64,
    tx_range: f64,
    max_attempts: u32,
) -> Result<Vec<NodePlacement>, TopologyError> {
    if !(intensity > 0.0 && intensity.is_finite()) {
        return Err(TopologyError::InvalidIntensity(intensity));
    }
    let attempts = max_attempts.max(1);
    for attempt in 0..attempts {
        let placement = draw_placement(region, intensity, rng::derive_seed(seed, attempt as u64));
        let gw = placement[0];
        if placement[1..].iter().any(|p| p.distance_to(&gw) <= tx_range) {
            return Ok(placement);
        }
    }
    Err(TopologyError::DisconnectedRoot { attempts })
}

fn draw_placement(region: &Region, intensity: f64, seed: u64) -> Vec<NodePlacement> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mean = intensity * region.area();
    let count = if mean > 0.0 {
        Poisson::new(mean).map(|d| d.sample(&mut rng) as usize).unwrap_or(0)
    } else {
        0
    };
    let coord = Uniform::new_inclusive(0.0, region.side_length).expect("valid region");
    let (cx, cy) = region.center();
    let mut out = Vec::with_capacity(count + 1);
    out.push(NodePlacement { id: NodeId::GATEWAY, x: cx, y: cy });
    for i in 0..count {
        let x = coord.sample(&mut rng);
        let y = coord.sample(&mut rng);
        out.push(NodePlacement { id: NodeId(i as u32 + 1), x, y });
    }
    out
}

/// Log-distance attenuation `10^(-(L0 + 10 n log10 d) / 10)`.
pub fn path_loss_linear(distance: f64, params: &ChannelParams) -> Result<f64, TopologyError> {
    if distance <= 0.0 {
        return Err(TopologyError::DegenerateLink);
    }
    let loss_db = params.reference_loss_db + 10.0 * params.path_loss_exponent * distance.log10();
    Ok(10f64.powf(-loss_db / 10.0))
}

/// Rayleigh power gain for `src -> dst` in `slot`.
pub fn fading_gain(src: NodeId, dst: NodeId, slot: u64, seed: u64) -> f64 {
    rng::keyed_exp1(seed, Stream::Fading, &[src.0 as u64, dst.0 as u64, slot])
}

/// Rayleigh outage success probability with Rayleigh-faded interferers:
/// `exp(-g N / S) * prod_k 1 / (1 + g I_k / S)`.
pub fn rayleigh_success(signal: f64, noise: f64, interferers: &[f64], threshold_linear: f64) -> f64 {
    if signal <= 0.0 {
        return 0.0;
    }
    let base = (-threshold_linear * noise / signal).exp();
    interferers
        .iter()
        .fold(base, |acc, &i| acc / (1.0 + threshold_linear * i / signal))
}

/// Placements plus channel parameters, with the neighbour graph precomputed.
#[derive(Debug, Clone)]
pub struct Topology {
    placements: Vec<NodePlacement>,
    params: ChannelParams,
    adjacency: Vec<Vec<NodeId>>,
}

impl Topology {
    pub fn new(placements: Vec<NodePlacement>, params: ChannelParams) -> Self {
        debug_assert!(placements.iter().enumerate().all(|(i, p)| p.id.index() == i));
        let n = placements.len();
        let mut adjacency = vec![Vec::new(); n];
        for a in 0..n {
            for b in (a + 1)..n {
                if placements[a].distance_to(&placements[b]) <= params.tx_range {
                    adjacency[a].push(NodeId(b as u32));
                    adjacency[b].push(NodeId(a as u32));
                }
            }
        }
        for list in &mut adjacency {
            list.sort_unstable();
        }
        Self { placements, params, adjacency }
    }

    pub fn len(&self) -> usize {
        self.placements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.placements.is_empty()
    }

    pub fn params(&self) -> &ChannelParams {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ChannelParams {
        &mut self.params
    }

    pub fn placements(&self) -> &[NodePlacement] {
        &self.placements
    }

    pub fn node_ids(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.placements.iter().map(|p| p.id)
    }

    pub fn distance(&self, a: NodeId, b: NodeId) -> f64 {
        self.placements[a.index()].distance_to(&self.placements[b.index()])
    }

    /// All nodes within `tx_range` (closed ball), excluding `node`.
    pub fn neighbors(&self, node: NodeId) -> &[NodeId] {
        &self.adjacency[node.index()]
    }

    pub fn are_neighbors(&self, a: NodeId, b: NodeId) -> bool {
        a != b && self.adjacency[a.index()].binary_search(&b).is_ok()
    }

    /// Mean received power at `rx` from `tx`. Interferers closer than the
    /// 1 m reference distance are clamped to it.
    pub fn mean_rx_power(&self, tx: NodeId, rx: NodeId) -> f64 {
        let d = self.distance(tx, rx).max(1.0);
        self.params.tx_power_w * path_loss_linear(d, &self.params).unwrap_or(0.0)
    }

    pub fn mean_snr_linear(&self, tx: NodeId, rx: NodeId) -> f64 {
        self.mean_rx_power(tx, rx) / self.params.noise_floor_w
    }

    /// Link figures for `src -> dst`; `None` if the nodes are not neighbours.
    pub fn link(&self, src: NodeId, dst: NodeId) -> Option<LinkModel> {
        if !self.are_neighbors(src, dst) {
            return None;
        }
        let distance = self.distance(src, dst);
        let mean_rx_power = self.params.tx_power_w * path_loss_linear(distance, &self.params).ok()?;
        Some(LinkModel {
            src,
            dst,
            distance,
            mean_rx_power,
            success_prob: self.success_probability(src, dst, &[]),
            sinr_db: linear_to_db(mean_rx_power / self.params.noise_floor_w),
        })
    }

    /// SINR in dB at `rx` for a transmission from `tx` in `slot`, with every
    /// power term (signal and interferers) faded.
    pub fn compute_sinr(&self, rx: NodeId, tx: NodeId, interferers: &[NodeId], slot: u64, seed: u64) -> f64 {
        let signal = self.mean_rx_power(tx, rx) * fading_gain(tx, rx, slot, seed);
        let interference: f64 = interferers
            .iter()
            .filter(|&&i| i != tx && i != rx)
            .map(|&i| self.mean_rx_power(i, rx) * fading_gain(i, rx, slot, seed))
            .sum();
        linear_to_db(signal / (self.params.noise_floor_w + interference))
    }

    /// SINR in dB on the fading-mean channel.
    pub fn mean_sinr(&self, rx: NodeId, tx: NodeId, interferers: &[NodeId]) -> f64 {
        let signal = self.mean_rx_power(tx, rx);
        let interference: f64 = interferers
            .iter()
            .filter(|&&i| i != tx && i != rx)
            .map(|&i| self.mean_rx_power(i, rx))
            .sum();
        linear_to_db(signal / (self.params.noise_floor_w + interference))
    }

    /// Per-transmission success probability of `tx -> rx` while
    /// `interferers` transmit concurrently.
    ///
    /// `SweptLsr` ignores the channel and returns the swept value for every
    /// link. `Physical` uses the Rayleigh outage form against the configured
    /// threshold.
    pub fn success_probability(&self, tx: NodeId, rx: NodeId, interferers: &[NodeId]) -> f64 {
        match self.params.mode {
            ChannelMode::SweptLsr => self.params.lsr_value,
            ChannelMode::Physical => {
                let powers: Vec<f64> = interferers
                    .iter()
                    .filter(|&&i| i != tx && i != rx)
                    .map(|&i| self.mean_rx_power(i, rx))
                    .collect();
                rayleigh_success(
                    self.mean_rx_power(tx, rx),
                    self.params.noise_floor_w,
                    &powers,
                    db_to_linear(self.params.sinr_threshold_db),
                )
            }
        }
    }

    /// Nodes reachable from the gateway over the neighbour graph.
    pub fn reachable_from_gateway(&self) -> Vec<bool> {
        let mut seen = vec![false; self.len()];
        if self.is_empty() {
            return seen;
        }
        let mut stack = vec![NodeId::GATEWAY];
        seen[0] = true;
        while let Some(n) = stack.pop() {
            for &m in self.neighbors(n) {
                if !seen[m.index()] {
                    seen[m.index()] = true;
                    stack.push(m);
                }
            }
        }
        seen
    }

    pub fn write_placements_csv<W: Write>(&self, w: W) -> io::Result<()> {
        write_placements_csv(w, &self.placements)
    }
}

/// `node_id,x,y` with a header row.
pub fn write_placements_csv<W: Write>(mut w: W, placements: &[NodePlacement]) -> io::Result<()> {
    writeln!(w, "node_id,x,y")?;
    for p in placements {
        writeln!(w, "{},{:.6},{:.6}", p.id, p.x, p.y)?;
    }
    Ok(())
}
