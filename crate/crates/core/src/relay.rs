//! Cooperative relay selection.
//!
//! Selection runs in three stages for a sender `S` with default parent `D`:
//!
//! 1. rank filtering keeps neighbours strictly closer to the root than `S`;
//! 2. a class test decides which of them are candidate relays
//!    (A: both cooperative SINRs beat the direct one, B: fewer active
//!    connections and fewer children than the sender, C: the two-leg ETX
//!    beats the direct ETX);
//! 3. candidates are scored with a weighted rate and the best one wins.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{self, Stream};
use crate::rpl::NodeState;
use crate::topology::NodeId;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RelayError {
    #[error("weights must sum to 1 (got {0})")]
    WeightSum(f64),
    #[error("weight {0} out of [0, 1]")]
    WeightRange(f64),
    #[error("unknown routing class '{0}'")]
    UnknownClass(String),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RateWeights {
    pub w_sinr: f64,
    pub w_traffic: f64,
    pub w_nch: f64,
    pub w_etx: f64,
}

impl RateWeights {
    pub fn new(w_sinr: f64, w_traffic: f64, w_nch: f64, w_etx: f64) -> Result<Self, RelayError> {
        let w = Self { w_sinr, w_traffic, w_nch, w_etx };
        for v in w.as_array() {
            if !(0.0..=1.0).contains(&v) {
                return Err(RelayError::WeightRange(v));
            }
        }
        let sum = w.sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(RelayError::WeightSum(sum));
        }
        Ok(w)
    }

    /// Multiplies every weight by `c`, without re-validating the sum.
    pub fn scaled(&self, c: f64) -> Self {
        Self {
            w_sinr: self.w_sinr * c,
            w_traffic: self.w_traffic * c,
            w_nch: self.w_nch * c,
            w_etx: self.w_etx * c,
        }
    }

    pub fn sum(&self) -> f64 {
        self.w_sinr + self.w_traffic + self.w_nch + self.w_etx
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.w_sinr, self.w_traffic, self.w_nch, self.w_etx]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum RoutingClass {
    #[serde(rename = "class-a")]
    ClassA,
    #[serde(rename = "class-b")]
    ClassB,
    #[serde(rename = "class-c")]
    ClassC,
    #[serde(rename = "best-effort")]
    BestEffort,
}

impl RoutingClass {
    pub const ALL: [RoutingClass; 4] = [Self::ClassA, Self::ClassB, Self::ClassC, Self::BestEffort];

    pub fn default_weights(self) -> RateWeights {
        let [a, b, c, d] = match self {
            RoutingClass::ClassA => [0.85, 0.05, 0.05, 0.05],
            RoutingClass::ClassB => [0.05, 0.45, 0.45, 0.05],
            RoutingClass::ClassC => [0.05, 0.05, 0.05, 0.85],
            RoutingClass::BestEffort => [0.25, 0.25, 0.25, 0.25],
        };
        RateWeights { w_sinr: a, w_traffic: b, w_nch: c, w_etx: d }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            RoutingClass::ClassA => "class-a",
            RoutingClass::ClassB => "class-b",
            RoutingClass::ClassC => "class-c",
            RoutingClass::BestEffort => "best-effort",
        }
    }

    /// Whether `m` passes this class's candidacy test. Best effort admits
    /// anything that passes at least one of the three class tests.
    pub fn admits(self, m: &CandidateMetrics) -> bool {
        match self {
            RoutingClass::ClassA => eligible_class_a(m),
            RoutingClass::ClassB => eligible_class_b(m),
            RoutingClass::ClassC => eligible_class_c(m),
            RoutingClass::BestEffort => eligible_class_a(m) || eligible_class_b(m) || eligible_class_c(m),
        }
    }
}

impl fmt::Display for RoutingClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for RoutingClass {
    type Err = RelayError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "class-a" | "a" => Ok(Self::ClassA),
            "class-b" | "b" => Ok(Self::ClassB),
            "class-c" | "c" => Ok(Self::ClassC),
            "best-effort" | "be" | "besteffort" => Ok(Self::BestEffort),
            _ => Err(RelayError::UnknownClass(s.to_string())),
        }
    }
}

/// Everything the class tests and the rate need about one candidate `r`
/// for the hop `S -> D`. SINRs are in dB.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CandidateMetrics {
    pub relay: NodeId,
    pub sinr_s_r: f64,
    pub sinr_r_d: f64,
    pub sinr_s_d: f64,
    pub nac_r: u32,
    pub nac_s: u32,
    pub nch_r: u32,
    pub nch_s: u32,
    pub etx_s_r: f64,
    pub etx_r_d: f64,
    pub etx_s_d: f64,
}

/// Neighbours with strictly lower rank than the sender, minus its default
/// parent. Output is sorted by node id.
pub fn filter_candidates_by_rank(sender: &NodeState, neighbors: &[NodeId], states: &[NodeState]) -> Vec<NodeId> {
    let mut out: Vec<NodeId> = neighbors
        .iter()
        .copied()
        .filter(|&n| n != sender.id && Some(n) != sender.default_parent)
        .filter(|&n| states[n.index()].rank < sender.rank)
        .collect();
    out.sort_unstable();
    out
}

pub fn eligible_class_a(m: &CandidateMetrics) -> bool {
    m.sinr_s_r > m.sinr_s_d && m.sinr_r_d > m.sinr_s_d
}

pub fn eligible_class_b(m: &CandidateMetrics) -> bool {
    m.nac_r < m.nac_s && m.nch_r < m.nch_s
}

pub fn eligible_class_c(m: &CandidateMetrics) -> bool {
    m.etx_s_d > m.etx_s_r + m.etx_r_d
}

/// Fixed affine scales that bring each rate term into `[0, 1]`.
///
/// The scales are scenario constants, so a candidate's rate depends only on
/// its own metrics and never on which other candidates are present.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RateScales {
    pub sinr_floor_db: f64,
    pub sinr_ceiling_db: f64,
    pub count_max: f64,
    pub etx_max: f64,
}

impl RateScales {
    fn unit(x: f64, lo: f64, hi: f64) -> f64 {
        if hi > lo {
            ((x - lo) / (hi - lo)).clamp(0.0, 1.0)
        } else {
            0.5
        }
    }

    pub fn sinr(&self, db: f64) -> f64 {
        Self::unit(db, self.sinr_floor_db, self.sinr_ceiling_db)
    }

    pub fn count(&self, n: u32) -> f64 {
        Self::unit(n as f64, 0.0, self.count_max)
    }

    /// ETX of a two-leg path, which lies in `[2, 2 * etx_max]`.
    pub fn etx_pair(&self, sum: f64) -> f64 {
        Self::unit(sum, 2.0, 2.0 * self.etx_max)
    }
}

impl Default for RateScales {
    fn default() -> Self {
        Self { sinr_floor_db: 0.0, sinr_ceiling_db: 60.0, count_max: 100.0, etx_max: 16.0 }
    }
}

/// `w_sinr·min(SINR_sr, SINR_rd) − w_traffic·NAC_r − w_nch·NCh_r − w_etx·(ETX_sr + ETX_rd)`
/// over normalised terms.
pub fn compute_rate(m: &CandidateMetrics, w: &RateWeights, scales: &RateScales) -> f64 {
    w.w_sinr * scales.sinr(m.sinr_s_r.min(m.sinr_r_d))
        - w.w_traffic * scales.count(m.nac_r)
        - w.w_nch * scales.count(m.nch_r)
        - w.w_etx * scales.etx_pair(m.etx_s_r + m.etx_r_d)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ScoredCandidate {
    pub id: NodeId,
    pub rate: f64,
}

/// Rates for every candidate, in input order.
pub fn score_candidates(candidates: &[CandidateMetrics], w: &RateWeights, scales: &RateScales) -> Vec<ScoredCandidate> {
    candidates
        .iter()
        .map(|m| ScoredCandidate { id: m.relay, rate: compute_rate(m, w, scales) })
        .collect()
}

/// Argmax of the rate; ties go to the lowest node id.
pub fn select_relay(candidates: &[CandidateMetrics], w: &RateWeights, scales: &RateScales) -> Option<NodeId> {
    argmax(&score_candidates(candidates, w, scales))
}

pub fn argmax(scored: &[ScoredCandidate]) -> Option<NodeId> {
    scored
        .iter()
        .max_by(|a, b| a.rate.total_cmp(&b.rate).then(b.id.cmp(&a.id)))
        .map(|c| c.id)
}

/// Bernoulli(`p_coop`) per (packet, sender), false when no relay exists.
pub fn decide_use_relay(selected: Option<NodeId>, p_coop: f64, seed: u64, packet_id: u64, sender: NodeId) -> bool {
    selected.is_some() && rng::keyed_bernoulli(seed, Stream::RelayUse, &[packet_id, sender.0 as u64], p_coop)
}
