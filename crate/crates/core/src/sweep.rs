//! Parameter sweeps, CSV output and protocol comparison.

use std::fmt;
use std::io::{self, Write};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::forwarding::Protocol;
use crate::relay::RoutingClass;
use crate::sim::{run_scenario, ConfigIssue, MetricsReport, ScenarioConfig};

/// Density ratios swept when only the axis is given. Below a ratio of 1
/// the default region is under its connectivity threshold and results
/// describe the gateway's cluster rather than the network.
pub const DEFAULT_DENSITY_VALUES: [f64; 5] = [1.0, 1.25, 1.5, 1.75, 2.0];

pub const CSV_HEADER: &str =
    "protocol,class,axis,axis_value,seed,pdr,mean_retx,mean_delay_slots,mean_delay_ms,sent,delivered,dropped";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SweepAxis {
    #[serde(rename = "lsr")]
    Lsr,
    #[serde(rename = "density")]
    DensityRatio,
}

impl SweepAxis {
    pub fn as_str(self) -> &'static str {
        match self {
            SweepAxis::Lsr => "lsr",
            SweepAxis::DensityRatio => "density",
        }
    }

    /// Writes `value` into the config field this axis controls.
    pub fn apply(self, config: &mut ScenarioConfig, value: f64) {
        match self {
            SweepAxis::Lsr => config.channel.lsr_value = value,
            SweepAxis::DensityRatio => config.density_ratio = value,
        }
    }
}

impl fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("unknown sweep axis '{0}' (expected lsr or density)")]
pub struct UnknownAxis(pub String);

impl FromStr for SweepAxis {
    type Err = UnknownAxis;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "lsr" => Ok(SweepAxis::Lsr),
            "density" | "density-ratio" | "density_ratio" => Ok(SweepAxis::DensityRatio),
            _ => Err(UnknownAxis(s.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepSpec {
    pub axis: SweepAxis,
    pub values: Vec<f64>,
    pub protocols: Vec<Protocol>,
    pub classes: Vec<RoutingClass>,
    /// Replications per point; seeds are `base, base + 1, ...`.
    pub seeds: u32,
    /// Worker threads; 0 uses one per core.
    pub workers: usize,
}

impl Default for SweepSpec {
    fn default() -> Self {
        Self {
            axis: SweepAxis::Lsr,
            values: vec![0.5, 0.6, 0.7, 0.8, 0.9],
            protocols: vec![Protocol::Rpl, Protocol::OppRpl, Protocol::CoopRpl],
            classes: RoutingClass::ALL.to_vec(),
            seeds: 20,
            workers: 0,
        }
    }
}

impl SweepSpec {
    pub fn validate(&self) -> Result<(), ConfigIssue> {
        let issue = |key, msg: String| Err(ConfigIssue { key, message: msg });
        if self.values.is_empty() {
            return issue("sweep.values", "must not be empty".into());
        }
        if self.values.windows(2).any(|w| w[0] >= w[1]) {
            return issue("sweep.values", "must be strictly increasing".into());
        }
        match self.axis {
            SweepAxis::Lsr => {
                if let Some(v) = self.values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
                    return issue("sweep.values", format!("probability out of range: {v}"));
                }
            }
            SweepAxis::DensityRatio => {
                if let Some(v) = self.values.iter().find(|v| !(**v > 0.0 && v.is_finite())) {
                    return issue("sweep.values", format!("density ratio must be positive: {v}"));
                }
            }
        }
        if self.protocols.is_empty() {
            return issue("sweep.protocols", "must not be empty".into());
        }
        if self.protocols.contains(&Protocol::CoopRpl) && self.classes.is_empty() {
            return issue("sweep.classes", "coop-rpl needs at least one class".into());
        }
        if self.seeds == 0 {
            return issue("sweep.seeds", "must be at least 1".into());
        }
        Ok(())
    }

    /// Protocol/class pairs in output order. Classes only apply to coop-rpl.
    pub fn variants(&self) -> Vec<(Protocol, Option<RoutingClass>)> {
        let mut out = Vec::new();
        for &p in &self.protocols {
            if p == Protocol::CoopRpl {
                out.extend(self.classes.iter().map(|&c| (p, Some(c))));
            } else {
                out.push((p, None));
            }
        }
        out
    }
}

fn class_cell(class: Option<RoutingClass>) -> &'static str {
    class.map_or("none", RoutingClass::as_str)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PointResult {
    pub protocol: Protocol,
    pub class: Option<RoutingClass>,
    pub axis: SweepAxis,
    pub axis_value: f64,
    pub seed: u64,
    pub outcome: Result<MetricsReport, String>,
}

/// Mean and sample standard deviation over the successful seeds of a point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stat {
    pub mean: f64,
    pub sd: f64,
}

impl Stat {
    pub fn of(xs: &[f64]) -> Option<Self> {
        if xs.is_empty() {
            return None;
        }
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let sd = if xs.len() > 1 {
            (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Some(Self { mean, sd })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Aggregate {
    pub protocol: Protocol,
    pub class: Option<RoutingClass>,
    pub axis: SweepAxis,
    pub axis_value: f64,
    pub pdr: Option<Stat>,
    pub mean_retx: Option<Stat>,
    pub mean_delay_slots: Option<Stat>,
    pub mean_delay_ms: Option<Stat>,
    pub sent: u64,
    pub delivered: u64,
    pub dropped: u64,
    pub failed: usize,
}

impl Aggregate {
    fn from_points(points: &[&PointResult]) -> Self {
        let first = points[0];
        let ok: Vec<&MetricsReport> = points.iter().filter_map(|p| p.outcome.as_ref().ok()).collect();
        let col = |f: &dyn Fn(&MetricsReport) -> Option<f64>| Stat::of(&ok.iter().filter_map(|m| f(m)).collect::<Vec<_>>());
        Self {
            protocol: first.protocol,
            class: first.class,
            axis: first.axis,
            axis_value: first.axis_value,
            pdr: col(&|m| Some(m.pdr)),
            mean_retx: col(&|m| Some(m.mean_retransmissions)),
            mean_delay_slots: col(&|m| m.mean_delay_slots),
            mean_delay_ms: col(&|m| m.mean_delay_ms),
            sent: ok.iter().map(|m| m.sent).sum(),
            delivered: ok.iter().map(|m| m.delivered).sum(),
            dropped: ok.iter().map(|m| m.dropped).sum(),
            failed: points.len() - ok.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub points: Vec<PointResult>,
    pub aggregates: Vec<Aggregate>,
}

impl SweepResult {
    pub fn failed(&self) -> usize {
        self.points.iter().filter(|p| p.outcome.is_err()).count()
    }

    pub fn aggregate(&self, protocol: Protocol, class: Option<RoutingClass>, axis_value: f64) -> Option<&Aggregate> {
        self.aggregates
            .iter()
            .find(|a| a.protocol == protocol && a.class == class && a.axis_value == axis_value)
    }

    /// Mean-over-seeds series for one variant, in sweep order.
    pub fn series(&self, protocol: Protocol, class: Option<RoutingClass>, f: impl Fn(&Aggregate) -> Option<f64>) -> Vec<Option<f64>> {
        self.aggregates
            .iter()
            .filter(|a| a.protocol == protocol && a.class == class)
            .map(f)
            .collect()
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "{CSV_HEADER}")?;
        let per_point = self.points.len() / self.aggregates.len().max(1);
        for (agg, chunk) in self.aggregates.iter().zip(self.points.chunks(per_point.max(1))) {
            for p in chunk {
                let lead = format!(
                    "{},{},{},{},{}",
                    p.protocol,
                    class_cell(p.class),
                    p.axis,
                    p.axis_value,
                    p.seed
                );
                match &p.outcome {
                    Ok(m) => writeln!(
                        w,
                        "{lead},{:.6},{:.6},{},{},{},{},{}",
                        m.pdr,
                        m.mean_retransmissions,
                        opt(m.mean_delay_slots),
                        opt(m.mean_delay_ms),
                        m.sent,
                        m.delivered,
                        m.dropped
                    )?,
                    Err(_) => writeln!(w, "{lead},failed,NA,NA,NA,NA,NA,NA")?,
                }
            }
            writeln!(
                w,
                "{},{},{},{},agg,{},{},{},{},{},{},{}",
                agg.protocol,
                class_cell(agg.class),
                agg.axis,
                agg.axis_value,
                stat(agg.pdr),
                stat(agg.mean_retx),
                stat(agg.mean_delay_slots),
                stat(agg.mean_delay_ms),
                agg.sent,
                agg.delivered,
                agg.dropped
            )?;
        }
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("ascii csv")
    }
}

fn opt(x: Option<f64>) -> String {
    x.map_or_else(|| "NA".to_string(), |v| format!("{v:.6}"))
}

fn stat(s: Option<Stat>) -> String {
    s.map_or_else(|| "NA".to_string(), |s| format!("{:.6}±{:.6}", s.mean, s.sd))
}

/// Runs every (variant, value, seed) point of `spec` on top of `base`.
/// A point that errors or panics is recorded as failed; the rest still run.
pub fn run_sweep(base: &ScenarioConfig, spec: &SweepSpec) -> SweepResult {
    let variants = spec.variants();
    let mut jobs = Vec::new();
    for &(protocol, class) in &variants {
        for &value in &spec.values {
            for k in 0..spec.seeds as u64 {
                jobs.push((protocol, class, value, base.seed.wrapping_add(k)));
            }
        }
    }
    let run = |&(protocol, class, value, seed): &(Protocol, Option<RoutingClass>, f64, u64)| {
        let mut c = base.clone();
        c.protocol = protocol;
        if let Some(class) = class {
            c.class = class;
        }
        c.seed = seed;
        spec.axis.apply(&mut c, value);
        let outcome = match catch_unwind(AssertUnwindSafe(|| run_scenario(&c))) {
            Ok(Ok(r)) => Ok(r.metrics),
            Ok(Err(e)) => Err(e.to_string()),
            Err(_) => Err("worker panicked".to_string()),
        };
        PointResult { protocol, class, axis: spec.axis, axis_value: value, seed, outcome }
    };
    let points: Vec<PointResult> = match rayon::ThreadPoolBuilder::new().num_threads(spec.workers).build() {
        Ok(pool) => pool.install(|| jobs.par_iter().map(run).collect()),
        Err(_) => jobs.iter().map(run).collect(),
    };
    let aggregates = points
        .chunks(spec.seeds as usize)
        .map(|chunk| Aggregate::from_points(&chunk.iter().collect::<Vec<_>>()))
        .collect();
    SweepResult { points, aggregates }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CompareError {
    #[error("missing baseline: no aggregate rows for {0}")]
    MissingBaseline(&'static str),
    #[error("no coop-rpl rows to compare")]
    NoCoop,
    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },
}

/// Max-over-sweep improvements of one coop-rpl class over the baselines,
/// in percentage points of PDR and percent of RPL delay.
#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub class: String,
    pub pdr_vs_rpl: Option<f64>,
    pub pdr_vs_opp: Option<f64>,
    pub delay_reduction_pct: Option<f64>,
}

#[derive(Debug, Clone)]
struct AggLine {
    protocol: String,
    class: String,
    axis_value: String,
    pdr: Option<f64>,
    delay: Option<f64>,
}

fn mean_cell(cell: &str) -> Option<f64> {
    cell.split('±').next().and_then(|m| m.parse().ok())
}

fn parse_aggregates(csv: &str) -> Result<Vec<AggLine>, CompareError> {
    let mut lines = csv.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == CSV_HEADER => {}
        _ => return Err(CompareError::Malformed { line: 1, message: "unexpected header".into() }),
    }
    let mut out = Vec::new();
    for (i, line) in lines {
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != 12 {
            return Err(CompareError::Malformed { line: i + 1, message: format!("expected 12 cells, got {}", cells.len()) });
        }
        if cells[4] != "agg" {
            continue;
        }
        out.push(AggLine {
            protocol: cells[0].to_string(),
            class: cells[1].to_string(),
            axis_value: cells[3].to_string(),
            pdr: mean_cell(cells[5]),
            delay: mean_cell(cells[7]),
        });
    }
    Ok(out)
}

fn max_opt(it: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    it.flatten().fold(None, |acc: Option<f64>, x| Some(acc.map_or(x, |a| a.max(x))))
}

fn at<'a>(set: &[&'a AggLine], v: &str) -> Option<&'a AggLine> {
    set.iter().find(|r| r.axis_value == v).copied()
}

/// Comparison of every coop-rpl class in `csv` against RPL and, when
/// present, opportunistic RPL.
pub fn compare_csv(csv: &str) -> Result<Vec<Comparison>, CompareError> {
    let rows = parse_aggregates(csv)?;
    let of = |proto: &str| rows.iter().filter(|r| r.protocol == proto).collect::<Vec<_>>();
    let rpl = of("rpl");
    if rpl.is_empty() {
        return Err(CompareError::MissingBaseline("rpl"));
    }
    let opp = of("opp-rpl");
    let coop = of("coop-rpl");
    if coop.is_empty() {
        return Err(CompareError::NoCoop);
    }
    let mut classes: Vec<&str> = Vec::new();
    for r in &coop {
        if !classes.contains(&r.class.as_str()) {
            classes.push(&r.class);
        }
    }
    Ok(classes
        .into_iter()
        .map(|class| {
            let mine: Vec<&AggLine> = coop.iter().filter(|r| r.class == class).copied().collect();
            let delta = |base: &[&AggLine]| {
                max_opt(mine.iter().map(|c| {
                    let b = at(base, &c.axis_value)?;
                    Some((c.pdr? - b.pdr?) * 100.0)
                }))
            };
            let delay = max_opt(mine.iter().map(|c| {
                let b = at(&rpl, &c.axis_value)?;
                let (bd, cd) = (b.delay?, c.delay?);
                (bd > 0.0).then(|| (bd - cd) / bd * 100.0)
            }));
            Comparison {
                class: class.to_string(),
                pdr_vs_rpl: delta(&rpl),
                pdr_vs_opp: if opp.is_empty() { None } else { delta(&opp) },
                delay_reduction_pct: delay,
            }
        })
        .collect())
}

/// Prints the comparison table for `csv` to `out`.
pub fn emit_comparison<W: Write>(csv: &str, mut out: W) -> Result<Vec<Comparison>, CompareError> {
    let rows = compare_csv(csv)?;
    let cell = |x: Option<f64>| x.map_or_else(|| "NA".to_string(), |v| format!("{v:+.2}"));
    let _ = writeln!(out, "{:<12} {:>16} {:>16} {:>18}", "class", "dPDR vs rpl", "dPDR vs opp-rpl", "delay reduction %");
    for c in &rows {
        let _ = writeln!(
            out,
            "{:<12} {:>16} {:>16} {:>18}",
            c.class,
            cell(c.pdr_vs_rpl),
            cell(c.pdr_vs_opp),
            cell(c.delay_reduction_pct)
        );
    }
    Ok(rows)
}
