//! Scenario files.
//!
//! A scenario file is TOML with one table per concern. Every key is
//! optional; missing keys take the defaults below, unknown keys are errors.
//!
//! ```toml
//! [scenario]
//! seed = 1
//! region_side = 300.0          # metres
//! base_intensity = 0.000888…   # meters per m² at density ratio 1 (≈80 nodes)
//! density_ratio = 1.0
//! placement_attempts = 100
//! n_packets = 1000
//! traffic_window = 0           # slots; 0 means 2 × n_packets
//! warmup_slots = 6000          # formation budget
//! stability_window = 20        # quiet slots that end formation
//! slot_ms = 10.0
//!
//! [channel]
//! mode = "swept-lsr"           # or "physical"
//! lsr_value = 0.7
//! tx_power_w = 2.0
//! path_loss_exponent = 3.0
//! reference_loss_db = 40.0
//! noise_floor_w = 1e-13        # −100 dBm
//! tx_range = 50.0
//! sinr_threshold_db = 10.0
//!
//! [rpl]
//! etx_max = 16.0
//! ewma_alpha = 0.3
//! hysteresis = 0.5
//! trickle_imin_ms = 100
//! trickle_doublings = 8
//! trickle_k = 10
//! dis_timeout_slots = 50
//!
//! [forwarding]
//! protocol = "coop-rpl"        # rpl | opp-rpl | coop-rpl
//! max_retx = 3
//! relay_retx = 1
//! forwarding_set_size = 3
//!
//! [relay]
//! class = "best-effort"        # class-a | class-b | class-c | best-effort
//! p_coop = 1.0
//! per_slot_sinr = false
//!
//! [weights]                    # w_sinr, w_traffic, w_nch, w_etx
//! class_a = [0.85, 0.05, 0.05, 0.05]
//! class_b = [0.05, 0.45, 0.45, 0.05]
//! class_c = [0.05, 0.05, 0.05, 0.85]
//! best_effort = [0.25, 0.25, 0.25, 0.25]
//!
//! [sweep]
//! axis = "lsr"                 # or "density"
//! values = [0.5, 0.6, 0.7, 0.8, 0.9]
//! protocols = ["rpl", "opp-rpl", "coop-rpl"]
//! classes = ["class-a", "class-b", "class-c", "best-effort"]
//! seeds = 20
//! workers = 0                  # 0: one per core
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::forwarding::Protocol;
use crate::relay::{RateWeights, RoutingClass};
use crate::sim::{ClassWeights, RplParams, ScenarioConfig};
use crate::sweep::{SweepAxis, SweepSpec};
use crate::topology::{ChannelMode, ChannelParams};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{origin}:{line}: {message}")]
    Syntax { origin: String, line: usize, message: String },
    #[error("{origin}:{line}: {key}: {message}")]
    Invalid { origin: String, line: usize, key: String, message: String },
}

impl ConfigError {
    pub fn line(&self) -> Option<usize> {
        match self {
            ConfigError::Io { .. } => None,
            ConfigError::Syntax { line, .. } | ConfigError::Invalid { line, .. } => Some(*line),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct ScenarioSection {
    seed: u64,
    region_side: f64,
    base_intensity: f64,
    density_ratio: f64,
    placement_attempts: u32,
    n_packets: u32,
    traffic_window: u64,
    warmup_slots: u64,
    stability_window: u64,
    slot_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct ChannelSection {
    mode: ChannelMode,
    lsr_value: f64,
    tx_power_w: f64,
    path_loss_exponent: f64,
    reference_loss_db: f64,
    noise_floor_w: f64,
    tx_range: f64,
    sinr_threshold_db: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RplSection {
    etx_max: f64,
    ewma_alpha: f64,
    hysteresis: f64,
    trickle_imin_ms: u64,
    trickle_doublings: u32,
    trickle_k: u32,
    dis_timeout_slots: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct ForwardingSection {
    protocol: Protocol,
    max_retx: u32,
    relay_retx: u32,
    forwarding_set_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RelaySection {
    class: RoutingClass,
    p_coop: f64,
    per_slot_sinr: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct WeightsSection {
    class_a: [f64; 4],
    class_b: [f64; 4],
    class_c: [f64; 4],
    best_effort: [f64; 4],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct SweepSection {
    axis: SweepAxis,
    values: Vec<f64>,
    protocols: Vec<Protocol>,
    classes: Vec<RoutingClass>,
    seeds: u32,
    workers: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct ConfigFile {
    scenario: ScenarioSection,
    channel: ChannelSection,
    rpl: RplSection,
    forwarding: ForwardingSection,
    relay: RelaySection,
    weights: WeightsSection,
    sweep: SweepSection,
}

impl From<&ScenarioConfig> for ConfigFile {
    fn from(c: &ScenarioConfig) -> Self {
        let ch = &c.channel;
        let w = |class| c.weights.get(class).as_array();
        ConfigFile {
            scenario: ScenarioSection {
                seed: c.seed,
                region_side: c.region_side,
                base_intensity: c.base_intensity,
                density_ratio: c.density_ratio,
                placement_attempts: c.placement_attempts,
                n_packets: c.n_packets,
                traffic_window: c.traffic_window,
                warmup_slots: c.warmup_slots,
                stability_window: c.stability_window,
                slot_ms: c.slot_ms,
            },
            channel: ChannelSection {
                mode: ch.mode,
                lsr_value: ch.lsr_value,
                tx_power_w: ch.tx_power_w,
                path_loss_exponent: ch.path_loss_exponent,
                reference_loss_db: ch.reference_loss_db,
                noise_floor_w: ch.noise_floor_w,
                tx_range: ch.tx_range,
                sinr_threshold_db: ch.sinr_threshold_db,
            },
            rpl: RplSection {
                etx_max: c.rpl.etx_max,
                ewma_alpha: c.rpl.ewma_alpha,
                hysteresis: c.rpl.hysteresis,
                trickle_imin_ms: c.rpl.trickle_imin_ms,
                trickle_doublings: c.rpl.trickle_doublings,
                trickle_k: c.rpl.trickle_k,
                dis_timeout_slots: c.rpl.dis_timeout_slots,
            },
            forwarding: ForwardingSection {
                protocol: c.protocol,
                max_retx: c.max_retx,
                relay_retx: c.relay_retx,
                forwarding_set_size: c.forwarding_set_size,
            },
            relay: RelaySection { class: c.class, p_coop: c.p_coop, per_slot_sinr: c.per_slot_sinr },
            weights: WeightsSection {
                class_a: w(RoutingClass::ClassA),
                class_b: w(RoutingClass::ClassB),
                class_c: w(RoutingClass::ClassC),
                best_effort: w(RoutingClass::BestEffort),
            },
            sweep: SweepSection {
                axis: c.sweep.axis,
                values: c.sweep.values.clone(),
                protocols: c.sweep.protocols.clone(),
                classes: c.sweep.classes.clone(),
                seeds: c.sweep.seeds,
                workers: c.sweep.workers,
            },
        }
    }
}

impl From<ConfigFile> for ScenarioConfig {
    fn from(f: ConfigFile) -> Self {
        let weights = |[a, b, c, d]: [f64; 4]| RateWeights { w_sinr: a, w_traffic: b, w_nch: c, w_etx: d };
        let mut class_weights = ClassWeights::default();
        class_weights.set(RoutingClass::ClassA, weights(f.weights.class_a));
        class_weights.set(RoutingClass::ClassB, weights(f.weights.class_b));
        class_weights.set(RoutingClass::ClassC, weights(f.weights.class_c));
        class_weights.set(RoutingClass::BestEffort, weights(f.weights.best_effort));
        ScenarioConfig {
            region_side: f.scenario.region_side,
            base_intensity: f.scenario.base_intensity,
            density_ratio: f.scenario.density_ratio,
            placement_attempts: f.scenario.placement_attempts,
            channel: ChannelParams {
                tx_power_w: f.channel.tx_power_w,
                path_loss_exponent: f.channel.path_loss_exponent,
                reference_loss_db: f.channel.reference_loss_db,
                noise_floor_w: f.channel.noise_floor_w,
                tx_range: f.channel.tx_range,
                mode: f.channel.mode,
                lsr_value: f.channel.lsr_value,
                sinr_threshold_db: f.channel.sinr_threshold_db,
            },
            protocol: f.forwarding.protocol,
            class: f.relay.class,
            weights: class_weights,
            p_coop: f.relay.p_coop,
            per_slot_sinr: f.relay.per_slot_sinr,
            max_retx: f.forwarding.max_retx,
            relay_retx: f.forwarding.relay_retx,
            forwarding_set_size: f.forwarding.forwarding_set_size,
            n_packets: f.scenario.n_packets,
            traffic_window: f.scenario.traffic_window,
            warmup_slots: f.scenario.warmup_slots,
            stability_window: f.scenario.stability_window,
            slot_ms: f.scenario.slot_ms,
            seed: f.scenario.seed,
            rpl: RplParams {
                etx_max: f.rpl.etx_max,
                ewma_alpha: f.rpl.ewma_alpha,
                hysteresis: f.rpl.hysteresis,
                trickle_imin_ms: f.rpl.trickle_imin_ms,
                trickle_doublings: f.rpl.trickle_doublings,
                trickle_k: f.rpl.trickle_k,
                dis_timeout_slots: f.rpl.dis_timeout_slots,
            },
            sweep: SweepSpec {
                axis: f.sweep.axis,
                values: f.sweep.values,
                protocols: f.sweep.protocols,
                classes: f.sweep.classes,
                seeds: f.sweep.seeds,
                workers: f.sweep.workers,
            },
        }
    }
}

macro_rules! section_defaults {
    ($($ty:ident => $field:ident),*) => {$(
        impl Default for $ty {
            fn default() -> Self {
                ConfigFile::from(&ScenarioConfig::default()).$field
            }
        }
    )*};
}

section_defaults!(
    ScenarioSection => scenario,
    ChannelSection => channel,
    RplSection => rpl,
    ForwardingSection => forwarding,
    RelaySection => relay,
    WeightsSection => weights,
    SweepSection => sweep
);

impl Default for ConfigFile {
    fn default() -> Self {
        ConfigFile::from(&ScenarioConfig::default())
    }
}

fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

/// Line of `section.key` in `text`, falling back to the section header and
/// then to line 1.
fn line_of_key(text: &str, dotted: &str) -> usize {
    let (section, key) = dotted.split_once('.').unwrap_or(("", dotted));
    let mut current = "";
    let mut header = None;
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
            current = name.trim();
            if current == section {
                header = Some(i + 1);
            }
        } else if current == section {
            if let Some((k, _)) = line.split_once('=') {
                if k.trim() == key {
                    return i + 1;
                }
            }
        }
    }
    header.unwrap_or(1)
}

/// Parses scenario text; `origin` names the source in diagnostics.
pub fn parse_scenario_str(text: &str, origin: &str) -> Result<ScenarioConfig, ConfigError> {
    let file: ConfigFile = toml::from_str(text).map_err(|e| ConfigError::Syntax {
        origin: origin.to_string(),
        line: e.span().map_or(1, |s| line_of(text, s.start)),
        message: e.message().to_string(),
    })?;
    let config = ScenarioConfig::from(file);
    config.validate().map_err(|issue| ConfigError::Invalid {
        origin: origin.to_string(),
        line: line_of_key(text, issue.key),
        key: issue.key.to_string(),
        message: issue.message,
    })?;
    Ok(config)
}

pub fn parse_scenario(path: &Path) -> Result<ScenarioConfig, ConfigError> {
    let text = fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.to_path_buf(), source })?;
    parse_scenario_str(&text, &path.display().to_string())
}

/// The fully resolved configuration in scenario-file syntax.
pub fn echo_config(config: &ScenarioConfig) -> String {
    toml::to_string(&ConfigFile::from(config)).expect("config serialises")
}
