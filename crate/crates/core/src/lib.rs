//! Deterministic discrete-event simulation of upward routing in smart-meter
//! mesh networks: plain RPL, opportunistic (anycast) RPL, and RPL with
//! cooperative relay selection.
//!
//! A run places meters around a central gateway, forms a DODAG with the RPL
//! control plane, then carries upward traffic hop by hop in slotted time.
//! All randomness is keyed on the scenario seed, so a run is reproducible
//! bit for bit and different protocols see the same channel draws.

pub mod config;
pub mod forwarding;
pub mod relay;
pub mod rng;
pub mod rpl;
pub mod sim;
pub mod sweep;
pub mod topology;
pub mod trace;

pub use config::{echo_config, parse_scenario, parse_scenario_str, ConfigError};
pub use forwarding::{Packet, PacketStatus, Protocol};
pub use relay::{RateWeights, RoutingClass};
pub use sim::{run_scenario, MetricsReport, RunReport, ScenarioConfig, Simulation};
pub use sweep::{emit_comparison, run_sweep, SweepAxis, SweepResult, SweepSpec};
pub use topology::{ChannelMode, ChannelParams, NodeId};
