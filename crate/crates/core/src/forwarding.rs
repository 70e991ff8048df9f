//! Upward data plane: per-hop engines for plain RPL, cooperative relaying
//! and forwarding-set anycast, plus whole-path routing.
//!
//! A hop is a small state machine that performs one transmission per
//! [`HopMachine::step`]. The event loop steps machines slot by slot so that
//! concurrent transmissions can interfere; the `forward_hop_*` helpers run a
//! machine to completion for callers that do not care about timing.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::relay::decide_use_relay;
use crate::rng::{self, Stream};
use crate::rpl::NodeState;
use crate::topology::NodeId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Protocol {
    #[serde(rename = "rpl")]
    Rpl,
    #[serde(rename = "opp-rpl")]
    OppRpl,
    #[serde(rename = "coop-rpl")]
    CoopRpl,
}

impl Protocol {
    pub fn as_str(self) -> &'static str {
        match self {
            Protocol::Rpl => "rpl",
            Protocol::OppRpl => "opp-rpl",
            Protocol::CoopRpl => "coop-rpl",
        }
    }
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("unknown protocol '{0}'")]
pub struct UnknownProtocol(pub String);

impl FromStr for Protocol {
    type Err = UnknownProtocol;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "rpl" => Ok(Protocol::Rpl),
            "opp-rpl" | "opprpl" | "opportunistic" => Ok(Protocol::OppRpl),
            "coop-rpl" | "cooprpl" | "coop" => Ok(Protocol::CoopRpl),
            _ => Err(UnknownProtocol(s.to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum DropReason {
    NoRoute,
    RetryLimit,
    Loop,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum PacketStatus {
    InFlight,
    Delivered,
    Dropped(DropReason),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Packet {
    pub packet_id: u64,
    pub source: NodeId,
    pub created_slot: u64,
    pub current_holder: NodeId,
    pub hop_count: u32,
    pub hops_attempted: u32,
    /// Transmissions by hop senders.
    pub total_transmissions: u32,
    /// Transmissions by cooperative relays.
    pub relay_transmissions: u32,
    /// Hops on which a relay forwarded at least once.
    pub relay_hops: u32,
    pub delivered_slot: Option<u64>,
    pub status: PacketStatus,
    /// Holders visited, source first.
    pub path: Vec<NodeId>,
}

impl Packet {
    pub fn new(packet_id: u64, source: NodeId, created_slot: u64) -> Self {
        Self {
            packet_id,
            source,
            created_slot,
            current_holder: source,
            hop_count: 0,
            hops_attempted: 0,
            total_transmissions: 0,
            relay_transmissions: 0,
            relay_hops: 0,
            delivered_slot: None,
            status: PacketStatus::InFlight,
            path: vec![source],
        }
    }

    /// Slots from creation to the end of the delivering transmission.
    pub fn delay_slots(&self) -> Option<u64> {
        self.delivered_slot.map(|d| d + 1 - self.created_slot)
    }

    /// Σ(attempts − 1) over attempted hops, plus every relay transmission.
    pub fn retransmissions(&self) -> u32 {
        self.total_transmissions + self.relay_transmissions - self.hops_attempted
    }

    fn apply(&mut self, hop: &HopOutcome) {
        self.hops_attempted += 1;
        self.total_transmissions += hop.attempts;
        self.relay_transmissions += hop.relay_attempts;
        if hop.relay_used {
            self.relay_hops += 1;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HopOutcome {
    pub attempts: u32,
    pub relay_used: bool,
    pub relay_attempts: u32,
    pub delivered: bool,
    pub slots_consumed: u32,
    /// Node holding the packet after a delivered hop.
    pub next_holder: Option<NodeId>,
}

/// Ordered next-hop candidates for anycast; the first member is the
/// owner's default parent.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ForwardingSet {
    pub owner: NodeId,
    pub members: Vec<NodeId>,
}

impl ForwardingSet {
    /// Default parent first, then other strictly lower-rank neighbours by
    /// `rank + link ETX` (lowest id on ties), truncated to `size`.
    pub fn build(
        owner: &NodeState,
        neighbors: &[NodeId],
        states: &[NodeState],
        link_etx: impl Fn(NodeId, NodeId) -> f64,
        size: usize,
    ) -> Option<Self> {
        let parent = owner.default_parent?;
        let mut others: Vec<(f64, NodeId)> = neighbors
            .iter()
            .copied()
            .filter(|&n| n != parent && n != owner.id && states[n.index()].rank < owner.rank)
            .map(|n| (states[n.index()].rank.0 + link_etx(owner.id, n), n))
            .collect();
        others.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let mut members = vec![parent];
        members.extend(others.into_iter().map(|(_, n)| n).take(size.saturating_sub(1)));
        Some(Self { owner: owner.id, members })
    }
}

/// Decides whether one transmission `tx -> rx` gets through. `attempt`
/// numbers transmissions on that link within the current hop, from 1.
pub trait LinkTrial {
    fn attempt(&mut self, tx: NodeId, rx: NodeId, attempt: u32) -> bool;
}

impl<F: FnMut(NodeId, NodeId, u32) -> bool> LinkTrial for F {
    fn attempt(&mut self, tx: NodeId, rx: NodeId, attempt: u32) -> bool {
        self(tx, rx, attempt)
    }
}

/// One Bernoulli trial, keyed on (packet, link, attempt) so replays and
/// protocol comparisons see the same draw for the same question.
pub fn transmit(success_prob: f64, seed: u64, packet_id: u64, tx: NodeId, rx: NodeId, attempt: u32) -> bool {
    rng::keyed_bernoulli(
        seed,
        Stream::LinkSuccess,
        &[packet_id, tx.0 as u64, rx.0 as u64, attempt as u64],
        success_prob,
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CoopPhase {
    Sender,
    Relay { remaining: u32 },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum HopMachine {
    Direct {
        sender: NodeId,
        parent: NodeId,
        max_attempts: u32,
        attempts: u32,
    },
    Cooperative {
        sender: NodeId,
        parent: NodeId,
        relay: Option<NodeId>,
        max_attempts: u32,
        relay_retx: u32,
        attempts: u32,
        relay_attempts: u32,
        relay_forwarded: bool,
        phase: CoopPhase,
    },
    Anycast {
        sender: NodeId,
        members: Vec<NodeId>,
        max_attempts: u32,
        attempts: u32,
    },
}

impl HopMachine {
    pub fn direct(sender: NodeId, parent: NodeId, max_retx: u32) -> Self {
        HopMachine::Direct { sender, parent, max_attempts: max_retx + 1, attempts: 0 }
    }

    pub fn cooperative(sender: NodeId, parent: NodeId, relay: Option<NodeId>, max_retx: u32, relay_retx: u32) -> Self {
        HopMachine::Cooperative {
            sender,
            parent,
            relay: relay.filter(|&r| r != parent && r != sender),
            max_attempts: max_retx + 1,
            relay_retx: relay_retx.max(1),
            attempts: 0,
            relay_attempts: 0,
            relay_forwarded: false,
            phase: CoopPhase::Sender,
        }
    }

    pub fn anycast(fset: &ForwardingSet, max_retx: u32) -> Self {
        debug_assert!(!fset.members.is_empty());
        HopMachine::Anycast { sender: fset.owner, members: fset.members.clone(), max_attempts: max_retx + 1, attempts: 0 }
    }

    /// Node that transmits on the next step.
    pub fn transmitter(&self) -> NodeId {
        match self {
            HopMachine::Direct { sender, .. } | HopMachine::Anycast { sender, .. } => *sender,
            HopMachine::Cooperative { sender, relay, phase, .. } => match phase {
                CoopPhase::Sender => *sender,
                CoopPhase::Relay { .. } => relay.expect("relay phase without relay"),
            },
        }
    }

    /// Performs one transmission. Returns the hop outcome once the hop is
    /// resolved, `None` while more transmissions are needed.
    pub fn step(&mut self, trial: &mut impl LinkTrial) -> Option<HopOutcome> {
        match self {
            HopMachine::Direct { sender, parent, max_attempts, attempts } => {
                *attempts += 1;
                let ok = trial.attempt(*sender, *parent, *attempts);
                (ok || *attempts >= *max_attempts).then(|| HopOutcome {
                    attempts: *attempts,
                    relay_used: false,
                    relay_attempts: 0,
                    delivered: ok,
                    slots_consumed: *attempts,
                    next_holder: ok.then_some(*parent),
                })
            }
            HopMachine::Cooperative {
                sender,
                parent,
                relay,
                max_attempts,
                relay_retx,
                attempts,
                relay_attempts,
                relay_forwarded,
                phase,
            } => {
                let done = |delivered: bool, attempts: u32, relay_attempts: u32, used: bool| HopOutcome {
                    attempts,
                    relay_used: used,
                    relay_attempts,
                    delivered,
                    slots_consumed: attempts + relay_attempts,
                    next_holder: delivered.then_some(*parent),
                };
                match *phase {
                    CoopPhase::Sender => {
                        *attempts += 1;
                        // one broadcast, heard independently by parent and relay
                        let direct = trial.attempt(*sender, *parent, *attempts);
                        if direct {
                            return Some(done(true, *attempts, *relay_attempts, *relay_forwarded));
                        }
                        if let Some(r) = *relay {
                            if trial.attempt(*sender, r, *attempts) {
                                *phase = CoopPhase::Relay { remaining: *relay_retx };
                                return None;
                            }
                        }
                        (*attempts >= *max_attempts)
                            .then(|| done(false, *attempts, *relay_attempts, *relay_forwarded))
                    }
                    CoopPhase::Relay { remaining } => {
                        let r = relay.expect("relay phase without relay");
                        *relay_attempts += 1;
                        *relay_forwarded = true;
                        if trial.attempt(r, *parent, *relay_attempts) {
                            return Some(done(true, *attempts, *relay_attempts, true));
                        }
                        if remaining > 1 {
                            *phase = CoopPhase::Relay { remaining: remaining - 1 };
                            None
                        } else if *attempts < *max_attempts {
                            *phase = CoopPhase::Sender;
                            None
                        } else {
                            Some(done(false, *attempts, *relay_attempts, true))
                        }
                    }
                }
            }
            HopMachine::Anycast { sender, members, max_attempts, attempts } => {
                *attempts += 1;
                // every member hears the same transmission; highest priority wins
                let mut winner = None;
                for &m in members.iter() {
                    if trial.attempt(*sender, m, *attempts) && winner.is_none() {
                        winner = Some(m);
                    }
                }
                (winner.is_some() || *attempts >= *max_attempts).then(|| HopOutcome {
                    attempts: *attempts,
                    relay_used: false,
                    relay_attempts: 0,
                    delivered: winner.is_some(),
                    slots_consumed: *attempts,
                    next_holder: winner,
                })
            }
        }
    }

    pub fn run(mut self, trial: &mut impl LinkTrial) -> HopOutcome {
        loop {
            if let Some(out) = self.step(trial) {
                return out;
            }
        }
    }
}

#[derive(Debug, Error, Clone, Copy, PartialEq, Eq)]
#[error("no-route: node {0} has no default parent")]
pub struct NoRoute(pub NodeId);

pub fn forward_hop_rpl(
    sender: NodeId,
    parent: Option<NodeId>,
    max_retx: u32,
    trial: &mut impl LinkTrial,
) -> Result<HopOutcome, NoRoute> {
    let parent = parent.ok_or(NoRoute(sender))?;
    Ok(HopMachine::direct(sender, parent, max_retx).run(trial))
}

/// Cooperative hop: each sender broadcast is judged against the parent and
/// the relay independently; a relay that overheard a failed transmission
/// forwards to the parent up to `relay_retx` times before the sender
/// resumes its own retries.
pub fn forward_hop_coop(
    sender: NodeId,
    parent: Option<NodeId>,
    relay: Option<NodeId>,
    max_retx: u32,
    relay_retx: u32,
    trial: &mut impl LinkTrial,
) -> Result<HopOutcome, NoRoute> {
    let parent = parent.ok_or(NoRoute(sender))?;
    Ok(HopMachine::cooperative(sender, parent, relay, max_retx, relay_retx).run(trial))
}

pub fn forward_hop_opportunistic(fset: &ForwardingSet, max_retx: u32, trial: &mut impl LinkTrial) -> Result<HopOutcome, NoRoute> {
    if fset.members.is_empty() {
        return Err(NoRoute(fset.owner));
    }
    Ok(HopMachine::anycast(fset, max_retx).run(trial))
}

/// Per-node routing state the data plane reads.
#[derive(Debug, Clone, Default)]
pub struct RoutingTables {
    pub default_parent: Vec<Option<NodeId>>,
    pub relay: Vec<Option<NodeId>>,
    pub forwarding_sets: Vec<Option<ForwardingSet>>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ForwardingParams {
    pub max_retx: u32,
    pub relay_retx: u32,
    pub p_coop: f64,
    pub seed: u64,
}

impl Default for ForwardingParams {
    fn default() -> Self {
        Self { max_retx: 3, relay_retx: 1, p_coop: 1.0, seed: 0 }
    }
}

impl RoutingTables {
    /// Hop engine for the packet's current holder.
    pub fn start_hop(&self, protocol: Protocol, packet: &Packet, params: &ForwardingParams) -> Result<HopMachine, DropReason> {
        let holder = packet.current_holder;
        let parent = self.default_parent[holder.index()].ok_or(DropReason::NoRoute)?;
        Ok(match protocol {
            Protocol::Rpl => HopMachine::direct(holder, parent, params.max_retx),
            Protocol::CoopRpl => {
                let selected = self.relay[holder.index()];
                let use_relay = decide_use_relay(selected, params.p_coop, params.seed, packet.packet_id, holder);
                let relay = if use_relay { selected } else { None };
                HopMachine::cooperative(holder, parent, relay, params.max_retx, params.relay_retx)
            }
            Protocol::OppRpl => match &self.forwarding_sets[holder.index()] {
                Some(fset) => HopMachine::anycast(fset, params.max_retx),
                None => HopMachine::direct(holder, parent, params.max_retx),
            },
        })
    }
}

/// Applies a resolved hop to the packet. Returns true once the packet has
/// left flight.
pub fn finish_hop(packet: &mut Packet, hop: &HopOutcome, slot: u64) -> bool {
    packet.apply(hop);
    if !hop.delivered {
        packet.status = PacketStatus::Dropped(DropReason::RetryLimit);
        return true;
    }
    let next = hop.next_holder.expect("delivered hop has a holder");
    packet.hop_count += 1;
    if packet.path.contains(&next) {
        packet.status = PacketStatus::Dropped(DropReason::Loop);
        return true;
    }
    packet.path.push(next);
    packet.current_holder = next;
    if next.is_gateway() {
        packet.status = PacketStatus::Delivered;
        packet.delivered_slot = Some(slot);
        return true;
    }
    false
}

/// Carries a packet hop by hop until it reaches the gateway or is dropped.
/// Hops run back to back, one slot per transmission, starting at the
/// packet's creation slot.
pub fn route_to_gateway(
    mut packet: Packet,
    protocol: Protocol,
    tables: &RoutingTables,
    params: &ForwardingParams,
    trial: &mut impl LinkTrial,
) -> (Packet, Vec<HopOutcome>) {
    let mut hops = Vec::new();
    let mut slot = packet.created_slot;
    while packet.status == PacketStatus::InFlight {
        if packet.current_holder.is_gateway() {
            packet.status = PacketStatus::Delivered;
            packet.delivered_slot = Some(slot.saturating_sub(1).max(packet.created_slot));
            break;
        }
        let machine = match tables.start_hop(protocol, &packet, params) {
            Ok(m) => m,
            Err(reason) => {
                packet.status = PacketStatus::Dropped(reason);
                break;
            }
        };
        let hop = machine.run(trial);
        slot += hop.slots_consumed as u64;
        finish_hop(&mut packet, &hop, slot - 1);
        hops.push(hop);
    }
    (packet, hops)
}
