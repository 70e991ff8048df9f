//! JSON-lines trace records.

use std::io::{self, Write};

use serde::Serialize;

use crate::forwarding::{DropReason, Packet, PacketStatus};
use crate::relay::{RoutingClass, ScoredCandidate};
use crate::topology::NodeId;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ControlEvent {
    pub slot: u64,
    #[serde(rename = "type")]
    pub kind: &'static str,
    pub sender: NodeId,
    /// `None` while the sender has not joined.
    pub rank: Option<f64>,
    pub relay_suboption: Option<NodeId>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RelayDecision {
    pub slot: u64,
    pub sender: NodeId,
    pub class: RoutingClass,
    pub candidates: Vec<ScoredCandidate>,
    pub selected: Option<NodeId>,
    pub used: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PacketRecord {
    pub packet_id: u64,
    pub source: NodeId,
    pub status: &'static str,
    pub hops: u32,
    pub transmissions: u32,
    pub relay_hops: u32,
    pub delay_slots: Option<u64>,
}

impl From<&Packet> for PacketRecord {
    fn from(p: &Packet) -> Self {
        let status = match p.status {
            PacketStatus::InFlight => "in-flight",
            PacketStatus::Delivered => "delivered",
            PacketStatus::Dropped(DropReason::NoRoute) => "dropped:no-route",
            PacketStatus::Dropped(DropReason::RetryLimit) => "dropped:retry-limit",
            PacketStatus::Dropped(DropReason::Loop) => "dropped:loop",
        };
        Self {
            packet_id: p.packet_id,
            source: p.source,
            status,
            hops: p.hop_count,
            transmissions: p.total_transmissions + p.relay_transmissions,
            relay_hops: p.relay_hops,
            delay_slots: p.delay_slots(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(untagged)]
pub enum TraceRecord {
    Control(ControlEvent),
    Relay(RelayDecision),
    Packet(PacketRecord),
}

/// Writes one JSON object per line. `tag`, when given, is merged into every
/// object as a `run` field so traces from several runs can share a file.
pub fn write_jsonl<W: Write>(mut w: W, records: &[TraceRecord], tag: Option<&str>) -> io::Result<()> {
    for r in records {
        let mut value = serde_json::to_value(r).map_err(io::Error::other)?;
        if let (Some(tag), Some(obj)) = (tag, value.as_object_mut()) {
            obj.insert("run".into(), serde_json::Value::String(tag.to_string()));
        }
        serde_json::to_writer(&mut w, &value).map_err(io::Error::other)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn control_record_shape() {
        let r = TraceRecord::Control(ControlEvent {
            slot: 4,
            kind: "DIO",
            sender: NodeId(3),
            rank: Some(2.0),
            relay_suboption: Some(NodeId(7)),
        });
        let mut buf = Vec::new();
        write_jsonl(&mut buf, &[r], None).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "{\"rank\":2.0,\"relay_suboption\":7,\"sender\":3,\"slot\":4,\"type\":\"DIO\"}\n"
        );
    }

    #[test]
    fn packet_record_fields() {
        let mut p = Packet::new(9, NodeId(4), 10);
        p.status = PacketStatus::Delivered;
        p.delivered_slot = Some(12);
        p.hop_count = 2;
        p.total_transmissions = 3;
        p.relay_transmissions = 1;
        let rec = PacketRecord::from(&p);
        assert_eq!(rec.transmissions, 4);
        assert_eq!(rec.delay_slots, Some(3));
        let v = serde_json::to_value(TraceRecord::Packet(rec)).unwrap();
        for key in ["packet_id", "source", "status", "hops", "transmissions", "relay_hops", "delay_slots"] {
            assert!(v.get(key).is_some(), "{key}");
        }
    }
}
