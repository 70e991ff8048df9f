//! Control messages and their wire encoding.
//!
//! ```text
//! DIO  0x01 | sender u32 | rank f64 | dodag_id u32 | options...
//! DIS  0x02 | sender u32
//! DAO  0x03 | sender u32 | target u32 | via_parent u32
//! ```
//!
//! All integers are big-endian. DIO options are type-length-value; the
//! relay sub-option (type `0x0A`, length 4) carries the sender's selected
//! cooperative relay. Unknown options are skipped.

use thiserror::Error;

use super::Rank;
use crate::topology::NodeId;

const TYPE_DIO: u8 = 0x01;
const TYPE_DIS: u8 = 0x02;
const TYPE_DAO: u8 = 0x03;
pub const OPT_RELAY: u8 = 0x0A;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DioMessage {
    pub sender: NodeId,
    pub rank: Rank,
    pub dodag_id: u32,
    pub relay_suboption: Option<NodeId>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DisMessage {
    pub sender: NodeId,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DaoMessage {
    pub sender: NodeId,
    pub target: NodeId,
    pub via_parent: NodeId,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ControlMessage {
    Dio(DioMessage),
    Dis(DisMessage),
    Dao(DaoMessage),
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CodecError {
    #[error("truncated message: needed {needed} bytes, had {had}")]
    Truncated { needed: usize, had: usize },
    #[error("unknown message type 0x{0:02x}")]
    UnknownType(u8),
    #[error("bad length {len} for option 0x{kind:02x}")]
    BadOption { kind: u8, len: usize },
}

impl ControlMessage {
    pub fn sender(&self) -> NodeId {
        match self {
            ControlMessage::Dio(m) => m.sender,
            ControlMessage::Dis(m) => m.sender,
            ControlMessage::Dao(m) => m.sender,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            ControlMessage::Dio(_) => "DIO",
            ControlMessage::Dis(_) => "DIS",
            ControlMessage::Dao(_) => "DAO",
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(24);
        match self {
            ControlMessage::Dio(m) => {
                out.push(TYPE_DIO);
                out.extend_from_slice(&m.sender.0.to_be_bytes());
                out.extend_from_slice(&m.rank.0.to_be_bytes());
                out.extend_from_slice(&m.dodag_id.to_be_bytes());
                if let Some(relay) = m.relay_suboption {
                    out.push(OPT_RELAY);
                    out.push(4);
                    out.extend_from_slice(&relay.0.to_be_bytes());
                }
            }
            ControlMessage::Dis(m) => {
                out.push(TYPE_DIS);
                out.extend_from_slice(&m.sender.0.to_be_bytes());
            }
            ControlMessage::Dao(m) => {
                out.push(TYPE_DAO);
                out.extend_from_slice(&m.sender.0.to_be_bytes());
                out.extend_from_slice(&m.target.0.to_be_bytes());
                out.extend_from_slice(&m.via_parent.0.to_be_bytes());
            }
        }
        out
    }

    pub fn decode(buf: &[u8]) -> Result<Self, CodecError> {
        let mut r = Reader { buf, pos: 0 };
        match r.u8()? {
            TYPE_DIO => {
                let sender = NodeId(r.u32()?);
                let rank = Rank(f64::from_bits(r.u64()?));
                let dodag_id = r.u32()?;
                let mut relay_suboption = None;
                while r.remaining() > 0 {
                    let kind = r.u8()?;
                    let len = r.u8()? as usize;
                    let body = r.take(len)?;
                    if kind == OPT_RELAY {
                        let bytes: [u8; 4] = body
                            .try_into()
                            .map_err(|_| CodecError::BadOption { kind, len })?;
                        relay_suboption = Some(NodeId(u32::from_be_bytes(bytes)));
                    }
                }
                Ok(ControlMessage::Dio(DioMessage { sender, rank, dodag_id, relay_suboption }))
            }
            TYPE_DIS => Ok(ControlMessage::Dis(DisMessage { sender: NodeId(r.u32()?) })),
            TYPE_DAO => Ok(ControlMessage::Dao(DaoMessage {
                sender: NodeId(r.u32()?),
                target: NodeId(r.u32()?),
                via_parent: NodeId(r.u32()?),
            })),
            other => Err(CodecError::UnknownType(other)),
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], CodecError> {
        if self.remaining() < n {
            return Err(CodecError::Truncated { needed: self.pos + n, had: self.buf.len() });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, CodecError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, CodecError> {
        Ok(u32::from_be_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, CodecError> {
        Ok(u64::from_be_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn relay_suboption_on_the_wire() {
        let dio = ControlMessage::Dio(DioMessage {
            sender: NodeId(7),
            rank: Rank(2.5),
            dodag_id: 1,
            relay_suboption: Some(NodeId(12)),
        });
        let bytes = dio.encode();
        assert_eq!(&bytes[17..], &[OPT_RELAY, 4, 0, 0, 0, 12]);
        assert_eq!(ControlMessage::decode(&bytes), Ok(dio));
    }

    #[test]
    fn unknown_option_is_skipped() {
        let mut bytes = ControlMessage::Dio(DioMessage {
            sender: NodeId(1),
            rank: Rank(1.0),
            dodag_id: 1,
            relay_suboption: None,
        })
        .encode();
        bytes.extend_from_slice(&[0x44, 2, 9, 9]);
        let ControlMessage::Dio(m) = ControlMessage::decode(&bytes).unwrap() else { panic!() };
        assert_eq!(m.relay_suboption, None);
    }

    #[test]
    fn malformed_input() {
        assert_eq!(ControlMessage::decode(&[0x09]), Err(CodecError::UnknownType(0x09)));
        assert!(matches!(ControlMessage::decode(&[TYPE_DAO, 0, 0]), Err(CodecError::Truncated { .. })));
        assert!(ControlMessage::decode(&[]).is_err());
    }

    fn arb_message() -> impl Strategy<Value = ControlMessage> {
        prop_oneof![
            (any::<u32>(), 0.0f64..1e6, any::<u32>(), proptest::option::of(any::<u32>())).prop_map(
                |(s, r, d, relay)| ControlMessage::Dio(DioMessage {
                    sender: NodeId(s),
                    rank: Rank(r),
                    dodag_id: d,
                    relay_suboption: relay.map(NodeId),
                })
            ),
            any::<u32>().prop_map(|s| ControlMessage::Dis(DisMessage { sender: NodeId(s) })),
            (any::<u32>(), any::<u32>(), any::<u32>()).prop_map(|(s, t, v)| ControlMessage::Dao(DaoMessage {
                sender: NodeId(s),
                target: NodeId(t),
                via_parent: NodeId(v),
            })),
        ]
    }

    proptest! {
        #[test]
        fn decode_inverts_encode(m in arb_message()) {
            prop_assert_eq!(ControlMessage::decode(&m.encode()), Ok(m));
        }
    }
}
