//! Store messages. Each is a single transport frame.
//!
//! ```text
//! update:   0x53344B56 | ver u16 | server_sequence u64 | key str
//!           | tag u8 (1 = state, 0 = tombstone) | state fields  or  client_sequence u64
//! snapshot: 0x53344B53 | ver u16 | as_of_sequence u64 | n u32 | n × state fields
//! hello:    0x53344B48 | ver u16                       (subscribe, client → server)
//! reject:   0x53344B52 | ver u16 | key str | client_sequence u64 | last_seen u64
//!
//! state fields: uid str | kind u8 | sequence u64 | expected_messages u64
//!               | scan_number u32 | status u8 | last_heartbeat_ms u64 | endpoint str
//! str = u16 length + utf-8 bytes
//! ```
//!
//! Clients send updates with `server_sequence = 0`; the server assigns it.

use bytes::{BufMut, Bytes, BytesMut};

use super::{ClientState, NodeKind, NodeStatus, StateSnapshot, StateUpdate};
use crate::protocol::{peek_magic, ProtocolError, Reader, WIRE_VERSION};

pub const UPDATE_MAGIC: u32 = 0x5334_4B56;
pub const SNAPSHOT_MAGIC: u32 = 0x5334_4B53;
pub const HELLO_MAGIC: u32 = 0x5334_4B48;
pub const REJECT_MAGIC: u32 = 0x5334_4B52;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ClientMessage {
    Subscribe,
    Update(StateUpdate),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ServerMessage {
    Snapshot(StateSnapshot),
    Update(StateUpdate),
    Rejected {
        key: String,
        client_sequence: u64,
        last_seen: u64,
    },
}

fn put_str(buf: &mut BytesMut, s: &str) {
    let bytes = &s.as_bytes()[..s.len().min(u16::MAX as usize)];
    buf.put_u16_le(bytes.len() as u16);
    buf.put_slice(bytes);
}

fn put_state(buf: &mut BytesMut, s: &ClientState) {
    put_str(buf, &s.uid);
    buf.put_u8(s.kind as u8);
    buf.put_u64_le(s.sequence);
    buf.put_u64_le(s.expected_messages);
    buf.put_u32_le(s.scan_number);
    buf.put_u8(s.status as u8);
    buf.put_u64_le(s.last_heartbeat_ms);
    put_str(buf, &s.endpoint);
}

fn read_state(r: &mut Reader<'_>) -> Result<ClientState, ProtocolError> {
    let uid = r.string()?;
    let kind = r.u8()?;
    let kind = NodeKind::from_u8(kind).ok_or(ProtocolError::Truncated {
        field: "node kind",
        needed: 0,
        available: kind as usize,
    })?;
    let sequence = r.u64()?;
    let expected_messages = r.u64()?;
    let scan_number = r.u32()?;
    let status = r.u8()?;
    let status = NodeStatus::from_u8(status).ok_or(ProtocolError::Truncated {
        field: "node status",
        needed: 0,
        available: status as usize,
    })?;
    Ok(ClientState {
        uid,
        kind,
        sequence,
        expected_messages,
        scan_number,
        status,
        last_heartbeat_ms: r.u64()?,
        endpoint: r.string()?,
    })
}

fn header(buf: &mut BytesMut, magic: u32) {
    buf.put_u32_le(magic);
    buf.put_u16_le(WIRE_VERSION);
}

pub fn encode_update(update: &StateUpdate) -> Bytes {
    let mut buf = BytesMut::with_capacity(96);
    header(&mut buf, UPDATE_MAGIC);
    buf.put_u64_le(update.server_sequence);
    put_str(&mut buf, &update.key);
    match &update.value {
        Some(state) => {
            buf.put_u8(1);
            put_state(&mut buf, state);
        }
        None => {
            buf.put_u8(0);
            buf.put_u64_le(update.client_sequence);
        }
    }
    buf.freeze()
}

fn decode_update(r: &mut Reader<'_>) -> Result<StateUpdate, ProtocolError> {
    let server_sequence = r.u64()?;
    let key = r.string()?;
    let (value, client_sequence) = match r.u8()? {
        1 => {
            let s = read_state(r)?;
            let seq = s.sequence;
            (Some(s), seq)
        }
        _ => (None, r.u64()?),
    };
    Ok(StateUpdate {
        key,
        value,
        client_sequence,
        server_sequence,
    })
}

pub fn encode_client_message(msg: &ClientMessage) -> Bytes {
    match msg {
        ClientMessage::Subscribe => {
            let mut buf = BytesMut::with_capacity(6);
            header(&mut buf, HELLO_MAGIC);
            buf.freeze()
        }
        ClientMessage::Update(u) => encode_update(u),
    }
}

pub fn decode_client_message(frame: &[u8]) -> Result<ClientMessage, ProtocolError> {
    let magic = peek_magic(frame).unwrap_or(0);
    let mut r = Reader::new(frame, "store message");
    match magic {
        HELLO_MAGIC => {
            r.expect_magic(HELLO_MAGIC)?;
            r.expect_version()?;
            r.finish()?;
            Ok(ClientMessage::Subscribe)
        }
        _ => {
            r.expect_magic(UPDATE_MAGIC)?;
            r.expect_version()?;
            let u = decode_update(&mut r)?;
            r.finish()?;
            Ok(ClientMessage::Update(u))
        }
    }
}

pub fn encode_server_message(msg: &ServerMessage) -> Bytes {
    match msg {
        ServerMessage::Update(u) => encode_update(u),
        ServerMessage::Snapshot(s) => {
            let mut buf = BytesMut::with_capacity(18 + s.entries.len() * 96);
            header(&mut buf, SNAPSHOT_MAGIC);
            buf.put_u64_le(s.as_of_sequence);
            buf.put_u32_le(s.entries.len() as u32);
            for state in s.entries.values() {
                put_state(&mut buf, state);
            }
            buf.freeze()
        }
        ServerMessage::Rejected {
            key,
            client_sequence,
            last_seen,
        } => {
            let mut buf = BytesMut::with_capacity(32);
            header(&mut buf, REJECT_MAGIC);
            put_str(&mut buf, key);
            buf.put_u64_le(*client_sequence);
            buf.put_u64_le(*last_seen);
            buf.freeze()
        }
    }
}

pub fn decode_server_message(frame: &[u8]) -> Result<ServerMessage, ProtocolError> {
    let magic = peek_magic(frame).unwrap_or(0);
    let mut r = Reader::new(frame, "store message");
    let msg = match magic {
        SNAPSHOT_MAGIC => {
            r.expect_magic(SNAPSHOT_MAGIC)?;
            r.expect_version()?;
            let as_of_sequence = r.u64()?;
            let n = r.u32()?;
            let mut snap = StateSnapshot {
                entries: Default::default(),
                as_of_sequence,
            };
            for _ in 0..n {
                let s = read_state(&mut r)?;
                snap.entries.insert(s.uid.clone(), s);
            }
            ServerMessage::Snapshot(snap)
        }
        REJECT_MAGIC => {
            r.expect_magic(REJECT_MAGIC)?;
            r.expect_version()?;
            ServerMessage::Rejected {
                key: r.string()?,
                client_sequence: r.u64()?,
                last_seen: r.u64()?,
            }
        }
        _ => {
            r.expect_magic(UPDATE_MAGIC)?;
            r.expect_version()?;
            ServerMessage::Update(decode_update(&mut r)?)
        }
    };
    r.finish()?;
    Ok(msg)
}
