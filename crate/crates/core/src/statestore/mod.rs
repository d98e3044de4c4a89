//! Replicated membership store.
//!
//! A single sequencer owns the authoritative map of node states and stamps
//! every accepted change with a gapless `server_sequence`. Clients join by
//! taking a snapshot (`as_of_sequence`) and then applying the broadcast
//! stream from `as_of_sequence + 1` onward. Liveness is heartbeat based:
//! entries whose heartbeat is older than the TTL are marked offline.

mod client;
mod replica;
mod sequencer;
mod server;
mod wire;

use std::collections::BTreeMap;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

pub use client::{ClientOptions, StateClient, StateClientError};
pub use replica::{GapError, Replica};
pub use sequencer::{ApplyOutcome, ClientUpdate, Sequencer};
pub use server::{ServerOptions, StateServer};
pub use wire::{
    decode_client_message, decode_server_message, encode_client_message, encode_server_message, ClientMessage,
    ServerMessage, HELLO_MAGIC, REJECT_MAGIC, SNAPSHOT_MAGIC, UPDATE_MAGIC,
};

pub const DEFAULT_HEARTBEAT_MS: u64 = 500;
pub const DEFAULT_TTL_MS: u64 = 3000;
/// Tombstones are compacted after this many TTLs.
pub const TOMBSTONE_TTLS: u64 = 10;

pub fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NodeKind {
    Producer = 0,
    Aggregator = 1,
    NodeGroup = 2,
    Orchestrator = 3,
}

impl NodeKind {
    pub fn from_u8(v: u8) -> Option<Self> {
        Some(match v {
            0 => Self::Producer,
            1 => Self::Aggregator,
            2 => Self::NodeGroup,
            3 => Self::Orchestrator,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NodeStatus {
    Idle = 0,
    Streaming = 1,
    Draining = 2,
    Offline = 3,
}

impl NodeStatus {
    pub fn from_u8(v: u8) -> Option<Self> {
        Some(match v {
            0 => Self::Idle,
            1 => Self::Streaming,
            2 => Self::Draining,
            3 => Self::Offline,
            _ => return None,
        })
    }

    /// Legal status changes: idle→streaming→draining→idle, anything→offline,
    /// and offline→idle on rejoin. Re-publishing the same status (a
    /// heartbeat) is always legal.
    pub fn can_transition_to(self, next: NodeStatus) -> bool {
        use NodeStatus::*;
        self == next
            || matches!(
                (self, next),
                (Idle, Streaming) | (Streaming, Draining) | (Draining, Idle) | (_, Offline) | (Offline, Idle)
            )
    }
}

/// A node's published record.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClientState {
    pub uid: String,
    pub kind: NodeKind,
    /// Client-local counter, strictly increasing per uid.
    pub sequence: u64,
    pub expected_messages: u64,
    pub scan_number: u32,
    pub status: NodeStatus,
    pub last_heartbeat_ms: u64,
    /// Address other services use to reach this node; empty if none.
    pub endpoint: String,
}

impl ClientState {
    pub fn new(uid: impl Into<String>, kind: NodeKind) -> Self {
        Self {
            uid: uid.into(),
            kind,
            sequence: 0,
            expected_messages: 0,
            scan_number: 0,
            status: NodeStatus::Idle,
            last_heartbeat_ms: now_ms(),
            endpoint: String::new(),
        }
    }
}

/// One sequenced change. `value == None` is a tombstone.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StateUpdate {
    pub key: String,
    pub value: Option<ClientState>,
    /// For tombstones, the client sequence that removed the key.
    pub client_sequence: u64,
    pub server_sequence: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct StateSnapshot {
    pub entries: BTreeMap<String, ClientState>,
    pub as_of_sequence: u64,
}

/// NodeGroups that are alive and accepting work, in lexicographic uid order.
/// The position in this list is the group index used for routing.
pub fn active_nodegroups(map: &BTreeMap<String, ClientState>, now_ms: u64, ttl_ms: u64) -> Vec<String> {
    // BTreeMap iteration is already sorted by uid
    map.values()
        .filter(|s| {
            s.kind == NodeKind::NodeGroup
                && matches!(s.status, NodeStatus::Idle | NodeStatus::Streaming)
                && now_ms.saturating_sub(s.last_heartbeat_ms) <= ttl_ms
        })
        .map(|s| s.uid.clone())
        .collect()
}
