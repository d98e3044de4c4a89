use std::collections::BTreeMap;

use super::{ClientState, NodeStatus, StateSnapshot, StateUpdate, TOMBSTONE_TTLS};

/// A change submitted by a client, before the server sequences it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ClientUpdate {
    Put(ClientState),
    Remove { uid: String, client_sequence: u64 },
}

impl ClientUpdate {
    pub fn key(&self) -> &str {
        match self {
            Self::Put(s) => &s.uid,
            Self::Remove { uid, .. } => uid,
        }
    }

    pub fn client_sequence(&self) -> u64 {
        match self {
            Self::Put(s) => s.sequence,
            Self::Remove { client_sequence, .. } => *client_sequence,
        }
    }

    pub fn into_unsequenced(self) -> StateUpdate {
        let key = self.key().to_string();
        let client_sequence = self.client_sequence();
        StateUpdate {
            key,
            value: match self {
                Self::Put(s) => Some(s),
                Self::Remove { .. } => None,
            },
            client_sequence,
            server_sequence: 0,
        }
    }
}

impl From<StateUpdate> for ClientUpdate {
    fn from(u: StateUpdate) -> Self {
        match u.value {
            Some(s) => Self::Put(s),
            None => Self::Remove {
                uid: u.key,
                client_sequence: u.client_sequence,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ApplyOutcome {
    Applied(StateUpdate),
    /// Client sequence not newer than the last one accepted for this key.
    Stale {
        key: String,
        client_sequence: u64,
        last_seen: u64,
    },
    Invalid(String),
}

#[derive(Debug, Clone)]
struct Entry {
    state: Option<ClientState>,
    last_client_sequence: u64,
    removed_at_ms: u64,
}

/// Authoritative map plus the global sequence counter. Not thread-safe by
/// itself; the server runs it on one thread.
#[derive(Debug, Default)]
pub struct Sequencer {
    entries: BTreeMap<String, Entry>,
    sequence: u64,
}

impl Sequencer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn sequence(&self) -> u64 {
        self.sequence
    }

    fn stamp(&mut self, key: String, value: Option<ClientState>, client_sequence: u64) -> StateUpdate {
        self.sequence += 1;
        StateUpdate {
            key,
            value,
            client_sequence,
            server_sequence: self.sequence,
        }
    }

    pub fn apply(&mut self, update: ClientUpdate, now_ms: u64) -> ApplyOutcome {
        let key = update.key().to_string();
        if key.is_empty() {
            return ApplyOutcome::Invalid("empty uid".into());
        }
        let client_sequence = update.client_sequence();
        if let Some(entry) = self.entries.get(&key) {
            if client_sequence <= entry.last_client_sequence {
                return ApplyOutcome::Stale {
                    key,
                    client_sequence,
                    last_seen: entry.last_client_sequence,
                };
            }
        }
        let value = match update {
            ClientUpdate::Put(state) => Some(state),
            ClientUpdate::Remove { .. } => None,
        };
        self.entries.insert(
            key.clone(),
            Entry {
                state: value.clone(),
                last_client_sequence: client_sequence,
                removed_at_ms: if value.is_none() { now_ms } else { 0 },
            },
        );
        ApplyOutcome::Applied(self.stamp(key, value, client_sequence))
    }

    pub fn snapshot(&self) -> StateSnapshot {
        StateSnapshot {
            entries: self.map(),
            as_of_sequence: self.sequence,
        }
    }

    pub fn map(&self) -> BTreeMap<String, ClientState> {
        self.entries
            .iter()
            .filter_map(|(k, e)| e.state.clone().map(|s| (k.clone(), s)))
            .collect()
    }

    /// Marks entries whose heartbeat is older than `ttl_ms` offline and
    /// returns the sequenced updates to broadcast. A zero TTL expires every
    /// live entry.
    pub fn expire_stale(&mut self, now_ms: u64, ttl_ms: u64) -> Vec<StateUpdate> {
        let expired: Vec<(String, ClientState)> = self
            .entries
            .iter()
            .filter_map(|(k, e)| {
                let s = e.state.as_ref()?;
                let stale = ttl_ms == 0 || now_ms.saturating_sub(s.last_heartbeat_ms) > ttl_ms;
                (stale && s.status != NodeStatus::Offline).then(|| (k.clone(), s.clone()))
            })
            .collect();
        expired
            .into_iter()
            .map(|(key, mut state)| {
                state.status = NodeStatus::Offline;
                let seq = state.sequence;
                self.entries.get_mut(&key).expect("present").state = Some(state.clone());
                self.stamp(key, Some(state), seq)
            })
            .collect()
    }

    /// Drops tombstones older than `TOMBSTONE_TTLS × ttl_ms`.
    pub fn compact(&mut self, now_ms: u64, ttl_ms: u64) -> usize {
        let horizon = TOMBSTONE_TTLS * ttl_ms;
        let before = self.entries.len();
        self.entries
            .retain(|_, e| e.state.is_some() || now_ms.saturating_sub(e.removed_at_ms) <= horizon);
        before - self.entries.len()
    }
}
