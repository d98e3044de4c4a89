use std::collections::BTreeMap;

use thiserror::Error;

use super::{ClientState, StateSnapshot, StateUpdate};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
#[error("update stream gap: expected sequence {expected}, got {got}")]
pub struct GapError {
    pub expected: u64,
    pub got: u64,
}

/// Client-side copy of the store: a snapshot plus every later update.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Replica {
    map: BTreeMap<String, ClientState>,
    last_sequence: u64,
    synced: bool,
}

impl Replica {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn apply_snapshot(&mut self, snapshot: StateSnapshot) {
        self.map = snapshot.entries;
        self.last_sequence = snapshot.as_of_sequence;
        self.synced = true;
    }

    /// Applies `update` if it is the next in sequence. Updates already
    /// covered by the snapshot are skipped (`Ok(false)`).
    pub fn apply_update(&mut self, update: StateUpdate) -> Result<bool, GapError> {
        if update.server_sequence <= self.last_sequence {
            return Ok(false);
        }
        if update.server_sequence != self.last_sequence + 1 {
            return Err(GapError {
                expected: self.last_sequence + 1,
                got: update.server_sequence,
            });
        }
        self.last_sequence = update.server_sequence;
        match update.value {
            Some(state) => {
                self.map.insert(update.key, state);
            }
            None => {
                self.map.remove(&update.key);
            }
        }
        Ok(true)
    }

    pub fn map(&self) -> &BTreeMap<String, ClientState> {
        &self.map
    }

    pub fn last_sequence(&self) -> u64 {
        self.last_sequence
    }

    pub fn is_synced(&self) -> bool {
        self.synced
    }

    pub fn desync(&mut self) {
        self.synced = false;
    }
}
