use std::collections::BTreeMap;
use std::io::{BufReader, BufWriter, Write};
use std::net::{Shutdown, TcpStream};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use parking_lot::{Condvar, Mutex};
use thiserror::Error;

use super::replica::Replica;
use super::wire::{decode_server_message, encode_client_message, ClientMessage, ServerMessage};
use super::{active_nodegroups, now_ms, ClientState, NodeStatus, StateSnapshot, StateUpdate, DEFAULT_HEARTBEAT_MS, DEFAULT_TTL_MS};
use crate::transport::{connect_with_retry, read_message, write_message, TransportError};

#[derive(Debug, Error)]
pub enum StateClientError {
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error("illegal status transition {from:?} -> {to:?}")]
    Transition { from: NodeStatus, to: NodeStatus },
    #[error("client has no registered identity")]
    NotRegistered,
    #[error("not connected to state server")]
    Disconnected,
}

#[derive(Debug, Clone)]
pub struct ClientOptions {
    /// How long `connect` keeps retrying before giving up.
    pub connect_timeout: Duration,
    /// Zero disables the heartbeat thread.
    pub heartbeat: Duration,
    pub ttl_ms: u64,
    /// Upper bound on the reconnect backoff.
    pub max_backoff: Duration,
    /// Keep every applied update for later inspection.
    pub record_history: bool,
}

impl Default for ClientOptions {
    fn default() -> Self {
        Self {
            connect_timeout: Duration::from_secs(10),
            heartbeat: Duration::from_millis(DEFAULT_HEARTBEAT_MS),
            ttl_ms: DEFAULT_TTL_MS,
            max_backoff: Duration::from_secs(2),
            record_history: false,
        }
    }
}

struct Shared {
    addr: String,
    options: ClientOptions,
    replica: Mutex<Replica>,
    changed: Condvar,
    writer: Mutex<Option<BufWriter<TcpStream>>>,
    own: Mutex<Option<ClientState>>,
    connected: AtomicBool,
    stop: AtomicBool,
    gaps: AtomicU64,
    rejected: AtomicU64,
    applied: AtomicU64,
    history: Mutex<Vec<StateUpdate>>,
}

impl Shared {
    fn send(&self, msg: &ClientMessage) -> Result<(), StateClientError> {
        let mut guard = self.writer.lock();
        let w = guard.as_mut().ok_or(StateClientError::Disconnected)?;
        let frame = encode_client_message(msg);
        let res = write_message(w, &[frame]).and_then(|_| w.flush());
        if let Err(e) = res {
            if let Some(w) = guard.take() {
                let _ = w.get_ref().shutdown(Shutdown::Both);
            }
            return Err(TransportError::from(e).into());
        }
        Ok(())
    }

    fn publish(&self, state: ClientState) -> Result<(), StateClientError> {
        let key = state.uid.clone();
        let client_sequence = state.sequence;
        self.send(&ClientMessage::Update(StateUpdate {
            key,
            value: Some(state),
            client_sequence,
            server_sequence: 0,
        }))
    }

    fn notify(&self) {
        let _guard = self.replica.lock();
        self.changed.notify_all();
    }
}

/// Connection to a [`super::StateServer`] holding a live replica of the map.
///
/// The client reconnects with exponential backoff when the server goes
/// away and re-publishes its own state once the link is back.
pub struct StateClient {
    shared: Arc<Shared>,
    threads: Vec<JoinHandle<()>>,
}

impl StateClient {
    pub fn connect(addr: &str, options: ClientOptions) -> Result<Self, StateClientError> {
        let stream = connect_with_retry(addr, options.connect_timeout)?;
        let shared = Arc::new(Shared {
            addr: addr.to_string(),
            options,
            replica: Mutex::new(Replica::new()),
            changed: Condvar::new(),
            writer: Mutex::new(None),
            own: Mutex::new(None),
            connected: AtomicBool::new(false),
            stop: AtomicBool::new(false),
            gaps: AtomicU64::new(0),
            rejected: AtomicU64::new(0),
            applied: AtomicU64::new(0),
            history: Mutex::new(Vec::new()),
        });
        let reader = attach(&shared, stream)?;
        let mut threads = Vec::new();
        {
            let shared = shared.clone();
            threads.push(
                thread::Builder::new()
                    .name("state-client-rx".into())
                    .spawn(move || receive_loop(shared, reader))
                    .map_err(TransportError::from)?,
            );
        }
        if !shared.options.heartbeat.is_zero() {
            let shared = shared.clone();
            threads.push(
                thread::Builder::new()
                    .name("state-client-hb".into())
                    .spawn(move || heartbeat_loop(shared))
                    .map_err(TransportError::from)?,
            );
        }
        Ok(Self { shared, threads })
    }

    pub fn addr(&self) -> &str {
        &self.shared.addr
    }

    /// Publishes this client's identity. The sequence continues from any
    /// earlier registration under the same uid.
    pub fn register(&self, mut state: ClientState) -> Result<ClientState, StateClientError> {
        let mut own = self.shared.own.lock();
        let floor = own.as_ref().map_or(0, |s| s.sequence);
        let seen = self
            .shared
            .replica
            .lock()
            .map()
            .get(&state.uid)
            .map_or(0, |s| s.sequence);
        state.sequence = state.sequence.max(floor).max(seen) + 1;
        state.last_heartbeat_ms = now_ms();
        *own = Some(state.clone());
        drop(own);
        self.shared.publish(state.clone())?;
        Ok(state)
    }

    /// Applies `f` to the registered state, bumps the sequence and publishes.
    pub fn update(&self, f: impl FnOnce(&mut ClientState)) -> Result<ClientState, StateClientError> {
        let mut own = self.shared.own.lock();
        let current = own.as_ref().ok_or(StateClientError::NotRegistered)?;
        let mut next = current.clone();
        f(&mut next);
        if !current.status.can_transition_to(next.status) {
            return Err(StateClientError::Transition {
                from: current.status,
                to: next.status,
            });
        }
        next.uid = current.uid.clone();
        next.sequence = current.sequence + 1;
        next.last_heartbeat_ms = now_ms();
        *own = Some(next.clone());
        drop(own);
        self.shared.publish(next.clone())?;
        Ok(next)
    }

    pub fn set_status(&self, status: NodeStatus) -> Result<ClientState, StateClientError> {
        self.update(|s| s.status = status)
    }

    pub fn heartbeat(&self) -> Result<ClientState, StateClientError> {
        self.update(|_| {})
    }

    /// Writes a record under an arbitrary key. Used by tools that manage
    /// entries on behalf of other nodes.
    pub fn put(&self, state: ClientState) -> Result<(), StateClientError> {
        self.shared.publish(state)
    }

    /// Removes this client's entry with a tombstone.
    pub fn deregister(&self) -> Result<(), StateClientError> {
        let own = self.shared.own.lock().take().ok_or(StateClientError::NotRegistered)?;
        self.shared.send(&ClientMessage::Update(StateUpdate {
            key: own.uid,
            value: None,
            client_sequence: own.sequence + 1,
            server_sequence: 0,
        }))
    }

    /// The registered state as this client sees it. Reports offline while
    /// the link to the server is down.
    pub fn own_state(&self) -> Option<ClientState> {
        let mut s = self.shared.own.lock().clone()?;
        if !self.is_connected() {
            s.status = NodeStatus::Offline;
        }
        Some(s)
    }

    pub fn is_connected(&self) -> bool {
        self.shared.connected.load(Ordering::Acquire)
    }

    pub fn map(&self) -> BTreeMap<String, ClientState> {
        self.shared.replica.lock().map().clone()
    }

    pub fn last_sequence(&self) -> u64 {
        self.shared.replica.lock().last_sequence()
    }

    /// The replica's map and the sequence it reflects, read together.
    pub fn snapshot(&self) -> StateSnapshot {
        let replica = self.shared.replica.lock();
        StateSnapshot {
            entries: replica.map().clone(),
            as_of_sequence: replica.last_sequence(),
        }
    }

    pub fn active_nodegroups(&self) -> Vec<String> {
        active_nodegroups(self.shared.replica.lock().map(), now_ms(), self.shared.options.ttl_ms)
    }

    /// Number of sequence gaps seen on the broadcast stream.
    pub fn gap_count(&self) -> u64 {
        self.shared.gaps.load(Ordering::Relaxed)
    }

    pub fn rejected_count(&self) -> u64 {
        self.shared.rejected.load(Ordering::Relaxed)
    }

    pub fn applied_count(&self) -> u64 {
        self.shared.applied.load(Ordering::Relaxed)
    }

    /// Updates applied since connecting, in server order. Empty unless
    /// `record_history` was set.
    pub fn history(&self) -> Vec<StateUpdate> {
        self.shared.history.lock().clone()
    }

    /// Blocks until `pred` holds for the replica or `timeout` passes.
    pub fn wait_for(&self, timeout: Duration, mut pred: impl FnMut(&Replica) -> bool) -> bool {
        let deadline = Instant::now() + timeout;
        let mut replica = self.shared.replica.lock();
        loop {
            if replica.is_synced() && pred(&replica) {
                return true;
            }
            if self.shared.changed.wait_until(&mut replica, deadline).timed_out() {
                return replica.is_synced() && pred(&replica);
            }
        }
    }

    /// Waits until the replica has caught up with at least `sequence`.
    pub fn wait_for_sequence(&self, sequence: u64, timeout: Duration) -> bool {
        self.wait_for(timeout, |r| r.last_sequence() >= sequence)
    }

    pub fn close(&mut self) {
        if self.shared.stop.swap(true, Ordering::AcqRel) {
            return;
        }
        if let Some(w) = self.shared.writer.lock().take() {
            let _ = w.get_ref().shutdown(Shutdown::Both);
        }
        self.shared.notify();
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
    }
}

impl Drop for StateClient {
    fn drop(&mut self) {
        self.close();
    }
}

/// Installs `stream` as the writer, subscribes and returns the read half.
fn attach(shared: &Shared, stream: TcpStream) -> Result<BufReader<TcpStream>, StateClientError> {
    let _ = stream.set_nodelay(true);
    let read_half = stream.try_clone().map_err(TransportError::from)?;
    *shared.writer.lock() = Some(BufWriter::new(stream));
    shared.replica.lock().desync();
    shared.send(&ClientMessage::Subscribe)?;
    shared.connected.store(true, Ordering::Release);
    Ok(BufReader::new(read_half))
}

fn receive_loop(shared: Arc<Shared>, mut reader: BufReader<TcpStream>) {
    loop {
        read_until_closed(&shared, &mut reader);
        shared.connected.store(false, Ordering::Release);
        if let Some(w) = shared.writer.lock().take() {
            let _ = w.get_ref().shutdown(Shutdown::Both);
        }
        shared.notify();
        if shared.stop.load(Ordering::Acquire) {
            return;
        }
        log::warn!("lost connection to state server {}", shared.addr);
        match reconnect(&shared) {
            Some(r) => reader = r,
            None => return,
        }
    }
}

fn read_until_closed(shared: &Shared, reader: &mut BufReader<TcpStream>) {
    while let Ok(Some(frames)) = read_message(reader) {
        let Some(frame) = frames.first() else { continue };
        let msg = match decode_server_message(frame) {
            Ok(m) => m,
            Err(e) => {
                log::warn!("bad message from state server: {e}");
                continue;
            }
        };
        match msg {
            ServerMessage::Snapshot(snap) => {
                let mut r = shared.replica.lock();
                r.apply_snapshot(snap);
                shared.changed.notify_all();
            }
            ServerMessage::Update(u) => {
                let mut r = shared.replica.lock();
                if !r.is_synced() {
                    // before the snapshot arrives; the snapshot covers it
                    continue;
                }
                let kept = shared.options.record_history.then(|| u.clone());
                match r.apply_update(u) {
                    Ok(true) => {
                        shared.history.lock().extend(kept);
                        shared.applied.fetch_add(1, Ordering::Relaxed);
                        shared.changed.notify_all();
                    }
                    Ok(false) => {}
                    Err(gap) => {
                        log::warn!("{gap}; resubscribing");
                        shared.gaps.fetch_add(1, Ordering::Relaxed);
                        r.desync();
                        drop(r);
                        let _ = shared.send(&ClientMessage::Subscribe);
                    }
                }
            }
            ServerMessage::Rejected {
                key,
                client_sequence,
                last_seen,
            } => {
                shared.rejected.fetch_add(1, Ordering::Relaxed);
                log::debug!("update {key}#{client_sequence} rejected, server has {last_seen}");
                // a restarted client starts below the server's record; jump past it
                let mut own = shared.own.lock();
                if let Some(s) = own.as_mut().filter(|s| s.uid == key && s.sequence <= last_seen) {
                    s.sequence = last_seen + 1;
                    s.last_heartbeat_ms = now_ms();
                    let s = s.clone();
                    drop(own);
                    let _ = shared.publish(s);
                }
            }
        }
    }
}

fn reconnect(shared: &Arc<Shared>) -> Option<BufReader<TcpStream>> {
    let mut backoff = Duration::from_millis(50);
    while !shared.stop.load(Ordering::Acquire) {
        if let Ok(stream) = TcpStream::connect(&shared.addr) {
            if let Ok(reader) = attach(shared, stream) {
                log::info!("reconnected to state server {}", shared.addr);
                let own = shared.own.lock().as_mut().map(|s| {
                    s.sequence += 1;
                    s.last_heartbeat_ms = now_ms();
                    if s.status == NodeStatus::Offline {
                        s.status = NodeStatus::Idle;
                    }
                    s.clone()
                });
                if let Some(s) = own {
                    let _ = shared.publish(s);
                }
                return Some(reader);
            }
        }
        thread::sleep(backoff);
        backoff = (backoff * 2).min(shared.options.max_backoff);
    }
    None
}

fn heartbeat_loop(shared: Arc<Shared>) {
    let period = shared.options.heartbeat;
    while !shared.stop.load(Ordering::Acquire) {
        {
            // replica changes also signal `changed`; only the period or a
            // stop may end the wait, or heartbeats would echo each other
            let deadline = Instant::now() + period;
            let mut replica = shared.replica.lock();
            while !shared.stop.load(Ordering::Acquire) && !shared.changed.wait_until(&mut replica, deadline).timed_out() {}
        }
        if shared.stop.load(Ordering::Acquire) || !shared.connected.load(Ordering::Acquire) {
            continue;
        }
        let next = shared.own.lock().as_mut().map(|s| {
            s.sequence += 1;
            s.last_heartbeat_ms = now_ms();
            s.clone()
        });
        if let Some(s) = next {
            let _ = shared.publish(s);
        }
    }
}
