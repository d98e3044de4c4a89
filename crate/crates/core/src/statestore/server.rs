use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufReader, BufWriter, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use bytes::Bytes;
use crossbeam_channel::{unbounded, Receiver, RecvTimeoutError, Sender};
use parking_lot::Mutex;

use super::sequencer::{ApplyOutcome, ClientUpdate, Sequencer};
use super::wire::{decode_client_message, encode_server_message, ClientMessage, ServerMessage};
use super::{now_ms, StateSnapshot, DEFAULT_TTL_MS};
use crate::transport::{read_message, write_message, TransportError};

#[derive(Debug, Clone)]
pub struct ServerOptions {
    pub ttl_ms: u64,
    /// How often expiry and compaction run.
    pub tick: Duration,
}

impl Default for ServerOptions {
    fn default() -> Self {
        Self {
            ttl_ms: DEFAULT_TTL_MS,
            tick: Duration::from_millis(250),
        }
    }
}

enum Command {
    Connect { conn: u64, out: Sender<Bytes> },
    Subscribe { conn: u64 },
    Update { conn: u64, update: ClientUpdate },
    Disconnect { conn: u64 },
    Snapshot { reply: Sender<StateSnapshot> },
    Stop,
}

/// TCP front end for a [`Sequencer`]. All mutations go through one
/// sequencer thread; each connection has its own reader and writer thread.
pub struct StateServer {
    local: SocketAddr,
    commands: Sender<Command>,
    closed: Arc<AtomicBool>,
    streams: Arc<Mutex<Vec<TcpStream>>>,
    sequencer: Option<JoinHandle<()>>,
}

impl StateServer {
    pub fn bind(addr: &str, options: ServerOptions) -> Result<Self, TransportError> {
        let listener = TcpListener::bind(addr)?;
        let local = listener.local_addr()?;
        let (commands, rx) = unbounded();
        let closed = Arc::new(AtomicBool::new(false));
        let streams = Arc::new(Mutex::new(Vec::new()));
        let sequencer = thread::Builder::new()
            .name("state-sequencer".into())
            .spawn(move || sequencer_loop(rx, options))?;
        {
            let commands = commands.clone();
            let closed = closed.clone();
            let streams = streams.clone();
            thread::Builder::new()
                .name("state-accept".into())
                .spawn(move || accept_loop(listener, commands, closed, streams))?;
        }
        log::info!("state server listening on {local}");
        Ok(Self {
            local,
            commands,
            closed,
            streams,
            sequencer: Some(sequencer),
        })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.local
    }

    /// Current authoritative map.
    pub fn snapshot(&self) -> StateSnapshot {
        let (tx, rx) = crossbeam_channel::bounded(1);
        if self.commands.send(Command::Snapshot { reply: tx }).is_err() {
            return StateSnapshot::default();
        }
        rx.recv().unwrap_or_default()
    }

    pub fn shutdown(&mut self) {
        if self.closed.swap(true, Ordering::AcqRel) {
            return;
        }
        let _ = self.commands.send(Command::Stop);
        for s in self.streams.lock().drain(..) {
            let _ = s.shutdown(Shutdown::Both);
        }
        let _ = TcpStream::connect_timeout(&self.local, Duration::from_millis(200));
        if let Some(h) = self.sequencer.take() {
            let _ = h.join();
        }
    }
}

impl Drop for StateServer {
    fn drop(&mut self) {
        self.shutdown();
    }
}

fn accept_loop(
    listener: TcpListener,
    commands: Sender<Command>,
    closed: Arc<AtomicBool>,
    streams: Arc<Mutex<Vec<TcpStream>>>,
) {
    let next = AtomicU64::new(1);
    for stream in listener.incoming() {
        if closed.load(Ordering::Acquire) {
            break;
        }
        let Ok(stream) = stream else { continue };
        let _ = stream.set_nodelay(true);
        let conn = next.fetch_add(1, Ordering::Relaxed);
        let (Ok(read_half), Ok(keep)) = (stream.try_clone(), stream.try_clone()) else {
            continue;
        };
        streams.lock().push(keep);
        let (out_tx, out_rx) = unbounded::<Bytes>();
        if commands.send(Command::Connect { conn, out: out_tx }).is_err() {
            break;
        }
        let _ = thread::Builder::new()
            .name(format!("state-writer-{conn}"))
            .spawn(move || {
                let mut w = BufWriter::new(stream);
                while let Ok(frame) = out_rx.recv() {
                    if write_message(&mut w, &[frame]).is_err() {
                        break;
                    }
                    // coalesce whatever is already queued into one flush
                    let mut ok = true;
                    while let Ok(more) = out_rx.try_recv() {
                        if write_message(&mut w, &[more]).is_err() {
                            ok = false;
                            break;
                        }
                    }
                    if !ok || w.flush().is_err() {
                        break;
                    }
                }
                let _ = w.get_ref().shutdown(Shutdown::Both);
            });
        let commands = commands.clone();
        let _ = thread::Builder::new()
            .name(format!("state-reader-{conn}"))
            .spawn(move || {
                let mut r = BufReader::new(read_half);
                while let Ok(Some(frames)) = read_message(&mut r) {
                    let Some(frame) = frames.first() else { continue };
                    let cmd = match decode_client_message(frame) {
                        Ok(ClientMessage::Subscribe) => Command::Subscribe { conn },
                        Ok(ClientMessage::Update(u)) => Command::Update {
                            conn,
                            update: u.into(),
                        },
                        Err(e) => {
                            log::warn!("state conn {conn}: {e}");
                            continue;
                        }
                    };
                    if commands.send(cmd).is_err() {
                        return;
                    }
                }
                let _ = commands.send(Command::Disconnect { conn });
            });
    }
}

fn sequencer_loop(rx: Receiver<Command>, options: ServerOptions) {
    let mut seq = Sequencer::new();
    let mut conns: BTreeMap<u64, Sender<Bytes>> = BTreeMap::new();
    let mut subscribers: BTreeSet<u64> = BTreeSet::new();
    let mut last_tick = Instant::now();

    let broadcast = |conns: &mut BTreeMap<u64, Sender<Bytes>>, subscribers: &mut BTreeSet<u64>, frame: Bytes| {
        subscribers.retain(|c| conns.get(c).is_some_and(|tx| tx.send(frame.clone()).is_ok()));
    };

    loop {
        let cmd = match rx.recv_timeout(options.tick) {
            Ok(cmd) => Some(cmd),
            Err(RecvTimeoutError::Timeout) => None,
            Err(RecvTimeoutError::Disconnected) => return,
        };
        match cmd {
            Some(Command::Connect { conn, out }) => {
                conns.insert(conn, out);
            }
            Some(Command::Subscribe { conn }) => {
                // snapshot and registration happen together, so the stream
                // this subscriber sees starts exactly at as_of + 1
                if let Some(tx) = conns.get(&conn) {
                    let snap = encode_server_message(&ServerMessage::Snapshot(seq.snapshot()));
                    if tx.send(snap).is_ok() {
                        subscribers.insert(conn);
                    }
                }
            }
            Some(Command::Update { conn, update }) => match seq.apply(update, now_ms()) {
                ApplyOutcome::Applied(u) => {
                    broadcast(&mut conns, &mut subscribers, encode_server_message(&ServerMessage::Update(u)));
                }
                ApplyOutcome::Stale {
                    key,
                    client_sequence,
                    last_seen,
                } => {
                    log::debug!("stale update for {key}: {client_sequence} <= {last_seen}");
                    if let Some(tx) = conns.get(&conn) {
                        let _ = tx.send(encode_server_message(&ServerMessage::Rejected {
                            key,
                            client_sequence,
                            last_seen,
                        }));
                    }
                }
                ApplyOutcome::Invalid(why) => log::warn!("invalid update from conn {conn}: {why}"),
            },
            Some(Command::Disconnect { conn }) => {
                conns.remove(&conn);
                subscribers.remove(&conn);
            }
            Some(Command::Snapshot { reply }) => {
                let _ = reply.send(seq.snapshot());
            }
            Some(Command::Stop) => return,
            None => {}
        }
        if last_tick.elapsed() >= options.tick {
            last_tick = Instant::now();
            let now = now_ms();
            for u in seq.expire_stale(now, options.ttl_ms) {
                log::info!("node {} expired", u.key);
                broadcast(&mut conns, &mut subscribers, encode_server_message(&ServerMessage::Update(u)));
            }
            seq.compact(now, options.ttl_ms);
        }
    }
}
