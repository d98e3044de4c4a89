//! Pipeline transport: atomic multi-frame messages over TCP or in-process
//! channels.
//!
//! A message on a byte stream is `u8 frame_count` followed by each frame as
//! `u32 length (LE) | bytes`. Messages are written whole into one buffer,
//! so frames of two messages never interleave on one connection.
//! [`MessageSink::send`] flushes at once; [`MessageSink::send_buffered`]
//! leaves the bytes for the next [`MessageSink::flush`] or a full buffer,
//! which is how bursts are coalesced into few syscalls.
//!
//! [`PullSocket`] accepts any number of senders and merges them into one
//! bounded queue (the high-water mark, counted in read batches of already
//! buffered messages). When the queue is full the per-peer
//! reader stops reading, TCP flow control fills up, and the remote
//! [`PushSocket::send`] blocks. Nothing is ever dropped.

use std::collections::VecDeque;
use std::io::{self, BufWriter, Read, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use bytes::{Buf, Bytes, BytesMut};
use crossbeam_channel::{bounded, Receiver, RecvTimeoutError, Sender};
use parking_lot::Mutex;
use thiserror::Error;

pub const DEFAULT_HWM: usize = 1000;
pub const MAX_FRAMES: usize = 16;
pub const MAX_FRAME_LEN: usize = 256 << 20;
/// Messages a pull reader hands over in one queue slot. Only messages that
/// are already fully buffered are batched, so batching never adds latency.
const READ_BATCH: usize = 64;

pub type PeerId = u64;

#[derive(Debug, Error)]
pub enum TransportError {
    #[error("i/o: {0}")]
    Io(#[from] io::Error),
    #[error("channel closed")]
    Closed,
    #[error("malformed framing: {0}")]
    Framing(String),
    #[error("could not connect to {addr} within {waited:?}: {source}")]
    Connect {
        addr: String,
        waited: Duration,
        source: io::Error,
    },
}

/// A message as delivered to a receiver, tagged with the connection it came in on.
#[derive(Debug, Clone)]
pub struct Envelope {
    pub peer: PeerId,
    pub frames: Vec<Bytes>,
}

pub trait MessageSink: Send {
    fn send(&mut self, frames: &[Bytes]) -> Result<(), TransportError>;

    /// Queues without forcing a flush. Errors may surface on a later call.
    fn send_buffered(&mut self, frames: &[Bytes]) -> Result<(), TransportError> {
        self.send(frames)
    }

    fn flush(&mut self) -> Result<(), TransportError> {
        Ok(())
    }
}

pub trait MessageSource: Send {
    /// `Ok(None)` on timeout.
    fn recv_timeout(&mut self, timeout: Duration) -> Result<Option<Envelope>, TransportError>;
}

pub fn write_message<W: Write>(w: &mut W, frames: &[Bytes]) -> io::Result<()> {
    if frames.is_empty() || frames.len() > MAX_FRAMES {
        return Err(io::Error::new(
            io::ErrorKind::InvalidInput,
            format!("{} frames per message", frames.len()),
        ));
    }
    w.write_all(&[frames.len() as u8])?;
    for frame in frames {
        w.write_all(&(frame.len() as u32).to_le_bytes())?;
        w.write_all(frame)?;
    }
    Ok(())
}

/// Reads one message. `Ok(None)` on clean end-of-stream at a message boundary.
pub fn read_message<R: Read>(r: &mut R) -> io::Result<Option<Vec<Bytes>>> {
    let mut count = [0u8; 1];
    match r.read_exact(&mut count) {
        Ok(()) => {}
        Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e),
    }
    let count = count[0] as usize;
    if count == 0 || count > MAX_FRAMES {
        return Err(io::Error::new(
            io::ErrorKind::InvalidData,
            format!("bad frame count {count}"),
        ));
    }
    let mut frames = Vec::with_capacity(count);
    for _ in 0..count {
        let mut len = [0u8; 4];
        r.read_exact(&mut len)?;
        let len = u32::from_le_bytes(len) as usize;
        if len > MAX_FRAME_LEN {
            return Err(io::Error::new(
                io::ErrorKind::InvalidData,
                format!("frame of {len} bytes exceeds limit"),
            ));
        }
        let mut buf = vec![0u8; len];
        r.read_exact(&mut buf)?;
        frames.push(Bytes::from(buf));
    }
    Ok(Some(frames))
}

/// Connects with exponential backoff until `deadline` elapses.
pub fn connect_with_retry(addr: &str, deadline: Duration) -> Result<TcpStream, TransportError> {
    let start = Instant::now();
    let mut backoff = Duration::from_millis(10);
    loop {
        let attempt = addr
            .to_socket_addrs()
            .and_then(|mut addrs| {
                addrs
                    .next()
                    .ok_or_else(|| io::Error::new(io::ErrorKind::NotFound, "no address"))
            })
            .and_then(|a| TcpStream::connect_timeout(&a, Duration::from_secs(2)));
        match attempt {
            Ok(stream) => return Ok(stream),
            Err(e) if start.elapsed() >= deadline => {
                return Err(TransportError::Connect {
                    addr: addr.to_string(),
                    waited: start.elapsed(),
                    source: e,
                })
            }
            Err(_) => {
                thread::sleep(backoff);
                backoff = (backoff * 2).min(Duration::from_millis(500));
            }
        }
    }
}

enum Framing {
    Complete(usize),
    /// At least this many bytes are needed before the message is complete.
    Need(usize),
}

fn framing(buf: &[u8]) -> io::Result<Framing> {
    let Some(&count) = buf.first() else {
        return Ok(Framing::Need(1));
    };
    let count = count as usize;
    if count == 0 || count > MAX_FRAMES {
        return Err(io::Error::new(io::ErrorKind::InvalidData, format!("bad frame count {count}")));
    }
    let mut at = 1;
    for _ in 0..count {
        let Some(len) = buf.get(at..at + 4) else {
            return Ok(Framing::Need(at + 4));
        };
        let len = u32::from_le_bytes(len.try_into().unwrap()) as usize;
        if len > MAX_FRAME_LEN {
            return Err(io::Error::new(
                io::ErrorKind::InvalidData,
                format!("frame of {len} bytes exceeds limit"),
            ));
        }
        at += 4 + len;
    }
    Ok(if buf.len() >= at { Framing::Complete(at) } else { Framing::Need(at) })
}

const READ_CHUNK: usize = 256 << 10;

/// Buffered message reader that hands out frames as slices of its read
/// buffer instead of copying each one out.
pub struct MessageReader<R> {
    inner: R,
    buf: BytesMut,
}

impl<R: Read> MessageReader<R> {
    pub fn new(inner: R) -> Self {
        Self {
            inner,
            buf: BytesMut::new(),
        }
    }

    /// Same contract as [`read_message`].
    pub fn read(&mut self) -> io::Result<Option<Vec<Bytes>>> {
        loop {
            let need = match framing(&self.buf)? {
                Framing::Complete(len) => return Ok(Some(self.split(len))),
                Framing::Need(n) => n,
            };
            let filled = self.buf.len();
            self.buf.reserve((need - filled).max(READ_CHUNK));
            self.buf.resize(self.buf.capacity(), 0);
            let n = loop {
                match self.inner.read(&mut self.buf[filled..]) {
                    Err(e) if e.kind() == io::ErrorKind::Interrupted => continue,
                    r => break r,
                }
            };
            self.buf.truncate(filled + *n.as_ref().unwrap_or(&0));
            match n? {
                0 if filled == 0 => return Ok(None),
                0 => return Err(io::ErrorKind::UnexpectedEof.into()),
                _ => {}
            }
        }
    }

    /// Whether [`MessageReader::read`] would return without touching the source.
    pub fn has_buffered_message(&self) -> bool {
        matches!(framing(&self.buf), Ok(Framing::Complete(_)) | Err(_))
    }

    fn split(&mut self, len: usize) -> Vec<Bytes> {
        let mut msg = self.buf.split_to(len).freeze();
        let count = msg[0] as usize;
        msg.advance(1);
        (0..count)
            .map(|_| {
                let len = msg.get_u32_le() as usize;
                msg.split_to(len)
            })
            .collect()
    }
}

/// Sending end of a pipeline connection.
pub struct PushSocket {
    writer: BufWriter<TcpStream>,
    peer: SocketAddr,
}

impl PushSocket {
    pub fn connect(addr: &str, deadline: Duration) -> Result<Self, TransportError> {
        let stream = connect_with_retry(addr, deadline)?;
        stream.set_nodelay(true)?;
        let peer = stream.peer_addr()?;
        Ok(Self {
            writer: BufWriter::with_capacity(256 << 10, stream),
            peer,
        })
    }

    pub fn peer_addr(&self) -> SocketAddr {
        self.peer
    }
}

impl MessageSink for PushSocket {
    fn send(&mut self, frames: &[Bytes]) -> Result<(), TransportError> {
        write_message(&mut self.writer, frames)?;
        self.writer.flush()?;
        Ok(())
    }

    fn send_buffered(&mut self, frames: &[Bytes]) -> Result<(), TransportError> {
        Ok(write_message(&mut self.writer, frames)?)
    }

    fn flush(&mut self) -> Result<(), TransportError> {
        Ok(self.writer.flush()?)
    }
}

impl Drop for PushSocket {
    fn drop(&mut self) {
        let _ = self.writer.flush();
        let _ = self.writer.get_ref().shutdown(Shutdown::Write);
    }
}

struct PullShared {
    closed: AtomicBool,
    next_peer: AtomicU64,
    streams: Mutex<Vec<TcpStream>>,
}

/// Receiving end: binds, accepts many senders, fair-queues them into one
/// bounded queue.
pub struct PullSocket {
    rx: Receiver<Vec<Envelope>>,
    pending: VecDeque<Envelope>,
    local: SocketAddr,
    shared: Arc<PullShared>,
}

impl PullSocket {
    pub fn bind(addr: &str, hwm: usize) -> Result<Self, TransportError> {
        let listener = TcpListener::bind(addr)?;
        let local = listener.local_addr()?;
        // bounded in batches; roughly `hwm` messages end to end
        let (tx, rx) = bounded(hwm.div_ceil(READ_BATCH).max(1));
        let shared = Arc::new(PullShared {
            closed: AtomicBool::new(false),
            next_peer: AtomicU64::new(1),
            streams: Mutex::new(Vec::new()),
        });
        let accept_shared = shared.clone();
        thread::Builder::new()
            .name(format!("pull-accept-{}", local.port()))
            .spawn(move || accept_loop(listener, tx, accept_shared))?;
        Ok(Self {
            rx,
            pending: VecDeque::new(),
            local,
            shared,
        })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.local
    }

    pub fn recv(&mut self) -> Result<Envelope, TransportError> {
        loop {
            if let Some(env) = self.pending.pop_front() {
                return Ok(env);
            }
            self.pending.extend(self.rx.recv().map_err(|_| TransportError::Closed)?);
        }
    }
}

fn accept_loop(listener: TcpListener, tx: Sender<Vec<Envelope>>, shared: Arc<PullShared>) {
    for stream in listener.incoming() {
        if shared.closed.load(Ordering::Acquire) {
            break;
        }
        let stream = match stream {
            Ok(s) => s,
            Err(e) => {
                log::warn!("accept failed: {e}");
                continue;
            }
        };
        let _ = stream.set_nodelay(true);
        if let Ok(clone) = stream.try_clone() {
            shared.streams.lock().push(clone);
        }
        let peer = shared.next_peer.fetch_add(1, Ordering::Relaxed);
        let tx = tx.clone();
        let spawned = thread::Builder::new()
            .name(format!("pull-peer-{peer}"))
            .spawn(move || {
                let mut reader = MessageReader::new(stream);
                let mut batch = Vec::with_capacity(READ_BATCH);
                loop {
                    match reader.read() {
                        Ok(Some(frames)) => batch.push(Envelope { peer, frames }),
                        Ok(None) => break,
                        Err(e) => {
                            log::debug!("peer {peer} read error: {e}");
                            break;
                        }
                    }
                    if batch.len() < READ_BATCH && reader.has_buffered_message() {
                        continue;
                    }
                    if tx.send(std::mem::replace(&mut batch, Vec::with_capacity(READ_BATCH))).is_err() {
                        return;
                    }
                }
                if !batch.is_empty() {
                    let _ = tx.send(batch);
                }
            });
        if let Err(e) = spawned {
            log::error!("could not spawn reader: {e}");
        }
    }
}

impl MessageSource for PullSocket {
    fn recv_timeout(&mut self, timeout: Duration) -> Result<Option<Envelope>, TransportError> {
        if let Some(env) = self.pending.pop_front() {
            return Ok(Some(env));
        }
        match self.rx.recv_timeout(timeout) {
            Ok(batch) => {
                self.pending.extend(batch);
                Ok(self.pending.pop_front())
            }
            Err(RecvTimeoutError::Timeout) => Ok(None),
            Err(RecvTimeoutError::Disconnected) => Err(TransportError::Closed),
        }
    }
}

impl Drop for PullSocket {
    fn drop(&mut self) {
        self.shared.closed.store(true, Ordering::Release);
        for s in self.shared.streams.lock().drain(..) {
            let _ = s.shutdown(Shutdown::Both);
        }
        // wake the accept loop so it observes `closed`
        let _ = TcpStream::connect_timeout(&self.local, Duration::from_millis(200));
    }
}

/// In-process sender. Cloneable; each clone counts as a distinct peer.
pub struct PipeSink {
    tx: Sender<Envelope>,
    peer: PeerId,
    peers: Arc<AtomicU64>,
}

impl Clone for PipeSink {
    fn clone(&self) -> Self {
        Self {
            tx: self.tx.clone(),
            peer: self.peers.fetch_add(1, Ordering::Relaxed),
            peers: self.peers.clone(),
        }
    }
}

impl MessageSink for PipeSink {
    fn send(&mut self, frames: &[Bytes]) -> Result<(), TransportError> {
        self.tx
            .send(Envelope {
                peer: self.peer,
                frames: frames.to_vec(),
            })
            .map_err(|_| TransportError::Closed)
    }
}

pub struct PipeSource {
    rx: Receiver<Envelope>,
}

impl MessageSource for PipeSource {
    fn recv_timeout(&mut self, timeout: Duration) -> Result<Option<Envelope>, TransportError> {
        match self.rx.recv_timeout(timeout) {
            Ok(env) => Ok(Some(env)),
            Err(RecvTimeoutError::Timeout) => Ok(None),
            Err(RecvTimeoutError::Disconnected) => Err(TransportError::Closed),
        }
    }
}

/// Bounded in-process pipeline channel with the same blocking semantics as
/// the TCP sockets.
pub fn pipe(hwm: usize) -> (PipeSink, PipeSource) {
    let (tx, rx) = bounded(hwm.max(1));
    let peers = Arc::new(AtomicU64::new(2));
    (PipeSink { tx, peer: 1, peers }, PipeSource { rx })
}
