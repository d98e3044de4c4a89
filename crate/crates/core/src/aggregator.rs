//! Central router. One thread per upstream sector process pulls two-part
//! messages, reads only the header, and pushes the untouched frames to the
//! NodeGroup at index `frame_number mod n`.
//!
//! The routing table for a scan comes from the producers' own info maps:
//! their entry order is the group order, so the aggregator can never
//! disagree with the counts the producers announced.

use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, BufReader, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use bytes::Bytes;
use parking_lot::Mutex;
use thiserror::Error;

use crate::protocol::{
    decode_info_map, decode_sector_header, encode_hello, encode_info_map, peek_magic, InfoMap, ProtocolError,
    HELLO_MAGIC, INFO_MAGIC, N_SECTORS, SECTOR_MAGIC,
};
use crate::statestore::StateClient;
use crate::transport::{MessageSink, MessageSource, PipeSink, PullSocket, PushSocket, TransportError, DEFAULT_HWM};

/// Scans whose routing state is kept; older ones are forgotten.
const RETAINED_SCANS: usize = 8;

#[derive(Debug, Error)]
pub enum AggregatorError {
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error("no endpoint known for NodeGroup {0}")]
    UnknownNodeGroup(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Sums the info maps of one upstream server's threads. Entry order follows
/// the first map. Returns `None` if the maps disagree on scan or membership.
pub fn combine_info(maps: &[InfoMap]) -> Option<InfoMap> {
    let first = maps.first()?;
    let mut combined = first.clone();
    for m in &maps[1..] {
        if m.scan_number != first.scan_number || !same_members(m, first) {
            return None;
        }
        for (uid, count) in &mut combined.entries {
            *count += m.get(uid).unwrap_or(0);
        }
    }
    Some(combined)
}

fn same_members(a: &InfoMap, b: &InfoMap) -> bool {
    a.entries.len() == b.entries.len() && a.uids().zip(b.uids()).all(|(x, y)| x == y)
}

/// Index of the NodeGroup that owns `frame_number`.
pub fn route(frame_number: u32, n_groups: usize) -> usize {
    assert!(n_groups >= 1, "route needs at least one group");
    (frame_number as u64 % n_groups as u64) as usize
}

/// Resolves a NodeGroup uid to the address its consumer listens on.
pub trait Directory: Send + Sync {
    fn endpoint(&self, uid: &str) -> Option<String>;
}

impl Directory for StateClient {
    fn endpoint(&self, uid: &str) -> Option<String> {
        self.map().get(uid).map(|s| s.endpoint.clone()).filter(|e| !e.is_empty())
    }
}

impl Directory for BTreeMap<String, String> {
    fn endpoint(&self, uid: &str) -> Option<String> {
        self.get(uid).cloned()
    }
}

/// Opens the one-to-one channel from an aggregator thread to a NodeGroup.
pub trait Connector: Send + Sync {
    fn connect(&self, uid: &str) -> Result<Box<dyn MessageSink>, AggregatorError>;
}

pub struct TcpConnector<D> {
    pub directory: D,
    pub timeout: Duration,
}

impl<D: Directory> Connector for TcpConnector<D> {
    fn connect(&self, uid: &str) -> Result<Box<dyn MessageSink>, AggregatorError> {
        let addr = self
            .directory
            .endpoint(uid)
            .ok_or_else(|| AggregatorError::UnknownNodeGroup(uid.to_string()))?;
        Ok(Box::new(PushSocket::connect(&addr, self.timeout)?))
    }
}

impl<D: Directory> Connector for Arc<TcpConnector<D>> {
    fn connect(&self, uid: &str) -> Result<Box<dyn MessageSink>, AggregatorError> {
        self.as_ref().connect(uid)
    }
}

/// In-process NodeGroups; each connect clones the group's sink.
#[derive(Default, Clone)]
pub struct PipeConnector {
    sinks: Arc<Mutex<HashMap<String, PipeSink>>>,
}

impl PipeConnector {
    pub fn insert(&self, uid: &str, sink: PipeSink) {
        self.sinks.lock().insert(uid.to_string(), sink);
    }
}

impl Connector for PipeConnector {
    fn connect(&self, uid: &str) -> Result<Box<dyn MessageSink>, AggregatorError> {
        let sinks = self.sinks.lock();
        let sink = sinks.get(uid).ok_or_else(|| AggregatorError::UnknownNodeGroup(uid.to_string()))?;
        Ok(Box::new(sink.clone()))
    }
}

/// Counters shared by all aggregator threads.
#[derive(Debug, Default)]
pub struct Metrics {
    pub received: AtomicU64,
    pub bytes_received: AtomicU64,
    pub quarantined: AtomicU64,
    forwarded: Mutex<BTreeMap<String, u64>>,
    current: Mutex<ScanProgress>,
}

#[derive(Debug, Default, Clone, Copy, PartialEq, Eq)]
pub struct ScanProgress {
    pub scan_number: u32,
    pub bytes_received: u64,
    pub messages: u64,
    /// First to most recent message of the scan.
    pub elapsed_ms: u64,
    started: Option<Instant>,
}

impl Metrics {
    pub fn forwarded(&self) -> BTreeMap<String, u64> {
        self.forwarded.lock().clone()
    }

    pub fn forwarded_total(&self) -> u64 {
        self.forwarded.lock().values().sum()
    }

    /// Progress of the most recent scan seen.
    pub fn scan_progress(&self) -> ScanProgress {
        *self.current.lock()
    }

    fn record(&self, scan_number: u32, bytes: u64) {
        self.received.fetch_add(1, Ordering::Relaxed);
        self.bytes_received.fetch_add(bytes, Ordering::Relaxed);
        let mut p = self.current.lock();
        if p.started.is_none() || p.scan_number != scan_number {
            *p = ScanProgress {
                scan_number,
                started: Some(Instant::now()),
                ..Default::default()
            };
        }
        p.bytes_received += bytes;
        p.messages += 1;
        p.elapsed_ms = p.started.map_or(0, |t| t.elapsed().as_millis() as u64);
    }

    /// Plain-text exposition, one `name value` pair per line.
    pub fn render(&self) -> String {
        let p = self.scan_progress();
        let mut out = String::new();
        out.push_str(&format!("received_total {}\n", self.received.load(Ordering::Relaxed)));
        out.push_str(&format!("bytes_received_total {}\n", self.bytes_received.load(Ordering::Relaxed)));
        out.push_str(&format!("quarantined_total {}\n", self.quarantined.load(Ordering::Relaxed)));
        for (uid, n) in self.forwarded() {
            out.push_str(&format!("forwarded_total{{uid=\"{uid}\"}} {n}\n"));
        }
        out.push_str(&format!("scan_number {}\n", p.scan_number));
        out.push_str(&format!("scan_bytes_received {}\n", p.bytes_received));
        out.push_str(&format!("scan_messages {}\n", p.messages));
        out.push_str(&format!("scan_elapsed_ms {}\n", p.elapsed_ms));
        out
    }
}

/// Parses [`Metrics::render`] output back into name → value.
pub fn parse_metrics(text: &str) -> BTreeMap<String, u64> {
    text.lines()
        .filter_map(|l| {
            let (k, v) = l.rsplit_once(' ')?;
            Some((k.to_string(), v.parse().ok()?))
        })
        .collect()
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct AggregatorThreadReport {
    pub sector_index: u16,
    pub received: u64,
    pub forwarded: BTreeMap<String, u64>,
    pub quarantined: u64,
}

struct ScanRoute {
    uids: Vec<String>,
    maps: Vec<InfoMap>,
    announced: bool,
}

/// State of one aggregator thread. Exposed so the loop can be driven
/// directly in tests.
pub struct Router<'a> {
    sector_index: u16,
    upstream_threads: usize,
    connector: &'a dyn Connector,
    metrics: &'a Metrics,
    scans: BTreeMap<u32, ScanRoute>,
    sinks: HashMap<String, Box<dyn MessageSink>>,
    pub report: AggregatorThreadReport,
}

impl<'a> Router<'a> {
    pub fn new(sector_index: u16, upstream_threads: usize, connector: &'a dyn Connector, metrics: &'a Metrics) -> Self {
        Self {
            sector_index,
            upstream_threads: upstream_threads.max(1),
            connector,
            metrics,
            scans: BTreeMap::new(),
            sinks: HashMap::new(),
            report: AggregatorThreadReport {
                sector_index,
                ..Default::default()
            },
        }
    }

    fn quarantine(&mut self, why: &str) {
        log::warn!("aggregator {}: quarantined message: {why}", self.sector_index);
        self.report.quarantined += 1;
        self.metrics.quarantined.fetch_add(1, Ordering::Relaxed);
    }

    fn sink(&mut self, uid: &str) -> Result<&mut Box<dyn MessageSink>, AggregatorError> {
        if !self.sinks.contains_key(uid) {
            let mut sink = self.connector.connect(uid)?;
            sink.send(&[encode_hello(self.sector_index)])?;
            self.sinks.insert(uid.to_string(), sink);
        }
        Ok(self.sinks.get_mut(uid).expect("inserted"))
    }

    fn send_to(&mut self, uid: &str, frames: &[Bytes], buffered: bool) -> Result<(), AggregatorError> {
        let res = self.sink(uid).and_then(|s| {
            if buffered {
                s.send_buffered(frames)
            } else {
                s.send(frames)
            }
            .map_err(AggregatorError::from)
        });
        if res.is_err() {
            // reconnect on the next message
            self.sinks.remove(uid);
        }
        res
    }

    /// Pushes out everything buffered downstream. Called whenever the
    /// upstream queue runs dry.
    pub fn flush(&mut self) {
        let mut failed = Vec::new();
        for (uid, sink) in &mut self.sinks {
            if let Err(e) = sink.flush() {
                log::error!("aggregator {}: flush to {uid} failed: {e}", self.sector_index);
                failed.push(uid.clone());
            }
        }
        for uid in failed {
            self.sinks.remove(&uid);
        }
    }

    /// Handles one upstream message.
    pub fn handle(&mut self, frames: &[Bytes]) {
        let Some(first) = frames.first() else {
            return self.quarantine("empty message");
        };
        match peek_magic(first) {
            Some(SECTOR_MAGIC) => self.forward(frames),
            Some(INFO_MAGIC) => match decode_info_map(first) {
                Ok(map) => self.info(map),
                Err(e) => self.quarantine(&e.to_string()),
            },
            Some(HELLO_MAGIC) => {}
            _ => self.quarantine("unknown message type"),
        }
    }

    fn info(&mut self, map: InfoMap) {
        let scan = map.scan_number;
        // a completed round followed by fresh info is a re-run of the scan number
        if self.scans.get(&scan).is_some_and(|r| r.announced && r.maps.len() >= self.upstream_threads) {
            self.scans.remove(&scan);
        }
        let route = self.scans.entry(scan).or_insert_with(|| ScanRoute {
            uids: map.uids().map(str::to_string).collect(),
            maps: Vec::new(),
            announced: false,
        });
        if !route.uids.iter().map(String::as_str).eq(map.uids()) {
            log::error!("aggregator {}: scan {scan} info disagrees on membership", self.sector_index);
            self.report.quarantined += 1;
            self.metrics.quarantined.fetch_add(1, Ordering::Relaxed);
            return;
        }
        route.maps.push(map);
        if route.maps.len() == self.upstream_threads && !route.announced {
            route.announced = true;
            let combined = combine_info(&route.maps).expect("members checked");
            self.announce(combined);
        }
        while self.scans.len() > RETAINED_SCANS {
            self.scans.pop_first();
        }
    }

    fn announce(&mut self, combined: InfoMap) {
        let frame = match encode_info_map(&combined) {
            Ok(f) => f,
            Err(e) => return self.quarantine(&e.to_string()),
        };
        let uids: Vec<String> = combined.uids().map(str::to_string).collect();
        for uid in uids {
            if let Err(e) = self.send_to(&uid, &[frame.clone()], false) {
                log::error!("aggregator {}: info to {uid} failed: {e}", self.sector_index);
            }
        }
    }

    fn forward(&mut self, frames: &[Bytes]) {
        let header = match decode_sector_header(&frames[0]) {
            Ok((h, _)) => h,
            Err(e) => return self.quarantine(&e.to_string()),
        };
        let bytes = frames.iter().map(|f| f.len() as u64).sum();
        self.report.received += 1;
        self.metrics.record(header.scan_number, bytes);
        let Some(table) = self.scans.get(&header.scan_number) else {
            return self.quarantine(&format!("unknown scan {}", header.scan_number));
        };
        let uid = table.uids[route(header.frame_number, table.uids.len())].clone();
        match self.send_to(&uid, frames, true) {
            Ok(()) => {
                *self.report.forwarded.entry(uid.clone()).or_default() += 1;
                *self.metrics.forwarded.lock().entry(uid).or_default() += 1;
            }
            Err(e) => self.quarantine(&format!("forward to {uid}: {e}")),
        }
    }
}

/// Quiet time on the upstream queue after which buffered output is flushed.
pub const FLUSH_LULL: Duration = Duration::from_millis(1);

/// Pulls from `upstream` until `stop` is set or the channel closes.
pub fn run_aggregator_thread(
    sector_index: u16,
    upstream: &mut dyn MessageSource,
    upstream_threads: usize,
    connector: &dyn Connector,
    metrics: &Metrics,
    stop: &AtomicBool,
) -> AggregatorThreadReport {
    let mut router = Router::new(sector_index, upstream_threads, connector, metrics);
    let mut dirty = false;
    while !stop.load(Ordering::Acquire) {
        // keep batching while messages keep coming; flush after a short lull
        let wait = if dirty { FLUSH_LULL } else { Duration::from_millis(100) };
        match upstream.recv_timeout(wait) {
            Ok(Some(env)) => {
                router.handle(&env.frames);
                dirty = true;
            }
            Ok(None) => {
                if dirty {
                    router.flush();
                    dirty = false;
                }
            }
            Err(_) => break,
        }
    }
    router.flush();
    router.report
}

#[derive(Debug, Clone)]
pub struct AggregatorConfig {
    /// Host for the four upstream listeners.
    pub host: String,
    /// Sector `k` listens on `base_port + k`; 0 picks free ports.
    pub base_port: u16,
    /// Producer threads per sector, i.e. info maps to combine.
    pub upstream_threads: usize,
    pub hwm: usize,
    /// Where to serve plain-text metrics, if anywhere.
    pub metrics_addr: Option<String>,
}

impl Default for AggregatorConfig {
    fn default() -> Self {
        Self {
            host: "127.0.0.1".into(),
            base_port: 0,
            upstream_threads: crate::producer::DEFAULT_PRODUCER_THREADS,
            hwm: DEFAULT_HWM,
            metrics_addr: None,
        }
    }
}

/// The running four-thread service.
pub struct Aggregator {
    addrs: Vec<SocketAddr>,
    metrics_addr: Option<SocketAddr>,
    metrics: Arc<Metrics>,
    stop: Arc<AtomicBool>,
    threads: Vec<JoinHandle<AggregatorThreadReport>>,
}

impl Aggregator {
    pub fn start(config: &AggregatorConfig, connector: Arc<dyn Connector>) -> Result<Self, AggregatorError> {
        let metrics = Arc::new(Metrics::default());
        let stop = Arc::new(AtomicBool::new(false));
        let mut sockets = Vec::new();
        for k in 0..N_SECTORS as u16 {
            let port = if config.base_port == 0 { 0 } else { config.base_port + k };
            sockets.push(PullSocket::bind(&format!("{}:{port}", config.host), config.hwm)?);
        }
        let addrs: Vec<SocketAddr> = sockets.iter().map(PullSocket::local_addr).collect();
        let mut threads = Vec::new();
        for (k, mut socket) in sockets.into_iter().enumerate() {
            let (connector, metrics, stop) = (connector.clone(), metrics.clone(), stop.clone());
            let upstream_threads = config.upstream_threads;
            threads.push(
                thread::Builder::new()
                    .name(format!("aggregator-{k}"))
                    .spawn(move || {
                        run_aggregator_thread(k as u16, &mut socket, upstream_threads, &*connector, &metrics, &stop)
                    })?,
            );
        }
        let metrics_addr = match &config.metrics_addr {
            Some(addr) => Some(serve_metrics(addr, metrics.clone(), stop.clone())?),
            None => None,
        };
        log::info!("aggregator listening on {addrs:?}");
        Ok(Self {
            addrs,
            metrics_addr,
            metrics,
            stop,
            threads,
        })
    }

    /// Upstream address for each sector, in sector order.
    pub fn addrs(&self) -> &[SocketAddr] {
        &self.addrs
    }

    pub fn metrics_addr(&self) -> Option<SocketAddr> {
        self.metrics_addr
    }

    pub fn metrics(&self) -> &Arc<Metrics> {
        &self.metrics
    }

    pub fn shutdown(&mut self) -> Vec<AggregatorThreadReport> {
        self.stop.store(true, Ordering::Release);
        self.threads.drain(..).filter_map(|h| h.join().ok()).collect()
    }
}

impl Drop for Aggregator {
    fn drop(&mut self) {
        self.shutdown();
    }
}

/// Minimal HTTP responder for the metrics text. Any request path gets it.
fn serve_metrics(addr: &str, metrics: Arc<Metrics>, stop: Arc<AtomicBool>) -> Result<SocketAddr, AggregatorError> {
    let listener = TcpListener::bind(addr)?;
    listener.set_nonblocking(true)?;
    let local = listener.local_addr()?;
    thread::Builder::new().name("aggregator-metrics".into()).spawn(move || {
        while !stop.load(Ordering::Acquire) {
            match listener.accept() {
                Ok((stream, _)) => {
                    let _ = stream.set_nonblocking(false);
                    let _ = respond(stream, &metrics.render());
                }
                Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => thread::sleep(Duration::from_millis(50)),
                Err(_) => thread::sleep(Duration::from_millis(50)),
            }
        }
    })?;
    Ok(local)
}

fn respond(stream: TcpStream, body: &str) -> std::io::Result<()> {
    stream.set_read_timeout(Some(Duration::from_secs(2)))?;
    let mut reader = BufReader::new(stream.try_clone()?);
    let mut line = String::new();
    // drain request headers
    while reader.read_line(&mut line)? > 2 {
        line.clear();
    }
    let mut stream = stream;
    write!(
        stream,
        "HTTP/1.1 200 OK\r\ncontent-type: text/plain; version=0.0.4\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{body}",
        body.len()
    )?;
    stream.flush()
}
