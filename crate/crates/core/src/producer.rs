//! Sector producers: synthetic detector readout for one sector index,
//! expected-count announcements, streaming threads and the raw-file fallback
//! used when no NodeGroup is available.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::ops::Range;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use bytes::Bytes;
use parking_lot::Mutex;
use rand::rngs::SmallRng;
use rand::{Rng, RngCore, SeedableRng};
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use thiserror::Error;

use crate::counting::{Frame, FrameSource};
use crate::protocol::{
    decode_sector_header, encode_info_map, encode_sector_message, DetectorGeometry, InfoMap,
    ProtocolError, SectorHeader, SectorMessage, FLAG_SYNTHETIC, N_SECTORS, SECTOR_HEADER_LEN,
};
use crate::transport::{MessageSink, PushSocket, TransportError};

/// Injected electron events sit this many noise sigmas above the mean,
/// strictly between the usual background (4-4.5σ) and x-ray (10σ) cuts.
pub const EVENT_SIGMAS: f64 = 7.0;
pub const XRAY_VALUE: u16 = u16::MAX;
pub const MAX_LOSS_PROBABILITY: f64 = 1.0;
pub const DEFAULT_PRODUCER_THREADS: usize = 4;

#[derive(Debug, Error)]
pub enum ProducerError {
    #[error("invalid scan spec: {0}")]
    InvalidSpec(String),
    #[error("protocol: {0}")]
    Protocol(#[from] ProtocolError),
    #[error("transport: {0}")]
    Transport(#[from] TransportError),
    #[error("i/o on {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("channel closed after {} of {} frames", .partial.sent + .partial.dropped, .partial.frames)]
    ChannelClosed { partial: ThreadReport },
    #[error("producer thread panicked")]
    Panicked,
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> ProducerError + '_ {
    move |source| ProducerError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Parameters of one synthetic acquisition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanSpec {
    pub scan_number: u32,
    pub scan_rows: u32,
    pub scan_cols: u32,
    #[serde(default = "default_frame_dim")]
    pub frame_rows: u32,
    #[serde(default = "default_frame_dim")]
    pub frame_cols: u32,
    /// Poisson mean of electron events per frame.
    #[serde(default)]
    pub event_rate: f64,
    #[serde(default = "default_noise_mean")]
    pub noise_mean: f64,
    #[serde(default = "default_noise_stddev")]
    pub noise_stddev: f64,
    /// Poisson mean of saturated pixels per frame.
    #[serde(default)]
    pub xray_rate: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub loss_probability: f64,
}

fn default_frame_dim() -> u32 {
    576
}
fn default_noise_mean() -> f64 {
    100.0
}
fn default_noise_stddev() -> f64 {
    5.0
}

impl ScanSpec {
    /// Spec with default noise, no events and no loss.
    pub fn new(scan_number: u32, scan_rows: u32, scan_cols: u32, geometry: DetectorGeometry) -> Self {
        Self {
            scan_number,
            scan_rows,
            scan_cols,
            frame_rows: geometry.frame_rows,
            frame_cols: geometry.frame_cols,
            event_rate: 0.0,
            noise_mean: default_noise_mean(),
            noise_stddev: default_noise_stddev(),
            xray_rate: 0.0,
            seed: 0,
            loss_probability: 0.0,
        }
    }

    pub fn geometry(&self) -> DetectorGeometry {
        DetectorGeometry {
            frame_rows: self.frame_rows,
            frame_cols: self.frame_cols,
        }
    }

    pub fn n_frames(&self) -> u32 {
        self.scan_rows * self.scan_cols
    }

    pub fn validate(&self) -> Result<(), ProducerError> {
        let bad = |m: String| Err(ProducerError::InvalidSpec(m));
        self.geometry()
            .validate()
            .map_err(|e| ProducerError::InvalidSpec(e.to_string()))?;
        if self.scan_rows == 0 || self.scan_cols == 0 {
            return bad("scan dimensions must be >= 1".into());
        }
        if (self.scan_rows as u64 * self.scan_cols as u64) > u32::MAX as u64 {
            return bad("scan too large".into());
        }
        if !(0.0..=MAX_LOSS_PROBABILITY).contains(&self.loss_probability) {
            return bad(format!("loss_probability {} outside [0, 1]", self.loss_probability));
        }
        for (name, v) in [
            ("event_rate", self.event_rate),
            ("xray_rate", self.xray_rate),
            ("noise_mean", self.noise_mean),
            ("noise_stddev", self.noise_stddev),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{name} must be finite and >= 0"));
            }
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self, ProducerError> {
        let spec: Self = serde_json::from_str(text).map_err(|e| ProducerError::InvalidSpec(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self, ProducerError> {
        Self::from_json(&fs::read_to_string(path).map_err(io_err(path))?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scan spec serializes")
    }
}

fn mix(mut z: u64) -> u64 {
    // splitmix64 finalizer
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn stream_seed(spec: &ScanSpec, frame: u32, sector: u16, salt: u64) -> u64 {
    let mut h = mix(spec.seed ^ 0x5334_4443);
    for v in [spec.scan_number as u64, frame as u64, sector as u64, salt] {
        h = mix(h ^ v.wrapping_add(0x9e37_79b9_7f4a_7c15));
    }
    h
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum InjectedKind {
    Event,
    Xray,
}

/// Ground truth written by the generator: frame-level pixel index and kind.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct InjectedPixel {
    pub pixel: u32,
    pub kind: InjectedKind,
}

fn poisson_count(rng: &mut SmallRng, mean: f64) -> u64 {
    if mean <= 0.0 {
        return 0;
    }
    Poisson::new(mean).map(|d| d.sample(rng) as u64).unwrap_or(0)
}

/// Samples `round(N(mean, sd))` clamped to u16 from one 32-bit uniform by
/// inverting the discretised CDF. Exact up to the 2^-32 resolution of the
/// uniform, so tails reach about 6.3 sigma.
struct NoiseTable {
    low: i64,
    /// `cuts[j]` is the first uniform value that maps to `low + j`.
    cuts: Vec<u64>,
    /// Index into `cuts` at the start of each 2^16-wide bin.
    start: Vec<u32>,
}

impl NoiseTable {
    fn new(mean: f64, sd: f64) -> Self {
        let normal = Normal::new(mean, sd).expect("validated stddev");
        let low = (mean - 7.0 * sd).floor() as i64;
        let high = (mean + 7.0 * sd).ceil() as i64;
        let scale = (1u64 << 32) as f64;
        let mut cuts: Vec<u64> = (low..=high)
            .map(|k| (normal.cdf(k as f64 - 0.5) * scale - 0.5).ceil().clamp(0.0, scale) as u64)
            .collect();
        cuts[0] = 0;
        let mut start = Vec::with_capacity(1 << 16);
        let mut j = 0;
        for b in 0..1u64 << 16 {
            while j + 1 < cuts.len() && cuts[j + 1] <= b << 16 {
                j += 1;
            }
            start.push(j as u32);
        }
        NoiseTable { low, cuts, start }
    }

    #[inline]
    fn sample(&self, x: u32) -> u16 {
        let mut j = self.start[(x >> 16) as usize] as usize;
        while j + 1 < self.cuts.len() && x as u64 >= self.cuts[j + 1] {
            j += 1;
        }
        (self.low + j as i64).clamp(0, 65535) as u16
    }
}

// Producer threads are short-lived, so the table is shared process-wide.
fn noise_table(mean: f64, sd: f64) -> Arc<NoiseTable> {
    static TABLES: Mutex<Vec<(u64, u64, Arc<NoiseTable>)>> = Mutex::new(Vec::new());
    let key = (mean.to_bits(), sd.to_bits());
    let mut tables = TABLES.lock();
    if let Some((_, _, t)) = tables.iter().find(|(m, s, _)| (*m, *s) == key) {
        return t.clone();
    }
    let t = Arc::new(NoiseTable::new(mean, sd));
    if tables.len() >= 8 {
        tables.remove(0);
    }
    tables.push((key.0, key.1, t.clone()));
    t
}

/// Generates one sector plus the log of pixels it injected.
pub fn generate_sector_logged(spec: &ScanSpec, frame_number: u32, sector_index: u16) -> (SectorMessage, Vec<InjectedPixel>) {
    let geometry = spec.geometry();
    let n = geometry.sector_pixels();
    let mut rng = SmallRng::seed_from_u64(stream_seed(spec, frame_number, sector_index, 0));
    let mut bytes = vec![0u8; n * 2];
    if spec.noise_stddev > 0.0 {
        let table = noise_table(spec.noise_mean, spec.noise_stddev);
        let mut quads = bytes.chunks_exact_mut(4);
        for q in &mut quads {
            let x = rng.next_u64();
            q[..2].copy_from_slice(&table.sample(x as u32).to_le_bytes());
            q[2..].copy_from_slice(&table.sample((x >> 32) as u32).to_le_bytes());
        }
        let rest = quads.into_remainder();
        if !rest.is_empty() {
            rest.copy_from_slice(&table.sample(rng.next_u32()).to_le_bytes());
        }
    } else {
        let v = spec.noise_mean.round().clamp(0.0, 65535.0) as u16;
        for px in bytes.chunks_exact_mut(2) {
            px.copy_from_slice(&v.to_le_bytes());
        }
    }
    let base = sector_index as u32 * n as u32;
    let mut log = Vec::new();
    let event_value = (spec.noise_mean + EVENT_SIGMAS * spec.noise_stddev)
        .round()
        .clamp(0.0, 65535.0) as u16;
    let per_sector = N_SECTORS as f64;
    for _ in 0..poisson_count(&mut rng, spec.event_rate / per_sector) {
        let i = rng.random_range(0..n);
        bytes[2 * i..2 * i + 2].copy_from_slice(&event_value.to_le_bytes());
        log.push(InjectedPixel {
            pixel: base + i as u32,
            kind: InjectedKind::Event,
        });
    }
    for _ in 0..poisson_count(&mut rng, spec.xray_rate / per_sector) {
        let i = rng.random_range(0..n);
        bytes[2 * i..2 * i + 2].copy_from_slice(&XRAY_VALUE.to_le_bytes());
        log.push(InjectedPixel {
            pixel: base + i as u32,
            kind: InjectedKind::Xray,
        });
    }
    let header = SectorHeader {
        scan_number: spec.scan_number,
        frame_number,
        sector_index,
        sequence: 0,
        flags: FLAG_SYNTHETIC,
    };
    (
        SectorMessage {
            header,
            payload: Bytes::from(bytes),
        },
        log,
    )
}

/// Deterministic synthetic sector for `(seed, scan, frame, sector)`.
pub fn generate_sector(spec: &ScanSpec, frame_number: u32, sector_index: u16) -> SectorMessage {
    generate_sector_logged(spec, frame_number, sector_index).0
}

/// Whether this sector is lost at ingest, before it reaches the pipeline.
pub fn sector_lost(spec: &ScanSpec, frame_number: u32, sector_index: u16) -> bool {
    if spec.loss_probability <= 0.0 {
        return false;
    }
    let mut rng = SmallRng::seed_from_u64(stream_seed(spec, frame_number, sector_index, 1));
    rng.random::<f64>() < spec.loss_probability
}

/// Contiguous, disjoint per-thread frame ranges for one sector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProducerPlan {
    pub sector_index: u16,
    pub ranges: Vec<Range<u32>>,
}

impl ProducerPlan {
    pub fn new(sector_index: u16, threads: usize, n_frames: u32) -> Self {
        let threads = threads.max(1) as u32;
        let base = n_frames / threads;
        let extra = n_frames % threads;
        let mut start = 0;
        let ranges = (0..threads)
            .map(|t| {
                let len = base + u32::from(t < extra);
                let r = start..start + len;
                start += len;
                r
            })
            .collect();
        Self { sector_index, ranges }
    }

    pub fn thread_count(&self) -> usize {
        self.ranges.len()
    }
}

/// Messages each NodeGroup will receive for `frames`: group `g` of
/// `uids.len()` owns every frame with `f mod n == g`. `None` when no group
/// is available, which means disk fallback.
pub fn expected_counts(frames: impl IntoIterator<Item = u32>, uids: &[String]) -> Option<Vec<(String, u64)>> {
    if uids.is_empty() {
        return None;
    }
    let n = uids.len() as u32;
    let mut counts = vec![0u64; uids.len()];
    for f in frames {
        counts[(f % n) as usize] += 1;
    }
    Some(uids.iter().cloned().zip(counts).collect())
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ThreadReport {
    pub sector_index: u16,
    pub thread_index: usize,
    pub frames: u64,
    pub sent: u64,
    pub dropped: u64,
    pub dropped_frames: Vec<u32>,
    pub bytes_sent: u64,
}

/// Frames of `range` that survive ingest loss.
fn surviving(spec: &ScanSpec, sector: u16, range: Range<u32>, report: &mut ThreadReport) -> Vec<u32> {
    range
        .filter(|&f| {
            if sector_lost(spec, f, sector) {
                report.dropped += 1;
                report.dropped_frames.push(f);
                log::debug!("scan {} frame {f} sector {sector} lost at ingest", spec.scan_number);
                false
            } else {
                true
            }
        })
        .collect()
}

/// Announces expected counts on `sink`, then streams every surviving sector
/// of `range`. Blocks on backpressure, never drops in-pipeline.
pub fn run_producer_thread(
    spec: &ScanSpec,
    sector_index: u16,
    thread_index: usize,
    range: Range<u32>,
    uids: &[String],
    sink: &mut dyn MessageSink,
) -> Result<ThreadReport, ProducerError> {
    let geometry = spec.geometry();
    let mut report = ThreadReport {
        sector_index,
        thread_index,
        frames: range.len() as u64,
        ..Default::default()
    };
    let frames = surviving(spec, sector_index, range, &mut report);
    let entries = expected_counts(frames.iter().copied(), uids)
        .ok_or_else(|| ProducerError::InvalidSpec("no NodeGroups to stream to".into()))?;
    let info = encode_info_map(&InfoMap::new(spec.scan_number, entries))?;
    if sink.send(&[info]).is_err() {
        return Err(ProducerError::ChannelClosed { partial: report });
    }
    for (seq, f) in frames.into_iter().enumerate() {
        let mut msg = generate_sector(spec, f, sector_index);
        msg.header.sequence = seq as u32;
        let parts = encode_sector_message(&msg, &geometry)?;
        if let Err(e) = sink.send_buffered(&parts) {
            log::warn!("sector {sector_index} thread {thread_index}: {e}");
            return Err(ProducerError::ChannelClosed { partial: report });
        }
        report.sent += 1;
        report.bytes_sent += (parts[0].len() + parts[1].len()) as u64;
    }
    if let Err(e) = sink.flush() {
        log::warn!("sector {sector_index} thread {thread_index}: {e}");
        return Err(ProducerError::ChannelClosed { partial: report });
    }
    Ok(report)
}

pub fn raw_file_name(scan_number: u32, sector_index: u16, thread_index: usize) -> String {
    format!("scan{scan_number}_sector{sector_index}_t{thread_index}.raw")
}

/// Parses `scan{N}_sector{K}_t{T}.raw`.
pub fn parse_raw_file_name(name: &str) -> Option<(u32, u16, usize)> {
    let rest = name.strip_prefix("scan")?.strip_suffix(".raw")?;
    let (scan, rest) = rest.split_once("_sector")?;
    let (sector, thread) = rest.split_once("_t")?;
    Some((scan.parse().ok()?, sector.parse().ok()?, thread.parse().ok()?))
}

/// Writes the surviving sectors of `range` as concatenated encoded messages
/// (header frame then payload frame). An empty range still creates the file.
pub fn fallback_write(
    spec: &ScanSpec,
    sector_index: u16,
    thread_index: usize,
    range: Range<u32>,
    dir: &Path,
    sync: bool,
) -> Result<(PathBuf, ThreadReport), ProducerError> {
    let geometry = spec.geometry();
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let path = dir.join(raw_file_name(spec.scan_number, sector_index, thread_index));
    let mut report = ThreadReport {
        sector_index,
        thread_index,
        frames: range.len() as u64,
        ..Default::default()
    };
    let frames = surviving(spec, sector_index, range, &mut report);
    let file = File::create(&path).map_err(io_err(&path))?;
    let mut w = BufWriter::with_capacity(1 << 20, file);
    for (seq, f) in frames.into_iter().enumerate() {
        let mut msg = generate_sector(spec, f, sector_index);
        msg.header.sequence = seq as u32;
        let [header, payload] = encode_sector_message(&msg, &geometry)?;
        w.write_all(&header).map_err(io_err(&path))?;
        w.write_all(&payload).map_err(io_err(&path))?;
        report.sent += 1;
        report.bytes_sent += (header.len() + payload.len()) as u64;
    }
    let file = w.into_inner().map_err(|e| io_err(&path)(e.into_error()))?;
    if sync {
        file.sync_all().map_err(io_err(&path))?;
    }
    Ok((path, report))
}

/// Streaming reader over a raw fallback file.
pub struct RawFileReader {
    reader: BufReader<File>,
    path: PathBuf,
}

impl RawFileReader {
    pub fn open(path: &Path) -> Result<Self, ProducerError> {
        Ok(Self {
            reader: BufReader::with_capacity(1 << 20, File::open(path).map_err(io_err(path))?),
            path: path.to_path_buf(),
        })
    }
}

impl Iterator for RawFileReader {
    type Item = Result<SectorMessage, ProducerError>;

    fn next(&mut self) -> Option<Self::Item> {
        let mut header = [0u8; SECTOR_HEADER_LEN];
        match read_full(&mut self.reader, &mut header) {
            Ok(0) => return None,
            Ok(n) if n < SECTOR_HEADER_LEN => {
                return Some(Err(ProtocolError::Truncated {
                    field: "raw file header",
                    needed: SECTOR_HEADER_LEN,
                    available: n,
                }
                .into()))
            }
            Ok(_) => {}
            Err(e) => return Some(Err(io_err(&self.path)(e))),
        }
        let (parsed, len) = match decode_sector_header(&header) {
            Ok(v) => v,
            Err(e) => return Some(Err(e.into())),
        };
        let mut payload = vec![0u8; len];
        match read_full(&mut self.reader, &mut payload) {
            Ok(n) if n < len => Some(Err(ProtocolError::Truncated {
                field: "payload",
                needed: len,
                available: n,
            }
            .into())),
            Ok(_) => Some(Ok(SectorMessage {
                header: parsed,
                payload: Bytes::from(payload),
            })),
            Err(e) => Some(Err(io_err(&self.path)(e))),
        }
    }
}

fn read_full<R: Read>(r: &mut R, buf: &mut [u8]) -> io::Result<usize> {
    let mut filled = 0;
    while filled < buf.len() {
        match r.read(&mut buf[filled..]) {
            Ok(0) => break,
            Ok(n) => filled += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e),
        }
    }
    Ok(filled)
}

pub fn read_raw_file(path: &Path) -> Result<Vec<SectorMessage>, ProducerError> {
    RawFileReader::open(path)?.collect()
}

/// Re-streams a raw fallback file exactly as a live producer thread would:
/// one info map over the file's frames, then every message unchanged.
pub fn replay_raw_file(
    path: &Path,
    geometry: &DetectorGeometry,
    uids: &[String],
    sink: &mut dyn MessageSink,
) -> Result<ThreadReport, ProducerError> {
    let messages = read_raw_file(path)?;
    let (scan_number, sector_index, thread_index) = path
        .file_name()
        .and_then(|n| n.to_str())
        .and_then(parse_raw_file_name)
        .ok_or_else(|| ProducerError::InvalidSpec(format!("not a raw file name: {}", path.display())))?;
    let mut report = ThreadReport {
        sector_index,
        thread_index,
        frames: messages.len() as u64,
        ..Default::default()
    };
    let entries = expected_counts(messages.iter().map(|m| m.header.frame_number), uids)
        .ok_or_else(|| ProducerError::InvalidSpec("no NodeGroups to replay to".into()))?;
    sink.send(&[encode_info_map(&InfoMap::new(scan_number, entries))?])?;
    for msg in &messages {
        let parts = encode_sector_message(msg, geometry)?;
        sink.send(&parts)?;
        report.sent += 1;
        report.bytes_sent += (parts[0].len() + parts[1].len()) as u64;
    }
    Ok(report)
}

/// All raw files of `scan_number` in `dir`, ordered by (sector, thread).
pub fn raw_files(dir: &Path, scan_number: u32) -> Result<Vec<PathBuf>, ProducerError> {
    let mut found = Vec::new();
    for entry in fs::read_dir(dir).map_err(io_err(dir))? {
        let entry = entry.map_err(io_err(dir))?;
        let name = entry.file_name();
        if let Some((scan, sector, thread)) = name.to_str().and_then(parse_raw_file_name) {
            if scan == scan_number {
                found.push(((sector, thread), entry.path()));
            }
        }
    }
    found.sort();
    Ok(found.into_iter().map(|(_, p)| p).collect())
}

/// Synthetic scan viewed as assembled frames.
#[derive(Debug, Clone)]
pub struct SyntheticScan {
    pub spec: ScanSpec,
    pub apply_loss: bool,
}

impl SyntheticScan {
    pub fn new(spec: ScanSpec) -> Self {
        Self {
            spec,
            apply_loss: false,
        }
    }

    pub fn with_loss(mut self) -> Self {
        self.apply_loss = true;
        self
    }

    /// Ground-truth injected pixels of one frame.
    pub fn injected(&self, frame_number: u32) -> Vec<InjectedPixel> {
        (0..N_SECTORS as u16)
            .flat_map(|s| generate_sector_logged(&self.spec, frame_number, s).1)
            .collect()
    }
}

impl FrameSource for SyntheticScan {
    fn geometry(&self) -> DetectorGeometry {
        self.spec.geometry()
    }

    fn n_frames(&self) -> u32 {
        self.spec.n_frames()
    }

    fn frame(&self, frame_number: u32) -> Option<Frame> {
        let geometry = self.spec.geometry();
        let mut pixels = vec![0u16; geometry.frame_pixels()];
        let mut mask = 0u8;
        for s in 0..N_SECTORS as u16 {
            if self.apply_loss && sector_lost(&self.spec, frame_number, s) {
                continue;
            }
            let msg = generate_sector(&self.spec, frame_number, s);
            place_sector(&mut pixels, &geometry, s, &msg.payload);
            mask |= 1 << s;
        }
        (mask != 0).then_some(Frame {
            frame_number,
            sector_mask: mask,
            pixels,
        })
    }
}

/// Copies a little-endian sector payload into its row band of a frame.
pub fn place_sector(frame: &mut [u16], geometry: &DetectorGeometry, sector_index: u16, payload: &[u8]) {
    let n = geometry.sector_pixels();
    let start = sector_index as usize * n;
    for (dst, src) in frame[start..start + n].iter_mut().zip(payload.chunks_exact(2)) {
        *dst = u16::from_le_bytes([src[0], src[1]]);
    }
}

/// Raw fallback files of one scan, loaded into memory and viewed as frames.
pub struct RawScan {
    geometry: DetectorGeometry,
    n_frames: u32,
    sectors: BTreeMap<u32, [Option<Bytes>; N_SECTORS]>,
    pub bytes_read: u64,
}

impl RawScan {
    pub fn load(files: &[PathBuf], geometry: DetectorGeometry, n_frames: u32) -> Result<Self, ProducerError> {
        let mut sectors: BTreeMap<u32, [Option<Bytes>; N_SECTORS]> = BTreeMap::new();
        let mut bytes_read = 0;
        for path in files {
            for msg in RawFileReader::open(path)? {
                let msg = msg?;
                if msg.payload.len() != geometry.sector_bytes() {
                    return Err(ProtocolError::GeometryMismatch {
                        expected: geometry.sector_bytes(),
                        actual: msg.payload.len(),
                    }
                    .into());
                }
                bytes_read += (SECTOR_HEADER_LEN + msg.payload.len()) as u64;
                sectors.entry(msg.header.frame_number).or_default()[msg.header.sector_index as usize] =
                    Some(msg.payload);
            }
        }
        Ok(Self {
            geometry,
            n_frames,
            sectors,
            bytes_read,
        })
    }
}

impl FrameSource for RawScan {
    fn geometry(&self) -> DetectorGeometry {
        self.geometry
    }

    fn n_frames(&self) -> u32 {
        self.n_frames
    }

    fn frame(&self, frame_number: u32) -> Option<Frame> {
        let parts = self.sectors.get(&frame_number)?;
        let mut pixels = vec![0u16; self.geometry.frame_pixels()];
        let mut mask = 0u8;
        for (s, payload) in parts.iter().enumerate() {
            if let Some(p) = payload {
                place_sector(&mut pixels, &self.geometry, s as u16, p);
                mask |= 1 << s;
            }
        }
        Some(Frame {
            frame_number,
            sector_mask: mask,
            pixels,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScanMode {
    Streamed,
    DiskFallback,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SectorReport {
    pub scan_number: u32,
    pub sector_index: u16,
    pub mode: ScanMode,
    pub threads: Vec<ThreadReport>,
    pub raw_paths: Vec<PathBuf>,
    pub elapsed_ms: u64,
}

impl SectorReport {
    pub fn sent(&self) -> u64 {
        self.threads.iter().map(|t| t.sent).sum()
    }

    pub fn dropped(&self) -> u64 {
        self.threads.iter().map(|t| t.dropped).sum()
    }
}

/// How one sector process runs a scan.
#[derive(Debug, Clone)]
pub struct SectorConfig {
    pub spec: ScanSpec,
    pub sector_index: u16,
    pub threads: usize,
    /// Aggregator listener dedicated to this sector.
    pub aggregator: String,
    pub fallback_dir: PathBuf,
    pub connect_timeout: Duration,
    /// fsync raw fallback files before reporting them written.
    pub sync_fallback: bool,
}

/// Runs every thread of one sector for one scan. `uids` is the NodeGroup
/// membership pinned at scan start; empty means disk fallback.
pub fn run_sector(cfg: &SectorConfig, uids: &[String]) -> Result<SectorReport, ProducerError> {
    cfg.spec.validate()?;
    let plan = ProducerPlan::new(cfg.sector_index, cfg.threads, cfg.spec.n_frames());
    let start = Instant::now();
    let mode = if uids.is_empty() {
        ScanMode::DiskFallback
    } else {
        ScanMode::Streamed
    };
    let results: Vec<Result<(Option<PathBuf>, ThreadReport), ProducerError>> = thread::scope(|s| {
        let handles: Vec<_> = plan
            .ranges
            .iter()
            .enumerate()
            .map(|(t, range)| {
                let range = range.clone();
                s.spawn(move || match mode {
                    ScanMode::DiskFallback => {
                        fallback_write(&cfg.spec, cfg.sector_index, t, range, &cfg.fallback_dir, cfg.sync_fallback)
                            .map(|(p, r)| (Some(p), r))
                    }
                    ScanMode::Streamed => {
                        let mut sink = PushSocket::connect(&cfg.aggregator, cfg.connect_timeout)?;
                        run_producer_thread(&cfg.spec, cfg.sector_index, t, range, uids, &mut sink)
                            .map(|r| (None, r))
                    }
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().unwrap_or(Err(ProducerError::Panicked)))
            .collect()
    });
    let mut report = SectorReport {
        scan_number: cfg.spec.scan_number,
        sector_index: cfg.sector_index,
        mode,
        threads: Vec::new(),
        raw_paths: Vec::new(),
        elapsed_ms: 0,
    };
    for r in results {
        let (path, thread_report) = r?;
        report.raw_paths.extend(path);
        report.threads.push(thread_report);
    }
    report.elapsed_ms = start.elapsed().as_millis() as u64;
    Ok(report)
}
