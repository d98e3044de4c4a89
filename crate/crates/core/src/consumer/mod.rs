//! NodeGroup service: reassembles frames from the four aggregator threads,
//! counts them on a worker pool and writes one sparse file per scan.
//!
//! Threads: one assembly owner (the only thread touching frame slots), a
//! fixed set of counting workers fed through a bounded queue, and one
//! writer. A full worker queue blocks the assembler, which in turn stops
//! draining the receive socket, so pressure propagates back to producers.

mod assembly;
mod catalog;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use crossbeam_channel::{bounded, unbounded, Receiver, Sender};
use serde::{Deserialize, Serialize};

pub use assembly::{Assembled, AssemblyState, FrameSlot};
pub use catalog::{ChainCatalog, DirCatalog, HttpCatalog, MemoryCatalog, ScanCatalog, ScanEntry};

use crate::counting::{calibrate, count_frame, CountingParams, DarkReference, Frame, Thresholds};
use crate::producer::SyntheticScan;
use crate::protocol::{
    decode_info_map, decode_pipeline_message, decode_sector_header, peek_magic, DetectorGeometry, InfoMap,
    PipelineMessage, INFO_MAGIC, N_SECTORS, SECTOR_MAGIC,
};
use crate::sparse::{write_sparse, SparseFrame, SparseScan};
use crate::statestore::{ClientState, NodeKind, NodeStatus, StateClient};
use crate::transport::{Envelope, MessageSource, PeerId, TransportError};

pub const DEFAULT_FINALIZE_TIMEOUT: Duration = Duration::from_millis(5000);
/// Finished scan numbers remembered for discarding stragglers.
const RETAINED_FINISHED: usize = 64;

#[derive(Debug, Clone)]
pub struct NodeGroupConfig {
    pub uid: String,
    pub out_dir: PathBuf,
    pub params: CountingParams,
    /// Quiet period after the last message before open frames are flushed.
    pub finalize_timeout: Duration,
    /// How long to wait for a scan to show up in the catalog.
    pub catalog_wait: Duration,
    pub workers: usize,
    pub dark: Option<DarkReference>,
}

impl NodeGroupConfig {
    pub fn new(uid: impl Into<String>, out_dir: impl Into<PathBuf>) -> Self {
        Self {
            uid: uid.into(),
            out_dir: out_dir.into(),
            params: CountingParams::default(),
            finalize_timeout: DEFAULT_FINALIZE_TIMEOUT,
            catalog_wait: Duration::from_secs(5),
            workers: thread::available_parallelism().map_or(1, |n| n.get()),
            dark: None,
        }
    }
}

/// Outcome of one scan on one NodeGroup.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanResult {
    pub uid: String,
    pub scan_number: u32,
    pub group_index: Option<u32>,
    pub n_groups: u32,
    pub path: Option<PathBuf>,
    /// Frames this group owns under the modulo rule.
    pub frames: u64,
    pub completed: u64,
    pub incomplete: u64,
    pub received: u64,
    pub expected_total: u64,
    pub duplicates: u64,
    /// Expected messages that never arrived.
    pub deficit: u64,
    pub lossy: bool,
    pub events: u64,
    pub bytes_received: u64,
    /// First message to file close.
    pub elapsed_ms: u64,
    pub error: Option<String>,
}

pub trait ResultReporter: Send + Sync {
    fn report(&self, result: &ScanResult);
}

impl ResultReporter for Sender<ScanResult> {
    fn report(&self, result: &ScanResult) {
        let _ = self.send(result.clone());
    }
}

/// Discards results.
pub struct NoReporter;

impl ResultReporter for NoReporter {
    fn report(&self, _: &ScanResult) {}
}

/// Posts results to the orchestrator's `/scans/{n}/results`.
pub struct HttpReporter {
    base: String,
    agent: ureq::Agent,
}

impl HttpReporter {
    pub fn new(base_url: &str) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(5)))
            .build()
            .into();
        Self {
            base: base_url.trim_end_matches('/').to_string(),
            agent,
        }
    }
}

impl ResultReporter for HttpReporter {
    fn report(&self, result: &ScanResult) {
        let url = format!("{}/scans/{}/results", self.base, result.scan_number);
        if let Err(e) = self.agent.post(&url).send_json(result) {
            log::warn!("could not report scan {} to {url}: {e}", result.scan_number);
        }
    }
}

impl<T: ResultReporter + ?Sized> ResultReporter for Arc<T> {
    fn report(&self, result: &ScanResult) {
        (**self).report(result)
    }
}

/// Moves a registered node to `target` through legal intermediate states.
fn step_status(client: &StateClient, target: NodeStatus, scan_number: u32, expected: u64) {
    use NodeStatus::*;
    let Some(current) = client.own_state().map(|s| s.status) else {
        return;
    };
    let path: &[NodeStatus] = match (current, target) {
        (Draining, Streaming) => &[Idle, Streaming],
        (Idle, Draining) => &[Streaming, Draining],
        (Streaming, Idle) => &[Draining, Idle],
        _ => std::slice::from_ref(&target),
    };
    for &s in path {
        if let Err(e) = client.update(|st| {
            st.status = s;
            st.scan_number = scan_number;
            st.expected_messages = expected;
        }) {
            log::warn!("status update to {s:?} failed: {e}");
            return;
        }
    }
}

/// Completed frames handed to a counting worker per queue slot.
const JOB_BATCH: usize = 16;
/// How long a partial job batch may wait for more frames.
const JOB_LULL: Duration = Duration::from_millis(1);

struct Job {
    scan_number: u32,
    geometry: DetectorGeometry,
    frame: Frame,
    thresholds: Arc<Thresholds>,
    dark: Option<Arc<DarkReference>>,
    params: CountingParams,
}

enum WriterMsg {
    Frames(Vec<(u32, SparseFrame)>),
    Finish(Box<Finish>),
}

struct Finish {
    result: ScanResult,
    meta: Option<SparseScan>,
    owned: Vec<u32>,
    dispatched: u64,
    first_message: Instant,
}

struct ScanRun {
    scan_number: u32,
    entry: Option<ScanEntry>,
    thresholds: Option<Arc<Thresholds>>,
    assembly: Option<AssemblyState>,
    infos: BTreeMap<u64, InfoMap>,
    duplicate_infos: u64,
    group: Option<(u32, u32)>,
    first_message: Instant,
    last_message: Instant,
    dispatched: u64,
    bytes: u64,
    error: Option<String>,
}

impl ScanRun {
    fn expected_total(&self, uid: &str) -> u64 {
        self.infos.values().map(|m| m.get(uid).unwrap_or(0)).sum()
    }

    fn received(&self) -> u64 {
        self.assembly.as_ref().map_or(0, |a| a.received)
    }
}

/// Running NodeGroup. Dropping the handle drains it and waits.
pub struct NodeGroup {
    uid: String,
    drain: Arc<AtomicBool>,
    results: Receiver<ScanResult>,
    handle: Option<JoinHandle<Vec<ScanResult>>>,
}

impl NodeGroup {
    /// Registers in the store (if any) as idle with `endpoint`, then starts
    /// consuming `source`.
    pub fn spawn(
        config: NodeGroupConfig,
        source: Box<dyn MessageSource>,
        catalog: Arc<dyn ScanCatalog>,
        state: Option<Arc<StateClient>>,
        reporter: Arc<dyn ResultReporter>,
        endpoint: &str,
    ) -> Result<Self, crate::statestore::StateClientError> {
        std::fs::create_dir_all(&config.out_dir).map_err(TransportError::from)?;
        if let Some(client) = &state {
            let mut s = ClientState::new(config.uid.clone(), NodeKind::NodeGroup);
            s.endpoint = endpoint.to_string();
            client.register(s)?;
        }
        let drain = Arc::new(AtomicBool::new(false));
        let (results_tx, results) = unbounded();
        let uid = config.uid.clone();
        let handle = {
            let drain = drain.clone();
            thread::Builder::new()
                .name(format!("nodegroup-{uid}"))
                .spawn(move || run(config, source, catalog, state, reporter, results_tx, drain))
                .map_err(TransportError::from)?
        };
        Ok(Self {
            uid,
            drain,
            results,
            handle: Some(handle),
        })
    }

    pub fn uid(&self) -> &str {
        &self.uid
    }

    /// Results as each scan's file is closed.
    pub fn results(&self) -> &Receiver<ScanResult> {
        &self.results
    }

    /// Finishes open scans, deregisters and exits.
    pub fn drain(&self) {
        self.drain.store(true, Ordering::Release);
    }

    pub fn is_finished(&self) -> bool {
        self.handle.as_ref().is_none_or(|h| h.is_finished())
    }

    /// Drains and waits; returns every result produced.
    pub fn join(mut self) -> Vec<ScanResult> {
        self.drain();
        self.handle.take().and_then(|h| h.join().ok()).unwrap_or_default()
    }
}

impl Drop for NodeGroup {
    fn drop(&mut self) {
        if let Some(h) = self.handle.take() {
            self.drain.store(true, Ordering::Release);
            let _ = h.join();
        }
    }
}

fn run(
    config: NodeGroupConfig,
    mut source: Box<dyn MessageSource>,
    catalog: Arc<dyn ScanCatalog>,
    state: Option<Arc<StateClient>>,
    reporter: Arc<dyn ResultReporter>,
    results_tx: Sender<ScanResult>,
    drain: Arc<AtomicBool>,
) -> Vec<ScanResult> {
    let workers = config.workers.max(1);
    let (job_tx, job_rx) = bounded::<Vec<Job>>(workers * 2);
    let (writer_tx, writer_rx) = unbounded::<WriterMsg>();
    let pending_writes = Arc::new(AtomicUsize::new(0));
    let open_scans = Arc::new(AtomicUsize::new(0));

    let worker_handles: Vec<_> = (0..workers)
        .map(|i| {
            let (rx, tx) = (job_rx.clone(), writer_tx.clone());
            thread::Builder::new()
                .name(format!("count-{}-{i}", config.uid))
                .spawn(move || {
                    for batch in rx {
                        let counted = batch
                            .into_iter()
                            .map(|job| {
                                let events = count_frame(
                                    &job.frame.pixels,
                                    &job.geometry,
                                    &job.thresholds,
                                    job.dark.as_deref(),
                                    job.params.connectivity,
                                );
                                let frame = SparseFrame {
                                    frame_number: job.frame.frame_number,
                                    sector_mask: job.frame.sector_mask,
                                    events,
                                };
                                (job.scan_number, frame)
                            })
                            .collect();
                        let _ = tx.send(WriterMsg::Frames(counted));
                    }
                })
                .expect("spawn counting worker")
        })
        .collect();
    drop(job_rx);

    let writer = {
        let (state, reporter, pending, open) = (state.clone(), reporter.clone(), pending_writes.clone(), open_scans.clone());
        let out_dir = config.out_dir.clone();
        let uid = config.uid.clone();
        thread::Builder::new()
            .name(format!("writer-{uid}"))
            .spawn(move || writer_loop(writer_rx, &out_dir, &uid, state, reporter, results_tx, pending, open))
            .expect("spawn writer")
    };

    let dark = config.dark.clone().map(Arc::new);
    let mut peers: HashMap<PeerId, u16> = HashMap::new();
    let mut runs: BTreeMap<u32, ScanRun> = BTreeMap::new();
    let mut finished: BTreeSet<u32> = BTreeSet::new();
    let mut channel_failed = false;
    let mut batch: Vec<Job> = Vec::with_capacity(JOB_BATCH);

    loop {
        let wait = if batch.is_empty() { Duration::from_millis(20) } else { JOB_LULL };
        match source.recv_timeout(wait) {
            Ok(Some(env)) if is_late(&env, &finished) => {
                log::warn!("nodegroup {}: message for finished scan discarded", config.uid);
            }
            Ok(Some(env)) => handle_message(
                env,
                &config,
                &*catalog,
                &state,
                &dark,
                &mut peers,
                &mut runs,
                &mut batch,
                &open_scans,
            ),
            Ok(None) => flush_jobs(&job_tx, &mut batch),
            Err(e) => {
                log::error!("nodegroup {}: receive channel failed: {e}", config.uid);
                channel_failed = true;
                break;
            }
        }
        let ready: Vec<u32> = runs
            .values()
            .filter(|r| {
                let lossless = r.infos.len() >= N_SECTORS && r.received() >= r.expected_total(&config.uid);
                lossless || r.last_message.elapsed() >= config.finalize_timeout
            })
            .map(|r| r.scan_number)
            .collect();
        if batch.len() >= JOB_BATCH {
            flush_jobs(&job_tx, &mut batch);
        }
        for scan in ready {
            flush_jobs(&job_tx, &mut batch);
            let run = runs.remove(&scan).expect("ready run");
            finished.insert(scan);
            while finished.len() > RETAINED_FINISHED {
                finished.pop_first();
            }
            finalize_run(run, &config, &state, &job_tx, &writer_tx, &pending_writes);
        }
        if drain.load(Ordering::Acquire) && runs.is_empty() && pending_writes.load(Ordering::Acquire) == 0 {
            break;
        }
    }

    flush_jobs(&job_tx, &mut batch);
    drop(job_tx);
    for h in worker_handles {
        let _ = h.join();
    }
    drop(writer_tx);
    let results = writer.join().unwrap_or_default();
    if channel_failed {
        for run in runs.values() {
            let _ = std::fs::remove_file(output_path(&config.out_dir, run.scan_number, &config.uid).with_extension("partial"));
        }
        if let Some(client) = &state {
            let _ = client.set_status(NodeStatus::Offline);
        }
    } else if let Some(client) = &state {
        let _ = client.deregister();
    }
    results
}

fn flush_jobs(jobs: &Sender<Vec<Job>>, batch: &mut Vec<Job>) {
    if !batch.is_empty() {
        let _ = jobs.send(std::mem::replace(batch, Vec::with_capacity(JOB_BATCH)));
    }
}

fn is_late(env: &Envelope, finished: &BTreeSet<u32>) -> bool {
    let scan = match env.frames.first().and_then(|f| peek_magic(f)) {
        Some(SECTOR_MAGIC) => decode_sector_header(&env.frames[0]).ok().map(|(h, _)| h.scan_number),
        Some(INFO_MAGIC) => decode_info_map(&env.frames[0]).ok().map(|m| m.scan_number),
        _ => None,
    };
    scan.is_some_and(|s| finished.contains(&s))
}

pub fn output_path(out_dir: &Path, scan_number: u32, uid: &str) -> PathBuf {
    out_dir.join(format!("scan{scan_number}_{uid}.s4dc"))
}

#[allow(clippy::too_many_arguments)]
fn handle_message(
    env: Envelope,
    config: &NodeGroupConfig,
    catalog: &dyn ScanCatalog,
    state: &Option<Arc<StateClient>>,
    dark: &Option<Arc<DarkReference>>,
    peers: &mut HashMap<PeerId, u16>,
    runs: &mut BTreeMap<u32, ScanRun>,
    jobs: &mut Vec<Job>,
    open_scans: &AtomicUsize,
) {
    let msg = match decode_pipeline_message(&env.frames) {
        Ok(m) => m,
        Err(e) => {
            log::warn!("nodegroup {}: undecodable message: {e}", config.uid);
            return;
        }
    };
    let scan_number = match &msg {
        PipelineMessage::Hello { sector_index } => {
            peers.insert(env.peer, *sector_index);
            return;
        }
        PipelineMessage::Info(map) => map.scan_number,
        PipelineMessage::Sector(h, _) => h.scan_number,
    };
    let run = runs.entry(scan_number).or_insert_with(|| {
        open_scans.fetch_add(1, Ordering::AcqRel);
        open_run(scan_number, config, catalog)
    });
    run.last_message = Instant::now();
    match msg {
        PipelineMessage::Info(map) => {
            // keyed by sector when the sender said hello, else by connection
            let key = peers.get(&env.peer).map_or(1 << 32 | env.peer, |&s| s as u64);
            if run.infos.contains_key(&key) {
                run.duplicate_infos += 1;
                log::warn!("nodegroup {}: duplicate info for scan {scan_number} ignored", config.uid);
                return;
            }
            if run.group.is_none() {
                match map.uids().position(|u| u == config.uid) {
                    Some(g) => run.group = Some((g as u32, map.entries.len() as u32)),
                    None => run.error = Some(format!("{} is not a member of scan {scan_number}", config.uid)),
                }
            }
            run.infos.insert(key, map);
            if let Some(client) = state {
                step_status(client, NodeStatus::Streaming, scan_number, run.expected_total(&config.uid));
            }
        }
        PipelineMessage::Sector(header, payload) => {
            run.bytes += (payload.len() + crate::protocol::SECTOR_HEADER_LEN) as u64;
            let (Some(assembly), Some(thresholds)) = (run.assembly.as_mut(), run.thresholds.as_ref()) else {
                // no catalog entry: count and discard
                return;
            };
            if let Assembled::Complete(frame) = assembly.assemble(&header, payload) {
                run.dispatched += 1;
                jobs.push(Job {
                    scan_number,
                    geometry: assembly.geometry(),
                    frame,
                    thresholds: thresholds.clone(),
                    dark: dark.clone(),
                    params: config.params,
                });
            }
        }
        PipelineMessage::Hello { .. } => unreachable!(),
    }
}

fn open_run(scan_number: u32, config: &NodeGroupConfig, catalog: &dyn ScanCatalog) -> ScanRun {
    let now = Instant::now();
    let deadline = now + config.catalog_wait;
    let entry = loop {
        if let Some(e) = catalog.lookup(scan_number) {
            break Some(e);
        }
        if Instant::now() >= deadline {
            break None;
        }
        thread::sleep(Duration::from_millis(50));
    };
    let mut run = ScanRun {
        scan_number,
        entry: None,
        thresholds: None,
        assembly: None,
        infos: BTreeMap::new(),
        duplicate_infos: 0,
        group: None,
        first_message: now,
        last_message: now,
        dispatched: 0,
        bytes: 0,
        error: None,
    };
    match entry {
        Some(entry) => {
            let fit = entry.fit.unwrap_or_else(|| {
                log::info!("scan {scan_number} has no shared calibration; fitting from its generator");
                calibrate(&SyntheticScan::new(entry.spec.clone()), &config.params, config.dark.as_ref())
            });
            run.thresholds = Some(Arc::new(Thresholds::from_fit(
                fit,
                config.params.n_sigma,
                config.params.m_sigma,
            )));
            run.assembly = Some(AssemblyState::new(entry.spec.geometry()));
            run.entry = Some(entry);
        }
        None => {
            log::error!("nodegroup {}: scan {scan_number} not in catalog", config.uid);
            run.error = Some(format!("scan {scan_number} not in catalog"));
        }
    }
    run
}

fn finalize_run(
    mut run: ScanRun,
    config: &NodeGroupConfig,
    state: &Option<Arc<StateClient>>,
    jobs: &Sender<Vec<Job>>,
    writer: &Sender<WriterMsg>,
    pending_writes: &AtomicUsize,
) {
    let expected_total = run.expected_total(&config.uid);
    if let Some(client) = state {
        step_status(client, NodeStatus::Draining, run.scan_number, expected_total);
    }
    let owned: Vec<u32> = match (&run.entry, run.group) {
        (Some(entry), Some((g, n))) => (0..entry.spec.n_frames()).filter(|f| f % n == g).collect(),
        _ => Vec::new(),
    };
    let received = run.received();
    let mut result = ScanResult {
        uid: config.uid.clone(),
        scan_number: run.scan_number,
        group_index: run.group.map(|(g, _)| g),
        n_groups: run.group.map_or(0, |(_, n)| n),
        path: None,
        frames: owned.len() as u64,
        completed: 0,
        incomplete: 0,
        received,
        expected_total,
        duplicates: 0,
        deficit: expected_total.saturating_sub(received),
        lossy: run.infos.len() < N_SECTORS || received < expected_total,
        events: 0,
        bytes_received: run.bytes,
        elapsed_ms: 0,
        error: run.error.clone(),
    };
    let mut meta = None;
    if let (Some(assembly), Some(thresholds), Some(entry)) = (run.assembly.as_mut(), &run.thresholds, &run.entry) {
        let leftovers = assembly.finalize(owned.iter().copied());
        run.dispatched += leftovers.len() as u64;
        let dark = config.dark.clone().map(Arc::new);
        let mut leftovers = leftovers.into_iter().peekable();
        while leftovers.peek().is_some() {
            let chunk = leftovers
                .by_ref()
                .take(JOB_BATCH)
                .map(|frame| Job {
                    scan_number: run.scan_number,
                    geometry: assembly.geometry(),
                    frame,
                    thresholds: thresholds.clone(),
                    dark: dark.clone(),
                    params: config.params,
                })
                .collect();
            let _ = jobs.send(chunk);
        }
        debug_assert!(assembly.is_conserved());
        result.completed = assembly.completed;
        result.incomplete = assembly.incomplete;
        result.duplicates = assembly.duplicates;
        let g = entry.spec.geometry();
        meta = Some(SparseScan {
            scan_number: run.scan_number,
            scan_rows: entry.spec.scan_rows,
            scan_cols: entry.spec.scan_cols,
            frame_rows: g.frame_rows,
            frame_cols: g.frame_cols,
            background_threshold: thresholds.background,
            xray_threshold: thresholds.xray,
            frames: Vec::new(),
        });
    }
    if result.lossy {
        log::warn!(
            "nodegroup {}: scan {} lossy, deficit {} ({} of {} infos)",
            config.uid,
            run.scan_number,
            result.deficit,
            run.infos.len(),
            N_SECTORS
        );
    }
    let owned = if run.group.is_some() { owned } else { Vec::new() };
    pending_writes.fetch_add(1, Ordering::AcqRel);
    let _ = writer.send(WriterMsg::Finish(Box::new(Finish {
        result,
        meta,
        owned,
        dispatched: run.dispatched,
        first_message: run.first_message,
    })));
}

#[derive(Default)]
struct PendingScan {
    frames: Vec<SparseFrame>,
    finish: Option<Box<Finish>>,
}

#[allow(clippy::too_many_arguments)]
fn writer_loop(
    rx: Receiver<WriterMsg>,
    out_dir: &Path,
    uid: &str,
    state: Option<Arc<StateClient>>,
    reporter: Arc<dyn ResultReporter>,
    results_tx: Sender<ScanResult>,
    pending_writes: Arc<AtomicUsize>,
    open_scans: Arc<AtomicUsize>,
) -> Vec<ScanResult> {
    let mut pending: HashMap<u32, PendingScan> = HashMap::new();
    let mut done = Vec::new();
    for msg in rx {
        let mut touched = Vec::new();
        match msg {
            WriterMsg::Frames(frames) => {
                for (scan, frame) in frames {
                    pending.entry(scan).or_default().frames.push(frame);
                    if !touched.contains(&scan) {
                        touched.push(scan);
                    }
                }
            }
            WriterMsg::Finish(f) => {
                let scan = f.result.scan_number;
                pending.entry(scan).or_default().finish = Some(f);
                touched.push(scan);
            }
        }
        for scan in touched {
            finish_if_ready(
                scan,
                &mut pending,
                out_dir,
                uid,
                &state,
                &*reporter,
                &results_tx,
                &pending_writes,
                &open_scans,
                &mut done,
            );
        }
    }
    done
}

#[allow(clippy::too_many_arguments)]
fn finish_if_ready(
    scan: u32,
    pending: &mut HashMap<u32, PendingScan>,
    out_dir: &Path,
    uid: &str,
    state: &Option<Arc<StateClient>>,
    reporter: &dyn ResultReporter,
    results_tx: &Sender<ScanResult>,
    pending_writes: &AtomicUsize,
    open_scans: &AtomicUsize,
    done: &mut Vec<ScanResult>,
) {
    let ready = pending
        .get(&scan)
        .and_then(|p| p.finish.as_ref().map(|f| f.dispatched == p.frames.len() as u64))
        .unwrap_or(false);
    if !ready {
        return;
    }
    let PendingScan { frames, finish } = pending.remove(&scan).expect("ready scan");
    let Finish {
        mut result,
        meta,
        owned,
        first_message,
        ..
    } = *finish.expect("finish present");
    if let Some(mut meta) = meta {
        meta.frames = frames;
        meta.frames.sort_by_key(|f| f.frame_number);
        let expected: Vec<u32> = if owned.is_empty() && result.group_index.is_none() {
            meta.frames.iter().map(|f| f.frame_number).collect()
        } else {
            owned
        };
        let path = output_path(out_dir, scan, uid);
        match write_sparse(&path, meta, expected) {
            Ok(written) => {
                result.events = written.total_events() as u64;
                result.path = Some(path);
            }
            Err(e) => {
                log::error!("nodegroup {uid}: writing scan {scan} failed: {e}");
                result.error = Some(e.to_string());
            }
        }
    }
    result.elapsed_ms = first_message.elapsed().as_millis() as u64;
    let still_open = open_scans.fetch_sub(1, Ordering::AcqRel) - 1;
    if let Some(client) = state {
        if still_open == 0 {
            step_status(client, NodeStatus::Idle, scan, 0);
        }
    }
    log::info!(
        "nodegroup {uid}: scan {scan} done: {} complete, {} incomplete, {} events in {} ms",
        result.completed,
        result.incomplete,
        result.events,
        result.elapsed_ms
    );
    reporter.report(&result);
    let _ = results_tx.send(result.clone());
    done.push(result);
    pending_writes.fetch_sub(1, Ordering::AcqRel);
}
