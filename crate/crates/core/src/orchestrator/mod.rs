//! Session manager: an HTTP service that starts and stops NodeGroup
//! sessions, pins scan membership, collects per-NodeGroup results and
//! pushes live session, scan, store and throughput events.
//!
//! All session and scan mutations go through one owner thread holding a
//! [`Registry`]; every mutation is appended to a line-per-record log.

mod client;
mod launcher;
mod persist;
mod service;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::consumer::ScanResult;
use crate::counting::{CountingParams, NoiseFit};
use crate::producer::{ScanMode, ScanSpec};
use crate::statestore::StateSnapshot;

pub use client::{OrchestratorClient, ScanDriver};
pub use launcher::{LaunchSpec, LaunchedNode, Launcher, ProcessLauncher, ThreadLauncher};
pub use persist::{LogRecord, RecordLog};
pub use service::{Orchestrator, OrchestratorConfig, ResultReply};

pub const REGISTRATION_DEADLINE_MS: u64 = 10_000;
pub const DEFAULT_SCAN_LIMIT: usize = 50;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OrchestratorError {
    #[error("invalid request: {0}")]
    Invalid(String),
    #[error("conflict: {0}")]
    Conflict(String),
    #[error("{0} not found")]
    NotFound(String),
    #[error("illegal session transition {from:?} -> {to:?}")]
    Transition { from: SessionStatus, to: SessionStatus },
    #[error("i/o: {0}")]
    Io(String),
    #[error("http: {0}")]
    Http(String),
    #[error("orchestrator stopped")]
    Stopped,
}

impl From<std::io::Error> for OrchestratorError {
    fn from(e: std::io::Error) -> Self {
        Self::Io(e.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SessionStatus {
    Pending,
    Active,
    Stopping,
    Ended,
    Failed,
}

impl SessionStatus {
    /// pending→active→stopping→ended, and failed from pending or active.
    pub fn can_transition_to(self, next: SessionStatus) -> bool {
        use SessionStatus::*;
        matches!(
            (self, next),
            (Pending, Active) | (Active, Stopping) | (Stopping, Ended) | (Pending, Failed) | (Active, Failed)
        )
    }

    /// Holds the single-session slot.
    pub fn is_live(self) -> bool {
        matches!(self, Self::Pending | Self::Active | Self::Stopping)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionRequest {
    pub n_nodegroups: usize,
    #[serde(default)]
    pub params: CountingParams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Session {
    pub session_id: String,
    pub n_nodegroups: usize,
    pub params: CountingParams,
    pub status: SessionStatus,
    pub created_at_ms: u64,
    pub updated_at_ms: u64,
    pub nodegroups: Vec<String>,
    #[serde(default)]
    pub error: Option<String>,
    /// Every status this session has held, oldest first.
    pub transitions: Vec<SessionStatus>,
}

/// Body of `POST /scans`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanAnnouncement {
    pub spec: ScanSpec,
    #[serde(default)]
    pub fit: Option<NoiseFit>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanRecord {
    pub scan_number: u32,
    /// None for fallback scans and for scans streamed outside a session.
    pub session_id: Option<String>,
    pub scan_rows: u32,
    pub scan_cols: u32,
    pub mode: ScanMode,
    /// Membership pinned when the scan was announced; routing order.
    pub nodegroups: Vec<String>,
    pub started_ms: u64,
    pub finished_ms: Option<u64>,
    pub outputs: BTreeMap<String, PathBuf>,
    pub raw_paths: Vec<PathBuf>,
    pub results: BTreeMap<String, ScanResult>,
    pub completed: u64,
    pub incomplete: u64,
    pub deficit: u64,
    pub events: u64,
    pub lossy: bool,
    /// Created by a result for a scan that was never announced.
    pub retroactive: bool,
    pub spec: Option<ScanSpec>,
    pub fit: Option<NoiseFit>,
}

impl ScanRecord {
    fn new(scan_number: u32, now: u64) -> Self {
        Self {
            scan_number,
            session_id: None,
            scan_rows: 0,
            scan_cols: 0,
            mode: ScanMode::Streamed,
            nodegroups: Vec::new(),
            started_ms: now,
            finished_ms: None,
            outputs: BTreeMap::new(),
            raw_paths: Vec::new(),
            results: BTreeMap::new(),
            completed: 0,
            incomplete: 0,
            deficit: 0,
            events: 0,
            lossy: false,
            retroactive: false,
            spec: None,
            fit: None,
        }
    }

    pub fn is_finished(&self) -> bool {
        self.finished_ms.is_some()
    }

    pub fn elapsed_ms(&self) -> Option<u64> {
        self.finished_ms.map(|f| f.saturating_sub(self.started_ms))
    }

    /// Reports needed before the scan counts as finished.
    fn expected_reports(&self) -> usize {
        if self.nodegroups.is_empty() {
            self.results.values().map(|r| r.n_groups as usize).max().unwrap_or(1)
        } else {
            self.nodegroups.len()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ResultOutcome {
    Recorded,
    Duplicate,
    Retroactive,
}

/// Aggregator throughput sample pushed to event subscribers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsEvent {
    pub scan_number: u32,
    pub bytes_received: u64,
    pub elapsed_ms: u64,
    pub throughput_bytes_per_s: f64,
}

/// One message on `GET /events`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum Event {
    Session(Session),
    Scan(ScanRecord),
    State(StateSnapshot),
    Metrics(MetricsEvent),
}

impl Event {
    pub fn kind(&self) -> &'static str {
        match self {
            Self::Session(_) => "session",
            Self::Scan(_) => "scan",
            Self::State(_) => "state",
            Self::Metrics(_) => "metrics",
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RestoreReport {
    pub sessions: usize,
    pub scans: usize,
    pub skipped_lines: usize,
    /// Sessions that were live when the log ended; now failed.
    pub failed_sessions: Vec<String>,
}

/// Sessions and scan records. Pure bookkeeping: no threads, no I/O beyond
/// the optional record log.
#[derive(Debug, Default)]
pub struct Registry {
    sessions: BTreeMap<String, Session>,
    scans: BTreeMap<u32, ScanRecord>,
    next_session: u64,
    log: Option<RecordLog>,
}

impl Registry {
    pub fn new() -> Self {
        Self::default()
    }

    /// Replays `path` (if it exists) and keeps appending to it.
    pub fn restore(path: &Path, now: u64) -> Result<(Self, RestoreReport), OrchestratorError> {
        let (records, skipped) = RecordLog::read(path)?;
        let mut reg = Self::default();
        for rec in records {
            match rec {
                LogRecord::Session(s) => {
                    reg.next_session = reg.next_session.max(session_ordinal(&s.session_id) + 1);
                    reg.sessions.insert(s.session_id.clone(), s);
                }
                LogRecord::Scan(r) => {
                    reg.scans.insert(r.scan_number, r);
                }
            }
        }
        reg.log = Some(RecordLog::open(path)?);
        let mut report = RestoreReport {
            sessions: reg.sessions.len(),
            scans: reg.scans.len(),
            skipped_lines: skipped,
            failed_sessions: Vec::new(),
        };
        let live: Vec<String> = reg
            .sessions
            .values()
            .filter(|s| s.status.is_live())
            .map(|s| s.session_id.clone())
            .collect();
        for id in live {
            // processes from a previous run are not ours any more
            let s = reg.sessions.get_mut(&id).expect("listed");
            s.status = SessionStatus::Failed;
            s.transitions.push(SessionStatus::Failed);
            s.error = Some("orchestrator restarted while session was live".into());
            s.updated_at_ms = now;
            let s = s.clone();
            reg.persist(LogRecord::Session(s));
            report.failed_sessions.push(id);
        }
        if skipped > 0 {
            log::warn!("{}: skipped {skipped} unreadable record line(s)", path.display());
        }
        Ok((reg, report))
    }

    pub fn with_log(mut self, log: RecordLog) -> Self {
        self.log = Some(log);
        self
    }

    fn persist(&mut self, rec: LogRecord) {
        if let Some(log) = &mut self.log {
            if let Err(e) = log.append(&rec) {
                log::error!("record log append failed: {e}");
            }
        }
    }

    pub fn sessions(&self) -> Vec<Session> {
        self.sessions.values().cloned().collect()
    }

    pub fn session(&self, id: &str) -> Option<&Session> {
        self.sessions.get(id)
    }

    /// The session holding the single-session slot, if any.
    pub fn live_session(&self) -> Option<&Session> {
        self.sessions.values().find(|s| s.status.is_live())
    }

    pub fn create_session(&mut self, req: &SessionRequest, now: u64) -> Result<Session, OrchestratorError> {
        if req.n_nodegroups == 0 {
            return Err(OrchestratorError::Invalid("n_nodegroups must be at least 1".into()));
        }
        if !(req.params.n_sigma > 0.0 && req.params.m_sigma > req.params.n_sigma && req.params.sample_count > 0) {
            return Err(OrchestratorError::Invalid(
                "params need 0 < n_sigma < m_sigma and sample_count > 0".into(),
            ));
        }
        if let Some(s) = self.live_session() {
            return Err(OrchestratorError::Conflict(format!(
                "session {} is {:?}",
                s.session_id, s.status
            )));
        }
        let id = format!("s{:04}", self.next_session);
        self.next_session += 1;
        let session = Session {
            nodegroups: (0..req.n_nodegroups).map(|i| format!("{id}-ng-{i:02}")).collect(),
            session_id: id.clone(),
            n_nodegroups: req.n_nodegroups,
            params: req.params,
            status: SessionStatus::Pending,
            created_at_ms: now,
            updated_at_ms: now,
            error: None,
            transitions: vec![SessionStatus::Pending],
        };
        self.sessions.insert(id, session.clone());
        self.persist(LogRecord::Session(session.clone()));
        Ok(session)
    }

    pub fn transition(
        &mut self,
        id: &str,
        to: SessionStatus,
        error: Option<String>,
        now: u64,
    ) -> Result<Session, OrchestratorError> {
        let s = self
            .sessions
            .get_mut(id)
            .ok_or_else(|| OrchestratorError::NotFound(format!("session {id}")))?;
        if !s.status.can_transition_to(to) {
            return Err(OrchestratorError::Transition { from: s.status, to });
        }
        s.status = to;
        s.transitions.push(to);
        s.updated_at_ms = now;
        if error.is_some() {
            s.error = error;
        }
        let s = s.clone();
        self.persist(LogRecord::Session(s.clone()));
        Ok(s)
    }

    /// Opens a record for a scan with `nodegroups` pinned. Empty membership
    /// means the producers write raw files. Announcing a scan number again
    /// replaces the old record.
    pub fn announce_scan(
        &mut self,
        spec: &ScanSpec,
        fit: Option<NoiseFit>,
        nodegroups: Vec<String>,
        now: u64,
    ) -> ScanRecord {
        let mut rec = ScanRecord::new(spec.scan_number, now);
        rec.scan_rows = spec.scan_rows;
        rec.scan_cols = spec.scan_cols;
        rec.spec = Some(spec.clone());
        rec.fit = fit;
        if nodegroups.is_empty() {
            rec.mode = ScanMode::DiskFallback;
        } else {
            rec.session_id = self
                .sessions
                .values()
                .find(|s| s.status == SessionStatus::Active)
                .map(|s| s.session_id.clone());
        }
        rec.nodegroups = nodegroups;
        if self.scans.insert(spec.scan_number, rec.clone()).is_some() {
            log::info!("scan {} announced again; previous record replaced", spec.scan_number);
        }
        self.persist(LogRecord::Scan(rec.clone()));
        rec
    }

    pub fn record_result(
        &mut self,
        result: ScanResult,
        now: u64,
    ) -> Result<(ScanRecord, ResultOutcome), OrchestratorError> {
        let mut outcome = ResultOutcome::Recorded;
        let live = self
            .sessions
            .values()
            .find(|s| s.status.is_live())
            .map(|s| s.session_id.clone());
        let rec = self.scans.entry(result.scan_number).or_insert_with(|| {
            log::warn!("result for unannounced scan {}; record created", result.scan_number);
            outcome = ResultOutcome::Retroactive;
            let mut r = ScanRecord::new(result.scan_number, now);
            r.retroactive = true;
            r.session_id = live;
            r
        });
        if rec.mode == ScanMode::DiskFallback {
            return Err(OrchestratorError::Conflict(format!(
                "scan {} fell back to disk; no NodeGroup results expected",
                result.scan_number
            )));
        }
        if rec.results.contains_key(&result.uid) {
            log::info!("duplicate result for scan {} from {} ignored", result.scan_number, result.uid);
            return Ok((rec.clone(), ResultOutcome::Duplicate));
        }
        if !rec.nodegroups.is_empty() && !rec.nodegroups.contains(&result.uid) {
            log::warn!("scan {}: result from {} outside pinned membership", result.scan_number, result.uid);
        }
        if let Some(p) = &result.path {
            rec.outputs.insert(result.uid.clone(), p.clone());
        }
        rec.lossy |= result.lossy || result.deficit > 0 || result.error.is_some();
        rec.results.insert(result.uid.clone(), result);
        rec.completed = rec.results.values().map(|r| r.completed).sum();
        rec.incomplete = rec.results.values().map(|r| r.incomplete).sum();
        rec.deficit = rec.results.values().map(|r| r.deficit).sum();
        rec.events = rec.results.values().map(|r| r.events).sum();
        if rec.finished_ms.is_none() && rec.results.len() >= rec.expected_reports() {
            rec.finished_ms = Some(now);
        }
        let rec = rec.clone();
        self.persist(LogRecord::Scan(rec.clone()));
        Ok((rec, outcome))
    }

    /// Marks a fallback scan finished with the raw files the producers wrote.
    pub fn record_raw(&mut self, scan_number: u32, paths: Vec<PathBuf>, now: u64) -> Result<ScanRecord, OrchestratorError> {
        let rec = self
            .scans
            .get_mut(&scan_number)
            .ok_or_else(|| OrchestratorError::NotFound(format!("scan {scan_number}")))?;
        if rec.mode != ScanMode::DiskFallback {
            return Err(OrchestratorError::Conflict(format!("scan {scan_number} was streamed")));
        }
        rec.raw_paths = paths;
        rec.finished_ms = Some(now);
        let rec = rec.clone();
        self.persist(LogRecord::Scan(rec.clone()));
        Ok(rec)
    }

    /// Newest first.
    pub fn scans(&self, limit: usize) -> Vec<ScanRecord> {
        self.scans.values().rev().take(limit).cloned().collect()
    }

    pub fn scan(&self, scan_number: u32) -> Option<&ScanRecord> {
        self.scans.get(&scan_number)
    }
}

fn session_ordinal(id: &str) -> u64 {
    id.strip_prefix('s').and_then(|n| n.parse().ok()).unwrap_or(0)
}
