use std::path::PathBuf;
use std::thread;
use std::time::{Duration, Instant};

use serde::de::DeserializeOwned;
use serde::Serialize;
use ureq::http::Response;
use ureq::Body;

use super::{OrchestratorError, ResultReply, ScanAnnouncement, ScanRecord, Session, SessionRequest};
use crate::consumer::ScanResult;
use crate::counting::NoiseFit;
use crate::producer::{run_sector, ProducerError, ScanMode, ScanSpec, SectorConfig, SectorReport, DEFAULT_PRODUCER_THREADS};
use crate::protocol::N_SECTORS;
use crate::statestore::StateSnapshot;

/// Where and how the four sector producers of a driven scan run.
#[derive(Debug, Clone)]
pub struct ScanDriver {
    /// One aggregator listener per sector.
    pub aggregator: Vec<String>,
    pub producer_threads: usize,
    pub fallback_dir: PathBuf,
    pub connect_timeout: Duration,
    pub sync_fallback: bool,
}

impl ScanDriver {
    pub fn new(aggregator: Vec<String>, fallback_dir: impl Into<PathBuf>) -> Self {
        Self {
            aggregator,
            producer_threads: DEFAULT_PRODUCER_THREADS,
            fallback_dir: fallback_dir.into(),
            connect_timeout: Duration::from_secs(10),
            sync_fallback: false,
        }
    }
}

/// Blocking client for the orchestrator's HTTP API.
#[derive(Debug, Clone)]
pub struct OrchestratorClient {
    base: String,
    agent: ureq::Agent,
}

impl OrchestratorClient {
    pub fn new(base_url: &str) -> Self {
        // session creation waits for registration
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(60)))
            .http_status_as_error(false)
            .build()
            .into();
        Self {
            base: base_url.trim_end_matches('/').to_string(),
            agent,
        }
    }

    pub fn base_url(&self) -> &str {
        &self.base
    }

    fn url(&self, path: &str) -> String {
        format!("{}{path}", self.base)
    }

    fn get<T: DeserializeOwned>(&self, path: &str) -> Result<T, OrchestratorError> {
        decode(self.agent.get(&self.url(path)).call())
    }

    fn post<B: Serialize, T: DeserializeOwned>(&self, path: &str, body: &B) -> Result<T, OrchestratorError> {
        decode(self.agent.post(&self.url(path)).send_json(body))
    }

    /// Returns the session whether it became active or failed.
    pub fn create_session(&self, req: &SessionRequest) -> Result<Session, OrchestratorError> {
        let mut resp = self
            .agent
            .post(&self.url("/sessions"))
            .send_json(req)
            .map_err(|e| OrchestratorError::Http(e.to_string()))?;
        if resp.status().as_u16() == 503 {
            if let Ok(s) = resp.body_mut().read_json::<Session>() {
                return Ok(s);
            }
            return Err(OrchestratorError::Stopped);
        }
        decode(Ok(resp))
    }

    pub fn stop_session(&self, id: &str) -> Result<Session, OrchestratorError> {
        decode(self.agent.delete(&self.url(&format!("/sessions/{id}"))).call())
    }

    pub fn session(&self, id: &str) -> Result<Session, OrchestratorError> {
        self.get(&format!("/sessions/{id}"))
    }

    pub fn sessions(&self) -> Result<Vec<Session>, OrchestratorError> {
        self.get("/sessions")
    }

    /// Opens the scan record; the reply pins the NodeGroup membership.
    pub fn announce(&self, announcement: &ScanAnnouncement) -> Result<ScanRecord, OrchestratorError> {
        self.post("/scans", announcement)
    }

    pub fn report_raw(&self, scan_number: u32, raw_paths: &[PathBuf]) -> Result<ScanRecord, OrchestratorError> {
        self.post(
            &format!("/scans/{scan_number}/raw"),
            &serde_json::json!({ "raw_paths": raw_paths }),
        )
    }

    pub fn report_result(&self, result: &ScanResult) -> Result<ResultReply, OrchestratorError> {
        self.post(&format!("/scans/{}/results", result.scan_number), result)
    }

    pub fn scans(&self, limit: usize) -> Result<Vec<ScanRecord>, OrchestratorError> {
        self.get(&format!("/scans?limit={limit}"))
    }

    pub fn scan(&self, scan_number: u32) -> Result<ScanRecord, OrchestratorError> {
        self.get(&format!("/scans/{scan_number}"))
    }

    pub fn state(&self) -> Result<StateSnapshot, OrchestratorError> {
        self.get("/state")
    }

    /// Announces `spec`, runs all four sectors against the membership the
    /// orchestrator pinned and, on disk fallback, reports the raw files.
    pub fn drive_scan(
        &self,
        spec: &ScanSpec,
        fit: Option<NoiseFit>,
        driver: &ScanDriver,
    ) -> Result<(ScanRecord, Vec<SectorReport>), OrchestratorError> {
        if driver.aggregator.len() != N_SECTORS {
            return Err(OrchestratorError::Invalid(format!("need {N_SECTORS} aggregator addresses")));
        }
        let record = self.announce(&ScanAnnouncement {
            spec: spec.clone(),
            fit,
        })?;
        let uids = &record.nodegroups;
        let sectors = thread::scope(|s| {
            let handles: Vec<_> = (0..N_SECTORS)
                .map(|k| {
                    let cfg = SectorConfig {
                        spec: spec.clone(),
                        sector_index: k as u16,
                        threads: driver.producer_threads,
                        aggregator: driver.aggregator[k].clone(),
                        fallback_dir: driver.fallback_dir.clone(),
                        connect_timeout: driver.connect_timeout,
                        sync_fallback: driver.sync_fallback,
                    };
                    s.spawn(move || run_sector(&cfg, uids))
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().unwrap_or(Err(ProducerError::Panicked)))
                .collect::<Result<Vec<_>, _>>()
        })
        .map_err(|e| OrchestratorError::Io(e.to_string()))?;
        let record = if record.mode == ScanMode::DiskFallback {
            let paths: Vec<PathBuf> = sectors.iter().flat_map(|s| s.raw_paths.iter().cloned()).collect();
            self.report_raw(spec.scan_number, &paths)?
        } else {
            record
        };
        Ok((record, sectors))
    }

    /// Polls until the scan's record is finished.
    pub fn wait_for_scan(&self, scan_number: u32, timeout: Duration) -> Result<ScanRecord, OrchestratorError> {
        let deadline = Instant::now() + timeout;
        loop {
            match self.scan(scan_number) {
                Ok(r) if r.is_finished() => return Ok(r),
                Ok(_) | Err(OrchestratorError::NotFound(_)) if Instant::now() < deadline => {
                    thread::sleep(Duration::from_millis(25))
                }
                Ok(_) => return Err(OrchestratorError::Http(format!("scan {scan_number} not finished in time"))),
                Err(e) => return Err(e),
            }
        }
    }
}

fn decode<T: DeserializeOwned>(resp: Result<Response<Body>, ureq::Error>) -> Result<T, OrchestratorError> {
    let mut resp = resp.map_err(|e| OrchestratorError::Http(e.to_string()))?;
    let status = resp.status().as_u16();
    if status < 300 {
        return resp
            .body_mut()
            .read_json()
            .map_err(|e| OrchestratorError::Http(e.to_string()));
    }
    let msg = resp
        .body_mut()
        .read_to_string()
        .ok()
        .and_then(|t| serde_json::from_str::<serde_json::Value>(&t).ok())
        .and_then(|v| v["error"].as_str().map(str::to_string))
        .unwrap_or_else(|| format!("status {status}"));
    Err(match status {
        400 | 415 | 422 => OrchestratorError::Invalid(msg),
        404 => OrchestratorError::NotFound(msg),
        409 => OrchestratorError::Conflict(msg),
        503 => OrchestratorError::Stopped,
        _ => OrchestratorError::Http(msg),
    })
}
