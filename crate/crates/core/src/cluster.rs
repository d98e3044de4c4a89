//! Every service of the pipeline on loopback inside one process: a state
//! server, the four-thread aggregator, `n` NodeGroups and, per scan, four
//! sector producers. Used by the examples, the bench and the tests.

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use thiserror::Error;

use crate::aggregator::{Aggregator, AggregatorConfig, AggregatorError, TcpConnector};
use crate::consumer::{
    MemoryCatalog, NodeGroup, NodeGroupConfig, NoReporter, ResultReporter, ScanCatalog, ScanEntry, ScanResult,
};
use crate::counting::{calibrate, CountingParams, NoiseFit};
use crate::producer::{
    raw_files, replay_raw_file, run_sector, ProducerError, ScanMode, ScanSpec, SectorConfig, SectorReport,
    SyntheticScan, DEFAULT_PRODUCER_THREADS,
};
use crate::protocol::N_SECTORS;
use crate::sparse::{SparseError, SparseScan};
use crate::statestore::{ClientOptions, ServerOptions, StateClient, StateClientError, StateServer};
use crate::transport::{PullSocket, PushSocket, TransportError, DEFAULT_HWM};

#[derive(Debug, Error)]
pub enum ClusterError {
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error(transparent)]
    State(#[from] StateClientError),
    #[error(transparent)]
    Aggregator(#[from] AggregatorError),
    #[error(transparent)]
    Producer(#[from] ProducerError),
    #[error(transparent)]
    Sparse(#[from] SparseError),
    #[error("timed out waiting for {0}")]
    Timeout(String),
}

#[derive(Debug, Clone)]
pub struct ClusterConfig {
    pub n_groups: usize,
    /// NodeGroup outputs go to `work_dir/out`, raw fallback to `work_dir/raw`.
    pub work_dir: PathBuf,
    pub params: CountingParams,
    pub producer_threads: usize,
    pub workers_per_group: usize,
    pub finalize_timeout: Duration,
    /// Upper bound on waiting for a scan's results.
    pub scan_timeout: Duration,
    pub sync_fallback: bool,
    pub hwm: usize,
}

impl ClusterConfig {
    pub fn new(n_groups: usize, work_dir: impl Into<PathBuf>) -> Self {
        Self {
            n_groups,
            work_dir: work_dir.into(),
            params: CountingParams::default(),
            producer_threads: DEFAULT_PRODUCER_THREADS,
            workers_per_group: thread::available_parallelism().map_or(1, |n| n.get()),
            finalize_timeout: crate::consumer::DEFAULT_FINALIZE_TIMEOUT,
            scan_timeout: Duration::from_secs(300),
            sync_fallback: false,
            hwm: DEFAULT_HWM,
        }
    }
}

/// Everything observed about one scan.
#[derive(Debug, Clone)]
pub struct ScanOutcome {
    pub scan_number: u32,
    pub mode: ScanMode,
    /// Membership pinned at scan start.
    pub uids: Vec<String>,
    pub sectors: Vec<SectorReport>,
    pub results: Vec<ScanResult>,
    /// Producer start to last NodeGroup file close (or last raw file write).
    pub elapsed: Duration,
}

impl ScanOutcome {
    pub fn completed(&self) -> u64 {
        self.results.iter().map(|r| r.completed).sum()
    }

    pub fn incomplete(&self) -> u64 {
        self.results.iter().map(|r| r.incomplete).sum()
    }

    pub fn lossy(&self) -> bool {
        self.results.iter().any(|r| r.lossy)
    }

    pub fn announced(&self) -> u64 {
        self.results.iter().map(|r| r.expected_total).sum()
    }

    pub fn received(&self) -> u64 {
        self.results.iter().map(|r| r.received).sum()
    }

    pub fn raw_paths(&self) -> Vec<PathBuf> {
        self.sectors.iter().flat_map(|s| s.raw_paths.iter().cloned()).collect()
    }

    /// Union of every NodeGroup's output file.
    pub fn merged(&self) -> Result<SparseScan, ClusterError> {
        let parts = self
            .results
            .iter()
            .filter_map(|r| r.path.as_deref())
            .map(SparseScan::read)
            .collect::<Result<Vec<_>, _>>()?;
        Ok(SparseScan::merge(parts)?)
    }
}

struct Group {
    node: NodeGroup,
}

pub struct LocalCluster {
    config: ClusterConfig,
    client: Arc<StateClient>,
    aggregator: Aggregator,
    catalog: MemoryCatalog,
    reporter: Arc<dyn ResultReporter>,
    groups: Vec<Group>,
    next_uid: usize,
    // dropped last so clients close before the server goes away
    state_server: StateServer,
}

impl LocalCluster {
    pub fn start(config: ClusterConfig) -> Result<Self, ClusterError> {
        Self::start_with_reporter(config, Arc::new(NoReporter))
    }

    /// Like [`LocalCluster::start`]; every NodeGroup result also goes to `reporter`.
    pub fn start_with_reporter(config: ClusterConfig, reporter: Arc<dyn ResultReporter>) -> Result<Self, ClusterError> {
        let state_server = StateServer::bind("127.0.0.1:0", ServerOptions::default())?;
        let state_addr = state_server.local_addr().to_string();
        let client = Arc::new(StateClient::connect(&state_addr, ClientOptions::default())?);
        let directory = StateClient::connect(&state_addr, ClientOptions::default())?;
        let connector = Arc::new(TcpConnector {
            directory,
            timeout: Duration::from_secs(10),
        });
        let aggregator = Aggregator::start(
            &AggregatorConfig {
                upstream_threads: config.producer_threads,
                hwm: config.hwm,
                metrics_addr: Some("127.0.0.1:0".into()),
                ..Default::default()
            },
            connector,
        )?;
        let mut cluster = Self {
            config,
            state_server,
            client,
            aggregator,
            catalog: MemoryCatalog::new(),
            reporter,
            groups: Vec::new(),
            next_uid: 0,
        };
        for _ in 0..cluster.config.n_groups {
            cluster.add_group()?;
        }
        cluster.wait_for_groups(cluster.config.n_groups, Duration::from_secs(10))?;
        Ok(cluster)
    }

    pub fn state_addr(&self) -> String {
        self.state_server.local_addr().to_string()
    }

    pub fn aggregator(&self) -> &Aggregator {
        &self.aggregator
    }

    pub fn state(&self) -> &Arc<StateClient> {
        &self.client
    }

    pub fn catalog(&self) -> &MemoryCatalog {
        &self.catalog
    }

    pub fn out_dir(&self) -> PathBuf {
        self.config.work_dir.join("out")
    }

    pub fn raw_dir(&self) -> PathBuf {
        self.config.work_dir.join("raw")
    }

    /// Starts one more NodeGroup listening on a fresh loopback port.
    pub fn add_group(&mut self) -> Result<String, ClusterError> {
        let uid = format!("ng-{:02}", self.next_uid);
        self.next_uid += 1;
        let socket = PullSocket::bind("127.0.0.1:0", self.config.hwm)?;
        let endpoint = socket.local_addr().to_string();
        let state = Arc::new(StateClient::connect(&self.state_addr(), ClientOptions::default())?);
        let mut cfg = NodeGroupConfig::new(uid.clone(), self.out_dir());
        cfg.params = self.config.params;
        cfg.finalize_timeout = self.config.finalize_timeout;
        cfg.workers = self.config.workers_per_group;
        let catalog: Arc<dyn ScanCatalog> = Arc::new(self.catalog.clone());
        let node = NodeGroup::spawn(cfg, Box::new(socket), catalog, Some(state), self.reporter.clone(), &endpoint)?;
        self.groups.push(Group { node });
        Ok(uid)
    }

    /// Drains and removes every NodeGroup; later scans fall back to disk.
    pub fn stop_groups(&mut self) -> Vec<ScanResult> {
        let results = self.groups.drain(..).flat_map(|g| g.node.join()).collect();
        let _ = self
            .client
            .wait_for(Duration::from_secs(5), |r| r.map().values().all(|s| s.kind != crate::statestore::NodeKind::NodeGroup));
        results
    }

    /// NodeGroups currently running under this cluster.
    pub fn n_groups(&self) -> usize {
        self.groups.len()
    }

    pub fn wait_for_groups(&self, n: usize, timeout: Duration) -> Result<Vec<String>, ClusterError> {
        let deadline = Instant::now() + timeout;
        loop {
            let active = self.client.active_nodegroups();
            if active.len() >= n {
                return Ok(active);
            }
            if Instant::now() >= deadline {
                return Err(ClusterError::Timeout(format!("{n} NodeGroups to register")));
            }
            thread::sleep(Duration::from_millis(20));
        }
    }

    /// Publishes the scan to the catalog with a shared calibration. When
    /// `fit` is `None` it is fitted from the scan's own generator.
    pub fn register_scan(&self, spec: &ScanSpec, fit: Option<NoiseFit>) -> NoiseFit {
        let fit = fit.unwrap_or_else(|| calibrate(&SyntheticScan::new(spec.clone()), &self.config.params, None));
        self.catalog.insert(ScanEntry {
            spec: spec.clone(),
            fit: Some(fit),
        });
        fit
    }

    fn sector_config(&self, spec: &ScanSpec, sector: usize) -> SectorConfig {
        SectorConfig {
            spec: spec.clone(),
            sector_index: sector as u16,
            threads: self.config.producer_threads,
            aggregator: self.aggregator.addrs()[sector].to_string(),
            fallback_dir: self.raw_dir(),
            connect_timeout: Duration::from_secs(10),
            sync_fallback: self.config.sync_fallback,
        }
    }

    /// Runs one scan end to end with membership pinned from the store.
    /// Register the scan first, or it is registered with a generator fit.
    pub fn run_scan(&self, spec: &ScanSpec) -> Result<ScanOutcome, ClusterError> {
        if self.catalog.lookup(spec.scan_number).is_none() {
            self.register_scan(spec, None);
        }
        let uids = self.client.active_nodegroups();
        let start = Instant::now();
        let sectors = thread::scope(|s| {
            let handles: Vec<_> = (0..N_SECTORS)
                .map(|k| {
                    let cfg = self.sector_config(spec, k);
                    let uids = &uids;
                    s.spawn(move || run_sector(&cfg, uids))
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().unwrap_or(Err(ProducerError::Panicked)))
                .collect::<Result<Vec<_>, _>>()
        })?;
        let mode = sectors[0].mode;
        let results = if mode == ScanMode::Streamed {
            self.collect_results(spec.scan_number, &uids)?
        } else {
            Vec::new()
        };
        Ok(ScanOutcome {
            scan_number: spec.scan_number,
            mode,
            uids,
            sectors,
            results,
            elapsed: start.elapsed(),
        })
    }

    /// Streams raw fallback files through the pipeline as live producers
    /// would.
    pub fn replay(&self, spec: &ScanSpec, raw_dir: &Path) -> Result<ScanOutcome, ClusterError> {
        if self.catalog.lookup(spec.scan_number).is_none() {
            self.register_scan(spec, None);
        }
        let files = raw_files(raw_dir, spec.scan_number)?;
        let uids = self.client.active_nodegroups();
        let geometry = spec.geometry();
        let start = Instant::now();
        thread::scope(|s| {
            let handles: Vec<_> = files
                .iter()
                .map(|path| {
                    let (uids, geometry) = (&uids, &geometry);
                    let sector = crate::producer::parse_raw_file_name(
                        path.file_name().and_then(|n| n.to_str()).unwrap_or_default(),
                    )
                    .map_or(0, |(_, k, _)| k as usize);
                    let addr = self.aggregator.addrs()[sector].to_string();
                    s.spawn(move || -> Result<(), ClusterError> {
                        let mut sink = PushSocket::connect(&addr, Duration::from_secs(10))?;
                        replay_raw_file(path, geometry, uids, &mut sink)?;
                        Ok(())
                    })
                })
                .collect();
            handles
                .into_iter()
                .try_for_each(|h| h.join().unwrap_or(Err(ClusterError::Producer(ProducerError::Panicked))))
        })?;
        let results = self.collect_results(spec.scan_number, &uids)?;
        Ok(ScanOutcome {
            scan_number: spec.scan_number,
            mode: ScanMode::Streamed,
            uids,
            sectors: Vec::new(),
            results,
            elapsed: start.elapsed(),
        })
    }

    fn collect_results(&self, scan_number: u32, uids: &[String]) -> Result<Vec<ScanResult>, ClusterError> {
        let deadline = Instant::now() + self.config.scan_timeout;
        let mut results = Vec::new();
        for uid in uids {
            let group = self
                .groups
                .iter()
                .find(|g| g.node.uid() == uid)
                .ok_or_else(|| ClusterError::Timeout(format!("unknown NodeGroup {uid}")))?;
            loop {
                let left = deadline.saturating_duration_since(Instant::now());
                match group.node.results().recv_timeout(left) {
                    Ok(r) if r.scan_number == scan_number => {
                        results.push(r);
                        break;
                    }
                    Ok(_) => continue,
                    Err(_) => return Err(ClusterError::Timeout(format!("scan {scan_number} on {uid}"))),
                }
            }
        }
        Ok(results)
    }

    pub fn shutdown(mut self) {
        self.stop_groups();
        self.aggregator.shutdown();
    }
}
