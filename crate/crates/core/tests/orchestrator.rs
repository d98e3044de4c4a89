use std::io::{self, BufRead, BufReader, Write};
use std::net::TcpStream;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use stream4d::aggregator::{Aggregator, AggregatorConfig, TcpConnector};
use stream4d::orchestrator::{
    Event, LaunchSpec, LaunchedNode, Launcher, Orchestrator, OrchestratorClient, OrchestratorConfig,
    OrchestratorError, ScanDriver, SessionRequest, SessionStatus, ThreadLauncher,
};
use stream4d::producer::{ScanMode, ScanSpec};
use stream4d::protocol::DetectorGeometry;
use stream4d::sparse::SparseScan;
use stream4d::statestore::{ClientOptions, ClientState, NodeKind, NodeStatus, ServerOptions, StateClient, StateServer};

struct Rig {
    _dir: tempfile::TempDir,
    work: PathBuf,
    server: StateServer,
    aggregator: Aggregator,
    orchestrator: Option<Orchestrator>,
    client: OrchestratorClient,
}

impl Rig {
    fn start(launcher: Arc<dyn Launcher>, tweak: impl FnOnce(&mut OrchestratorConfig)) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let work = dir.path().to_path_buf();
        let server = StateServer::bind("127.0.0.1:0", ServerOptions::default()).unwrap();
        let state_addr = server.local_addr().to_string();
        let directory = StateClient::connect(&state_addr, ClientOptions::default()).unwrap();
        let aggregator = Aggregator::start(
            &AggregatorConfig {
                metrics_addr: Some("127.0.0.1:0".into()),
                ..Default::default()
            },
            Arc::new(TcpConnector {
                directory,
                timeout: Duration::from_secs(10),
            }),
        )
        .unwrap();
        let mut cfg = OrchestratorConfig::new(state_addr, work.join("out"));
        cfg.record_log = Some(work.join("records.jsonl"));
        cfg.finalize_timeout = Duration::from_millis(1500);
        cfg.metrics_url = Some(format!("http://{}/metrics", aggregator.metrics_addr().unwrap()));
        cfg.metrics_interval = Duration::from_millis(100);
        tweak(&mut cfg);
        let orchestrator = Orchestrator::start(cfg, launcher).unwrap();
        let client = OrchestratorClient::new(&orchestrator.url());
        Self {
            _dir: dir,
            work,
            server,
            aggregator,
            orchestrator: Some(orchestrator),
            client,
        }
    }

    fn orchestrator(&self) -> &Orchestrator {
        self.orchestrator.as_ref().unwrap()
    }

    fn driver(&self) -> ScanDriver {
        ScanDriver::new(
            self.aggregator.addrs().iter().map(|a| a.to_string()).collect(),
            self.work.join("raw"),
        )
    }
}

fn spec(n: u32, rows: u32, cols: u32) -> ScanSpec {
    let mut s = ScanSpec::new(n, rows, cols, DetectorGeometry::new(16, 16).unwrap());
    s.event_rate = 3.0;
    s.seed = n as u64;
    s
}

fn two() -> SessionRequest {
    SessionRequest {
        n_nodegroups: 2,
        params: Default::default(),
    }
}

fn drain_events(rx: &mut tokio::sync::broadcast::Receiver<Event>) -> Vec<Event> {
    let mut out = Vec::new();
    while let Ok(ev) = rx.try_recv() {
        out.push(ev);
    }
    out
}

#[test]
fn session_scan_stop_and_fallback() {
    let rig = Rig::start(Arc::new(ThreadLauncher::default()), |_| {});
    let mut events = rig.orchestrator().subscribe();
    let c = &rig.client;

    assert!(matches!(
        c.create_session(&SessionRequest {
            n_nodegroups: 0,
            params: Default::default()
        }),
        Err(OrchestratorError::Invalid(_))
    ));
    let session = c.create_session(&two()).unwrap();
    assert_eq!(session.status, SessionStatus::Active, "{session:?}");
    let state = c.state().unwrap();
    let groups: Vec<&ClientState> = state.entries.values().filter(|s| s.kind == NodeKind::NodeGroup).collect();
    assert_eq!(groups.len(), 2);
    assert!(groups.iter().all(|g| session.nodegroups.contains(&g.uid)));
    assert!(matches!(c.create_session(&two()), Err(OrchestratorError::Conflict(_))));

    let s = spec(1, 8, 8);
    let (announced, _) = c.drive_scan(&s, None, &rig.driver()).unwrap();
    assert_eq!(announced.mode, ScanMode::Streamed);
    assert_eq!(announced.nodegroups, session.nodegroups);
    let rec = c.wait_for_scan(1, Duration::from_secs(30)).unwrap();
    assert_eq!(rec.session_id.as_deref(), Some(session.session_id.as_str()));
    assert_eq!((rec.completed, rec.incomplete, rec.deficit), (64, 0, 0));
    assert!(!rec.lossy);
    let parts: Vec<SparseScan> = rec.outputs.values().map(|p| SparseScan::read(p).unwrap()).collect();
    assert_eq!(parts.len(), 2);
    let merged = SparseScan::merge(parts).unwrap();
    assert_eq!(merged.frames.len(), 64);

    let stopped = c.stop_session(&session.session_id).unwrap();
    assert_eq!(stopped.status, SessionStatus::Ended);
    assert_eq!(
        stopped.transitions,
        vec![SessionStatus::Pending, SessionStatus::Active, SessionStatus::Stopping, SessionStatus::Ended]
    );
    assert_eq!(c.stop_session(&session.session_id).unwrap(), stopped, "double stop is a no-op");
    assert!(matches!(c.stop_session("s9999"), Err(OrchestratorError::NotFound(_))));

    let (rec, sectors) = c.drive_scan(&spec(2, 4, 4), None, &rig.driver()).unwrap();
    assert_eq!(rec.mode, ScanMode::DiskFallback);
    assert!(rec.session_id.is_none());
    assert!(rec.is_finished());
    assert_eq!(rec.raw_paths.len(), 16);
    assert!(rec.raw_paths.iter().all(|p| p.exists()));
    assert!(sectors.iter().all(|s| s.mode == ScanMode::DiskFallback));

    let scans = c.scans(10).unwrap();
    assert_eq!(scans.iter().map(|r| r.scan_number).collect::<Vec<_>>(), vec![2, 1]);
    assert_eq!(c.scans(1).unwrap().len(), 1);
    assert!(matches!(c.scan(77), Err(OrchestratorError::NotFound(_))));

    std::thread::sleep(Duration::from_millis(300));
    let seen = drain_events(&mut events);
    let kinds: std::collections::BTreeSet<&str> = seen.iter().map(Event::kind).collect();
    assert_eq!(kinds, ["metrics", "scan", "session", "state"].into_iter().collect());
    let statuses: Vec<SessionStatus> = seen
        .iter()
        .filter_map(|e| match e {
            Event::Session(s) => Some(s.status),
            _ => None,
        })
        .collect();
    assert_eq!(
        statuses,
        vec![SessionStatus::Pending, SessionStatus::Active, SessionStatus::Stopping, SessionStatus::Ended]
    );
    let metrics = seen.iter().find_map(|e| match e {
        Event::Metrics(m) => Some(m.clone()),
        _ => None,
    });
    assert!(metrics.unwrap().bytes_received > 0);
}

#[test]
fn event_stream_starts_with_state_snapshot() {
    let rig = Rig::start(Arc::new(ThreadLauncher::default()), |_| {});
    let mut stream = TcpStream::connect(rig.orchestrator().local_addr()).unwrap();
    stream.set_read_timeout(Some(Duration::from_secs(5))).unwrap();
    write!(stream, "GET /events HTTP/1.1\r\nHost: x\r\nAccept: text/event-stream\r\n\r\n").unwrap();
    let mut lines = BufReader::new(stream).lines();
    let status = lines.next().unwrap().unwrap();
    assert!(status.contains("200"), "{status}");
    let mut event = None;
    let mut data = None;
    for line in lines {
        let line = line.unwrap();
        // chunked framing lines are ignored
        if let Some(e) = line.strip_prefix("event: ") {
            event = Some(e.to_string());
        } else if let Some(d) = line.strip_prefix("data: ") {
            data = Some(d.to_string());
            break;
        }
    }
    assert_eq!(event.as_deref(), Some("state"));
    let v: serde_json::Value = serde_json::from_str(&data.unwrap()).unwrap();
    assert_eq!(v["type"], "state");
    assert!(v["as_of_sequence"].is_u64());
}

#[test]
fn stop_during_scan_finishes_the_scan_first() {
    let rig = Rig::start(Arc::new(ThreadLauncher::default()), |_| {});
    let c = rig.client.clone();
    let session = c
        .create_session(&SessionRequest {
            n_nodegroups: 1,
            params: Default::default(),
        })
        .unwrap();
    let uid = session.nodegroups[0].clone();
    let watcher = StateClient::connect(&rig.server.local_addr().to_string(), ClientOptions::default()).unwrap();
    let driver = rig.driver();
    let s = spec(5, 32, 32);
    let scan = std::thread::spawn(move || c.drive_scan(&s, None, &driver).unwrap());
    assert!(watcher.wait_for(Duration::from_secs(20), |r| r
        .map()
        .get(&uid)
        .is_some_and(|st| st.status == NodeStatus::Streaming)));
    let stopped = rig.client.stop_session(&session.session_id).unwrap();
    assert_eq!(stopped.status, SessionStatus::Ended);
    scan.join().unwrap();
    let rec = rig.client.wait_for_scan(5, Duration::from_secs(10)).unwrap();
    assert_eq!(rec.completed + rec.incomplete, 1024);
    assert_eq!(rec.deficit, 0);
    assert!(rec.outputs.values().all(|p| p.exists()));
}

#[test]
fn records_survive_restart() {
    let mut rig = Rig::start(Arc::new(ThreadLauncher::default()), |_| {});
    let session = rig.client.create_session(&two()).unwrap();
    rig.client.drive_scan(&spec(3, 4, 4), None, &rig.driver()).unwrap();
    rig.client.wait_for_scan(3, Duration::from_secs(30)).unwrap();
    let before = rig.client.scans(10).unwrap();
    // shutting down drains the live session
    rig.orchestrator.take().unwrap().shutdown();

    let mut cfg = OrchestratorConfig::new(rig.server.local_addr().to_string(), rig.work.join("out"));
    cfg.record_log = Some(rig.work.join("records.jsonl"));
    let again = Orchestrator::start(cfg, Arc::new(ThreadLauncher::default())).unwrap();
    assert_eq!(again.restore_report().skipped_lines, 0);
    let client = OrchestratorClient::new(&again.url());
    assert_eq!(client.scans(10).unwrap(), before);
    let restored = client.session(&session.session_id).unwrap();
    assert_eq!(restored.status, SessionStatus::Ended);
    let next = client.create_session(&two()).unwrap();
    assert_ne!(next.session_id, session.session_id);
    again.shutdown();
}

/// Launches nodes that never register, or registers stand-ins that can be
/// made to die.
struct FakeLauncher {
    state_addr: Option<String>,
    fail_spawn: bool,
    alive: Arc<AtomicBool>,
}

struct FakeNode {
    uid: String,
    _client: Option<StateClient>,
    alive: Arc<AtomicBool>,
}

impl LaunchedNode for FakeNode {
    fn uid(&self) -> &str {
        &self.uid
    }
    fn is_alive(&mut self) -> bool {
        self.alive.load(Ordering::Acquire)
    }
    fn drain(&mut self) {}
    fn wait(&mut self, _: Duration) -> bool {
        true
    }
    fn kill(&mut self) {}
}

impl Launcher for FakeLauncher {
    fn launch(&self, spec: &LaunchSpec) -> io::Result<Box<dyn LaunchedNode>> {
        if self.fail_spawn {
            return Err(io::Error::other("no such program"));
        }
        let client = self.state_addr.as_ref().map(|addr| {
            let c = StateClient::connect(addr, ClientOptions::default()).unwrap();
            c.register(ClientState::new(spec.uid.clone(), NodeKind::NodeGroup)).unwrap();
            c
        });
        Ok(Box::new(FakeNode {
            uid: spec.uid.clone(),
            _client: client,
            alive: self.alive.clone(),
        }))
    }
}

#[test]
fn registration_deadline_and_spawn_failure_fail_the_session() {
    let launcher = Arc::new(FakeLauncher {
        state_addr: None,
        fail_spawn: false,
        alive: Arc::new(AtomicBool::new(true)),
    });
    let rig = Rig::start(launcher, |c| c.registration_deadline = Duration::from_millis(300));
    let start = Instant::now();
    let s = rig.client.create_session(&two()).unwrap();
    assert_eq!(s.status, SessionStatus::Failed);
    assert!(s.error.unwrap().contains("not registered"));
    assert!(start.elapsed() < Duration::from_secs(5));
    // the slot is free again
    assert_eq!(rig.client.create_session(&two()).unwrap().status, SessionStatus::Failed);

    let rig = Rig::start(
        Arc::new(FakeLauncher {
            state_addr: None,
            fail_spawn: true,
            alive: Arc::new(AtomicBool::new(true)),
        }),
        |_| {},
    );
    let s = rig.client.create_session(&two()).unwrap();
    assert_eq!(s.status, SessionStatus::Failed);
    assert!(s.error.unwrap().contains("no such program"));
}

#[test]
fn dead_nodegroup_fails_an_active_session() {
    let alive = Arc::new(AtomicBool::new(true));
    let state_addr = Arc::new(parking_lot::Mutex::new(None::<String>));
    // the launcher needs the store address, which exists only once the rig is up
    struct Late(Arc<parking_lot::Mutex<Option<String>>>, Arc<AtomicBool>);
    impl Launcher for Late {
        fn launch(&self, spec: &LaunchSpec) -> io::Result<Box<dyn LaunchedNode>> {
            FakeLauncher {
                state_addr: self.0.lock().clone(),
                fail_spawn: false,
                alive: self.1.clone(),
            }
            .launch(spec)
        }
    }
    let rig = Rig::start(Arc::new(Late(state_addr.clone(), alive.clone())), |_| {});
    *state_addr.lock() = Some(rig.server.local_addr().to_string());
    let s = rig.client.create_session(&two()).unwrap();
    assert_eq!(s.status, SessionStatus::Active);
    alive.store(false, Ordering::Release);
    let deadline = Instant::now() + Duration::from_secs(5);
    loop {
        let now = rig.client.session(&s.session_id).unwrap();
        if now.status == SessionStatus::Failed {
            assert!(now.error.unwrap().contains("exited"));
            break;
        }
        assert!(Instant::now() < deadline, "session still {:?}", now.status);
        std::thread::sleep(Duration::from_millis(50));
    }
}

#[test]
fn results_for_unknown_scans_and_duplicates() {
    let rig = Rig::start(Arc::new(ThreadLauncher::default()), |_| {});
    let result = stream4d::consumer::ScanResult {
        uid: "x".into(),
        scan_number: 40,
        group_index: Some(0),
        n_groups: 1,
        path: Some(Path::new("/nowhere").into()),
        frames: 1,
        completed: 1,
        incomplete: 0,
        received: 4,
        expected_total: 4,
        duplicates: 0,
        deficit: 0,
        lossy: false,
        events: 0,
        bytes_received: 0,
        elapsed_ms: 0,
        error: None,
    };
    let reply = rig.client.report_result(&result).unwrap();
    assert_eq!(reply.outcome, stream4d::orchestrator::ResultOutcome::Retroactive);
    assert!(reply.scan.retroactive && reply.scan.is_finished());
    let reply = rig.client.report_result(&result).unwrap();
    assert_eq!(reply.outcome, stream4d::orchestrator::ResultOutcome::Duplicate);
}
