use std::collections::HashMap;
use std::convert::Infallible;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use axum::extract::{Path as UrlPath, Query, State};
use axum::http::StatusCode;
use axum::response::sse::{Event as SseEvent, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use crossbeam_channel::{unbounded, Receiver, RecvTimeoutError, Sender};
use futures::Stream;
use serde::Deserialize;
use tokio::sync::{broadcast, oneshot};

use super::launcher::{LaunchSpec, LaunchedNode, Launcher};
use super::{
    Event, MetricsEvent, OrchestratorError, Registry, ResultOutcome, ScanAnnouncement, ScanRecord, Session,
    SessionRequest, SessionStatus, DEFAULT_SCAN_LIMIT, REGISTRATION_DEADLINE_MS,
};
use crate::aggregator::parse_metrics;
use crate::consumer::{ScanResult, DEFAULT_FINALIZE_TIMEOUT};
use crate::counting::{calibrate, CountingParams};
use crate::producer::SyntheticScan;
use crate::statestore::{now_ms, ClientOptions, NodeKind, NodeStatus, StateClient, StateSnapshot};

const EVENT_BUFFER: usize = 1024;
const NODE_CHECK_INTERVAL: Duration = Duration::from_millis(250);

#[derive(Debug, Clone)]
pub struct OrchestratorConfig {
    pub bind: String,
    pub state_addr: String,
    /// NodeGroups launched by sessions write here.
    pub out_dir: PathBuf,
    /// Append-only record log; `None` keeps records in memory only.
    pub record_log: Option<PathBuf>,
    pub registration_deadline: Duration,
    /// How long a stopping session's NodeGroups get to finish open scans.
    pub drain_timeout: Duration,
    pub finalize_timeout: Duration,
    /// Aggregator text metrics, polled for throughput events.
    pub metrics_url: Option<String>,
    pub metrics_interval: Duration,
}

impl OrchestratorConfig {
    pub fn new(state_addr: impl Into<String>, out_dir: impl Into<PathBuf>) -> Self {
        Self {
            bind: "127.0.0.1:0".into(),
            state_addr: state_addr.into(),
            out_dir: out_dir.into(),
            record_log: None,
            registration_deadline: Duration::from_millis(REGISTRATION_DEADLINE_MS),
            drain_timeout: Duration::from_secs(120),
            finalize_timeout: DEFAULT_FINALIZE_TIMEOUT,
            metrics_url: None,
            metrics_interval: Duration::from_secs(1),
        }
    }
}

type Reply<T> = oneshot::Sender<T>;

enum Command {
    CreateSession(SessionRequest, Reply<Result<Session, OrchestratorError>>),
    StopSession(String, Reply<Result<Session, OrchestratorError>>),
    GetSession(String, Reply<Option<Session>>),
    ListSessions(Reply<Vec<Session>>),
    Launched {
        id: String,
        nodes: Vec<Box<dyn LaunchedNode>>,
        error: Option<String>,
    },
    Reaped(String),
    AnnounceScan(ScanAnnouncement, Reply<Result<ScanRecord, OrchestratorError>>),
    RecordResult(ScanResult, Reply<Result<(ScanRecord, ResultOutcome), OrchestratorError>>),
    RecordRaw(u32, Vec<PathBuf>, Reply<Result<ScanRecord, OrchestratorError>>),
    ListScans(usize, Reply<Vec<ScanRecord>>),
    GetScan(u32, Reply<Option<ScanRecord>>),
    Shutdown(Reply<()>),
}

struct Owner {
    registry: Registry,
    nodes: HashMap<String, Vec<Box<dyn LaunchedNode>>>,
    waiters: HashMap<String, Vec<Reply<Result<Session, OrchestratorError>>>>,
    events: broadcast::Sender<Event>,
    state: Arc<StateClient>,
    launcher: Arc<dyn Launcher>,
    config: OrchestratorConfig,
    url: String,
    commands: Sender<Command>,
}

impl Owner {
    fn run(mut self, rx: Receiver<Command>) {
        let mut next_check = Instant::now() + NODE_CHECK_INTERVAL;
        loop {
            match rx.recv_deadline(next_check) {
                Ok(Command::Shutdown(reply)) => {
                    self.shutdown();
                    let _ = reply.send(());
                    return;
                }
                Ok(cmd) => self.handle(cmd),
                Err(RecvTimeoutError::Timeout) => {}
                Err(RecvTimeoutError::Disconnected) => return self.shutdown(),
            }
            if Instant::now() >= next_check {
                self.check_nodes();
                next_check = Instant::now() + NODE_CHECK_INTERVAL;
            }
        }
    }

    fn emit(&self, event: Event) {
        let _ = self.events.send(event);
    }

    fn session_changed(&mut self, s: &Session) {
        self.emit(Event::Session(s.clone()));
        if !matches!(s.status, SessionStatus::Pending | SessionStatus::Stopping) {
            for w in self.waiters.remove(&s.session_id).unwrap_or_default() {
                let _ = w.send(Ok(s.clone()));
            }
        }
    }

    fn transition(&mut self, id: &str, to: SessionStatus, error: Option<String>) -> Option<Session> {
        match self.registry.transition(id, to, error, now_ms()) {
            Ok(s) => {
                self.session_changed(&s);
                Some(s)
            }
            Err(e) => {
                log::error!("session {id}: {e}");
                None
            }
        }
    }

    fn handle(&mut self, cmd: Command) {
        match cmd {
            Command::CreateSession(req, reply) => match self.registry.create_session(&req, now_ms()) {
                Ok(s) => {
                    self.emit(Event::Session(s.clone()));
                    self.waiters.entry(s.session_id.clone()).or_default().push(reply);
                    self.spawn_launch(&s);
                }
                Err(e) => {
                    let _ = reply.send(Err(e));
                }
            },
            Command::StopSession(id, reply) => self.stop(id, reply),
            Command::GetSession(id, reply) => {
                let _ = reply.send(self.registry.session(&id).cloned());
            }
            Command::ListSessions(reply) => {
                let _ = reply.send(self.registry.sessions());
            }
            Command::Launched { id, mut nodes, error } => {
                let pending = self.registry.session(&id).map(|s| s.status) == Some(SessionStatus::Pending);
                match error {
                    None if pending => {
                        self.nodes.insert(id.clone(), nodes);
                        self.transition(&id, SessionStatus::Active, None);
                    }
                    error => {
                        thread::spawn(move || nodes.iter_mut().for_each(|n| n.kill()));
                        if pending {
                            self.transition(&id, SessionStatus::Failed, error);
                        }
                    }
                }
            }
            Command::Reaped(id) => {
                self.transition(&id, SessionStatus::Ended, None);
            }
            Command::AnnounceScan(a, reply) => {
                let _ = reply.send(self.announce(a));
            }
            Command::RecordResult(result, reply) => {
                let out = self.registry.record_result(result, now_ms());
                if let Ok((rec, outcome)) = &out {
                    if *outcome != ResultOutcome::Duplicate {
                        self.emit(Event::Scan(rec.clone()));
                    }
                }
                let _ = reply.send(out);
            }
            Command::RecordRaw(n, paths, reply) => {
                let out = self.registry.record_raw(n, paths, now_ms());
                if let Ok(rec) = &out {
                    self.emit(Event::Scan(rec.clone()));
                }
                let _ = reply.send(out);
            }
            Command::ListScans(limit, reply) => {
                let _ = reply.send(self.registry.scans(limit));
            }
            Command::GetScan(n, reply) => {
                let _ = reply.send(self.registry.scan(n).cloned());
            }
            Command::Shutdown(_) => unreachable!("handled in run"),
        }
    }

    fn announce(&mut self, a: ScanAnnouncement) -> Result<ScanRecord, OrchestratorError> {
        a.spec.validate().map_err(|e| OrchestratorError::Invalid(e.to_string()))?;
        let nodegroups = self.state.active_nodegroups();
        let fit = a.fit.unwrap_or_else(|| {
            let params = self
                .registry
                .live_session()
                .map_or_else(CountingParams::default, |s| s.params);
            calibrate(&SyntheticScan::new(a.spec.clone()), &params, None)
        });
        let rec = self.registry.announce_scan(&a.spec, Some(fit), nodegroups, now_ms());
        self.emit(Event::Scan(rec.clone()));
        Ok(rec)
    }

    fn spawn_launch(&self, session: &Session) {
        let launcher = self.launcher.clone();
        let state = self.state.clone();
        let commands = self.commands.clone();
        let deadline = self.config.registration_deadline;
        let specs: Vec<LaunchSpec> = session
            .nodegroups
            .iter()
            .map(|uid| LaunchSpec {
                uid: uid.clone(),
                state_addr: self.config.state_addr.clone(),
                orchestrator_url: self.url.clone(),
                out_dir: self.config.out_dir.clone(),
                params: session.params,
                finalize_timeout: self.config.finalize_timeout,
            })
            .collect();
        let id = session.session_id.clone();
        thread::spawn(move || {
            let (nodes, error) = launch_all(&*launcher, &specs, &state, deadline);
            if let Err(e) = commands.send(Command::Launched { id, nodes, error }) {
                if let Command::Launched { mut nodes, .. } = e.0 {
                    nodes.iter_mut().for_each(|n| n.kill());
                }
            }
        });
    }

    fn stop(&mut self, id: String, reply: Reply<Result<Session, OrchestratorError>>) {
        let Some(session) = self.registry.session(&id).cloned() else {
            let _ = reply.send(Err(OrchestratorError::NotFound(format!("session {id}"))));
            return;
        };
        match session.status {
            SessionStatus::Ended | SessionStatus::Failed => {
                let _ = reply.send(Ok(session));
            }
            SessionStatus::Pending => {
                let _ = reply.send(Err(OrchestratorError::Conflict(format!("session {id} is still starting"))));
            }
            SessionStatus::Stopping => self.waiters.entry(id).or_default().push(reply),
            SessionStatus::Active => {
                self.waiters.entry(id.clone()).or_default().push(reply);
                self.transition(&id, SessionStatus::Stopping, None);
                let nodes = self.nodes.remove(&id).unwrap_or_default();
                let (state, commands, timeout) = (self.state.clone(), self.commands.clone(), self.config.drain_timeout);
                thread::spawn(move || {
                    drain_all(nodes, &state, timeout);
                    let _ = commands.send(Command::Reaped(id));
                });
            }
        }
    }

    /// An active session whose NodeGroup died has failed.
    fn check_nodes(&mut self) {
        let dead: Vec<(String, String)> = self
            .nodes
            .iter_mut()
            .filter_map(|(id, nodes)| {
                nodes
                    .iter_mut()
                    .find_map(|n| (!n.is_alive()).then(|| (id.clone(), n.uid().to_string())))
            })
            .collect();
        for (id, uid) in dead {
            let mut nodes = self.nodes.remove(&id).unwrap_or_default();
            thread::spawn(move || nodes.iter_mut().for_each(|n| n.kill()));
            self.transition(&id, SessionStatus::Failed, Some(format!("NodeGroup {uid} exited")));
        }
    }

    fn shutdown(&mut self) {
        let ids: Vec<String> = self.nodes.keys().cloned().collect();
        for id in ids {
            self.transition(&id, SessionStatus::Stopping, None);
            let nodes = self.nodes.remove(&id).unwrap_or_default();
            drain_all(nodes, &self.state, self.config.drain_timeout);
            self.transition(&id, SessionStatus::Ended, None);
        }
    }
}

/// Starts every NodeGroup and waits for all of them to register.
fn launch_all(
    launcher: &dyn Launcher,
    specs: &[LaunchSpec],
    state: &StateClient,
    deadline: Duration,
) -> (Vec<Box<dyn LaunchedNode>>, Option<String>) {
    let start = Instant::now();
    let mut nodes = Vec::new();
    for spec in specs {
        match launcher.launch(spec) {
            Ok(n) => nodes.push(n),
            Err(e) => return (nodes, Some(format!("launching {}: {e}", spec.uid))),
        }
    }
    loop {
        let map = state.map();
        let registered = specs.iter().all(|s| {
            map.get(&s.uid)
                .is_some_and(|c| c.kind == NodeKind::NodeGroup && c.status != NodeStatus::Offline)
        });
        if registered {
            return (nodes, None);
        }
        if let Some(uid) = nodes.iter_mut().find_map(|n| (!n.is_alive()).then(|| n.uid().to_string())) {
            return (nodes, Some(format!("NodeGroup {uid} exited during startup")));
        }
        if start.elapsed() >= deadline {
            return (nodes, Some(format!("NodeGroups not registered within {deadline:?}")));
        }
        thread::sleep(Duration::from_millis(20));
    }
}

/// Drains, waits up to `timeout`, kills stragglers and waits for the store
/// to stop listing them.
fn drain_all(mut nodes: Vec<Box<dyn LaunchedNode>>, state: &StateClient, timeout: Duration) {
    nodes.iter_mut().for_each(|n| n.drain());
    let deadline = Instant::now() + timeout;
    for n in &mut nodes {
        if !n.wait(deadline.saturating_duration_since(Instant::now())) {
            log::warn!("NodeGroup {} did not drain in time; killing", n.uid());
            n.kill();
        }
    }
    let uids: Vec<String> = nodes.iter().map(|n| n.uid().to_string()).collect();
    state.wait_for(Duration::from_secs(5), |r| {
        uids.iter()
            .all(|u| r.map().get(u).is_none_or(|c| c.status == NodeStatus::Offline))
    });
}

/// Publishes store changes as they happen and aggregator throughput at a
/// fixed interval while bytes are flowing.
fn observe(
    state: Arc<StateClient>,
    events: broadcast::Sender<Event>,
    metrics_url: Option<String>,
    interval: Duration,
    stop: Arc<AtomicBool>,
) {
    let agent: ureq::Agent = ureq::Agent::config_builder()
        .timeout_global(Some(Duration::from_secs(2)))
        .build()
        .into();
    let mut last_sequence = None;
    let mut next_poll = Instant::now();
    let mut last_bytes = None;
    while !stop.load(Ordering::Acquire) {
        if last_sequence != Some(state.last_sequence()) {
            let snap = state.snapshot();
            last_sequence = Some(snap.as_of_sequence);
            let _ = events.send(Event::State(snap));
        }
        if let Some(url) = &metrics_url {
            if Instant::now() >= next_poll {
                next_poll += interval;
                if let Some(m) = poll_metrics(&agent, url) {
                    if m.scan_number > 0 && last_bytes != Some((m.scan_number, m.bytes_received)) {
                        last_bytes = Some((m.scan_number, m.bytes_received));
                        let _ = events.send(Event::Metrics(m));
                    }
                }
            }
        }
        thread::sleep(Duration::from_millis(50));
    }
}

fn poll_metrics(agent: &ureq::Agent, url: &str) -> Option<MetricsEvent> {
    let text = agent.get(url).call().ok()?.body_mut().read_to_string().ok()?;
    let m = parse_metrics(&text);
    let bytes = *m.get("scan_bytes_received")?;
    let elapsed_ms = *m.get("scan_elapsed_ms")?;
    Some(MetricsEvent {
        scan_number: *m.get("scan_number")? as u32,
        bytes_received: bytes,
        elapsed_ms,
        throughput_bytes_per_s: if elapsed_ms > 0 {
            bytes as f64 * 1000.0 / elapsed_ms as f64
        } else {
            0.0
        },
    })
}

/// The running service: owner thread, store observer and HTTP server.
pub struct Orchestrator {
    addr: SocketAddr,
    commands: Sender<Command>,
    events: broadcast::Sender<Event>,
    restore: super::RestoreReport,
    owner: Option<JoinHandle<()>>,
    observer: Option<JoinHandle<()>>,
    stop: Arc<AtomicBool>,
    runtime: Option<tokio::runtime::Runtime>,
}

impl Orchestrator {
    pub fn start(config: OrchestratorConfig, launcher: Arc<dyn Launcher>) -> Result<Self, OrchestratorError> {
        let (registry, restore) = match &config.record_log {
            Some(p) => Registry::restore(p, now_ms())?,
            None => (Registry::new(), Default::default()),
        };
        let state = Arc::new(
            StateClient::connect(
                &config.state_addr,
                ClientOptions {
                    heartbeat: Duration::ZERO,
                    ..Default::default()
                },
            )
            .map_err(|e| OrchestratorError::Io(e.to_string()))?,
        );
        let listener = std::net::TcpListener::bind(&config.bind)?;
        listener.set_nonblocking(true)?;
        let addr = listener.local_addr()?;
        let (events, _) = broadcast::channel(EVENT_BUFFER);
        let (commands, rx) = unbounded();
        let stop = Arc::new(AtomicBool::new(false));

        let owner = Owner {
            registry,
            nodes: HashMap::new(),
            waiters: HashMap::new(),
            events: events.clone(),
            state: state.clone(),
            launcher,
            url: format!("http://{addr}"),
            commands: commands.clone(),
            config: config.clone(),
        };
        let owner = thread::Builder::new()
            .name("orchestrator".into())
            .spawn(move || owner.run(rx))?;
        let observer = {
            let (state, events, stop) = (state.clone(), events.clone(), stop.clone());
            let (url, interval) = (config.metrics_url.clone(), config.metrics_interval);
            thread::Builder::new()
                .name("orchestrator-observer".into())
                .spawn(move || observe(state, events, url, interval, stop))?
        };

        let runtime = tokio::runtime::Builder::new_multi_thread()
            .worker_threads(2)
            .thread_name("orchestrator-http")
            .enable_all()
            .build()?;
        let listener = {
            let _guard = runtime.enter();
            tokio::net::TcpListener::from_std(listener)?
        };
        let app = AppState {
            commands: commands.clone(),
            events: events.clone(),
            state,
        };
        runtime.spawn(async move {
            if let Err(e) = axum::serve(listener, router(app)).await {
                log::error!("orchestrator http server: {e}");
            }
        });
        log::info!("orchestrator listening on http://{addr}");
        Ok(Self {
            addr,
            commands,
            events,
            restore,
            owner: Some(owner),
            observer: Some(observer),
            stop,
            runtime: Some(runtime),
        })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    /// What was replayed from the record log at startup.
    pub fn restore_report(&self) -> &super::RestoreReport {
        &self.restore
    }

    /// In-process view of the event stream.
    pub fn subscribe(&self) -> broadcast::Receiver<Event> {
        self.events.subscribe()
    }

    /// Serves until interrupted, then drains any live session.
    pub fn run_until_ctrl_c(mut self) {
        if let Some(rt) = &self.runtime {
            rt.block_on(async {
                let _ = tokio::signal::ctrl_c().await;
            });
        }
        self.stop_all();
    }

    /// Drains any active session's NodeGroups and stops serving.
    pub fn shutdown(mut self) {
        self.stop_all();
    }

    fn stop_all(&mut self) {
        if let Some(owner) = self.owner.take() {
            let (tx, _rx) = oneshot::channel();
            let _ = self.commands.send(Command::Shutdown(tx));
            let _ = owner.join();
        }
        self.stop.store(true, Ordering::Release);
        if let Some(h) = self.observer.take() {
            let _ = h.join();
        }
        if let Some(rt) = self.runtime.take() {
            rt.shutdown_timeout(Duration::from_secs(1));
        }
    }
}

impl Drop for Orchestrator {
    fn drop(&mut self) {
        self.stop_all();
    }
}

#[derive(Clone)]
struct AppState {
    commands: Sender<Command>,
    events: broadcast::Sender<Event>,
    state: Arc<StateClient>,
}

async fn ask<T>(app: &AppState, make: impl FnOnce(Reply<T>) -> Command) -> Result<T, OrchestratorError> {
    let (tx, rx) = oneshot::channel();
    app.commands.send(make(tx)).map_err(|_| OrchestratorError::Stopped)?;
    rx.await.map_err(|_| OrchestratorError::Stopped)
}

impl IntoResponse for OrchestratorError {
    fn into_response(self) -> Response {
        let code = match &self {
            Self::Invalid(_) => StatusCode::BAD_REQUEST,
            Self::Conflict(_) | Self::Transition { .. } => StatusCode::CONFLICT,
            Self::NotFound(_) => StatusCode::NOT_FOUND,
            Self::Io(_) | Self::Http(_) => StatusCode::INTERNAL_SERVER_ERROR,
            Self::Stopped => StatusCode::SERVICE_UNAVAILABLE,
        };
        (code, Json(serde_json::json!({ "error": self.to_string() }))).into_response()
    }
}

fn router(app: AppState) -> Router {
    Router::new()
        .route("/sessions", get(list_sessions).post(create_session))
        .route("/sessions/{id}", get(get_session).delete(stop_session))
        .route("/scans", get(list_scans).post(announce_scan))
        .route("/scans/{n}", get(get_scan))
        .route("/scans/{n}/results", post(post_result))
        .route("/scans/{n}/raw", post(post_raw))
        .route("/state", get(get_state))
        .route("/events", get(events))
        .with_state(app)
}

/// 201 once every NodeGroup registered; 503 with the failed session otherwise.
async fn create_session(
    State(app): State<AppState>,
    Json(req): Json<SessionRequest>,
) -> Result<(StatusCode, Json<Session>), OrchestratorError> {
    let s = ask(&app, |r| Command::CreateSession(req, r)).await??;
    let code = if s.status == SessionStatus::Active {
        StatusCode::CREATED
    } else {
        StatusCode::SERVICE_UNAVAILABLE
    };
    Ok((code, Json(s)))
}

async fn stop_session(State(app): State<AppState>, UrlPath(id): UrlPath<String>) -> Result<Json<Session>, OrchestratorError> {
    Ok(Json(ask(&app, |r| Command::StopSession(id, r)).await??))
}

async fn get_session(State(app): State<AppState>, UrlPath(id): UrlPath<String>) -> Result<Json<Session>, OrchestratorError> {
    ask(&app, |r| Command::GetSession(id.clone(), r))
        .await?
        .map(Json)
        .ok_or(OrchestratorError::NotFound(format!("session {id}")))
}

async fn list_sessions(State(app): State<AppState>) -> Result<Json<Vec<Session>>, OrchestratorError> {
    Ok(Json(ask(&app, Command::ListSessions).await?))
}

#[derive(Deserialize)]
struct ScansQuery {
    limit: Option<usize>,
}

async fn list_scans(
    State(app): State<AppState>,
    Query(q): Query<ScansQuery>,
) -> Result<Json<Vec<ScanRecord>>, OrchestratorError> {
    let limit = q.limit.unwrap_or(DEFAULT_SCAN_LIMIT);
    Ok(Json(ask(&app, |r| Command::ListScans(limit, r)).await?))
}

async fn get_scan(State(app): State<AppState>, UrlPath(n): UrlPath<u32>) -> Result<Json<ScanRecord>, OrchestratorError> {
    ask(&app, |r| Command::GetScan(n, r))
        .await?
        .map(Json)
        .ok_or(OrchestratorError::NotFound(format!("scan {n}")))
}

async fn announce_scan(
    State(app): State<AppState>,
    Json(a): Json<ScanAnnouncement>,
) -> Result<(StatusCode, Json<ScanRecord>), OrchestratorError> {
    let rec = ask(&app, |r| Command::AnnounceScan(a, r)).await??;
    Ok((StatusCode::CREATED, Json(rec)))
}

/// Reply to `POST /scans/{n}/results`.
#[derive(Debug, Clone, serde::Serialize, Deserialize)]
pub struct ResultReply {
    pub outcome: ResultOutcome,
    pub scan: ScanRecord,
}

async fn post_result(
    State(app): State<AppState>,
    UrlPath(n): UrlPath<u32>,
    Json(result): Json<ScanResult>,
) -> Result<Json<ResultReply>, OrchestratorError> {
    if result.scan_number != n {
        return Err(OrchestratorError::Invalid(format!(
            "result for scan {} posted to scan {n}",
            result.scan_number
        )));
    }
    let (scan, outcome) = ask(&app, |r| Command::RecordResult(result, r)).await??;
    Ok(Json(ResultReply { outcome, scan }))
}

#[derive(Deserialize)]
struct RawBody {
    raw_paths: Vec<PathBuf>,
}

async fn post_raw(
    State(app): State<AppState>,
    UrlPath(n): UrlPath<u32>,
    Json(body): Json<RawBody>,
) -> Result<Json<ScanRecord>, OrchestratorError> {
    Ok(Json(ask(&app, |r| Command::RecordRaw(n, body.raw_paths, r)).await??))
}

async fn get_state(State(app): State<AppState>) -> Json<StateSnapshot> {
    Json(app.state.snapshot())
}

/// Current store snapshot first, then every event as it happens.
async fn events(State(app): State<AppState>) -> Sse<impl Stream<Item = Result<SseEvent, Infallible>>> {
    use futures::StreamExt;
    let rx = app.events.subscribe();
    let first = Event::State(app.state.snapshot());
    let tail = futures::stream::unfold(rx, |mut rx| async move {
        loop {
            match rx.recv().await {
                Ok(ev) => return Some((ev, rx)),
                Err(broadcast::error::RecvError::Lagged(n)) => log::warn!("event subscriber skipped {n} events"),
                Err(broadcast::error::RecvError::Closed) => return None,
            }
        }
    });
    let stream = futures::stream::once(async move { first })
        .chain(tail)
        .map(|ev| Ok(SseEvent::default().event(ev.kind()).data(serde_json::to_string(&ev).unwrap_or_default())));
    Sse::new(stream).keep_alive(KeepAlive::default())
}
