use std::io;
use std::path::PathBuf;
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use crate::consumer::{HttpCatalog, HttpReporter, NodeGroup, NodeGroupConfig};
use crate::counting::CountingParams;
use crate::statestore::{ClientOptions, StateClient};
use crate::transport::{PullSocket, DEFAULT_HWM};

/// Everything a launcher needs to start one NodeGroup.
#[derive(Debug, Clone)]
pub struct LaunchSpec {
    pub uid: String,
    pub state_addr: String,
    /// Base URL for scan lookups and result reports.
    pub orchestrator_url: String,
    pub out_dir: PathBuf,
    pub params: CountingParams,
    pub finalize_timeout: Duration,
}

/// A started NodeGroup as seen by the orchestrator.
pub trait LaunchedNode: Send {
    fn uid(&self) -> &str;
    fn is_alive(&mut self) -> bool;
    /// Asks the node to finish open scans, deregister and exit.
    fn drain(&mut self);
    /// True once the node has exited.
    fn wait(&mut self, timeout: Duration) -> bool;
    fn kill(&mut self);
}

/// The spawn seam. A batch-system launcher would implement this too.
pub trait Launcher: Send + Sync {
    fn launch(&self, spec: &LaunchSpec) -> io::Result<Box<dyn LaunchedNode>>;
}

/// Runs `program consume …` as a child process; closing its stdin drains it.
#[derive(Debug, Clone)]
pub struct ProcessLauncher {
    pub program: PathBuf,
    pub extra_args: Vec<String>,
    pub bind_host: String,
}

impl ProcessLauncher {
    pub fn new(program: impl Into<PathBuf>) -> Self {
        Self {
            program: program.into(),
            extra_args: Vec::new(),
            bind_host: "127.0.0.1".into(),
        }
    }

    /// Launches copies of the running executable.
    pub fn current_exe() -> io::Result<Self> {
        Ok(Self::new(std::env::current_exe()?))
    }

    pub fn args(&self, spec: &LaunchSpec) -> Vec<String> {
        let mut args: Vec<String> = vec![
            "consume".into(),
            "--uid".into(),
            spec.uid.clone(),
            "--state".into(),
            spec.state_addr.clone(),
            "--bind".into(),
            format!("{}:0", self.bind_host),
            "--out".into(),
            spec.out_dir.display().to_string(),
            "--orchestrator".into(),
            spec.orchestrator_url.clone(),
            "--n-sigma".into(),
            spec.params.n_sigma.to_string(),
            "--sample-count".into(),
            spec.params.sample_count.to_string(),
            "--finalize-timeout-ms".into(),
            spec.finalize_timeout.as_millis().to_string(),
            "--drain-on-stdin-eof".into(),
        ];
        args.extend(self.extra_args.iter().cloned());
        args
    }
}

impl Launcher for ProcessLauncher {
    fn launch(&self, spec: &LaunchSpec) -> io::Result<Box<dyn LaunchedNode>> {
        let mut child = Command::new(&self.program)
            .args(self.args(spec))
            .stdin(Stdio::piped())
            .stdout(Stdio::null())
            .spawn()?;
        let stdin = child.stdin.take();
        Ok(Box::new(ProcessNode {
            uid: spec.uid.clone(),
            child,
            stdin,
        }))
    }
}

struct ProcessNode {
    uid: String,
    child: Child,
    stdin: Option<ChildStdin>,
}

impl LaunchedNode for ProcessNode {
    fn uid(&self) -> &str {
        &self.uid
    }

    fn is_alive(&mut self) -> bool {
        matches!(self.child.try_wait(), Ok(None))
    }

    fn drain(&mut self) {
        self.stdin.take();
    }

    fn wait(&mut self, timeout: Duration) -> bool {
        let deadline = Instant::now() + timeout;
        loop {
            match self.child.try_wait() {
                Ok(Some(_)) | Err(_) => return true,
                Ok(None) if Instant::now() >= deadline => return false,
                Ok(None) => thread::sleep(Duration::from_millis(20)),
            }
        }
    }

    fn kill(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

impl Drop for ProcessNode {
    fn drop(&mut self) {
        if self.is_alive() {
            self.kill();
        }
    }
}

/// Runs NodeGroups on threads of the orchestrator's own process.
#[derive(Debug, Clone)]
pub struct ThreadLauncher {
    pub bind_host: String,
    pub workers: usize,
    pub hwm: usize,
}

impl Default for ThreadLauncher {
    fn default() -> Self {
        Self {
            bind_host: "127.0.0.1".into(),
            workers: thread::available_parallelism().map_or(1, |n| n.get()),
            hwm: DEFAULT_HWM,
        }
    }
}

impl Launcher for ThreadLauncher {
    fn launch(&self, spec: &LaunchSpec) -> io::Result<Box<dyn LaunchedNode>> {
        let socket = PullSocket::bind(&format!("{}:0", self.bind_host), self.hwm).map_err(io::Error::other)?;
        let endpoint = socket.local_addr().to_string();
        let state = StateClient::connect(&spec.state_addr, ClientOptions::default()).map_err(io::Error::other)?;
        let mut cfg = NodeGroupConfig::new(spec.uid.clone(), spec.out_dir.clone());
        cfg.params = spec.params;
        cfg.finalize_timeout = spec.finalize_timeout;
        cfg.workers = self.workers;
        let node = NodeGroup::spawn(
            cfg,
            Box::new(socket),
            Arc::new(HttpCatalog::new(&spec.orchestrator_url)),
            Some(Arc::new(state)),
            Arc::new(HttpReporter::new(&spec.orchestrator_url)),
            &endpoint,
        )
        .map_err(io::Error::other)?;
        Ok(Box::new(ThreadNode {
            uid: spec.uid.clone(),
            node: Some(node),
        }))
    }
}

struct ThreadNode {
    uid: String,
    node: Option<NodeGroup>,
}

impl LaunchedNode for ThreadNode {
    fn uid(&self) -> &str {
        &self.uid
    }

    fn is_alive(&mut self) -> bool {
        self.node.as_ref().is_some_and(|n| !n.is_finished())
    }

    fn drain(&mut self) {
        if let Some(n) = &self.node {
            n.drain();
        }
    }

    fn wait(&mut self, timeout: Duration) -> bool {
        let deadline = Instant::now() + timeout;
        while self.is_alive() {
            if Instant::now() >= deadline {
                return false;
            }
            thread::sleep(Duration::from_millis(20));
        }
        // reap the thread
        self.node.take();
        true
    }

    /// Threads cannot be killed; this drains and joins.
    fn kill(&mut self) {
        if let Some(n) = self.node.take() {
            n.join();
        }
    }
}
