use std::io::Read;
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use clap::{Args, Parser, Subcommand, ValueEnum};

use stream4d::aggregator::{Aggregator, AggregatorConfig, TcpConnector};
use stream4d::bench::{self, BenchConfig, BenchMode};
use stream4d::consumer::{
    DirCatalog, HttpCatalog, HttpReporter, NoReporter, NodeGroup, NodeGroupConfig, ResultReporter, ScanCatalog,
    ScanEntry,
};
use stream4d::counting::{calibrate, count_scan_oracle, CountingParams, ScanShape};
use stream4d::orchestrator::{
    Launcher, Orchestrator, OrchestratorClient, OrchestratorConfig, ProcessLauncher, ScanDriver, ThreadLauncher,
};
use stream4d::producer::{raw_files, run_sector, RawScan, ScanSpec, SectorConfig, SyntheticScan};
use stream4d::protocol::{format_decimal_gb, scan_raw_size, DetectorGeometry, N_SECTORS};
use stream4d::sparse::write_sparse;
use stream4d::statestore::{ClientOptions, ServerOptions, StateClient, StateServer};
use stream4d::transport::{PullSocket, DEFAULT_HWM};

type BoxError = Box<dyn std::error::Error + Send + Sync>;

#[derive(Parser)]
#[command(name = "stream4d", version, about = "Streaming detector data pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run the membership store.
    StateServer {
        #[arg(long, default_value = "127.0.0.1:7500")]
        bind: String,
        #[arg(long, default_value_t = stream4d::statestore::DEFAULT_TTL_MS)]
        ttl_ms: u64,
    },
    /// Run the four-thread aggregator.
    Aggregate {
        #[arg(long)]
        state: String,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        /// Sector k listens on base-port + k; 0 picks free ports.
        #[arg(long, default_value_t = 7510)]
        base_port: u16,
        #[arg(long, default_value_t = stream4d::producer::DEFAULT_PRODUCER_THREADS)]
        upstream_threads: usize,
        #[arg(long)]
        metrics: Option<String>,
    },
    /// Send a synthetic scan from the sector producers.
    Produce(ProduceArgs),
    /// Run one NodeGroup.
    Consume(ConsumeArgs),
    /// Count a scan offline with the single-threaded reference counter.
    Count(CountArgs),
    /// Serve the session and scan API.
    Orchestrate(OrchestrateArgs),
    /// Time streaming against a file-transfer baseline.
    Bench {
        #[command(subcommand)]
        command: BenchCmd,
    },
    /// Print the raw size of a scan.
    Size {
        #[arg(long, value_parser = parse_dims)]
        dims: (u32, u32),
        #[arg(long, value_parser = parse_dims, default_value = "576x576")]
        frame: (u32, u32),
    },
}

#[derive(Args)]
struct CountingArgs {
    #[arg(long, default_value_t = CountingParams::default().n_sigma)]
    n_sigma: f64,
    #[arg(long, default_value_t = CountingParams::default().sample_count)]
    sample_count: usize,
}

impl CountingArgs {
    fn params(&self) -> CountingParams {
        CountingParams {
            n_sigma: self.n_sigma,
            sample_count: self.sample_count,
            ..Default::default()
        }
    }
}

#[derive(Args)]
struct ScanArgs {
    #[arg(long)]
    scan: u32,
    #[arg(long, value_parser = parse_dims)]
    dims: (u32, u32),
    #[arg(long, value_parser = parse_dims, default_value = "576x576")]
    frame: (u32, u32),
    #[arg(long, default_value_t = 0.0)]
    event_rate: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0.0)]
    loss: f64,
}

impl ScanArgs {
    fn spec(&self) -> Result<ScanSpec, BoxError> {
        let mut s = ScanSpec::new(self.scan, self.dims.0, self.dims.1, DetectorGeometry::new(self.frame.0, self.frame.1)?);
        s.event_rate = self.event_rate;
        s.seed = self.seed;
        s.loss_probability = self.loss;
        s.validate()?;
        Ok(s)
    }
}

#[derive(Args)]
struct ProduceArgs {
    #[command(flatten)]
    scan: ScanArgs,
    /// Four aggregator listeners, comma separated, in sector order.
    #[arg(long, value_delimiter = ',', num_args = 1..)]
    aggregator: Vec<String>,
    /// Announce through the orchestrator, which pins the membership.
    #[arg(long, conflicts_with = "state")]
    orchestrator: Option<String>,
    /// Read the membership from the store instead.
    #[arg(long)]
    state: Option<String>,
    /// Publish the scan and its calibration here for NodeGroups.
    #[arg(long)]
    catalog: Option<PathBuf>,
    /// Run only this sector; all four otherwise.
    #[arg(long)]
    sector: Option<u16>,
    #[arg(long, default_value_t = stream4d::producer::DEFAULT_PRODUCER_THREADS)]
    threads: usize,
    #[arg(long, default_value = "raw")]
    fallback_dir: PathBuf,
    #[arg(long)]
    sync_fallback: bool,
    #[command(flatten)]
    counting: CountingArgs,
}

#[derive(Args)]
struct ConsumeArgs {
    #[arg(long)]
    uid: String,
    #[arg(long)]
    state: String,
    #[arg(long, default_value = "127.0.0.1:0")]
    bind: String,
    #[arg(long)]
    out: PathBuf,
    /// Scan lookups and result reports go here.
    #[arg(long, conflicts_with = "catalog")]
    orchestrator: Option<String>,
    /// Directory of scan entries, when running without an orchestrator.
    #[arg(long)]
    catalog: Option<PathBuf>,
    #[command(flatten)]
    counting: CountingArgs,
    #[arg(long, default_value_t = 5000)]
    finalize_timeout_ms: u64,
    #[arg(long)]
    workers: Option<usize>,
    /// Drain and exit when stdin closes.
    #[arg(long)]
    drain_on_stdin_eof: bool,
}

#[derive(Args)]
struct CountArgs {
    #[command(flatten)]
    scan: ScanArgs,
    /// Raw fallback directory; the synthetic generator is used otherwise.
    #[arg(long)]
    raw: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    counting: CountingArgs,
}

#[derive(Clone, Copy, ValueEnum)]
enum LauncherKind {
    Process,
    Thread,
}

#[derive(Args)]
struct OrchestrateArgs {
    #[arg(long)]
    state: String,
    #[arg(long, default_value = "127.0.0.1:8000")]
    bind: String,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    record_log: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "process")]
    launcher: LauncherKind,
    /// Aggregator metrics URL for throughput events.
    #[arg(long)]
    metrics_url: Option<String>,
    #[arg(long, default_value_t = 10_000)]
    registration_deadline_ms: u64,
    #[arg(long, default_value_t = 5000)]
    finalize_timeout_ms: u64,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Both,
    Streaming,
    FileTransfer,
}

#[derive(Subcommand)]
enum BenchCmd {
    /// Run trials and write table.txt, samples.csv and histograms.csv.
    Run {
        #[arg(long, value_delimiter = ',', value_parser = parse_dims, default_value = "64x64,128x128")]
        dims: Vec<(u32, u32)>,
        #[arg(long, default_value_t = 10)]
        trials: usize,
        #[arg(long, value_enum, default_value = "both")]
        mode: ModeArg,
        #[arg(long, default_value = "report")]
        out: PathBuf,
        /// Scratch space; defaults to `<out>/work`.
        #[arg(long)]
        work_dir: Option<PathBuf>,
        /// Destination of the baseline's copy step.
        #[arg(long)]
        remote_dir: Option<PathBuf>,
        #[arg(long, value_parser = parse_dims, default_value = "128x128")]
        frame: (u32, u32),
        #[arg(long, default_value_t = 10.0)]
        event_rate: f64,
        #[arg(long, default_value_t = 2)]
        groups: usize,
    },
}

fn parse_dims(s: &str) -> Result<(u32, u32), String> {
    let (r, c) = s.split_once(['x', 'X']).ok_or_else(|| format!("expected RxC, got {s:?}"))?;
    let parse = |v: &str| v.trim().parse::<u32>().map_err(|e| format!("{v:?}: {e}"));
    Ok((parse(r)?, parse(c)?))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse().command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn park_forever() -> ! {
    loop {
        thread::park();
    }
}

fn run(cmd: Cmd) -> Result<(), BoxError> {
    match cmd {
        Cmd::StateServer { bind, ttl_ms } => {
            let server = StateServer::bind(
                &bind,
                ServerOptions {
                    ttl_ms,
                    ..Default::default()
                },
            )?;
            println!("{}", server.local_addr());
            park_forever()
        }
        Cmd::Aggregate {
            state,
            host,
            base_port,
            upstream_threads,
            metrics,
        } => {
            let directory = StateClient::connect(&state, ClientOptions::default())?;
            let connector = Arc::new(TcpConnector {
                directory,
                timeout: Duration::from_secs(10),
            });
            let agg = Aggregator::start(
                &AggregatorConfig {
                    host,
                    base_port,
                    upstream_threads,
                    hwm: DEFAULT_HWM,
                    metrics_addr: metrics,
                },
                connector,
            )?;
            let addrs: Vec<String> = agg.addrs().iter().map(|a| a.to_string()).collect();
            println!("{}", addrs.join(","));
            if let Some(m) = agg.metrics_addr() {
                println!("metrics http://{m}/metrics");
            }
            park_forever()
        }
        Cmd::Produce(args) => produce(args),
        Cmd::Consume(args) => consume(args),
        Cmd::Count(args) => count(args),
        Cmd::Orchestrate(args) => {
            let mut cfg = OrchestratorConfig::new(args.state, args.out);
            cfg.bind = args.bind;
            cfg.record_log = args.record_log;
            cfg.metrics_url = args.metrics_url;
            cfg.registration_deadline = Duration::from_millis(args.registration_deadline_ms);
            cfg.finalize_timeout = Duration::from_millis(args.finalize_timeout_ms);
            let launcher: Arc<dyn Launcher> = match args.launcher {
                LauncherKind::Process => Arc::new(ProcessLauncher::current_exe()?),
                LauncherKind::Thread => Arc::new(ThreadLauncher::default()),
            };
            let orch = Orchestrator::start(cfg, launcher)?;
            println!("{}", orch.url());
            orch.run_until_ctrl_c();
            Ok(())
        }
        Cmd::Bench {
            command:
                BenchCmd::Run {
                    dims,
                    trials,
                    mode,
                    out,
                    work_dir,
                    remote_dir,
                    frame,
                    event_rate,
                    groups,
                },
        } => {
            let mut cfg = BenchConfig::new(work_dir.unwrap_or_else(|| out.join("work")));
            cfg.dims = dims;
            cfg.trials = trials;
            cfg.mode = match mode {
                ModeArg::Both => BenchMode::Both,
                ModeArg::Streaming => BenchMode::Streaming,
                ModeArg::FileTransfer => BenchMode::FileTransfer,
            };
            cfg.geometry = DetectorGeometry::new(frame.0, frame.1)?;
            cfg.event_rate = event_rate;
            cfg.n_groups = groups;
            cfg.remote_dir = remote_dir;
            let samples = bench::run_bench(&cfg, |s| {
                log::info!(
                    "{} {}x{} trial {}: {:.3} s{}",
                    s.workflow.as_str(),
                    s.scan_rows,
                    s.scan_cols,
                    s.trial,
                    s.total_seconds,
                    if s.lossy { " (lossy)" } else { "" }
                )
            })?;
            let rows = bench::write_report(&out, &samples)?;
            bench::write_samples_json(&out.join("samples.jsonl"), &samples)?;
            print!("{}", bench::render_table(&rows));
            let _ = std::fs::remove_dir_all(&cfg.work_dir);
            Ok(())
        }
        Cmd::Size { dims, frame } => {
            let bytes = scan_raw_size(dims.0, dims.1, &DetectorGeometry::new(frame.0, frame.1)?);
            println!("{bytes} bytes ({})", format_decimal_gb(bytes));
            Ok(())
        }
    }
}

fn produce(args: ProduceArgs) -> Result<(), BoxError> {
    let spec = args.scan.spec()?;
    let sectors: Vec<u16> = match args.sector {
        Some(k) if (k as usize) < N_SECTORS => vec![k],
        Some(k) => return Err(format!("sector {k} out of range").into()),
        None => (0..N_SECTORS as u16).collect(),
    };
    let aggregator_for = |k: u16| -> Result<String, BoxError> {
        match args.aggregator.len() {
            1 if args.sector.is_some() => Ok(args.aggregator[0].clone()),
            n if n == N_SECTORS => Ok(args.aggregator[k as usize].clone()),
            _ => Err(format!("need {N_SECTORS} aggregator addresses").into()),
        }
    };

    if let Some(url) = &args.orchestrator {
        if args.sector.is_some() {
            return Err("--orchestrator drives all four sectors; drop --sector".into());
        }
        let client = OrchestratorClient::new(url);
        let mut driver = ScanDriver::new(
            (0..N_SECTORS as u16).map(aggregator_for).collect::<Result<_, _>>()?,
            &args.fallback_dir,
        );
        driver.producer_threads = args.threads;
        driver.sync_fallback = args.sync_fallback;
        let (record, reports) = client.drive_scan(&spec, None, &driver)?;
        for r in &reports {
            println!("{}", serde_json::to_string(r)?);
        }
        println!("{}", serde_json::to_string(&record)?);
        return Ok(());
    }

    if let Some(dir) = &args.catalog {
        let fit = calibrate(&SyntheticScan::new(spec.clone()), &args.counting.params(), None);
        DirCatalog::new(dir).insert(&ScanEntry {
            spec: spec.clone(),
            fit: Some(fit),
        })?;
    }
    let uids = match &args.state {
        Some(addr) => {
            let client = StateClient::connect(
                addr,
                ClientOptions {
                    heartbeat: Duration::ZERO,
                    ..Default::default()
                },
            )?;
            client.wait_for_sequence(1, Duration::from_secs(2));
            client.active_nodegroups()
        }
        None => Vec::new(),
    };
    if uids.is_empty() {
        log::warn!("no active NodeGroups; scan {} goes to {}", spec.scan_number, args.fallback_dir.display());
    }
    let reports = thread::scope(|s| {
        let handles: Vec<_> = sectors
            .iter()
            .map(|&k| {
                let cfg = aggregator_for(k).map(|aggregator| SectorConfig {
                    spec: spec.clone(),
                    sector_index: k,
                    threads: args.threads,
                    aggregator,
                    fallback_dir: args.fallback_dir.clone(),
                    connect_timeout: Duration::from_secs(10),
                    sync_fallback: args.sync_fallback,
                });
                let uids = &uids;
                s.spawn(move || -> Result<_, BoxError> { Ok(run_sector(&cfg?, uids)?) })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().unwrap_or_else(|_| Err("producer panicked".into())))
            .collect::<Result<Vec<_>, _>>()
    })?;
    for r in &reports {
        println!("{}", serde_json::to_string(r)?);
    }
    Ok(())
}

fn consume(args: ConsumeArgs) -> Result<(), BoxError> {
    let socket = PullSocket::bind(&args.bind, DEFAULT_HWM)?;
    let endpoint = socket.local_addr().to_string();
    let (catalog, reporter): (Arc<dyn ScanCatalog>, Arc<dyn ResultReporter>) = match (&args.orchestrator, &args.catalog) {
        (Some(url), _) => (Arc::new(HttpCatalog::new(url)), Arc::new(HttpReporter::new(url))),
        (None, Some(dir)) => (Arc::new(DirCatalog::new(dir)), Arc::new(NoReporter)),
        (None, None) => return Err("need --orchestrator or --catalog".into()),
    };
    let state = StateClient::connect(&args.state, ClientOptions::default())?;
    let mut cfg = NodeGroupConfig::new(args.uid, args.out);
    cfg.params = args.counting.params();
    cfg.finalize_timeout = Duration::from_millis(args.finalize_timeout_ms);
    if let Some(w) = args.workers {
        cfg.workers = w;
    }
    let node = NodeGroup::spawn(cfg, Box::new(socket), catalog, Some(Arc::new(state)), reporter, &endpoint)?;
    log::info!("nodegroup {} receiving on {endpoint}", node.uid());
    if args.drain_on_stdin_eof {
        let results = node.results().clone();
        // results are printed as they arrive; stdin closing means drain
        let watcher_done = {
            let (tx, rx) = crossbeam_channel::bounded::<()>(1);
            thread::Builder::new().name("stdin-watch".into()).spawn(move || {
                let mut sink = [0u8; 256];
                let mut stdin = std::io::stdin();
                while matches!(stdin.read(&mut sink), Ok(n) if n > 0) {}
                let _ = tx.send(());
            })?;
            rx
        };
        loop {
            crossbeam_channel::select! {
                recv(results) -> r => match r {
                    Ok(r) => println!("{}", serde_json::to_string(&r)?),
                    Err(_) => break,
                },
                recv(watcher_done) -> _ => break,
            }
        }
        for r in node.join() {
            log::debug!("scan {} closed", r.scan_number);
        }
        return Ok(());
    }
    for r in node.results().iter() {
        println!("{}", serde_json::to_string(&r)?);
    }
    Ok(())
}

fn count(args: CountArgs) -> Result<(), BoxError> {
    let spec = args.scan.spec()?;
    let params = args.counting.params();
    let shape = ScanShape {
        scan_number: spec.scan_number,
        scan_rows: spec.scan_rows,
        scan_cols: spec.scan_cols,
    };
    let scan = match &args.raw {
        Some(dir) => {
            let source = RawScan::load(&raw_files(dir, spec.scan_number)?, spec.geometry(), spec.n_frames())?;
            count_scan_oracle(&source, shape, &params, None, None)
        }
        None => count_scan_oracle(&SyntheticScan::new(spec.clone()), shape, &params, None, None),
    };
    let scan = write_sparse(&args.out, scan, 0..spec.n_frames())?;
    println!(
        "scan {}: {} frames, {} events -> {}",
        scan.scan_number,
        scan.frames.len(),
        scan.total_events(),
        args.out.display()
    );
    Ok(())
}
