use std::path::Path;
use std::process::Command;
use std::sync::Arc;
use std::time::Duration;

use stream4d::aggregator::{Aggregator, AggregatorConfig, TcpConnector};
use stream4d::counting::{count_scan_oracle, CountingParams, ScanShape};
use stream4d::orchestrator::{
    Orchestrator, OrchestratorClient, OrchestratorConfig, ProcessLauncher, ScanDriver, SessionRequest, SessionStatus,
};
use stream4d::producer::{ScanMode, ScanSpec, SyntheticScan};
use stream4d::protocol::DetectorGeometry;
use stream4d::sparse::SparseScan;
use stream4d::statestore::{ClientOptions, NodeKind, ServerOptions, StateClient, StateServer};

const BIN: &str = env!("CARGO_BIN_EXE_stream4d");

fn stdout(args: &[&str]) -> String {
    let out = Command::new(BIN).args(args).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

#[test]
fn size_subcommand_prints_decimal_gigabytes() {
    assert!(stdout(&["size", "--dims", "128x128"]).contains("(10 GB)"));
    assert!(stdout(&["size", "--dims", "1024x1024"]).contains("(695 GB)"));
    let bad = Command::new(BIN).args(["size", "--dims", "12"]).output().unwrap();
    assert!(!bad.status.success());
}

#[test]
fn count_subcommand_matches_the_library() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("c.s4dc");
    stdout(&[
        "count",
        "--scan",
        "4",
        "--dims",
        "6x5",
        "--frame",
        "16x16",
        "--event-rate",
        "2",
        "--seed",
        "11",
        "--out",
        out.to_str().unwrap(),
    ]);
    let mut spec = ScanSpec::new(4, 6, 5, DetectorGeometry::new(16, 16).unwrap());
    spec.event_rate = 2.0;
    spec.seed = 11;
    let expect = count_scan_oracle(
        &SyntheticScan::new(spec),
        ScanShape {
            scan_number: 4,
            scan_rows: 6,
            scan_cols: 5,
        },
        &CountingParams::default(),
        None,
        None,
    );
    assert_eq!(SparseScan::read(&out).unwrap(), expect);
}

fn wait_for_nodegroups(client: &StateClient, n: usize) -> bool {
    client.wait_for(Duration::from_secs(10), |r| {
        r.map().values().filter(|s| s.kind == NodeKind::NodeGroup).count() == n
    })
}

#[test]
fn process_launched_session_streams_and_drains() {
    let dir = tempfile::tempdir().unwrap();
    let work = dir.path();
    let server = StateServer::bind("127.0.0.1:0", ServerOptions::default()).unwrap();
    let state_addr = server.local_addr().to_string();
    let aggregator = Aggregator::start(
        &AggregatorConfig::default(),
        Arc::new(TcpConnector {
            directory: StateClient::connect(&state_addr, ClientOptions::default()).unwrap(),
            timeout: Duration::from_secs(10),
        }),
    )
    .unwrap();
    let mut cfg = OrchestratorConfig::new(state_addr.clone(), work.join("out"));
    cfg.finalize_timeout = Duration::from_millis(1500);
    cfg.drain_timeout = Duration::from_secs(30);
    let orch = Orchestrator::start(cfg, Arc::new(ProcessLauncher::new(BIN))).unwrap();
    let client = OrchestratorClient::new(&orch.url());

    let session = client
        .create_session(&SessionRequest {
            n_nodegroups: 2,
            params: Default::default(),
        })
        .unwrap();
    assert_eq!(session.status, SessionStatus::Active, "{session:?}");

    let mut spec = ScanSpec::new(7, 8, 8, DetectorGeometry::new(16, 16).unwrap());
    spec.event_rate = 3.0;
    spec.seed = 7;
    let driver = ScanDriver::new(aggregator.addrs().iter().map(|a| a.to_string()).collect(), work.join("raw"));
    let (record, _) = client.drive_scan(&spec, None, &driver).unwrap();
    assert_eq!(record.mode, ScanMode::Streamed);
    let done = client.wait_for_scan(7, Duration::from_secs(30)).unwrap();
    assert_eq!(done.completed, 64);
    assert_eq!(done.incomplete, 0);
    let parts: Vec<SparseScan> = done.outputs.values().map(|p| SparseScan::read(p).unwrap()).collect();
    let merged = SparseScan::merge(parts).unwrap();
    let oracle = count_scan_oracle(
        &SyntheticScan::new(spec.clone()),
        ScanShape {
            scan_number: 7,
            scan_rows: 8,
            scan_cols: 8,
        },
        &CountingParams::default(),
        done.fit,
        None,
    );
    assert_eq!(merged.encode().unwrap(), oracle.encode().unwrap());

    let stopped = client.stop_session(&session.session_id).unwrap();
    assert_eq!(stopped.status, SessionStatus::Ended, "{stopped:?}");
    let watch = StateClient::connect(&state_addr, ClientOptions::default()).unwrap();
    assert!(wait_for_nodegroups(&watch, 0), "child NodeGroups still registered");
    assert!(done.outputs.values().all(|p| Path::new(p).exists()));
    orch.shutdown();
}
