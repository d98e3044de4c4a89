//! The orchestrator's HTTP API end to end: start a session of in-process
//! NodeGroups, drive one scan through an aggregator, read the scan record,
//! and stop the session.

use std::sync::Arc;
use std::time::Duration;

use stream4d::aggregator::{Aggregator, AggregatorConfig, TcpConnector};
use stream4d::orchestrator::{
    Orchestrator, OrchestratorClient, OrchestratorConfig, ScanDriver, SessionRequest, ThreadLauncher,
};
use stream4d::producer::ScanSpec;
use stream4d::protocol::DetectorGeometry;
use stream4d::statestore::{ClientOptions, ServerOptions, StateClient, StateServer};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let work = tempfile::tempdir()?;
    let state = StateServer::bind("127.0.0.1:0", ServerOptions::default())?;
    let state_addr = state.local_addr().to_string();
    let aggregator = Aggregator::start(
        &AggregatorConfig::default(),
        Arc::new(TcpConnector {
            directory: StateClient::connect(&state_addr, ClientOptions::default())?,
            timeout: Duration::from_secs(10),
        }),
    )?;

    let mut cfg = OrchestratorConfig::new(state_addr, work.path().join("out"));
    cfg.finalize_timeout = Duration::from_secs(1);
    let orch = Orchestrator::start(cfg, Arc::new(ThreadLauncher::default()))?;
    println!("orchestrator at {}", orch.url());
    let client = OrchestratorClient::new(&orch.url());

    let session = client.create_session(&SessionRequest {
        n_nodegroups: 2,
        params: Default::default(),
    })?;
    println!("session {} is {:?} with {:?}", session.session_id, session.status, session.nodegroups);

    let mut spec = ScanSpec::new(42, 16, 16, DetectorGeometry::new(32, 32)?);
    spec.event_rate = 4.0;
    let driver = ScanDriver::new(aggregator.addrs().iter().map(|a| a.to_string()).collect(), work.path().join("raw"));
    client.drive_scan(&spec, None, &driver)?;
    let record = client.wait_for_scan(42, Duration::from_secs(30))?;
    println!(
        "scan {}: {:?}, {} complete, {} incomplete, outputs {:?}",
        record.scan_number, record.mode, record.completed, record.incomplete, record.outputs
    );

    let stopped = client.stop_session(&session.session_id)?;
    println!("session {} is {:?}", stopped.session_id, stopped.status);
    orch.shutdown();
    Ok(())
}
