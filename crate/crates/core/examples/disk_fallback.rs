//! With no NodeGroup registered the producers write raw sector files
//! instead of streaming. Once NodeGroups are back the files are replayed
//! through the normal pipeline and give the same output as a live scan.

use std::time::Duration;

use stream4d::cluster::{ClusterConfig, LocalCluster};
use stream4d::producer::ScanSpec;
use stream4d::protocol::DetectorGeometry;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let dir = tempfile::tempdir()?;
    let mut cfg = ClusterConfig::new(2, dir.path());
    cfg.finalize_timeout = Duration::from_secs(1);
    let mut cluster = LocalCluster::start(cfg)?;

    let mut spec = ScanSpec::new(5, 16, 16, DetectorGeometry::new(32, 32)?);
    spec.event_rate = 4.0;
    cluster.register_scan(&spec, None);
    let live = cluster.run_scan(&spec)?.merged()?;
    println!("live: {} frames, {} events", live.frames.len(), live.total_events());

    cluster.stop_groups();
    let fallback = cluster.run_scan(&spec)?;
    println!("no NodeGroups: mode {:?}, {} raw files", fallback.mode, fallback.raw_paths().len());

    cluster.add_group()?;
    cluster.add_group()?;
    cluster.wait_for_groups(2, Duration::from_secs(10))?;
    let replayed = cluster.replay(&spec, &cluster.raw_dir())?.merged()?;
    println!(
        "replayed: {} events, identical to live: {}",
        replayed.total_events(),
        replayed.encode()? == live.encode()?
    );
    cluster.shutdown();
    Ok(())
}
