//! Streams one synthetic scan through producers, the aggregator and two
//! NodeGroups on loopback, then checks the merged output against a
//! single-process count of the same data.

use std::time::Duration;

use stream4d::cluster::{ClusterConfig, LocalCluster};
use stream4d::counting::{count_scan_oracle, CountingParams, ScanShape};
use stream4d::producer::{ScanSpec, SyntheticScan};
use stream4d::protocol::DetectorGeometry;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let dir = tempfile::tempdir()?;
    let mut cfg = ClusterConfig::new(2, dir.path());
    cfg.finalize_timeout = Duration::from_secs(1);
    let cluster = LocalCluster::start(cfg)?;

    let mut spec = ScanSpec::new(1, 32, 32, DetectorGeometry::new(64, 64)?);
    spec.event_rate = 8.0;
    spec.seed = 3;
    let fit = cluster.register_scan(&spec, None);
    println!("noise fit: mean {:.2}, stddev {:.2}", fit.mean, fit.stddev);

    let outcome = cluster.run_scan(&spec)?;
    println!("mode {:?} in {:?}", outcome.mode, outcome.elapsed);
    for r in &outcome.results {
        println!(
            "  {}: {} complete, {} incomplete, {} of {} sectors, {} events",
            r.uid, r.completed, r.incomplete, r.received, r.expected_total, r.events
        );
    }
    let merged = outcome.merged()?;
    let shape = ScanShape {
        scan_number: spec.scan_number,
        scan_rows: spec.scan_rows,
        scan_cols: spec.scan_cols,
    };
    let oracle = count_scan_oracle(&SyntheticScan::new(spec.clone()), shape, &CountingParams::default(), Some(fit), None);
    println!(
        "{} events streamed, {} counted offline, byte-identical: {}",
        merged.total_events(),
        oracle.total_events(),
        merged.encode()? == oracle.encode()?
    );
    cluster.shutdown();
    Ok(())
}
