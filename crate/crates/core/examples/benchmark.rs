//! A small version of the workflow comparison: the file-transfer baseline
//! against streaming, a few trials each, with the report files written to
//! a temporary directory.

use stream4d::bench::{render_table, run_bench, write_report, BenchConfig};
use stream4d::protocol::DetectorGeometry;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let work = tempfile::tempdir()?;
    let mut cfg = BenchConfig::new(work.path());
    cfg.dims = vec![(32, 32), (64, 64)];
    cfg.trials = 4;
    cfg.geometry = DetectorGeometry::new(64, 64)?;
    let samples = run_bench(&cfg, |s| {
        let (r, c) = s.dims();
        println!("{} {r}x{c} trial {}: {:.3} s", s.workflow.as_str(), s.trial, s.total_seconds);
    })?;
    let rows = write_report(&work.path().join("report"), &samples)?;
    print!("{}", render_table(&rows));
    Ok(())
}
