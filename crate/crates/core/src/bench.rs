//! Streaming versus file-transfer timing on identical synthetic scans.
//!
//! The baseline does what a file workflow does: producers write raw sector
//! files locally, the files are copied to a second directory, read back,
//! counted by the single-threaded oracle and written as sparse output. The
//! streaming trial runs the same scan through a [`LocalCluster`]. Both use
//! the same shared noise fit, so their outputs are byte-identical for
//! loss-free specs.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{self, Write as _};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cluster::{ClusterConfig, ClusterError, LocalCluster};
use crate::counting::{calibrate, count_scan_oracle, CountingParams, NoiseFit, ScanShape};
use crate::producer::{
    run_sector, ProducerError, RawScan, ScanMode, ScanSpec, SectorConfig, SyntheticScan, DEFAULT_PRODUCER_THREADS,
};
use crate::protocol::{scan_raw_size, DetectorGeometry, N_SECTORS, SECTOR_HEADER_LEN};
use crate::sparse::{write_sparse, SparseError, SparseScan};

/// Minimum sample count for the outlier rule.
pub const MIN_OUTLIER_SAMPLES: usize = 4;
pub const IQR_FENCE: f64 = 1.5;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("not enough free space in {dir}: need {required} bytes, {available} available")]
    InsufficientSpace { dir: PathBuf, required: u64, available: u64 },
    #[error("i/o on {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error(transparent)]
    Producer(#[from] ProducerError),
    #[error(transparent)]
    Cluster(#[from] ClusterError),
    #[error(transparent)]
    Sparse(#[from] SparseError),
    #[error("{0}")]
    Invalid(String),
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> BenchError + '_ {
    move |source| BenchError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Workflow {
    FileTransfer,
    Streaming,
}

impl Workflow {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::FileTransfer => "file_transfer",
            Self::Streaming => "streaming",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Phase {
    pub name: String,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingSample {
    pub workflow: Workflow,
    pub scan_rows: u32,
    pub scan_cols: u32,
    pub frame_rows: u32,
    pub frame_cols: u32,
    pub trial: usize,
    /// Sum of `phases`.
    pub total_seconds: f64,
    pub phases: Vec<Phase>,
    pub events: u64,
    /// Lossy samples are reported but kept out of the means.
    pub lossy: bool,
}

impl TimingSample {
    pub fn dims(&self) -> (u32, u32) {
        (self.scan_rows, self.scan_cols)
    }

    pub fn phase(&self, name: &str) -> Option<f64> {
        self.phases.iter().find(|p| p.name == name).map(|p| p.seconds)
    }

    fn new(workflow: Workflow, spec: &ScanSpec, trial: usize, phases: Vec<Phase>, events: u64, lossy: bool) -> Self {
        Self {
            workflow,
            scan_rows: spec.scan_rows,
            scan_cols: spec.scan_cols,
            frame_rows: spec.frame_rows,
            frame_cols: spec.frame_cols,
            trial,
            total_seconds: phases.iter().map(|p| p.seconds).sum(),
            phases,
            events,
            lossy,
        }
    }
}

/// Quantile with linear interpolation between order statistics, the
/// position being `q·(n−1)`. `sorted` must be ascending and non-empty.
pub fn quantile_linear(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// `(Q1 − 1.5·IQR, Q3 + 1.5·IQR)`.
pub fn iqr_fences(values: &[f64]) -> Option<(f64, f64)> {
    if values.len() < MIN_OUTLIER_SAMPLES {
        return None;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let q1 = quantile_linear(&sorted, 0.25);
    let q3 = quantile_linear(&sorted, 0.75);
    let iqr = q3 - q1;
    Some((q1 - IQR_FENCE * iqr, q3 + IQR_FENCE * iqr))
}

/// Applies the fence rule until nothing more is dropped, so filtering an
/// already filtered set is a no-op. Keeps input order.
fn retain_inliers<T: Clone>(items: &[T], key: impl Fn(&T) -> f64) -> Vec<T> {
    let mut kept = items.to_vec();
    while let Some((lo, hi)) = iqr_fences(&kept.iter().map(&key).collect::<Vec<_>>()) {
        let before = kept.len();
        kept.retain(|t| (lo..=hi).contains(&key(t)));
        if kept.len() == before {
            break;
        }
    }
    kept
}

/// Drops values outside the IQR fences, repeating until stable. Fewer than
/// four values are returned unfiltered.
pub fn remove_outliers(values: &[f64]) -> Vec<f64> {
    if !values.is_empty() && values.len() < MIN_OUTLIER_SAMPLES {
        log::warn!("{} samples is too few for the outlier rule; none removed", values.len());
    }
    retain_inliers(values, |v| *v)
}

/// The outlier rule applied to sample totals.
pub fn filter_samples(samples: &[TimingSample]) -> Vec<TimingSample> {
    retain_inliers(samples, |s| s.total_seconds)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stats {
    pub mean: f64,
    /// Population standard deviation; zero for one sample.
    pub stddev: f64,
    pub n: usize,
    pub outliers: usize,
    pub lossy: usize,
}

impl Stats {
    pub fn cv(&self) -> f64 {
        if self.mean == 0.0 {
            0.0
        } else {
            self.stddev / self.mean
        }
    }
}

/// Mean and spread of loss-free samples after outlier removal.
pub fn summarize(samples: &[TimingSample]) -> Option<Stats> {
    let clean: Vec<TimingSample> = samples.iter().filter(|s| !s.lossy).cloned().collect();
    let kept = filter_samples(&clean);
    if kept.is_empty() {
        return None;
    }
    let n = kept.len() as f64;
    let mean = kept.iter().map(|s| s.total_seconds).sum::<f64>() / n;
    let var = kept.iter().map(|s| (s.total_seconds - mean).powi(2)).sum::<f64>() / n;
    Some(Stats {
        mean,
        stddev: var.sqrt(),
        n: kept.len(),
        outliers: clean.len() - kept.len(),
        lossy: samples.len() - clean.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub scan_rows: u32,
    pub scan_cols: u32,
    pub size_bytes: u64,
    pub file_transfer: Option<Stats>,
    pub streaming: Option<Stats>,
    /// μ_ft / μ_s.
    pub enhancement: Option<f64>,
}

pub fn enhancement(file_transfer_mean: f64, streaming_mean: f64) -> f64 {
    file_transfer_mean / streaming_mean
}

/// One row per scan size, ordered by size.
pub fn compare(samples: &[TimingSample]) -> Vec<ComparisonRow> {
    let mut groups: BTreeMap<(u32, u32, u32, u32), Vec<TimingSample>> = BTreeMap::new();
    for s in samples {
        groups
            .entry((s.scan_rows, s.scan_cols, s.frame_rows, s.frame_cols))
            .or_default()
            .push(s.clone());
    }
    groups
        .into_iter()
        .map(|((rows, cols, fr, fc), group)| {
            let of = |w: Workflow| {
                let subset: Vec<TimingSample> = group.iter().filter(|s| s.workflow == w).cloned().collect();
                summarize(&subset)
            };
            let file_transfer = of(Workflow::FileTransfer);
            let streaming = of(Workflow::Streaming);
            let size_bytes = DetectorGeometry::new(fr, fc).map_or(0, |g| scan_raw_size(rows, cols, &g));
            ComparisonRow {
                scan_rows: rows,
                scan_cols: cols,
                size_bytes,
                enhancement: match (file_transfer, streaming) {
                    (Some(f), Some(s)) if s.mean > 0.0 => Some(enhancement(f.mean, s.mean)),
                    _ => None,
                },
                file_transfer,
                streaming,
            }
        })
        .collect()
}

fn fmt_stats(s: &Option<Stats>) -> String {
    match s {
        Some(s) => format!("{:.3} ± {:.3} (n={})", s.mean, s.stddev, s.n),
        None => "-".into(),
    }
}

fn fmt_size(bytes: u64) -> String {
    if bytes >= 1_000_000_000 {
        format!("{:.2} GB", bytes as f64 / 1e9)
    } else {
        format!("{:.1} MB", bytes as f64 / 1e6)
    }
}

/// Plain-text comparison table.
pub fn render_table(rows: &[ComparisonRow]) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<10} {:>10}  {:<28} {:<28} {:>11}",
        "dims", "size", "file transfer (s)", "streaming (s)", "enhancement"
    );
    for r in rows {
        let _ = writeln!(
            out,
            "{:<10} {:>10}  {:<28} {:<28} {:>11}",
            format!("{}x{}", r.scan_rows, r.scan_cols),
            fmt_size(r.size_bytes),
            fmt_stats(&r.file_transfer),
            fmt_stats(&r.streaming),
            r.enhancement.map_or("-".into(), |e| format!("{e:.1}")),
        );
    }
    out
}

/// `samples.csv`: every sample with its phases, outliers and lossy ones included.
pub fn samples_csv(samples: &[TimingSample]) -> String {
    let mut out = String::from("workflow,dims,frame_dims,trial,total_seconds,lossy,events,phases\n");
    for s in samples {
        let phases: Vec<String> = s.phases.iter().map(|p| format!("{}={:.6}", p.name, p.seconds)).collect();
        let _ = writeln!(
            out,
            "{},{}x{},{}x{},{},{:.6},{},{},{}",
            s.workflow.as_str(),
            s.scan_rows,
            s.scan_cols,
            s.frame_rows,
            s.frame_cols,
            s.trial,
            s.total_seconds,
            s.lossy,
            s.events,
            phases.join(";")
        );
    }
    out
}

/// `histograms.csv`: the samples that enter the means, one per line.
pub fn histogram_csv(samples: &[TimingSample]) -> String {
    let mut out = String::from("workflow,dims,seconds\n");
    let mut groups: BTreeMap<(Workflow, u32, u32), Vec<TimingSample>> = BTreeMap::new();
    for s in samples.iter().filter(|s| !s.lossy) {
        groups.entry((s.workflow, s.scan_rows, s.scan_cols)).or_default().push(s.clone());
    }
    for ((w, r, c), group) in groups {
        for s in filter_samples(&group) {
            let _ = writeln!(out, "{},{r}x{c},{:.6}", w.as_str(), s.total_seconds);
        }
    }
    out
}

/// Writes `table.txt`, `samples.csv` and `histograms.csv` into `dir`.
pub fn write_report(dir: &Path, samples: &[TimingSample]) -> Result<Vec<ComparisonRow>, BenchError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let rows = compare(samples);
    for (name, text) in [
        ("table.txt", render_table(&rows)),
        ("samples.csv", samples_csv(samples)),
        ("histograms.csv", histogram_csv(samples)),
    ] {
        let path = dir.join(name);
        fs::write(&path, text).map_err(io_err(&path))?;
    }
    Ok(rows)
}

/// The two directories of the file baseline.
#[derive(Debug, Clone)]
pub struct BaselineConfig {
    pub local_dir: PathBuf,
    /// Ideally on another filesystem.
    pub remote_dir: PathBuf,
    pub producer_threads: usize,
    pub params: CountingParams,
    /// Remove the trial's files afterwards.
    pub cleanup: bool,
}

impl BaselineConfig {
    pub fn new(local_dir: impl Into<PathBuf>, remote_dir: impl Into<PathBuf>) -> Self {
        Self {
            local_dir: local_dir.into(),
            remote_dir: remote_dir.into(),
            producer_threads: DEFAULT_PRODUCER_THREADS,
            params: CountingParams::default(),
            cleanup: true,
        }
    }
}

/// Bytes the raw files of `spec` occupy on disk.
pub fn raw_file_bytes(spec: &ScanSpec) -> u64 {
    spec.scan_rows as u64 * spec.scan_cols as u64 * N_SECTORS as u64 * (SECTOR_HEADER_LEN as u64 + spec.geometry().sector_bytes() as u64)
}

#[cfg(unix)]
pub fn available_bytes(dir: &Path) -> Option<u64> {
    use std::os::unix::ffi::OsStrExt;
    let c = std::ffi::CString::new(dir.as_os_str().as_bytes()).ok()?;
    let mut st: libc::statvfs = unsafe { std::mem::zeroed() };
    // SAFETY: `c` is a valid NUL-terminated path and `st` a writable statvfs.
    let rc = unsafe { libc::statvfs(c.as_ptr(), &mut st) };
    (rc == 0).then(|| st.f_bavail as u64 * st.f_frsize as u64)
}

#[cfg(not(unix))]
pub fn available_bytes(_dir: &Path) -> Option<u64> {
    None
}

fn ensure_space(dir: &Path, required: u64) -> Result<(), BenchError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    match available_bytes(dir) {
        Some(available) if available < required => Err(BenchError::InsufficientSpace {
            dir: dir.to_path_buf(),
            required,
            available,
        }),
        _ => Ok(()),
    }
}

fn timed<T>(name: &str, phases: &mut Vec<Phase>, f: impl FnOnce() -> Result<T, BenchError>) -> Result<T, BenchError> {
    let start = Instant::now();
    let out = f()?;
    phases.push(Phase {
        name: name.into(),
        seconds: start.elapsed().as_secs_f64(),
    });
    Ok(out)
}

fn copy_synced(from: &Path, to: &Path) -> Result<(), BenchError> {
    fs::copy(from, to).map_err(io_err(to))?;
    File::open(to).and_then(|f| f.sync_all()).map_err(io_err(to))
}

/// One file-transfer trial. Returns the timing and the sparse output.
///
/// Phases: `write` (raw files, fsynced), `transfer` (byte copy to the
/// remote directory, fsynced), `read`, `count`, `output`.
pub fn run_file_baseline(
    spec: &ScanSpec,
    fit: NoiseFit,
    cfg: &BaselineConfig,
    trial: usize,
) -> Result<(TimingSample, SparseScan), BenchError> {
    let raw = raw_file_bytes(spec);
    ensure_space(&cfg.local_dir, raw)?;
    ensure_space(&cfg.remote_dir, raw + raw / 4)?;
    let geometry = spec.geometry();
    let mut phases = Vec::new();

    let local = timed("write", &mut phases, || {
        let paths = (0..N_SECTORS)
            .map(|k| {
                let sector = SectorConfig {
                    spec: spec.clone(),
                    sector_index: k as u16,
                    threads: cfg.producer_threads,
                    aggregator: String::new(),
                    fallback_dir: cfg.local_dir.clone(),
                    connect_timeout: Duration::ZERO,
                    sync_fallback: true,
                };
                run_sector(&sector, &[]).map(|r| r.raw_paths)
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(paths.into_iter().flatten().collect::<Vec<PathBuf>>())
    })?;

    let remote = timed("transfer", &mut phases, || {
        local
            .iter()
            .map(|p| {
                let dst = cfg.remote_dir.join(p.file_name().expect("raw files have names"));
                copy_synced(p, &dst).map(|_| dst)
            })
            .collect::<Result<Vec<_>, _>>()
    })?;

    let loaded = timed("read", &mut phases, || Ok(RawScan::load(&remote, geometry, spec.n_frames())?))?;

    let counted = timed("count", &mut phases, || {
        Ok(count_scan_oracle(
            &loaded,
            ScanShape {
                scan_number: spec.scan_number,
                scan_rows: spec.scan_rows,
                scan_cols: spec.scan_cols,
            },
            &cfg.params,
            Some(fit),
            None,
        ))
    })?;
    drop(loaded);

    let out_path = cfg.remote_dir.join(format!("scan{}_baseline.s4dc", spec.scan_number));
    let output = timed("output", &mut phases, || {
        let scan = write_sparse(&out_path, counted, 0..spec.n_frames())?;
        File::open(&out_path).and_then(|f| f.sync_all()).map_err(io_err(&out_path))?;
        Ok(scan)
    })?;

    if cfg.cleanup {
        for p in local.iter().chain(&remote).chain([&out_path]) {
            let _ = fs::remove_file(p);
        }
    }
    let lossy = output.frames.iter().any(|f| f.sector_mask != 0b1111);
    let events = output.total_events() as u64;
    Ok((TimingSample::new(Workflow::FileTransfer, spec, trial, phases, events, lossy), output))
}

/// One streaming trial on a running cluster: first producer message to
/// last NodeGroup file close. The scan must not have been run before on
/// this cluster.
pub fn run_streaming_trial(
    cluster: &LocalCluster,
    spec: &ScanSpec,
    fit: NoiseFit,
    trial: usize,
    cleanup: bool,
) -> Result<(TimingSample, SparseScan), BenchError> {
    // a group still stepping back to idle from the last scan would be left out
    cluster.wait_for_groups(cluster.n_groups(), Duration::from_secs(30))?;
    cluster.register_scan(spec, Some(fit));
    let outcome = cluster.run_scan(spec)?;
    let merged = outcome.merged()?;
    let lossy = outcome.mode != ScanMode::Streamed || outcome.lossy() || outcome.incomplete() > 0;
    if cleanup {
        for r in &outcome.results {
            if let Some(p) = &r.path {
                let _ = fs::remove_file(p);
            }
        }
    }
    let phases = vec![Phase {
        name: "stream_count".into(),
        seconds: outcome.elapsed.as_secs_f64(),
    }];
    let events = merged.total_events() as u64;
    Ok((TimingSample::new(Workflow::Streaming, spec, trial, phases, events, lossy), merged))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BenchMode {
    Both,
    Streaming,
    FileTransfer,
}

impl BenchMode {
    fn runs(self, w: Workflow) -> bool {
        match self {
            Self::Both => true,
            Self::Streaming => w == Workflow::Streaming,
            Self::FileTransfer => w == Workflow::FileTransfer,
        }
    }
}

#[derive(Debug, Clone)]
pub struct BenchConfig {
    pub dims: Vec<(u32, u32)>,
    pub trials: usize,
    pub mode: BenchMode,
    pub geometry: DetectorGeometry,
    pub event_rate: f64,
    pub n_groups: usize,
    /// Scratch space; `local` and `remote` baseline directories and the
    /// cluster's work directory live here unless overridden.
    pub work_dir: PathBuf,
    pub remote_dir: Option<PathBuf>,
    pub seed: u64,
    pub params: CountingParams,
}

impl BenchConfig {
    pub fn new(work_dir: impl Into<PathBuf>) -> Self {
        Self {
            dims: vec![(64, 64), (128, 128)],
            trials: 5,
            mode: BenchMode::Both,
            geometry: DetectorGeometry::new(128, 128).expect("valid geometry"),
            event_rate: 10.0,
            n_groups: 2,
            work_dir: work_dir.into(),
            remote_dir: None,
            seed: 1,
            params: CountingParams::default(),
        }
    }

    pub fn spec(&self, dims: (u32, u32), scan_number: u32) -> ScanSpec {
        let mut s = ScanSpec::new(scan_number, dims.0, dims.1, self.geometry);
        s.event_rate = self.event_rate;
        s.seed = self.seed;
        s
    }
}

/// Flushes dirty pages and deleted-file work left by the previous trial so
/// it is not billed to the next one.
fn settle_disk() {
    unsafe { libc::sync() };
}

/// Runs every trial of every size, alternating workflows within a trial.
/// `progress` sees each sample as it completes.
pub fn run_bench(cfg: &BenchConfig, mut progress: impl FnMut(&TimingSample)) -> Result<Vec<TimingSample>, BenchError> {
    if cfg.trials == 0 || cfg.dims.is_empty() {
        return Err(BenchError::Invalid("need at least one trial and one scan size".into()));
    }
    let mut baseline = BaselineConfig::new(
        cfg.work_dir.join("local"),
        cfg.remote_dir.clone().unwrap_or_else(|| cfg.work_dir.join("remote")),
    );
    baseline.params = cfg.params;
    let cluster = if cfg.mode.runs(Workflow::Streaming) {
        let mut cc = ClusterConfig::new(cfg.n_groups, cfg.work_dir.join("cluster"));
        cc.params = cfg.params;
        Some(LocalCluster::start(cc)?)
    } else {
        None
    };
    let mut samples = Vec::new();
    let mut scan_number = 1;
    for &dims in &cfg.dims {
        // one shared calibration per size; every trial counts against it
        let fit = calibrate(&SyntheticScan::new(cfg.spec(dims, 0)), &cfg.params, None);
        for trial in 0..cfg.trials {
            let spec = cfg.spec(dims, scan_number);
            scan_number += 1;
            if cfg.mode.runs(Workflow::FileTransfer) {
                settle_disk();
                let (s, _) = run_file_baseline(&spec, fit, &baseline, trial)?;
                progress(&s);
                samples.push(s);
            }
            if let Some(cluster) = &cluster {
                settle_disk();
                let (s, _) = run_streaming_trial(cluster, &spec, fit, trial, true)?;
                progress(&s);
                samples.push(s);
            }
        }
    }
    if let Some(c) = cluster {
        c.shutdown();
    }
    Ok(samples)
}

/// Writes a sample list as JSON lines so a report can be regenerated.
pub fn write_samples_json(path: &Path, samples: &[TimingSample]) -> Result<(), BenchError> {
    let mut f = File::create(path).map_err(io_err(path))?;
    for s in samples {
        let line = serde_json::to_string(s).map_err(|e| BenchError::Invalid(e.to_string()))?;
        writeln!(f, "{line}").map_err(io_err(path))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample(w: Workflow, total: f64) -> TimingSample {
        let spec = ScanSpec::new(1, 4, 4, DetectorGeometry::new(16, 16).unwrap());
        TimingSample::new(
            w,
            &spec,
            0,
            vec![Phase {
                name: "all".into(),
                seconds: total,
            }],
            0,
            false,
        )
    }

    #[test]
    fn outlier_examples() {
        assert_eq!(remove_outliers(&[1.0, 2.0, 3.0, 4.0, 100.0]), vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(iqr_fences(&[1.0, 2.0, 3.0, 4.0, 100.0]), Some((-1.0, 7.0)));
        assert_eq!(remove_outliers(&[1.0, 2.0, 3.0, 4.0]), vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(remove_outliers(&[5.0; 6]), vec![5.0; 6]);
        assert_eq!(remove_outliers(&[1.0, 1000.0]), vec![1.0, 1000.0]);
        // one pass keeps 30 inside the first fences; numpy agrees on both rounds
        let v = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 30.0, 100.0, 1000.0];
        assert_eq!(iqr_fences(&v), Some((-28.25, 55.75)));
        assert_eq!(iqr_fences(&v[..8]), Some((-2.5, 11.5)));
        assert_eq!(remove_outliers(&v), vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0]);
    }

    #[test]
    fn linear_quantiles_match_numpy() {
        // numpy.percentile(…, interpolation="linear")
        let v = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(quantile_linear(&v, 0.25), 1.75);
        assert_eq!(quantile_linear(&v, 0.75), 3.25);
        assert_eq!(quantile_linear(&[7.0], 0.5), 7.0);
    }

    #[test]
    fn enhancement_examples() {
        assert_eq!(enhancement(52.0, 4.0), 13.0);
        assert_eq!(enhancement(3.5, 3.5), 1.0);
    }

    #[test]
    fn single_sample_has_zero_spread() {
        let s = summarize(&[sample(Workflow::Streaming, 2.5)]).unwrap();
        assert_eq!((s.mean, s.stddev, s.n), (2.5, 0.0, 1));
    }

    #[test]
    fn comparison_excludes_lossy_and_outliers() {
        let mut samples: Vec<TimingSample> = [10.0, 11.0, 12.0, 13.0, 500.0]
            .into_iter()
            .map(|t| sample(Workflow::FileTransfer, t))
            .collect();
        samples.extend([2.0, 2.0].map(|t| sample(Workflow::Streaming, t)));
        let mut lossy = sample(Workflow::Streaming, 100.0);
        lossy.lossy = true;
        samples.push(lossy);
        let rows = compare(&samples);
        assert_eq!(rows.len(), 1);
        let ft = rows[0].file_transfer.unwrap();
        assert_eq!((ft.mean, ft.n, ft.outliers), (11.5, 4, 1));
        let st = rows[0].streaming.unwrap();
        assert_eq!((st.mean, st.n, st.lossy), (2.0, 2, 1));
        assert_eq!(rows[0].enhancement, Some(5.75));
        let table = render_table(&rows);
        assert!(table.contains("4x4"));
        assert!(table.contains("5.8"));
        let hist = histogram_csv(&samples);
        assert_eq!(hist.lines().count(), 1 + 4 + 2);
        assert!(hist.starts_with("workflow,dims,seconds\n"));
        assert_eq!(samples_csv(&samples).lines().count(), 1 + samples.len());
    }

    #[test]
    fn baseline_phases_and_equivalence_with_oracle() {
        let dir = tempfile::tempdir().unwrap();
        let mut spec = ScanSpec::new(3, 16, 16, DetectorGeometry::new(16, 16).unwrap());
        spec.event_rate = 3.0;
        spec.seed = 9;
        let params = CountingParams::default();
        let fit = calibrate(&SyntheticScan::new(spec.clone()), &params, None);
        let cfg = BaselineConfig::new(dir.path().join("local"), dir.path().join("remote"));
        let (sample, out) = run_file_baseline(&spec, fit, &cfg, 0).unwrap();
        let names: Vec<&str> = sample.phases.iter().map(|p| p.name.as_str()).collect();
        assert_eq!(names, ["write", "transfer", "read", "count", "output"]);
        assert!(sample.phases.iter().all(|p| p.seconds > 0.0));
        let sum: f64 = sample.phases.iter().map(|p| p.seconds).sum();
        assert!((sample.total_seconds - sum).abs() < 1e-9);
        assert!(sample.total_seconds >= sample.phase("write").unwrap() + sample.phase("transfer").unwrap());
        assert!(!sample.lossy);
        let oracle = count_scan_oracle(
            &SyntheticScan::new(spec.clone()),
            ScanShape {
                scan_number: 3,
                scan_rows: 16,
                scan_cols: 16,
            },
            &params,
            Some(fit),
            None,
        );
        assert_eq!(out.encode().unwrap(), oracle.encode().unwrap());
        // cleanup removed every file
        assert_eq!(fs::read_dir(dir.path().join("remote")).unwrap().count(), 0);
    }

    #[test]
    fn insufficient_space_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let spec = ScanSpec::new(1, 4096, 4096, DetectorGeometry::new(576, 576).unwrap());
        let cfg = BaselineConfig::new(dir.path().join("l"), dir.path().join("r"));
        let fit = NoiseFit {
            mean: 100.0,
            stddev: 5.0,
            degenerate: false,
        };
        match run_file_baseline(&spec, fit, &cfg, 0) {
            Err(BenchError::InsufficientSpace { required, .. }) => assert_eq!(required, raw_file_bytes(&spec)),
            other => panic!("expected a space error, got {other:?}"),
        }
    }

    proptest! {
        #[test]
        fn outlier_rule_is_idempotent(
            values in prop::collection::vec(prop_oneof![4 => 0.0f64..10.0, 1 => 0.0f64..1e4], 0..40),
        ) {
            let once = remove_outliers(&values);
            prop_assert_eq!(remove_outliers(&once), once.clone());
            if let Some((lo, hi)) = iqr_fences(&once) {
                prop_assert!(once.iter().all(|v| (lo..=hi).contains(v)));
            }
            prop_assert!(once.iter().all(|v| values.contains(v)));
        }
    }
}
