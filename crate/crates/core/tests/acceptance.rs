//! Acceptance suite. Runs every criterion at its stated tolerance, prints one
//! PASS/FAIL line each and exits non-zero if any failed.

use std::collections::{BTreeMap, HashSet};
use std::panic::{self, AssertUnwindSafe};
use std::sync::Arc;
use std::time::{Duration, Instant};

use proptest::prelude::*;
use proptest::test_runner::{Config, TestRunner};
use rand::rngs::SmallRng;
use rand::{Rng, SeedableRng};

use stream4d::aggregator::{Aggregator, AggregatorConfig, PipeConnector};
use stream4d::bench::{compare, iqr_fences, remove_outliers, run_bench, BenchConfig, BenchMode};
use stream4d::cluster::{ClusterConfig, LocalCluster};
use stream4d::counting::{
    calibrate, count_scan_oracle, estimate_thresholds, CountingParams, FrameSource, ScanShape, Thresholds,
};
use stream4d::producer::{expected_counts, generate_sector, sector_lost, InjectedKind, ScanMode, ScanSpec, SyntheticScan};
use stream4d::protocol::{
    decode_pipeline_message, encode_hello, encode_info_map, encode_sector_message, format_decimal_gb, scan_raw_size,
    DetectorGeometry, InfoMap, PipelineMessage, N_SECTORS,
};
use stream4d::statestore::{ClientOptions, ClientState, NodeKind, NodeStatus, ServerOptions, StateClient, StateServer};
use stream4d::transport::{pipe, MessageSink, MessageSource, PipeSource, PushSocket};

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn shape(spec: &ScanSpec) -> ScanShape {
    ScanShape {
        scan_number: spec.scan_number,
        scan_rows: spec.scan_rows,
        scan_cols: spec.scan_cols,
    }
}

fn cluster(n: usize, dir: &std::path::Path) -> LocalCluster {
    let mut cfg = ClusterConfig::new(n, dir);
    cfg.finalize_timeout = Duration::from_secs(2);
    cfg.scan_timeout = Duration::from_secs(120);
    LocalCluster::start(cfg).expect("cluster starts")
}

fn sizes() -> Outcome {
    let full = DetectorGeometry::new(576, 576).unwrap();
    let mut shown = Vec::new();
    for (n, want) in [(128u32, "10 GB"), (256, "43 GB"), (512, "173 GB"), (1024, "695 GB")] {
        let got = format_decimal_gb(scan_raw_size(n, n, &full));
        ensure!(got == want, "{n}x{n}: {got}, want {want}");
        shown.push(got);
    }
    Ok(shown.join(", "))
}

fn losslessness() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let cluster = cluster(2, dir.path());
    let spec = ScanSpec::new(1, 64, 64, DetectorGeometry::new(128, 128).unwrap());
    cluster.register_scan(&spec, None);
    let outcome = cluster.run_scan(&spec).map_err(|e| e.to_string())?;
    ensure!(outcome.mode == ScanMode::Streamed, "mode {:?}", outcome.mode);
    ensure!(outcome.sectors.iter().all(|s| s.threads.len() == 4), "expected 4 threads per producer");
    for r in &outcome.results {
        ensure!(r.received == r.expected_total, "{}: received {} of {}", r.uid, r.received, r.expected_total);
    }
    ensure!(outcome.completed() == 4096 && outcome.incomplete() == 0, "{} complete, {} incomplete", outcome.completed(), outcome.incomplete());
    let detail = format!("4096 complete, received {} = announced {}", outcome.received(), outcome.announced());
    cluster.shutdown();
    Ok(detail)
}

/// Pushes one contiguous frame range through a live aggregator into `n`
/// in-process groups and returns, per group, the (frame, sector) pairs it got.
fn route_through(agg: &Aggregator, sources: &mut [PipeSource], uids: &[String], scan: u32, frames: std::ops::Range<u32>) -> Vec<Vec<(u32, u16)>> {
    let mut spec = ScanSpec::new(scan, 1, 1, DetectorGeometry::new(8, 8).unwrap());
    spec.noise_stddev = 0.0;
    let g = spec.geometry();
    let info = encode_info_map(&InfoMap::new(scan, expected_counts(frames.clone(), uids).unwrap())).unwrap();
    for k in 0..N_SECTORS as u16 {
        let mut push = PushSocket::connect(&agg.addrs()[k as usize].to_string(), Duration::from_secs(5)).unwrap();
        push.send(&[encode_hello(k)]).unwrap();
        push.send(&[info.clone()]).unwrap();
        for f in frames.clone() {
            let parts = encode_sector_message(&generate_sector(&spec, f, k), &g).unwrap();
            push.send_buffered(&parts).unwrap();
        }
        push.flush().unwrap();
    }
    let want = frames.len() * N_SECTORS;
    let mut got: Vec<Vec<(u32, u16)>> = vec![Vec::new(); uids.len()];
    let deadline = Instant::now() + Duration::from_secs(10);
    while got.iter().map(Vec::len).sum::<usize>() < want && Instant::now() < deadline {
        for (i, src) in sources.iter_mut().enumerate() {
            while let Ok(Some(env)) = src.recv_timeout(Duration::from_millis(5)) {
                if let Ok(PipelineMessage::Sector(h, _)) = decode_pipeline_message(&env.frames) {
                    got[i].push((h.frame_number, h.sector_index));
                }
            }
        }
    }
    got
}

fn fair_routing() -> Outcome {
    let mut cases = 0;
    for n in [1usize, 2, 3, 4, 7] {
        let uids: Vec<String> = (0..n).map(|i| format!("ng-{i}")).collect();
        let connector = PipeConnector::default();
        let mut sources = Vec::new();
        for uid in &uids {
            let (tx, rx) = pipe(1 << 16);
            connector.insert(uid, tx);
            sources.push(rx);
        }
        let mut agg = Aggregator::start(&AggregatorConfig::default(), Arc::new(connector)).map_err(|e| e.to_string())?;
        let scan = std::cell::Cell::new(0u32);
        let sources = std::cell::RefCell::new(sources);
        let mut runner = TestRunner::new(Config {
            cases: 12,
            failure_persistence: None,
            ..Config::default()
        });
        let result = runner.run(&(0u32..10_000, 1u32..60), |(start, len)| {
            scan.set(scan.get() + 1);
            let got = route_through(&agg, &mut sources.borrow_mut(), &uids, scan.get(), start..start + len);
            let total: usize = got.iter().map(Vec::len).sum();
            prop_assert_eq!(total, len as usize * N_SECTORS);
            let per_group: Vec<usize> = got.iter().map(|g| g.len() / N_SECTORS).collect();
            let (lo, hi) = (per_group.iter().min().unwrap(), per_group.iter().max().unwrap());
            prop_assert!(hi - lo <= 1, "frames per group {:?}", per_group);
            let mut owner: BTreeMap<u32, (usize, usize)> = BTreeMap::new();
            for (g, pairs) in got.iter().enumerate() {
                for &(f, _) in pairs {
                    let e = owner.entry(f).or_insert((g, 0));
                    prop_assert_eq!(e.0, g, "frame {} split across groups", f);
                    e.1 += 1;
                }
            }
            prop_assert!(owner.values().all(|&(_, k)| k == N_SECTORS));
            Ok(())
        });
        agg.shutdown();
        result.map_err(|e| format!("n={n}: {e}"))?;
        cases += 12;
    }
    Ok(format!("{cases} random contiguous ranges over n in {{1,2,3,4,7}}"))
}

fn loss_handling() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let cluster = cluster(2, dir.path());
    let mut spec = ScanSpec::new(2, 128, 128, DetectorGeometry::new(64, 64).unwrap());
    spec.loss_probability = 0.001;
    spec.seed = 17;
    cluster.register_scan(&spec, None);
    let start = Instant::now();
    let outcome = cluster.run_scan(&spec).map_err(|e| e.to_string())?;
    let took = start.elapsed();
    let total = spec.n_frames() as u64;
    let hit: u64 = (0..spec.n_frames())
        .filter(|&f| (0..N_SECTORS as u16).any(|s| sector_lost(&spec, f, s)))
        .count() as u64;
    ensure!(outcome.completed() + outcome.incomplete() == total, "{} + {} != {total}", outcome.completed(), outcome.incomplete());
    ensure!(outcome.incomplete() == hit, "{} incomplete, {hit} frames lost a sector", outcome.incomplete());
    ensure!(outcome.received() == outcome.announced(), "received {} of {} announced", outcome.received(), outcome.announced());
    ensure!(took < Duration::from_secs(120), "took {took:?}");
    let detail = format!("{} complete + {} incomplete = {total} in {:.1} s", outcome.completed(), outcome.incomplete(), took.as_secs_f64());
    cluster.shutdown();
    Ok(detail)
}

fn oracle_equivalence() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let cluster = cluster(2, dir.path());
    let mut events = Vec::new();
    for (i, seed) in [11u64, 2024, 987_654].into_iter().enumerate() {
        let mut spec = ScanSpec::new(10 + i as u32, 32, 32, DetectorGeometry::new(64, 64).unwrap());
        spec.event_rate = 6.0;
        spec.seed = seed;
        let fit = cluster.register_scan(&spec, None);
        let streamed = cluster.run_scan(&spec).and_then(|o| o.merged()).map_err(|e| e.to_string())?;
        let oracle = count_scan_oracle(&SyntheticScan::new(spec.clone()), shape(&spec), &CountingParams::default(), Some(fit), None);
        ensure!(oracle.total_events() > 0, "seed {seed}: no events");
        ensure!(streamed.encode().unwrap() == oracle.encode().unwrap(), "seed {seed}: outputs differ");
        events.push(oracle.total_events());
    }
    cluster.shutdown();
    Ok(format!("byte-identical on 3 seeds, events {events:?}"))
}

fn threshold_recovery() -> Outcome {
    let mut spec = ScanSpec::new(3, 10, 10, DetectorGeometry::new(128, 128).unwrap());
    spec.noise_mean = 100.0;
    spec.noise_stddev = 5.0;
    spec.seed = 5;
    let scan = SyntheticScan::new(spec);
    let frames: Vec<Vec<u16>> = (0..100).map(|f| scan.frame(f).unwrap().pixels).collect();
    let refs: Vec<&[u16]> = frames.iter().map(Vec::as_slice).collect();
    let n_sigma = CountingParams::default().n_sigma;
    let t = estimate_thresholds(&refs, n_sigma, None);
    let (want_bg, want_x) = (100.0 + n_sigma * 5.0, 100.0 + 10.0 * 5.0);
    let (e_bg, e_x) = ((t.background - want_bg).abs() / want_bg, (t.xray - want_x).abs() / want_x);
    ensure!(e_bg <= 0.02, "background {:.3} vs {want_bg}", t.background);
    ensure!(e_x <= 0.02, "x-ray {:.3} vs {want_x}", t.xray);
    Ok(format!(
        "background {:.3} ({:.3}% off), x-ray {:.3} ({:.3}% off)",
        t.background,
        e_bg * 100.0,
        t.xray,
        e_x * 100.0
    ))
}

fn event_recovery() -> Outcome {
    let mut spec = ScanSpec::new(4, 16, 16, DetectorGeometry::new(64, 64).unwrap());
    spec.event_rate = 12.0;
    spec.xray_rate = 0.5;
    spec.seed = 23;
    let scan = SyntheticScan::new(spec.clone());
    let params = CountingParams::default();
    let fit = calibrate(&scan, &params, None);
    let t = Thresholds::from_fit(fit, params.n_sigma, params.m_sigma);
    let counted = count_scan_oracle(&scan, shape(&spec), &params, Some(fit), None);
    let cols = spec.geometry().frame_cols as i64;
    let (mut isolated, mut found, mut noise, mut stray) = (0usize, 0usize, 0usize, 0usize);
    for sf in &counted.frames {
        let f = sf.frame_number;
        let injected = scan.injected(f);
        let truth: HashSet<u32> = injected.iter().map(|p| p.pixel).collect();
        let events: HashSet<u32> = sf.events.iter().copied().collect();
        for p in injected.iter().filter(|p| p.kind == InjectedKind::Event) {
            let (r, c) = (p.pixel as i64 / cols, p.pixel as i64 % cols);
            let alone = injected.iter().all(|q| {
                q.pixel == p.pixel || ((q.pixel as i64 / cols - r).abs().max((q.pixel as i64 % cols - c).abs()) > 2)
            });
            if alone {
                isolated += 1;
                found += events.contains(&p.pixel) as usize;
            }
        }
        let raw = scan.frame(f).unwrap().pixels;
        for &e in &sf.events {
            if truth.contains(&e) {
                continue;
            }
            if raw[e as usize] as f64 > t.background {
                noise += 1;
            } else {
                stray += 1;
            }
        }
    }
    ensure!(isolated > 500, "only {isolated} isolated events");
    let recall = found as f64 / isolated as f64;
    ensure!(recall >= 0.99, "recall {recall:.4} ({found}/{isolated})");
    ensure!(stray == 0, "{stray} events outside ground truth and noise pixels");
    Ok(format!("recall {:.2}% ({found}/{isolated}), {noise} noise-pixel events, 0 stray", recall * 100.0))
}

fn statestore_convergence() -> Outcome {
    let server = StateServer::bind("127.0.0.1:0", ServerOptions::default()).map_err(|e| e.to_string())?;
    let addr = server.local_addr().to_string();
    let quiet = ClientOptions {
        heartbeat: Duration::ZERO,
        ..Default::default()
    };
    let observer = StateClient::connect(
        &addr,
        ClientOptions {
            record_history: true,
            ..quiet.clone()
        },
    )
    .map_err(|e| e.to_string())?;
    let clients: Vec<StateClient> = (0..10).map(|_| StateClient::connect(&addr, quiet.clone()).unwrap()).collect();
    std::thread::scope(|s| {
        for (i, c) in clients.iter().enumerate() {
            s.spawn(move || {
                let mut rng = SmallRng::seed_from_u64(i as u64);
                c.register(ClientState::new(format!("client-{i:02}"), NodeKind::NodeGroup)).unwrap();
                for _ in 1..100 {
                    let statuses = [NodeStatus::Idle, NodeStatus::Streaming, NodeStatus::Draining];
                    let (scan, expected, status) = (rng.random_range(0..50), rng.random_range(0..10_000), statuses[rng.random_range(0..3)]);
                    c.update(|st| {
                        st.scan_number = scan;
                        st.expected_messages = expected;
                        if st.status.can_transition_to(status) {
                            st.status = status;
                        }
                    })
                    .unwrap();
                }
            });
        }
    });
    // updates return before the server applies them; wait until it settles
    let mut last = server.snapshot().as_of_sequence;
    let settle = Instant::now() + Duration::from_secs(20);
    loop {
        std::thread::sleep(Duration::from_millis(200));
        let now = server.snapshot().as_of_sequence;
        if now == last || Instant::now() > settle {
            break;
        }
        last = now;
    }
    for c in clients.iter().chain([&observer]) {
        ensure!(c.wait_for_sequence(last, Duration::from_secs(20)), "a client never reached sequence {last}");
    }
    let reference = server.snapshot().entries;
    ensure!(reference.len() == 10, "{} entries", reference.len());
    for (i, c) in clients.iter().chain([&observer]).enumerate() {
        ensure!(c.map() == reference, "client {i} diverged");
    }
    let seqs: Vec<u64> = observer.history().iter().map(|u| u.server_sequence).collect();
    ensure!(observer.gap_count() == 0, "{} gaps", observer.gap_count());
    ensure!(seqs.windows(2).all(|w| w[1] == w[0] + 1), "server sequences not contiguous");
    ensure!(seqs.len() as u64 >= 1000, "observer saw {} updates", seqs.len());
    ensure!(seqs.last() == Some(&last), "observer stopped at {:?}, server at {last}", seqs.last());
    Ok(format!("11 identical maps, {} contiguous updates up to {last}", seqs.len()))
}

fn fallback() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let mut cluster = cluster(2, dir.path());
    let mut spec = ScanSpec::new(6, 16, 16, DetectorGeometry::new(32, 32).unwrap());
    spec.event_rate = 4.0;
    spec.seed = 8;
    cluster.register_scan(&spec, None);
    let live = cluster.run_scan(&spec).and_then(|o| o.merged()).map_err(|e| e.to_string())?;
    cluster.stop_groups();
    let fb = cluster.run_scan(&spec).map_err(|e| e.to_string())?;
    ensure!(fb.mode == ScanMode::DiskFallback, "mode {:?}", fb.mode);
    ensure!(fb.results.is_empty() && !fb.raw_paths().is_empty(), "no raw files written");
    cluster.add_group().unwrap();
    cluster.add_group().unwrap();
    cluster.wait_for_groups(2, Duration::from_secs(10)).map_err(|e| e.to_string())?;
    let replayed = cluster.replay(&spec, &cluster.raw_dir()).and_then(|o| o.merged()).map_err(|e| e.to_string())?;
    ensure!(replayed.encode().unwrap() == live.encode().unwrap(), "replayed output differs from live");
    let files = fb.raw_paths().len();
    cluster.shutdown();
    Ok(format!("{files} raw files replayed to identical output ({} events)", live.total_events()))
}

fn speedup() -> Outcome {
    let work = tempfile::tempdir().unwrap();
    let mut cfg = BenchConfig::new(work.path());
    cfg.dims = vec![(128, 128)];
    cfg.trials = 5;
    cfg.mode = BenchMode::Both;
    cfg.geometry = DetectorGeometry::new(128, 128).unwrap();
    let start = Instant::now();
    let samples = run_bench(&cfg, |_| {}).map_err(|e| e.to_string())?;
    let took = start.elapsed();
    let row = compare(&samples).into_iter().next().ok_or("no comparison row")?;
    let (ft, s) = (row.file_transfer.ok_or("no baseline stats")?, row.streaming.ok_or("no streaming stats")?);
    let ratio = ft.mean / s.mean;
    let detail = format!(
        "ratio {ratio:.2}, baseline {:.3}±{:.3} s (cv {:.3}), streaming {:.3}±{:.3} s (cv {:.3}), {:.0} s",
        ft.mean,
        ft.stddev,
        ft.cv(),
        s.mean,
        s.stddev,
        s.cv(),
        took.as_secs_f64()
    );
    ensure!(ratio > 1.0, "{detail}");
    ensure!(s.cv() <= ft.cv(), "{detail}");
    ensure!(took < Duration::from_secs(600), "{detail}");
    Ok(detail)
}

fn outlier_rule() -> Outcome {
    let v = [1.0, 2.0, 3.0, 4.0, 100.0];
    let once = remove_outliers(&v);
    ensure!(once == [1.0, 2.0, 3.0, 4.0], "{once:?}");
    ensure!(remove_outliers(&once) == once, "not idempotent on its own output");
    let mut rng = SmallRng::seed_from_u64(99);
    for _ in 0..2000 {
        let n = rng.random_range(0..30);
        let xs: Vec<f64> = (0..n)
            .map(|_| if rng.random_bool(0.2) { rng.random_range(0.0..1e4) } else { rng.random_range(0.0..10.0) })
            .collect();
        let once = remove_outliers(&xs);
        ensure!(remove_outliers(&once) == once, "not idempotent on {xs:?}");
    }
    Ok(format!("removes only 100 (fences {:?}); idempotent on 2000 random inputs", iqr_fences(&v).unwrap()))
}

fn main() {
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("error")).try_init();
    let criteria: [(&str, fn() -> Outcome, Duration); 11] = [
        ("size formula", sizes, Duration::from_secs(1)),
        ("losslessness", losslessness, Duration::from_secs(60)),
        ("fair routing", fair_routing, Duration::from_secs(120)),
        ("loss handling", loss_handling, Duration::from_secs(120)),
        ("counting oracle equivalence", oracle_equivalence, Duration::from_secs(120)),
        ("threshold recovery", threshold_recovery, Duration::from_secs(10)),
        ("event recovery", event_recovery, Duration::from_secs(120)),
        ("statestore convergence", statestore_convergence, Duration::from_secs(30)),
        ("fallback behavior", fallback, Duration::from_secs(120)),
        ("relative speedup", speedup, Duration::from_secs(600)),
        ("outlier rule", outlier_rule, Duration::from_secs(10)),
    ];
    let quiet_panics = panic::take_hook();
    panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (name, run, limit) in criteria {
        let start = Instant::now();
        let outcome = panic::catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let took = start.elapsed();
        let outcome = match outcome {
            Ok(d) if took > limit => Err(format!("{d}; took {took:.1?}, limit {limit:?}")),
            o => o,
        };
        match outcome {
            Ok(d) => println!("PASS {name}: {d} [{:.2} s]", took.as_secs_f64()),
            Err(e) => {
                failed += 1;
                println!("FAIL {name}: {e} [{:.2} s]", took.as_secs_f64());
            }
        }
    }
    panic::set_hook(quiet_panics);
    println!("{} of 11 criteria passed", 11 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
