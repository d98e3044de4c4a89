//! Electron counting on its own: fit the noise from sampled frames, count
//! every frame, and compare the counted events with what the generator
//! injected.

use std::collections::HashSet;

use stream4d::counting::{calibrate, count_scan_oracle, CountingParams, ScanShape};
use stream4d::producer::{InjectedKind, ScanSpec, SyntheticScan};
use stream4d::protocol::DetectorGeometry;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut spec = ScanSpec::new(2, 16, 16, DetectorGeometry::new(64, 64)?);
    spec.event_rate = 3.0;
    spec.xray_rate = 0.2;
    spec.seed = 9;
    let scan = SyntheticScan::new(spec.clone());
    let params = CountingParams::default();

    let fit = calibrate(&scan, &params, None);
    println!("fit: mean {:.3}, stddev {:.3}", fit.mean, fit.stddev);

    let shape = ScanShape {
        scan_number: spec.scan_number,
        scan_rows: spec.scan_rows,
        scan_cols: spec.scan_cols,
    };
    let counted = count_scan_oracle(&scan, shape, &params, Some(fit), None);
    let (mut truth, mut found) = (0usize, 0usize);
    for frame in &counted.frames {
        let events: HashSet<u32> = frame.events.iter().copied().collect();
        for p in scan.injected(frame.frame_number) {
            if p.kind == InjectedKind::Event {
                truth += 1;
                found += events.contains(&p.pixel) as usize;
            }
        }
    }
    println!(
        "{} frames, {} events counted, {found} of {truth} injected events recovered",
        counted.frames.len(),
        counted.total_events()
    );
    Ok(())
}
