//! Raw data volume of a scan for the common scan sizes at full detector
//! geometry, plus a reduced geometry for comparison.

use stream4d::protocol::{format_decimal_gb, scan_raw_size, DetectorGeometry};

fn main() {
    let full = DetectorGeometry::new(576, 576).unwrap();
    let reduced = DetectorGeometry::new(128, 128).unwrap();
    println!("{:>10} {:>18} {:>10} {:>14}", "scan", "bytes", "full", "128x128 frames");
    for n in [128u32, 256, 512, 1024] {
        let bytes = scan_raw_size(n, n, &full);
        let small = scan_raw_size(n, n, &reduced);
        println!(
            "{:>10} {bytes:>18} {:>10} {:>11.1} MB",
            format!("{n}x{n}"),
            format_decimal_gb(bytes),
            small as f64 / 1e6
        );
    }
}
