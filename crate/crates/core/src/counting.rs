//! Electron counting: noise estimation from sampled frames, dual thresholds,
//! optional dark subtraction and local-maximum event extraction.

use serde::{Deserialize, Serialize};

use crate::protocol::{DetectorGeometry, N_SECTORS};
use crate::sparse::{SparseFrame, SparseScan};

pub const DEFAULT_N_SIGMA: f64 = 4.0;
pub const XRAY_M_SIGMA: f64 = 10.0;
pub const DEFAULT_SAMPLE_COUNT: usize = 100;

const FIT_WINDOW_SIGMAS: f64 = 5.0;
const FIT_MAX_ITERATIONS: usize = 100;
const CLIP_ITERATIONS: usize = 3;
const CLIP_SIGMAS: f64 = 3.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Connectivity {
    Four,
    #[default]
    Eight,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CountingParams {
    pub n_sigma: f64,
    pub m_sigma: f64,
    pub sample_count: usize,
    pub connectivity: Connectivity,
    pub bin_width: f64,
}

impl Default for CountingParams {
    fn default() -> Self {
        Self {
            n_sigma: DEFAULT_N_SIGMA,
            m_sigma: XRAY_M_SIGMA,
            sample_count: DEFAULT_SAMPLE_COUNT,
            connectivity: Connectivity::Eight,
            bin_width: 1.0,
        }
    }
}

/// Background noise model fitted to sampled pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseFit {
    pub mean: f64,
    pub stddev: f64,
    /// Set when the Gaussian fit failed and clipped moments were used instead.
    pub degenerate: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    pub mean: f64,
    pub stddev: f64,
    pub n_sigma: f64,
    pub m_sigma: f64,
    pub background: f64,
    pub xray: f64,
    pub degenerate: bool,
}

impl Thresholds {
    pub fn from_fit(fit: NoiseFit, n_sigma: f64, m_sigma: f64) -> Self {
        Self {
            mean: fit.mean,
            stddev: fit.stddev,
            n_sigma,
            m_sigma,
            background: fit.mean + n_sigma * fit.stddev,
            xray: fit.mean + m_sigma * fit.stddev,
            degenerate: fit.degenerate,
        }
    }

    /// Fixed thresholds, mostly for tests.
    pub fn fixed(background: f64, xray: f64) -> Self {
        Self {
            mean: 0.0,
            stddev: 0.0,
            n_sigma: 0.0,
            m_sigma: 0.0,
            background,
            xray,
            degenerate: false,
        }
    }
}

/// Per-pixel offsets subtracted before thresholding.
#[derive(Debug, Clone, PartialEq)]
pub struct DarkReference {
    geometry: DetectorGeometry,
    offsets: Vec<f64>,
}

impl DarkReference {
    pub fn new(geometry: DetectorGeometry, offsets: Vec<f64>) -> Option<Self> {
        (offsets.len() == geometry.frame_pixels()).then_some(Self { geometry, offsets })
    }

    pub fn zeros(geometry: DetectorGeometry) -> Self {
        Self {
            geometry,
            offsets: vec![0.0; geometry.frame_pixels()],
        }
    }

    pub fn geometry(&self) -> DetectorGeometry {
        self.geometry
    }

    pub fn offsets(&self) -> &[f64] {
        &self.offsets
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventList {
    pub frame_number: u32,
    pub indices: Vec<u32>,
}

/// A full frame after reassembly. Missing sectors are zero-filled and absent
/// from `sector_mask` (bit `s` set when sector `s` arrived).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub frame_number: u32,
    pub sector_mask: u8,
    pub pixels: Vec<u16>,
}

impl Frame {
    pub const COMPLETE: u8 = (1 << N_SECTORS) - 1;

    pub fn is_complete(&self) -> bool {
        self.sector_mask == Self::COMPLETE
    }
}

/// Uniformly spaced sample of frame numbers over `0..n_frames`.
pub fn sample_frame_numbers(n_frames: u32, count: usize) -> Vec<u32> {
    if n_frames == 0 || count == 0 {
        return Vec::new();
    }
    if count as u64 >= n_frames as u64 {
        return (0..n_frames).collect();
    }
    if count == 1 {
        return vec![0];
    }
    let span = (n_frames - 1) as u64;
    let mut out: Vec<u32> = (0..count as u64)
        .map(|i| ((i * span + (count as u64 - 1) / 2) / (count as u64 - 1)) as u32)
        .collect();
    out.dedup();
    out
}

fn moments(values: impl Iterator<Item = f64>) -> (f64, f64, usize) {
    // Welford
    let (mut n, mut mean, mut m2) = (0usize, 0.0f64, 0.0f64);
    for v in values {
        n += 1;
        let d = v - mean;
        mean += d / n as f64;
        m2 += d * (v - mean);
    }
    if n == 0 {
        return (0.0, 0.0, 0);
    }
    (mean, (m2 / n as f64).sqrt(), n)
}

fn pixel_values<'a>(
    samples: &'a [&'a [u16]],
    dark: Option<&'a DarkReference>,
) -> impl Iterator<Item = f64> + Clone + 'a {
    samples.iter().flat_map(move |frame| {
        frame.iter().enumerate().map(move |(i, &p)| match dark {
            Some(d) => p as f64 - d.offsets[i],
            None => p as f64,
        })
    })
}

fn clipped_moments(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let (mut mean, mut sd, _) = moments(values.clone());
    for _ in 0..CLIP_ITERATIONS {
        if sd <= 0.0 {
            break;
        }
        let (lo, hi) = (mean - CLIP_SIGMAS * sd, mean + CLIP_SIGMAS * sd);
        let (m, s, n) = moments(values.clone().filter(|v| *v >= lo && *v <= hi));
        if n == 0 {
            break;
        }
        mean = m;
        sd = s;
    }
    (mean, sd)
}

/// Histogram with `bin_width` bins centred on multiples of the width.
#[derive(Debug, Clone)]
pub struct Histogram {
    pub first_bin: i64,
    pub bin_width: f64,
    pub counts: Vec<u64>,
}

impl Histogram {
    pub fn build(values: impl Iterator<Item = f64>, lo: f64, hi: f64, bin_width: f64) -> Self {
        let first_bin = (lo / bin_width).round() as i64;
        let last_bin = (hi / bin_width).round() as i64;
        let mut counts = vec![0u64; (last_bin - first_bin + 1).max(0) as usize];
        for v in values {
            if v < lo || v > hi {
                continue;
            }
            let idx = (v / bin_width).round() as i64 - first_bin;
            if idx >= 0 && (idx as usize) < counts.len() {
                counts[idx as usize] += 1;
            }
        }
        Self {
            first_bin,
            bin_width,
            counts,
        }
    }

    pub fn center(&self, i: usize) -> f64 {
        (self.first_bin + i as i64) as f64 * self.bin_width
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }
}

/// Least-squares Gaussian fit (amplitude, mean, stddev) to histogram bins by
/// Levenberg-Marquardt. `None` on non-convergence or a non-positive width.
pub fn fit_gaussian(hist: &Histogram, init: [f64; 3]) -> Option<[f64; 3]> {
    let points: Vec<(f64, f64)> = hist
        .counts
        .iter()
        .enumerate()
        .map(|(i, &c)| (hist.center(i), c as f64))
        .collect();
    if points.len() < 3 {
        return None;
    }
    let cost = |p: &[f64; 3]| -> f64 {
        points
            .iter()
            .map(|&(x, y)| {
                let r = y - gaussian(x, p);
                r * r
            })
            .sum()
    };
    let mut p = init;
    let mut current = cost(&p);
    let mut lambda = 1e-3;
    for _ in 0..FIT_MAX_ITERATIONS {
        let mut jtj = [[0.0f64; 3]; 3];
        let mut jtr = [0.0f64; 3];
        for &(x, y) in &points {
            let d = x - p[1];
            let e = (-d * d / (2.0 * p[2] * p[2])).exp();
            let f = p[0] * e;
            let j = [
                e,
                f * d / (p[2] * p[2]),
                f * d * d / (p[2] * p[2] * p[2]),
            ];
            let r = y - f;
            for a in 0..3 {
                jtr[a] += j[a] * r;
                for b in 0..3 {
                    jtj[a][b] += j[a] * j[b];
                }
            }
        }
        // inner loop: raise damping until the step improves the cost
        let mut improved = false;
        for _ in 0..30 {
            let mut m = jtj;
            for (a, row) in m.iter_mut().enumerate() {
                row[a] += lambda * jtj[a][a].max(1e-12);
            }
            let Some(step) = solve3(m, jtr) else {
                lambda *= 10.0;
                continue;
            };
            let candidate = [p[0] + step[0], p[1] + step[1], p[2] + step[2]];
            let c = cost(&candidate);
            if c.is_finite() && c <= current {
                let rel = (current - c) / current.max(f64::MIN_POSITIVE);
                let small_step = step
                    .iter()
                    .zip(candidate.iter())
                    .all(|(s, v)| s.abs() <= 1e-9 * v.abs().max(1e-9));
                p = candidate;
                current = c;
                lambda = (lambda / 10.0).max(1e-12);
                improved = true;
                if rel < 1e-12 || small_step {
                    return (p[2].abs() > 0.0).then_some([p[0], p[1], p[2].abs()]);
                }
                break;
            }
            lambda *= 10.0;
        }
        if !improved {
            // no descent direction left: at a minimum
            return (p[2].abs() > 0.0 && current.is_finite()).then_some([p[0], p[1], p[2].abs()]);
        }
    }
    None
}

fn gaussian(x: f64, p: &[f64; 3]) -> f64 {
    let d = x - p[1];
    p[0] * (-d * d / (2.0 * p[2] * p[2])).exp()
}

fn solve3(mut m: [[f64; 3]; 3], mut b: [f64; 3]) -> Option<[f64; 3]> {
    for col in 0..3 {
        let pivot = (col..3).max_by(|&i, &j| m[i][col].abs().total_cmp(&m[j][col].abs()))?;
        if m[pivot][col].abs() < 1e-300 {
            return None;
        }
        m.swap(col, pivot);
        b.swap(col, pivot);
        for row in col + 1..3 {
            let f = m[row][col] / m[col][col];
            for k in col..3 {
                m[row][k] -= f * m[col][k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = [0.0; 3];
    for row in (0..3).rev() {
        let mut s = b[row];
        for k in row + 1..3 {
            s -= m[row][k] * x[k];
        }
        x[row] = s / m[row][row];
    }
    x.iter().all(|v| v.is_finite()).then_some(x)
}

/// Fits the background distribution of the sampled frames.
pub fn estimate_noise(samples: &[&[u16]], bin_width: f64, dark: Option<&DarkReference>) -> NoiseFit {
    let values = pixel_values(samples, dark);
    let (mean0, sd0, n) = moments(values.clone());
    let fallback = || {
        let (mean, stddev) = clipped_moments(values.clone());
        NoiseFit {
            mean,
            stddev,
            degenerate: true,
        }
    };
    if n == 0 || sd0 <= 0.0 {
        return fallback();
    }
    let lo = mean0 - FIT_WINDOW_SIGMAS * sd0;
    let hi = mean0 + FIT_WINDOW_SIGMAS * sd0;
    let hist = Histogram::build(values.clone(), lo, hi, bin_width);
    let amplitude0 = hist.total() as f64 * bin_width / (sd0 * (2.0 * std::f64::consts::PI).sqrt());
    match fit_gaussian(&hist, [amplitude0, mean0, sd0]) {
        Some([_, mean, stddev]) if stddev > 0.0 && mean.is_finite() => NoiseFit {
            mean,
            stddev,
            degenerate: false,
        },
        _ => fallback(),
    }
}

/// Noise fit plus thresholds at `n_sigma` / [`XRAY_M_SIGMA`].
pub fn estimate_thresholds(samples: &[&[u16]], n_sigma: f64, dark: Option<&DarkReference>) -> Thresholds {
    Thresholds::from_fit(estimate_noise(samples, 1.0, dark), n_sigma, XRAY_M_SIGMA)
}

/// Extracts electron events: pixels strictly between the thresholds that
/// are not exceeded by any neighbour. Among a touching plateau of equal
/// values only the smallest row-major index is reported.
pub fn count_frame(
    pixels: &[u16],
    geometry: &DetectorGeometry,
    thresholds: &Thresholds,
    dark: Option<&DarkReference>,
    connectivity: Connectivity,
) -> Vec<u32> {
    match dark {
        Some(d) => count_with(pixels, geometry, thresholds, connectivity, |i| {
            pixels[i] as f64 - d.offsets[i]
        }),
        None => count_with(pixels, geometry, thresholds, connectivity, |i| pixels[i] as f64),
    }
}

const NEIGHBOURS_8: [(i32, i32); 8] = [(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)];
const NEIGHBOURS_4: [(i32, i32); 4] = [(-1, 0), (0, -1), (0, 1), (1, 0)];

fn count_with<F: Fn(usize) -> f64>(
    pixels: &[u16],
    geometry: &DetectorGeometry,
    t: &Thresholds,
    connectivity: Connectivity,
    value: F,
) -> Vec<u32> {
    let rows = geometry.frame_rows as i32;
    let cols = geometry.frame_cols as i32;
    debug_assert_eq!(pixels.len(), geometry.frame_pixels());
    let offsets: &[(i32, i32)] = match connectivity {
        Connectivity::Eight => &NEIGHBOURS_8,
        Connectivity::Four => &NEIGHBOURS_4,
    };
    let neighbours = |idx: usize| {
        let r = idx as i32 / cols;
        let c = idx as i32 % cols;
        offsets.iter().filter_map(move |&(dr, dc)| {
            let (nr, nc) = (r + dr, c + dc);
            (nr >= 0 && nr < rows && nc >= 0 && nc < cols).then(|| (nr * cols + nc) as usize)
        })
    };
    let mut events = Vec::new();
    for idx in 0..pixels.len() {
        let v = value(idx);
        if !(v > t.background && v < t.xray) {
            continue;
        }
        let mut plateau = false;
        let mut maximal = true;
        for q in neighbours(idx) {
            let w = value(q);
            if w > v {
                maximal = false;
                break;
            }
            if w == v {
                plateau = true;
            }
        }
        if !maximal {
            continue;
        }
        if plateau && !is_plateau_minimum(idx, v, &value, &neighbours) {
            continue;
        }
        events.push(idx as u32);
    }
    events
}

/// True when no pixel of `start`'s equal-valued connected region has a
/// smaller index.
fn is_plateau_minimum<F, N, I>(start: usize, v: f64, value: &F, neighbours: &N) -> bool
where
    F: Fn(usize) -> f64,
    N: Fn(usize) -> I,
    I: Iterator<Item = usize>,
{
    let mut seen = std::collections::HashSet::from([start]);
    let mut stack = vec![start];
    while let Some(p) = stack.pop() {
        for q in neighbours(p) {
            if value(q) == v && seen.insert(q) {
                if q < start {
                    return false;
                }
                stack.push(q);
            }
        }
    }
    true
}

/// Random access to assembled frames of a scan.
pub trait FrameSource {
    fn geometry(&self) -> DetectorGeometry;
    fn n_frames(&self) -> u32;
    /// `None` when no sector of the frame exists.
    fn frame(&self, frame_number: u32) -> Option<Frame>;
}

/// Fits noise over `params.sample_count` uniformly spaced frames.
pub fn calibrate(source: &dyn FrameSource, params: &CountingParams, dark: Option<&DarkReference>) -> NoiseFit {
    let frames: Vec<Frame> = sample_frame_numbers(source.n_frames(), params.sample_count)
        .into_iter()
        .filter_map(|f| source.frame(f))
        .collect();
    let refs: Vec<&[u16]> = frames.iter().map(|f| f.pixels.as_slice()).collect();
    estimate_noise(&refs, params.bin_width, dark)
}

/// Scan-level metadata written into every sparse output.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScanShape {
    pub scan_number: u32,
    pub scan_rows: u32,
    pub scan_cols: u32,
}

/// Single-threaded, frame-ordered reference counting of a whole scan.
pub fn count_scan_oracle(
    source: &dyn FrameSource,
    shape: ScanShape,
    params: &CountingParams,
    fit: Option<NoiseFit>,
    dark: Option<&DarkReference>,
) -> SparseScan {
    let geometry = source.geometry();
    let fit = fit.unwrap_or_else(|| calibrate(source, params, dark));
    let thresholds = Thresholds::from_fit(fit, params.n_sigma, params.m_sigma);
    let frames = (0..source.n_frames())
        .map(|f| match source.frame(f) {
            Some(frame) => SparseFrame {
                frame_number: f,
                sector_mask: frame.sector_mask,
                events: count_frame(&frame.pixels, &geometry, &thresholds, dark, params.connectivity),
            },
            None => SparseFrame {
                frame_number: f,
                sector_mask: 0,
                events: Vec::new(),
            },
        })
        .collect();
    SparseScan {
        scan_number: shape.scan_number,
        scan_rows: shape.scan_rows,
        scan_cols: shape.scan_cols,
        frame_rows: geometry.frame_rows,
        frame_cols: geometry.frame_cols,
        background_threshold: thresholds.background,
        xray_threshold: thresholds.xray,
        frames,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::rngs::SmallRng;
    use rand::{Rng, SeedableRng};
    use rand_distr::{Distribution, Normal};

    fn geom(r: u32, c: u32) -> DetectorGeometry {
        DetectorGeometry::new(r, c).unwrap()
    }

    /// Brute force: checks every pixel against its full neighbourhood and
    /// resolves plateaus by labelling connected equal-valued regions.
    fn oracle_events(pixels: &[u16], g: &DetectorGeometry, bg: f64, xr: f64) -> Vec<u32> {
        let (rows, cols) = (g.frame_rows as i64, g.frame_cols as i64);
        let at = |r: i64, c: i64| pixels[(r * cols + c) as usize] as f64;
        let mut label = vec![usize::MAX; pixels.len()];
        for start in 0..pixels.len() {
            if label[start] != usize::MAX {
                continue;
            }
            // region label = smallest index in region, found by BFS from smallest first
            let v = pixels[start];
            let mut queue = std::collections::VecDeque::from([start]);
            label[start] = start;
            while let Some(p) = queue.pop_front() {
                let (r, c) = (p as i64 / cols, p as i64 % cols);
                for dr in -1..=1 {
                    for dc in -1..=1 {
                        let (nr, nc) = (r + dr, c + dc);
                        if (dr, dc) == (0, 0) || nr < 0 || nc < 0 || nr >= rows || nc >= cols {
                            continue;
                        }
                        let q = (nr * cols + nc) as usize;
                        if pixels[q] == v && label[q] == usize::MAX {
                            label[q] = start;
                            queue.push_back(q);
                        }
                    }
                }
            }
        }
        let mut out = Vec::new();
        for r in 0..rows {
            for c in 0..cols {
                let v = at(r, c);
                if !(v > bg && v < xr) {
                    continue;
                }
                let mut ok = true;
                for dr in -1..=1 {
                    for dc in -1..=1 {
                        let (nr, nc) = (r + dr, c + dc);
                        if (dr, dc) != (0, 0) && nr >= 0 && nc >= 0 && nr < rows && nc < cols && at(nr, nc) > v {
                            ok = false;
                        }
                    }
                }
                let idx = (r * cols + c) as usize;
                if ok && label[idx] == idx {
                    out.push(idx as u32);
                }
            }
        }
        out
    }

    #[test]
    fn all_zero_frame_has_no_events() {
        let g = geom(8, 8);
        let t = Thresholds::fixed(4.0, 10.0);
        assert!(count_frame(&[0; 64], &g, &t, None, Connectivity::Eight).is_empty());
    }

    #[test]
    fn single_pixel_event() {
        let g = geom(8, 8);
        let mut px = vec![0u16; 64];
        px[27] = 50;
        let t = Thresholds::fixed(10.0, 100.0);
        let found = count_frame(&px, &g, &t, None, Connectivity::Eight);
        assert_eq!(found, vec![27]);
        assert_eq!(found, oracle_events(&px, &g, 10.0, 100.0));
    }

    #[test]
    fn xray_pixel_is_rejected() {
        let g = geom(8, 8);
        let mut px = vec![100u16; 64];
        px[9] = 65535;
        let t = Thresholds::fixed(120.0, 150.0);
        assert!(count_frame(&px, &g, &t, None, Connectivity::Eight).is_empty());
        assert!(oracle_events(&px, &g, 120.0, 150.0).is_empty());
    }

    #[test]
    fn plateau_reports_lowest_index() {
        let g = geom(4, 4);
        let mut px = vec![0u16; 16];
        px[5] = 30;
        px[6] = 30;
        let t = Thresholds::fixed(10.0, 100.0);
        assert_eq!(count_frame(&px, &g, &t, None, Connectivity::Eight), vec![5]);
    }

    #[test]
    fn winding_plateau_has_one_event() {
        // chain (0,4)-(1,3)-(2,2)-(1,1): local pairwise rules would report two
        let g = geom(4, 8);
        let mut px = vec![0u16; 32];
        for (r, c) in [(0, 4), (1, 3), (2, 2), (1, 1)] {
            px[r * 8 + c] = 40;
        }
        let t = Thresholds::fixed(10.0, 100.0);
        let found = count_frame(&px, &g, &t, None, Connectivity::Eight);
        assert_eq!(found, vec![4]);
        assert_eq!(found, oracle_events(&px, &g, 10.0, 100.0));
    }

    #[test]
    fn edge_pixels_compare_existing_neighbours_only() {
        let g = geom(4, 4);
        let mut px = vec![0u16; 16];
        px[0] = 20;
        px[15] = 20;
        let t = Thresholds::fixed(10.0, 100.0);
        assert_eq!(count_frame(&px, &g, &t, None, Connectivity::Eight), vec![0, 15]);
    }

    #[test]
    fn four_connectivity_ignores_diagonals() {
        let g = geom(4, 4);
        let mut px = vec![0u16; 16];
        px[5] = 30;
        px[10] = 40;
        let t = Thresholds::fixed(10.0, 100.0);
        assert_eq!(count_frame(&px, &g, &t, None, Connectivity::Eight), vec![10]);
        assert_eq!(count_frame(&px, &g, &t, None, Connectivity::Four), vec![5, 10]);
    }

    #[test]
    fn dark_subtraction_shifts_values() {
        let g = geom(4, 4);
        let px = vec![50u16; 16];
        let mut offsets = vec![50.0; 16];
        offsets[6] = 20.0;
        let dark = DarkReference::new(g, offsets).unwrap();
        let t = Thresholds::fixed(10.0, 100.0);
        assert_eq!(count_frame(&px, &g, &t, Some(&dark), Connectivity::Eight), vec![6]);
        assert!(DarkReference::new(g, vec![0.0; 3]).is_none());
    }

    #[test]
    fn constant_frames_are_degenerate() {
        let frame = vec![100u16; 256];
        let t = estimate_thresholds(&[&frame, &frame], 4.0, None);
        assert_eq!(t.mean, 100.0);
        assert_eq!(t.stddev, 0.0);
        assert_eq!(t.background, 100.0);
        assert_eq!(t.xray, 100.0);
        assert!(t.degenerate);
    }

    fn gaussian_frames(n: usize, pixels: usize, mu: f64, sigma: f64, seed: u64) -> Vec<Vec<u16>> {
        let mut rng = SmallRng::seed_from_u64(seed);
        let normal = Normal::new(mu, sigma).unwrap();
        (0..n)
            .map(|_| {
                (0..pixels)
                    .map(|_| normal.sample(&mut rng).round().clamp(0.0, 65535.0) as u16)
                    .collect()
            })
            .collect()
    }

    #[test]
    fn gaussian_noise_thresholds_recovered() {
        let frames = gaussian_frames(100, 64 * 64, 100.0, 5.0, 7);
        let refs: Vec<&[u16]> = frames.iter().map(|f| f.as_slice()).collect();
        let t = estimate_thresholds(&refs, 4.0, None);
        assert!(!t.degenerate);
        assert!((t.background - 120.0).abs() / 120.0 < 0.02, "{t:?}");
        assert!((t.xray - 150.0).abs() / 150.0 < 0.02, "{t:?}");
    }

    #[test]
    fn fit_survives_xray_outliers() {
        let mut frames = gaussian_frames(50, 64 * 64, 100.0, 5.0, 9);
        let mut rng = SmallRng::seed_from_u64(1);
        for f in frames.iter_mut() {
            let i = rng.random_range(0..f.len());
            f[i] = 65535;
        }
        let refs: Vec<&[u16]> = frames.iter().map(|f| f.as_slice()).collect();
        let fit = estimate_noise(&refs, 1.0, None);
        assert!((fit.mean - 100.0).abs() < 1.0, "{fit:?}");
        assert!((fit.stddev - 5.0).abs() < 0.25, "{fit:?}");
    }

    #[test]
    fn n_sigma_shift_is_exact() {
        let frames = gaussian_frames(10, 32 * 32, 100.0, 5.0, 3);
        let refs: Vec<&[u16]> = frames.iter().map(|f| f.as_slice()).collect();
        let a = estimate_thresholds(&refs, 4.0, None);
        let b = estimate_thresholds(&refs, 4.5, None);
        assert!((b.background - a.background - 0.5 * a.stddev).abs() < 1e-9);
        assert_eq!(a.xray, b.xray);
    }

    #[test]
    fn sample_numbers_are_uniform() {
        assert_eq!(sample_frame_numbers(10, 100), (0..10).collect::<Vec<_>>());
        assert_eq!(sample_frame_numbers(101, 3), vec![0, 50, 100]);
        assert_eq!(sample_frame_numbers(1000, 1), vec![0]);
        assert!(sample_frame_numbers(0, 5).is_empty());
        let s = sample_frame_numbers(16384, 100);
        assert_eq!(s.len(), 100);
        assert_eq!((s[0], s[99]), (0, 16383));
    }

    proptest! {
        #[test]
        fn matches_brute_force(pixels in proptest::collection::vec(0u16..8, 48)) {
            let g = geom(8, 6);
            let t = Thresholds::fixed(2.0, 7.0);
            prop_assert_eq!(
                count_frame(&pixels, &g, &t, None, Connectivity::Eight),
                oracle_events(&pixels, &g, 2.0, 7.0)
            );
        }

        #[test]
        fn raising_n_never_adds_events(pixels in proptest::collection::vec(90u16..140, 64), n in 0.0f64..6.0) {
            let g = geom(8, 8);
            let fit = NoiseFit { mean: 100.0, stddev: 5.0, degenerate: false };
            let lo = count_frame(&pixels, &g, &Thresholds::from_fit(fit, n, 10.0), None, Connectivity::Eight);
            let hi = count_frame(&pixels, &g, &Thresholds::from_fit(fit, n + 0.5, 10.0), None, Connectivity::Eight);
            prop_assert!(hi.len() <= lo.len());
        }

        #[test]
        fn events_are_candidates(pixels in proptest::collection::vec(0u16..200, 64)) {
            let g = geom(8, 8);
            let t = Thresholds::fixed(50.0, 150.0);
            let ev = count_frame(&pixels, &g, &t, None, Connectivity::Eight);
            prop_assert!(ev.windows(2).all(|w| w[0] < w[1]));
            for i in ev {
                let v = pixels[i as usize] as f64;
                prop_assert!(v > 50.0 && v < 150.0);
            }
        }

        #[test]
        fn zero_dark_is_identity(pixels in proptest::collection::vec(0u16..200, 64)) {
            let g = geom(8, 8);
            let t = Thresholds::fixed(50.0, 150.0);
            let dark = DarkReference::zeros(g);
            prop_assert_eq!(
                count_frame(&pixels, &g, &t, Some(&dark), Connectivity::Eight),
                count_frame(&pixels, &g, &t, None, Connectivity::Eight)
            );
        }
    }
}
