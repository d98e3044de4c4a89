//! Sparse electron-event file format.
//!
//! ```text
//! "S4DC" | version u16 = 1 | scan_number u32 | scan_rows u32 | scan_cols u32
//! | frame_rows u32 | frame_cols u32 | background_threshold f64 | xray_threshold f64
//! | n_frames u32
//! | n_frames × (frame_number u32 | sector_mask u8 | n_events u32 | n_events × u32)
//! ```
//!
//! Little-endian throughout. Frames are stored in ascending frame number and
//! event indices are ascending row-major pixel positions.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{self, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::protocol::{ProtocolError, Reader};

pub const SPARSE_MAGIC: [u8; 4] = *b"S4DC";
pub const SPARSE_VERSION: u16 = 1;
pub const SPARSE_HEADER_LEN: usize = 4 + 2 + 4 * 5 + 8 * 2 + 4;

#[derive(Debug, Error)]
pub enum SparseError {
    #[error("i/o: {0}")]
    Io(#[from] io::Error),
    #[error("decode: {0}")]
    Decode(#[from] ProtocolError),
    #[error("bad magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("frame {0} missing from output")]
    MissingFrame(u32),
    #[error("frame {0} present more than once")]
    DuplicateFrame(u32),
    #[error("frame {0} not expected in this output")]
    UnexpectedFrame(u32),
    #[error("frame {frame}: event indices must be ascending and < {limit}")]
    BadEvents { frame: u32, limit: u32 },
    #[error("cannot merge outputs with different scan metadata")]
    MetadataMismatch,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SparseFrame {
    pub frame_number: u32,
    pub sector_mask: u8,
    pub events: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SparseScan {
    pub scan_number: u32,
    pub scan_rows: u32,
    pub scan_cols: u32,
    pub frame_rows: u32,
    pub frame_cols: u32,
    pub background_threshold: f64,
    pub xray_threshold: f64,
    pub frames: Vec<SparseFrame>,
}

impl SparseScan {
    pub fn n_scan_frames(&self) -> u32 {
        self.scan_rows * self.scan_cols
    }

    pub fn total_events(&self) -> usize {
        self.frames.iter().map(|f| f.events.len()).sum()
    }

    pub fn encoded_len(&self) -> usize {
        SPARSE_HEADER_LEN
            + self
                .frames
                .iter()
                .map(|f| 9 + 4 * f.events.len())
                .sum::<usize>()
    }

    /// Sorts frames and checks that exactly `expected` frame numbers are present.
    pub fn check_coverage(&mut self, expected: impl IntoIterator<Item = u32>) -> Result<(), SparseError> {
        self.frames.sort_by_key(|f| f.frame_number);
        for pair in self.frames.windows(2) {
            if pair[0].frame_number == pair[1].frame_number {
                return Err(SparseError::DuplicateFrame(pair[0].frame_number));
            }
        }
        let expected: BTreeSet<u32> = expected.into_iter().collect();
        for f in &self.frames {
            if !expected.contains(&f.frame_number) {
                return Err(SparseError::UnexpectedFrame(f.frame_number));
            }
        }
        if let Some(missing) = expected
            .iter()
            .find(|n| self.frames.binary_search_by_key(*n, |f| f.frame_number).is_err())
        {
            return Err(SparseError::MissingFrame(*missing));
        }
        Ok(())
    }

    fn check_events(&self) -> Result<(), SparseError> {
        let limit = self.frame_rows * self.frame_cols;
        for f in &self.frames {
            let ascending = f.events.windows(2).all(|w| w[0] < w[1]);
            if !ascending || f.events.last().is_some_and(|&e| e >= limit) {
                return Err(SparseError::BadEvents {
                    frame: f.frame_number,
                    limit,
                });
            }
        }
        Ok(())
    }

    pub fn encode(&self) -> Result<Vec<u8>, SparseError> {
        let mut buf = Vec::with_capacity(self.encoded_len());
        self.write_to(&mut buf)?;
        Ok(buf)
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<(), SparseError> {
        self.check_events()?;
        if self.frames.windows(2).any(|p| p[0].frame_number >= p[1].frame_number) {
            return Err(SparseError::DuplicateFrame(
                self.frames
                    .windows(2)
                    .find(|p| p[0].frame_number >= p[1].frame_number)
                    .map(|p| p[1].frame_number)
                    .unwrap_or_default(),
            ));
        }
        w.write_all(&SPARSE_MAGIC)?;
        w.write_all(&SPARSE_VERSION.to_le_bytes())?;
        for v in [
            self.scan_number,
            self.scan_rows,
            self.scan_cols,
            self.frame_rows,
            self.frame_cols,
        ] {
            w.write_all(&v.to_le_bytes())?;
        }
        w.write_all(&self.background_threshold.to_le_bytes())?;
        w.write_all(&self.xray_threshold.to_le_bytes())?;
        w.write_all(&(self.frames.len() as u32).to_le_bytes())?;
        for f in &self.frames {
            w.write_all(&f.frame_number.to_le_bytes())?;
            w.write_all(&[f.sector_mask])?;
            w.write_all(&(f.events.len() as u32).to_le_bytes())?;
            for e in &f.events {
                w.write_all(&e.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, SparseError> {
        let magic: [u8; 4] = bytes
            .get(..4)
            .ok_or(ProtocolError::Truncated {
                field: "sparse magic",
                needed: 4,
                available: bytes.len(),
            })?
            .try_into()
            .unwrap();
        if magic != SPARSE_MAGIC {
            return Err(SparseError::BadMagic(magic));
        }
        let mut r = Reader::new(&bytes[4..], "sparse file");
        r.expect_version()?;
        let mut scan = SparseScan {
            scan_number: r.u32()?,
            scan_rows: r.u32()?,
            scan_cols: r.u32()?,
            frame_rows: r.u32()?,
            frame_cols: r.u32()?,
            background_threshold: r.f64()?,
            xray_threshold: r.f64()?,
            frames: Vec::new(),
        };
        let n_frames = r.u32()? as usize;
        scan.frames.reserve(n_frames.min(1 << 24));
        for _ in 0..n_frames {
            let frame_number = r.u32()?;
            let sector_mask = r.u8()?;
            let n_events = r.u32()? as usize;
            if n_events * 4 > r.remaining() {
                return Err(ProtocolError::Truncated {
                    field: "sparse events",
                    needed: n_events * 4,
                    available: r.remaining(),
                }
                .into());
            }
            let events = (0..n_events).map(|_| r.u32()).collect::<Result<_, _>>()?;
            scan.frames.push(SparseFrame {
                frame_number,
                sector_mask,
                events,
            });
        }
        r.finish()?;
        Ok(scan)
    }

    pub fn read(path: &Path) -> Result<Self, SparseError> {
        let mut bytes = Vec::new();
        File::open(path)?.read_to_end(&mut bytes)?;
        Self::decode(&bytes)
    }

    /// Merges per-NodeGroup outputs of one scan into a single frame-ordered scan.
    pub fn merge(parts: Vec<SparseScan>) -> Result<SparseScan, SparseError> {
        let mut iter = parts.into_iter();
        let Some(mut merged) = iter.next() else {
            return Err(SparseError::MetadataMismatch);
        };
        for part in iter {
            let same = part.scan_number == merged.scan_number
                && part.scan_rows == merged.scan_rows
                && part.scan_cols == merged.scan_cols
                && part.frame_rows == merged.frame_rows
                && part.frame_cols == merged.frame_cols
                && part.background_threshold.to_bits() == merged.background_threshold.to_bits()
                && part.xray_threshold.to_bits() == merged.xray_threshold.to_bits();
            if !same {
                return Err(SparseError::MetadataMismatch);
            }
            merged.frames.extend(part.frames);
        }
        let n = merged.n_scan_frames();
        merged.check_coverage(0..n)?;
        Ok(merged)
    }
}

/// Writes `scan` to `path` after checking it holds exactly the `expected`
/// frames. Nothing is written when the check fails.
pub fn write_sparse(
    path: &Path,
    mut scan: SparseScan,
    expected: impl IntoIterator<Item = u32>,
) -> Result<SparseScan, SparseError> {
    scan.check_coverage(expected)?;
    scan.check_events()?;
    let tmp = path.with_extension("partial");
    {
        let mut w = BufWriter::new(File::create(&tmp)?);
        scan.write_to(&mut w)?;
        w.flush()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(scan)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn scan(frames: Vec<SparseFrame>) -> SparseScan {
        SparseScan {
            scan_number: 3,
            scan_rows: 4,
            scan_cols: 4,
            frame_rows: 8,
            frame_cols: 8,
            background_threshold: 120.0,
            xray_threshold: 150.0,
            frames,
        }
    }

    fn empty(n: u32) -> SparseFrame {
        SparseFrame {
            frame_number: n,
            sector_mask: 0x0F,
            events: vec![],
        }
    }

    #[test]
    fn zero_event_file_size() {
        let s = scan((0..16).map(empty).collect());
        let bytes = s.encode().unwrap();
        assert_eq!(bytes.len(), SPARSE_HEADER_LEN + 16 * 9);
        assert_eq!(SPARSE_HEADER_LEN, 46);
        assert_eq!(&bytes[..4], b"S4DC");
        assert_eq!(SparseScan::decode(&bytes).unwrap(), s);
    }

    #[test]
    fn header_layout() {
        let mut s = scan(vec![SparseFrame {
            frame_number: 2,
            sector_mask: 0b0111,
            events: vec![1, 63],
        }]);
        s.scan_rows = 1;
        s.scan_cols = 3;
        let b = s.encode().unwrap();
        assert_eq!(&b[4..6], &[1, 0]);
        assert_eq!(&b[6..10], &3u32.to_le_bytes());
        assert_eq!(&b[26..34], &120.0f64.to_le_bytes());
        assert_eq!(&b[42..46], &1u32.to_le_bytes());
        assert_eq!(&b[46..], &[2, 0, 0, 0, 7, 2, 0, 0, 0, 1, 0, 0, 0, 63, 0, 0, 0]);
    }

    #[test]
    fn refuses_missing_frame() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.s4dc");
        let s = scan(vec![empty(0), empty(2)]);
        let err = write_sparse(&path, s, [0, 1, 2]).unwrap_err();
        assert!(matches!(err, SparseError::MissingFrame(1)));
        assert!(!path.exists());
    }

    #[test]
    fn refuses_duplicate_and_unsorted_events() {
        let s = scan(vec![empty(1), empty(1)]);
        assert!(matches!(
            write_sparse(Path::new("/nonexistent/x"), s, [1]),
            Err(SparseError::DuplicateFrame(1))
        ));
        let bad = scan(vec![SparseFrame {
            frame_number: 0,
            sector_mask: 15,
            events: vec![5, 3],
        }]);
        assert!(bad.encode().is_err());
    }

    #[test]
    fn merge_two_groups_covers_scan() {
        let even = scan((0..16).step_by(2).map(empty).collect());
        let odd = scan((1..16).step_by(2).map(empty).collect());
        let merged = SparseScan::merge(vec![odd, even]).unwrap();
        let numbers: Vec<u32> = merged.frames.iter().map(|f| f.frame_number).collect();
        assert_eq!(numbers, (0..16).collect::<Vec<_>>());
        let overlap = scan((0..16).map(empty).collect());
        assert!(SparseScan::merge(vec![merged, overlap]).is_err());
    }

    #[test]
    fn truncated_file_is_rejected() {
        let s = scan(vec![SparseFrame {
            frame_number: 0,
            sector_mask: 15,
            events: vec![1, 2, 3],
        }]);
        let bytes = s.encode().unwrap();
        assert!(SparseScan::decode(&bytes[..bytes.len() - 3]).is_err());
        assert!(matches!(SparseScan::decode(b"XXXX"), Err(SparseError::BadMagic(_))));
    }

    proptest! {
        #[test]
        fn round_trip(events in proptest::collection::vec(proptest::collection::btree_set(0u32..64, 0..10), 1..8)) {
            let frames = events.into_iter().enumerate().map(|(i, e)| SparseFrame {
                frame_number: i as u32,
                sector_mask: (i % 16) as u8,
                events: e.into_iter().collect(),
            }).collect();
            let s = scan(frames);
            let bytes = s.encode().unwrap();
            prop_assert_eq!(bytes.len(), s.encoded_len());
            prop_assert_eq!(SparseScan::decode(&bytes).unwrap(), s);
        }
    }
}
