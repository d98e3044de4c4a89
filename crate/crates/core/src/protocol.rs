//! Detector geometry and the wire encoding of info, hello and sector messages.
//!
//! All multi-byte integers are little-endian. A sector message travels as two
//! frames (header, payload); info and hello messages are a single frame.
//!
//! ```text
//! sector header (26 B): magic 0x53344443 | version u16 | scan u32 | frame u32
//!                       | sector u16 | sequence u32 | flags u16 | payload_len u32
//! info map:             magic 0x53344449 | version u16 | scan u32 | n u16
//!                       | n × (uid_len u16, uid, count u64)
//! hello:                magic 0x53344448 | version u16 | sector u16
//! ```

use bytes::{BufMut, Bytes, BytesMut};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const SECTOR_MAGIC: u32 = 0x5334_4443;
pub const INFO_MAGIC: u32 = 0x5334_4449;
pub const HELLO_MAGIC: u32 = 0x5334_4448;
pub const WIRE_VERSION: u16 = 1;
pub const SECTOR_HEADER_LEN: usize = 26;
pub const N_SECTORS: usize = 4;
pub const MAX_UID_LEN: usize = 64;

/// Header flag: payload was produced by the synthetic generator.
pub const FLAG_SYNTHETIC: u16 = 0x0001;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ProtocolError {
    #[error("bad magic {found:#010x} (expected {expected:#010x})")]
    BadMagic { expected: u32, found: u32 },
    #[error("unsupported wire version {0}")]
    BadVersion(u16),
    #[error("truncated {field}: need {needed} bytes, have {available}")]
    Truncated {
        field: &'static str,
        needed: usize,
        available: usize,
    },
    #[error("payload length mismatch: header says {declared}, frame has {actual}")]
    PayloadLength { declared: usize, actual: usize },
    #[error("payload is {actual} bytes but geometry requires {expected}")]
    GeometryMismatch { expected: usize, actual: usize },
    #[error("sector index {0} out of range")]
    SectorIndex(u16),
    #[error("info map has no entries")]
    EmptyInfoMap,
    #[error("duplicate uid {0:?} in info map")]
    DuplicateUid(String),
    #[error("uid {0:?} is empty or longer than 64 bytes")]
    BadUid(String),
    #[error("uid is not valid utf-8")]
    Utf8,
    #[error("expected {expected} frame(s), got {actual}")]
    FrameCount { expected: usize, actual: usize },
    #[error("trailing {0} bytes after message")]
    Trailing(usize),
    #[error("invalid geometry {rows}x{cols}: rows must be a positive multiple of 4, cols positive")]
    Geometry { rows: u32, cols: u32 },
}

/// Frame shape of the detector. Rows are split into four equal horizontal
/// sectors, each read out independently.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DetectorGeometry {
    pub frame_rows: u32,
    pub frame_cols: u32,
}

impl Default for DetectorGeometry {
    fn default() -> Self {
        Self {
            frame_rows: 576,
            frame_cols: 576,
        }
    }
}

impl DetectorGeometry {
    pub fn new(frame_rows: u32, frame_cols: u32) -> Result<Self, ProtocolError> {
        let geometry = Self {
            frame_rows,
            frame_cols,
        };
        geometry.validate()?;
        Ok(geometry)
    }

    pub fn validate(&self) -> Result<(), ProtocolError> {
        if self.frame_rows == 0 || self.frame_cols == 0 || self.frame_rows % N_SECTORS as u32 != 0 {
            return Err(ProtocolError::Geometry {
                rows: self.frame_rows,
                cols: self.frame_cols,
            });
        }
        Ok(())
    }

    pub const fn n_sectors(&self) -> usize {
        N_SECTORS
    }

    pub fn sector_rows(&self) -> u32 {
        self.frame_rows / N_SECTORS as u32
    }

    pub fn sector_pixels(&self) -> usize {
        self.sector_rows() as usize * self.frame_cols as usize
    }

    pub fn sector_bytes(&self) -> usize {
        self.sector_pixels() * 2
    }

    pub fn frame_pixels(&self) -> usize {
        self.frame_rows as usize * self.frame_cols as usize
    }

    pub fn frame_bytes(&self) -> u64 {
        self.frame_pixels() as u64 * 2
    }
}

/// Raw (uncounted) size of a scan in bytes.
pub fn scan_raw_size(scan_rows: u32, scan_cols: u32, geometry: &DetectorGeometry) -> u64 {
    scan_rows as u64 * scan_cols as u64 * geometry.frame_bytes()
}

/// Whole decimal gigabytes, truncated toward zero.
pub fn decimal_gb(bytes: u64) -> u64 {
    bytes / 1_000_000_000
}

pub fn format_decimal_gb(bytes: u64) -> String {
    format!("{} GB", decimal_gb(bytes))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct SectorHeader {
    pub scan_number: u32,
    pub frame_number: u32,
    pub sector_index: u16,
    pub sequence: u32,
    pub flags: u16,
}

impl SectorHeader {
    fn encode_with_len(&self, payload_len: u32) -> Result<Bytes, ProtocolError> {
        if self.sector_index as usize >= N_SECTORS {
            return Err(ProtocolError::SectorIndex(self.sector_index));
        }
        let mut buf = BytesMut::with_capacity(SECTOR_HEADER_LEN);
        buf.put_u32_le(SECTOR_MAGIC);
        buf.put_u16_le(WIRE_VERSION);
        buf.put_u32_le(self.scan_number);
        buf.put_u32_le(self.frame_number);
        buf.put_u16_le(self.sector_index);
        buf.put_u32_le(self.sequence);
        buf.put_u16_le(self.flags);
        buf.put_u32_le(payload_len);
        Ok(buf.freeze())
    }
}

/// Decoded header frame plus the payload length it declares.
pub fn decode_sector_header(frame: &[u8]) -> Result<(SectorHeader, usize), ProtocolError> {
    let mut r = Reader::new(frame, "sector header");
    r.expect_magic(SECTOR_MAGIC)?;
    r.expect_version()?;
    let header = SectorHeader {
        scan_number: r.u32()?,
        frame_number: r.u32()?,
        sector_index: r.u16()?,
        sequence: r.u32()?,
        flags: r.u16()?,
    };
    let payload_len = r.u32()? as usize;
    r.finish()?;
    if header.sector_index as usize >= N_SECTORS {
        return Err(ProtocolError::SectorIndex(header.sector_index));
    }
    Ok((header, payload_len))
}

/// One sector of one frame: header plus row-major little-endian u16 pixels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SectorMessage {
    pub header: SectorHeader,
    pub payload: Bytes,
}

impl SectorMessage {
    pub fn from_pixels(header: SectorHeader, pixels: &[u16]) -> Self {
        let mut buf = vec![0u8; pixels.len() * 2];
        for (dst, &p) in buf.chunks_exact_mut(2).zip(pixels) {
            dst.copy_from_slice(&p.to_le_bytes());
        }
        Self {
            header,
            payload: Bytes::from(buf),
        }
    }

    pub fn pixels(&self) -> Vec<u16> {
        payload_pixels(&self.payload)
    }
}

pub fn payload_pixels(payload: &[u8]) -> Vec<u16> {
    payload
        .chunks_exact(2)
        .map(|c| u16::from_le_bytes([c[0], c[1]]))
        .collect()
}

/// Encodes a sector message into its (header, payload) frames.
pub fn encode_sector_message(
    msg: &SectorMessage,
    geometry: &DetectorGeometry,
) -> Result<[Bytes; 2], ProtocolError> {
    if msg.payload.len() != geometry.sector_bytes() {
        return Err(ProtocolError::GeometryMismatch {
            expected: geometry.sector_bytes(),
            actual: msg.payload.len(),
        });
    }
    let header = msg.header.encode_with_len(msg.payload.len() as u32)?;
    Ok([header, msg.payload.clone()])
}

pub fn decode_sector_message(frames: &[Bytes]) -> Result<SectorMessage, ProtocolError> {
    if frames.len() != 2 {
        return Err(ProtocolError::FrameCount {
            expected: 2,
            actual: frames.len(),
        });
    }
    let (header, declared) = decode_sector_header(&frames[0])?;
    let actual = frames[1].len();
    if actual < declared {
        return Err(ProtocolError::Truncated {
            field: "payload",
            needed: declared,
            available: actual,
        });
    }
    if actual > declared {
        return Err(ProtocolError::PayloadLength { declared, actual });
    }
    Ok(SectorMessage {
        header,
        payload: frames[1].clone(),
    })
}

/// Expected message counts per NodeGroup uid for one scan.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct InfoMap {
    pub scan_number: u32,
    pub entries: Vec<(String, u64)>,
}

impl InfoMap {
    pub fn new(scan_number: u32, entries: Vec<(String, u64)>) -> Self {
        Self {
            scan_number,
            entries,
        }
    }

    pub fn total(&self) -> u64 {
        self.entries.iter().map(|(_, c)| c).sum()
    }

    pub fn get(&self, uid: &str) -> Option<u64> {
        self.entries.iter().find(|(u, _)| u == uid).map(|(_, c)| *c)
    }

    pub fn uids(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(u, _)| u.as_str())
    }

    fn validate(&self) -> Result<(), ProtocolError> {
        if self.entries.is_empty() {
            return Err(ProtocolError::EmptyInfoMap);
        }
        let mut seen = std::collections::HashSet::new();
        for (uid, _) in &self.entries {
            if uid.is_empty() || uid.len() > MAX_UID_LEN {
                return Err(ProtocolError::BadUid(uid.clone()));
            }
            if !seen.insert(uid.as_str()) {
                return Err(ProtocolError::DuplicateUid(uid.clone()));
            }
        }
        Ok(())
    }
}

pub fn encode_info_map(map: &InfoMap) -> Result<Bytes, ProtocolError> {
    map.validate()?;
    let mut buf = BytesMut::with_capacity(12 + map.entries.len() * 24);
    buf.put_u32_le(INFO_MAGIC);
    buf.put_u16_le(WIRE_VERSION);
    buf.put_u32_le(map.scan_number);
    buf.put_u16_le(map.entries.len() as u16);
    for (uid, count) in &map.entries {
        buf.put_u16_le(uid.len() as u16);
        buf.put_slice(uid.as_bytes());
        buf.put_u64_le(*count);
    }
    Ok(buf.freeze())
}

pub fn decode_info_map(frame: &[u8]) -> Result<InfoMap, ProtocolError> {
    let mut r = Reader::new(frame, "info map");
    r.expect_magic(INFO_MAGIC)?;
    r.expect_version()?;
    let scan_number = r.u32()?;
    let n = r.u16()? as usize;
    let mut entries = Vec::with_capacity(n);
    for _ in 0..n {
        let uid = r.string()?;
        let count = r.u64()?;
        entries.push((uid, count));
    }
    r.finish()?;
    let map = InfoMap::new(scan_number, entries);
    map.validate()?;
    Ok(map)
}

/// Sent once by an aggregator thread on every downstream connection so the
/// NodeGroup can tell its four upstream feeds apart.
pub fn encode_hello(sector_index: u16) -> Bytes {
    let mut buf = BytesMut::with_capacity(8);
    buf.put_u32_le(HELLO_MAGIC);
    buf.put_u16_le(WIRE_VERSION);
    buf.put_u16_le(sector_index);
    buf.freeze()
}

pub fn decode_hello(frame: &[u8]) -> Result<u16, ProtocolError> {
    let mut r = Reader::new(frame, "hello");
    r.expect_magic(HELLO_MAGIC)?;
    r.expect_version()?;
    let sector = r.u16()?;
    r.finish()?;
    if sector as usize >= N_SECTORS {
        return Err(ProtocolError::SectorIndex(sector));
    }
    Ok(sector)
}

/// Any message that can appear on a pipeline channel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PipelineMessage {
    Hello { sector_index: u16 },
    Info(InfoMap),
    /// Header decoded, payload left as raw bytes.
    Sector(SectorHeader, Bytes),
}

/// Reads the leading magic of the first frame without decoding the rest.
pub fn peek_magic(frame: &[u8]) -> Option<u32> {
    frame
        .get(..4)
        .map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
}

pub fn decode_pipeline_message(frames: &[Bytes]) -> Result<PipelineMessage, ProtocolError> {
    let first = frames.first().ok_or(ProtocolError::FrameCount {
        expected: 1,
        actual: 0,
    })?;
    match peek_magic(first) {
        Some(SECTOR_MAGIC) => {
            let msg = decode_sector_message(frames)?;
            Ok(PipelineMessage::Sector(msg.header, msg.payload))
        }
        Some(INFO_MAGIC) | Some(HELLO_MAGIC) if frames.len() != 1 => Err(ProtocolError::FrameCount {
            expected: 1,
            actual: frames.len(),
        }),
        Some(INFO_MAGIC) => Ok(PipelineMessage::Info(decode_info_map(first)?)),
        Some(HELLO_MAGIC) => Ok(PipelineMessage::Hello {
            sector_index: decode_hello(first)?,
        }),
        Some(found) => Err(ProtocolError::BadMagic {
            expected: SECTOR_MAGIC,
            found,
        }),
        None => Err(ProtocolError::Truncated {
            field: "magic",
            needed: 4,
            available: first.len(),
        }),
    }
}

/// Little-endian cursor shared by the decoders in this crate.
pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(buf: &'a [u8], what: &'static str) -> Self {
        Self { buf, pos: 0, what }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8], ProtocolError> {
        let available = self.buf.len() - self.pos;
        if available < n {
            return Err(ProtocolError::Truncated {
                field: self.what,
                needed: self.pos + n,
                available: self.buf.len(),
            });
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    pub(crate) fn u8(&mut self) -> Result<u8, ProtocolError> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn u16(&mut self) -> Result<u16, ProtocolError> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    pub(crate) fn u32(&mut self) -> Result<u32, ProtocolError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes(b.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self) -> Result<u64, ProtocolError> {
        let b = self.take(8)?;
        Ok(u64::from_le_bytes(b.try_into().unwrap()))
    }

    pub(crate) fn f64(&mut self) -> Result<f64, ProtocolError> {
        Ok(f64::from_bits(self.u64()?))
    }

    pub(crate) fn string(&mut self) -> Result<String, ProtocolError> {
        let len = self.u16()? as usize;
        let bytes = self.take(len)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| ProtocolError::Utf8)
    }

    pub(crate) fn expect_magic(&mut self, expected: u32) -> Result<(), ProtocolError> {
        let found = self.u32()?;
        if found != expected {
            return Err(ProtocolError::BadMagic { expected, found });
        }
        Ok(())
    }

    pub(crate) fn expect_version(&mut self) -> Result<(), ProtocolError> {
        let v = self.u16()?;
        if v != WIRE_VERSION {
            return Err(ProtocolError::BadVersion(v));
        }
        Ok(())
    }

    pub(crate) fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    pub(crate) fn finish(&self) -> Result<(), ProtocolError> {
        match self.remaining() {
            0 => Ok(()),
            n => Err(ProtocolError::Trailing(n)),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn zero_message(geometry: &DetectorGeometry) -> SectorMessage {
        SectorMessage {
            header: SectorHeader {
                scan_number: 1,
                ..Default::default()
            },
            payload: Bytes::from(vec![0u8; geometry.sector_bytes()]),
        }
    }

    #[test]
    fn default_geometry_sector_shape() {
        let g = DetectorGeometry::default();
        assert_eq!(g.sector_rows(), 144);
        assert_eq!(g.sector_pixels(), 144 * 576);
        assert!(DetectorGeometry::new(10, 8).is_err());
        assert!(DetectorGeometry::new(0, 8).is_err());
    }

    #[test]
    fn payload_len_field_for_full_sector() {
        let g = DetectorGeometry::default();
        let [header, payload] = encode_sector_message(&zero_message(&g), &g).unwrap();
        assert_eq!(header.len(), SECTOR_HEADER_LEN);
        assert_eq!(u32::from_le_bytes(header[22..26].try_into().unwrap()), 165_888);
        assert_eq!(payload.len(), 165_888);
        assert_eq!(&header[..4], &0x5334_4443u32.to_le_bytes());
    }

    #[test]
    fn header_layout_is_bit_exact() {
        let header = SectorHeader {
            scan_number: 0x0102_0304,
            frame_number: 0x0A0B_0C0D,
            sector_index: 3,
            sequence: 0x1122_3344,
            flags: FLAG_SYNTHETIC,
        };
        let bytes = header.encode_with_len(8).unwrap();
        let expected: Vec<u8> = [
            &[0x43, 0x44, 0x34, 0x53][..],
            &[1, 0],
            &[4, 3, 2, 1],
            &[0x0D, 0x0C, 0x0B, 0x0A],
            &[3, 0],
            &[0x44, 0x33, 0x22, 0x11],
            &[1, 0],
            &[8, 0, 0, 0],
        ]
        .concat();
        assert_eq!(bytes.as_ref(), expected.as_slice());
    }

    #[test]
    fn sector_index_four_is_rejected() {
        let g = DetectorGeometry::new(8, 4).unwrap();
        let mut msg = zero_message(&g);
        msg.header.sector_index = 4;
        assert_eq!(
            encode_sector_message(&msg, &g),
            Err(ProtocolError::SectorIndex(4))
        );
    }

    #[test]
    fn payload_geometry_mismatch() {
        let g = DetectorGeometry::new(8, 4).unwrap();
        let mut msg = zero_message(&g);
        msg.payload = Bytes::from(vec![0u8; 3]);
        assert!(matches!(
            encode_sector_message(&msg, &g),
            Err(ProtocolError::GeometryMismatch { .. })
        ));
    }

    #[test]
    fn bad_magic() {
        let g = DetectorGeometry::default();
        let [header, payload] = encode_sector_message(&zero_message(&g), &g).unwrap();
        let mut h = header.to_vec();
        h[..4].copy_from_slice(&[0, 0, 0, 0]);
        let err = decode_sector_message(&[Bytes::from(h), payload]).unwrap_err();
        assert!(matches!(err, ProtocolError::BadMagic { found: 0, .. }));
        assert!(err.to_string().contains("bad magic"));
    }

    #[test]
    fn bad_version() {
        let g = DetectorGeometry::default();
        let [header, payload] = encode_sector_message(&zero_message(&g), &g).unwrap();
        let mut h = header.to_vec();
        h[4] = 9;
        assert_eq!(
            decode_sector_message(&[Bytes::from(h), payload]),
            Err(ProtocolError::BadVersion(9))
        );
    }

    #[test]
    fn truncated_payload() {
        let g = DetectorGeometry::default();
        let [header, payload] = encode_sector_message(&zero_message(&g), &g).unwrap();
        let short = payload.slice(..payload.len() - 1);
        let err = decode_sector_message(&[header, short]).unwrap_err();
        assert!(matches!(err, ProtocolError::Truncated { field: "payload", .. }));
        assert!(err.to_string().contains("truncated"));
    }

    #[test]
    fn truncated_header() {
        let g = DetectorGeometry::default();
        let [header, payload] = encode_sector_message(&zero_message(&g), &g).unwrap();
        let err = decode_sector_message(&[header.slice(..10), payload]).unwrap_err();
        assert!(matches!(err, ProtocolError::Truncated { .. }));
    }

    #[test]
    fn info_map_round_trip() {
        let map = InfoMap::new(7, vec![("A".into(), 100)]);
        let bytes = encode_info_map(&map).unwrap();
        assert_eq!(bytes.len(), 4 + 2 + 4 + 2 + 2 + 1 + 8);
        assert_eq!(decode_info_map(&bytes).unwrap(), map);
    }

    #[test]
    fn info_map_ten_uids_ten_each() {
        let entries = (0..10).map(|i| (format!("ng-{i}"), 10)).collect();
        let map = InfoMap::new(1, entries);
        let bytes = encode_info_map(&map).unwrap();
        assert_eq!(u16::from_le_bytes([bytes[10], bytes[11]]), 10);
        let back = decode_info_map(&bytes).unwrap();
        assert_eq!(back.total(), 100);
    }

    #[test]
    fn info_map_errors() {
        assert_eq!(
            encode_info_map(&InfoMap::new(1, vec![])),
            Err(ProtocolError::EmptyInfoMap)
        );
        let dup = InfoMap::new(1, vec![("A".into(), 1), ("A".into(), 2)]);
        assert_eq!(
            encode_info_map(&dup),
            Err(ProtocolError::DuplicateUid("A".into()))
        );
        let long = InfoMap::new(1, vec![("x".repeat(65), 1)]);
        assert!(matches!(encode_info_map(&long), Err(ProtocolError::BadUid(_))));
    }

    #[test]
    fn table_one_sizes() {
        let g = DetectorGeometry::default();
        assert_eq!(scan_raw_size(1, 1, &g), 663_552);
        assert_eq!(scan_raw_size(128, 128, &g), 10_871_635_968);
        assert_eq!(format_decimal_gb(scan_raw_size(128, 128, &g)), "10 GB");
        assert_eq!(scan_raw_size(1024, 1024, &g), 695_784_701_952);
        assert_eq!(format_decimal_gb(scan_raw_size(1024, 1024, &g)), "695 GB");
    }

    #[test]
    fn pipeline_message_dispatch() {
        let hello = encode_hello(2);
        assert_eq!(
            decode_pipeline_message(&[hello]).unwrap(),
            PipelineMessage::Hello { sector_index: 2 }
        );
        let info = encode_info_map(&InfoMap::new(3, vec![("a".into(), 1)])).unwrap();
        assert!(matches!(
            decode_pipeline_message(&[info]).unwrap(),
            PipelineMessage::Info(_)
        ));
        let junk = Bytes::from_static(&[1, 2, 3, 4, 5]);
        assert!(matches!(
            decode_pipeline_message(&[junk]),
            Err(ProtocolError::BadMagic { .. })
        ));
    }

    proptest! {
        #[test]
        fn sector_round_trip(
            scan in any::<u32>(), frame in any::<u32>(), sector in 0u16..4,
            seq in any::<u32>(), flags in any::<u16>(),
            pixels in proptest::collection::vec(any::<u16>(), 8 * 3 / 4 * 4..=8 * 3 / 4 * 4)
        ) {
            let g = DetectorGeometry::new(8, 3).unwrap();
            let header = SectorHeader { scan_number: scan, frame_number: frame, sector_index: sector, sequence: seq, flags };
            let msg = SectorMessage::from_pixels(header, &pixels[..g.sector_pixels()]);
            let frames = encode_sector_message(&msg, &g).unwrap();
            let back = decode_sector_message(&frames).unwrap();
            prop_assert_eq!(&back, &msg);
            prop_assert_eq!(back.pixels(), pixels[..g.sector_pixels()].to_vec());
        }

        #[test]
        fn info_round_trip(scan in any::<u32>(), counts in proptest::collection::btree_map("[a-z0-9-]{1,64}", any::<u64>(), 1..20)) {
            let map = InfoMap::new(scan, counts.into_iter().collect());
            let bytes = encode_info_map(&map).unwrap();
            prop_assert_eq!(decode_info_map(&bytes).unwrap(), map);
        }
    }
}
