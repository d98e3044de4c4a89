use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::time::Instant;

use bytes::Bytes;

use crate::counting::Frame;
use crate::producer::place_sector;
use crate::protocol::{DetectorGeometry, SectorHeader, N_SECTORS};

/// One frame under reassembly.
#[derive(Debug, Clone)]
pub struct FrameSlot {
    pub frame_number: u32,
    pub sectors: [Option<Bytes>; N_SECTORS],
    pub first_seen: Instant,
}

impl FrameSlot {
    fn new(frame_number: u32) -> Self {
        Self {
            frame_number,
            sectors: Default::default(),
            first_seen: Instant::now(),
        }
    }

    pub fn mask(&self) -> u8 {
        self.sectors
            .iter()
            .enumerate()
            .filter(|(_, s)| s.is_some())
            .fold(0, |m, (i, _)| m | 1 << i)
    }

    pub fn present(&self) -> usize {
        self.sectors.iter().filter(|s| s.is_some()).count()
    }

    fn into_frame(self, geometry: &DetectorGeometry) -> Frame {
        let mask = self.mask();
        let mut pixels = vec![0u16; geometry.frame_pixels()];
        for (s, payload) in self.sectors.iter().enumerate() {
            if let Some(p) = payload {
                place_sector(&mut pixels, geometry, s as u16, p);
            }
        }
        Frame {
            frame_number: self.frame_number,
            sector_mask: mask,
            pixels,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Assembled {
    /// The fourth sector arrived; the slot is gone.
    Complete(Frame),
    Pending,
    /// Same (frame, sector) already seen; payload ignored.
    Duplicate,
    /// Sector index or payload size does not fit the geometry.
    Rejected,
}

/// Reassembly bookkeeping for one scan on one NodeGroup.
///
/// Conservation: `completed·4 + incomplete_sectors + duplicates + rejected = received`
/// once [`AssemblyState::finalize`] has run.
#[derive(Debug)]
pub struct AssemblyState {
    geometry: DetectorGeometry,
    slots: BTreeMap<u32, FrameSlot>,
    dispatched: HashSet<u32>,
    pub received: u64,
    pub completed: u64,
    pub incomplete: u64,
    pub incomplete_sectors: u64,
    pub duplicates: u64,
    pub rejected: u64,
}

impl AssemblyState {
    pub fn new(geometry: DetectorGeometry) -> Self {
        Self {
            geometry,
            slots: BTreeMap::new(),
            dispatched: HashSet::new(),
            received: 0,
            completed: 0,
            incomplete: 0,
            incomplete_sectors: 0,
            duplicates: 0,
            rejected: 0,
        }
    }

    pub fn geometry(&self) -> DetectorGeometry {
        self.geometry
    }

    pub fn open_slots(&self) -> usize {
        self.slots.len()
    }

    pub fn assemble(&mut self, header: &SectorHeader, payload: Bytes) -> Assembled {
        self.received += 1;
        let s = header.sector_index as usize;
        if s >= N_SECTORS || payload.len() != self.geometry.sector_bytes() {
            self.rejected += 1;
            return Assembled::Rejected;
        }
        let f = header.frame_number;
        if self.dispatched.contains(&f) {
            self.duplicates += 1;
            return Assembled::Duplicate;
        }
        let slot = self.slots.entry(f).or_insert_with(|| FrameSlot::new(f));
        if slot.sectors[s].is_some() {
            self.duplicates += 1;
            return Assembled::Duplicate;
        }
        slot.sectors[s] = Some(payload);
        if slot.present() < N_SECTORS {
            return Assembled::Pending;
        }
        let slot = self.slots.remove(&f).expect("slot present");
        self.dispatched.insert(f);
        self.completed += 1;
        Assembled::Complete(slot.into_frame(&self.geometry))
    }

    /// Emits every open slot with missing sectors zero-filled, plus an
    /// all-zero frame with mask 0 for each `owned` frame never seen at all.
    /// Drains the state; a second call returns nothing.
    pub fn finalize(&mut self, owned: impl IntoIterator<Item = u32>) -> Vec<Frame> {
        let slots = std::mem::take(&mut self.slots);
        let mut out = Vec::with_capacity(slots.len());
        for (f, slot) in slots {
            self.incomplete += 1;
            self.incomplete_sectors += slot.present() as u64;
            self.dispatched.insert(f);
            out.push(slot.into_frame(&self.geometry));
        }
        let missing: BTreeSet<u32> = owned.into_iter().filter(|f| !self.dispatched.contains(f)).collect();
        for f in missing {
            self.incomplete += 1;
            self.dispatched.insert(f);
            out.push(Frame {
                frame_number: f,
                sector_mask: 0,
                pixels: vec![0; self.geometry.frame_pixels()],
            });
        }
        out.sort_by_key(|f| f.frame_number);
        out
    }

    pub fn is_conserved(&self) -> bool {
        self.completed * N_SECTORS as u64 + self.incomplete_sectors + self.duplicates + self.rejected == self.received
    }

    pub fn was_dispatched(&self, frame_number: u32) -> bool {
        self.dispatched.contains(&frame_number)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn geom() -> DetectorGeometry {
        DetectorGeometry::new(8, 4).unwrap()
    }

    fn header(frame: u32, sector: u16) -> SectorHeader {
        SectorHeader {
            scan_number: 1,
            frame_number: frame,
            sector_index: sector,
            sequence: 0,
            flags: 0,
        }
    }

    fn constant(value: u16) -> Bytes {
        let g = geom();
        Bytes::from(vec![value; g.sector_pixels()].iter().flat_map(|v| v.to_le_bytes()).collect::<Vec<u8>>())
    }

    #[test]
    fn four_sectors_complete_in_any_order() {
        let mut st = AssemblyState::new(geom());
        for (i, s) in [2u16, 0, 3].into_iter().enumerate() {
            assert_eq!(st.assemble(&header(5, s), constant(s)), Assembled::Pending, "step {i}");
        }
        assert_eq!(st.open_slots(), 1);
        let Assembled::Complete(frame) = st.assemble(&header(5, 1), constant(1)) else {
            panic!("fourth sector should complete")
        };
        assert_eq!(frame.frame_number, 5);
        assert!(frame.is_complete());
        assert_eq!(st.open_slots(), 0);
    }

    #[test]
    fn sector_bands_in_index_order() {
        let g = DetectorGeometry::new(576, 576).unwrap();
        let mut st = AssemblyState::new(g);
        let mut frame = None;
        for s in 0..4u16 {
            let payload = Bytes::from(
                vec![s * 2 + 7; g.sector_pixels()]
                    .iter()
                    .flat_map(|v| v.to_le_bytes())
                    .collect::<Vec<u8>>(),
            );
            if let Assembled::Complete(f) = st.assemble(&header(0, s), payload) {
                frame = Some(f);
            }
        }
        let frame = frame.unwrap();
        for r in 0..576usize {
            let expected = (r / 144) as u16 * 2 + 7;
            assert!(frame.pixels[r * 576..(r + 1) * 576].iter().all(|&p| p == expected), "row {r}");
        }
        // sector 2 is rows 288..432
        assert_eq!(frame.pixels[288 * 576], 11);
        assert_eq!(frame.pixels[431 * 576 + 575], 11);
    }

    #[test]
    fn duplicates_are_counted_and_ignored() {
        let mut st = AssemblyState::new(geom());
        st.assemble(&header(0, 0), constant(1));
        assert_eq!(st.assemble(&header(0, 0), constant(9)), Assembled::Duplicate);
        for s in 1..4 {
            st.assemble(&header(0, s), constant(1));
        }
        assert_eq!(st.assemble(&header(0, 3), constant(1)), Assembled::Duplicate);
        assert_eq!(st.duplicates, 2);
        assert!(st.finalize([]).is_empty());
        assert!(st.is_conserved());
    }

    #[test]
    fn finalize_emits_incomplete_and_unseen_frames() {
        let mut st = AssemblyState::new(geom());
        for f in 0..16u32 {
            for s in 0..4u16 {
                if (f, s) != (6, 2) {
                    st.assemble(&header(f, s), constant(3));
                }
            }
        }
        let out = st.finalize(0..16);
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].frame_number, 6);
        assert_eq!(out[0].sector_mask, 0b1011);
        // the missing band is zero-filled
        let g = geom();
        let band = &out[0].pixels[2 * g.sector_pixels()..3 * g.sector_pixels()];
        assert!(band.iter().all(|&p| p == 0));
        assert_eq!(st.completed, 15);
        assert_eq!(st.incomplete, 1);
        assert!(st.is_conserved());
        assert!(st.finalize(0..16).is_empty());

        let mut st = AssemblyState::new(geom());
        st.assemble(&header(1, 0), constant(3));
        st.assemble(&header(2, 3), constant(3));
        let out = st.finalize([0, 1, 2]);
        let masks: Vec<_> = out.iter().map(|f| (f.frame_number, f.sector_mask)).collect();
        assert_eq!(masks, vec![(0, 0), (1, 0b0001), (2, 0b1000)]);
    }

    #[test]
    fn bad_sector_is_rejected() {
        let mut st = AssemblyState::new(geom());
        assert_eq!(st.assemble(&header(0, 4), constant(0)), Assembled::Rejected);
        assert_eq!(st.assemble(&header(0, 0), Bytes::from_static(b"xx")), Assembled::Rejected);
        assert!(st.is_conserved());
    }

    proptest! {
        #[test]
        fn conservation_and_exactly_once(msgs in prop::collection::vec((0u32..12, 0u16..4), 0..200)) {
            let mut st = AssemblyState::new(geom());
            let mut dispatched = Vec::new();
            for (f, s) in &msgs {
                if let Assembled::Complete(fr) = st.assemble(&header(*f, *s), constant(1)) {
                    dispatched.push(fr.frame_number);
                }
            }
            for fr in st.finalize(0..12) {
                dispatched.push(fr.frame_number);
            }
            prop_assert!(st.is_conserved());
            prop_assert_eq!(st.received, msgs.len() as u64);
            dispatched.sort();
            let expected: Vec<u32> = (0..12).collect();
            prop_assert_eq!(dispatched, expected);
        }
    }
}
