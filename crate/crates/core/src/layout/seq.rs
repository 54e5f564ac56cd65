//! Flat token-sequence form of a layout.
//!
//! A layout with `n` elements serializes to `5n + 2` ids:
//! `[BOS, c_1, x_1, y_1, w_1, h_1, ..., c_n, x_n, y_n, w_n, h_n, EOS]`.
//! Attribute identity is positional; every slot also carries a conditioning
//! flag so generation never overwrites what the caller supplied.

use super::vocab::Vocabulary;
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Number of token slots per element: category plus four geometry values.
pub const SLOTS_PER_ELEMENT: usize = 5;

/// Role of one sequence position.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SlotKind {
    /// BOS or EOS.
    Special,
    Category,
    CoordX,
    CoordY,
    CoordW,
    CoordH,
}

impl SlotKind {
    /// Attribute index within an element: category 0, then x, y, w, h.
    pub fn attr_index(self) -> Option<usize> {
        match self {
            SlotKind::Special => None,
            SlotKind::Category => Some(0),
            SlotKind::CoordX => Some(1),
            SlotKind::CoordY => Some(2),
            SlotKind::CoordW => Some(3),
            SlotKind::CoordH => Some(4),
        }
    }

    pub fn from_attr_index(attr: usize) -> Result<Self> {
        match attr {
            0 => Ok(SlotKind::Category),
            1 => Ok(SlotKind::CoordX),
            2 => Ok(SlotKind::CoordY),
            3 => Ok(SlotKind::CoordW),
            4 => Ok(SlotKind::CoordH),
            _ => Err(Error::domain(format!("attribute index {attr} outside 0..5"))),
        }
    }

    pub fn is_geometry(self) -> bool {
        matches!(self, SlotKind::CoordX | SlotKind::CoordY | SlotKind::CoordW | SlotKind::CoordH)
    }
}

/// Returns the slot kind at `pos` for a sequence of `len` ids.
pub fn slot_kind(pos: usize, len: usize) -> Result<SlotKind> {
    if len < 2 + SLOTS_PER_ELEMENT || (len - 2) % SLOTS_PER_ELEMENT != 0 {
        return Err(Error::MalformedSequence(format!(
            "length {len} is not 5n+2 for any n >= 1"
        )));
    }
    if pos >= len {
        return Err(Error::domain(format!("position {pos} outside sequence of {len}")));
    }
    if pos == 0 || pos == len - 1 {
        return Ok(SlotKind::Special);
    }
    SlotKind::from_attr_index((pos - 1) % SLOTS_PER_ELEMENT)
}

/// A token sequence together with per-slot conditioning flags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenSequence {
    ids: Vec<usize>,
    conditioned: Vec<bool>,
}

impl TokenSequence {
    /// Wraps raw ids. The length must be `5n + 2` for some `n >= 1`; BOS/EOS
    /// slots are implicitly conditioned.
    pub fn new(ids: Vec<usize>) -> Result<Self> {
        let len = ids.len();
        slot_kind(0, len)?;
        let mut conditioned = vec![false; len];
        conditioned[0] = true;
        conditioned[len - 1] = true;
        Ok(Self { ids, conditioned })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Number of elements encoded: `(len - 2) / 5`.
    pub fn num_elements(&self) -> usize {
        (self.ids.len() - 2) / SLOTS_PER_ELEMENT
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn id(&self, pos: usize) -> usize {
        self.ids[pos]
    }

    pub fn set_id(&mut self, pos: usize, id: usize) {
        self.ids[pos] = id;
    }

    pub fn kind(&self, pos: usize) -> SlotKind {
        slot_kind(pos, self.ids.len()).expect("constructed sequences always have legal length")
    }

    /// Marks a position as caller-supplied conditioning.
    pub fn set_conditioned(&mut self, pos: usize, flag: bool) {
        let len = self.ids.len();
        if pos == 0 || pos == len - 1 {
            return; // specials stay conditioned
        }
        self.conditioned[pos] = flag;
    }

    pub fn is_conditioned(&self, pos: usize) -> bool {
        self.conditioned[pos]
    }

    /// Sequence position of element `elem`'s attribute `attr`
    /// (0 category, 1 x, 2 y, 3 w, 4 h).
    pub fn position_of(&self, elem: usize, attr: usize) -> Result<usize> {
        if elem >= self.num_elements() {
            return Err(Error::domain(format!(
                "element {elem} outside sequence of {} elements",
                self.num_elements()
            )));
        }
        if attr >= SLOTS_PER_ELEMENT {
            return Err(Error::domain(format!("attribute index {attr} outside 0..5")));
        }
        Ok(1 + elem * SLOTS_PER_ELEMENT + attr)
    }

    /// Inverse of [`position_of`](Self::position_of); `None` for BOS/EOS.
    pub fn element_of(&self, pos: usize) -> Option<(usize, usize)> {
        if pos == 0 || pos >= self.ids.len() - 1 {
            return None;
        }
        Some(((pos - 1) / SLOTS_PER_ELEMENT, (pos - 1) % SLOTS_PER_ELEMENT))
    }

    /// Interior positions that generation may rewrite: not BOS/EOS and not
    /// conditioned.
    pub fn maskable_positions(&self) -> Vec<usize> {
        (1..self.ids.len() - 1).filter(|&p| !self.conditioned[p]).collect()
    }

    /// Positions currently holding the MASK id.
    pub fn masked_positions(&self) -> Vec<usize> {
        self.ids
            .iter()
            .enumerate()
            .filter(|(_, &id)| id == Vocabulary::MASK)
            .map(|(p, _)| p)
            .collect()
    }

    /// Replaces the ids at `positions` with MASK. Conditioned or special
    /// positions are invariant-protected and rejected.
    pub fn apply_masks(&mut self, positions: &[usize]) -> Result<()> {
        for &p in positions {
            if p == 0 || p >= self.ids.len() - 1 {
                return Err(Error::Invariant(format!("cannot mask special position {p}")));
            }
            if self.conditioned[p] {
                return Err(Error::Invariant(format!("cannot mask conditioned position {p}")));
            }
        }
        for &p in positions {
            self.ids[p] = Vocabulary::MASK;
        }
        Ok(())
    }

    /// True when no position holds MASK.
    pub fn is_complete(&self) -> bool {
        self.ids.iter().all(|&id| id != Vocabulary::MASK)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq_of(n: usize) -> TokenSequence {
        let mut ids = vec![Vocabulary::BOS];
        ids.extend(std::iter::repeat(Vocabulary::MASK).take(SLOTS_PER_ELEMENT * n));
        ids.push(Vocabulary::EOS);
        TokenSequence::new(ids).unwrap()
    }

    #[test]
    fn length_law_navigation() {
        let s = seq_of(3);
        assert_eq!(s.len(), 17);
        assert_eq!(s.num_elements(), 3);
        assert_eq!(s.kind(0), SlotKind::Special);
        assert_eq!(s.kind(16), SlotKind::Special);
        assert_eq!(s.kind(1), SlotKind::Category);
        assert_eq!(s.kind(2), SlotKind::CoordX);
        assert_eq!(s.kind(3), SlotKind::CoordY);
        assert_eq!(s.kind(4), SlotKind::CoordW);
        assert_eq!(s.kind(5), SlotKind::CoordH);
        assert_eq!(s.kind(6), SlotKind::Category);
        assert_eq!(s.position_of(2, 4).unwrap(), 15);
        assert_eq!(s.element_of(15), Some((2, 4)));
        assert_eq!(s.element_of(0), None);
        assert_eq!(s.element_of(16), None);
    }

    #[test]
    fn rejects_lengths_off_the_5n_plus_2_lattice() {
        for len in [0usize, 1, 2, 3, 6, 8, 11, 13] {
            assert!(TokenSequence::new(vec![Vocabulary::PAD; len]).is_err(), "len {len}");
        }
        for n in 1..=9 {
            assert!(TokenSequence::new(vec![Vocabulary::PAD; 5 * n + 2]).is_ok());
        }
    }

    #[test]
    fn masking_respects_conditioning() {
        let mut s = seq_of(2);
        s.set_conditioned(1, true);
        assert_eq!(s.maskable_positions(), vec![2, 3, 4, 5, 6, 7, 8, 9, 10]);
        assert!(s.apply_masks(&[1]).is_err());
        assert!(s.apply_masks(&[0]).is_err());
        assert!(s.apply_masks(&[11]).is_err());
        s.apply_masks(&[2, 3]).unwrap();
        assert_eq!(s.id(2), Vocabulary::MASK);
        assert!(!s.is_complete());
    }

    #[test]
    fn specials_stay_conditioned() {
        let mut s = seq_of(1);
        s.set_conditioned(0, false);
        s.set_conditioned(6, false);
        assert!(s.is_conditioned(0));
        assert!(s.is_conditioned(6));
    }

    #[test]
    fn masked_positions_tracks_ids() {
        let mut s = seq_of(1);
        for (pos, id) in [(1, 4usize), (2, 7), (3, 7), (4, 10), (5, 10)] {
            s.set_id(pos, id);
        }
        assert!(s.is_complete());
        assert!(s.masked_positions().is_empty());
        s.apply_masks(&[3]).unwrap();
        assert_eq!(s.masked_positions(), vec![3]);
    }
}
