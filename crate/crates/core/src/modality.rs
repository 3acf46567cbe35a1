use core::fmt;
use core::str::FromStr;

use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

/// Input modality. The derived order `R < S < I < T` is the segment order of
/// the unified sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ModalityKind {
    /// RGB image.
    R,
    /// Sketch image.
    S,
    /// Infrared image.
    I,
    /// Text description.
    T,
}

impl ModalityKind {
    pub const ALL: [ModalityKind; 4] = [ModalityKind::R, ModalityKind::S, ModalityKind::I, ModalityKind::T];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn is_image(self) -> bool {
        self != ModalityKind::T
    }

    pub fn letter(self) -> char {
        match self {
            ModalityKind::R => 'R',
            ModalityKind::S => 'S',
            ModalityKind::I => 'I',
            ModalityKind::T => 'T',
        }
    }

    /// The three other kinds, in canonical order.
    pub fn others(self) -> [ModalityKind; 3] {
        let mut out = [ModalityKind::R; 3];
        let mut n = 0;
        for k in Self::ALL {
            if k != self {
                out[n] = k;
                n += 1;
            }
        }
        out
    }
}

impl fmt::Display for ModalityKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.letter())
    }
}

impl FromStr for ModalityKind {
    type Err = ();

    fn from_str(s: &str) -> Result<Self, ()> {
        match s {
            "R" | "r" => Ok(ModalityKind::R),
            "S" | "s" => Ok(ModalityKind::S),
            "I" | "i" => Ok(ModalityKind::I),
            "T" | "t" => Ok(ModalityKind::T),
            _ => Err(()),
        }
    }
}

/// Presence mask over the four modality kinds.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ModalitySet(u8);

impl ModalitySet {
    pub const EMPTY: ModalitySet = ModalitySet(0);
    pub const FULL: ModalitySet = ModalitySet(0b1111);

    pub fn single(k: ModalityKind) -> Self {
        ModalitySet(1 << k.index())
    }

    /// Low four bits, bit `i` for kind index `i`.
    pub fn from_bits(bits: u8) -> Self {
        ModalitySet(bits & 0b1111)
    }

    pub fn from_kinds(kinds: &[ModalityKind]) -> Self {
        kinds.iter().fold(Self::EMPTY, |s, &k| s.with(k))
    }

    pub fn with(self, k: ModalityKind) -> Self {
        ModalitySet(self.0 | (1 << k.index()))
    }

    pub fn without(self, k: ModalityKind) -> Self {
        ModalitySet(self.0 & !(1 << k.index()))
    }

    pub fn contains(self, k: ModalityKind) -> bool {
        self.0 & (1 << k.index()) != 0
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn intersect(self, other: ModalitySet) -> Self {
        ModalitySet(self.0 & other.0)
    }

    pub fn iter(self) -> impl Iterator<Item = ModalityKind> {
        ModalityKind::ALL.into_iter().filter(move |&k| self.contains(k))
    }

    pub fn kinds(self) -> Vec<ModalityKind> {
        self.iter().collect()
    }

    pub fn bits(self) -> u8 {
        self.0
    }
}

impl fmt::Display for ModalitySet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for k in self.iter() {
            write!(f, "{}", k)?;
        }
        Ok(())
    }
}

impl Serialize for ModalitySet {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        self.kinds().serialize(s)
    }
}

impl<'de> Deserialize<'de> for ModalitySet {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let kinds = Vec::<ModalityKind>::deserialize(d)?;
        Ok(ModalitySet::from_kinds(&kinds))
    }
}
