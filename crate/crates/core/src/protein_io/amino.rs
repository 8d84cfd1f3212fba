use std::fmt;

use crate::error::{Error, Result};

/// The 20 canonical amino acids in one-letter alphabetical order.
pub const ALPHABET: [char; 20] = [
    'A', 'C', 'D', 'E', 'F', 'G', 'H', 'I', 'K', 'L', 'M', 'N', 'P', 'Q', 'R', 'S', 'T', 'V', 'W', 'Y',
];

/// Kyte-Doolittle hydropathy, indexed like [`ALPHABET`].
const KYTE_DOOLITTLE: [f64; 20] = [
    1.8, 2.5, -3.5, -3.5, 2.8, -0.4, -3.2, 4.5, -3.9, 3.8, 1.9, -3.5, -1.6, -3.5, -4.5, -0.8, -0.7, 4.2, -0.9, -1.3,
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct AminoAcid(u8);

impl AminoAcid {
    pub fn from_char(c: char) -> Result<Self> {
        ALPHABET
            .iter()
            .position(|&a| a == c)
            .map(|i| AminoAcid(i as u8))
            .ok_or(Error::UnknownResidue(c))
    }

    pub fn from_index(i: usize) -> Self {
        assert!(i < 20, "amino acid index {i} out of range");
        AminoAcid(i as u8)
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }

    pub fn letter(self) -> char {
        ALPHABET[self.index()]
    }

    pub fn hydropathy(self) -> f64 {
        KYTE_DOOLITTLE[self.index()]
    }
}

impl fmt::Display for AminoAcid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.letter())
    }
}

/// Parses a string of one-letter codes.
pub fn parse_sequence(seq: &str) -> Result<Vec<AminoAcid>> {
    seq.chars().map(AminoAcid::from_char).collect()
}
