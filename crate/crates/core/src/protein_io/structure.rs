use std::fmt::Write as _;

use super::amino::AminoAcid;
use crate::error::{Error, Result};

pub const DGS_HEADER: &str = "#dgs v1";

/// Optional per-residue scalars: secondary-structure class, SASA, B-factor.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ExtraFeatures {
    pub ss_class: u8,
    pub sasa: f64,
    pub bfactor: f64,
}

impl ExtraFeatures {
    pub fn as_array(&self) -> [f64; 3] {
        [self.ss_class as f64, self.sasa, self.bfactor]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Residue {
    /// 1-based position in the chain.
    pub index: usize,
    pub aa: AminoAcid,
    /// Representative (C-alpha) coordinate in Angstrom.
    pub coord: [f64; 3],
    pub extra: Option<ExtraFeatures>,
}

/// An ordered single chain, one coordinate per residue.
#[derive(Clone, Debug, PartialEq)]
pub struct Structure {
    residues: Vec<Residue>,
}

impl Structure {
    /// Validates the 1..L numbering, finite coordinates and `L >= 2`.
    pub fn new(residues: Vec<Residue>) -> Result<Self> {
        if residues.len() < 2 {
            return Err(Error::Parse { line: 0, reason: format!("need at least 2 residues, got {}", residues.len()) });
        }
        for (k, r) in residues.iter().enumerate() {
            if r.index != k + 1 {
                return Err(Error::NonContiguousIndex { line: k + 2, expected: k + 1, found: r.index });
            }
            if r.coord.iter().any(|c| !c.is_finite()) {
                return Err(Error::Parse { line: k + 2, reason: "non-finite coordinate".into() });
            }
        }
        Ok(Self { residues })
    }

    /// Convenience constructor from a sequence and coordinates, no extra features.
    pub fn from_parts(seq: &[AminoAcid], coords: &[[f64; 3]]) -> Result<Self> {
        if seq.len() != coords.len() {
            return Err(Error::LengthMismatch { sequence: seq.len(), structure: coords.len() });
        }
        let residues = seq
            .iter()
            .zip(coords)
            .enumerate()
            .map(|(i, (&aa, &coord))| Residue { index: i + 1, aa, coord, extra: None })
            .collect();
        Self::new(residues)
    }

    pub fn len(&self) -> usize {
        self.residues.len()
    }

    pub fn is_empty(&self) -> bool {
        self.residues.is_empty()
    }

    pub fn residues(&self) -> &[Residue] {
        &self.residues
    }

    pub fn sequence(&self) -> Vec<AminoAcid> {
        self.residues.iter().map(|r| r.aa).collect()
    }

    pub fn sequence_string(&self) -> String {
        self.residues.iter().map(|r| r.aa.letter()).collect()
    }

    pub fn coords(&self) -> Vec<[f64; 3]> {
        self.residues.iter().map(|r| r.coord).collect()
    }

    pub fn distance(&self, i: usize, j: usize) -> f64 {
        distance(&self.residues[i].coord, &self.residues[j].coord)
    }

    /// Serializes to the `.dgs` text format.
    pub fn to_dgs(&self) -> String {
        let mut out = String::from(DGS_HEADER);
        out.push('\n');
        for r in &self.residues {
            let [x, y, z] = r.coord;
            write!(out, "{}\t{}\t{}\t{}\t{}", r.index, r.aa, x, y, z).unwrap();
            if let Some(e) = r.extra {
                write!(out, "\t{}\t{}\t{}", e.ss_class, e.sasa, e.bfactor).unwrap();
            }
            out.push('\n');
        }
        out
    }
}

pub fn distance(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

fn parse_f64(field: &str, line: usize, what: &str) -> Result<f64> {
    let v: f64 = field
        .trim()
        .parse()
        .map_err(|_| Error::Parse { line, reason: format!("bad {what} {field:?}") })?;
    if !v.is_finite() {
        return Err(Error::Parse { line, reason: format!("non-finite {what}") });
    }
    Ok(v)
}

/// Parses a `.dgs` structure file.
pub fn parse_structure(text: &str) -> Result<Structure> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim_end() == DGS_HEADER => {}
        Some((_, h)) => return Err(Error::Parse { line: 1, reason: format!("expected header {DGS_HEADER:?}, got {h:?}") }),
        None => return Err(Error::Parse { line: 1, reason: "empty file".into() }),
    }
    let mut residues = Vec::new();
    for (k, raw) in lines {
        let line = k + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = raw.split('\t').collect();
        if fields.len() != 5 && fields.len() != 8 {
            return Err(Error::Parse { line, reason: format!("expected 5 or 8 tab-separated fields, got {}", fields.len()) });
        }
        let index: usize = fields[0]
            .trim()
            .parse()
            .map_err(|_| Error::Parse { line, reason: format!("bad index {:?}", fields[0]) })?;
        let expected = residues.len() + 1;
        if index != expected {
            return Err(Error::NonContiguousIndex { line, expected, found: index });
        }
        let mut letters = fields[1].trim().chars();
        let aa = match (letters.next(), letters.next()) {
            (Some(c), None) => AminoAcid::from_char(c)?,
            _ => return Err(Error::Parse { line, reason: format!("bad residue field {:?}", fields[1]) }),
        };
        let coord = [
            parse_f64(fields[2], line, "x")?,
            parse_f64(fields[3], line, "y")?,
            parse_f64(fields[4], line, "z")?,
        ];
        let extra = if fields.len() == 8 {
            let ss = fields[5].trim();
            let ss_class = match ss {
                "0" => 0,
                "1" => 1,
                "2" => 2,
                _ => return Err(Error::Parse { line, reason: format!("ss class must be 0, 1 or 2, got {ss:?}") }),
            };
            let sasa = parse_f64(fields[6], line, "sasa")?;
            if sasa < 0.0 {
                return Err(Error::Parse { line, reason: "negative sasa".into() });
            }
            let bfactor = parse_f64(fields[7], line, "bfactor")?;
            Some(ExtraFeatures { ss_class, sasa, bfactor })
        } else {
            None
        };
        residues.push(Residue { index, aa, coord, extra });
    }
    Structure::new(residues)
}
