use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use super::amino::AminoAcid;
use super::structure::{parse_structure, Structure};
use crate::error::{Error, Result};

pub const DGM_HEADER: &str = "#dgm v1";

/// A single-point mutation `wt -> mutant` at 1-based `position`.
#[derive(Clone, Debug, PartialEq)]
pub struct MutationRecord {
    pub structure_id: String,
    pub position: usize,
    pub wt: AminoAcid,
    pub mutant: AminoAcid,
    /// Measured or synthetic ddG in kcal/mol; absent in inference mode.
    pub ddg: Option<f64>,
}

impl MutationRecord {
    /// Checks position range and the wild-type letter against a structure.
    pub fn validate_against(&self, s: &Structure) -> Result<()> {
        if self.position == 0 || self.position > s.len() {
            return Err(Error::PositionOutOfRange { position: self.position, len: s.len() });
        }
        let found = s.residues()[self.position - 1].aa;
        if found != self.wt {
            return Err(Error::WtMismatch { position: self.position, record: self.wt.letter(), structure: found.letter() });
        }
        Ok(())
    }
}

/// Structures keyed by id plus the mutation records that reference them.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub structures: BTreeMap<String, Structure>,
    pub records: Vec<MutationRecord>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn structure_of(&self, r: &MutationRecord) -> Result<&Structure> {
        self.structures
            .get(&r.structure_id)
            .ok_or_else(|| Error::Parse { line: 0, reason: format!("unknown structure id {:?}", r.structure_id) })
    }

    /// Targets of all records; errors if any is missing.
    pub fn targets(&self) -> Result<Vec<f64>> {
        self.records.iter().map(|r| r.ddg.ok_or(Error::EmptyDataset)).collect()
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        let records: Vec<MutationRecord> = idx.iter().map(|&i| self.records[i].clone()).collect();
        let structures = records
            .iter()
            .filter_map(|r| self.structures.get(&r.structure_id).map(|s| (r.structure_id.clone(), s.clone())))
            .collect();
        Dataset { structures, records }
    }

    pub fn validate(&self) -> Result<()> {
        for r in &self.records {
            r.validate_against(self.structure_of(r)?)?;
        }
        Ok(())
    }

    /// Loads a `.dgm` file; each `structure_id` resolves to `<dir>/<id>.dgs`.
    pub fn load(dgm_path: &Path) -> Result<Dataset> {
        let text = std::fs::read_to_string(dgm_path)?;
        let dir = dgm_path.parent().unwrap_or_else(|| Path::new("."));
        let mut structures = BTreeMap::new();
        for r in parse_records(&text)? {
            if !structures.contains_key(&r.structure_id) {
                let s = parse_structure(&std::fs::read_to_string(dir.join(format!("{}.dgs", r.structure_id)))?)?;
                structures.insert(r.structure_id.clone(), s);
            }
        }
        load_mutation_dataset(&text, &structures).map(|records| Dataset { structures, records })
    }

    /// Writes every structure as `<id>.dgs` and the records to `dgm_name`; returns written paths.
    pub fn write(&self, dir: &Path, dgm_name: &str) -> Result<Vec<std::path::PathBuf>> {
        std::fs::create_dir_all(dir)?;
        let mut written = Vec::new();
        for (id, s) in &self.structures {
            let p = dir.join(format!("{id}.dgs"));
            std::fs::write(&p, s.to_dgs())?;
            written.push(p);
        }
        let p = dir.join(dgm_name);
        std::fs::write(&p, records_to_dgm(&self.records))?;
        written.push(p);
        Ok(written)
    }
}

/// Parses `.dgm` lines without consulting structures.
pub fn parse_records(text: &str) -> Result<Vec<MutationRecord>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim_end() == DGM_HEADER => {}
        _ => return Err(Error::Parse { line: 1, reason: format!("expected header {DGM_HEADER:?}") }),
    }
    let mut out = Vec::new();
    for (k, raw) in lines {
        let line = k + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = raw.split('\t').collect();
        if fields.len() != 4 && fields.len() != 5 {
            return Err(Error::Parse { line, reason: format!("expected 4 or 5 fields, got {}", fields.len()) });
        }
        let structure_id = fields[0].trim().to_string();
        if structure_id.is_empty() {
            return Err(Error::Parse { line, reason: "empty structure id".into() });
        }
        let position: usize = fields[1]
            .trim()
            .parse()
            .map_err(|_| Error::Parse { line, reason: format!("bad position {:?}", fields[1]) })?;
        if position == 0 {
            return Err(Error::Parse { line, reason: "positions are 1-based".into() });
        }
        let letter = |f: &str| -> Result<AminoAcid> {
            let mut cs = f.trim().chars();
            match (cs.next(), cs.next()) {
                (Some(c), None) => AminoAcid::from_char(c),
                _ => Err(Error::Parse { line, reason: format!("bad residue field {f:?}") }),
            }
        };
        let wt = letter(fields[2])?;
        let mutant = letter(fields[3])?;
        if wt == mutant {
            return Err(Error::Parse { line, reason: "wild type equals mutant".into() });
        }
        let ddg = match fields.get(4).map(|f| f.trim()) {
            None | Some("") => None,
            Some(f) => {
                let v: f64 = f.parse().map_err(|_| Error::Parse { line, reason: format!("bad ddg {f:?}") })?;
                if !v.is_finite() {
                    return Err(Error::Parse { line, reason: "non-finite ddg".into() });
                }
                Some(v)
            }
        };
        out.push(MutationRecord { structure_id, position, wt, mutant, ddg });
    }
    Ok(out)
}

/// Parses a `.dgm` dataset and validates each record against its structure when one is known.
pub fn load_mutation_dataset(text: &str, structures: &BTreeMap<String, Structure>) -> Result<Vec<MutationRecord>> {
    let records = parse_records(text)?;
    for r in &records {
        if let Some(s) = structures.get(&r.structure_id) {
            r.validate_against(s)?;
        }
    }
    Ok(records)
}

pub fn records_to_dgm(records: &[MutationRecord]) -> String {
    let mut out = String::from(DGM_HEADER);
    out.push('\n');
    for r in records {
        write!(out, "{}\t{}\t{}\t{}\t", r.structure_id, r.position, r.wt, r.mutant).unwrap();
        if let Some(d) = r.ddg {
            write!(out, "{d}").unwrap();
        }
        out.push('\n');
    }
    out
}
