//! Synthetic coupled datasets: random-walk chains with a ddG target that
//! decomposes into a sequence part, a structure part and a cross term.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::amino::AminoAcid;
use super::dataset::{Dataset, MutationRecord};
use super::structure::{distance, Structure};
use crate::error::{Error, Result};

pub const BOND_LENGTH: f64 = 3.8;
pub const CLASH_DISTANCE: f64 = 3.0;
pub const MAX_CLASH_RETRIES: usize = 1000;
/// Cutoff used for the contact counts entering the synthetic target.
pub const SYNTH_CONTACT_CUTOFF: f64 = 10.0;
/// Weight of the centred contact-count term.
pub const CONTACT_WEIGHT: f64 = 0.3;
pub const MIN_LEN: usize = 8;
pub const MAX_LEN: usize = 128;

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub seed: u64,
    pub n_samples: usize,
    pub len_min: usize,
    pub len_max: usize,
    /// Weight `c_w` of the sequence-structure cross term.
    pub coupling: f64,
    pub noise_sd: f64,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.len_min < MIN_LEN || self.len_max > MAX_LEN || self.len_min > self.len_max {
            return Err(Error::InvalidConfig(format!(
                "length range [{}, {}] must lie within [{MIN_LEN}, {MAX_LEN}]",
                self.len_min, self.len_max
            )));
        }
        if !(self.coupling >= 0.0 && self.noise_sd >= 0.0) {
            return Err(Error::InvalidConfig("coupling weight and noise must be non-negative".into()));
        }
        Ok(())
    }
}

/// Decomposed ground truth of one synthetic record.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TargetParts {
    pub sequence: f64,
    pub structure: f64,
    pub coupling: f64,
    pub noise: f64,
}

/// Number of other residues within [`SYNTH_CONTACT_CUTOFF`] of each residue.
pub fn contact_counts(s: &Structure) -> Vec<usize> {
    let l = s.len();
    let mut out = vec![0; l];
    for i in 0..l {
        for j in i + 1..l {
            if s.distance(i, j) < SYNTH_CONTACT_CUTOFF {
                out[i] += 1;
                out[j] += 1;
            }
        }
    }
    out
}

/// Noise-free target pieces for mutating 1-based `position` to `mutant`.
pub fn target_parts(s: &Structure, position: usize, mutant: AminoAcid) -> TargetParts {
    let counts = contact_counts(s);
    let p = position - 1;
    let wt = s.residues()[p].aa;
    let dh = mutant.hydropathy() - wt.hydropathy();
    let mean = counts.iter().sum::<usize>() as f64 / counts.len() as f64;
    let max = counts.iter().copied().max().unwrap_or(0);
    let burial = if max == 0 { 0.0 } else { counts[p] as f64 / max as f64 };
    TargetParts { sequence: dh, structure: CONTACT_WEIGHT * (counts[p] as f64 - mean), coupling: dh * burial, noise: 0.0 }
}

fn random_direction(rng: &mut ChaCha8Rng) -> [f64; 3] {
    let z: f64 = rng.random_range(-1.0..=1.0);
    let phi: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let r = (1.0 - z * z).max(0.0).sqrt();
    [r * phi.cos(), r * phi.sin(), z]
}

/// Fixed-bond random walk, resampling directions that clash with earlier residues.
pub fn random_chain(len: usize, rng: &mut ChaCha8Rng) -> Result<Vec<[f64; 3]>> {
    let mut coords: Vec<[f64; 3]> = vec![[0.0; 3]];
    for k in 1..len {
        let prev = coords[k - 1];
        let mut placed = None;
        for _ in 0..MAX_CLASH_RETRIES {
            let d = random_direction(rng);
            let cand = [prev[0] + BOND_LENGTH * d[0], prev[1] + BOND_LENGTH * d[1], prev[2] + BOND_LENGTH * d[2]];
            if coords[..k - 1].iter().all(|c| distance(c, &cand) >= CLASH_DISTANCE) {
                placed = Some(cand);
                break;
            }
        }
        coords.push(placed.ok_or(Error::ClashResampleExceeded { residue: k + 1, retries: MAX_CLASH_RETRIES })?);
    }
    Ok(coords)
}

pub fn sample_id(i: usize) -> String {
    format!("syn{i:05}")
}

fn synthesize_one(spec: &SyntheticSpec, i: usize) -> Result<(Structure, MutationRecord, TargetParts)> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(i as u64);
    let len = rng.random_range(spec.len_min..=spec.len_max);
    let seq: Vec<AminoAcid> = (0..len).map(|_| AminoAcid::from_index(rng.random_range(0..20))).collect();
    let coords = random_chain(len, &mut rng)?;
    let s = Structure::from_parts(&seq, &coords)?;
    let position = rng.random_range(1..=len);
    let wt = seq[position - 1];
    let shift = rng.random_range(1..20);
    let mutant = AminoAcid::from_index((wt.index() + shift) % 20);
    let z: f64 = rng.sample(StandardNormal);
    let mut parts = target_parts(&s, position, mutant);
    parts.noise = spec.noise_sd * z;
    let ddg = parts.sequence + parts.structure + spec.coupling * parts.coupling + parts.noise;
    let record = MutationRecord { structure_id: sample_id(i), position, wt, mutant, ddg: Some(ddg) };
    Ok((s, record, parts))
}

/// Generates one structure and one labelled mutation per sample; deterministic in `spec.seed`.
pub fn synthesize_dataset(spec: &SyntheticSpec) -> Result<Dataset> {
    Ok(synthesize_with_parts(spec)?.0)
}

/// Like [`synthesize_dataset`] but also returns the target decomposition per record.
pub fn synthesize_with_parts(spec: &SyntheticSpec) -> Result<(Dataset, Vec<TargetParts>)> {
    spec.validate()?;
    let samples = crate::par::map_range(spec.n_samples, |i| synthesize_one(spec, i));
    let mut data = Dataset::default();
    let mut parts = Vec::with_capacity(spec.n_samples);
    for sample in samples {
        let (s, r, p) = sample?;
        data.structures.insert(r.structure_id.clone(), s);
        data.records.push(r);
        parts.push(p);
    }
    Ok((data, parts))
}
