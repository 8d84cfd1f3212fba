//! Wall-time of one forward pass as a function of the diffusion step count.

use std::time::Instant;

use crate::error::{Error, Result};
use crate::model::{forward, init_params, ModelConfig, PreparedStructure};
use crate::protein_io::{synthesize_dataset, SyntheticSpec};

pub const DEFAULT_STEPS: [usize; 5] = [1, 3, 5, 7, 10];

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TimingRow {
    pub steps: usize,
    /// Median over repeats, milliseconds.
    pub ms: f64,
}

/// `x` with three significant digits, no exponent.
pub fn sig3(x: f64) -> String {
    if x == 0.0 || !x.is_finite() {
        return format!("{x}");
    }
    let decimals = (2 - x.abs().log10().floor() as i32).max(0) as usize;
    format!("{x:.decimals$}")
}

pub fn timing_tsv(rows: &[TimingRow]) -> String {
    let mut out = String::from("steps\tforward_ms\n");
    for r in rows {
        out.push_str(&format!("{}\t{}\n", r.steps, sig3(r.ms)));
    }
    out
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Times `forward` on one synthetic protein of length `len` for every step count;
/// weights are shared across rows since the step count adds no parameters. Repeats
/// are interleaved across step counts so slow drift in machine load hits every row alike.
pub fn time_diffusion_steps(model: &ModelConfig, steps: &[usize], len: usize, repeats: usize, seed: u64) -> Result<Vec<TimingRow>> {
    if steps.is_empty() || repeats == 0 {
        return Err(Error::InvalidArgument("need at least one step count and one repeat".into()));
    }
    let spec = SyntheticSpec { seed, n_samples: 1, len_min: len, len_max: len, coupling: 1.0, noise_sd: 0.0 };
    let data = synthesize_dataset(&spec)?;
    let record = &data.records[0];
    let structure = data.structure_of(record)?;
    let params = init_params(model)?;
    let cases = steps
        .iter()
        .map(|&t| {
            let mut cfg = model.clone();
            cfg.diffusion.steps = t;
            cfg.validate()?;
            let prep = PreparedStructure::new(structure, &cfg)?;
            forward(&params, &cfg, &prep, record)?;
            Ok((cfg, prep))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut samples = vec![Vec::with_capacity(repeats); cases.len()];
    for _ in 0..repeats {
        for ((cfg, prep), out) in cases.iter().zip(samples.iter_mut()) {
            let start = Instant::now();
            forward(&params, cfg, prep, record)?;
            out.push(start.elapsed().as_secs_f64() * 1e3);
        }
    }
    Ok(steps.iter().zip(samples).map(|(&steps, s)| TimingRow { steps, ms: median(s) }).collect())
}
