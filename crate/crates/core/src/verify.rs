//! Numerical checks of the diffusion theory (fixed point, rate, Lipschitz
//! continuity) and of end-to-end gradient integrity, on random instances.

use std::fmt;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::diffusion::{
    convergence_profile, excited_spectral_radius, fitted_log_slope, gamma_logit_name, initial_logit, lipschitz_check,
    random_stochastic, B_BETA, RESIDUAL_FLOOR, W_BETA,
};
use crate::error::{Error, Result};
use crate::model::{examples, init_params, loss_on, prepare_dataset, ModelConfig};
use crate::numerics::{check_param_gradients, Matrix};
use crate::protein_io::{build_contact_graph, random_chain, AminoAcid, Dataset, GraphConfig, MutationRecord, Structure};

/// Absolute slack for residual bounds, relative to `max(||A*||, 1)`: the iterate and
/// the solved fixed point both carry rounding error of this order.
pub const ROUNDOFF_FLOOR: f64 = 1e-12;
pub const FIXED_POINT_TOL: f64 = 1e-8;
pub const RATE_REL_TOL: f64 = 0.05;
pub const GRAD_TOL: f64 = 1e-5;
/// Contraction guard: instances with `beta * lambda_max` above this are skipped.
pub const MAX_CONTRACTION: f64 = 0.9;

#[derive(Clone, Debug, PartialEq)]
pub enum ReportLine {
    Check { name: String, pass: bool, observed: f64, bound: f64 },
    Skip { name: String, reason: String },
}

impl fmt::Display for ReportLine {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ReportLine::Check { name, pass, observed, bound } => {
                write!(f, "CHECK\t{name}\t{}\t{observed:.6e}\t{bound:.6e}", if *pass { "pass" } else { "fail" })
            }
            ReportLine::Skip { name, reason } => write!(f, "SKIP\t{name}\t{reason}"),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Report {
    pub lines: Vec<ReportLine>,
}

impl Report {
    fn check(&mut self, name: String, observed: f64, bound: f64, pass: bool) {
        self.lines.push(ReportLine::Check { name, pass, observed, bound });
    }

    fn skip(&mut self, name: String, reason: impl Into<String>) {
        self.lines.push(ReportLine::Skip { name, reason: reason.into() });
    }

    pub fn extend(&mut self, other: Report) {
        self.lines.extend(other.lines);
    }

    /// `(passed, failed, skipped)` over lines whose name starts with `prefix`.
    pub fn tally(&self, prefix: &str) -> (usize, usize, usize) {
        let mut t = (0, 0, 0);
        for l in &self.lines {
            match l {
                ReportLine::Check { name, pass, .. } if name.starts_with(prefix) => {
                    if *pass {
                        t.0 += 1
                    } else {
                        t.1 += 1
                    }
                }
                ReportLine::Skip { name, .. } if name.starts_with(prefix) => t.2 += 1,
                _ => {}
            }
        }
        t
    }

    pub fn all_passed(&self) -> bool {
        self.lines.iter().all(|l| !matches!(l, ReportLine::Check { pass: false, .. }))
    }
}

impl fmt::Display for Report {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for l in &self.lines {
            writeln!(f, "{l}")?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VerifyConfig {
    pub seed: u64,
    /// Random instances for the fixed-point and rate suites.
    pub instances: usize,
    pub sizes: Vec<usize>,
    pub betas: Vec<f64>,
    pub steps: usize,
    pub lipschitz_betas: Vec<f64>,
    /// Random pairs per Lipschitz rate.
    pub lipschitz_pairs: usize,
    /// Spectral radius imposed on the operator in the literal rate suite.
    pub force_spectral: f64,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            instances: 50,
            sizes: vec![4, 8, 16],
            betas: vec![0.2, 0.5, 0.8],
            steps: 60,
            lipschitz_betas: vec![0.3, 0.5],
            lipschitz_pairs: 100,
            force_spectral: 0.9,
        }
    }
}

impl VerifyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.instances == 0 || self.lipschitz_pairs == 0 || self.steps < 4 {
            return Err(Error::InvalidConfig("instances and pairs must be positive, steps >= 4".into()));
        }
        if self.sizes.is_empty() || self.sizes.iter().any(|&s| s < 2) {
            return Err(Error::InvalidConfig("sizes must be >= 2".into()));
        }
        let rates = self.betas.iter().chain(&self.lipschitz_betas);
        if self.betas.is_empty() || rates.clone().any(|&b| !(b > 0.0 && b < 1.0)) {
            return Err(Error::InvalidConfig("rates must lie in (0, 1)".into()));
        }
        if !(self.force_spectral > 0.0) {
            return Err(Error::InvalidConfig("forced spectral radius must be positive".into()));
        }
        Ok(())
    }
}

/// Largest `|lambda|` of a symmetric matrix.
pub fn symmetric_spectral_radius(s: &Matrix) -> f64 {
    let n = s.rows();
    let eig = SymmetricEigen::new(DMatrix::from_row_slice(n, n, s.as_slice()));
    eig.eigenvalues.iter().fold(0.0f64, |m, v| m.max(v.abs()))
}

/// Normalised contact affinity of a random chain of `len` residues.
pub fn random_operator(len: usize, rng: &mut ChaCha8Rng) -> Result<Matrix> {
    let coords = random_chain(len, rng)?;
    let s = Structure::from_parts(&vec![AminoAcid::from_index(0); len], &coords)?;
    Ok(build_contact_graph(&s, &GraphConfig::default())?.normalized)
}

fn instance(cfg: &VerifyConfig, i: usize) -> (usize, f64, ChaCha8Rng) {
    let l = cfg.sizes[i % cfg.sizes.len()];
    let beta = cfg.betas[(i / cfg.sizes.len()) % cfg.betas.len()];
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(i as u64 + 1);
    (l, beta, rng)
}

/// `||A(T) - A*||` and the per-step geometric bound, per instance.
pub fn fixed_point_suite(cfg: &VerifyConfig) -> Result<Report> {
    let mut rep = Report::default();
    for i in 0..cfg.instances {
        let (l, beta, mut rng) = instance(cfg, i);
        let s = random_operator(l, &mut rng)?;
        let a0 = random_stochastic(l, &mut rng);
        let lam = symmetric_spectral_radius(&s);
        let tag = format!("L={l},beta={beta},#{i}");
        if beta * lam > MAX_CONTRACTION {
            rep.skip(format!("fixed_point/{tag}"), format!("beta*lambda_max = {:.4} > {MAX_CONTRACTION}", beta * lam));
            continue;
        }
        let trace = match convergence_profile(&a0, &s, beta, cfg.steps) {
            Ok(t) => t,
            Err(e @ (Error::Singular { .. } | Error::DegenerateResidual(_))) => {
                rep.skip(format!("fixed_point/{tag}"), e.to_string());
                continue;
            }
            Err(e) => return Err(e),
        };
        let r = &trace.residual_norms;
        let last = r[cfg.steps];
        rep.check(format!("fixed_point/{tag}"), last, FIXED_POINT_TOL, last < FIXED_POINT_TOL);
        let floor = ROUNDOFF_FLOOR * trace.fixed_point.frobenius_norm().max(1.0);
        let worst = r
            .iter()
            .enumerate()
            .map(|(t, &rt)| rt / (r[0] * (beta * lam).powi(t as i32) * (1.0 + 1e-9) + floor))
            .fold(0.0f64, f64::max);
        rep.check(format!("step_bound/{tag}"), worst, 1.0, worst <= 1.0);
    }
    Ok(rep)
}

/// Relative rate error of one instance, or why it could not be measured.
#[derive(Clone, Debug, PartialEq)]
pub enum RateOutcome {
    Measured(f64),
    Skipped(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct RateMeasurement {
    pub tag: String,
    /// Against the largest eigenvalue the initial error excites, on `S~`.
    pub excited: RateOutcome,
    /// Against the literal `lambda_max` of `S~` rescaled to `force_spectral`.
    pub forced: RateOutcome,
}

fn rate_error(a0: &Matrix, s: &Matrix, beta: f64, steps: usize, lam: Option<f64>) -> Result<RateOutcome> {
    let lam_max = symmetric_spectral_radius(s);
    if beta * lam_max > MAX_CONTRACTION {
        return Ok(RateOutcome::Skipped(format!("beta*lambda_max = {:.4} > {MAX_CONTRACTION}", beta * lam_max)));
    }
    let trace = match convergence_profile(a0, s, beta, steps) {
        Ok(t) => t,
        Err(e @ (Error::Singular { .. } | Error::DegenerateResidual(_))) => return Ok(RateOutcome::Skipped(e.to_string())),
        Err(e) => return Err(e),
    };
    let lam = match lam {
        Some(v) => v,
        None => excited_spectral_radius(s, &a0.sub(&trace.fixed_point)?, 1e-6)?,
    };
    let expected = (beta * lam).ln();
    let floor = RESIDUAL_FLOOR * trace.fixed_point.frobenius_norm().max(1.0);
    Ok(match fitted_log_slope(&trace.residual_norms, 3, floor) {
        Some(slope) => RateOutcome::Measured(((slope - expected) / expected).abs()),
        None => RateOutcome::Skipped("fewer than three residuals above the round-off floor".into()),
    })
}

pub fn rate_measurements(cfg: &VerifyConfig) -> Result<Vec<RateMeasurement>> {
    (0..cfg.instances)
        .map(|i| {
            let (l, beta, mut rng) = instance(cfg, i);
            let s = random_operator(l, &mut rng)?;
            let a0 = random_stochastic(l, &mut rng);
            let scaled = s.scale(cfg.force_spectral / symmetric_spectral_radius(&s));
            Ok(RateMeasurement {
                tag: format!("L={l},beta={beta},#{i}"),
                excited: rate_error(&a0, &s, beta, cfg.steps, None)?,
                forced: rate_error(&a0, &scaled, beta, cfg.steps, Some(cfg.force_spectral))?,
            })
        })
        .collect()
}

/// Minimum share of measured instances whose excited-mode rate is within tolerance.
pub const RATE_MIN_FRACTION: f64 = 0.9;

/// Per-instance checks of the literal rate on rescaled operators, plus one aggregate
/// check of the excited-mode rate on the raw operators.
pub fn rate_suite(cfg: &VerifyConfig) -> Result<Report> {
    let mut rep = Report::default();
    let (mut hits, mut measured) = (0usize, 0usize);
    for m in rate_measurements(cfg)? {
        match m.forced {
            RateOutcome::Measured(rel) => rep.check(format!("rate_forced/{}", m.tag), rel, RATE_REL_TOL, rel <= RATE_REL_TOL),
            RateOutcome::Skipped(why) => rep.skip(format!("rate_forced/{}", m.tag), why),
        }
        if let RateOutcome::Measured(rel) = m.excited {
            measured += 1;
            hits += usize::from(rel <= RATE_REL_TOL);
        }
    }
    if measured == 0 {
        rep.skip("rate_excited".into(), "no measurable instance");
    } else {
        let frac = hits as f64 / measured as f64;
        rep.check("rate_excited".into(), frac, RATE_MIN_FRACTION, frac >= RATE_MIN_FRACTION);
    }
    Ok(rep)
}

/// Fixed-point map Lipschitz ratio against `(1-beta)/(1-beta*lambda_max)`.
pub fn lipschitz_suite(cfg: &VerifyConfig) -> Result<Report> {
    const PER_INSTANCE: usize = 10;
    let mut rep = Report::default();
    for (bi, &beta) in cfg.lipschitz_betas.iter().enumerate() {
        let mut done = 0;
        let mut k = 0;
        while done < cfg.lipschitz_pairs {
            let pairs = PER_INSTANCE.min(cfg.lipschitz_pairs - done);
            let l = cfg.sizes[k % cfg.sizes.len()];
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x11b5);
            rng.set_stream((bi * 10_000 + k) as u64);
            let s = random_operator(l, &mut rng)?;
            let name = format!("lipschitz/L={l},beta={beta},#{k}");
            match lipschitz_check(&s, beta, pairs, rng.random()) {
                Ok(r) => rep.check(name, r.max_ratio, r.bound + 1e-9, r.max_ratio <= r.bound + 1e-9),
                Err(Error::BoundViolated { ratio, bound }) => rep.check(name, ratio, bound + 1e-9, false),
                Err(e @ (Error::Singular { .. } | Error::InvalidArgument(_))) => rep.skip(name, e.to_string()),
                Err(e) => return Err(e),
            }
            done += pairs;
            k += 1;
        }
    }
    Ok(rep)
}

/// Model configuration of the gradient suite: width 8, two layers per stack, three diffusion steps.
pub fn gradient_check_config() -> ModelConfig {
    let mut cfg = ModelConfig { d: 8, d_ffn: 32, heads: 2, gnn_layers: 2, tr_layers: 2, dropout: 0.0, lambda: 1e-3, ..ModelConfig::default() };
    cfg.diffusion.steps = 3;
    cfg
}

/// Random labelled single-chain dataset with `n` records on proteins of length `len`.
pub fn random_dataset(len: usize, n: usize, seed: u64) -> Result<Dataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ds = Dataset::default();
    for k in 0..n {
        let coords = random_chain(len, &mut rng)?;
        let seq: Vec<AminoAcid> = (0..len).map(|_| AminoAcid::from_index(rng.random_range(0..20))).collect();
        let id = format!("rnd{k}");
        let position = rng.random_range(1..=len);
        let wt = seq[position - 1];
        let mutant = AminoAcid::from_index((wt.index() + rng.random_range(1..20)) % 20);
        ds.structures.insert(id.clone(), Structure::from_parts(&seq, &coords)?);
        ds.records.push(MutationRecord { structure_id: id, position, wt, mutant, ddg: Some(rng.random_range(-3.0..3.0)) });
    }
    Ok(ds)
}

/// Per-tensor central-difference check of the full regularised loss (length-6 proteins).
pub fn gradient_suite(seed: u64) -> Result<Report> {
    let cfg = ModelConfig { seed, ..gradient_check_config() };
    let mut params = init_params(&cfg)?;
    // move the diffusion tensors off their symmetric start so every path is exercised
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37);
    if let Some(w) = params.get_mut(W_BETA) {
        *w = Matrix::row_vector(&[rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]);
    }
    if let Some(b) = params.get_mut(B_BETA) {
        *b = Matrix::scalar(initial_logit(rng.random_range(0.15..0.45)));
    }
    for l in 0..cfg.couplings() {
        if let Some(g) = params.get_mut(&gamma_logit_name(l)) {
            *g = Matrix::scalar(initial_logit(rng.random_range(0.15..0.45)));
        }
    }
    let data = random_dataset(6, 2, seed)?;
    let prepared = prepare_dataset(&data, &cfg)?;
    let batch = examples(&data, &prepared)?;
    let checks = check_param_gradients(&params, None, 1e-6, 1e-8, |t, p| loss_on(t, p, &cfg, &batch, None))?;
    let mut rep = Report::default();
    for c in checks {
        rep.check(format!("gradient/{}", c.name), c.rel_err, GRAD_TOL, c.rel_err < GRAD_TOL);
    }
    Ok(rep)
}

pub fn run_all(cfg: &VerifyConfig) -> Result<Report> {
    cfg.validate()?;
    let mut rep = fixed_point_suite(cfg)?;
    rep.extend(rate_suite(cfg)?);
    rep.extend(lipschitz_suite(cfg)?);
    rep.extend(gradient_suite(cfg.seed)?);
    Ok(rep)
}
