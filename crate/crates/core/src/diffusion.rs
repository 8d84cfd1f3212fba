//! Structure-guided attention diffusion, the learnable diffusion-rate kernel,
//! attention-derived pseudo-graphs, attention-modulated graph diffusion and
//! the diffused neighbourhoods read off the result.
//!
//! Both diffusions are the anchored (personalised-PageRank style) iteration
//! `X(t+1) = (1-r) X0 + r M X(t)`, whose unique fixed point is
//! `(1-r) (I - r M)^-1 X0` whenever `r * rho(M) < 1`.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::gnn::Neighborhoods;
use crate::numerics::{logit, sigmoid, softmax_rows, solve_linear, spectral_radius, sym_normalize, Matrix, ParamStore, Tape, Var};

/// Bounds for the initial diffusion rates.
pub const RATE_INIT_RANGE: (f64, f64) = (0.1, 0.5);

#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionConfig {
    /// Number of diffusion steps `T`.
    pub steps: usize,
    pub beta_init: f64,
    pub gamma_init: f64,
    /// Pseudo-graph threshold; entries strictly above survive.
    pub tau: f64,
    pub eps_nbr: f64,
    pub k_max: usize,
    /// `beta` from layer features when set, from a free per-layer logit otherwise.
    pub kernel_enabled: bool,
    /// Give zero-degree pseudo-graph rows a unit self-loop instead of failing.
    pub self_loops: bool,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        Self {
            steps: 5,
            beta_init: 0.25,
            gamma_init: 0.25,
            tau: 0.02,
            eps_nbr: 1e-3,
            k_max: 16,
            kernel_enabled: true,
            self_loops: true,
        }
    }
}

impl DiffusionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::InvalidConfig("diffusion steps must be at least 1".into()));
        }
        for (name, v) in [("beta_init", self.beta_init), ("gamma_init", self.gamma_init)] {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::InvalidConfig(format!("{name} = {v} must lie in (0, 1)")));
            }
        }
        if !(0.0..1.0).contains(&self.tau) {
            return Err(Error::InvalidConfig(format!("tau = {} must lie in [0, 1)", self.tau)));
        }
        if !(self.eps_nbr >= 0.0) || self.k_max == 0 {
            return Err(Error::InvalidConfig("eps_nbr must be >= 0 and k_max >= 1".into()));
        }
        Ok(())
    }

    /// Initial rates, clamped into [`RATE_INIT_RANGE`].
    pub fn clamped_inits(&self) -> (f64, f64) {
        let (lo, hi) = RATE_INIT_RANGE;
        (self.beta_init.clamp(lo, hi), self.gamma_init.clamp(lo, hi))
    }
}

/// Kernel parameters, names as registered in a [`ParamStore`].
pub const W_BETA: &str = "diffusion.w_beta";
pub const B_BETA: &str = "diffusion.b_beta";

pub fn beta_logit_name(layer: usize) -> String {
    format!("diffusion.beta.{layer}")
}

pub fn gamma_logit_name(layer: usize) -> String {
    format!("diffusion.gamma.{layer}")
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionKernelParams {
    /// Weights on `[depth, attention entropy]`.
    pub w_beta: [f64; 2],
    pub b_beta: f64,
    pub beta_logits: Vec<f64>,
    pub gamma_logits: Vec<f64>,
}

impl DiffusionKernelParams {
    /// Reads whatever kernel tensors are present in `params`.
    pub fn from_store(params: &ParamStore, n_layers: usize) -> Self {
        let scalar = |n: &str| params.get(n).map(|m| m.item());
        let w = params.get(W_BETA);
        Self {
            w_beta: w.map(|m| [m[(0, 0)], m[(0, 1)]]).unwrap_or([0.0; 2]),
            b_beta: scalar(B_BETA).unwrap_or(0.0),
            beta_logits: (0..n_layers).map_while(|l| scalar(&beta_logit_name(l))).collect(),
            gamma_logits: (0..n_layers).map_while(|l| scalar(&gamma_logit_name(l))).collect(),
        }
    }
}

/// Per-step residuals of the raw linear iteration against its fixed point.
#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionTrace {
    /// `||A(t) - A*||_F` for `t = 0..=T`.
    pub residual_norms: Vec<f64>,
    pub fixed_point: Matrix,
    /// Geometric-mean step ratio over `t >= 2` (above the round-off floor).
    pub rate_estimate: f64,
}

fn check_square_pair(op: &'static str, a: &Matrix, m: &Matrix) -> Result<()> {
    if !m.is_square() || a.rows() != m.rows() {
        return Err(Error::shape(op, format!("operator {}x{} vs state {}x{}", m.rows(), m.cols(), a.rows(), a.cols())));
    }
    Ok(())
}

fn anchored(x0: &Matrix, m: &Matrix, r: f64, steps: usize) -> Matrix {
    let base = x0.scale(1.0 - r);
    let mut x = x0.clone();
    for _ in 0..steps {
        let mx = m.matmul_unchecked(&x);
        x = Matrix::from_fn(x.rows(), x.cols(), |i, j| base[(i, j)] + r * mx[(i, j)]);
    }
    x
}

/// `T` steps of `A <- (1-beta) A0 + beta S A`, starting from `A0`. Raw (not renormalised).
pub fn diffuse_attention(a0: &Matrix, s_norm: &Matrix, beta: f64, steps: usize) -> Result<Matrix> {
    check_square_pair("diffuse_attention", a0, s_norm)?;
    Ok(anchored(a0, s_norm, beta, steps))
}

/// `A* = (1-beta) (I - beta S)^-1 A0`.
pub fn attention_fixed_point(a0: &Matrix, s_norm: &Matrix, beta: f64) -> Result<Matrix> {
    check_square_pair("attention_fixed_point", a0, s_norm)?;
    let n = s_norm.rows();
    let m = Matrix::from_fn(n, n, |i, j| if i == j { 1.0 } else { 0.0 } - beta * s_norm[(i, j)]);
    Ok(solve_linear(&m, a0)?.scale(1.0 - beta))
}

/// Residuals below this fraction of `max(||A*||, 1)` are treated as round-off.
pub const RESIDUAL_FLOOR: f64 = 1e-11;

pub fn convergence_profile(a0: &Matrix, s_norm: &Matrix, beta: f64, steps: usize) -> Result<DiffusionTrace> {
    let fixed_point = attention_fixed_point(a0, s_norm, beta)?;
    let base = a0.scale(1.0 - beta);
    let mut x = a0.clone();
    let mut residual_norms = Vec::with_capacity(steps + 1);
    residual_norms.push(x.sub(&fixed_point)?.frobenius_norm());
    if residual_norms[0] < 1e-14 {
        return Err(Error::DegenerateResidual(residual_norms[0]));
    }
    for _ in 0..steps {
        let sx = s_norm.matmul_unchecked(&x);
        x = Matrix::from_fn(x.rows(), x.cols(), |i, j| base[(i, j)] + beta * sx[(i, j)]);
        residual_norms.push(x.sub(&fixed_point)?.frobenius_norm());
    }
    let floor = RESIDUAL_FLOOR * fixed_point.frobenius_norm().max(1.0);
    let usable: Vec<f64> = residual_norms.iter().skip(2).copied().take_while(|&r| r > floor).collect();
    let rate_estimate = if usable.len() >= 2 {
        (usable[usable.len() - 1] / usable[0]).powf(1.0 / (usable.len() - 1) as f64)
    } else {
        0.0
    };
    Ok(DiffusionTrace { residual_norms, fixed_point, rate_estimate })
}

/// Least-squares slope of `ln r[t]` over `t >= t_start` while `r[t] > floor`.
/// `None` when fewer than three points remain.
pub fn fitted_log_slope(residuals: &[f64], t_start: usize, floor: f64) -> Option<f64> {
    let pts: Vec<(f64, f64)> = residuals
        .iter()
        .enumerate()
        .skip(t_start)
        .take_while(|(_, &r)| r > floor)
        .map(|(t, &r)| (t as f64, r.ln()))
        .collect();
    if pts.len() < 3 {
        return None;
    }
    let n = pts.len() as f64;
    let mt = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mt) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mt).powi(2)).sum();
    Some(sxy / sxx)
}

/// Largest `|lambda|` of symmetric `s` among eigenvectors that `e` has a component on
/// (relative energy above `rel_tol`). This is the rate the iteration error can actually show.
pub fn excited_spectral_radius(s: &Matrix, e: &Matrix, rel_tol: f64) -> Result<f64> {
    check_square_pair("excited_spectral_radius", e, s)?;
    let n = s.rows();
    let eig = SymmetricEigen::new(DMatrix::from_row_slice(n, n, s.as_slice()));
    let em = DMatrix::from_row_slice(e.rows(), e.cols(), e.as_slice());
    let total = e.frobenius_norm();
    let mut best: f64 = 0.0;
    for k in 0..n {
        let u = eig.eigenvectors.column(k);
        let energy = (u.transpose() * &em).norm();
        if energy > rel_tol * total {
            best = best.max(eig.eigenvalues[k].abs());
        }
    }
    Ok(best)
}

/// `beta_l` for 1-based layer `layer` of `n_layers`.
pub fn diffusion_rate(layer: usize, n_layers: usize, attn_entropy: f64, kernel: &DiffusionKernelParams, cfg: &DiffusionConfig) -> f64 {
    if cfg.kernel_enabled {
        let depth = layer as f64 / n_layers as f64;
        sigmoid(kernel.w_beta[0] * depth + kernel.w_beta[1] * attn_entropy + kernel.b_beta)
    } else {
        sigmoid(kernel.beta_logits[layer - 1])
    }
}

pub fn initial_logit(rate: f64) -> f64 {
    logit(rate)
}

fn threshold_mask(g: &Matrix, tau: f64) -> Matrix {
    g.map(|v| if v > tau { 1.0 } else { 0.0 })
}

fn self_loop_fill(kept: &Matrix) -> Matrix {
    let n = kept.rows();
    let sums = kept.row_sums();
    Matrix::from_fn(n, n, |i, j| if i == j && sums[i] == 0.0 { 1.0 } else { 0.0 })
}

fn check_heads(heads: &[Matrix]) -> Result<usize> {
    let first = heads.first().ok_or_else(|| Error::InvalidArgument("no attention heads".into()))?;
    let n = first.rows();
    if heads.iter().any(|h| h.shape() != (n, n)) {
        return Err(Error::shape("attention_pseudo_graph", "heads must be equal square matrices"));
    }
    Ok(n)
}

fn off_diagonal_empty(m: &Matrix) -> bool {
    let n = m.rows();
    (0..n).all(|i| (0..n).all(|j| i == j || m[(i, j)] == 0.0))
}

/// Head-mean attention, symmetrised as `(G + Gᵀ)/2`, entries `<= tau` zeroed,
/// zero-degree rows given a unit self-loop (when enabled), then symmetric-normalised.
pub fn attention_pseudo_graph(heads: &[Matrix], tau: f64, self_loops: bool) -> Result<Matrix> {
    let n = check_heads(heads)?;
    let mut g = Matrix::zeros(n, n);
    for h in heads {
        g.add_assign(h);
    }
    let g = g.scale(1.0 / heads.len() as f64);
    let sym = Matrix::from_fn(n, n, |i, j| 0.5 * (g[(i, j)] + g[(j, i)]));
    let kept = sym.hadamard(&threshold_mask(&sym, tau))?;
    if !self_loops {
        if off_diagonal_empty(&kept) {
            return Err(Error::AllBelowThreshold);
        }
        return sym_normalize(&kept);
    }
    let filled = kept.add(&self_loop_fill(&kept))?;
    sym_normalize(&filled)
}

/// `T` steps of `S <- (1-gamma) S0 + gamma G S`.
pub fn diffuse_graph(s_norm: &Matrix, g_attn: &Matrix, gamma: f64, steps: usize) -> Result<Matrix> {
    check_square_pair("diffuse_graph", s_norm, g_attn)?;
    if !s_norm.is_square() {
        return Err(Error::shape("diffuse_graph", "S must be square"));
    }
    Ok(anchored(s_norm, g_attn, gamma, steps))
}

/// Off-diagonal entries above `eps_nbr`, the `k_max` largest per row (ties to the lower index).
pub fn diffused_neighborhoods(s_diff: &Matrix, eps_nbr: f64, k_max: usize) -> Neighborhoods {
    let n = s_diff.rows();
    let lists = (0..n)
        .map(|i| {
            let mut cand: Vec<usize> = (0..n).filter(|&j| j != i && s_diff[(i, j)] > eps_nbr).collect();
            cand.sort_by(|&a, &b| s_diff[(i, b)].total_cmp(&s_diff[(i, a)]).then(a.cmp(&b)));
            cand.truncate(k_max);
            cand.sort_unstable();
            cand
        })
        .collect();
    Neighborhoods::new(lists).expect("indices are in range and exclude self")
}

#[derive(Clone, Debug, PartialEq)]
pub struct LipschitzReport {
    pub trials: usize,
    pub lambda_max: f64,
    pub bound: f64,
    pub max_ratio: f64,
}

/// Row-stochastic random matrix (softmax of standard-normal logits).
pub fn random_stochastic(n: usize, rng: &mut ChaCha8Rng) -> Matrix {
    softmax_rows(&Matrix::from_fn(n, n, |_, _| rng.sample::<f64, _>(StandardNormal)))
}

/// Ratio `||FP(A) - FP(A')|| / ||A - A'||` over random stochastic pairs against
/// `(1-beta)/(1-beta*lambda_max)`.
pub fn lipschitz_check(s_norm: &Matrix, beta: f64, trials: usize, seed: u64) -> Result<LipschitzReport> {
    let lambda_max = spectral_radius(s_norm, 20_000, 1e-13, seed).or_else(|e| match e {
        Error::NoConvergence { estimate, .. } => Ok(estimate),
        other => Err(other),
    })?;
    if beta * lambda_max >= 1.0 {
        return Err(Error::InvalidArgument(format!("beta * lambda_max = {} >= 1", beta * lambda_max)));
    }
    let bound = (1.0 - beta) / (1.0 - beta * lambda_max);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = s_norm.rows();
    let mut max_ratio: f64 = 0.0;
    for _ in 0..trials {
        let a = random_stochastic(n, &mut rng);
        let b = random_stochastic(n, &mut rng);
        let num = attention_fixed_point(&a, s_norm, beta)?.sub(&attention_fixed_point(&b, s_norm, beta)?)?.frobenius_norm();
        let den = a.sub(&b)?.frobenius_norm();
        let ratio = if den == 0.0 { 0.0 } else { num / den };
        if num > bound * den + 1e-9 {
            return Err(Error::BoundViolated { ratio, bound });
        }
        max_ratio = max_ratio.max(ratio);
    }
    Ok(LipschitzReport { trials, lambda_max, bound, max_ratio })
}

// ---- differentiable versions ------------------------------------------------

/// Anchored iteration on a tape with a `1 x 1` rate node `r`.
pub fn anchored_on(tape: &mut Tape, x0: Var, m: Var, r: Var, steps: usize) -> Var {
    let keep = tape.one_minus(r);
    let base = tape.scalar_mul(keep, x0);
    let mut x = x0;
    for _ in 0..steps {
        let mx = tape.matmul(m, x);
        let mx = tape.scalar_mul(r, mx);
        x = tape.add(base, mx);
    }
    x
}

pub fn diffuse_attention_on(tape: &mut Tape, a0: Var, s_norm: Var, beta: Var, steps: usize) -> Var {
    anchored_on(tape, a0, s_norm, beta, steps)
}

pub fn diffuse_graph_on(tape: &mut Tape, s_norm: Var, g_attn: Var, gamma: Var, steps: usize) -> Var {
    anchored_on(tape, s_norm, g_attn, gamma, steps)
}

/// Tape version of [`attention_pseudo_graph`]; the threshold mask and self-loop fill are constants.
pub fn pseudo_graph_on(tape: &mut Tape, heads: &[Var], tau: f64, self_loops: bool) -> Result<Var> {
    let first = *heads.first().ok_or_else(|| Error::InvalidArgument("no attention heads".into()))?;
    let mut g = first;
    for &h in &heads[1..] {
        g = tape.add(g, h);
    }
    let g = tape.scale(g, 1.0 / heads.len() as f64);
    let gt = tape.transpose(g);
    let sym = tape.add(g, gt);
    let sym = tape.scale(sym, 0.5);
    let mask = threshold_mask(tape.value(sym), tau);
    let mask = tape.constant(mask);
    let kept = tape.mul(sym, mask);
    if !self_loops {
        if off_diagonal_empty(tape.value(kept)) {
            return Err(Error::AllBelowThreshold);
        }
        return tape.sym_normalize(kept);
    }
    let fill = self_loop_fill(tape.value(kept));
    let fill = tape.constant(fill);
    let filled = tape.add(kept, fill);
    tape.sym_normalize(filled)
}

/// `beta_l` on a tape: kernel of `[depth, mean head entropy]` or the free logit of layer `layer` (0-based).
pub fn beta_on(tape: &mut Tape, params: &ParamStore, layer: usize, n_layers: usize, attn: &[Var], cfg: &DiffusionConfig) -> Result<Var> {
    if !cfg.kernel_enabled {
        let l = tape.param(params, &beta_logit_name(layer))?;
        return Ok(tape.sigmoid(l));
    }
    let mut ent = tape.row_entropy(attn[0]);
    for &a in &attn[1..] {
        let e = tape.row_entropy(a);
        ent = tape.add(ent, e);
    }
    let ent = tape.scale(ent, 1.0 / attn.len() as f64);
    let depth = tape.constant(Matrix::scalar((layer + 1) as f64 / n_layers as f64));
    let feats = tape.concat_cols(&[depth, ent]);
    let w = tape.param(params, W_BETA)?;
    let b = tape.param(params, B_BETA)?;
    let z = tape.mul(feats, w);
    let z = tape.sum(z);
    let z = tape.add(z, b);
    Ok(tape.sigmoid(z))
}

pub fn gamma_on(tape: &mut Tape, params: &ParamStore, layer: usize) -> Result<Var> {
    let l = tape.param(params, &gamma_logit_name(layer))?;
    Ok(tape.sigmoid(l))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{check_param_gradients, ParamKind};
    use crate::protein_io::{build_contact_graph, random_chain, AminoAcid, GraphConfig, Structure};

    fn swap() -> Matrix {
        Matrix::from_rows(&[[0.0, 1.0], [1.0, 0.0]])
    }

    fn chain_graph(l: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let coords = random_chain(l, &mut rng).unwrap();
        let s = Structure::from_parts(&vec![AminoAcid::from_index(0); l], &coords).unwrap();
        build_contact_graph(&s, &GraphConfig::default()).unwrap().normalized
    }

    #[test]
    fn single_step_hand_iteration() {
        let out = diffuse_attention(&Matrix::identity(2), &swap(), 0.5, 1).unwrap();
        assert_eq!(out, Matrix::filled(2, 2, 0.5));
    }

    #[test]
    fn identity_operator_and_zero_rate_are_no_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random_stochastic(4, &mut rng);
        assert!(diffuse_attention(&a, &Matrix::identity(4), 0.4, 7).unwrap().max_abs_diff(&a) < 1e-15);
        assert_eq!(diffuse_attention(&a, &chain_graph(4, 1), 0.0, 5).unwrap(), a);
    }

    #[test]
    fn two_node_fixed_point() {
        let fp = attention_fixed_point(&Matrix::identity(2), &swap(), 0.5).unwrap();
        let want = Matrix::from_rows(&[[2.0 / 3.0, 1.0 / 3.0], [1.0 / 3.0, 2.0 / 3.0]]);
        assert!(fp.max_abs_diff(&want) < 1e-15);
        let a = Matrix::from_rows(&[[0.2, 0.8], [0.6, 0.4]]);
        assert!(attention_fixed_point(&a, &Matrix::identity(2), 0.3).unwrap().max_abs_diff(&a) < 1e-15);
        assert_eq!(attention_fixed_point(&a, &swap(), 0.0).unwrap(), a);
    }

    #[test]
    fn fixed_point_satisfies_its_equation() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let s = chain_graph(10, 2);
        let a = random_stochastic(10, &mut rng);
        let fp = attention_fixed_point(&a, &s, 0.7).unwrap();
        let rhs = a.scale(0.3).add(&s.matmul(&fp).unwrap().scale(0.7)).unwrap();
        assert!(fp.max_abs_diff(&rhs) < 1e-9);
    }

    #[test]
    fn two_node_residual_halves() {
        let trace = convergence_profile(&Matrix::identity(2), &swap(), 0.5, 8).unwrap();
        for t in 0..8 {
            let ratio = trace.residual_norms[t + 1] / trace.residual_norms[t];
            assert!((ratio - 0.5).abs() < 1e-12, "step {t}: {ratio}");
        }
        assert!((trace.rate_estimate - 0.5).abs() < 1e-12);
    }

    #[test]
    fn fixed_point_start_is_degenerate() {
        // With S = I every start is its own fixed point.
        let a = Matrix::from_rows(&[[0.2, 0.8], [0.6, 0.4]]);
        assert!(matches!(convergence_profile(&a, &Matrix::identity(2), 0.5, 3), Err(Error::DegenerateResidual(_))));
    }

    #[test]
    fn residuals_monotone_on_random_instances() {
        for seed in 0..50u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let l = 4 + (seed as usize % 10);
            let s = chain_graph(l, seed);
            let a = random_stochastic(l, &mut rng);
            let beta = rng.random_range(0.1..0.9);
            let tr = convergence_profile(&a, &s, beta, 30).unwrap();
            let floor = RESIDUAL_FLOOR * tr.fixed_point.frobenius_norm();
            for w in tr.residual_norms.windows(2) {
                assert!(w[1] <= w[0] * (1.0 + 1e-12) + floor, "seed {seed}: {w:?}");
            }
            assert!(tr.rate_estimate <= beta + 0.05);
        }
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(32))]
        #[test]
        fn diffusion_is_linear(seed in 0u64..1000, alpha in -2.0f64..2.0, delta in -2.0f64..2.0, steps in 1usize..8) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s = chain_graph(6, seed);
            let a = random_stochastic(6, &mut rng);
            let b = random_stochastic(6, &mut rng);
            let mix = a.scale(alpha).add(&b.scale(delta)).unwrap();
            let lhs = diffuse_attention(&mix, &s, 0.6, steps).unwrap();
            let rhs = diffuse_attention(&a, &s, 0.6, steps).unwrap().scale(alpha)
                .add(&diffuse_attention(&b, &s, 0.6, steps).unwrap().scale(delta)).unwrap();
            proptest::prop_assert!(lhs.max_abs_diff(&rhs) < 1e-12);
        }

        #[test]
        fn row_stochastic_operator_preserves_row_sums(seed in 0u64..1000, steps in 1usize..10) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random_stochastic(5, &mut rng);
            let p = random_stochastic(5, &mut rng);
            let out = diffuse_attention(&a, &p, 0.45, steps).unwrap();
            for s in out.row_sums() {
                proptest::prop_assert!((s - 1.0).abs() < 1e-12);
            }
        }

        #[test]
        fn normalized_contact_graphs_have_unit_radius(seed in 0u64..10_000, l in 3usize..40) {
            let s = chain_graph(l, seed);
            let rho = spectral_radius(&s, 50_000, 1e-12, seed).unwrap_or(1.0);
            proptest::prop_assert!(rho <= 1.0 + 1e-8);
        }
    }

    #[test]
    fn kernel_rate_examples() {
        let cfg = DiffusionConfig::default();
        let zero = DiffusionKernelParams { w_beta: [0.0, 0.0], b_beta: 0.0, beta_logits: vec![], gamma_logits: vec![] };
        for l in 1..=4 {
            assert_eq!(diffusion_rate(l, 4, 0.3, &zero, &cfg), 0.5);
        }
        let k = DiffusionKernelParams { w_beta: [1.0, 0.0], ..zero.clone() };
        assert!((diffusion_rate(4, 4, 0.9, &k, &cfg) - 0.731_058_578_630_004_9).abs() < 1e-15);
        let off = DiffusionKernelParams { b_beta: -800.0, ..zero.clone() };
        assert!(diffusion_rate(1, 2, 1.0, &off, &cfg) < 1e-300);
        let free = DiffusionConfig { kernel_enabled: false, ..cfg };
        let k = DiffusionKernelParams { beta_logits: vec![logit(0.25), 0.0], ..zero };
        assert!((diffusion_rate(1, 2, 0.5, &k, &free) - 0.25).abs() < 1e-15);
        assert_eq!(diffusion_rate(2, 2, 0.5, &k, &free), 0.5);
    }

    #[test]
    fn pseudo_graph_without_threshold() {
        let a = Matrix::from_rows(&[[0.7, 0.3], [0.4, 0.6]]);
        let got = attention_pseudo_graph(&[a.clone()], 0.0, true).unwrap();
        let sym = Matrix::from_rows(&[[0.7, 0.35], [0.35, 0.6]]);
        assert!(got.max_abs_diff(&sym_normalize(&sym).unwrap()) < 1e-15);
    }

    #[test]
    fn pseudo_graph_threshold_is_strict() {
        // Symmetrised off-diagonal is exactly 0.35, so tau = 0.35 removes it; diagonal survives.
        let a = Matrix::from_rows(&[[0.7, 0.3], [0.4, 0.6]]);
        let got = attention_pseudo_graph(&[a.clone()], 0.35, true).unwrap();
        assert!(got.max_abs_diff(&Matrix::identity(2)) < 1e-15);
        let kept = attention_pseudo_graph(&[a], 0.349, true).unwrap();
        assert!(kept[(0, 1)] > 0.0);
    }

    #[test]
    fn uniform_attention_below_threshold() {
        let u = Matrix::filled(4, 4, 0.25);
        assert!(matches!(attention_pseudo_graph(&[u.clone(), u.clone()], 0.25, false), Err(Error::AllBelowThreshold)));
        // With self-loops every row falls back to itself.
        assert_eq!(attention_pseudo_graph(&[u], 0.25, true).unwrap(), Matrix::identity(4));
    }

    #[test]
    fn graph_diffusion_examples() {
        let out = diffuse_graph(&swap(), &swap(), 0.5, 1).unwrap();
        assert_eq!(out, Matrix::filled(2, 2, 0.5));
        let s = chain_graph(5, 3);
        assert!(diffuse_graph(&s, &Matrix::identity(5), 0.3, 6).unwrap().max_abs_diff(&s) < 1e-15);
        assert_eq!(diffuse_graph(&s, &chain_graph(5, 4), 0.0, 6).unwrap(), s);
    }

    #[test]
    fn neighbourhood_examples() {
        let s = Matrix::from_rows(&[[0.0, 0.4, 0.1], [0.4, 0.0, 0.2], [0.1, 0.2, 0.0]]);
        assert_eq!(diffused_neighborhoods(&s, 0.05, 2).get(0), &[1, 2]);
        assert!(diffused_neighborhoods(&s, 0.5, 2).lists().iter().all(|l| l.is_empty()));
        let u = Matrix::filled(2, 2, 0.5);
        let nb = diffused_neighborhoods(&u, 1e-3, 1);
        assert_eq!(nb.get(0), &[1]);
        assert_eq!(nb.get(1), &[0]);
        // ties resolve to the lower index
        let t = Matrix::from_rows(&[[0.0, 0.3, 0.3, 0.3], [0.0; 4], [0.0; 4], [0.0; 4]]);
        assert_eq!(diffused_neighborhoods(&t, 0.0, 2).get(0), &[1, 2]);
    }

    #[test]
    fn lipschitz_examples() {
        let id = lipschitz_check(&Matrix::identity(3), 0.4, 20, 1).unwrap();
        assert!((id.bound - 1.0).abs() < 1e-12);
        assert!((id.max_ratio - 1.0).abs() < 1e-12);
        let s = chain_graph(8, 7);
        let rep = lipschitz_check(&s, 0.4, 100, 7).unwrap();
        assert!(rep.max_ratio <= rep.bound + 1e-9);
        assert_eq!(lipschitz_check(&s, 0.4, 0, 7).unwrap().max_ratio, 0.0);
    }

    #[test]
    fn error_orthogonal_to_perron_vector() {
        // The anchored error A0 - A* = beta (I - S)(I - beta S)^-1 A0 has no component on the
        // eigenvalue-1 eigenvector of S, so the observable rate is governed by the next eigenvalue.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let s = chain_graph(8, 5);
        let a = random_stochastic(8, &mut rng);
        let e = a.sub(&attention_fixed_point(&a, &s, 0.5).unwrap()).unwrap();
        let lam = excited_spectral_radius(&s, &e, 1e-6).unwrap();
        assert!(lam < 1.0 - 1e-6);
        let tr = convergence_profile(&a, &s, 0.5, 200).unwrap();
        let floor = RESIDUAL_FLOOR * tr.fixed_point.frobenius_norm();
        let slope = fitted_log_slope(&tr.residual_norms, 3, floor).unwrap();
        assert!((slope - (0.5 * lam).ln()).abs() / (0.5 * lam).ln().abs() < 0.05, "{slope} vs {}", (0.5 * lam).ln());
    }

    fn kernel_store(kernel: bool, layers: usize) -> ParamStore {
        let mut p = ParamStore::new();
        p.insert(W_BETA, ParamKind::Diffusion, Matrix::row_vector(&[0.3, -0.7]));
        p.insert(B_BETA, ParamKind::Diffusion, Matrix::scalar(-0.4));
        for l in 0..layers {
            if !kernel {
                p.insert(beta_logit_name(l), ParamKind::Diffusion, Matrix::scalar(-1.0 + 0.3 * l as f64));
            }
            p.insert(gamma_logit_name(l), ParamKind::Diffusion, Matrix::scalar(-1.1));
        }
        p
    }

    #[test]
    fn gradients_through_unrolled_diffusion() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let s = chain_graph(6, 9);
        let heads = [random_stochastic(6, &mut rng), random_stochastic(6, &mut rng)];
        let w = Matrix::from_fn(6, 6, |_, _| rng.random_range(-1.0..1.0));
        for kernel in [true, false] {
            let cfg = DiffusionConfig { kernel_enabled: kernel, tau: 0.1, ..DiffusionConfig::default() };
            let mut p = kernel_store(kernel, 2);
            p.insert("logits", ParamKind::Weight, Matrix::from_fn(6, 6, |i, j| ((i * 7 + j) as f64).sin()));
            let report = check_param_gradients(&p, None, 1e-6, 1e-8, |t, ps| {
                let lg = t.param(ps, "logits")?;
                let a0 = t.softmax_rows(lg, None);
                let extra = t.constant(heads[0].clone());
                let attn = [a0, extra];
                let sv = t.constant(s.clone());
                let beta = beta_on(t, ps, 1, 2, &attn, &cfg)?;
                let d0 = diffuse_attention_on(t, a0, sv, beta, 3);
                let d1 = diffuse_attention_on(t, extra, sv, beta, 3);
                let d0 = t.row_normalize(d0);
                let d1 = t.row_normalize(d1);
                let g = pseudo_graph_on(t, &[d0, d1], cfg.tau, true)?;
                let gamma = gamma_on(t, ps, 1)?;
                let sd = diffuse_graph_on(t, sv, g, gamma, 3);
                let wv = t.constant(w.clone());
                let prod = t.mul(sd, wv);
                Ok(t.sum(prod))
            })
            .unwrap();
            for g in report {
                assert!(g.rel_err < 1e-5, "kernel={kernel} {}: {:e}", g.name, g.rel_err);
            }
        }
    }

    #[test]
    fn tape_and_plain_versions_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let s = chain_graph(7, 12);
        let heads = [random_stochastic(7, &mut rng), random_stochastic(7, &mut rng)];
        let mut t = Tape::new();
        let sv = t.constant(s.clone());
        let hv: Vec<Var> = heads.iter().map(|h| t.constant(h.clone())).collect();
        let beta = t.constant(Matrix::scalar(0.3));
        let d = diffuse_attention_on(&mut t, hv[0], sv, beta, 4);
        assert!(t.value(d).max_abs_diff(&diffuse_attention(&heads[0], &s, 0.3, 4).unwrap()) < 1e-15);
        let g = pseudo_graph_on(&mut t, &hv, 0.05, true).unwrap();
        let gp = attention_pseudo_graph(&heads, 0.05, true).unwrap();
        assert!(t.value(g).max_abs_diff(&gp) < 1e-15);
        let gamma = t.constant(Matrix::scalar(0.2));
        let sd = diffuse_graph_on(&mut t, sv, g, gamma, 5);
        assert!(t.value(sd).max_abs_diff(&diffuse_graph(&s, &gp, 0.2, 5).unwrap()) < 1e-15);
    }
}
