use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Matrix, Vector};
use crate::error::{Error, Result};

/// Row-wise softmax with per-row max subtraction.
pub fn softmax_rows(m: &Matrix) -> Matrix {
    let mut out = m.clone();
    for i in 0..m.rows() {
        softmax_in_place(out.row_mut(i));
    }
    out
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Standard normal CDF via `erf`.
#[inline]
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

#[inline]
pub fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Exact GELU, `x * Phi(x)`.
#[inline]
pub fn gelu_scalar(x: f64) -> f64 {
    x * normal_cdf(x)
}

#[inline]
pub fn gelu_grad_scalar(x: f64) -> f64 {
    normal_cdf(x) + x * normal_pdf(x)
}

pub fn gelu(x: &Vector) -> Vector {
    Vector(x.0.iter().map(|&v| gelu_scalar(v)).collect())
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Gaussian radial basis expansion of a scalar.
pub fn rbf_expand(x: f64, centers: &Vector, gamma: f64) -> Vector {
    debug_assert!(gamma > 0.0 && !centers.is_empty());
    Vector(centers.0.iter().map(|&mu| (-gamma * (x - mu) * (x - mu)).exp()).collect())
}

/// `D^{-1/2} S D^{-1/2}` with `D` the row-sum degree matrix.
pub fn sym_normalize(s: &Matrix) -> Result<Matrix> {
    if !s.is_square() {
        return Err(Error::shape("sym_normalize", format!("{}x{} is not square", s.rows(), s.cols())));
    }
    let inv_sqrt = inv_sqrt_degrees(s)?;
    Ok(Matrix::from_fn(s.rows(), s.cols(), |i, j| s[(i, j)] * inv_sqrt[i] * inv_sqrt[j]))
}

pub(crate) fn inv_sqrt_degrees(s: &Matrix) -> Result<Vec<f64>> {
    s.row_sums()
        .into_iter()
        .enumerate()
        .map(|(i, d)| if d > 0.0 { Ok(1.0 / d.sqrt()) } else { Err(Error::ZeroDegree(i)) })
        .collect()
}

/// Power-iteration estimate of `|lambda_max|`.
///
/// Uses the norm ratio `||M x|| / ||x||`, which converges to the largest
/// eigenvalue magnitude even when `+lambda` and `-lambda` are both present.
/// The start vector is drawn from `seed`.
pub fn spectral_radius(m: &Matrix, iters: usize, tol: f64, seed: u64) -> Result<f64> {
    if !m.is_square() {
        return Err(Error::shape("spectral_radius", format!("{}x{} is not square", m.rows(), m.cols())));
    }
    let n = m.rows();
    if n == 0 {
        return Ok(0.0);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x: Vec<f64> = (0..n).map(|_| rng.random_range(0.5..1.5)).collect();
    normalize(&mut x);
    let mut estimate = 0.0;
    let mut residual = f64::INFINITY;
    for _ in 0..iters {
        let mut y = vec![0.0; n];
        for (i, yi) in y.iter_mut().enumerate() {
            *yi = m.row(i).iter().zip(&x).map(|(a, b)| a * b).sum();
        }
        let norm = y.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Ok(0.0);
        }
        residual = (norm - estimate).abs();
        estimate = norm;
        for v in y.iter_mut() {
            *v /= norm;
        }
        x = y;
        if residual <= tol * estimate.max(1.0) {
            return Ok(estimate);
        }
    }
    Err(Error::NoConvergence { estimate, residual })
}

fn normalize(x: &mut [f64]) {
    let n = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    for v in x.iter_mut() {
        *v /= n;
    }
}

/// Solves `A X = B` by Gaussian elimination with partial pivoting.
pub fn solve_linear(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if !a.is_square() || a.rows() != b.rows() {
        return Err(Error::shape(
            "solve_linear",
            format!("A is {}x{}, B is {}x{}", a.rows(), a.cols(), b.rows(), b.cols()),
        ));
    }
    let n = a.rows();
    let m = b.cols();
    let mut lu = a.clone();
    let mut x = b.clone();
    for col in 0..n {
        let (pivot_row, pivot) = (col..n)
            .map(|r| (r, lu[(r, col)]))
            .max_by(|p, q| p.1.abs().total_cmp(&q.1.abs()))
            .expect("non-empty pivot range");
        if pivot.abs() <= 1e-12 {
            return Err(Error::Singular { column: col, pivot });
        }
        if pivot_row != col {
            for j in 0..n {
                let tmp = lu[(col, j)];
                lu[(col, j)] = lu[(pivot_row, j)];
                lu[(pivot_row, j)] = tmp;
            }
            for j in 0..m {
                let tmp = x[(col, j)];
                x[(col, j)] = x[(pivot_row, j)];
                x[(pivot_row, j)] = tmp;
            }
        }
        for r in col + 1..n {
            let factor = lu[(r, col)] / pivot;
            if factor == 0.0 {
                continue;
            }
            for j in col..n {
                lu[(r, j)] -= factor * lu[(col, j)];
            }
            for j in 0..m {
                x[(r, j)] -= factor * x[(col, j)];
            }
        }
    }
    for col in (0..n).rev() {
        let pivot = lu[(col, col)];
        for j in 0..m {
            let mut acc = x[(col, j)];
            for k in col + 1..n {
                acc -= lu[(col, k)] * x[(k, j)];
            }
            x[(col, j)] = acc / pivot;
        }
    }
    Ok(x)
}

/// Central finite-difference gradient of a scalar function.
pub fn fd_gradient(f: impl Fn(&[f64]) -> f64, x: &[f64], eps: f64) -> Result<Vector> {
    if !(1e-7..=1e-4).contains(&eps) {
        return Err(Error::InvalidArgument(format!("finite-difference step {eps} outside [1e-7, 1e-4]")));
    }
    let mut probe = x.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + eps;
        let fp = f(&probe);
        probe[i] = orig - eps;
        let fm = f(&probe);
        probe[i] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::NonFinite(format!("probe along coordinate {i}")));
        }
        grad.push((fp - fm) / (2.0 * eps));
    }
    Ok(Vector(grad))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn softmax_examples() {
        let s = softmax_rows(&Matrix::row_vector(&[0.0, 0.0, 0.0]));
        assert!(s.as_slice().iter().all(|&v| close(v, 1.0 / 3.0, 1e-15)));
        let s = softmax_rows(&Matrix::row_vector(&[1000.0, 1000.0]));
        assert_eq!(s.as_slice(), &[0.5, 0.5]);
        // exp(0)/(1+3), exp(ln 3)/(1+3)
        let s = softmax_rows(&Matrix::row_vector(&[0.0, 3f64.ln()]));
        assert!(close(s[(0, 0)], 0.25, 1e-15) && close(s[(0, 1)], 0.75, 1e-15));
    }

    #[test]
    fn gelu_examples() {
        assert_eq!(gelu_scalar(0.0), 0.0);
        assert!(close(gelu_scalar(10.0), 10.0, 1e-9));
        // Phi(1) = 0.5 * (1 + erf(1/sqrt 2)); erf(0.70710678...) = 0.68268949213708585
        assert!(close(gelu_scalar(1.0), 0.5 * (1.0 + 0.682_689_492_137_085_9), 1e-15));
        assert!(close(gelu_scalar(1.0), 0.841_344_746_068_542_9, 1e-15));
    }

    #[test]
    fn gelu_grad_matches_fd() {
        for &x in &[-3.0, -0.7, 0.0, 0.4, 2.5] {
            let fd = (gelu_scalar(x + 1e-6) - gelu_scalar(x - 1e-6)) / 2e-6;
            assert!(close(gelu_grad_scalar(x), fd, 1e-8));
        }
    }

    #[test]
    fn rbf_examples() {
        let c = Vector(vec![0.0, 2.0, 5.0]);
        assert_eq!(rbf_expand(2.0, &c, 0.7)[1], 1.0);
        let far = rbf_expand(1.0, &c, 1e4);
        assert!(far.0.iter().all(|&v| v < 1e-300));
        let r = rbf_expand(1.0, &Vector(vec![0.0, 2.0]), 1.0);
        let e = (-1.0f64).exp();
        assert!(close(r[0], e, 1e-16) && close(r[1], e, 1e-16));
    }

    #[test]
    fn sym_normalize_examples() {
        assert_eq!(sym_normalize(&Matrix::identity(3)).unwrap(), Matrix::identity(3));
        let s = sym_normalize(&Matrix::from_rows(&[[0.0, 2.0], [2.0, 0.0]])).unwrap();
        assert!(s.max_abs_diff(&Matrix::from_rows(&[[0.0, 1.0], [1.0, 0.0]])) < 1e-15);
        let s = sym_normalize(&Matrix::from_rows(&[[1.0, 1.0], [1.0, 1.0]])).unwrap();
        assert!(s.max_abs_diff(&Matrix::filled(2, 2, 0.5)) < 1e-15);
        let z = Matrix::from_rows(&[[1.0, 0.0], [0.0, 0.0]]);
        assert!(matches!(sym_normalize(&z), Err(Error::ZeroDegree(1))));
    }

    #[test]
    fn spectral_radius_examples() {
        assert!(close(spectral_radius(&Matrix::identity(4), 100, 1e-12, 0).unwrap(), 1.0, 1e-12));
        let d = Matrix::diag(&[0.3, 0.7]);
        assert!(close(spectral_radius(&d, 2000, 1e-14, 1).unwrap(), 0.7, 1e-10));
        // char. poly x^2 - 1 => eigenvalues +1, -1
        let p = Matrix::from_rows(&[[0.0, 1.0], [1.0, 0.0]]);
        assert!(close(spectral_radius(&p, 100, 1e-12, 2).unwrap(), 1.0, 1e-12));
    }

    #[test]
    fn spectral_radius_reports_non_convergence() {
        let d = Matrix::diag(&[0.999, 1.0]);
        match spectral_radius(&d, 3, 1e-15, 0) {
            Err(Error::NoConvergence { estimate, .. }) => assert!(estimate > 0.99),
            other => panic!("expected NoConvergence, got {other:?}"),
        }
    }

    #[test]
    fn solve_linear_examples() {
        let b = Matrix::from_rows(&[[1.0, 2.0], [3.0, 4.0]]);
        assert_eq!(solve_linear(&Matrix::identity(2), &b).unwrap(), b);
        let x = solve_linear(&Matrix::identity(3).scale(2.0), &Matrix::identity(3)).unwrap();
        assert!(x.max_abs_diff(&Matrix::identity(3).scale(0.5)) < 1e-15);
        // det = 0.75; inverse = (1/0.75) [[1, .5], [.5, 1]]
        let a = Matrix::from_rows(&[[1.0, -0.5], [-0.5, 1.0]]);
        let x = solve_linear(&a, &Matrix::identity(2)).unwrap();
        let want = Matrix::from_rows(&[[4.0 / 3.0, 2.0 / 3.0], [2.0 / 3.0, 4.0 / 3.0]]);
        assert!(x.max_abs_diff(&want) < 1e-14);
    }

    #[test]
    fn solve_linear_detects_singular() {
        let a = Matrix::from_rows(&[[1.0, 2.0], [2.0, 4.0]]);
        assert!(matches!(solve_linear(&a, &Matrix::identity(2)), Err(Error::Singular { .. })));
    }

    #[test]
    fn fd_gradient_examples() {
        let g = fd_gradient(|x| x.iter().map(|v| v * v).sum(), &[1.0, 2.0], 1e-5).unwrap();
        assert!(close(g[0], 2.0, 1e-6) && close(g[1], 4.0, 1e-6));
        let g = fd_gradient(|_| 7.0, &[1.0, -3.0, 2.0], 1e-5).unwrap();
        assert!(g.0.iter().all(|&v| v == 0.0));
        let g = fd_gradient(|x| x[0] * x[1], &[3.0, 5.0], 1e-5).unwrap();
        assert!(close(g[0], 5.0, 1e-6) && close(g[1], 3.0, 1e-6));
    }

    #[test]
    fn fd_gradient_flags_non_finite_and_bad_step() {
        assert!(matches!(fd_gradient(|x| x[0].ln(), &[0.0], 1e-5), Err(Error::NonFinite(_))));
        assert!(matches!(fd_gradient(|x| x[0], &[0.0], 1e-2), Err(Error::InvalidArgument(_))));
    }
}
