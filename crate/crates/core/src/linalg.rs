//! Eigenvalue estimates: power iteration for sparse operators and dense
//! Jacobi rotations for small symmetric matrices.

use rand::Rng;

use crate::error::{Error, Result};
use crate::seed;
use crate::tensor::{SparseMatrix, Tensor};

pub const DEFAULT_POWER_ITERS: usize = 100;

/// Fallback largest eigenvalue of a normalized Laplacian when power
/// iteration does not converge; the analytic spectral bound.
pub const LAPLACIAN_LAMBDA_FALLBACK: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PowerEstimate {
    /// Rayleigh quotient of the final iterate.
    pub value: f64,
    /// `‖Sx − λx‖` for the final unit iterate.
    pub residual: f64,
    pub converged: bool,
}

/// Power iteration for the largest-magnitude eigenvalue of a symmetric
/// matrix. Convergence means a residual below `1e-6·max(|λ|, 1)`.
pub fn power_iteration(s: &SparseMatrix, iters: usize, seed: u64) -> Result<PowerEstimate> {
    let n = s.n_rows();
    if n != s.n_cols() {
        return Err(Error::shape(
            "power_iteration",
            format!("matrix is {}x{}, not square", n, s.n_cols()),
        ));
    }
    if iters == 0 {
        return Err(Error::invalid("power_iteration needs at least one iteration"));
    }
    if n == 0 {
        return Err(Error::invalid("power_iteration on an empty matrix"));
    }
    let mut rng = seed::derived_rng(seed, "power_iteration", 0);
    let mut x: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    normalize(&mut x);
    let mut value = 0.0;
    let mut residual = f64::INFINITY;
    for _ in 0..iters {
        let y = s.mul_vec(&x);
        value = dot(&x, &y);
        residual = y
            .iter()
            .zip(&x)
            .map(|(a, b)| (a - value * b).powi(2))
            .sum::<f64>()
            .sqrt();
        let mut next = y;
        if normalize(&mut next) == 0.0 {
            // x lies in the null space; the iterate cannot improve.
            break;
        }
        x = next;
    }
    let converged = residual <= 1e-6 * value.abs().max(1.0);
    Ok(PowerEstimate {
        value,
        residual,
        converged,
    })
}

/// λ_max for a normalized Laplacian, falling back to 2.0 on non-convergence.
pub fn laplacian_lambda_max(lap: &SparseMatrix, iters: usize, seed: u64) -> Result<f64> {
    let est = power_iteration(lap, iters, seed)?;
    if est.converged && est.value > 0.0 {
        Ok(est.value)
    } else {
        Ok(LAPLACIAN_LAMBDA_FALLBACK)
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn normalize(x: &mut [f64]) -> f64 {
    let n = dot(x, x).sqrt();
    if n > 0.0 {
        x.iter_mut().for_each(|v| *v /= n);
    }
    n
}

/// Symmetric eigendecomposition by cyclic Jacobi rotations.
/// Returns eigenvalues (ascending) and the matching eigenvectors as columns
/// of a row-major `n×n` matrix.
pub fn jacobi_eigen(a: &Tensor) -> Result<(Vec<f64>, Tensor)> {
    let (n, m) = a.dims2()?;
    if n != m {
        return Err(Error::shape("jacobi_eigen", "matrix is not square"));
    }
    let mut s = a.data().to_vec();
    let mut v = Tensor::identity(n).into_data();
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| s[i * n + j].powi(2))
            .sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = s[p * n + q];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let theta = (s[q * n + q] - s[p * n + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let sn = t * c;
                for k in 0..n {
                    let akp = s[k * n + p];
                    let akq = s[k * n + q];
                    s[k * n + p] = c * akp - sn * akq;
                    s[k * n + q] = sn * akp + c * akq;
                }
                for k in 0..n {
                    let apk = s[p * n + k];
                    let aqk = s[q * n + k];
                    s[p * n + k] = c * apk - sn * aqk;
                    s[q * n + k] = sn * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[k * n + p];
                    let vkq = v[k * n + q];
                    v[k * n + p] = c * vkp - sn * vkq;
                    v[k * n + q] = sn * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| s[i * n + i].total_cmp(&s[j * n + j]));
    let values = order.iter().map(|&i| s[i * n + i]).collect();
    let mut vecs = vec![0.0; n * n];
    for (col, &src) in order.iter().enumerate() {
        for r in 0..n {
            vecs[r * n + col] = v[r * n + src];
        }
    }
    Ok((values, Tensor::new(vec![n, n], vecs)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn diagonal_case() {
        let s = SparseMatrix::from_triplets(3, 3, &[(0, 0, 1.0), (1, 1, 2.0), (2, 2, 5.0)]).unwrap();
        let est = power_iteration(&s, 100, 3).unwrap();
        assert!((est.value - 5.0).abs() < 1e-6, "{est:?}");
        assert!(est.converged);
    }

    #[test]
    fn rejects_non_square() {
        let s = SparseMatrix::zeros(2, 3);
        assert!(power_iteration(&s, 10, 0).is_err());
    }

    #[test]
    fn deterministic_under_seed() {
        let s = SparseMatrix::from_triplets(2, 2, &[(0, 0, 1.0), (0, 1, 0.5), (1, 0, 0.5), (1, 1, 1.0)]).unwrap();
        assert_eq!(power_iteration(&s, 7, 11).unwrap(), power_iteration(&s, 7, 11).unwrap());
    }
}
