//! Brute-force reference computations used to validate the fast paths:
//! dense eigendecomposition-based graph filtering, random test graphs and
//! exhaustive permutation transport. Nothing here is called by the
//! production pipeline.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{SparseMatrix, Tensor};

pub use crate::linalg::jacobi_eigen;

fn permutations(n: usize) -> Vec<Vec<usize>> {
    // Heap's algorithm.
    let mut a: Vec<usize> = (0..n).collect();
    let mut out = vec![a.clone()];
    let mut c = vec![0usize; n];
    let mut i = 0;
    while i < n {
        if c[i] < i {
            if i % 2 == 0 {
                a.swap(0, i);
            } else {
                a.swap(c[i], i);
            }
            out.push(a.clone());
            c[i] += 1;
            i = 0;
        } else {
            c[i] = 0;
            i += 1;
        }
    }
    out
}

/// Exact `W_p^p` between two uniform point clouds of equal size `n ≤ 8`,
/// by enumerating all `n!` matchings. Ground cost is `‖x − y‖₂^p`.
pub fn exact_wasserstein(xs: &[Vec<f64>], ys: &[Vec<f64>], p: f64) -> Result<f64> {
    let n = xs.len();
    if n != ys.len() {
        return Err(Error::invalid("oracle needs equal-size uniform measures"));
    }
    if n == 0 || n > 8 {
        return Err(Error::invalid(format!("oracle supports 1..=8 points, got {n}")));
    }
    let cost: Vec<Vec<f64>> = xs
        .iter()
        .map(|x| {
            ys.iter()
                .map(|y| {
                    let d2: f64 = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum();
                    d2.sqrt().powf(p)
                })
                .collect()
        })
        .collect();
    let best = permutations(n)
        .iter()
        .map(|perm| perm.iter().enumerate().map(|(i, &j)| cost[i][j]).sum::<f64>())
        .fold(f64::INFINITY, f64::min);
    Ok(best / n as f64)
}

/// Normalized Laplacian of a random connected graph on `n ≥ 2` vertices:
/// a random spanning tree plus extra edges with probability `density`.
pub fn random_normalized_laplacian(n: usize, density: f64, rng: &mut impl Rng) -> Result<SparseMatrix> {
    if n < 2 {
        return Err(Error::invalid("random graph needs at least two vertices"));
    }
    let mut adj = vec![vec![false; n]; n];
    for v in 1..n {
        let u = rng.gen_range(0..v);
        adj[u][v] = true;
        adj[v][u] = true;
    }
    for u in 0..n {
        for v in u + 1..n {
            if rng.gen_bool(density) {
                adj[u][v] = true;
                adj[v][u] = true;
            }
        }
    }
    let deg: Vec<f64> = adj.iter().map(|r| r.iter().filter(|&&b| b).count() as f64).collect();
    let mut trip = Vec::new();
    for u in 0..n {
        trip.push((u, u, 1.0));
        for v in 0..n {
            if adj[u][v] {
                trip.push((u, v, -1.0 / (deg[u] * deg[v]).sqrt()));
            }
        }
    }
    SparseMatrix::from_triplets(n, n, &trip)
}

/// Dense spectral form of a Chebyshev filter bank:
/// `Y = Σ_k U·T_k(Λ)·Uᵀ·X·θ_k + bias`, with `U, Λ` from a Jacobi
/// eigendecomposition of `scaled_lap`. `theta` is `[K·F_in, F_out]`.
pub fn spectral_conv_dense(scaled_lap: &Tensor, x: &Tensor, theta: &Tensor, bias: &[f64], order: usize) -> Result<Tensor> {
    let (n, f_in) = x.dims2()?;
    let (rows, f_out) = theta.dims2()?;
    if rows != order * f_in || bias.len() != f_out {
        return Err(Error::shape("spectral_conv_dense", "parameter shapes"));
    }
    let (vals, u) = jacobi_eigen(scaled_lap)?;
    let ut = u.transpose()?;
    let ut_x = ut.matmul(x)?;
    let mut y = vec![0.0; n * f_out];
    for r in 0..n {
        y[r * f_out..(r + 1) * f_out].copy_from_slice(bias);
    }
    let mut y = Tensor::new(vec![n, f_out], y)?;
    for k in 0..order {
        let mut filtered = ut_x.clone();
        for (i, &lam) in vals.iter().enumerate() {
            let g = crate::spectral::cheb_poly_scalar(k, lam);
            for c in 0..f_in {
                filtered.data_mut()[i * f_in + c] *= g;
            }
        }
        let block = Tensor::new(
            vec![f_in, f_out],
            theta.data()[k * f_in * f_out..(k + 1) * f_in * f_out].to_vec(),
        )?;
        let term = u.matmul(&filtered)?.matmul(&block)?;
        for (a, b) in y.data_mut().iter_mut().zip(term.data()) {
            *a += b;
        }
    }
    Ok(y)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn permutation_count() {
        assert_eq!(permutations(5).len(), 120);
        let mut all = permutations(4);
        all.sort();
        all.dedup();
        assert_eq!(all.len(), 24);
    }

    #[test]
    fn jacobi_reconstructs() {
        let a = Tensor::from_rows(&[
            vec![4.0, 1.0, 0.5],
            vec![1.0, 3.0, -1.0],
            vec![0.5, -1.0, 2.0],
        ])
        .unwrap();
        let (vals, vecs) = jacobi_eigen(&a).unwrap();
        for k in 0..3 {
            let col: Vec<f64> = (0..3).map(|r| vecs.get2(r, k)).collect();
            for r in 0..3 {
                let av: f64 = (0..3).map(|c| a.get2(r, c) * col[c]).sum();
                assert!((av - vals[k] * col[r]).abs() < 1e-12);
            }
        }
        assert!(vals.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn oracle_identity_and_swap() {
        let xs = vec![vec![0.0], vec![1.0]];
        assert_eq!(exact_wasserstein(&xs, &xs, 2.0).unwrap(), 0.0);
        let ys = vec![vec![1.0], vec![0.0]];
        assert_eq!(exact_wasserstein(&xs, &ys, 2.0).unwrap(), 0.0);
        assert!(exact_wasserstein(&xs, &ys[..1], 2.0).is_err());
        let big = vec![vec![0.0]; 9];
        assert!(exact_wasserstein(&big, &big, 2.0).is_err());
    }
}
