//! Chebyshev spectral graph convolution.
//!
//! A filter of order `K` is a polynomial `Σ_k θ_k T_k(L̃)` in the scaled
//! Laplacian `L̃ = (2/λ_max)·L' − I`. The products `T_k(L̃)·X` come from the
//! three-term recurrence, so no eigendecomposition is ever formed.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{SparseMatrix, Tensor};

pub const DEFAULT_ORDER: usize = 6;

/// `(2/λ_max)·lap − I`.
pub fn scale_laplacian(lap: &SparseMatrix, lambda_max: f64) -> Result<SparseMatrix> {
    if !(lambda_max > 0.0) || !lambda_max.is_finite() {
        return Err(Error::invalid(format!("lambda_max must be positive, got {lambda_max}")));
    }
    lap.scale_add_identity(2.0 / lambda_max, -1.0)
}

/// `T_k(x)` by the same recurrence used for matrices.
pub fn cheb_poly_scalar(k: usize, x: f64) -> f64 {
    let (mut prev, mut cur) = (1.0, x);
    match k {
        0 => prev,
        _ => {
            for _ in 1..k {
                let next = 2.0 * x * cur - prev;
                prev = cur;
                cur = next;
            }
            cur
        }
    }
}

/// Shape of one Chebyshev convolution layer. Parameters live outside the
/// layer: `theta` is `[K·F_in, F_out]` (block `k` holds `θ_k`), `bias` is
/// `[F_out]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChebConvLayer {
    pub order: usize,
    pub f_in: usize,
    pub f_out: usize,
}

impl ChebConvLayer {
    pub fn new(order: usize, f_in: usize, f_out: usize) -> Result<Self> {
        if order == 0 || f_in == 0 || f_out == 0 {
            return Err(Error::invalid("Chebyshev layer needs K, F_in, F_out >= 1"));
        }
        Ok(Self { order, f_in, f_out })
    }

    pub fn theta_shape(&self) -> [usize; 2] {
        [self.order * self.f_in, self.f_out]
    }

    /// θ uniform in `±sqrt(6/(K·F_in + F_out))`, bias zero.
    pub fn init(&self, rng: &mut impl Rng) -> (Tensor, Tensor) {
        let limit = (6.0 / (self.order * self.f_in + self.f_out) as f64).sqrt();
        let [r, c] = self.theta_shape();
        let theta = (0..r * c).map(|_| rng.gen_range(-limit..limit)).collect();
        (
            Tensor::new(vec![r, c], theta).expect("theta shape"),
            Tensor::zeros(&[self.f_out]),
        )
    }

    /// `Y = Σ_k T_k(L̃)·X·θ_k + bias`.
    ///
    /// `x` is `[N, B·F_in]`: `B` independent signals laid side by side, each
    /// filtered with the same parameters. The output is `[N, B·F_out]`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        scaled_lap: &Arc<SparseMatrix>,
        x: Var,
        theta: Var,
        bias: Var,
    ) -> Result<Var> {
        let (n, cols) = tape.value(x).dims2()?;
        if scaled_lap.n_rows() != n || scaled_lap.n_cols() != n {
            return Err(Error::shape(
                "cheb_conv",
                format!(
                    "Laplacian is {}x{}, features have {n} rows",
                    scaled_lap.n_rows(),
                    scaled_lap.n_cols()
                ),
            ));
        }
        if cols % self.f_in != 0 {
            return Err(Error::shape(
                "cheb_conv",
                format!("{cols} feature columns is not a multiple of F_in = {}", self.f_in),
            ));
        }
        if tape.shape(theta) != self.theta_shape() || tape.value(bias).len() != self.f_out {
            return Err(Error::shape(
                "cheb_conv",
                format!(
                    "parameters {:?}/{:?} do not match layer {:?}",
                    tape.shape(theta),
                    tape.shape(bias),
                    self
                ),
            ));
        }
        let batch = cols / self.f_in;

        let mut basis = Vec::with_capacity(self.order);
        basis.push(x);
        if self.order > 1 {
            basis.push(tape.sparse_matmul(scaled_lap, x)?);
        }
        for k in 2..self.order {
            let lz = tape.sparse_matmul(scaled_lap, basis[k - 1])?;
            let twice = tape.scale(lz, 2.0)?;
            basis.push(tape.sub(twice, basis[k - 2])?);
        }
        let flat: Vec<Var> = basis
            .iter()
            .map(|&z| tape.reshape(z, &[n * batch, self.f_in]))
            .collect::<Result<_>>()?;
        let stacked = if flat.len() == 1 { flat[0] } else { tape.concat_cols(&flat)? };
        let y = tape.matmul(stacked, theta)?;
        let y = tape.add_row(y, bias)?;
        tape.reshape(y, &[n, batch * self.f_out])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scalar_polynomials() {
        assert!((cheb_poly_scalar(2, 0.5) + 0.5).abs() < 1e-15);
        for i in 0..=10 {
            let x = -1.0 + 0.2 * i as f64;
            assert!((cheb_poly_scalar(3, x) - (4.0 * x.powi(3) - 3.0 * x)).abs() < 1e-12);
        }
        for k in 0..=6 {
            for i in 0..20 {
                let phi = 0.16 * i as f64;
                assert!((cheb_poly_scalar(k, phi.cos()) - (k as f64 * phi).cos()).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn scale_identity_and_k3() {
        let i3 = SparseMatrix::identity(3);
        let z = scale_laplacian(&i3, 2.0).unwrap().to_dense();
        assert!(z.data().iter().all(|&v| v == 0.0));
        let k3 = SparseMatrix::from_triplets(
            3,
            3,
            &[
                (0, 0, 1.0), (0, 1, -0.5), (0, 2, -0.5),
                (1, 0, -0.5), (1, 1, 1.0), (1, 2, -0.5),
                (2, 0, -0.5), (2, 1, -0.5), (2, 2, 1.0),
            ],
        )
        .unwrap();
        let s = scale_laplacian(&k3, 1.5).unwrap().to_dense();
        for i in 0..3 {
            for j in 0..3 {
                let want = if i == j { 1.0 / 3.0 } else { -2.0 / 3.0 };
                assert!((s.get2(i, j) - want).abs() < 1e-15);
            }
        }
        assert!(scale_laplacian(&k3, 0.0).is_err());
        assert!(scale_laplacian(&k3, -1.0).is_err());
    }

    fn run(layer: &ChebConvLayer, lap: SparseMatrix, x: Tensor, theta: Tensor, bias: Tensor) -> Tensor {
        let lap = Arc::new(lap);
        let mut tape = Tape::new();
        let (x, t, b) = (tape.leaf(x), tape.leaf(theta), tape.leaf(bias));
        let y = layer.forward(&mut tape, &lap, x, t, b).unwrap();
        tape.value(y).clone()
    }

    #[test]
    fn order_one_is_pointwise_linear() {
        let layer = ChebConvLayer::new(1, 2, 1).unwrap();
        let x = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let theta = Tensor::from_rows(&[vec![0.5], vec![-1.0]]).unwrap();
        let bias = Tensor::new(vec![1], vec![0.25]).unwrap();
        let lap = SparseMatrix::from_triplets(2, 2, &[(0, 1, 7.0), (1, 0, 7.0)]).unwrap();
        let y = run(&layer, lap, x, theta, bias);
        assert_eq!(y.data(), &[0.5 - 2.0 + 0.25, 1.5 - 4.0 + 0.25]);
    }

    #[test]
    fn order_two_with_zero_laplacian() {
        let layer = ChebConvLayer::new(2, 1, 1).unwrap();
        let x = Tensor::new(vec![3, 1], vec![1.0, -2.0, 4.0]).unwrap();
        let theta = Tensor::new(vec![2, 1], vec![3.0, 100.0]).unwrap();
        let bias = Tensor::new(vec![1], vec![1.0]).unwrap();
        let y = run(&layer, SparseMatrix::zeros(3, 3), x, theta, bias);
        assert_eq!(y.data(), &[4.0, -5.0, 13.0]);
    }

    #[test]
    fn batched_columns_filter_independently() {
        let mut rng = crate::seed::rng(5);
        let layer = ChebConvLayer::new(3, 2, 2).unwrap();
        let (theta, _) = layer.init(&mut rng);
        let bias = Tensor::new(vec![2], vec![0.1, -0.2]).unwrap();
        let lap = SparseMatrix::from_triplets(
            3,
            3,
            &[(0, 1, 0.5), (1, 0, 0.5), (1, 2, -0.3), (2, 1, -0.3), (0, 0, 0.2)],
        )
        .unwrap();
        let a: Vec<f64> = (0..6).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..6).map(|i| (i as f64 * 0.91).cos()).collect();
        let ya = run(&layer, lap.clone(), Tensor::new(vec![3, 2], a.clone()).unwrap(), theta.clone(), bias.clone());
        let yb = run(&layer, lap.clone(), Tensor::new(vec![3, 2], b.clone()).unwrap(), theta.clone(), bias.clone());
        let mut both = Vec::new();
        for r in 0..3 {
            both.extend_from_slice(&a[r * 2..r * 2 + 2]);
            both.extend_from_slice(&b[r * 2..r * 2 + 2]);
        }
        let y = run(&layer, lap, Tensor::new(vec![3, 4], both).unwrap(), theta, bias);
        for r in 0..3 {
            for c in 0..2 {
                assert!((y.get2(r, c) - ya.get2(r, c)).abs() < 1e-14);
                assert!((y.get2(r, 2 + c) - yb.get2(r, c)).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn shape_errors() {
        let layer = ChebConvLayer::new(2, 2, 1).unwrap();
        let lap = Arc::new(SparseMatrix::identity(3));
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[3, 3]));
        let t = tape.leaf(Tensor::zeros(&[4, 1]));
        let b = tape.leaf(Tensor::zeros(&[1]));
        assert!(layer.forward(&mut tape, &lap, x, t, b).is_err());
        let x = tape.leaf(Tensor::zeros(&[4, 2]));
        assert!(layer.forward(&mut tape, &lap, x, t, b).is_err());
        assert!(ChebConvLayer::new(0, 1, 1).is_err());
    }
}
