use std::sync::Arc;

use ottalk::autodiff::Tape;
use ottalk::gradcheck;
use ottalk::linalg;
use ottalk::oracle;
use ottalk::spectral::{scale_laplacian, ChebConvLayer};
use ottalk::tensor::{SparseMatrix, Tensor};
use rand::Rng;

fn random_tensor(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn conv(layer: &ChebConvLayer, lap: &Arc<SparseMatrix>, x: &Tensor, theta: &Tensor, bias: &Tensor) -> Tensor {
    let mut tape = Tape::new();
    let (x, t, b) = (
        tape.constant(x.clone()),
        tape.constant(theta.clone()),
        tape.constant(bias.clone()),
    );
    let y = layer.forward(&mut tape, lap, x, t, b).unwrap();
    tape.value(y).clone()
}

#[test]
fn recurrence_matches_eigendecomposition() {
    let mut rng = ottalk::seed::rng(11);
    for trial in 0..25 {
        let n = rng.gen_range(3..=10);
        let order = 1 + trial % 6;
        let (f_in, f_out) = (rng.gen_range(1..=3), rng.gen_range(1..=3));
        let lap = oracle::random_normalized_laplacian(n, 0.3, &mut rng).unwrap();
        let lmax = linalg::laplacian_lambda_max(&lap, 100, trial as u64).unwrap();
        let scaled = Arc::new(scale_laplacian(&lap, lmax).unwrap());
        let layer = ChebConvLayer::new(order, f_in, f_out).unwrap();
        let x = random_tensor(&mut rng, &[n, f_in]);
        let theta = random_tensor(&mut rng, &layer.theta_shape());
        let bias = random_tensor(&mut rng, &[f_out]);
        let fast = conv(&layer, &scaled, &x, &theta, &bias);
        let dense = oracle::spectral_conv_dense(&scaled.to_dense(), &x, &theta, bias.data(), order).unwrap();
        assert!(fast.max_abs_diff(&dense) < 1e-8, "trial {trial}: {}", fast.max_abs_diff(&dense));
    }
}

#[test]
fn scaled_spectrum_within_unit_interval() {
    let mut rng = ottalk::seed::rng(3);
    for s in 0..10 {
        let lap = oracle::random_normalized_laplacian(9, 0.4, &mut rng).unwrap();
        let (vals, _) = oracle::jacobi_eigen(&lap.to_dense()).unwrap();
        let scaled = scale_laplacian(&lap, *vals.last().unwrap()).unwrap();
        let est = linalg::power_iteration(&scaled, 100, s).unwrap();
        assert!(est.value.abs() <= 1.0 + 1e-6);
    }
}

#[test]
fn linear_in_features() {
    let mut rng = ottalk::seed::rng(4);
    let lap = oracle::random_normalized_laplacian(8, 0.3, &mut rng).unwrap();
    let scaled = Arc::new(scale_laplacian(&lap, 2.0).unwrap());
    let layer = ChebConvLayer::new(5, 2, 3).unwrap();
    let theta = random_tensor(&mut rng, &layer.theta_shape());
    let bias = random_tensor(&mut rng, &[3]);
    let x1 = random_tensor(&mut rng, &[8, 2]);
    let x2 = random_tensor(&mut rng, &[8, 2]);
    let (a, b) = (0.7, -1.3);
    let mix = Tensor::new(
        vec![8, 2],
        x1.data().iter().zip(x2.data()).map(|(p, q)| a * p + b * q).collect(),
    )
    .unwrap();
    let y = conv(&layer, &scaled, &mix, &theta, &bias);
    let y1 = conv(&layer, &scaled, &x1, &theta, &bias);
    let y2 = conv(&layer, &scaled, &x2, &theta, &bias);
    for r in 0..8 {
        for c in 0..3 {
            let want = a * y1.get2(r, c) + b * y2.get2(r, c) - (a + b - 1.0) * bias.data()[c];
            assert!((y.get2(r, c) - want).abs() < 1e-10);
        }
    }
}

#[test]
fn permutation_equivariant() {
    let mut rng = ottalk::seed::rng(5);
    let n = 7;
    let lap = oracle::random_normalized_laplacian(n, 0.3, &mut rng).unwrap();
    let scaled = scale_laplacian(&lap, 1.8).unwrap();
    let mut perm: Vec<usize> = (0..n).collect();
    perm.reverse();
    perm.swap(0, 3);
    // P maps old vertex perm[i] to new position i.
    let trip: Vec<_> = (0..n)
        .flat_map(|i| {
            let (perm, scaled) = (&perm, &scaled);
            (0..n).filter_map(move |j| {
                let v = scaled.get(perm[i], perm[j]);
                (v != 0.0).then_some((i, j, v))
            })
        })
        .collect();
    let permuted = Arc::new(SparseMatrix::from_triplets(n, n, &trip).unwrap());
    let layer = ChebConvLayer::new(4, 2, 2).unwrap();
    let theta = random_tensor(&mut rng, &layer.theta_shape());
    let bias = random_tensor(&mut rng, &[2]);
    let x = random_tensor(&mut rng, &[n, 2]);
    let px = Tensor::new(
        vec![n, 2],
        perm.iter().flat_map(|&p| [x.get2(p, 0), x.get2(p, 1)]).collect(),
    )
    .unwrap();
    let y = conv(&layer, &Arc::new(scaled), &x, &theta, &bias);
    let py = conv(&layer, &permuted, &px, &theta, &bias);
    for i in 0..n {
        for c in 0..2 {
            assert!((py.get2(i, c) - y.get2(perm[i], c)).abs() < 1e-12);
        }
    }
}

#[test]
fn gradients_match_finite_differences() {
    let mut rng = ottalk::seed::rng(6);
    let lap = oracle::random_normalized_laplacian(6, 0.4, &mut rng).unwrap();
    let scaled = Arc::new(scale_laplacian(&lap, 2.0).unwrap());
    let layer = ChebConvLayer::new(6, 2, 2).unwrap();
    let inputs = vec![
        random_tensor(&mut rng, &[6, 2]),
        random_tensor(&mut rng, &layer.theta_shape()),
        random_tensor(&mut rng, &[2]),
    ];
    let res = gradcheck::check(
        |t, v| {
            let y = layer.forward(t, &scaled, v[0], v[1], v[2])?;
            let y = t.square(y)?;
            t.sum(y)
        },
        &inputs,
        gradcheck::DEFAULT_EPS,
        None,
    )
    .unwrap();
    assert!(res.max_rel_err < 1e-5, "{res:?}");
}
