//! Quick oracle suite, run by `ottalk selftest`.

use std::sync::Arc;

use rand::Rng;
use serde::Serialize;

use crate::autodiff::Tape;
use crate::error::Result;
use crate::gradcheck;
use crate::linalg;
use crate::mesh::{self, TriangleMesh};
use crate::oracle;
use crate::ot::{self, DiscreteMeasure};
use crate::resample;
use crate::seed;
use crate::spectral::{scale_laplacian, ChebConvLayer};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Serialize)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn random(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).expect("shape")
}

fn cloud(rng: &mut impl Rng, n: usize, d: usize) -> Vec<Vec<f64>> {
    (0..n).map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect()
}

fn uniform(points: &[Vec<f64>]) -> Result<DiscreteMeasure> {
    DiscreteMeasure::uniform(points[0].len(), points.concat())
}

fn spectral(seed_value: u64) -> Result<(bool, String)> {
    let mut rng = seed::derived_rng(seed_value, "selftest.spectral", 0);
    let mut worst = 0.0f64;
    for trial in 0..20 {
        let n = rng.gen_range(3..=10);
        let order = 1 + trial % 6;
        let lap = oracle::random_normalized_laplacian(n, 0.3, &mut rng)?;
        let lmax = linalg::laplacian_lambda_max(&lap, 100, trial as u64)?;
        let scaled = Arc::new(scale_laplacian(&lap, lmax)?);
        let layer = ChebConvLayer::new(order, 2, 2)?;
        let x = random(&mut rng, &[n, 2]);
        let theta = random(&mut rng, &layer.theta_shape());
        let bias = random(&mut rng, &[2]);
        let mut tape = Tape::new();
        let (xv, tv, bv) = (tape.constant(x.clone()), tape.constant(theta.clone()), tape.constant(bias.clone()));
        let y = layer.forward(&mut tape, &scaled, xv, tv, bv)?;
        let dense = oracle::spectral_conv_dense(&scaled.to_dense(), &x, &theta, bias.data(), order)?;
        worst = worst.max(tape.value(y).max_abs_diff(&dense));
    }
    Ok((worst < 1e-8, format!("max abs diff {worst:.2e} over 20 graphs")))
}

fn transport(seed_value: u64) -> Result<(bool, String)> {
    let mut rng = seed::derived_rng(seed_value, "selftest.ot", 0);
    let mut worst = 0.0f64;
    for trial in 0..100 {
        let n = 1 + trial % 7;
        let (xs, ys) = (cloud(&mut rng, n, 1), cloud(&mut rng, n, 1));
        let fast = ot::wasserstein_1d(&uniform(&xs)?, &uniform(&ys)?, 2.0)?;
        worst = worst.max((fast - oracle::exact_wasserstein(&xs, &ys, 2.0)?).abs());
    }
    let proj = ot::sample_projections(6, 50, seed_value)?;
    let mut bound_ok = true;
    for trial in 0..100 {
        let n = 1 + trial % 6;
        let (xs, ys) = (cloud(&mut rng, n, 6), cloud(&mut rng, n, 6));
        let exact = oracle::exact_wasserstein(&xs, &ys, 2.0)?;
        let est = ot::sliced_wasserstein(&uniform(&xs)?, &uniform(&ys)?, 2.0, &proj)?;
        bound_ok &= est.terms.iter().all(|t| *t <= exact + 1e-12);
    }
    Ok((worst < 1e-10 && bound_ok, format!("1D max diff {worst:.2e}; sliced terms bounded: {bound_ok}")))
}

fn metric(seed_value: u64) -> Result<(bool, String)> {
    let mut rng = seed::derived_rng(seed_value, "selftest.metric", 0);
    let proj = ot::sample_projections(6, 100, seed_value)?;
    let mut ok = true;
    for _ in 0..50 {
        let [a, b, c] = [0, 1, 2].map(|_| {
            let n = rng.gen_range(1..8);
            uniform(&cloud(&mut rng, n, 6))
        });
        let (a, b, c) = (a?, b?, c?);
        let sw = |x: &DiscreteMeasure, y: &DiscreteMeasure| ot::sliced_wasserstein(x, y, 2.0, &proj).map(|e| e.value.sqrt());
        ok &= sw(&a, &b)? == sw(&b, &a)?;
        ok &= sw(&a, &c)? <= sw(&a, &b)? + sw(&b, &c)? + 1e-9;
        ok &= sw(&a, &a)? == 0.0;
    }
    Ok((ok, "symmetry, triangle inequality, identity on 50 triples".into()))
}

fn gradient(seed_value: u64) -> Result<(bool, String)> {
    let mut rng = seed::derived_rng(seed_value, "selftest.grad", 0);
    let ico = mesh::icosphere(1);
    let jitter = |m: &TriangleMesh, rng: &mut rand_chacha::ChaCha8Rng| -> Result<TriangleMesh> {
        m.with_vertices(m.vertices().iter().map(|p| p.map(|x| x + 0.05 * rng.gen_range(-1.0..1.0))).collect())
    };
    let target = ot::SwdTarget::new(&jitter(&ico, &mut rng)?, 1.0)?;
    let pred = Tensor::new(vec![ico.n_vertices(), 3], jitter(&ico, &mut rng)?.flat_vertices())?;
    let frozen = ot::face_areas(&pred, ico.faces(), target.frame())?;
    let proj = ot::sample_projections(6, 8, seed_value)?;
    let res = gradcheck::check(
        |t, v| ot::swd_loss(t, v[0], &target, &proj, 2.0, Some(&frozen)),
        std::slice::from_ref(&pred),
        gradcheck::DEFAULT_EPS,
        None,
    )?;
    Ok((res.max_rel_err < 1e-4, format!("swd_loss max rel err {:.2e}", res.max_rel_err)))
}

fn resampling(seed_value: u64) -> Result<(bool, String)> {
    let mut rng = seed::derived_rng(seed_value, "selftest.resample", 0);
    let mut ok = true;
    for _ in 0..10 {
        let fine = mesh::surface_with_vertex_count(rng.gen_range(40..150))?;
        let d = resample::qem_decimate(&fine, fine.n_vertices().div_ceil(4))?;
        for r in 0..d.down.n_rows() {
            ok &= d.down.row(r).collect::<Vec<_>>() == vec![(d.kept[r], 1.0)];
        }
        let up = resample::barycentric_upsample(&fine, &d.coarse)?;
        for r in 0..up.n_rows() {
            let row: Vec<_> = up.row(r).collect();
            ok &= !row.is_empty() && row.len() <= 3 && row.iter().all(|e| e.1 >= 0.0);
            ok &= (row.iter().map(|e| e.1).sum::<f64>() - 1.0).abs() < 1e-9;
        }
    }
    let h = resample::build_hierarchy(&mesh::grid(4, 4), 1, seed_value)?;
    ok &= h.sizes() == [16, 4];
    Ok((ok, "selection rows one-hot, interpolation rows convex, 16 -> 4".into()))
}

/// Runs every check; a check that errors counts as failed.
pub fn run(seed_value: u64) -> Vec<CheckResult> {
    let checks: [(&'static str, fn(u64) -> Result<(bool, String)>); 5] = [
        ("spectral-oracle", spectral),
        ("transport-oracle", transport),
        ("metric-axioms", metric),
        ("swd-gradient", gradient),
        ("resampling", resampling),
    ];
    checks
        .iter()
        .map(|&(name, f)| match f(seed_value) {
            Ok((passed, detail)) => CheckResult { name, passed, detail },
            Err(e) => CheckResult { name, passed: false, detail: e.to_string() },
        })
        .collect()
}

#[cfg(test)]
mod tests {
    #[test]
    fn all_checks_pass() {
        for r in super::run(1) {
            assert!(r.passed, "{r:?}");
        }
    }
}
