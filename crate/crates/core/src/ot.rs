//! Varifold measures and the sliced Wasserstein distance.
//!
//! A mesh becomes a discrete measure in R^6: one atom per non-degenerate
//! face at `(barycenter, γ·unit normal)` with weight proportional to the
//! face area. Sliced Wasserstein projects both measures onto random unit
//! directions and averages the closed-form 1D transport costs.

use std::sync::Arc;

use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::mesh::{self, cross, dot, norm, scale, sub, TriangleMesh, Vec3};
use crate::tensor::Tensor;

pub const DEFAULT_PROJECTIONS: usize = 100;
pub const DEFAULT_P: f64 = 2.0;
pub const DEFAULT_GAMMA: f64 = 1.0;
pub const VARIFOLD_DIM: usize = 6;

const WEIGHT_TOL: f64 = 1e-9;

/// Weighted point set in R^d.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteMeasure {
    dim: usize,
    supports: Vec<f64>,
    weights: Vec<f64>,
}

impl DiscreteMeasure {
    /// `supports` is row-major `n×dim`.
    pub fn new(dim: usize, supports: Vec<f64>, weights: Vec<f64>) -> Result<Self> {
        if dim == 0 || weights.is_empty() || supports.len() != dim * weights.len() {
            return Err(Error::invalid(format!(
                "measure with dim {dim}, {} support values, {} weights",
                supports.len(),
                weights.len()
            )));
        }
        if supports.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("measure supports".into()));
        }
        if weights.iter().any(|&w| !(w >= 0.0) || !w.is_finite()) {
            return Err(Error::invalid("measure weights must be finite and nonnegative"));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > WEIGHT_TOL {
            return Err(Error::invalid(format!("measure weights sum to {total}, not 1")));
        }
        Ok(Self { dim, supports, weights })
    }

    /// Equal weights `1/n`.
    pub fn uniform(dim: usize, supports: Vec<f64>) -> Result<Self> {
        let n = if dim == 0 { 0 } else { supports.len() / dim };
        Self::new(dim, supports, vec![1.0 / n.max(1) as f64; n])
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn supports(&self) -> &[f64] {
        &self.supports
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.supports[i * self.dim..(i + 1) * self.dim]
    }

    /// Dot product of every support with `dir`.
    pub fn project(&self, dir: &[f64]) -> Vec<f64> {
        self.supports.chunks_exact(self.dim).map(|x| dot_n(x, dir)).collect()
    }
}

fn dot_n(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Similarity applied to positions before building a varifold:
/// `x ↦ (x − center) / scale`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Frame {
    pub center: Vec3,
    pub scale: f64,
}

impl Frame {
    pub fn identity() -> Self {
        Self { center: [0.0; 3], scale: 1.0 }
    }

    /// Centroid and mean edge length of `mesh`.
    pub fn of_mesh(mesh: &TriangleMesh) -> Result<Self> {
        let scale = mesh.mean_edge_length();
        if !(scale > 0.0) {
            return Err(Error::Mesh("mesh has zero mean edge length".into()));
        }
        Ok(Self { center: mesh.centroid(), scale })
    }

    pub fn apply(&self, p: Vec3) -> Vec3 {
        scale(sub(p, self.center), 1.0 / self.scale)
    }
}

/// Face data in a frame: areas, barycenters and unit normals.
fn framed_geometry(vertices: &[Vec3], faces: &[[usize; 3]], frame: &Frame) -> mesh::FaceGeometry {
    let moved: Vec<Vec3> = vertices.iter().map(|&p| frame.apply(p)).collect();
    mesh::face_geometry_of(&moved, faces)
}

fn varifold_from_geometry(g: &mesh::FaceGeometry, areas: &[f64], gamma: f64) -> Result<(DiscreteMeasure, Vec<usize>)> {
    let used: Vec<usize> = (0..areas.len())
        .filter(|&f| !g.degenerate[f] && areas[f] >= mesh::DEGENERATE_AREA)
        .collect();
    if used.is_empty() {
        return Err(Error::Mesh("every face is degenerate".into()));
    }
    let total: f64 = used.iter().map(|&f| areas[f]).sum();
    let mut supports = Vec::with_capacity(used.len() * VARIFOLD_DIM);
    for &f in &used {
        supports.extend_from_slice(&g.barycenters[f]);
        supports.extend(g.normals[f].iter().map(|n| gamma * n));
    }
    let weights = used.iter().map(|&f| areas[f] / total).collect();
    Ok((DiscreteMeasure::new(VARIFOLD_DIM, supports, weights)?, used))
}

/// Varifold of `mesh` in its own coordinates.
pub fn mesh_to_varifold(mesh: &TriangleMesh, gamma: f64) -> Result<DiscreteMeasure> {
    mesh_to_varifold_in(mesh, gamma, &Frame::identity())
}

/// Varifold of `mesh` after mapping positions through `frame`.
pub fn mesh_to_varifold_in(mesh: &TriangleMesh, gamma: f64, frame: &Frame) -> Result<DiscreteMeasure> {
    let g = framed_geometry(mesh.vertices(), mesh.faces(), frame);
    let areas = g.areas.clone();
    Ok(varifold_from_geometry(&g, &areas, gamma)?.0)
}

/// Sorted `(value, original index)` pairs; ties keep index order.
fn sorted_with_index(xs: &[f64]) -> Vec<(f64, u32)> {
    // Order-preserving integer image of each value (as in `f64::total_cmp`),
    // with the index in the low bits, so one integer sort does it all.
    let mut keys: Vec<u128> = xs
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let mut bits = x.to_bits() as i64;
            bits ^= (((bits >> 63) as u64) >> 1) as i64;
            let ordered = (bits as u64) ^ (1 << 63);
            ((ordered as u128) << 32) | i as u128
        })
        .collect();
    keys.sort_unstable();
    keys.into_iter()
        .map(|k| {
            let i = (k & 0xffff_ffff) as u32;
            (xs[i as usize], i)
        })
        .collect()
}

#[inline]
fn ground(d: f64, p: f64) -> f64 {
    if p == 2.0 {
        d * d
    } else {
        d.abs().powf(p)
    }
}

#[inline]
fn ground_deriv(d: f64, p: f64) -> f64 {
    if p == 2.0 {
        2.0 * d
    } else if d == 0.0 {
        0.0
    } else {
        p * d.abs().powf(p - 1.0) * d.signum()
    }
}

/// Walks the merged quantile staircases of two sorted measures. When
/// `grad_x` is given, adds `∂cost/∂x_i` for the frozen coupling.
fn merge_quantiles(
    xs: &[(f64, u32)],
    wx: &[f64],
    ys: &[(f64, u32)],
    wy: &[f64],
    p: f64,
    mut grad_x: Option<&mut [f64]>,
) -> f64 {
    let (mut i, mut j) = (0, 0);
    let (mut rx, mut ry) = (wx[xs[0].1 as usize], wy[ys[0].1 as usize]);
    let mut cost = 0.0;
    while i < xs.len() && j < ys.len() {
        let d = xs[i].0 - ys[j].0;
        let mass = rx.min(ry);
        cost += mass * ground(d, p);
        if let Some(g) = grad_x.as_deref_mut() {
            g[xs[i].1 as usize] += mass * ground_deriv(d, p);
        }
        if rx <= ry {
            ry -= rx;
            i += 1;
            if i < xs.len() {
                rx = wx[xs[i].1 as usize];
            }
        } else {
            rx -= ry;
            j += 1;
            if j < ys.len() {
                ry = wy[ys[j].1 as usize];
            }
        }
    }
    cost
}

/// Exact `W_p^p` between two 1D measures.
pub fn wasserstein_1d(mu: &DiscreteMeasure, nu: &DiscreteMeasure, p: f64) -> Result<f64> {
    if mu.dim() != 1 || nu.dim() != 1 {
        return Err(Error::invalid("wasserstein_1d needs one-dimensional measures"));
    }
    check_p(p)?;
    Ok(merge_quantiles(
        &sorted_with_index(mu.supports()),
        mu.weights(),
        &sorted_with_index(nu.supports()),
        nu.weights(),
        p,
        None,
    ))
}

fn check_p(p: f64) -> Result<()> {
    if p >= 1.0 && p.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid(format!("transport exponent must be >= 1, got {p}")))
    }
}

/// `L` unit directions in R^d, row-major `L×d`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionSet {
    dim: usize,
    directions: Vec<f64>,
    seed: u64,
}

impl ProjectionSet {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.directions.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.directions.is_empty()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn direction(&self, l: usize) -> &[f64] {
        &self.directions[l * self.dim..(l + 1) * self.dim]
    }

    pub fn directions(&self) -> impl Iterator<Item = &[f64]> {
        self.directions.chunks_exact(self.dim)
    }
}

/// Normalized standard-normal draws, i.e. uniform on `S^{d−1}`.
pub fn sample_projections(dim: usize, count: usize, seed: u64) -> Result<ProjectionSet> {
    if dim == 0 || count == 0 {
        return Err(Error::invalid("need at least one direction of positive dimension"));
    }
    let mut rng = crate::seed::rng(seed);
    let mut directions = Vec::with_capacity(dim * count);
    while directions.len() < dim * count {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        let n = dot_n(&v, &v).sqrt();
        if n > 1e-12 {
            directions.extend(v.iter().map(|x| x / n));
        }
    }
    Ok(ProjectionSet { dim, directions, seed })
}

/// Monte Carlo estimate of `SW_p^p` with its per-projection terms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SwdEstimate {
    pub value: f64,
    /// Standard error of the mean over projections.
    pub std_error: f64,
    pub terms: Vec<f64>,
}

impl SwdEstimate {
    fn from_terms(terms: Vec<f64>) -> Self {
        let l = terms.len() as f64;
        let value = terms.iter().sum::<f64>() / l;
        let var = if terms.len() > 1 {
            terms.iter().map(|t| (t - value).powi(2)).sum::<f64>() / (l - 1.0)
        } else {
            0.0
        };
        Self {
            value,
            std_error: (var / l).sqrt(),
            terms,
        }
    }
}

fn check_dims(mu: &DiscreteMeasure, nu: &DiscreteMeasure, proj: &ProjectionSet) -> Result<()> {
    if mu.dim() != nu.dim() || mu.dim() != proj.dim() {
        return Err(Error::shape(
            "sliced_wasserstein",
            format!("dimensions {}, {} and projections {}", mu.dim(), nu.dim(), proj.dim()),
        ));
    }
    Ok(())
}

pub fn sliced_wasserstein(mu: &DiscreteMeasure, nu: &DiscreteMeasure, p: f64, proj: &ProjectionSet) -> Result<SwdEstimate> {
    check_dims(mu, nu, proj)?;
    check_p(p)?;
    let terms: Vec<f64> = (0..proj.len())
        .into_par_iter()
        .map(|l| {
            let dir = proj.direction(l);
            let xs = sorted_with_index(&mu.project(dir));
            let ys = sorted_with_index(&nu.project(dir));
            merge_quantiles(&xs, mu.weights(), &ys, nu.weights(), p, None)
        })
        .collect();
    Ok(SwdEstimate::from_terms(terms))
}

/// Target side of the differentiable loss: a fixed mesh turned into a
/// varifold once, plus the frame and topology predictions must share.
#[derive(Debug, Clone)]
pub struct SwdTarget {
    faces: Arc<Vec<[usize; 3]>>,
    n_vertices: usize,
    frame: Frame,
    gamma: f64,
    measure: DiscreteMeasure,
}

impl SwdTarget {
    /// Uses the target's own centroid and mean edge length as the frame.
    pub fn new(mesh: &TriangleMesh, gamma: f64) -> Result<Self> {
        Self::with_frame(mesh, gamma, Frame::of_mesh(mesh)?)
    }

    pub fn with_frame(mesh: &TriangleMesh, gamma: f64, frame: Frame) -> Result<Self> {
        if !(gamma >= 0.0) || !gamma.is_finite() {
            return Err(Error::invalid(format!("normal scale must be nonnegative, got {gamma}")));
        }
        Ok(Self {
            faces: Arc::new(mesh.faces().to_vec()),
            n_vertices: mesh.n_vertices(),
            frame,
            gamma,
            measure: mesh_to_varifold_in(mesh, gamma, &frame)?,
        })
    }

    pub fn measure(&self) -> &DiscreteMeasure {
        &self.measure
    }

    pub fn frame(&self) -> &Frame {
        &self.frame
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn faces(&self) -> &[[usize; 3]] {
        &self.faces
    }
}

/// Raw face areas of a vertex array, for freezing the prediction weights.
pub fn face_areas(vertices: &Tensor, faces: &[[usize; 3]], frame: &Frame) -> Result<Vec<f64>> {
    Ok(framed_geometry(&rows3(vertices)?, faces, frame).areas)
}

fn rows3(t: &Tensor) -> Result<Vec<Vec3>> {
    let (_, c) = t.dims2()?;
    if c != 3 {
        return Err(Error::shape("vertices", format!("expected N×3, got {:?}", t.shape())));
    }
    Ok(t.data().chunks_exact(3).map(|r| [r[0], r[1], r[2]]).collect())
}

/// Differentiable `SW_p^p` between the varifold of predicted vertices
/// `pred` (`[N, 3]`) and `target`.
///
/// Face weights are treated as constants. They come from the prediction's
/// own areas unless `frozen_areas` (one raw area per face) is given, which
/// makes the forward value a smooth function of `pred` for gradient checks.
pub fn swd_loss(
    tape: &mut Tape,
    pred: Var,
    target: &SwdTarget,
    proj: &ProjectionSet,
    p: f64,
    frozen_areas: Option<&[f64]>,
) -> Result<Var> {
    check_p(p)?;
    let verts = rows3(tape.value(pred))?;
    if verts.len() != target.n_vertices {
        return Err(Error::Topology {
            expected: target.n_vertices,
            got: verts.len(),
        });
    }
    if proj.dim() != VARIFOLD_DIM {
        return Err(Error::shape("swd_loss", format!("projections are {}-dimensional", proj.dim())));
    }
    let faces = target.faces.clone();
    let frame = target.frame;
    let gamma = target.gamma;
    let geom = framed_geometry(&verts, &faces, &frame);
    let areas = match frozen_areas {
        Some(a) if a.len() == faces.len() => a.to_vec(),
        Some(a) => {
            return Err(Error::shape("swd_loss", format!("{} frozen areas for {} faces", a.len(), faces.len())));
        }
        None => geom.areas.clone(),
    };
    let (measure, used) = varifold_from_geometry(&geom, &areas, gamma)?;
    let tgt = &target.measure;
    let l_count = proj.len();

    // Per projection: the term and ∂term/∂(projected support).
    let per: Vec<(f64, Vec<f64>)> = (0..l_count)
        .into_par_iter()
        .map(|l| {
            let dir = proj.direction(l);
            let xs = sorted_with_index(&measure.project(dir));
            let ys = sorted_with_index(&tgt.project(dir));
            let mut g = vec![0.0; measure.len()];
            let c = merge_quantiles(&xs, measure.weights(), &ys, tgt.weights(), p, Some(&mut g));
            (c, g)
        })
        .collect();
    let value = per.iter().map(|t| t.0).sum::<f64>() / l_count as f64;

    // ∂loss/∂support = (1/L) Σ_l g_l ⊗ θ_l, summed in projection order.
    let mut g_support = vec![0.0; measure.len() * VARIFOLD_DIM];
    for (l, (_, g)) in per.iter().enumerate() {
        let dir = proj.direction(l);
        for (i, &gi) in g.iter().enumerate() {
            if gi != 0.0 {
                for k in 0..VARIFOLD_DIM {
                    g_support[i * VARIFOLD_DIM + k] += gi * dir[k];
                }
            }
        }
    }
    let inv_l = 1.0 / l_count as f64;
    let n_vertices = verts.len();
    let backward = Box::new(move |g_out: &Tensor| -> Result<Vec<Tensor>> {
        let s = g_out.item()? * inv_l;
        let mut gv = vec![0.0; n_vertices * 3];
        for (row, &f) in used.iter().enumerate() {
            let gs = &g_support[row * VARIFOLD_DIM..(row + 1) * VARIFOLD_DIM];
            let [a, b, c] = faces[f];
            // Barycenter: ((a + b + c)/3 − center)/scale.
            let gb = 1.0 / (3.0 * frame.scale);
            for v in [a, b, c] {
                for k in 0..3 {
                    gv[v * 3 + k] += s * gb * gs[k];
                }
            }
            // Unit normal of (b − a) × (c − a); frame scaling cancels.
            let (pa, pb, pc) = (verts[a], verts[b], verts[c]);
            let (e1, e2) = (sub(pb, pa), sub(pc, pa));
            let cr = cross(e1, e2);
            let len = norm(cr);
            if len == 0.0 {
                continue;
            }
            let n = scale(cr, 1.0 / len);
            let gn = [gs[3] * gamma, gs[4] * gamma, gs[5] * gamma];
            let proj_n = dot(n, gn);
            let u = scale(sub(gn, scale(n, proj_n)), 1.0 / len);
            let gbv = cross(e2, u);
            let gcv = cross(u, e1);
            for k in 0..3 {
                gv[b * 3 + k] += s * gbv[k];
                gv[c * 3 + k] += s * gcv[k];
                gv[a * 3 + k] -= s * (gbv[k] + gcv[k]);
            }
        }
        Ok(vec![Tensor::new(vec![n_vertices, 3], gv)?])
    });
    tape.custom("swd_loss", &[pred], Tensor::scalar(value), backward)
}
