//! PCA motion basis, AdamW, the synthetic talking-sphere dataset and the
//! training loop.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::mesh::{self, MaskLabel, TriangleMesh, VertexMask};
use crate::model::{self, LossBreakdown, LossWeights, Model, ModelConfig, PreparedSample, SequenceSample};
use crate::ot::{self, ProjectionSet};
use crate::resample::Hierarchy;
use crate::seed;
use crate::tensor::Tensor;

pub const DEFAULT_COMPONENTS: usize = 50;
pub const PCA_SWEEPS: usize = 20;
const ORTHONORMAL_TOL: f64 = 1e-6;

/// Mean and orthonormal principal directions of displacement vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct PcaBasis {
    mean: Tensor,
    components: Tensor,
    variances: Vec<f64>,
}

impl PcaBasis {
    /// `mean` is `[D]`, `components` is `[k, D]` with orthonormal rows.
    pub fn new(mean: Tensor, components: Tensor, variances: Vec<f64>) -> Result<Self> {
        let (k, d) = components.dims2()?;
        if mean.len() != d || variances.len() != k {
            return Err(Error::shape(
                "pca",
                format!("mean {:?}, components {:?}, {} variances", mean.shape(), components.shape(), variances.len()),
            ));
        }
        mean.check_finite("pca mean")?;
        components.check_finite("pca components")?;
        let rows: Vec<&[f64]> = components.data().chunks_exact(d).collect();
        for i in 0..k {
            for j in i..k {
                let want = if i == j { 1.0 } else { 0.0 };
                if (linalg::dot(rows[i], rows[j]) - want).abs() > ORTHONORMAL_TOL {
                    return Err(Error::invalid(format!("pca rows {i} and {j} are not orthonormal")));
                }
            }
        }
        let mean = mean.reshape(&[d])?;
        Ok(Self { mean, components, variances })
    }

    /// Zero mean, `k` standard basis rows; useful for tests.
    pub fn axes(d: usize, k: usize) -> Result<Self> {
        let mut c = vec![0.0; k * d];
        for i in 0..k.min(d) {
            c[i * d + i] = 1.0;
        }
        Self::new(Tensor::zeros(&[d]), Tensor::new(vec![k, d], c)?, vec![1.0; k])
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn n_components(&self) -> usize {
        self.variances.len()
    }

    pub fn mean(&self) -> &Tensor {
        &self.mean
    }

    pub fn components(&self) -> &Tensor {
        &self.components
    }

    pub fn variances(&self) -> &[f64] {
        &self.variances
    }

    /// Coefficients of `x − mean` on each component.
    pub fn project(&self, x: &[f64]) -> Vec<f64> {
        let d = self.dim();
        let centered: Vec<f64> = x.iter().zip(self.mean.data()).map(|(a, b)| a - b).collect();
        self.components
            .data()
            .chunks_exact(d)
            .map(|row| linalg::dot(row, &centered))
            .collect()
    }

    pub fn reconstruct(&self, coeffs: &[f64]) -> Vec<f64> {
        let d = self.dim();
        let mut out = self.mean.data().to_vec();
        for (row, &c) in self.components.data().chunks_exact(d).zip(coeffs) {
            for (o, r) in out.iter_mut().zip(row) {
                *o += c * r;
            }
        }
        out
    }
}

fn orthonormalize(cols: &mut [Vec<f64>], rng: &mut impl Rng) {
    for i in 0..cols.len() {
        for attempt in 0..3 {
            for j in 0..i {
                let (head, tail) = cols.split_at_mut(i);
                let c = linalg::dot(&head[j], &tail[0]);
                for (x, y) in tail[0].iter_mut().zip(&head[j]) {
                    *x -= c * y;
                }
            }
            let n = linalg::dot(&cols[i], &cols[i]).sqrt();
            if n > 1e-10 {
                cols[i].iter_mut().for_each(|x| *x /= n);
                break;
            }
            // Rank-deficient direction: restart from noise.
            cols[i] = (0..cols[i].len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
            if attempt == 2 {
                cols[i].iter_mut().for_each(|x| *x = 0.0);
            }
        }
    }
}

/// Top-`k` eigenpairs of the symmetric `n×n` matrix `a` by orthogonal
/// subspace iteration and a final Rayleigh–Ritz step.
fn subspace_eigen(a: &[f64], n: usize, k: usize, sweeps: usize, rng: &mut impl Rng) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    let mut cols: Vec<Vec<f64>> = (0..k)
        .map(|_| (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
        .collect();
    orthonormalize(&mut cols, rng);
    let apply = |v: &[f64]| -> Vec<f64> { a.chunks_exact(n).map(|row| linalg::dot(row, v)).collect() };
    for _ in 0..sweeps {
        let mut next: Vec<Vec<f64>> = cols.iter().map(|c| apply(c)).collect();
        orthonormalize(&mut next, rng);
        cols = next;
    }
    let av: Vec<Vec<f64>> = cols.iter().map(|c| apply(c)).collect();
    let mut h = vec![0.0; k * k];
    for i in 0..k {
        for j in 0..k {
            h[i * k + j] = 0.5 * (linalg::dot(&cols[i], &av[j]) + linalg::dot(&cols[j], &av[i]));
        }
    }
    let (vals, vecs) = linalg::jacobi_eigen(&Tensor::new(vec![k, k], h)?)?;
    let mut pairs = Vec::with_capacity(k);
    for idx in (0..k).rev() {
        let mut v = vec![0.0; n];
        for (j, col) in cols.iter().enumerate() {
            let w = vecs.get2(j, idx);
            for (o, c) in v.iter_mut().zip(col) {
                *o += w * c;
            }
        }
        pairs.push((vals[idx], v));
    }
    Ok(pairs.into_iter().unzip())
}

/// Principal components of the rows of `data` (`[S, D]`).
///
/// Returns at most `k` components; fewer when the centered data has lower
/// rank. Each component's largest-magnitude entry is positive.
pub fn pca_fit(data: &Tensor, k: usize, seed_value: u64) -> Result<PcaBasis> {
    let (s, d) = data.dims2()?;
    if s < 2 {
        return Err(Error::invalid(format!("pca needs at least two samples, got {s}")));
    }
    if k == 0 {
        return Err(Error::invalid("pca needs at least one component"));
    }
    data.check_finite("pca data")?;
    let mut mean = vec![0.0; d];
    for row in data.data().chunks_exact(d) {
        for (m, x) in mean.iter_mut().zip(row) {
            *m += x / s as f64;
        }
    }
    let centered: Vec<f64> = data
        .data()
        .chunks_exact(d)
        .flat_map(|row| row.iter().zip(&mean).map(|(x, m)| x - m).collect::<Vec<_>>())
        .collect();
    let rows: Vec<&[f64]> = centered.chunks_exact(d).collect();
    let mut rng = seed::derived_rng(seed_value, "pca", 0);
    let gram_side = s < d;
    let n = if gram_side { s } else { d };
    let k_eff = k.min(n);
    let mut m = vec![0.0; n * n];
    if gram_side {
        for i in 0..s {
            for j in i..s {
                let v = linalg::dot(rows[i], rows[j]);
                m[i * s + j] = v;
                m[j * s + i] = v;
            }
        }
    } else {
        for row in &rows {
            for i in 0..d {
                if row[i] == 0.0 {
                    continue;
                }
                for j in 0..d {
                    m[i * d + j] += row[i] * row[j];
                }
            }
        }
    }
    let (vals, vecs) = subspace_eigen(&m, n, k_eff, PCA_SWEEPS, &mut rng)?;
    let top = vals.first().copied().unwrap_or(0.0).max(0.0);
    let mut comps: Vec<Vec<f64>> = Vec::new();
    let mut variances = Vec::new();
    for (lam, v) in vals.into_iter().zip(vecs) {
        if !(lam > 1e-10 * top) || top == 0.0 {
            continue;
        }
        let mut c = if gram_side {
            // Component = Xᵀu / ‖Xᵀu‖.
            let mut c = vec![0.0; d];
            for (row, &w) in rows.iter().zip(&v) {
                for (o, x) in c.iter_mut().zip(*row) {
                    *o += w * x;
                }
            }
            let norm = linalg::dot(&c, &c).sqrt();
            c.iter_mut().for_each(|x| *x /= norm);
            c
        } else {
            v
        };
        let big = c.iter().copied().fold(0.0f64, |acc, x| if x.abs() > acc.abs() { x } else { acc });
        if big < 0.0 {
            c.iter_mut().for_each(|x| *x = -*x);
        }
        comps.push(c);
        variances.push(lam / (s - 1) as f64);
    }
    if comps.len() < k {
        log::warn!("pca: requested {k} components, data supports {}", comps.len());
    }
    if comps.is_empty() {
        return Err(Error::invalid("pca: data has zero variance"));
    }
    let k_out = comps.len();
    PcaBasis::new(Tensor::new(vec![d], mean)?, Tensor::new(vec![k_out, d], comps.concat())?, variances)
}

/// Optimizer hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamWConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { learning_rate: 1e-4, weight_decay: 0.01, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First and second moment estimates.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &[Tensor]) -> Self {
        let zeros: Vec<Tensor> = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self { m: zeros.clone(), v: zeros, step: 0 }
    }
}

/// One AdamW update: decoupled decay `p ← p − lr·wd·p`, then the
/// bias-corrected Adam step.
pub fn adamw_step(params: &mut [Tensor], grads: &[Tensor], state: &mut AdamState, cfg: &AdamWConfig) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::shape("adamw", format!("{} params, {} grads", params.len(), grads.len())));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || p.shape() != state.m[i].shape() {
            return Err(Error::shape("adamw", format!("param {i}: {:?} vs grad {:?}", p.shape(), g.shape())));
        }
        g.check_finite("gradient")?;
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let decay = 1.0 - cfg.learning_rate * cfg.weight_decay;
    for ((p, g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        for (((x, &gi), mi), vi) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *x *= decay;
            *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gi;
            *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * gi * gi;
            let mhat = *mi / bc1;
            let vhat = *vi / bc2;
            *x -= cfg.learning_rate * mhat / (vhat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

/// Scales `grads` so their global norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_grad_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.data())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|x| *x *= s);
        }
    }
    norm
}

/// Synthetic data generator settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub seed: u64,
    pub sequences: usize,
    pub frames: usize,
    pub fps: f64,
    pub feature_dim: usize,
    pub subdivisions: usize,
    /// Peak jaw displacement, in sphere radii.
    pub jaw_amplitude: f64,
    pub noise: f64,
}

impl SynthConfig {
    pub fn new(seed: u64, sequences: usize, frames: usize) -> Self {
        Self {
            seed,
            sequences,
            frames,
            fps: 30.0,
            feature_dim: 8,
            subdivisions: 3,
            jaw_amplitude: 0.12,
            noise: 0.002,
        }
    }
}

/// A generated sequence together with its ground-truth envelope.
#[derive(Debug, Clone)]
pub struct SynthSequence {
    pub sample: SequenceSample,
    pub envelope: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct SynthDataset {
    pub config: SynthConfig,
    pub template: Arc<TriangleMesh>,
    pub lip: VertexMask,
    pub face: VertexMask,
    pub head: VertexMask,
    pub sequences: Vec<SynthSequence>,
    /// Per-vertex weight of the jaw field (1 at the chin, 0 off the lip cap).
    pub jaw_profile: Vec<f64>,
}

impl SynthDataset {
    pub fn samples(&self) -> Vec<SequenceSample> {
        self.sequences.iter().map(|s| s.sample.clone()).collect()
    }

    pub fn masks(&self) -> [&VertexMask; 3] {
        [&self.lip, &self.face, &self.head]
    }
}

/// Indices of the `fraction` of vertices with the lowest `z` (ties by index).
fn lowest_z(m: &TriangleMesh, fraction: f64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..m.n_vertices()).collect();
    idx.sort_by(|&a, &b| m.vertices()[a][2].total_cmp(&m.vertices()[b][2]).then(a.cmp(&b)));
    let count = ((m.n_vertices() as f64 * fraction).round() as usize).clamp(1, m.n_vertices());
    let mut out = idx[..count].to_vec();
    out.sort_unstable();
    out
}

fn smoothstep(x: f64) -> f64 {
    let u = x.clamp(0.0, 1.0);
    u * u * (3.0 - 2.0 * u)
}

/// Procedural talking sphere: an icosphere whose lower cap opens and closes
/// with an envelope that is also encoded in the features.
pub fn synth_dataset(cfg: &SynthConfig) -> Result<SynthDataset> {
    if cfg.sequences == 0 || cfg.frames == 0 {
        return Err(Error::invalid("synthetic dataset needs sequences and frames"));
    }
    if cfg.feature_dim == 0 || !(cfg.fps > 0.0) {
        return Err(Error::invalid("feature_dim and fps must be positive"));
    }
    let template = Arc::new(mesh::icosphere(cfg.subdivisions));
    let n = template.n_vertices();
    let lip_idx = lowest_z(&template, 0.10);
    let face_idx = lowest_z(&template, 0.40);
    let lip = VertexMask::new(MaskLabel::Lip, lip_idx.clone(), n)?;
    let face = VertexMask::new(MaskLabel::Face, face_idx.clone(), n)?;
    let head = VertexMask::new(MaskLabel::Head, (0..n).collect(), n)?;

    // Angle from the south pole; the bump is centered on the lip cap and
    // fades out at the edge of the face region.
    let angle = |p: &[f64; 3]| (-p[2] / mesh::norm(*p)).clamp(-1.0, 1.0).acos();
    let cap = face_idx
        .iter()
        .map(|&v| angle(&template.vertices()[v]))
        .fold(0.0f64, f64::max);
    let jaw_profile: Vec<f64> = template
        .vertices()
        .iter()
        .map(|p| {
            let a = angle(p) / cap;
            if a < 1.0 {
                0.5 * (1.0 + (PI * a).cos())
            } else {
                0.0
            }
        })
        .collect();

    let sequences = (0..cfg.sequences)
        .map(|i| synth_sequence(cfg, &template, &jaw_profile, i as u64))
        .collect::<Result<_>>()?;
    Ok(SynthDataset {
        config: cfg.clone(),
        template,
        lip,
        face,
        head,
        sequences,
        jaw_profile,
    })
}

fn synth_sequence(cfg: &SynthConfig, template: &Arc<TriangleMesh>, jaw: &[f64], index: u64) -> Result<SynthSequence> {
    let mut rng = seed::derived_rng(cfg.seed, "synth.sequence", index);
    let t_count = cfg.frames;
    let time = |t: usize| t as f64 / cfg.fps;

    // Envelope: thresholded two-tone mixture, so it spends time at 0 and 1.
    let (f1, f2) = (rng.gen_range(1.5..4.0), rng.gen_range(4.0..7.0));
    let (p1, p2) = (rng.gen_range(0.0..2.0 * PI), rng.gen_range(0.0..2.0 * PI));
    let bias = rng.gen_range(-0.2..0.2);
    let envelope: Vec<f64> = (0..t_count)
        .map(|t| {
            let s = (2.0 * PI * f1 * time(t) + p1).sin() + 0.5 * (2.0 * PI * f2 * time(t) + p2).sin();
            smoothstep(0.5 + 0.6 * s + bias)
        })
        .collect();

    let f = cfg.feature_dim;
    let carriers: Vec<(f64, f64, f64, f64)> = (0..f)
        .map(|c| {
            let band = 2.0 + 2.0 * c as f64;
            (
                rng.gen_range(band..band + 2.0),
                rng.gen_range(0.0..2.0 * PI),
                rng.gen_range(band + 1.0..band + 3.0),
                rng.gen_range(0.0..2.0 * PI),
            )
        })
        .collect();
    let mut features = Vec::with_capacity(t_count * f);
    for (t, &e) in envelope.iter().enumerate() {
        for (c, &(fa, pa, fb, pb)) in carriers.iter().enumerate() {
            let value = if c == 0 {
                let noise: f64 = StandardNormal.sample(&mut rng);
                e + 0.02 * noise
            } else {
                let tt = time(t);
                e * (0.7 * (2.0 * PI * fa * tt + pa).sin() + 0.3 * (2.0 * PI * fb * tt + pb).sin())
            };
            features.push(value);
        }
    }

    // Smooth low-amplitude noise field per axis.
    let waves: Vec<([f64; 3], f64, f64)> = (0..3)
        .map(|_| {
            (
                [rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)],
                rng.gen_range(0.05..0.2),
                rng.gen_range(0.0..2.0 * PI),
            )
        })
        .collect();
    let n = template.n_vertices();
    let mut targets = Vec::with_capacity(t_count * n * 3);
    for (t, &e) in envelope.iter().enumerate() {
        for (v, p) in template.vertices().iter().enumerate() {
            for (axis, &(k, w, phase)) in waves.iter().enumerate() {
                let jaw_term = if axis == 2 { -cfg.jaw_amplitude * e * jaw[v] } else { 0.0 };
                let noise = cfg.noise * (mesh::dot(k, *p) + 2.0 * PI * w * time(t) + phase).sin();
                targets.push(p[axis] + jaw_term + noise);
            }
        }
    }
    let sample = SequenceSample::new(
        template.clone(),
        Tensor::new(vec![t_count, f], features)?,
        Tensor::new(vec![t_count, n * 3], targets)?,
        cfg.fps,
    )?;
    Ok(SynthSequence { sample, envelope })
}

/// Training hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub optimizer: AdamWConfig,
    pub epochs: usize,
    /// Stops after this many optimizer steps, possibly mid-epoch.
    pub max_steps: Option<usize>,
    pub seed: u64,
    pub gamma: f64,
    pub projections: usize,
    pub loss: LossWeights,
    pub validation_fraction: f64,
    pub clip_norm: f64,
    pub chunk_frames: usize,
    pub components: usize,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            optimizer: AdamWConfig::default(),
            epochs: 100,
            max_steps: None,
            seed: 0,
            gamma: ot::DEFAULT_GAMMA,
            projections: ot::DEFAULT_PROJECTIONS,
            loss: LossWeights::default(),
            validation_fraction: 0.25,
            clip_norm: 10.0,
            chunk_frames: 16,
            components: DEFAULT_COMPONENTS,
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let o = &self.optimizer;
        if self.batch_size == 0 || self.chunk_frames == 0 || self.projections == 0 || self.components == 0 {
            return Err(Error::invalid("batch size, chunk length, projections and components must be positive"));
        }
        if !(o.learning_rate >= 0.0) || !(o.weight_decay >= 0.0) || !(o.eps > 0.0) {
            return Err(Error::invalid("learning rate and weight decay must be nonnegative, eps positive"));
        }
        if !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) {
            return Err(Error::invalid("Adam betas must lie in [0, 1)"));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(Error::invalid("validation fraction must lie in [0, 1)"));
        }
        if !(self.clip_norm > 0.0) || !(self.gamma >= 0.0) {
            return Err(Error::invalid("clip norm must be positive and gamma nonnegative"));
        }
        self.model.validate()
    }
}

/// Deterministic train/validation split of `n` sequence indices.
pub fn split_indices(n: usize, fraction: f64, seed_value: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut seed::derived_rng(seed_value, "split", 0));
    let n_val = if n < 2 || fraction <= 0.0 {
        0
    } else {
        ((n as f64 * fraction).round() as usize).clamp(1, n - 1)
    };
    let mut val = idx[..n_val].to_vec();
    let mut train = idx[n_val..].to_vec();
    val.sort_unstable();
    train.sort_unstable();
    (train, val)
}

/// Splits every sequence into consecutive windows of at most `len` frames.
pub fn chunk_samples(samples: &[SequenceSample], len: usize) -> Result<Vec<SequenceSample>> {
    let mut out = Vec::new();
    for s in samples {
        let t = s.frames();
        let mut start = 0;
        while start < t {
            let end = (start + len).min(t);
            out.push(s.chunk(start, end)?);
            start = end;
        }
    }
    Ok(out)
}

/// Displacements `target − template` of every frame, as rows.
pub fn displacement_rows(samples: &[SequenceSample]) -> Result<Tensor> {
    let first = samples.first().ok_or_else(|| Error::invalid("no samples"))?;
    let d = first.template.n_vertices() * 3;
    let mut rows = Vec::new();
    let mut count = 0;
    for s in samples {
        let base = s.template.flat_vertices();
        if base.len() != d {
            return Err(Error::Topology { expected: d / 3, got: base.len() / 3 });
        }
        for row in s.targets.data().chunks_exact(d) {
            rows.extend(row.iter().zip(&base).map(|(a, b)| a - b));
            count += 1;
        }
    }
    Tensor::new(vec![count, d], rows)
}

/// One line of `history.csv`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub train_rec: f64,
    pub train_vel: f64,
    pub train_swd: f64,
    pub train_reg: f64,
}

pub const HISTORY_HEADER: &str = "epoch,train_loss,val_loss,train_rec,train_vel,train_swd,train_reg";

pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut s = String::from(HISTORY_HEADER);
    s.push('\n');
    for r in history {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{}",
            r.epoch, r.train_loss, r.val_loss, r.train_rec, r.train_vel, r.train_swd, r.train_reg
        );
    }
    s
}

pub fn write_history(path: &Path, history: &[EpochRecord]) -> Result<()> {
    std::fs::write(path, history_csv(history))?;
    Ok(())
}

/// Everything a finished run produces.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters with the lowest validation loss.
    pub best: Model,
    pub best_epoch: usize,
    pub last: Model,
    pub initial: Model,
    pub history: Vec<EpochRecord>,
    /// Mean batch loss of every optimizer step, before its update.
    pub step_losses: Vec<f64>,
    pub train_indices: Vec<usize>,
    pub val_indices: Vec<usize>,
}

/// Mean loss over items under one projection set, evaluated in order.
pub fn mean_loss(model: &Model, items: &[PreparedSample], weights: &LossWeights, proj: &ProjectionSet) -> Result<LossBreakdown> {
    let parts: Vec<LossBreakdown> = items
        .par_iter()
        .map(|item| model::sample_loss(model, item, weights, proj))
        .collect::<Result<_>>()?;
    let mut acc = LossBreakdown::default();
    for p in &parts {
        acc.add_scaled(p, 1.0 / parts.len().max(1) as f64);
    }
    Ok(acc)
}

/// Projection set used for every validation evaluation of a run.
pub fn validation_projections(cfg: &TrainConfig) -> Result<ProjectionSet> {
    ot::sample_projections(ot::VARIFOLD_DIM, cfg.projections, seed::derive(cfg.seed, "val.projections", 0))
}

/// Minibatch AdamW on `samples`, keeping the parameters with the lowest
/// validation loss.
pub fn train(cfg: &TrainConfig, samples: &[SequenceSample], hierarchy: Arc<Hierarchy>) -> Result<TrainOutcome> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::invalid("no training samples"));
    }
    let (train_idx, mut val_idx) = split_indices(samples.len(), cfg.validation_fraction, cfg.seed);
    if val_idx.is_empty() {
        log::warn!("no validation split; validating on the training data");
        val_idx = train_idx.clone();
    }
    let pick = |idx: &[usize]| idx.iter().map(|&i| samples[i].clone()).collect::<Vec<_>>();
    let prepare = |s: Vec<SequenceSample>| -> Result<Vec<PreparedSample>> {
        chunk_samples(&s, cfg.chunk_frames)?
            .into_par_iter()
            .map(|c| PreparedSample::new(c, cfg.gamma))
            .collect()
    };
    let train_items = prepare(pick(&train_idx))?;
    let val_items = prepare(pick(&val_idx))?;

    let disp = displacement_rows(&pick(&train_idx))?;
    let pca = Arc::new(pca_fit(&disp, cfg.components, seed::derive(cfg.seed, "pca", 0))?);
    let mut model = Model::init(cfg.model.clone(), hierarchy, pca, seed::derive(cfg.seed, "init", 0))?;
    let initial = model.clone();
    let mut state = AdamState::new(model.params.tensors());
    let val_proj = validation_projections(cfg)?;

    let mut history = Vec::with_capacity(cfg.epochs);
    let mut step_losses = Vec::new();
    let mut best: Option<(f64, usize, Model)> = None;
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train_items.len()).collect();
        order.shuffle(&mut seed::derived_rng(cfg.seed, "shuffle", epoch as u64));
        let mut epoch_loss = LossBreakdown::default();
        let mut batches: Vec<&[usize]> = order.chunks(cfg.batch_size).collect();
        if let Some(max) = cfg.max_steps {
            batches.truncate(max.saturating_sub(step));
        }
        if batches.is_empty() {
            break;
        }
        for batch in &batches {
            let proj = ot::sample_projections(ot::VARIFOLD_DIM, cfg.projections, seed::derive(cfg.seed, "projections", step as u64))?;
            let results: Vec<(LossBreakdown, Vec<Tensor>)> = batch
                .par_iter()
                .map(|&i| model::sample_loss_and_grads(&model, &train_items[i], &cfg.loss, &proj))
                .collect::<Result<_>>()
                .map_err(|e| Error::Training { step, source: Box::new(e) })?;
            let scale = 1.0 / batch.len() as f64;
            let mut loss = LossBreakdown::default();
            let mut grads: Vec<Tensor> = model.params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
            for (l, g) in &results {
                loss.add_scaled(l, scale);
                for (acc, gi) in grads.iter_mut().zip(g) {
                    for (a, b) in acc.data_mut().iter_mut().zip(gi.data()) {
                        *a += scale * b;
                    }
                }
            }
            clip_grad_norm(&mut grads, cfg.clip_norm);
            adamw_step(model.params.tensors_mut(), &grads, &mut state, &cfg.optimizer)
                .map_err(|e| Error::Training { step, source: Box::new(e) })?;
            step_losses.push(loss.total);
            epoch_loss.add_scaled(&loss, 1.0 / batches.len() as f64);
            step += 1;
        }
        let val = mean_loss(&model, &val_items, &cfg.loss, &val_proj)
            .map_err(|e| Error::Training { step, source: Box::new(e) })?;
        log::info!("epoch {epoch}: train {:.6} val {:.6}", epoch_loss.total, val.total);
        history.push(EpochRecord {
            epoch,
            train_loss: epoch_loss.total,
            val_loss: val.total,
            train_rec: epoch_loss.rec,
            train_vel: epoch_loss.vel,
            train_swd: epoch_loss.swd,
            train_reg: epoch_loss.reg,
        });
        if best.as_ref().map_or(true, |b| val.total < b.0) {
            best = Some((val.total, epoch, model.clone()));
        }
    }
    let (best_model, best_epoch) = match best {
        Some((_, e, m)) => (m, e),
        None => (model.clone(), 0),
    };
    Ok(TrainOutcome {
        best: best_model,
        best_epoch,
        last: model,
        initial,
        history,
        step_losses,
        train_indices: train_idx,
        val_indices: val_idx,
    })
}
