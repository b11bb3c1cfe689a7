//! Encoder–decoder from a template mesh and a feature sequence to a mesh
//! sequence, plus the composite training loss.
//!
//! * Mesh encoder: `levels` × (Chebyshev conv → relu → `Q_d` pool), flatten,
//!   fully connected to the latent `z_m`.
//! * Audio encoder: temporal convolutions (same padding) over the feature
//!   timeline, then linear interpolation to `T` frames.
//! * Motion decoder: per frame, a linear map from `[z_m ‖ code_t]` to PCA
//!   coefficients, plus a refinement branch that mirrors the encoder with
//!   `Q_u` unpooling.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::mesh::TriangleMesh;
use crate::ot::{self, ProjectionSet, SwdTarget};
use crate::ottk;
use crate::resample::{self, Hierarchy};
use crate::spectral::{self, ChebConvLayer};
use crate::tensor::{SparseMatrix, Tensor};
use crate::train::PcaBasis;

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub feature_dim: usize,
    pub latent_dim: usize,
    pub audio_dim: usize,
    pub audio_layers: usize,
    pub kernel: usize,
    pub cheb_order: usize,
    pub mesh_channels: usize,
    pub levels: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            feature_dim: 8,
            latent_dim: 64,
            audio_dim: 64,
            audio_layers: 3,
            kernel: 5,
            cheb_order: spectral::DEFAULT_ORDER,
            mesh_channels: 16,
            levels: 3,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            self.feature_dim,
            self.latent_dim,
            self.audio_dim,
            self.audio_layers,
            self.cheb_order,
            self.mesh_channels,
            self.levels,
        ];
        if fields.contains(&0) {
            return Err(Error::invalid("model dimensions must be positive"));
        }
        if self.kernel % 2 == 0 {
            return Err(Error::invalid(format!("kernel width {} must be odd", self.kernel)));
        }
        Ok(())
    }

    fn enc_layer(&self, level: usize) -> ChebConvLayer {
        let f_in = if level == 0 { 3 } else { self.mesh_channels };
        ChebConvLayer { order: self.cheb_order, f_in, f_out: self.mesh_channels }
    }

    fn refine_layer(&self, level: usize) -> ChebConvLayer {
        let f_out = if level == 0 { 3 } else { self.mesh_channels };
        ChebConvLayer { order: self.cheb_order, f_in: self.mesh_channels, f_out }
    }

    fn audio_in(&self, layer: usize) -> usize {
        if layer == 0 {
            self.feature_dim
        } else {
            self.audio_dim
        }
    }

    fn joint_dim(&self) -> usize {
        self.latent_dim + self.audio_dim
    }
}

/// Trainable arrays, in a fixed order that also fixes the gradient layout.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: BTreeMap<String, usize>,
}

impl ModelParams {
    pub fn from_named(entries: Vec<(String, Tensor)>) -> Result<Self> {
        let mut index = BTreeMap::new();
        for (i, (name, t)) in entries.iter().enumerate() {
            t.check_finite(name)?;
            if index.insert(name.clone(), i).is_some() {
                return Err(Error::invalid(format!("duplicate parameter {name}")));
            }
        }
        let (names, tensors) = entries.into_iter().unzip();
        Ok(Self { names, tensors, index })
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index.get(name).map(|&i| &mut self.tensors[i])
    }

    pub fn n_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Euclidean norm of all parameters concatenated.
    pub fn norm(&self) -> f64 {
        self.tensors
            .iter()
            .flat_map(|t| t.data())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }

    /// Records every parameter as a tracked leaf.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        Bound {
            vars: self.tensors.iter().map(|t| tape.leaf(t.clone())).collect(),
            index: self.index.clone(),
        }
    }

    /// Binds already-recorded vars, one per parameter in order.
    pub fn attach(&self, vars: &[Var]) -> Result<Bound> {
        if vars.len() != self.tensors.len() {
            return Err(Error::invalid(format!("{} vars for {} parameters", vars.len(), self.tensors.len())));
        }
        Ok(Bound { vars: vars.to_vec(), index: self.index.clone() })
    }

    /// Records every parameter as an untracked constant.
    pub fn bind_constants(&self, tape: &mut Tape) -> Bound {
        Bound {
            vars: self.tensors.iter().map(|t| tape.constant(t.clone())).collect(),
            index: self.index.clone(),
        }
    }

    /// Gradients in parameter order; missing entries are zero.
    pub fn collect_grads(&self, bound: &Bound, grads: &Gradients) -> Vec<Tensor> {
        bound
            .vars
            .iter()
            .zip(&self.tensors)
            .map(|(&v, t)| grads.get_or_zeros(v, t.shape()))
            .collect()
    }

    /// Fresh parameters for `config` on a hierarchy with `sizes` vertices
    /// per level and a motion basis of `components` rows. Every stream is
    /// derived from `seed` by parameter name.
    pub fn init(config: &ModelConfig, sizes: &[usize], components: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        if sizes.len() != config.levels + 1 {
            return Err(Error::invalid(format!(
                "{} hierarchy levels for a model with {} poolings",
                sizes.len(),
                config.levels
            )));
        }
        let coarsest = sizes[config.levels] * config.mesh_channels;
        let mut entries: Vec<(String, Tensor)> = Vec::new();
        let rng_for = |name: &str| crate::seed::derived_rng(seed, name, 0);

        for l in 0..config.levels {
            let layer = config.enc_layer(l);
            let (theta, bias) = layer.init(&mut rng_for(&format!("cheb{l}.theta")));
            entries.push((format!("cheb{l}.theta"), theta));
            entries.push((format!("cheb{l}.bias"), bias));
        }
        entries.push(("enc.fc.weight".into(), glorot(&mut rng_for("enc.fc.weight"), coarsest, config.latent_dim)));
        entries.push(("enc.fc.bias".into(), Tensor::zeros(&[config.latent_dim])));

        for i in 0..config.audio_layers {
            let fan_in = config.kernel * config.audio_in(i);
            let name = format!("audio.conv{i}.weight");
            entries.push((name.clone(), glorot(&mut rng_for(&name), fan_in, config.audio_dim)));
            entries.push((format!("audio.conv{i}.bias"), Tensor::zeros(&[config.audio_dim])));
        }

        let joint = config.joint_dim();
        // Starts at the PCA mean motion.
        entries.push(("motion.fc.weight".into(), Tensor::zeros(&[joint, components])));
        entries.push(("motion.fc.bias".into(), Tensor::zeros(&[components])));

        entries.push(("refine.fc.weight".into(), glorot(&mut rng_for("refine.fc.weight"), joint, coarsest)));
        entries.push(("refine.fc.bias".into(), Tensor::zeros(&[coarsest])));
        for l in (0..config.levels).rev() {
            let layer = config.refine_layer(l);
            let (mut theta, bias) = layer.init(&mut rng_for(&format!("refine.cheb{l}.theta")));
            if l == 0 {
                // The untrained refinement adds nothing to the PCA motion.
                theta = Tensor::zeros(theta.shape());
            }
            entries.push((format!("refine.cheb{l}.theta"), theta));
            entries.push((format!("refine.cheb{l}.bias"), bias));
        }
        Self::from_named(entries)
    }
}

fn glorot(rng: &mut impl Rng, fan_in: usize, fan_out: usize) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out).map(|_| rng.gen_range(-limit..limit)).collect();
    Tensor::new(vec![fan_in, fan_out], data).expect("weight shape")
}

/// Parameters recorded on one tape.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
    index: BTreeMap<String, usize>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.index
            .get(name)
            .map(|&i| self.vars[i])
            .ok_or_else(|| Error::invalid(format!("missing parameter {name}")))
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// Everything needed to run the network.
#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub hierarchy: Arc<Hierarchy>,
    pub pca: Arc<PcaBasis>,
    pub params: ModelParams,
}

impl Model {
    pub fn new(config: ModelConfig, hierarchy: Arc<Hierarchy>, pca: Arc<PcaBasis>, params: ModelParams) -> Result<Self> {
        config.validate()?;
        if hierarchy.depth() != config.levels {
            return Err(Error::invalid(format!(
                "hierarchy has {} poolings, config expects {}",
                hierarchy.depth(),
                config.levels
            )));
        }
        let n = hierarchy.levels[0].n_vertices();
        if pca.dim() != 3 * n {
            return Err(Error::Topology { expected: n, got: pca.dim() / 3 });
        }
        let expected = ModelParams::init(&config, &hierarchy.sizes(), pca.n_components(), 0)?;
        for (name, t) in expected.names().iter().zip(expected.tensors()) {
            match params.get(name) {
                Some(p) if p.shape() == t.shape() => {}
                Some(p) => {
                    return Err(Error::shape("model", format!("{name} is {:?}, expected {:?}", p.shape(), t.shape())));
                }
                None => return Err(Error::invalid(format!("missing parameter {name}"))),
            }
        }
        if params.len() != expected.len() {
            return Err(Error::invalid("unexpected extra parameters"));
        }
        Ok(Self { config, hierarchy, pca, params })
    }

    /// Fresh parameters for a hierarchy and basis.
    pub fn init(config: ModelConfig, hierarchy: Arc<Hierarchy>, pca: Arc<PcaBasis>, seed: u64) -> Result<Self> {
        let params = ModelParams::init(&config, &hierarchy.sizes(), pca.n_components(), seed)?;
        Self::new(config, hierarchy, pca, params)
    }

    pub fn n_vertices(&self) -> usize {
        self.hierarchy.levels[0].n_vertices()
    }

    pub fn with_params(&self, params: ModelParams) -> Result<Self> {
        Self::new(self.config.clone(), self.hierarchy.clone(), self.pca.clone(), params)
    }

    fn check_template(&self, template: &TriangleMesh) -> Result<()> {
        if !template.same_topology(&self.hierarchy.levels[0].mesh) {
            return Err(Error::Topology {
                expected: self.n_vertices(),
                got: template.n_vertices(),
            });
        }
        Ok(())
    }

    /// Latent code `[1, latent_dim]` of a template mesh.
    pub fn encode_mesh(&self, tape: &mut Tape, p: &Bound, template: &TriangleMesh) -> Result<Var> {
        self.check_template(template)?;
        let n = template.n_vertices();
        let mut h = tape.constant(Tensor::new(vec![n, 3], template.flat_vertices())?);
        for l in 0..self.config.levels {
            let level = &self.hierarchy.levels[l];
            let layer = self.config.enc_layer(l);
            h = layer.forward(
                tape,
                &level.scaled_laplacian,
                h,
                p.var(&format!("cheb{l}.theta"))?,
                p.var(&format!("cheb{l}.bias"))?,
            )?;
            h = tape.relu(h)?;
            h = tape.sparse_matmul(&self.hierarchy.transitions[l].down, h)?;
        }
        let flat_len = tape.value(h).len();
        let flat = tape.reshape(h, &[1, flat_len])?;
        let z = tape.matmul(flat, p.var("enc.fc.weight")?)?;
        tape.add_row(z, p.var("enc.fc.bias")?)
    }

    /// Per-frame codes `[frames, audio_dim]` from features `[T_a, F]`.
    pub fn encode_audio(&self, tape: &mut Tape, p: &Bound, features: &Tensor, frames: usize) -> Result<Var> {
        let (t_a, f) = features.dims2()?;
        if t_a == 0 || frames == 0 {
            return Err(Error::invalid("feature sequence and frame count must be nonempty"));
        }
        if f != self.config.feature_dim {
            return Err(Error::shape("encode_audio", format!("{f} feature channels, model expects {}", self.config.feature_dim)));
        }
        let half = self.config.kernel as isize / 2;
        let shifts: Vec<Arc<SparseMatrix>> = (-half..=half)
            .map(|o| shift_matrix(t_a, o).map(Arc::new))
            .collect::<Result<_>>()?;
        let mut h = tape.constant(features.clone());
        for i in 0..self.config.audio_layers {
            let taps: Vec<Var> = shifts
                .iter()
                .map(|s| tape.sparse_matmul(s, h))
                .collect::<Result<_>>()?;
            let stacked = tape.concat_cols(&taps)?;
            h = tape.matmul(stacked, p.var(&format!("audio.conv{i}.weight"))?)?;
            h = tape.add_row(h, p.var(&format!("audio.conv{i}.bias"))?)?;
            if i + 1 < self.config.audio_layers {
                h = tape.relu(h)?;
            }
        }
        let interp = Arc::new(interpolation_matrix(t_a, frames)?);
        tape.sparse_matmul(&interp, h)
    }

    /// Displacements `[frames, 3N]` from a latent row and per-frame codes.
    pub fn decode_motion(&self, tape: &mut Tape, p: &Bound, z_m: Var, codes: Var) -> Result<Var> {
        let (frames, _) = tape.value(codes).dims2()?;
        let z = tape.repeat_rows(z_m, frames)?;
        let joint = tape.concat_cols(&[z, codes])?;

        let coeffs = tape.matmul(joint, p.var("motion.fc.weight")?)?;
        let coeffs = tape.add_row(coeffs, p.var("motion.fc.bias")?)?;
        let basis = tape.constant(self.pca.components().clone());
        let linear = tape.matmul(coeffs, basis)?;
        let mean = tape.constant(self.pca.mean().clone());
        let linear = tape.add_row(linear, mean)?;

        let c = self.config.mesh_channels;
        let levels = self.config.levels;
        let coarse_n = self.hierarchy.levels[levels].n_vertices();
        let r = tape.matmul(joint, p.var("refine.fc.weight")?)?;
        let r = tape.add_row(r, p.var("refine.fc.bias")?)?;
        // [T, n·C] → [n, T·C] so every frame is filtered as its own column block.
        let r = tape.reshape(r, &[frames, coarse_n, c])?;
        let r = tape.permute3(r, [1, 0, 2])?;
        let mut h = tape.reshape(r, &[coarse_n, frames * c])?;
        for l in (0..levels).rev() {
            h = tape.sparse_matmul(&self.hierarchy.transitions[l].up, h)?;
            let layer = self.config.refine_layer(l);
            h = layer.forward(
                tape,
                &self.hierarchy.levels[l].scaled_laplacian,
                h,
                p.var(&format!("refine.cheb{l}.theta"))?,
                p.var(&format!("refine.cheb{l}.bias"))?,
            )?;
            if l > 0 {
                h = tape.relu(h)?;
            }
        }
        let n = self.n_vertices();
        let h = tape.reshape(h, &[n, frames, 3])?;
        let h = tape.permute3(h, [1, 0, 2])?;
        let refine = tape.reshape(h, &[frames, 3 * n])?;
        tape.add(linear, refine)
    }

    /// Predicted vertex sequence `[frames, 3N]`.
    pub fn forward_sequence(
        &self,
        tape: &mut Tape,
        p: &Bound,
        template: &TriangleMesh,
        features: &Tensor,
        frames: usize,
    ) -> Result<Var> {
        let z = self.encode_mesh(tape, p, template)?;
        let codes = self.encode_audio(tape, p, features, frames)?;
        let disp = self.decode_motion(tape, p, z, codes)?;
        let base = tape.constant(Tensor::new(vec![template.n_vertices() * 3], template.flat_vertices())?);
        tape.add_row(disp, base)
    }

    /// Forward pass without gradients.
    pub fn predict(&self, template: &TriangleMesh, features: &Tensor, frames: usize) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.params.bind_constants(&mut tape);
        let y = self.forward_sequence(&mut tape, &bound, template, features, frames)?;
        Ok(tape.value(y).clone())
    }
}

/// `(S x)[t] = x[t + offset]`, zero outside `[0, len)`.
fn shift_matrix(len: usize, offset: isize) -> Result<SparseMatrix> {
    let trip: Vec<(usize, usize, f64)> = (0..len)
        .filter_map(|t| {
            let src = t as isize + offset;
            (0..len as isize).contains(&src).then_some((t, src as usize, 1.0))
        })
        .collect();
    SparseMatrix::from_triplets(len, len, &trip)
}

/// Linear interpolation from `from` samples to `to` samples with both
/// endpoints aligned.
pub fn interpolation_matrix(from: usize, to: usize) -> Result<SparseMatrix> {
    if from == 0 || to == 0 {
        return Err(Error::invalid("interpolation needs nonempty sequences"));
    }
    let mut trip = Vec::with_capacity(2 * to);
    for t in 0..to {
        let pos = if to == 1 { 0.0 } else { t as f64 * (from - 1) as f64 / (to - 1) as f64 };
        let lo = (pos.floor() as usize).min(from - 1);
        let frac = pos - lo as f64;
        if frac > 0.0 && lo + 1 < from {
            trip.push((t, lo, 1.0 - frac));
            trip.push((t, lo + 1, frac));
        } else {
            trip.push((t, lo, 1.0));
        }
    }
    SparseMatrix::from_triplets(to, from, &trip)
}

/// One training or evaluation item.
#[derive(Debug, Clone)]
pub struct SequenceSample {
    pub template: Arc<TriangleMesh>,
    /// `[T_a, F]`.
    pub features: Tensor,
    /// `[T, 3N]`.
    pub targets: Tensor,
    pub fps: f64,
}

impl SequenceSample {
    pub fn new(template: Arc<TriangleMesh>, features: Tensor, targets: Tensor, fps: f64) -> Result<Self> {
        let (t, w) = targets.dims2()?;
        if t == 0 {
            return Err(Error::invalid("sequence needs at least one frame"));
        }
        if w != 3 * template.n_vertices() {
            return Err(Error::Topology { expected: template.n_vertices(), got: w / 3 });
        }
        let (t_a, _) = features.dims2()?;
        if t_a == 0 {
            return Err(Error::invalid("empty feature sequence"));
        }
        targets.check_finite("targets")?;
        features.check_finite("features")?;
        Ok(Self { template, features, targets, fps })
    }

    pub fn frames(&self) -> usize {
        self.targets.shape()[0]
    }

    /// Target frame `j` as a mesh.
    pub fn target_mesh(&self, j: usize) -> Result<TriangleMesh> {
        if j >= self.frames() {
            return Err(Error::invalid(format!("frame {j} of a {}-frame sample", self.frames())));
        }
        let w = self.targets.shape()[1];
        let row = &self.targets.data()[j * w..(j + 1) * w];
        self.template
            .with_vertices(row.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect())
    }

    /// Frames `[start, end)` with the matching span of features.
    pub fn chunk(&self, start: usize, end: usize) -> Result<Self> {
        let t = self.frames();
        if start >= end || end > t {
            return Err(Error::invalid(format!("chunk {start}..{end} of {t} frames")));
        }
        let (t_a, f) = self.features.dims2()?;
        let a0 = start * t_a / t;
        let a1 = (end * t_a).div_ceil(t).clamp(a0 + 1, t_a);
        let w = self.targets.shape()[1];
        Ok(Self {
            template: self.template.clone(),
            features: Tensor::new(vec![a1 - a0, f], self.features.data()[a0 * f..a1 * f].to_vec())?,
            targets: Tensor::new(vec![end - start, w], self.targets.data()[start * w..end * w].to_vec())?,
            fps: self.fps,
        })
    }
}

/// Sample plus the per-frame transport targets, built once.
#[derive(Debug, Clone)]
pub struct PreparedSample {
    pub sample: SequenceSample,
    pub swd_targets: Vec<SwdTarget>,
}

impl PreparedSample {
    pub fn new(sample: SequenceSample, gamma: f64) -> Result<Self> {
        let swd_targets = (0..sample.frames())
            .map(|j| SwdTarget::new(&sample.target_mesh(j)?, gamma))
            .collect::<Result<_>>()?;
        Ok(Self { sample, swd_targets })
    }
}

/// Loss weights `β₁, β₂, β₃` and the transport exponent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub velocity: f64,
    pub swd: f64,
    pub reg: f64,
    pub p: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { velocity: 10.0, swd: 1.0, reg: 0.01, p: ot::DEFAULT_P }
    }
}

/// Values of the individual loss terms (unweighted) and the total.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub rec: f64,
    pub vel: f64,
    pub swd: f64,
    pub reg: f64,
}

impl LossBreakdown {
    pub fn add_scaled(&mut self, o: &LossBreakdown, s: f64) {
        self.total += s * o.total;
        self.rec += s * o.rec;
        self.vel += s * o.vel;
        self.swd += s * o.swd;
        self.reg += s * o.reg;
    }
}

/// `Σ_j Σ_i ‖ŷ_i^j − y_i^j‖` for `[T, 3N]` sequences.
pub fn loss_reconstruction(tape: &mut Tape, pred: Var, target: Var) -> Result<Var> {
    let d = tape.sub(pred, target)?;
    vertex_norm_sum(tape, d)
}

fn vertex_norm_sum(tape: &mut Tape, d: Var) -> Result<Var> {
    let n = tape.value(d).len() / 3;
    let rows = tape.reshape(d, &[n, 3])?;
    let norms = tape.row_norms(rows)?;
    tape.sum(norms)
}

/// `Σ_{j<T} Σ_i ‖(ŷ^{j+1} − ŷ^j) − (y^{j+1} − y^j)‖`; zero when `T = 1`.
pub fn loss_velocity(tape: &mut Tape, pred: Var, target: Var) -> Result<Var> {
    let (t, _) = tape.value(pred).dims2()?;
    if t < 2 {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    let d = tape.sub(pred, target)?;
    let later = tape.slice_rows(d, 1, t)?;
    let earlier = tape.slice_rows(d, 0, t - 1)?;
    let v = tape.sub(later, earlier)?;
    vertex_norm_sum(tape, v)
}

/// `Σ_j SW_p^p` between predicted and target varifolds, frame by frame.
pub fn loss_swd(
    tape: &mut Tape,
    pred: Var,
    targets: &[SwdTarget],
    proj: &ProjectionSet,
    p: f64,
    frozen_areas: Option<&[Vec<f64>]>,
) -> Result<Var> {
    let (t, w) = tape.value(pred).dims2()?;
    if targets.len() != t {
        return Err(Error::shape("loss_swd", format!("{} targets for {t} frames", targets.len())));
    }
    let mut total: Option<Var> = None;
    for (j, target) in targets.iter().enumerate() {
        let row = tape.slice_rows(pred, j, j + 1)?;
        let verts = tape.reshape(row, &[w / 3, 3])?;
        let frozen = frozen_areas.map(|f| f[j].as_slice());
        let l = ot::swd_loss(tape, verts, target, proj, p, frozen)?;
        total = Some(match total {
            Some(acc) => tape.add(acc, l)?,
            None => l,
        });
    }
    total.ok_or_else(|| Error::invalid("no frames"))
}

/// Euclidean norm of all bound parameters concatenated.
pub fn loss_regularizer(tape: &mut Tape, p: &Bound) -> Result<Var> {
    let flat: Vec<Var> = p
        .vars
        .iter()
        .map(|&v| {
            let n = tape.value(v).len();
            tape.reshape(v, &[1, n])
        })
        .collect::<Result<_>>()?;
    let all = tape.concat_cols(&flat)?;
    tape.norm(all)
}

/// Handles to the pieces of the composite loss.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub total: Var,
    pub rec: Var,
    pub vel: Var,
    pub swd: Var,
    pub reg: Var,
}

impl LossVars {
    pub fn values(&self, tape: &Tape) -> Result<LossBreakdown> {
        Ok(LossBreakdown {
            total: tape.value(self.total).item()?,
            rec: tape.value(self.rec).item()?,
            vel: tape.value(self.vel).item()?,
            swd: tape.value(self.swd).item()?,
            reg: tape.value(self.reg).item()?,
        })
    }
}

/// `L_r + β₁·L_v + β₂·L_SW + β₃·‖W‖₂`. Transport terms are skipped when
/// `β₂ = 0`.
#[allow(clippy::too_many_arguments)]
pub fn loss_total(
    tape: &mut Tape,
    pred: Var,
    target: &Tensor,
    swd_targets: &[SwdTarget],
    params: &Bound,
    weights: &LossWeights,
    proj: &ProjectionSet,
    frozen_areas: Option<&[Vec<f64>]>,
) -> Result<LossVars> {
    let target = tape.constant(target.clone());
    let rec = loss_reconstruction(tape, pred, target)?;
    let vel = loss_velocity(tape, pred, target)?;
    let swd = if weights.swd != 0.0 {
        loss_swd(tape, pred, swd_targets, proj, weights.p, frozen_areas)?
    } else {
        tape.constant(Tensor::scalar(0.0))
    };
    let reg = loss_regularizer(tape, params)?;
    let a = tape.scale(vel, weights.velocity)?;
    let b = tape.scale(swd, weights.swd)?;
    let c = tape.scale(reg, weights.reg)?;
    let total = tape.add(rec, a)?;
    let total = tape.add(total, b)?;
    let total = tape.add(total, c)?;
    Ok(LossVars { total, rec, vel, swd, reg })
}

/// Loss and gradients for one prepared sample.
pub fn sample_loss_and_grads(
    model: &Model,
    item: &PreparedSample,
    weights: &LossWeights,
    proj: &ProjectionSet,
) -> Result<(LossBreakdown, Vec<Tensor>)> {
    let mut tape = Tape::new();
    let bound = model.params.bind(&mut tape);
    let s = &item.sample;
    let pred = model.forward_sequence(&mut tape, &bound, &s.template, &s.features, s.frames())?;
    let loss = loss_total(&mut tape, pred, &s.targets, &item.swd_targets, &bound, weights, proj, None)?;
    let values = loss.values(&tape)?;
    let grads = tape.backward(loss.total)?;
    Ok((values, model.params.collect_grads(&bound, &grads)))
}

/// Loss without gradients.
pub fn sample_loss(model: &Model, item: &PreparedSample, weights: &LossWeights, proj: &ProjectionSet) -> Result<LossBreakdown> {
    let mut tape = Tape::new();
    let bound = model.params.bind_constants(&mut tape);
    let s = &item.sample;
    let pred = model.forward_sequence(&mut tape, &bound, &s.template, &s.features, s.frames())?;
    loss_total(&mut tape, pred, &s.targets, &item.swd_targets, &bound, weights, proj, None)?.values(&tape)
}

/// Archive manifest stored as `model.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelManifest {
    pub config: ModelConfig,
    pub params: Vec<TensorEntry>,
    pub pca_mean: String,
    pub pca_components: String,
    pub pca_variances: String,
    pub hierarchy_dir: String,
    pub level_sizes: Vec<usize>,
    pub gamma: f64,
    pub seeds: BTreeMap<String, u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub file: String,
    pub shape: Vec<usize>,
}

pub const MODEL_MANIFEST: &str = "model.json";

/// Writes the model as a directory of OTTK tensors plus `model.json`.
pub fn save_model(model: &Model, dir: &Path, gamma: f64, seeds: BTreeMap<String, u64>) -> Result<ModelManifest> {
    std::fs::create_dir_all(dir)?;
    let mut params = Vec::with_capacity(model.params.len());
    for (name, t) in model.params.names().iter().zip(model.params.tensors()) {
        let file = format!("{name}.ottk");
        ottk::write(dir.join(&file), t)?;
        params.push(TensorEntry { name: name.clone(), file, shape: t.shape().to_vec() });
    }
    ottk::write(dir.join("pca.mean.ottk"), model.pca.mean())?;
    ottk::write(dir.join("pca.components.ottk"), model.pca.components())?;
    ottk::write(dir.join("pca.variances.ottk"), &Tensor::new(vec![model.pca.n_components()], model.pca.variances().to_vec())?)?;
    resample::save_hierarchy(&model.hierarchy, &dir.join("hierarchy"))?;
    let manifest = ModelManifest {
        config: model.config.clone(),
        params,
        pca_mean: "pca.mean.ottk".into(),
        pca_components: "pca.components.ottk".into(),
        pca_variances: "pca.variances.ottk".into(),
        hierarchy_dir: "hierarchy".into(),
        level_sizes: model.hierarchy.sizes(),
        gamma,
        seeds,
    };
    std::fs::write(dir.join(MODEL_MANIFEST), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

pub fn load_model(dir: &Path) -> Result<(Model, ModelManifest)> {
    let text = std::fs::read_to_string(dir.join(MODEL_MANIFEST))?;
    let manifest: ModelManifest = serde_json::from_str(&text)?;
    let entries = manifest
        .params
        .iter()
        .map(|e| {
            let t = ottk::read(dir.join(&e.file))?;
            if t.shape() != e.shape.as_slice() {
                return Err(Error::Format(format!("{} has shape {:?}, manifest says {:?}", e.file, t.shape(), e.shape)));
            }
            Ok((e.name.clone(), t))
        })
        .collect::<Result<Vec<_>>>()?;
    let pca = PcaBasis::new(
        ottk::read(dir.join(&manifest.pca_mean))?,
        ottk::read(dir.join(&manifest.pca_components))?,
        ottk::read(dir.join(&manifest.pca_variances))?.into_data(),
    )?;
    let hierarchy = resample::load_hierarchy(&dir.join(&manifest.hierarchy_dir))?;
    if hierarchy.sizes() != manifest.level_sizes {
        return Err(Error::Format("hierarchy sizes disagree with model manifest".into()));
    }
    let model = Model::new(
        manifest.config.clone(),
        Arc::new(hierarchy),
        Arc::new(pca),
        ModelParams::from_named(entries)?,
    )?;
    Ok((model, manifest))
}

/// Mesh of a `[T, 3N]` prediction row.
pub fn frame_mesh(template: &TriangleMesh, seq: &Tensor, j: usize) -> Result<TriangleMesh> {
    let (_, w) = seq.dims2()?;
    let row = &seq.data()[j * w..(j + 1) * w];
    template.with_vertices(row.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect())
}
