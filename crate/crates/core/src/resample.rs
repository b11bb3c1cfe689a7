//! Multi-scale mesh hierarchies.
//!
//! Downsampling keeps a subset of the original vertices, chosen by greedy
//! quadric-error edge collapse, so `Q_d` is a 0/1 selection matrix.
//! Upsampling expresses every fine vertex in barycentric coordinates of the
//! closest coarse triangle, giving `Q_u`.

use std::cmp::{Ordering, Reverse};
use std::collections::{BTreeSet, BinaryHeap, HashMap};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::mesh::{self, cross, dot, norm, sub, TriangleMesh, Vec3};
use crate::ottk;
use crate::spectral;
use crate::tensor::SparseMatrix;

/// Smallest vertex count a decimation may target: a single triangle.
pub const MIN_TARGET: usize = 3;

/// Symmetric 4×4 quadric stored as its upper triangle.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
struct Quadric([f64; 10]);

impl Quadric {
    fn from_plane(n: Vec3, d: f64, weight: f64) -> Self {
        let [a, b, c] = n;
        Quadric(
            [
                a * a, a * b, a * c, a * d,
                b * b, b * c, b * d,
                c * c, c * d,
                d * d,
            ]
            .map(|x| x * weight),
        )
    }

    fn add(&mut self, o: &Quadric) {
        for (a, b) in self.0.iter_mut().zip(&o.0) {
            *a += b;
        }
    }

    fn sum(a: &Quadric, b: &Quadric) -> Quadric {
        let mut q = *a;
        q.add(b);
        q
    }

    fn eval(&self, p: Vec3) -> f64 {
        let q = &self.0;
        let [x, y, z] = p;
        q[0] * x * x + 2.0 * q[1] * x * y + 2.0 * q[2] * x * z + 2.0 * q[3] * x
            + q[4] * y * y + 2.0 * q[5] * y * z + 2.0 * q[6] * y
            + q[7] * z * z + 2.0 * q[8] * z
            + q[9]
    }
}

/// Heap entry; ordered by cost, then by the smaller and larger endpoint.
#[derive(Debug, Clone, Copy)]
struct Candidate {
    cost: f64,
    lo: usize,
    hi: usize,
    /// Endpoint that survives the collapse.
    keep: usize,
    stamp: (u64, u64),
}

impl PartialEq for Candidate {
    fn eq(&self, o: &Self) -> bool {
        self.cmp(o) == Ordering::Equal
    }
}
impl Eq for Candidate {}
impl PartialOrd for Candidate {
    fn partial_cmp(&self, o: &Self) -> Option<Ordering> {
        Some(self.cmp(o))
    }
}
impl Ord for Candidate {
    fn cmp(&self, o: &Self) -> Ordering {
        self.cost
            .total_cmp(&o.cost)
            .then(self.lo.cmp(&o.lo))
            .then(self.hi.cmp(&o.hi))
    }
}

/// Mutable working copy used during decimation.
struct Work<'a> {
    pos: &'a [Vec3],
    faces: Vec<[usize; 3]>,
    face_alive: Vec<bool>,
    incident: Vec<Vec<usize>>,
    quadric: Vec<Quadric>,
    alive: Vec<bool>,
    version: Vec<u64>,
    n_alive: usize,
}

impl<'a> Work<'a> {
    fn new(m: &'a TriangleMesh) -> Self {
        let n = m.n_vertices();
        let faces = m.faces().to_vec();
        let mut incident = vec![Vec::new(); n];
        for (fi, f) in faces.iter().enumerate() {
            for &v in f {
                incident[v].push(fi);
            }
        }
        let pos = m.vertices();
        let mut quadric = vec![Quadric::default(); n];
        let mut edge_faces: HashMap<(usize, usize), Vec<usize>> = HashMap::new();
        for (fi, f) in faces.iter().enumerate() {
            let cr = cross(sub(pos[f[1]], pos[f[0]]), sub(pos[f[2]], pos[f[0]]));
            let len = norm(cr);
            if len > 0.0 {
                let n = mesh::scale(cr, 1.0 / len);
                let q = Quadric::from_plane(n, -dot(n, pos[f[0]]), 1.0);
                for &v in f {
                    quadric[v].add(&q);
                }
            }
            for k in 0..3 {
                let (a, b) = (f[k], f[(k + 1) % 3]);
                edge_faces.entry((a.min(b), a.max(b))).or_default().push(fi);
            }
        }
        // Boundary edges: plane through the edge, perpendicular to its face.
        let mut boundary: Vec<_> = edge_faces.iter().filter(|(_, fs)| fs.len() == 1).collect();
        boundary.sort_by_key(|(e, _)| **e);
        for (&(a, b), fs) in boundary {
            let f = faces[fs[0]];
            let fnrm = cross(sub(pos[f[1]], pos[f[0]]), sub(pos[f[2]], pos[f[0]]));
            let bn = cross(sub(pos[b], pos[a]), fnrm);
            let len = norm(bn);
            if len > 0.0 {
                let n = mesh::scale(bn, 1.0 / len);
                let q = Quadric::from_plane(n, -dot(n, pos[a]), 1.0);
                quadric[a].add(&q);
                quadric[b].add(&q);
            }
        }
        Self {
            pos,
            face_alive: vec![true; faces.len()],
            faces,
            incident,
            quadric,
            alive: vec![true; n],
            version: vec![0; n],
            n_alive: n,
        }
    }

    fn neighbors(&self, v: usize) -> BTreeSet<usize> {
        self.incident[v]
            .iter()
            .flat_map(|&fi| self.faces[fi])
            .filter(|&w| w != v)
            .collect()
    }

    fn is_boundary_vertex(&self, v: usize) -> bool {
        let mut count: HashMap<usize, usize> = HashMap::new();
        for &fi in &self.incident[v] {
            for w in self.faces[fi] {
                if w != v {
                    *count.entry(w).or_default() += 1;
                }
            }
        }
        count.values().any(|&c| c == 1)
    }

    fn candidate(&self, a: usize, b: usize) -> Candidate {
        let q = Quadric::sum(&self.quadric[a], &self.quadric[b]);
        let (ca, cb) = (q.eval(self.pos[a]), q.eval(self.pos[b]));
        let (lo, hi) = (a.min(b), a.max(b));
        let (cost, keep) = match ca.total_cmp(&cb) {
            Ordering::Less => (ca, a),
            Ordering::Greater => (cb, b),
            Ordering::Equal => (ca, lo),
        };
        Candidate {
            cost,
            lo,
            hi,
            keep,
            stamp: (self.version[lo], self.version[hi]),
        }
    }

    fn is_current(&self, c: &Candidate) -> bool {
        self.alive[c.lo]
            && self.alive[c.hi]
            && c.stamp == (self.version[c.lo], self.version[c.hi])
    }

    /// Topological and geometric admissibility of collapsing `gone` into `keep`.
    fn can_collapse(&self, gone: usize, keep: usize) -> bool {
        let shared: Vec<usize> = self.incident[gone]
            .iter()
            .copied()
            .filter(|&fi| self.faces[fi].contains(&keep))
            .collect();
        if shared.is_empty() || shared.len() > 2 {
            return false;
        }
        // Link condition: common neighbours are exactly the opposite corners.
        let opposite: BTreeSet<usize> = shared
            .iter()
            .flat_map(|&fi| self.faces[fi])
            .filter(|&w| w != gone && w != keep)
            .collect();
        let common: BTreeSet<usize> = self
            .neighbors(gone)
            .intersection(&self.neighbors(keep))
            .copied()
            .collect();
        if common != opposite {
            return false;
        }
        // An interior edge joining two boundary vertices would pinch the surface.
        if shared.len() == 2 && self.is_boundary_vertex(gone) && self.is_boundary_vertex(keep) {
            return false;
        }
        // Never remove the last face.
        let remaining = self.face_alive.iter().filter(|&&a| a).count();
        if remaining <= shared.len() {
            return false;
        }
        let sorted = |mut f: [usize; 3]| {
            f.sort_unstable();
            f
        };
        let mut existing: BTreeSet<[usize; 3]> = self.incident[keep]
            .iter()
            .filter(|fi| !shared.contains(fi))
            .map(|&fi| sorted(self.faces[fi]))
            .collect();
        for &fi in &self.incident[gone] {
            let f = self.faces[fi];
            if f.contains(&keep) {
                continue;
            }
            // Two faces on the same three vertices (a tetrahedron folding flat).
            if !existing.insert(sorted(f.map(|v| if v == gone { keep } else { v }))) {
                return false;
            }
            let p = f.map(|v| self.pos[v]);
            let before = cross(sub(p[1], p[0]), sub(p[2], p[0]));
            let q = f.map(|v| if v == gone { self.pos[keep] } else { self.pos[v] });
            let after = cross(sub(q[1], q[0]), sub(q[2], q[0]));
            if 0.5 * norm(after) < mesh::DEGENERATE_AREA || dot(before, after) < 0.0 {
                return false;
            }
        }
        true
    }

    fn collapse(&mut self, gone: usize, keep: usize) {
        let faces_of_gone = std::mem::take(&mut self.incident[gone]);
        for fi in faces_of_gone {
            if self.faces[fi].contains(&keep) {
                self.face_alive[fi] = false;
                for v in self.faces[fi] {
                    if v != gone {
                        self.incident[v].retain(|&x| x != fi);
                    }
                }
            } else {
                for v in self.faces[fi].iter_mut() {
                    if *v == gone {
                        *v = keep;
                    }
                }
                self.incident[keep].push(fi);
            }
        }
        let q = self.quadric[gone];
        self.quadric[keep].add(&q);
        self.alive[gone] = false;
        self.version[gone] += 1;
        self.version[keep] += 1;
        self.n_alive -= 1;
    }

    fn push_edges_of(&self, v: usize, heap: &mut BinaryHeap<Reverse<Candidate>>) {
        for w in self.neighbors(v) {
            heap.push(Reverse(self.candidate(v, w)));
        }
    }

    fn all_candidates(&self) -> BinaryHeap<Reverse<Candidate>> {
        let mut edges = BTreeSet::new();
        for (fi, f) in self.faces.iter().enumerate() {
            if !self.face_alive[fi] {
                continue;
            }
            for k in 0..3 {
                let (a, b) = (f[k], f[(k + 1) % 3]);
                edges.insert((a.min(b), a.max(b)));
            }
        }
        edges.into_iter().map(|(a, b)| Reverse(self.candidate(a, b))).collect()
    }
}

/// Result of one decimation.
#[derive(Debug, Clone)]
pub struct Decimation {
    pub coarse: TriangleMesh,
    /// `n×m` selection matrix.
    pub down: SparseMatrix,
    /// Original index of every coarse vertex, ascending.
    pub kept: Vec<usize>,
}

/// Greedy QEM edge collapse down to exactly `target_n` vertices.
pub fn qem_decimate(mesh: &TriangleMesh, target_n: usize) -> Result<Decimation> {
    let n = mesh.n_vertices();
    if target_n < MIN_TARGET || target_n >= n {
        return Err(Error::invalid(format!(
            "decimation target {target_n} must lie in {MIN_TARGET}..{n}"
        )));
    }
    if !mesh.is_connected() {
        return Err(Error::Mesh("decimation needs a connected mesh".into()));
    }
    let mut w = Work::new(mesh);
    let mut heap = w.all_candidates();
    while w.n_alive > target_n {
        let mut progressed = false;
        while let Some(Reverse(c)) = heap.pop() {
            if !w.is_current(&c) {
                continue;
            }
            let gone = if c.keep == c.lo { c.hi } else { c.lo };
            if !w.can_collapse(gone, c.keep) {
                continue;
            }
            w.collapse(gone, c.keep);
            progressed = true;
            let ring = w.neighbors(c.keep);
            w.push_edges_of(c.keep, &mut heap);
            for r in ring {
                w.push_edges_of(r, &mut heap);
            }
            if w.n_alive == target_n {
                break;
            }
        }
        if w.n_alive == target_n {
            break;
        }
        if !progressed {
            return Err(Error::Decimation {
                target: target_n,
                achieved: w.n_alive,
            });
        }
        // Candidates rejected earlier may have become admissible.
        heap = w.all_candidates();
    }

    let kept: Vec<usize> = (0..n).filter(|&v| w.alive[v]).collect();
    let mut remap = vec![usize::MAX; n];
    for (i, &v) in kept.iter().enumerate() {
        remap[v] = i;
    }
    let faces: Vec<[usize; 3]> = w
        .faces
        .iter()
        .zip(&w.face_alive)
        .filter(|(_, &a)| a)
        .map(|(f, _)| f.map(|v| remap[v]))
        .collect();
    let vertices = kept.iter().map(|&v| mesh.vertices()[v]).collect();
    let coarse = TriangleMesh::new(vertices, faces)?;
    let triplets: Vec<_> = kept.iter().enumerate().map(|(r, &c)| (r, c, 1.0)).collect();
    let down = SparseMatrix::from_triplets(kept.len(), n, &triplets)?;
    Ok(Decimation { coarse, down, kept })
}

/// Closest point on triangle `abc` to `p`, as barycentric weights.
pub fn closest_point_barycentric(p: Vec3, a: Vec3, b: Vec3, c: Vec3) -> [f64; 3] {
    let ab = sub(b, a);
    let ac = sub(c, a);
    let ap = sub(p, a);
    let d1 = dot(ab, ap);
    let d2 = dot(ac, ap);
    if d1 <= 0.0 && d2 <= 0.0 {
        return [1.0, 0.0, 0.0];
    }
    let bp = sub(p, b);
    let d3 = dot(ab, bp);
    let d4 = dot(ac, bp);
    if d3 >= 0.0 && d4 <= d3 {
        return [0.0, 1.0, 0.0];
    }
    let vc = d1 * d4 - d3 * d2;
    if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 {
        let v = d1 / (d1 - d3);
        return [1.0 - v, v, 0.0];
    }
    let cp = sub(p, c);
    let d5 = dot(ab, cp);
    let d6 = dot(ac, cp);
    if d6 >= 0.0 && d5 <= d6 {
        return [0.0, 0.0, 1.0];
    }
    let vb = d5 * d2 - d1 * d6;
    if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
        let w = d2 / (d2 - d6);
        return [1.0 - w, 0.0, w];
    }
    let va = d3 * d6 - d5 * d4;
    if va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0 {
        let w = (d4 - d3) / ((d4 - d3) + (d5 - d6));
        return [0.0, 1.0 - w, w];
    }
    let denom = 1.0 / (va + vb + vc);
    let v = vb * denom;
    let w = vc * denom;
    [1.0 - v - w, v, w]
}

/// Barycentric upsampling matrix `Q_u` (`fine × coarse`).
pub fn barycentric_upsample(fine: &TriangleMesh, coarse: &TriangleMesh) -> Result<SparseMatrix> {
    let geom = mesh::face_geometry(coarse);
    let usable: Vec<usize> = (0..coarse.n_faces()).filter(|&f| !geom.degenerate[f]).collect();
    if usable.is_empty() {
        return Err(Error::Mesh("coarse mesh has no non-degenerate faces".into()));
    }
    let cv = coarse.vertices();
    let rows: Vec<Vec<(usize, f64)>> = fine
        .vertices()
        .par_iter()
        .map(|&p| {
            let mut best = (f64::INFINITY, usable[0], [1.0, 0.0, 0.0]);
            for &fi in &usable {
                let f = coarse.faces()[fi];
                let w = closest_point_barycentric(p, cv[f[0]], cv[f[1]], cv[f[2]]);
                let q = [0, 1, 2].map(|k| {
                    w[0] * cv[f[0]][k] + w[1] * cv[f[1]][k] + w[2] * cv[f[2]][k]
                });
                let d = dot(sub(p, q), sub(p, q));
                if d < best.0 {
                    best = (d, fi, w);
                }
            }
            let f = coarse.faces()[best.1];
            let w = best.2.map(|x| x.clamp(0.0, 1.0));
            let s: f64 = w.iter().sum();
            let mut row: Vec<(usize, f64)> = (0..3)
                .filter(|&k| w[k] > 0.0)
                .map(|k| (f[k], w[k] / s))
                .collect();
            row.sort_by_key(|e| e.0);
            row
        })
        .collect();
    let triplets: Vec<(usize, usize, f64)> = rows
        .iter()
        .enumerate()
        .flat_map(|(r, row)| row.iter().map(move |&(c, v)| (r, c, v)))
        .collect();
    SparseMatrix::from_triplets(fine.n_vertices(), coarse.n_vertices(), &triplets)
}

/// Per-level graph operators.
#[derive(Debug, Clone)]
pub struct Level {
    pub mesh: TriangleMesh,
    pub laplacian: SparseMatrix,
    pub lambda_max: f64,
    pub scaled_laplacian: Arc<SparseMatrix>,
}

impl Level {
    pub fn new(mesh: TriangleMesh, lambda_max: Option<f64>, seed: u64) -> Result<Self> {
        let laplacian = mesh::normalized_laplacian(&mesh)?;
        let lambda_max = match lambda_max {
            Some(l) => l,
            None => linalg::laplacian_lambda_max(&laplacian, linalg::DEFAULT_POWER_ITERS, seed)?,
        };
        let scaled_laplacian = Arc::new(spectral::scale_laplacian(&laplacian, lambda_max)?);
        Ok(Self {
            mesh,
            laplacian,
            lambda_max,
            scaled_laplacian,
        })
    }

    pub fn n_vertices(&self) -> usize {
        self.mesh.n_vertices()
    }
}

/// Transition between level `k` (fine, `m` vertices) and `k+1` (coarse, `n`).
#[derive(Debug, Clone)]
pub struct ResampleLevel {
    /// `Q_d`, `n×m`.
    pub down: Arc<SparseMatrix>,
    /// `Q_u`, `m×n`.
    pub up: Arc<SparseMatrix>,
    pub kept: Vec<usize>,
}

/// Levels finest → coarsest with the transitions between them.
#[derive(Debug, Clone)]
pub struct Hierarchy {
    pub levels: Vec<Level>,
    pub transitions: Vec<ResampleLevel>,
}

/// `ceil(n / 4)`.
pub fn quarter(n: usize) -> usize {
    n.div_ceil(4)
}

/// Planned vertex counts for `levels` poolings of an `n`-vertex mesh.
pub fn level_sizes(n: usize, levels: usize) -> Vec<usize> {
    let mut sizes = vec![n];
    for _ in 0..levels {
        sizes.push(quarter(*sizes.last().unwrap()));
    }
    sizes
}

impl Hierarchy {
    pub fn sizes(&self) -> Vec<usize> {
        self.levels.iter().map(Level::n_vertices).collect()
    }

    pub fn depth(&self) -> usize {
        self.transitions.len()
    }

    /// Assembles a hierarchy from stored parts, checking every invariant.
    pub fn from_parts(levels: Vec<Level>, transitions: Vec<ResampleLevel>) -> Result<Self> {
        if levels.len() != transitions.len() + 1 {
            return Err(Error::invalid("hierarchy needs one more level than transitions"));
        }
        for (k, t) in transitions.iter().enumerate() {
            let (m, n) = (levels[k].n_vertices(), levels[k + 1].n_vertices());
            if n != quarter(m) {
                return Err(Error::invalid(format!("level {} has {n} vertices, expected ceil({m}/4)", k + 1)));
            }
            if (t.down.n_rows(), t.down.n_cols()) != (n, m) || (t.up.n_rows(), t.up.n_cols()) != (m, n) {
                return Err(Error::invalid(format!("transition {k} matrices have wrong shape")));
            }
        }
        Ok(Self { levels, transitions })
    }
}

/// Decimates `levels` times by a factor of four and precomputes operators.
pub fn build_hierarchy(mesh: &TriangleMesh, levels: usize, seed: u64) -> Result<Hierarchy> {
    if levels == 0 {
        return Err(Error::invalid("hierarchy needs at least one level"));
    }
    let sizes = level_sizes(mesh.n_vertices(), levels);
    if *sizes.last().unwrap() < MIN_TARGET {
        return Err(Error::invalid(format!(
            "{} vertices is too small for {levels} levels (sizes {sizes:?})",
            mesh.n_vertices()
        )));
    }
    let mut meshes = vec![mesh.clone()];
    let mut transitions = Vec::with_capacity(levels);
    for &target in &sizes[1..] {
        let fine = meshes.last().unwrap();
        let d = qem_decimate(fine, target)?;
        let up = barycentric_upsample(fine, &d.coarse)?;
        transitions.push(ResampleLevel {
            down: Arc::new(d.down),
            up: Arc::new(up),
            kept: d.kept,
        });
        meshes.push(d.coarse);
    }
    let levels: Vec<Level> = meshes
        .into_iter()
        .enumerate()
        .map(|(k, m)| Level::new(m, None, crate::seed::derive(seed, "lambda_max", k as u64)))
        .collect::<Result<_>>()?;
    Hierarchy::from_parts(levels, transitions)
}

/// JSON sidecar describing a stored hierarchy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HierarchyManifest {
    pub sizes: Vec<usize>,
    pub lambda_max: Vec<f64>,
    /// OBJ file per level, finest first.
    pub meshes: Vec<String>,
    /// Sparse stems per transition.
    pub down: Vec<String>,
    pub up: Vec<String>,
    pub kept: Vec<String>,
}

pub const HIERARCHY_MANIFEST: &str = "hierarchy.json";

/// Writes meshes as OBJ, `Q_d`/`Q_u` as sparse OTTK triples, and a JSON
/// sidecar into `dir`.
pub fn save_hierarchy(h: &Hierarchy, dir: &std::path::Path) -> Result<HierarchyManifest> {
    std::fs::create_dir_all(dir)?;
    let mut m = HierarchyManifest {
        sizes: h.sizes(),
        lambda_max: h.levels.iter().map(|l| l.lambda_max).collect(),
        meshes: Vec::new(),
        down: Vec::new(),
        up: Vec::new(),
        kept: Vec::new(),
    };
    for (k, level) in h.levels.iter().enumerate() {
        let name = format!("level{k}.obj");
        mesh::save_obj(&level.mesh, dir.join(&name))?;
        m.meshes.push(name);
    }
    for (k, t) in h.transitions.iter().enumerate() {
        let (down, up, kept) = (format!("down{k}"), format!("up{k}"), format!("kept{k}.ottk"));
        ottk::write_sparse(dir, &down, &t.down)?;
        ottk::write_sparse(dir, &up, &t.up)?;
        let idx = t.kept.iter().map(|&v| v as f64).collect();
        ottk::write(dir.join(&kept), &crate::tensor::Tensor::new(vec![t.kept.len()], idx)?)?;
        m.down.push(down);
        m.up.push(up);
        m.kept.push(kept);
    }
    std::fs::write(dir.join(HIERARCHY_MANIFEST), serde_json::to_string_pretty(&m)?)?;
    Ok(m)
}

pub fn load_hierarchy(dir: &std::path::Path) -> Result<Hierarchy> {
    let text = std::fs::read_to_string(dir.join(HIERARCHY_MANIFEST))?;
    let m: HierarchyManifest = serde_json::from_str(&text)?;
    if m.meshes.len() != m.lambda_max.len() || m.down.len() != m.up.len() || m.kept.len() != m.down.len() {
        return Err(Error::Format("inconsistent hierarchy manifest".into()));
    }
    let levels: Vec<Level> = m
        .meshes
        .iter()
        .zip(&m.lambda_max)
        .map(|(name, &lam)| Level::new(mesh::load_obj(dir.join(name))?, Some(lam), 0))
        .collect::<Result<_>>()?;
    let mut transitions = Vec::with_capacity(m.down.len());
    for k in 0..m.down.len() {
        let kept = ottk::read(dir.join(&m.kept[k]))?
            .data()
            .iter()
            .map(|&x| x as usize)
            .collect();
        transitions.push(ResampleLevel {
            down: Arc::new(ottk::read_sparse(dir, &m.down[k])?),
            up: Arc::new(ottk::read_sparse(dir, &m.up[k])?),
            kept,
        });
    }
    let h = Hierarchy::from_parts(levels, transitions)?;
    if h.sizes() != m.sizes {
        return Err(Error::Format(format!("hierarchy sizes {:?} disagree with manifest {:?}", h.sizes(), m.sizes)));
    }
    Ok(h)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn planned_sizes_match_published_series() {
        assert_eq!(level_sizes(5023, 3), vec![5023, 1256, 314, 79]);
        assert_eq!(level_sizes(7306, 3), vec![7306, 1827, 457, 115]);
        assert_eq!(level_sizes(16, 1), vec![16, 4]);
        assert_eq!(level_sizes(642, 1), vec![642, 161]);
    }

    #[test]
    fn flat_grid_collapses_are_free() {
        let g = mesh::grid(6, 7);
        let w = Work::new(&g);
        let boundary: Vec<bool> = (0..g.n_vertices()).map(|v| w.is_boundary_vertex(v)).collect();
        let heap = w.all_candidates();
        assert!(!heap.is_empty());
        for Reverse(c) in heap {
            if !(boundary[c.lo] && boundary[c.hi]) {
                assert!(c.cost.abs() < 1e-12, "{c:?}");
            }
        }
    }

    #[test]
    fn icosphere_quarter() {
        let m = mesh::icosphere(3);
        let d = qem_decimate(&m, 161).unwrap();
        assert_eq!(d.coarse.n_vertices(), 161);
        let fine = m.flat_vertices();
        let sel = d.down.mul_dense(&fine, 3);
        assert_eq!(sel, d.coarse.flat_vertices());
        assert!(d.coarse.is_connected());
        assert_eq!(d.coarse.orientation_conflicts(), 0);
    }

    #[test]
    fn target_out_of_range() {
        let m = mesh::icosphere(1);
        assert!(qem_decimate(&m, 2).is_err());
        assert!(qem_decimate(&m, 42).is_err());
    }

    #[test]
    fn closed_surface_cannot_reach_three() {
        let m = mesh::icosphere(0);
        match qem_decimate(&m, 3) {
            Err(Error::Decimation { target: 3, achieved }) => assert!(achieved >= 4),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn barycentric_vertex_and_centroid() {
        let coarse = TriangleMesh::new(
            vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]],
            vec![[0, 1, 2]],
        )
        .unwrap();
        let fine = TriangleMesh::new(
            vec![[1.0, 0.0, 0.0], [1.0 / 3.0, 1.0 / 3.0, 0.0], [0.2, 0.2, 0.5], [2.0, 2.0, 0.0]],
            vec![[0, 1, 2], [1, 3, 2]],
        )
        .unwrap();
        let q = barycentric_upsample(&fine, &coarse).unwrap();
        assert_eq!(q.row(0).collect::<Vec<_>>(), vec![(1, 1.0)]);
        for (_, w) in q.row(1) {
            assert!((w - 1.0 / 3.0).abs() < 1e-12);
        }
        // Off-plane point projects inside.
        let r2: Vec<_> = q.row(2).collect();
        assert!((r2[0].1 - 0.6).abs() < 1e-12 && (r2[1].1 - 0.2).abs() < 1e-12);
        // Outside point clamps to the hypotenuse.
        let r3: Vec<_> = q.row(3).collect();
        assert_eq!(r3.len(), 2);
        assert!((r3.iter().map(|e| e.1).sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn hierarchy_roundtrip() {
        let h = build_hierarchy(&mesh::icosphere(2), 2, 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_hierarchy(&h, dir.path()).unwrap();
        let back = load_hierarchy(dir.path()).unwrap();
        assert_eq!(back.sizes(), h.sizes());
        for (a, b) in back.levels.iter().zip(&h.levels) {
            assert_eq!(a.lambda_max, b.lambda_max);
            assert_eq!(a.mesh, b.mesh);
            assert_eq!(a.scaled_laplacian, b.scaled_laplacian);
        }
        for (a, b) in back.transitions.iter().zip(&h.transitions) {
            assert_eq!(a.down, b.down);
            assert_eq!(a.up, b.up);
            assert_eq!(a.kept, b.kept);
        }
    }

    #[test]
    fn hierarchy_on_icosphere() {
        let h = build_hierarchy(&mesh::icosphere(3), 3, 0).unwrap();
        assert_eq!(h.sizes(), vec![642, 161, 41, 11]);
        for l in &h.levels {
            assert!(l.lambda_max > 0.0 && l.lambda_max <= 2.0 + 1e-9);
        }
    }
}
