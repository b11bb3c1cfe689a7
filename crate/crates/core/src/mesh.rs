//! Triangle meshes: validation, OBJ I/O, graph operators, and per-face
//! geometry.

use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::SparseMatrix;

pub type Vec3 = [f64; 3];

/// Faces whose area falls below this are flagged degenerate.
pub const DEGENERATE_AREA: f64 = 1e-12;

#[inline]
pub fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

#[inline]
pub fn add(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

#[inline]
pub fn scale(a: Vec3, s: f64) -> Vec3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

#[inline]
pub fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[inline]
pub fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

#[inline]
pub fn norm(a: Vec3) -> f64 {
    dot(a, a).sqrt()
}

/// Vertex positions plus counter-clockwise triangles.
#[derive(Debug, Clone, PartialEq)]
pub struct TriangleMesh {
    vertices: Vec<Vec3>,
    faces: Vec<[usize; 3]>,
}

impl TriangleMesh {
    /// Validates index ranges and repeated corners. Inconsistent orientation
    /// across shared edges is logged, not rejected.
    pub fn new(vertices: Vec<Vec3>, faces: Vec<[usize; 3]>) -> Result<Self> {
        let n = vertices.len();
        for (fi, f) in faces.iter().enumerate() {
            if f.iter().any(|&v| v >= n) {
                return Err(Error::Mesh(format!("face {fi} references a vertex outside 0..{n}")));
            }
            if f[0] == f[1] || f[1] == f[2] || f[0] == f[2] {
                return Err(Error::Mesh(format!("face {fi} repeats a vertex")));
            }
        }
        if vertices.iter().flatten().any(|c| !c.is_finite()) {
            return Err(Error::Mesh("non-finite vertex coordinate".into()));
        }
        let mesh = Self { vertices, faces };
        let bad = mesh.orientation_conflicts();
        if bad > 0 {
            log::warn!("{bad} edges are traversed in the same direction by two faces");
        }
        Ok(mesh)
    }

    pub fn vertices(&self) -> &[Vec3] {
        &self.vertices
    }

    pub fn faces(&self) -> &[[usize; 3]] {
        &self.faces
    }

    pub fn n_vertices(&self) -> usize {
        self.vertices.len()
    }

    pub fn n_faces(&self) -> usize {
        self.faces.len()
    }

    /// Same topology, new positions.
    pub fn with_vertices(&self, vertices: Vec<Vec3>) -> Result<Self> {
        if vertices.len() != self.vertices.len() {
            return Err(Error::Topology {
                expected: self.vertices.len(),
                got: vertices.len(),
            });
        }
        Ok(Self {
            vertices,
            faces: self.faces.clone(),
        })
    }

    /// Vertex positions flattened row-major (`N·3`).
    pub fn flat_vertices(&self) -> Vec<f64> {
        self.vertices.iter().flatten().copied().collect()
    }

    pub fn same_topology(&self, other: &TriangleMesh) -> bool {
        self.vertices.len() == other.vertices.len() && self.faces == other.faces
    }

    /// Number of directed edges used by more than one face.
    pub fn orientation_conflicts(&self) -> usize {
        let mut seen: HashMap<(usize, usize), usize> = HashMap::new();
        for f in &self.faces {
            for k in 0..3 {
                *seen.entry((f[k], f[(k + 1) % 3])).or_default() += 1;
            }
        }
        seen.values().filter(|&&c| c > 1).count()
    }

    /// Undirected edges `(i, j)` with `i < j`, sorted.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let set: BTreeSet<(usize, usize)> = self
            .faces
            .iter()
            .flat_map(|f| (0..3).map(move |k| (f[k], f[(k + 1) % 3])))
            .map(|(a, b)| (a.min(b), a.max(b)))
            .collect();
        set.into_iter().collect()
    }

    pub fn mean_edge_length(&self) -> f64 {
        let edges = self.edges();
        if edges.is_empty() {
            return 0.0;
        }
        edges
            .iter()
            .map(|&(a, b)| norm(sub(self.vertices[a], self.vertices[b])))
            .sum::<f64>()
            / edges.len() as f64
    }

    pub fn centroid(&self) -> Vec3 {
        let n = self.vertices.len().max(1) as f64;
        let s = self.vertices.iter().fold([0.0; 3], |acc, &v| add(acc, v));
        scale(s, 1.0 / n)
    }

    /// True when every vertex is reachable from vertex 0 along edges.
    pub fn is_connected(&self) -> bool {
        let n = self.vertices.len();
        if n == 0 {
            return true;
        }
        let mut parent: Vec<usize> = (0..n).collect();
        fn find(p: &mut [usize], mut x: usize) -> usize {
            while p[x] != x {
                p[x] = p[p[x]];
                x = p[x];
            }
            x
        }
        for f in &self.faces {
            for k in 0..3 {
                let (a, b) = (find(&mut parent, f[k]), find(&mut parent, f[(k + 1) % 3]));
                parent[a] = b;
            }
        }
        let root = find(&mut parent, 0);
        (0..n).all(|v| find(&mut parent, v) == root)
    }

    pub fn degrees(&self) -> Vec<usize> {
        let mut deg = vec![0; self.vertices.len()];
        for (a, b) in self.edges() {
            deg[a] += 1;
            deg[b] += 1;
        }
        deg
    }
}

/// Symmetric binary adjacency `W` with zero diagonal.
pub fn adjacency(mesh: &TriangleMesh) -> SparseMatrix {
    let n = mesh.n_vertices();
    let triplets: Vec<(usize, usize, f64)> = mesh
        .edges()
        .into_iter()
        .flat_map(|(a, b)| [(a, b, 1.0), (b, a, 1.0)])
        .collect();
    SparseMatrix::from_triplets(n, n, &triplets).expect("edge indices validated by mesh")
}

/// `L = D − W`.
pub fn combinatorial_laplacian(mesh: &TriangleMesh) -> SparseMatrix {
    let n = mesh.n_vertices();
    let deg = mesh.degrees();
    let mut triplets: Vec<(usize, usize, f64)> = mesh
        .edges()
        .into_iter()
        .flat_map(|(a, b)| [(a, b, -1.0), (b, a, -1.0)])
        .collect();
    triplets.extend((0..n).map(|i| (i, i, deg[i] as f64)));
    SparseMatrix::from_triplets(n, n, &triplets).expect("edge indices validated by mesh")
}

/// `L' = I − D^{-1/2} W D^{-1/2}`. Isolated vertices are an error.
pub fn normalized_laplacian(mesh: &TriangleMesh) -> Result<SparseMatrix> {
    let n = mesh.n_vertices();
    let deg = mesh.degrees();
    if let Some(v) = deg.iter().position(|&d| d == 0) {
        return Err(Error::Mesh(format!("vertex {v} is isolated")));
    }
    let inv_sqrt: Vec<f64> = deg.iter().map(|&d| 1.0 / (d as f64).sqrt()).collect();
    let mut triplets: Vec<(usize, usize, f64)> = mesh
        .edges()
        .into_iter()
        .flat_map(|(a, b)| {
            let w = -inv_sqrt[a] * inv_sqrt[b];
            [(a, b, w), (b, a, w)]
        })
        .collect();
    triplets.extend((0..n).map(|i| (i, i, 1.0)));
    SparseMatrix::from_triplets(n, n, &triplets)
}

/// Per-face area, barycenter and unit normal.
#[derive(Debug, Clone, PartialEq)]
pub struct FaceGeometry {
    pub areas: Vec<f64>,
    pub barycenters: Vec<Vec3>,
    /// Zero vector for degenerate faces.
    pub normals: Vec<Vec3>,
    pub degenerate: Vec<bool>,
}

pub fn face_geometry(mesh: &TriangleMesh) -> FaceGeometry {
    face_geometry_of(mesh.vertices(), mesh.faces())
}

pub(crate) fn face_geometry_of(vertices: &[Vec3], faces: &[[usize; 3]]) -> FaceGeometry {
    let m = faces.len();
    let mut g = FaceGeometry {
        areas: Vec::with_capacity(m),
        barycenters: Vec::with_capacity(m),
        normals: Vec::with_capacity(m),
        degenerate: Vec::with_capacity(m),
    };
    for f in faces {
        let (a, b, c) = (vertices[f[0]], vertices[f[1]], vertices[f[2]]);
        let cr = cross(sub(b, a), sub(c, a));
        let len = norm(cr);
        let area = 0.5 * len;
        let degenerate = area < DEGENERATE_AREA;
        g.areas.push(area);
        g.barycenters.push(scale(add(add(a, b), c), 1.0 / 3.0));
        g.normals.push(if degenerate { [0.0; 3] } else { scale(cr, 1.0 / len) });
        g.degenerate.push(degenerate);
    }
    g
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        msg: msg.into(),
    }
}

/// Parses the `v`/`f` subset of Wavefront OBJ with 1-based indices.
pub fn parse_obj(text: &str, path: &Path) -> Result<TriangleMesh> {
    let mut vertices = Vec::new();
    let mut faces = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let lineno = i + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let mut tok = line.split_whitespace();
        match tok.next() {
            Some("v") => {
                let coords: Vec<f64> = tok
                    .map(|t| t.parse::<f64>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|e| parse_err(path, lineno, format!("bad vertex coordinate: {e}")))?;
                if coords.len() != 3 {
                    return Err(parse_err(path, lineno, "vertex needs exactly 3 coordinates"));
                }
                vertices.push([coords[0], coords[1], coords[2]]);
            }
            Some("f") => {
                let idx: Vec<i64> = tok
                    .map(|t| t.parse::<i64>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|e| parse_err(path, lineno, format!("bad face index: {e}")))?;
                if idx.len() != 3 {
                    return Err(parse_err(
                        path,
                        lineno,
                        format!("only triangles are supported, face has {} corners", idx.len()),
                    ));
                }
                let mut face = [0usize; 3];
                for (k, &v) in idx.iter().enumerate() {
                    if v < 1 {
                        return Err(parse_err(path, lineno, format!("face index {v} (indices are 1-based)")));
                    }
                    face[k] = (v - 1) as usize;
                }
                faces.push(face);
            }
            Some(other) => {
                return Err(parse_err(path, lineno, format!("unsupported directive `{other}`")));
            }
            None => {}
        }
    }
    let n = vertices.len();
    if let Some(f) = faces.iter().find(|f| f.iter().any(|&v| v >= n)) {
        return Err(Error::Mesh(format!(
            "{}: face {:?} references a vertex beyond {n}",
            path.display(),
            f.map(|v| v + 1)
        )));
    }
    TriangleMesh::new(vertices, faces)
}

pub fn load_obj(path: impl AsRef<Path>) -> Result<TriangleMesh> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    parse_obj(&text, path)
}

pub fn obj_string(mesh: &TriangleMesh) -> String {
    let mut s = String::with_capacity(40 * (mesh.n_vertices() + mesh.n_faces()));
    for v in &mesh.vertices {
        let _ = writeln!(s, "v {} {} {}", v[0], v[1], v[2]);
    }
    for f in &mesh.faces {
        let _ = writeln!(s, "f {} {} {}", f[0] + 1, f[1] + 1, f[2] + 1);
    }
    s
}

pub fn save_obj(mesh: &TriangleMesh, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, obj_string(mesh))?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskLabel {
    Lip,
    Face,
    Head,
}

impl MaskLabel {
    pub fn as_str(self) -> &'static str {
        match self {
            MaskLabel::Lip => "lip",
            MaskLabel::Face => "face",
            MaskLabel::Head => "head",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "lip" => Some(MaskLabel::Lip),
            "face" => Some(MaskLabel::Face),
            "head" => Some(MaskLabel::Head),
            _ => None,
        }
    }
}

/// Sorted unique vertex indices for one facial region.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VertexMask {
    pub label: MaskLabel,
    indices: Vec<usize>,
}

impl VertexMask {
    pub fn new(label: MaskLabel, mut indices: Vec<usize>, n_vertices: usize) -> Result<Self> {
        indices.sort_unstable();
        indices.dedup();
        if indices.is_empty() {
            return Err(Error::Mesh(format!("{} mask is empty", label.as_str())));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= n_vertices) {
            return Err(Error::Mesh(format!(
                "{} mask index {bad} outside 0..{n_vertices}",
                label.as_str()
            )));
        }
        Ok(Self { label, indices })
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("# mask {}\n", self.label.as_str());
        for i in &self.indices {
            let _ = writeln!(s, "{i}");
        }
        s
    }

    pub fn parse(text: &str, n_vertices: usize, path: &Path) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        let label = match lines.next() {
            Some((_, header)) => {
                let rest = header
                    .trim()
                    .strip_prefix("# mask")
                    .ok_or_else(|| parse_err(path, 1, "expected header `# mask <label>`"))?;
                MaskLabel::parse(rest.trim())
                    .ok_or_else(|| parse_err(path, 1, format!("unknown mask label `{}`", rest.trim())))?
            }
            None => return Err(parse_err(path, 1, "empty mask file")),
        };
        let mut indices = Vec::new();
        for (i, line) in lines {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            indices.push(
                line.parse::<usize>()
                    .map_err(|e| parse_err(path, i + 1, format!("bad index: {e}")))?,
            );
        }
        Self::new(label, indices, n_vertices)
    }

    pub fn load(path: impl AsRef<Path>, n_vertices: usize) -> Result<Self> {
        let path = path.as_ref();
        Self::parse(&fs::read_to_string(path)?, n_vertices, path)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_text())?;
        Ok(())
    }
}

/// Unit icosphere: an icosahedron with `subdivisions` rounds of midpoint
/// subdivision projected to the sphere. `10·4^s + 2` vertices.
pub fn icosphere(subdivisions: usize) -> TriangleMesh {
    let t = (1.0 + 5f64.sqrt()) / 2.0;
    let mut vertices: Vec<Vec3> = [
        [-1.0, t, 0.0],
        [1.0, t, 0.0],
        [-1.0, -t, 0.0],
        [1.0, -t, 0.0],
        [0.0, -1.0, t],
        [0.0, 1.0, t],
        [0.0, -1.0, -t],
        [0.0, 1.0, -t],
        [t, 0.0, -1.0],
        [t, 0.0, 1.0],
        [-t, 0.0, -1.0],
        [-t, 0.0, 1.0],
    ]
    .iter()
    .map(|&v| scale(v, 1.0 / norm(v)))
    .collect();
    let mut faces: Vec<[usize; 3]> = vec![
        [0, 11, 5],
        [0, 5, 1],
        [0, 1, 7],
        [0, 7, 10],
        [0, 10, 11],
        [1, 5, 9],
        [5, 11, 4],
        [11, 10, 2],
        [10, 7, 6],
        [7, 1, 8],
        [3, 9, 4],
        [3, 4, 2],
        [3, 2, 6],
        [3, 6, 8],
        [3, 8, 9],
        [4, 9, 5],
        [2, 4, 11],
        [6, 2, 10],
        [8, 6, 7],
        [9, 8, 1],
    ];
    for _ in 0..subdivisions {
        let mut mid: HashMap<(usize, usize), usize> = HashMap::new();
        let mut next = Vec::with_capacity(faces.len() * 4);
        let mut midpoint = |a: usize, b: usize, vs: &mut Vec<Vec3>| -> usize {
            let key = (a.min(b), a.max(b));
            *mid.entry(key).or_insert_with(|| {
                let m = scale(add(vs[a], vs[b]), 0.5);
                vs.push(scale(m, 1.0 / norm(m)));
                vs.len() - 1
            })
        };
        for f in &faces {
            let ab = midpoint(f[0], f[1], &mut vertices);
            let bc = midpoint(f[1], f[2], &mut vertices);
            let ca = midpoint(f[2], f[0], &mut vertices);
            next.push([f[0], ab, ca]);
            next.push([f[1], bc, ab]);
            next.push([f[2], ca, bc]);
            next.push([ab, bc, ca]);
        }
        faces = next;
    }
    TriangleMesh::new(vertices, faces).expect("icosphere is valid")
}

/// Regular `rows×cols` grid on the unit square, z = 0, two CCW triangles
/// per cell.
pub fn grid(rows: usize, cols: usize) -> TriangleMesh {
    assert!(rows >= 2 && cols >= 2, "grid needs at least 2x2 vertices");
    let mut vertices = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            vertices.push([c as f64 / (cols - 1) as f64, r as f64 / (rows - 1) as f64, 0.0]);
        }
    }
    let mut faces = Vec::with_capacity(2 * (rows - 1) * (cols - 1));
    for r in 0..rows - 1 {
        for c in 0..cols - 1 {
            let v00 = r * cols + c;
            let v01 = v00 + 1;
            let v10 = v00 + cols;
            let v11 = v10 + 1;
            faces.push([v00, v01, v11]);
            faces.push([v00, v11, v10]);
        }
    }
    TriangleMesh::new(vertices, faces).expect("grid is valid")
}

/// A curved open surface with exactly `n ≥ 4` vertices: a near-square grid
/// lifted onto a smooth height field, with extra vertices inserted at face
/// centroids until the count is reached.
pub fn surface_with_vertex_count(n: usize) -> Result<TriangleMesh> {
    if n < 4 {
        return Err(Error::invalid("surface needs at least 4 vertices"));
    }
    let mut side = (n as f64).sqrt().floor() as usize;
    while side * side > n {
        side -= 1;
    }
    let side = side.max(2);
    let (rows, cols) = if side * (side + 1) <= n { (side, side + 1) } else { (side, side) };
    let base = grid(rows, cols);
    let mut vertices: Vec<Vec3> = base
        .vertices()
        .iter()
        .map(|&[x, y, _]| {
            let z = 0.35 * ((2.5 * x).sin() * (1.7 * y + 0.3).cos())
                + 0.2 * ((x - 0.5).powi(2) + (y - 0.5).powi(2));
            [x, y, z]
        })
        .collect();
    let mut faces = base.faces().to_vec();
    let extra = n - vertices.len();
    // Split every k-th face at its centroid; spreading the splits keeps the
    // inserted vertices apart.
    let stride = (faces.len() / extra.max(1)).max(1);
    for e in 0..extra {
        let fi = (e * stride) % faces.len();
        let f = faces[fi];
        let c = scale(add(add(vertices[f[0]], vertices[f[1]]), vertices[f[2]]), 1.0 / 3.0);
        vertices.push(c);
        let v = vertices.len() - 1;
        faces[fi] = [f[0], f[1], v];
        faces.push([f[1], f[2], v]);
        faces.push([f[2], f[0], v]);
    }
    TriangleMesh::new(vertices, faces)
}
