//! Reverse-mode differentiation over a recorded operation list.
//!
//! A [`Tape`] owns every value produced during one forward pass. Values are
//! addressed by [`Var`] handles, which index into the tape in creation order,
//! so the record is topologically ordered by construction. The tape is
//! rebuilt for every forward pass and is confined to one thread; independent
//! work (batch items) runs on independent tapes whose gradients are summed in
//! a fixed order.
//!
//! ```
//! use ottalk::autodiff::Tape;
//! use ottalk::tensor::Tensor;
//!
//! let mut tape = Tape::new();
//! let x = tape.leaf(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
//! let y = tape.square(x).unwrap();
//! let loss = tape.sum(y).unwrap();
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0]);
//! ```

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::{matmul_nt_acc, matmul_tn_acc, SparseMatrix, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule for an operation defined outside this module. Receives the
/// upstream gradient and returns one gradient per input, in input order.
pub type CustomBackward = Box<dyn Fn(&Tensor) -> Result<Vec<Tensor>>>;

enum Op {
    Leaf,
    MatMul(Var, Var),
    SparseMatMul(Arc<SparseMatrix>, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Square(Var),
    Sqrt(Var),
    Sum(Var),
    Mean(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    Transpose(Var),
    Reshape(Var),
    Permute3(Var, [usize; 3]),
    AddRow(Var, Var),
    RepeatRows(Var),
    RowNorms(Var),
    Norm(Var),
    Custom(Vec<Var>, CustomBackward),
}

struct Node {
    value: Tensor,
    op: Op,
    tracked: bool,
}

/// Operation record for one forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar output with respect to every tracked value.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of `var`, or `None` if no tracked path reaches it.
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    /// Gradient of `var` with zeros substituted for unreached values.
    pub fn get_or_zeros(&self, var: Var, shape: &[usize]) -> Tensor {
        self.get(var).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

fn add_into(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(acc) => {
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        None => *slot = Some(g),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a grad-tracked leaf.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push_raw(value, Op::Leaf, true)
    }

    /// Records a constant (never receives a gradient).
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_raw(value, Op::Leaf, false)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    pub fn is_tracked(&self, var: Var) -> bool {
        self.nodes[var.0].tracked
    }

    fn push_raw(&mut self, value: Tensor, op: Op, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(name.to_string()));
        }
        let tracked = inputs.iter().any(|v| self.nodes[v.0].tracked);
        Ok(self.push_raw(value, op, tracked))
    }

    fn dims2(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        self.value(v)
            .dims2()
            .map_err(|_| Error::shape(op, format!("expected rank 2, got {:?}", self.shape(v))))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        self.push("matmul", value, Op::MatMul(a, b), &[a, b])
    }

    /// Product of a constant sparse matrix with a dense `k×n` value.
    pub fn sparse_matmul(&mut self, s: &Arc<SparseMatrix>, x: Var) -> Result<Var> {
        let (k, n) = self.dims2("sparse_matmul", x)?;
        if s.n_cols() != k {
            return Err(Error::shape(
                "sparse_matmul",
                format!("[{}x{}] . [{k}x{n}]", s.n_rows(), s.n_cols()),
            ));
        }
        let out = s.mul_dense(self.value(x).data(), n);
        let value = Tensor::new(vec![s.n_rows(), n], out)?;
        self.push("sparse_matmul", value, Op::SparseMatMul(Arc::clone(s), x), &[x])
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let va = self.value(a);
        let data = va
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(va.shape().to_vec(), data).expect("same shape")
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let va = self.value(a);
        Tensor::new(va.shape().to_vec(), va.data().iter().map(|&x| f(x)).collect())
            .expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let value = self.zip_with(a, b, |x, y| x + y);
        self.push("add", value, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let value = self.zip_with(a, b, |x, y| x - y);
        self.push("sub", value, Op::Sub(a, b), &[a, b])
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let value = self.zip_with(a, b, |x, y| x * y);
        self.push("mul", value, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let value = self.map(a, |x| c * x);
        self.push("scale", value, Op::Scale(a, c), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let value = self.map(a, |x| x.max(0.0));
        self.push("relu", value, Op::Relu(a), &[a])
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        let value = self.map(a, |x| x * x);
        self.push("square", value, Op::Square(a), &[a])
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        if self.value(a).data().iter().any(|&x| x < 0.0) {
            return Err(Error::NonFinite("sqrt of negative value".into()));
        }
        let value = self.map(a, f64::sqrt);
        self.push("sqrt", value, Op::Sqrt(a), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(a).sum());
        self.push("sum", value, Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        if v.is_empty() {
            return Err(Error::shape("mean", "empty tensor"));
        }
        let value = Tensor::scalar(v.sum() / v.len() as f64);
        self.push("mean", value, Op::Mean(a), &[a])
    }

    /// Concatenates rank-2 values side by side.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::shape("concat_cols", "no inputs"));
        }
        let rows = self.dims2("concat_cols", parts[0])?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.dims2("concat_cols", p)?;
            if r != rows {
                return Err(Error::shape("concat_cols", format!("row counts {rows} vs {r}")));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let value = Tensor::new(vec![rows, total], out)?;
        self.push("concat_cols", value, Op::ConcatCols(parts.to_vec()), parts)
    }

    /// Stacks rank-2 values vertically.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::shape("concat_rows", "no inputs"));
        }
        let cols = self.dims2("concat_rows", parts[0])?.1;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (r, c) = self.dims2("concat_rows", p)?;
            if c != cols {
                return Err(Error::shape("concat_rows", format!("column counts {cols} vs {c}")));
            }
            rows += r;
            out.extend_from_slice(self.value(p).data());
        }
        let value = Tensor::new(vec![rows, cols], out)?;
        self.push("concat_rows", value, Op::ConcatRows(parts.to_vec()), parts)
    }

    /// Rows `start..end` along the leading axis (any rank ≥ 1).
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.is_empty() || start > end || end > shape[0] {
            return Err(Error::shape(
                "slice_rows",
                format!("rows {start}..{end} of {shape:?}"),
            ));
        }
        let stride: usize = shape[1..].iter().product();
        let data = self.value(a).data()[start * stride..end * stride].to_vec();
        let mut out_shape = shape;
        out_shape[0] = end - start;
        let value = Tensor::new(out_shape, data)?;
        self.push("slice_rows", value, Op::SliceRows(a, start), &[a])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.dims2("transpose", a)?;
        let value = self.value(a).transpose()?;
        self.push("transpose", value, Op::Transpose(a), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshape(shape)?;
        self.push("reshape", value, Op::Reshape(a), &[a])
    }

    /// Axis permutation of a rank-3 value: output axis `i` is input axis `perm[i]`.
    pub fn permute3(&mut self, a: Var, perm: [usize; 3]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let mut sorted = perm;
        sorted.sort_unstable();
        if shape.len() != 3 || sorted != [0, 1, 2] {
            return Err(Error::shape("permute3", format!("{shape:?} by {perm:?}")));
        }
        let value = permute3_values(self.value(a), perm);
        self.push("permute3", value, Op::Permute3(a, perm), &[a])
    }

    /// Adds a `1×c` (or length-`c`) row to every row of an `r×c` value.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (r, c) = self.dims2("add_row", a)?;
        if self.value(row).len() != c {
            return Err(Error::shape(
                "add_row",
                format!("[{r}x{c}] + row of {:?}", self.shape(row)),
            ));
        }
        let mut out = self.value(a).clone();
        let rv = self.value(row).data().to_vec();
        for chunk in out.data_mut().chunks_mut(c) {
            for (o, b) in chunk.iter_mut().zip(&rv) {
                *o += b;
            }
        }
        self.push("add_row", out, Op::AddRow(a, row), &[a, row])
    }

    /// Tiles a `1×c` value into `n×c`.
    pub fn repeat_rows(&mut self, a: Var, n: usize) -> Result<Var> {
        let (r, c) = self.dims2("repeat_rows", a)?;
        if r != 1 {
            return Err(Error::shape("repeat_rows", format!("expected one row, got {r}")));
        }
        let row = self.value(a).data().to_vec();
        let value = Tensor::new(vec![n, c], row.repeat(n))?;
        self.push("repeat_rows", value, Op::RepeatRows(a), &[a])
    }

    /// Euclidean norm of every row of an `r×c` value, giving length `r`.
    pub fn row_norms(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.dims2("row_norms", a)?;
        let data = self
            .value(a)
            .data()
            .chunks(c.max(1))
            .take(r)
            .map(|row| row.iter().map(|x| x * x).sum::<f64>().sqrt())
            .collect();
        let value = Tensor::new(vec![r], data)?;
        self.push("row_norms", value, Op::RowNorms(a), &[a])
    }

    /// Euclidean norm of all elements.
    pub fn norm(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).data().iter().map(|x| x * x).sum::<f64>().sqrt();
        self.push("norm", Tensor::scalar(n), Op::Norm(a), &[a])
    }

    /// Records a value computed outside the tape together with its backward
    /// rule.
    pub fn custom(
        &mut self,
        name: &'static str,
        inputs: &[Var],
        value: Tensor,
        backward: CustomBackward,
    ) -> Result<Var> {
        self.push(name, value, Op::Custom(inputs.to_vec(), backward), inputs)
    }

    /// Propagates gradients from a scalar output to every tracked value.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let out = self.value(output);
        if out.len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("output must be scalar, got shape {:?}", out.shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Tensor::full(out.shape(), 1.0));

        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.tracked {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, node, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn send(&self, grads: &mut [Option<Tensor>], to: Var, from: usize, g: Tensor) {
        assert!(to.0 < from, "record is not topologically ordered");
        if self.nodes[to.0].tracked {
            add_into(&mut grads[to.0], g);
        }
    }

    fn propagate(
        &self,
        idx: usize,
        node: &Node,
        g: &Tensor,
        grads: &mut [Option<Tensor>],
    ) -> Result<()> {
        let like = |v: Var, data: Vec<f64>| {
            Tensor::new(self.shape(v).to_vec(), data).expect("gradient shape")
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.value(*a).dims2()?;
                let n = self.value(*b).dims2()?.1;
                if self.is_tracked(*a) {
                    let mut ga = vec![0.0; m * k];
                    matmul_nt_acc(g.data(), self.value(*b).data(), &mut ga, m, k, n);
                    self.send(grads, *a, idx, like(*a, ga));
                }
                if self.is_tracked(*b) {
                    let mut gb = vec![0.0; k * n];
                    matmul_tn_acc(self.value(*a).data(), g.data(), &mut gb, m, k, n);
                    self.send(grads, *b, idx, like(*b, gb));
                }
            }
            Op::SparseMatMul(s, x) => {
                let n = self.value(*x).dims2()?.1;
                let mut gx = vec![0.0; s.n_cols() * n];
                s.mul_dense_transposed_acc(g.data(), n, &mut gx);
                self.send(grads, *x, idx, like(*x, gx));
            }
            Op::Add(a, b) => {
                self.send(grads, *a, idx, g.clone());
                self.send(grads, *b, idx, g.clone());
            }
            Op::Sub(a, b) => {
                self.send(grads, *a, idx, g.clone());
                let neg = g.data().iter().map(|x| -x).collect();
                self.send(grads, *b, idx, like(*b, neg));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                let ga = g.data().iter().zip(vb).map(|(g, y)| g * y).collect();
                let gb = g.data().iter().zip(va).map(|(g, x)| g * x).collect();
                self.send(grads, *a, idx, like(*a, ga));
                self.send(grads, *b, idx, like(*b, gb));
            }
            Op::Scale(a, c) => {
                let ga = g.data().iter().map(|x| c * x).collect();
                self.send(grads, *a, idx, like(*a, ga));
            }
            Op::Relu(a) => {
                let va = self.value(*a).data();
                let ga = g
                    .data()
                    .iter()
                    .zip(va)
                    .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                    .collect();
                self.send(grads, *a, idx, like(*a, ga));
            }
            Op::Square(a) => {
                let va = self.value(*a).data();
                let ga = g.data().iter().zip(va).map(|(g, x)| 2.0 * x * g).collect();
                self.send(grads, *a, idx, like(*a, ga));
            }
            Op::Sqrt(a) => {
                let vo = node.value.data();
                let ga = g
                    .data()
                    .iter()
                    .zip(vo)
                    .map(|(g, &y)| if y > 0.0 { 0.5 * g / y } else { 0.0 })
                    .collect();
                self.send(grads, *a, idx, like(*a, ga));
            }
            Op::Sum(a) => {
                let gv = g.data()[0];
                self.send(grads, *a, idx, Tensor::full(self.shape(*a), gv));
            }
            Op::Mean(a) => {
                let n = self.value(*a).len() as f64;
                let gv = g.data()[0] / n;
                self.send(grads, *a, idx, Tensor::full(self.shape(*a), gv));
            }
            Op::ConcatCols(parts) => {
                let (rows, total) = node.value.dims2()?;
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).dims2()?.1;
                    if self.is_tracked(p) {
                        let mut gp = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            gp.extend_from_slice(&g.data()[r * total + offset..r * total + offset + w]);
                        }
                        self.send(grads, p, idx, like(p, gp));
                    }
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    if self.is_tracked(p) {
                        self.send(grads, p, idx, like(p, g.data()[offset..offset + n].to_vec()));
                    }
                    offset += n;
                }
            }
            Op::SliceRows(a, start) => {
                let shape = self.shape(*a);
                let stride: usize = shape[1..].iter().product();
                let mut ga = vec![0.0; self.value(*a).len()];
                ga[start * stride..start * stride + g.len()].copy_from_slice(g.data());
                self.send(grads, *a, idx, like(*a, ga));
            }
            Op::Transpose(a) => {
                let ga = g.transpose()?.into_data();
                self.send(grads, *a, idx, like(*a, ga));
            }
            Op::Reshape(a) => {
                self.send(grads, *a, idx, like(*a, g.data().to_vec()));
            }
            Op::Permute3(a, perm) => {
                let mut inverse = [0usize; 3];
                for (i, &p) in perm.iter().enumerate() {
                    inverse[p] = i;
                }
                let ga = permute3_values(g, inverse).into_data();
                self.send(grads, *a, idx, like(*a, ga));
            }
            Op::AddRow(a, row) => {
                self.send(grads, *a, idx, g.clone());
                if self.is_tracked(*row) {
                    let c = self.value(*row).len();
                    let mut gr = vec![0.0; c];
                    for chunk in g.data().chunks(c) {
                        for (o, x) in gr.iter_mut().zip(chunk) {
                            *o += x;
                        }
                    }
                    self.send(grads, *row, idx, like(*row, gr));
                }
            }
            Op::RepeatRows(a) => {
                let c = self.value(*a).len();
                let mut ga = vec![0.0; c];
                for chunk in g.data().chunks(c) {
                    for (o, x) in ga.iter_mut().zip(chunk) {
                        *o += x;
                    }
                }
                self.send(grads, *a, idx, like(*a, ga));
            }
            Op::RowNorms(a) => {
                let (r, c) = self.value(*a).dims2()?;
                let va = self.value(*a).data();
                let norms = node.value.data();
                let mut ga = vec![0.0; r * c];
                for i in 0..r {
                    if norms[i] > 0.0 {
                        let s = g.data()[i] / norms[i];
                        for j in 0..c {
                            ga[i * c + j] = s * va[i * c + j];
                        }
                    }
                }
                self.send(grads, *a, idx, like(*a, ga));
            }
            Op::Norm(a) => {
                let n = node.value.data()[0];
                let s = if n > 0.0 { g.data()[0] / n } else { 0.0 };
                let ga = self.value(*a).data().iter().map(|x| s * x).collect();
                self.send(grads, *a, idx, like(*a, ga));
            }
            Op::Custom(inputs, backward) => {
                let gs = backward(g)?;
                if gs.len() != inputs.len() {
                    return Err(Error::shape(
                        "custom backward",
                        format!("{} gradients for {} inputs", gs.len(), inputs.len()),
                    ));
                }
                for (&v, gv) in inputs.iter().zip(gs) {
                    if gv.shape() != self.shape(v) {
                        return Err(Error::shape(
                            "custom backward",
                            format!("gradient {:?} for input {:?}", gv.shape(), self.shape(v)),
                        ));
                    }
                    self.send(grads, v, idx, gv);
                }
            }
        }
        Ok(())
    }
}

fn permute3_values(t: &Tensor, perm: [usize; 3]) -> Tensor {
    let s = t.shape();
    let out_shape = [s[perm[0]], s[perm[1]], s[perm[2]]];
    let in_strides = [s[1] * s[2], s[2], 1];
    let strides = [in_strides[perm[0]], in_strides[perm[1]], in_strides[perm[2]]];
    let mut out = Vec::with_capacity(t.len());
    let d = t.data();
    for i in 0..out_shape[0] {
        for j in 0..out_shape[1] {
            let base = i * strides[0] + j * strides[1];
            for k in 0..out_shape[2] {
                out.push(d[base + k * strides[2]]);
            }
        }
    }
    Tensor::new(out_shape.to_vec(), out).expect("permuted shape")
}
