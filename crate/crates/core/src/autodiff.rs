//! Tape-based reverse-mode automatic differentiation over dense `f64`
//! arrays.
//!
//! Every operation appends a node to a [`Tape`] and returns a [`Var`] handle.
//! [`Tape::backward`] walks the tape in reverse from a scalar root and adds
//! the resulting gradients into the persistent gradient buffer of each leaf
//! that was created with `requires_grad = true`. Calling `backward` twice
//! without [`Tape::zero_grad`] accumulates; nothing is reset implicitly.
//!
//! Binary elementwise ops broadcast the smaller operand when its shape is a
//! suffix of the larger one (leading unit axes ignored) or when it holds a
//! single value.

use crate::error::{Error, Result};
use crate::mask::AttentionMask;
use crate::tensor::Tensor;

/// Additive penalty applied to masked attention scores before the row
/// softmax. Masked probabilities are then set to exactly zero.
pub const MASK_PENALTY: f64 = 1e30;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Transpose(Var),
    Sigmoid(Var),
    Tanh(Var),
    Ln(Var),
    Exp(Var),
    Abs(Var),
    Sqrt(Var),
    SumAxis { src: Var, axis: usize },
    SumAll(Var),
    Reshape(Var),
    ConcatLast(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceLast { src: Var, start: usize },
    SliceRows { src: Var, start: usize },
    Softmax(Var),
    LayerNorm { src: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    CosineRows { a: Var, b: Var },
    KlRows { p: Var, q: Var },
    IndexRows { table: Var, indices: Vec<usize> },
    OuterAddRows { a: Var, b: Var },
    ShiftRows { src: Var, shift: usize },
    /// Scalar-valued fused op whose local gradient was computed in forward.
    ScalarFused { src: Var, local_grad: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Differentiation record. Single-threaded; build a new tape per step.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    leaf_grads: Vec<Option<Tensor>>,
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

    /// Adds a leaf. Only leaves with `requires_grad` receive gradients.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf. `None` if the node is not a
    /// gradient-requiring leaf or no backward pass has reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.leaf_grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn zero_grad(&mut self) {
        self.leaf_grads.iter_mut().for_each(|g| *g = None);
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    // ---- elementwise ----------------------------------------------------

    fn broadcast_shape(&self, op: &'static str, a: Var, b: Var) -> Result<Vec<usize>> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sa == sb {
            return Ok(sa.to_vec());
        }
        let (big, small) = if sa.len() >= sb.len() && self.value(a).numel() >= self.value(b).numel() {
            (sa, sb)
        } else {
            (sb, sa)
        };
        let small_numel: usize = small.iter().product();
        let trimmed: Vec<usize> = small.iter().copied().skip_while(|&d| d == 1).collect();
        if small_numel == 1 || big.ends_with(&trimmed) {
            Ok(big.to_vec())
        } else {
            Err(Error::shape(op, sa, sb))
        }
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let shape = self.broadcast_shape(name, a, b)?;
        let (da, db) = (self.data(a), self.data(b));
        let n: usize = shape.iter().product();
        let (na, nb) = (da.len(), db.len());
        let out: Vec<f64> = if na == n && nb == n {
            da.iter().zip(db).map(|(&x, &y)| f(x, y)).collect()
        } else {
            (0..n).map(|i| f(da[i % na], db[i % nb])).collect()
        };
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(&shape, out)?, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let t = self.value(a);
        let out: Vec<f64> = t.data().iter().map(|&x| f(x)).collect();
        let shape = t.shape().to_vec();
        let rg = self.rg(&[a]);
        self.push(Tensor::new(&shape, out).unwrap(), op, rg)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |x| x * c, Op::Scale(a, c))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |x| x + c, Op::AddScalar(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.unary(a, f64::ln, Op::Ln(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, f64::abs, Op::Abs(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, f64::sqrt, Op::Sqrt(a))
    }

    /// `x * sigmoid(x)`
    pub fn silu(&mut self, a: Var) -> Result<Var> {
        let s = self.sigmoid(a);
        self.mul(a, s)
    }

    /// `ln(sigmoid(x))`
    pub fn log_sigmoid(&mut self, a: Var) -> Var {
        let s = self.sigmoid(a);
        self.ln(s)
    }

    // ---- linear algebra -------------------------------------------------

    fn dims2(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        match *self.shape(v) {
            [m, n] => Ok((m, n)),
            ref s => Err(Error::shape(op, s, &[0, 0])),
        }
    }

    /// `[m, k] x [k, n] -> [m, n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2("matmul", a)?;
        let (k2, n) = self.dims2("matmul", b)?;
        if k != k2 {
            return Err(Error::shape("matmul", self.shape(a), self.shape(b)));
        }
        let out = matmul_nn(self.data(a), self.data(b), m, k, n);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::MatMul(a, b), rg))
    }

    /// `[m, k] x [n, k]^T -> [m, n]`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2("matmul_nt", a)?;
        let (n, k2) = self.dims2("matmul_nt", b)?;
        if k != k2 {
            return Err(Error::shape("matmul_nt", self.shape(a), self.shape(b)));
        }
        let out = matmul_nt(self.data(a), self.data(b), m, k, n);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::MatMulNt(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.dims2("transpose", a)?;
        let out = transpose(self.data(a), m, n);
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::new(&[n, m], out)?, Op::Transpose(a), rg))
    }

    /// `x W + b` for `x: [T, in]`, `w: [in, out]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add(y, b),
            None => Ok(y),
        }
    }

    // ---- reductions and layout -----------------------------------------

    /// Sums out `axis`. A rank-1 input reduces to shape `[1]`.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::InvalidArgument(format!(
                "axis {axis} out of range for shape {shape:?}"
            )));
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let src = self.data(a);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let base = (o * len + l) * inner;
                for i in 0..inner {
                    out[o * inner + i] += src[base + i];
                }
            }
        }
        let mut out_shape: Vec<usize> = shape[..axis].to_vec();
        out_shape.extend_from_slice(&shape[axis + 1..]);
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::new(&out_shape, out)?, Op::SumAxis { src: a, axis }, rg))
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let len = *self.shape(a).get(axis).unwrap_or(&1);
        let s = self.sum_axis(a, axis)?;
        Ok(self.scale(s, 1.0 / len as f64))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: f64 = self.data(a).iter().sum();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::SumAll(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).numel();
        let s = self.sum(a);
        self.scale(s, 1.0 / n as f64)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshape(shape)?;
        let rg = self.rg(&[a]);
        Ok(self.push(t, Op::Reshape(a), rg))
    }

    /// Concatenates 2-D tensors with equal row counts along the last axis.
    pub fn concat_last(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat of nothing".into()))?;
        let rows = self.value(first).rows();
        let mut total = 0;
        for &p in parts {
            if self.value(p).rows() != rows || self.shape(p).len() != 2 {
                return Err(Error::shape("concat_last", self.shape(first), self.shape(p)));
            }
            total += self.value(p).cols();
        }
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(r));
            }
        }
        let rg = self.rg(parts);
        Ok(self.push(
            Tensor::new(&[rows, total], out)?,
            Op::ConcatLast(parts.to_vec()),
            rg,
        ))
    }

    /// Stacks 2-D tensors with equal column counts along the first axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat of nothing".into()))?;
        let cols = self.value(first).cols();
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let t = self.value(p);
            if t.cols() != cols || t.rank() != 2 {
                return Err(Error::shape("concat_rows", self.shape(first), t.shape()));
            }
            rows += t.rows();
            out.extend_from_slice(t.data());
        }
        let rg = self.rg(parts);
        Ok(self.push(
            Tensor::new(&[rows, cols], out)?,
            Op::ConcatRows(parts.to_vec()),
            rg,
        ))
    }

    /// Columns `start..start + len` of a 2-D tensor.
    pub fn slice_last(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.dims2("slice_last", a)?;
        if len == 0 || start + len > n {
            return Err(Error::InvalidArgument(format!(
                "column slice {start}..{} of width {n}",
                start + len
            )));
        }
        let src = self.data(a);
        let mut out = Vec::with_capacity(m * len);
        for r in 0..m {
            out.extend_from_slice(&src[r * n + start..r * n + start + len]);
        }
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::new(&[m, len], out)?, Op::SliceLast { src: a, start }, rg))
    }

    /// Rows `start..start + len` of a 2-D tensor.
    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.dims2("slice_rows", a)?;
        if len == 0 || start + len > m {
            return Err(Error::InvalidArgument(format!(
                "row slice {start}..{} of height {m}",
                start + len
            )));
        }
        let out = self.data(a)[start * n..(start + len) * n].to_vec();
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::new(&[len, n], out)?, Op::SliceRows { src: a, start }, rg))
    }

    /// Gathers rows of a 2-D table.
    pub fn index_rows(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let (m, n) = self.dims2("index_rows", table)?;
        if indices.is_empty() {
            return Err(Error::InvalidArgument("empty row index".into()));
        }
        let mut out = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            if i >= m {
                return Err(Error::InvalidArgument(format!("row {i} out of {m}")));
            }
            out.extend_from_slice(self.value(table).row(i));
        }
        let rg = self.rg(&[table]);
        Ok(self.push(
            Tensor::new(&[indices.len(), n], out)?,
            Op::IndexRows {
                table,
                indices: indices.to_vec(),
            },
            rg,
        ))
    }

    /// `out[i * U + j] = a[i] + b[j]` for `a: [T, H]`, `b: [U, H]`.
    pub fn outer_add_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, h) = self.dims2("outer_add_rows", a)?;
        let (u, h2) = self.dims2("outer_add_rows", b)?;
        if h != h2 {
            return Err(Error::shape("outer_add_rows", self.shape(a), self.shape(b)));
        }
        let (da, db) = (self.data(a), self.data(b));
        let mut out = Vec::with_capacity(t * u * h);
        for i in 0..t {
            for j in 0..u {
                out.extend(da[i * h..(i + 1) * h].iter().zip(&db[j * h..(j + 1) * h]).map(|(x, y)| x + y));
            }
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(&[t * u, h], out)?, Op::OuterAddRows { a, b }, rg))
    }

    /// Moves rows down by `shift`, filling the top with zeros.
    pub fn shift_rows(&mut self, a: Var, shift: usize) -> Result<Var> {
        let (m, n) = self.dims2("shift_rows", a)?;
        let mut out = vec![0.0; m * n];
        if shift < m {
            out[shift * n..].copy_from_slice(&self.data(a)[..(m - shift) * n]);
        }
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::ShiftRows { src: a, shift }, rg))
    }

    // ---- fused primitives ----------------------------------------------

    /// Row softmax of `scores[..., T, T]` under `mask`. Masked entries never
    /// enter the max or the normalizer and come out as exactly zero, which is
    /// the limit of shifting them by [`MASK_PENALTY`].
    pub fn softmax_masked(&mut self, scores: Var, mask: &AttentionMask) -> Result<Var> {
        let shape = self.shape(scores).to_vec();
        let size = mask.size();
        let r = shape.len();
        if r < 2 || shape[r - 1] != size || shape[r - 2] != size {
            return Err(Error::shape("softmax_masked", &shape, &[size, size]));
        }
        let src = self.data(scores);
        let mut out = vec![0.0; src.len()];
        for (row, (x, y)) in src.chunks(size).zip(out.chunks_mut(size)).enumerate() {
            let vis = mask.row(row % size);
            if !vis.iter().any(|&v| v) {
                return Err(Error::FullyMaskedRow { row: row % size });
            }
            let max = (0..size)
                .filter(|&k| vis[k])
                .map(|k| x[k])
                .fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for k in (0..size).filter(|&k| vis[k]) {
                y[k] = (x[k] - max).exp();
                sum += y[k];
            }
            for k in 0..size {
                y[k] = if vis[k] { y[k] / sum } else { 0.0 };
            }
        }
        let rg = self.rg(&[scores]);
        Ok(self.push(Tensor::new(&shape, out)?, Op::Softmax(scores), rg))
    }

    /// Plain row softmax over the last axis.
    pub fn softmax(&mut self, scores: Var) -> Var {
        let t = self.value(scores);
        let n = t.cols();
        let shape = t.shape().to_vec();
        let mut out = vec![0.0; t.numel()];
        for (x, y) in t.data().chunks(n).zip(out.chunks_mut(n)) {
            let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for (yi, xi) in y.iter_mut().zip(x) {
                *yi = (xi - max).exp();
                sum += *yi;
            }
            y.iter_mut().for_each(|v| *v /= sum);
        }
        let rg = self.rg(&[scores]);
        self.push(Tensor::new(&shape, out).unwrap(), Op::Softmax(scores), rg)
    }

    /// Normalizes each row over the last axis to zero mean and unit variance.
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Var {
        let t = self.value(a);
        let n = t.cols();
        let shape = t.shape().to_vec();
        let mut xhat = vec![0.0; t.numel()];
        let mut rstd = Vec::with_capacity(t.rows());
        for (x, y) in t.data().chunks(n).zip(xhat.chunks_mut(n)) {
            let mean = x.iter().sum::<f64>() / n as f64;
            let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let rs = 1.0 / (var + eps).sqrt();
            for (yi, xi) in y.iter_mut().zip(x) {
                *yi = (xi - mean) * rs;
            }
            rstd.push(rs);
        }
        let rg = self.rg(&[a]);
        let value = Tensor::new(&shape, xhat.clone()).unwrap();
        self.push(value, Op::LayerNorm { src: a, xhat, rstd }, rg)
    }

    /// Per-row cosine similarity of `[T, D]` inputs, shape `[T]`.
    pub fn cosine_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) || self.shape(a).len() != 2 {
            return Err(Error::shape("cosine_rows", self.shape(a), self.shape(b)));
        }
        let (ta, tb) = (self.value(a), self.value(b));
        let mut out = Vec::with_capacity(ta.rows());
        for row in 0..ta.rows() {
            let (x, y) = (ta.row(row), tb.row(row));
            let (nx, ny) = (norm(x), norm(y));
            if nx == 0.0 || ny == 0.0 {
                return Err(Error::ZeroNorm { row });
            }
            out.push(dot(x, y) / (nx * ny));
        }
        let rg = self.rg(&[a, b]);
        let n = out.len();
        Ok(self.push(Tensor::new(&[n], out)?, Op::CosineRows { a, b }, rg))
    }

    /// `sum over rows of sum_k p ln(p / q)` along the last axis, with
    /// `0 ln(0 / q) = 0`. Natural logarithm.
    pub fn kl_rows(&mut self, p: Var, q: Var) -> Result<Var> {
        if self.shape(p) != self.shape(q) {
            return Err(Error::shape("kl_rows", self.shape(p), self.shape(q)));
        }
        let cols = self.value(p).cols();
        let (dp, dq) = (self.data(p), self.data(q));
        let mut total = 0.0;
        for (i, (&pi, &qi)) in dp.iter().zip(dq).enumerate() {
            if pi > 0.0 {
                if qi <= 0.0 {
                    return Err(Error::SupportMismatch {
                        row: i / cols,
                        col: i % cols,
                    });
                }
                total += pi * (pi / qi).ln();
            }
        }
        let rg = self.rg(&[p, q]);
        Ok(self.push(Tensor::scalar(total), Op::KlRows { p, q }, rg))
    }

    /// Records a scalar-valued function of `src` whose gradient is already
    /// known. Used for the fused transducer likelihood.
    pub fn scalar_fused(&mut self, src: Var, value: f64, local_grad: Vec<f64>) -> Result<Var> {
        if local_grad.len() != self.value(src).numel() {
            return Err(Error::InvalidArgument("fused gradient size".into()));
        }
        let rg = self.rg(&[src]);
        Ok(self.push(Tensor::scalar(value), Op::ScalarFused { src, local_grad }, rg))
    }

    // ---- reverse pass ---------------------------------------------------

    /// Propagates from a single-element `root` and adds into leaf gradients.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        let root_val = self.value(root);
        if root_val.numel() != 1 {
            return Err(Error::NonScalarRoot(root_val.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(vec![1.0]);
        for id in (0..=root.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                grads[id] = Some(g);
                continue;
            }
            self.backprop_node(id, &g, &mut grads);
        }
        if self.leaf_grads.len() < self.nodes.len() {
            self.leaf_grads.resize(self.nodes.len(), None);
        }
        for (id, g) in grads.into_iter().enumerate() {
            let Some(g) = g else { continue };
            let node = &self.nodes[id];
            if !matches!(node.op, Op::Leaf) || !node.requires_grad {
                continue;
            }
            match &mut self.leaf_grads[id] {
                Some(acc) => acc.data_mut().iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                slot => *slot = Some(Tensor::new(node.value.shape(), g).unwrap()),
            }
        }
        Ok(())
    }

    fn backprop_node(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        let out = node.value.data();
        let nodes = &self.nodes;
        let wants = |v: Var| nodes[v.0].requires_grad;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.numel()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                acc(*a, &mut |ga| reduce_into(ga, g, 1.0));
                acc(*b, &mut |gb| reduce_into(gb, g, sign));
            }
            Op::Mul(a, b) => {
                let (da, db) = (self.data(*a), self.data(*b));
                acc(*a, &mut |ga| {
                    let n = ga.len();
                    for (i, gi) in g.iter().enumerate() {
                        ga[i % n] += gi * db[i % db.len()];
                    }
                });
                acc(*b, &mut |gb| {
                    let n = gb.len();
                    for (i, gi) in g.iter().enumerate() {
                        gb[i % n] += gi * da[i % da.len()];
                    }
                });
            }
            Op::Scale(a, c) => acc(*a, &mut |ga| axpy(ga, g, *c)),
            Op::AddScalar(a) | Op::Reshape(a) => acc(*a, &mut |ga| axpy(ga, g, 1.0)),
            Op::MatMul(a, b) => {
                let (m, k) = dims(self.value(*a));
                let n = self.value(*b).cols();
                let (da, db) = (self.data(*a), self.data(*b));
                if wants(*a) {
                    // ga += g b^T
                    let t = matmul_nt(g, db, m, n, k);
                    acc(*a, &mut |ga| axpy(ga, &t, 1.0));
                }
                if wants(*b) {
                    // gb += a^T g
                    acc(*b, &mut |gb| {
                        for i in 0..m {
                            for p in 0..k {
                                let aip = da[i * k + p];
                                if aip == 0.0 {
                                    continue;
                                }
                                let row = &mut gb[p * n..(p + 1) * n];
                                for (r, gv) in row.iter_mut().zip(&g[i * n..(i + 1) * n]) {
                                    *r += aip * gv;
                                }
                            }
                        }
                    });
                }
            }
            Op::MatMulNt(a, b) => {
                let (m, k) = dims(self.value(*a));
                let n = self.value(*b).rows();
                let (da, db) = (self.data(*a), self.data(*b));
                if wants(*a) {
                    let t = matmul_nn(g, db, m, n, k);
                    acc(*a, &mut |ga| axpy(ga, &t, 1.0));
                }
                if wants(*b) {
                    // gb[j, p] += sum_i g[i, j] a[i, p]
                    acc(*b, &mut |gb| {
                        for i in 0..m {
                            for j in 0..n {
                                let gij = g[i * n + j];
                                if gij == 0.0 {
                                    continue;
                                }
                                let row = &mut gb[j * k..(j + 1) * k];
                                for (r, av) in row.iter_mut().zip(&da[i * k..(i + 1) * k]) {
                                    *r += gij * av;
                                }
                            }
                        }
                    });
                }
            }
            Op::Transpose(a) => {
                let (m, n) = dims(self.value(*a));
                let t = transpose(g, n, m);
                acc(*a, &mut |ga| axpy(ga, &t, 1.0));
            }
            Op::Sigmoid(a) => acc(*a, &mut |ga| {
                for ((r, gi), y) in ga.iter_mut().zip(g).zip(out) {
                    *r += gi * y * (1.0 - y);
                }
            }),
            Op::Tanh(a) => acc(*a, &mut |ga| {
                for ((r, gi), y) in ga.iter_mut().zip(g).zip(out) {
                    *r += gi * (1.0 - y * y);
                }
            }),
            Op::Ln(a) => {
                let x = self.data(*a);
                acc(*a, &mut |ga| {
                    for ((r, gi), xi) in ga.iter_mut().zip(g).zip(x) {
                        *r += gi / xi;
                    }
                })
            }
            Op::Exp(a) => acc(*a, &mut |ga| {
                for ((r, gi), y) in ga.iter_mut().zip(g).zip(out) {
                    *r += gi * y;
                }
            }),
            Op::Abs(a) => {
                let x = self.data(*a);
                acc(*a, &mut |ga| {
                    for ((r, gi), xi) in ga.iter_mut().zip(g).zip(x) {
                        // Subgradient 0 at the kink.
                        *r += gi * if *xi > 0.0 {
                            1.0
                        } else if *xi < 0.0 {
                            -1.0
                        } else {
                            0.0
                        };
                    }
                })
            }
            Op::Sqrt(a) => acc(*a, &mut |ga| {
                for ((r, gi), y) in ga.iter_mut().zip(g).zip(out) {
                    *r += gi * 0.5 / y;
                }
            }),
            Op::SumAxis { src, axis } => {
                let shape = self.shape(*src);
                let outer: usize = shape[..*axis].iter().product();
                let len = shape[*axis];
                let inner: usize = shape[axis + 1..].iter().product();
                acc(*src, &mut |ga| {
                    for o in 0..outer {
                        for l in 0..len {
                            let base = (o * len + l) * inner;
                            for i in 0..inner {
                                ga[base + i] += g[o * inner + i];
                            }
                        }
                    }
                })
            }
            Op::SumAll(a) => acc(*a, &mut |ga| ga.iter_mut().for_each(|r| *r += g[0])),
            Op::ConcatLast(parts) => {
                let total = node.value.cols();
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    acc(p, &mut |gp| {
                        for (r, row) in gp.chunks_mut(w).enumerate() {
                            axpy(row, &g[r * total + offset..r * total + offset + w], 1.0);
                        }
                    });
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).numel();
                    acc(p, &mut |gp| axpy(gp, &g[offset..offset + n], 1.0));
                    offset += n;
                }
            }
            Op::SliceLast { src, start } => {
                let n = self.value(*src).cols();
                let w = node.value.cols();
                acc(*src, &mut |ga| {
                    for (r, grow) in g.chunks(w).enumerate() {
                        axpy(&mut ga[r * n + start..r * n + start + w], grow, 1.0);
                    }
                })
            }
            Op::SliceRows { src, start } => {
                let n = node.value.cols();
                acc(*src, &mut |ga| axpy(&mut ga[start * n..start * n + g.len()], g, 1.0))
            }
            Op::Softmax(a) => {
                let size = node.value.cols();
                acc(*a, &mut |ga| {
                    for ((gr, yr), dst) in g.chunks(size).zip(out.chunks(size)).zip(ga.chunks_mut(size)) {
                        let s = dot(gr, yr);
                        for k in 0..size {
                            dst[k] += yr[k] * (gr[k] - s);
                        }
                    }
                })
            }
            Op::LayerNorm { src, xhat, rstd } => {
                let n = node.value.cols();
                acc(*src, &mut |ga| {
                    for (r, ((gr, xr), dst)) in g
                        .chunks(n)
                        .zip(xhat.chunks(n))
                        .zip(ga.chunks_mut(n))
                        .enumerate()
                    {
                        let mg = gr.iter().sum::<f64>() / n as f64;
                        let mgx = dot(gr, xr) / n as f64;
                        for k in 0..n {
                            dst[k] += rstd[r] * (gr[k] - mg - xr[k] * mgx);
                        }
                    }
                })
            }
            Op::CosineRows { a, b } => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let d = ta.cols();
                let grad_pair = |x: &Tensor, y: &Tensor, dst: &mut [f64]| {
                    for r in 0..x.rows() {
                        let (xr, yr) = (x.row(r), y.row(r));
                        let (nx, ny) = (norm(xr), norm(yr));
                        let c = out[r];
                        for k in 0..d {
                            dst[r * d + k] += g[r] * (yr[k] / (nx * ny) - c * xr[k] / (nx * nx));
                        }
                    }
                };
                acc(*a, &mut |ga| grad_pair(ta, tb, ga));
                acc(*b, &mut |gb| grad_pair(tb, ta, gb));
            }
            Op::KlRows { p, q } => {
                let (dp, dq) = (self.data(*p), self.data(*q));
                // d/dp at p = 0 is left at zero; only reference distributions
                // with full support should be differentiated.
                acc(*p, &mut |gp| {
                    for i in 0..gp.len() {
                        if dp[i] > 0.0 {
                            gp[i] += g[0] * ((dp[i] / dq[i]).ln() + 1.0);
                        }
                    }
                });
                acc(*q, &mut |gq| {
                    for i in 0..gq.len() {
                        if dp[i] > 0.0 {
                            gq[i] -= g[0] * dp[i] / dq[i];
                        }
                    }
                });
            }
            Op::IndexRows { table, indices } => {
                let n = node.value.cols();
                acc(*table, &mut |gt| {
                    for (r, &i) in indices.iter().enumerate() {
                        axpy(&mut gt[i * n..(i + 1) * n], &g[r * n..(r + 1) * n], 1.0);
                    }
                })
            }
            Op::OuterAddRows { a, b } => {
                let (t, h) = dims(self.value(*a));
                let u = self.value(*b).rows();
                acc(*a, &mut |ga| {
                    for i in 0..t {
                        for j in 0..u {
                            axpy(&mut ga[i * h..(i + 1) * h], &g[(i * u + j) * h..(i * u + j + 1) * h], 1.0);
                        }
                    }
                });
                acc(*b, &mut |gb| {
                    for i in 0..t {
                        for j in 0..u {
                            axpy(&mut gb[j * h..(j + 1) * h], &g[(i * u + j) * h..(i * u + j + 1) * h], 1.0);
                        }
                    }
                });
            }
            Op::ShiftRows { src, shift } => {
                let (m, n) = dims(&node.value);
                acc(*src, &mut |ga| {
                    if *shift < m {
                        axpy(&mut ga[..(m - shift) * n], &g[shift * n..], 1.0);
                    }
                })
            }
            Op::ScalarFused { src, local_grad } => acc(*src, &mut |ga| axpy(ga, local_grad, g[0])),
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn dims(t: &Tensor) -> (usize, usize) {
    (t.rows(), t.cols())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn axpy(dst: &mut [f64], src: &[f64], c: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += c * s;
    }
}

/// Adds `c * src` into `dst`, folding broadcast repeats when `dst` is smaller.
fn reduce_into(dst: &mut [f64], src: &[f64], c: f64) {
    let n = dst.len();
    if n == src.len() {
        axpy(dst, src, c);
    } else {
        for (i, s) in src.iter().enumerate() {
            dst[i % n] += c * s;
        }
    }
}

fn matmul_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            for (o, bv) in orow.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += aip * bv;
            }
        }
    }
    out
}

fn matmul_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            out[i * n + j] = dot(arow, &b[j * k..(j + 1) * k]);
        }
    }
    out
}

fn transpose(a: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}
