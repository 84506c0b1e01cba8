//! Dense double-precision tensors with a define-by-run reverse-mode tape.
//!
//! Every primitive appends one node to the [`Tape`]; [`Tape::backward`]
//! walks the nodes in reverse creation order (which is a topological
//! order) and accumulates adjoints. Nodes that do not depend on any
//! differentiable leaf are skipped during the backward sweep.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("cross entropy mask selects no items")]
    EmptyMask,
    #[error("non-finite value produced by {op}")]
    NonFiniteResult { op: &'static str },
    #[error("backward requires a scalar output, got shape {0:?}")]
    NotScalarOutput(Vec<usize>),
    #[error("invalid argument to {op}: {msg}")]
    InvalidArgument { op: &'static str, msg: String },
}

pub type Result<T> = std::result::Result<T, AutodiffError>;

/// Row-major tensor. Matrix primitives interpret the shape as `[rows, cols]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(AutodiffError::ShapeMismatch {
                op: "tensor",
                left: shape,
                right: vec![data.len()],
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1, 1],
            data: vec![value],
        }
    }

    /// Builds a `rows x cols` matrix from nested rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            if row.len() != c {
                return Err(AutodiffError::ShapeMismatch {
                    op: "from_rows",
                    left: vec![r, c],
                    right: vec![row.len()],
                });
            }
            data.extend_from_slice(row);
        }
        Ok(Self {
            shape: vec![r, c],
            data,
        })
    }

    /// Column vector `[n, 1]`.
    pub fn column(values: Vec<f64>) -> Self {
        Self {
            shape: vec![values.len(), 1],
            data: values,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    pub fn cols(&self) -> usize {
        if self.shape.len() >= 2 {
            self.shape[1..].iter().product()
        } else {
            1
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    /// The single value of a 1-element tensor.
    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Frobenius norm.
    pub fn norm(&self) -> f64 {
        self.norm_sq().sqrt()
    }

    pub fn norm_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn scaled(&self, a: f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| v * a).collect(),
        }
    }

    /// `self + a * other`, shapes must agree.
    pub fn axpy(&self, a: f64, other: &Tensor) -> Result<Self> {
        self.check_same("axpy", other)?;
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(x, y)| x + a * y)
                .collect(),
        })
    }

    pub fn add_assign_scaled(&mut self, a: f64, other: &Tensor) -> Result<()> {
        self.check_same("add_assign", other)?;
        for (x, y) in self.data.iter_mut().zip(&other.data) {
            *x += a * y;
        }
        Ok(())
    }

    fn check_same(&self, op: &'static str, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(AutodiffError::ShapeMismatch {
                op,
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        Ok(())
    }

    fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        if self.shape.len() != 2 {
            return Err(AutodiffError::InvalidArgument {
                op,
                msg: format!("expected a matrix, got shape {:?}", self.shape),
            });
        }
        Ok((self.shape[0], self.shape[1]))
    }

    fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}

/// `a [m x k] * b [k x n]`.
fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `a^T [k x m]^T * b [k x n]` where `a` is stored as `[k x m]`.
fn matmul_tn(a: &[f64], b: &[f64], k: usize, m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for p in 0..k {
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let av = a[p * m + i];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `a [m x n] * b^T` where `b` is stored as `[k x n]`.
fn matmul_nt(a: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * k];
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for j in 0..k {
            let brow = &b[j * n..(j + 1) * n];
            out[i * k + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    out
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Scale(Var, f64),
    Mul(Var, Var),
    LeakyRelu(Var, f64),
    Elu(Var),
    Exp(Var),
    Log(Var),
    SoftmaxRows(Var),
    Concat { a: Var, b: Var, axis: usize },
    GatherRows(Var, Arc<[usize]>),
    SegmentSum(Var, Arc<[usize]>),
    SegmentSoftmax(Var, Arc<[usize]>),
    Dropout(Var, Arc<[f64]>),
    Mean(Var),
    Sum(Var),
    CrossEntropy {
        logits: Var,
        labels: Arc<[usize]>,
        mask: Arc<[bool]>,
        probs: Vec<f64>,
        count: usize,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// A single forward pass. Rebuilt for every evaluation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    adjoints: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Adjoint of `v`; zero when `v` does not reach the output.
    pub fn get(&self, v: Var) -> Tensor {
        match &self.adjoints[v.0] {
            Some(t) => t.clone(),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }

    pub fn take(&mut self, v: Var) -> Tensor {
        self.adjoints[v.0]
            .take()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
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

    /// Differentiable input.
    pub fn var(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Input that never receives an adjoint.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn emit(&mut self, op_name: &'static str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(AutodiffError::NonFiniteResult { op: op_name });
        }
        let ng = inputs.iter().any(|&v| self.ng(v));
        Ok(self.push(value, op, ng))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2("matmul")?;
        let (k2, n) = self.value(b).dims2("matmul")?;
        if k != k2 {
            return Err(AutodiffError::ShapeMismatch {
                op: "matmul",
                left: vec![m, k],
                right: vec![k2, n],
            });
        }
        let data = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        let t = Tensor {
            shape: vec![m, n],
            data,
        };
        self.emit("matmul", t, Op::MatMul(a, b), &[a, b])
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        ta.check_same(name, tb)?;
        Ok(Tensor {
            shape: ta.shape.clone(),
            data: ta.data.iter().zip(&tb.data).map(|(&x, &y)| f(x, y)).collect(),
        })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary("add", a, b, |x, y| x + y)?;
        self.emit("add", t, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary("sub", a, b, |x, y| x - y)?;
        self.emit("sub", t, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary("mul", a, b, |x, y| x * y)?;
        self.emit("mul", t, Op::Mul(a, b), &[a, b])
    }

    /// Adds a `[1 x n]` row (bias) to every row of `x [m x n]`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (m, n) = self.value(x).dims2("add_row")?;
        let rs = self.value(row).shape().to_vec();
        if self.value(row).len() != n {
            return Err(AutodiffError::ShapeMismatch {
                op: "add_row",
                left: vec![m, n],
                right: rs,
            });
        }
        let r = self.value(row).data().to_vec();
        let mut data = self.value(x).data().to_vec();
        for chunk in data.chunks_mut(n.max(1)) {
            for (d, b) in chunk.iter_mut().zip(&r) {
                *d += b;
            }
        }
        let t = Tensor {
            shape: vec![m, n],
            data,
        };
        self.emit("add_row", t, Op::AddRow(x, row), &[x, row])
    }

    pub fn scale(&mut self, x: Var, a: f64) -> Result<Var> {
        let t = self.value(x).scaled(a);
        self.emit("scale", t, Op::Scale(x, a), &[x])
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Result<Var> {
        let t = self.value(x).map(|v| if v > 0.0 { v } else { slope * v });
        self.emit("leaky_relu", t, Op::LeakyRelu(x, slope), &[x])
    }

    pub fn elu(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x).map(|v| if v > 0.0 { v } else { v.exp_m1() });
        self.emit("elu", t, Op::Elu(x), &[x])
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x).map(f64::exp);
        self.emit("exp", t, Op::Exp(x), &[x])
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x).map(f64::ln);
        self.emit("log", t, Op::Log(x), &[x])
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.value(x).dims2("softmax_rows")?;
        let src = self.value(x).data();
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            softmax_into(&src[i * n..(i + 1) * n], &mut data[i * n..(i + 1) * n]);
        }
        let t = Tensor {
            shape: vec![m, n],
            data,
        };
        self.emit("softmax_rows", t, Op::SoftmaxRows(x), &[x])
    }

    /// Concatenates two matrices along `axis` (0 = rows, 1 = columns).
    pub fn concat(&mut self, a: Var, b: Var, axis: usize) -> Result<Var> {
        let (ma, na) = self.value(a).dims2("concat")?;
        let (mb, nb) = self.value(b).dims2("concat")?;
        let mismatch = || AutodiffError::ShapeMismatch {
            op: "concat",
            left: vec![ma, na],
            right: vec![mb, nb],
        };
        let t = match axis {
            0 => {
                if na != nb {
                    return Err(mismatch());
                }
                let mut data = self.value(a).data().to_vec();
                data.extend_from_slice(self.value(b).data());
                Tensor {
                    shape: vec![ma + mb, na],
                    data,
                }
            }
            1 => {
                if ma != mb {
                    return Err(mismatch());
                }
                let mut data = Vec::with_capacity(ma * (na + nb));
                for i in 0..ma {
                    data.extend_from_slice(self.value(a).row(i));
                    data.extend_from_slice(self.value(b).row(i));
                }
                Tensor {
                    shape: vec![ma, na + nb],
                    data,
                }
            }
            _ => {
                return Err(AutodiffError::InvalidArgument {
                    op: "concat",
                    msg: format!("axis {axis} out of range"),
                })
            }
        };
        self.emit("concat", t, Op::Concat { a, b, axis }, &[a, b])
    }

    /// Selects rows of `x` by index (repeats allowed).
    pub fn gather_rows(&mut self, x: Var, idx: Arc<[usize]>) -> Result<Var> {
        let (m, n) = self.value(x).dims2("gather_rows")?;
        if let Some(&bad) = idx.iter().find(|&&i| i >= m) {
            return Err(AutodiffError::InvalidArgument {
                op: "gather_rows",
                msg: format!("row {bad} out of range for {m} rows"),
            });
        }
        let src = self.value(x);
        let mut data = Vec::with_capacity(idx.len() * n);
        for &i in idx.iter() {
            data.extend_from_slice(src.row(i));
        }
        let t = Tensor {
            shape: vec![idx.len(), n],
            data,
        };
        self.emit("gather_rows", t, Op::GatherRows(x, idx), &[x])
    }

    /// Sums rows of `x [e x n]` into `segments` output rows keyed by `seg[e]`.
    pub fn segment_sum(&mut self, x: Var, seg: Arc<[usize]>, segments: usize) -> Result<Var> {
        let (e, n) = self.value(x).dims2("segment_sum")?;
        check_segments("segment_sum", e, &seg, segments)?;
        let src = self.value(x);
        let mut data = vec![0.0; segments * n];
        for (r, &s) in seg.iter().enumerate() {
            for (o, v) in data[s * n..(s + 1) * n].iter_mut().zip(src.row(r)) {
                *o += v;
            }
        }
        let t = Tensor {
            shape: vec![segments, n],
            data,
        };
        self.emit("segment_sum", t, Op::SegmentSum(x, seg), &[x])
    }

    /// Softmax of each column of `x [e x n]` over the rows that share a
    /// segment id. Uses per-segment max subtraction.
    pub fn segment_softmax(&mut self, x: Var, seg: Arc<[usize]>, segments: usize) -> Result<Var> {
        let (e, n) = self.value(x).dims2("segment_softmax")?;
        check_segments("segment_softmax", e, &seg, segments)?;
        let src = self.value(x).data();
        let mut maxes = vec![f64::NEG_INFINITY; segments * n];
        for (r, &s) in seg.iter().enumerate() {
            for c in 0..n {
                let m = &mut maxes[s * n + c];
                *m = m.max(src[r * n + c]);
            }
        }
        let mut data = vec![0.0; e * n];
        let mut sums = vec![0.0; segments * n];
        for (r, &s) in seg.iter().enumerate() {
            for c in 0..n {
                let v = (src[r * n + c] - maxes[s * n + c]).exp();
                data[r * n + c] = v;
                sums[s * n + c] += v;
            }
        }
        for (r, &s) in seg.iter().enumerate() {
            for c in 0..n {
                data[r * n + c] /= sums[s * n + c];
            }
        }
        let t = Tensor {
            shape: vec![e, n],
            data,
        };
        self.emit("segment_softmax", t, Op::SegmentSoftmax(x, seg), &[x])
    }

    /// Inverted dropout. `rate == 0` returns `x` unchanged.
    pub fn dropout(&mut self, x: Var, rate: f64, seed: u64) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(AutodiffError::InvalidArgument {
                op: "dropout",
                msg: format!("rate {rate} outside [0, 1)"),
            });
        }
        if rate == 0.0 {
            return Ok(x);
        }
        let mask = dropout_mask(self.value(x).len(), rate, seed);
        let src = self.value(x);
        let t = Tensor {
            shape: src.shape.clone(),
            data: src.data.iter().zip(mask.iter()).map(|(v, m)| v * m).collect(),
        };
        self.emit("dropout", t, Op::Dropout(x, mask), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let src = self.value(x);
        if src.is_empty() {
            return Err(AutodiffError::InvalidArgument {
                op: "mean",
                msg: "empty tensor".into(),
            });
        }
        let v = src.data.iter().sum::<f64>() / src.len() as f64;
        self.emit("mean", Tensor::scalar(v), Op::Mean(x), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).data.iter().sum::<f64>();
        self.emit("sum", Tensor::scalar(v), Op::Sum(x), &[x])
    }

    /// Mean negative log-likelihood over rows with `mask[r] == true`.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        labels: Arc<[usize]>,
        mask: Arc<[bool]>,
    ) -> Result<Var> {
        let (m, n) = self.value(logits).dims2("cross_entropy")?;
        if labels.len() != m || mask.len() != m {
            return Err(AutodiffError::ShapeMismatch {
                op: "cross_entropy",
                left: vec![m, n],
                right: vec![labels.len(), mask.len()],
            });
        }
        let count = mask.iter().filter(|&&b| b).count();
        if count == 0 {
            return Err(AutodiffError::EmptyMask);
        }
        let src = self.value(logits).data();
        let mut probs = vec![0.0; m * n];
        let mut total = 0.0;
        for r in 0..m {
            if !mask[r] {
                continue;
            }
            let y = labels[r];
            if y >= n {
                return Err(AutodiffError::InvalidArgument {
                    op: "cross_entropy",
                    msg: format!("label {y} out of range for {n} classes"),
                });
            }
            let row = &src[r * n..(r + 1) * n];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
            total += lse - row[y];
            softmax_into(row, &mut probs[r * n..(r + 1) * n]);
        }
        let v = total / count as f64;
        self.emit(
            "cross_entropy",
            Tensor::scalar(v),
            Op::CrossEntropy {
                logits,
                labels,
                mask,
                probs,
                count,
            },
            &[logits],
        )
    }

    /// Reverse sweep from a scalar `output`.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let out = &self.nodes[output.0].value;
        if out.len() != 1 {
            return Err(AutodiffError::NotScalarOutput(out.shape.clone()));
        }
        let n = output.0 + 1;
        let mut adj: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        adj[output.0] = Some(Tensor::filled(&out.shape, 1.0));

        for idx in (0..n).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let g = match adj[idx].take() {
                Some(g) => g,
                None => continue,
            };
            match &node.op {
                Op::Leaf => {
                    adj[idx] = Some(g);
                }
                Op::MatMul(a, b) => {
                    let ta = self.value(*a);
                    let tb = self.value(*b);
                    let (m, k) = (ta.shape[0], ta.shape[1]);
                    let nn = tb.shape[1];
                    if self.ng(*a) {
                        let d = matmul_nt(&g.data, &tb.data, m, nn, k);
                        accumulate(&mut adj, *a, Tensor { shape: vec![m, k], data: d });
                    }
                    if self.ng(*b) {
                        let d = matmul_tn(&ta.data, &g.data, m, k, nn);
                        accumulate(&mut adj, *b, Tensor { shape: vec![k, nn], data: d });
                    }
                }
                Op::Add(a, b) => {
                    if self.ng(*b) {
                        accumulate(&mut adj, *b, g.clone());
                    }
                    if self.ng(*a) {
                        accumulate(&mut adj, *a, g);
                    }
                }
                Op::Sub(a, b) => {
                    if self.ng(*b) {
                        accumulate(&mut adj, *b, g.scaled(-1.0));
                    }
                    if self.ng(*a) {
                        accumulate(&mut adj, *a, g);
                    }
                }
                Op::AddRow(x, row) => {
                    if self.ng(*row) {
                        let ncols = g.shape[1];
                        let mut d = vec![0.0; ncols];
                        for chunk in g.data.chunks(ncols.max(1)) {
                            for (o, v) in d.iter_mut().zip(chunk) {
                                *o += v;
                            }
                        }
                        let shape = self.value(*row).shape.clone();
                        accumulate(&mut adj, *row, Tensor { shape, data: d });
                    }
                    if self.ng(*x) {
                        accumulate(&mut adj, *x, g);
                    }
                }
                Op::Scale(x, a) => {
                    if self.ng(*x) {
                        accumulate(&mut adj, *x, g.scaled(*a));
                    }
                }
                Op::Mul(a, b) => {
                    if self.ng(*a) {
                        let d = zip_map(&g, self.value(*b), |gv, bv| gv * bv);
                        accumulate(&mut adj, *a, d);
                    }
                    if self.ng(*b) {
                        let d = zip_map(&g, self.value(*a), |gv, av| gv * av);
                        accumulate(&mut adj, *b, d);
                    }
                }
                Op::LeakyRelu(x, slope) => {
                    let s = *slope;
                    let d = zip_map(&g, self.value(*x), |gv, xv| if xv > 0.0 { gv } else { s * gv });
                    accumulate(&mut adj, *x, d);
                }
                Op::Elu(x) => {
                    let d = zip_map(&g, self.value(*x), |gv, xv| {
                        if xv > 0.0 {
                            gv
                        } else {
                            gv * xv.exp()
                        }
                    });
                    accumulate(&mut adj, *x, d);
                }
                Op::Exp(x) => {
                    let d = zip_map(&g, &node.value, |gv, yv| gv * yv);
                    accumulate(&mut adj, *x, d);
                }
                Op::Log(x) => {
                    let d = zip_map(&g, self.value(*x), |gv, xv| gv / xv);
                    accumulate(&mut adj, *x, d);
                }
                Op::SoftmaxRows(x) => {
                    let (m, nc) = (node.value.shape[0], node.value.shape[1]);
                    let y = &node.value.data;
                    let mut d = vec![0.0; m * nc];
                    for r in 0..m {
                        let yr = &y[r * nc..(r + 1) * nc];
                        let gr = &g.data[r * nc..(r + 1) * nc];
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for c in 0..nc {
                            d[r * nc + c] = yr[c] * (gr[c] - dot);
                        }
                    }
                    accumulate(&mut adj, *x, Tensor { shape: vec![m, nc], data: d });
                }
                Op::Concat { a, b, axis } => {
                    let sa = self.value(*a).shape.clone();
                    let sb = self.value(*b).shape.clone();
                    let (da, db) = if *axis == 0 {
                        let split = sa[0] * sa[1];
                        (g.data[..split].to_vec(), g.data[split..].to_vec())
                    } else {
                        let (na, nb) = (sa[1], sb[1]);
                        let mut da = Vec::with_capacity(sa[0] * na);
                        let mut db = Vec::with_capacity(sb[0] * nb);
                        for row in g.data.chunks((na + nb).max(1)) {
                            da.extend_from_slice(&row[..na]);
                            db.extend_from_slice(&row[na..]);
                        }
                        (da, db)
                    };
                    if self.ng(*a) {
                        accumulate(&mut adj, *a, Tensor { shape: sa, data: da });
                    }
                    if self.ng(*b) {
                        accumulate(&mut adj, *b, Tensor { shape: sb, data: db });
                    }
                }
                Op::GatherRows(x, idx) => {
                    let shape = self.value(*x).shape.clone();
                    let nc = shape[1];
                    let mut d = vec![0.0; shape[0] * nc];
                    for (r, &i) in idx.iter().enumerate() {
                        for (o, v) in d[i * nc..(i + 1) * nc].iter_mut().zip(&g.data[r * nc..(r + 1) * nc]) {
                            *o += v;
                        }
                    }
                    accumulate(&mut adj, *x, Tensor { shape, data: d });
                }
                Op::SegmentSum(x, seg) => {
                    let shape = self.value(*x).shape.clone();
                    let nc = shape[1];
                    let mut d = Vec::with_capacity(shape[0] * nc);
                    for &s in seg.iter() {
                        d.extend_from_slice(&g.data[s * nc..(s + 1) * nc]);
                    }
                    accumulate(&mut adj, *x, Tensor { shape, data: d });
                }
                Op::SegmentSoftmax(x, seg) => {
                    let shape = node.value.shape.clone();
                    let nc = shape[1];
                    let y = &node.value.data;
                    let segments = seg.iter().max().map_or(0, |m| m + 1);
                    let mut dots = vec![0.0; segments * nc];
                    for (r, &s) in seg.iter().enumerate() {
                        for c in 0..nc {
                            dots[s * nc + c] += y[r * nc + c] * g.data[r * nc + c];
                        }
                    }
                    let mut d = vec![0.0; y.len()];
                    for (r, &s) in seg.iter().enumerate() {
                        for c in 0..nc {
                            d[r * nc + c] = y[r * nc + c] * (g.data[r * nc + c] - dots[s * nc + c]);
                        }
                    }
                    accumulate(&mut adj, *x, Tensor { shape, data: d });
                }
                Op::Dropout(x, mask) => {
                    let d = Tensor {
                        shape: g.shape.clone(),
                        data: g.data.iter().zip(mask.iter()).map(|(a, b)| a * b).collect(),
                    };
                    accumulate(&mut adj, *x, d);
                }
                Op::Mean(x) => {
                    let t = self.value(*x);
                    let v = g.item() / t.len() as f64;
                    accumulate(&mut adj, *x, Tensor::filled(&t.shape, v));
                }
                Op::Sum(x) => {
                    let t = self.value(*x);
                    accumulate(&mut adj, *x, Tensor::filled(&t.shape, g.item()));
                }
                Op::CrossEntropy {
                    logits,
                    labels,
                    mask,
                    probs,
                    count,
                } => {
                    let t = self.value(*logits);
                    let nc = t.shape[1];
                    let w = g.item() / *count as f64;
                    let mut d = vec![0.0; t.len()];
                    for r in 0..t.shape[0] {
                        if !mask[r] {
                            continue;
                        }
                        for c in 0..nc {
                            d[r * nc + c] = w * probs[r * nc + c];
                        }
                        d[r * nc + labels[r]] -= w;
                    }
                    accumulate(&mut adj, *logits, Tensor { shape: t.shape.clone(), data: d });
                }
            }
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape.clone()).collect();
        Ok(Gradients {
            adjoints: adj,
            shapes,
        })
    }
}

fn accumulate(adj: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut adj[v.0] {
        Some(existing) => {
            for (a, b) in existing.data.iter_mut().zip(&g.data) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    Tensor {
        shape: a.shape.clone(),
        data: a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect(),
    }
}

fn softmax_into(row: &[f64], out: &mut [f64]) {
    let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for (o, v) in out.iter_mut().zip(row) {
        *o = (v - mx).exp();
        s += *o;
    }
    for o in out.iter_mut() {
        *o /= s;
    }
}

fn check_segments(op: &'static str, rows: usize, seg: &[usize], segments: usize) -> Result<()> {
    if seg.len() != rows {
        return Err(AutodiffError::ShapeMismatch {
            op,
            left: vec![rows],
            right: vec![seg.len()],
        });
    }
    if let Some(&bad) = seg.iter().find(|&&s| s >= segments) {
        return Err(AutodiffError::InvalidArgument {
            op,
            msg: format!("segment {bad} out of range for {segments} segments"),
        });
    }
    Ok(())
}

/// Keep-mask with inverted scaling: kept entries are `1 / (1 - rate)`.
pub fn dropout_mask(len: usize, rate: f64, seed: u64) -> Arc<[f64]> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let keep = 1.0 / (1.0 - rate);
    (0..len)
        .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep })
        .collect()
}

/// Central-difference gradient of `f` at `x`.
pub fn fd_gradient<F>(mut f: F, x: &Tensor, h: f64) -> Tensor
where
    F: FnMut(&Tensor) -> f64,
{
    assert!(h > 0.0, "finite-difference step must be positive");
    let mut probe = x.clone();
    let mut grad = Tensor::zeros(x.shape());
    for i in 0..x.len() {
        let orig = probe.data[i];
        let (up, down) = (orig + h, orig - h);
        probe.data[i] = up;
        let fp = f(&probe);
        probe.data[i] = down;
        let fm = f(&probe);
        probe.data[i] = orig;
        // divide by the step actually taken after rounding
        grad.data[i] = (fp - fm) / (up - down);
    }
    grad
}

/// Central differences at `h` and `h/2` combined by Richardson
/// extrapolation, one entry at a time. Fourth-order accurate.
fn extrapolated_entry<F>(f: &mut F, probe: &mut Tensor, i: usize, h: f64) -> f64
where
    F: FnMut(&Tensor) -> f64,
{
    let orig = probe.data[i];
    let mut central = |step: f64| {
        let (up, down) = (orig + step, orig - step);
        probe.data[i] = up;
        let fp = f(probe);
        probe.data[i] = down;
        let fm = f(probe);
        probe.data[i] = orig;
        (fp - fm) / (up - down)
    };
    let coarse = central(h);
    let fine = central(0.5 * h);
    (4.0 * fine - coarse) / 3.0
}

/// Extrapolated central differences with the step chosen per entry from
/// `steps` (decreasing): the estimate at the smaller step of the adjacent
/// pair that agrees best. Large steps lose accuracy where a kink lies
/// within reach, small ones where the derivative is tiny next to `f`.
pub fn fd_gradient_adaptive<F>(mut f: F, x: &Tensor, steps: &[f64]) -> Tensor
where
    F: FnMut(&Tensor) -> f64,
{
    assert!(steps.len() >= 2, "need at least two steps");
    assert!(steps.iter().all(|&h| h > 0.0), "finite-difference steps must be positive");
    let mut probe = x.clone();
    let mut grad = Tensor::zeros(x.shape());
    for i in 0..x.len() {
        let est: Vec<f64> = steps.iter().map(|&h| extrapolated_entry(&mut f, &mut probe, i, h)).collect();
        let best = (0..est.len() - 1)
            .min_by(|&a, &b| (est[a] - est[a + 1]).abs().total_cmp(&(est[b] - est[b + 1]).abs()))
            .expect("two steps");
        grad.data[i] = est[best + 1];
    }
    grad
}

/// Steps used with [`fd_gradient_adaptive`] by the gradient checks.
pub const ADAPTIVE_STEPS: [f64; 4] = [1e-3, 1e-4, 1e-5, 1e-6];

/// Starting steps of the high-order estimates in [`fd_gradient_refined`].
pub const REFINE_STEPS: [f64; 4] = [3e-2, 1e-2, 3e-3, 1e-3];

fn central_entry<F>(f: &mut F, probe: &mut Tensor, i: usize, h: f64) -> f64
where
    F: FnMut(&Tensor) -> f64,
{
    let orig = probe.data[i];
    let (up, down) = (orig + h, orig - h);
    probe.data[i] = up;
    let fp = f(probe);
    probe.data[i] = down;
    let fm = f(probe);
    probe.data[i] = orig;
    (fp - fm) / (up - down)
}

/// Central differences at `h`, `h/2`, `h/4` with two rounds of Richardson
/// extrapolation. Sixth-order accurate where `f` is smooth.
fn romberg_entry<F>(f: &mut F, probe: &mut Tensor, i: usize, h: f64) -> f64
where
    F: FnMut(&Tensor) -> f64,
{
    let mut t = [0.0; 3];
    for (k, v) in t.iter_mut().enumerate() {
        *v = central_entry(f, probe, i, h / (1 << k) as f64);
    }
    for m in 1..3 {
        let c = 4f64.powi(m as i32);
        for k in (m..3).rev() {
            t[k] = (c * t[k] - t[k - 1]) / (c - 1.0);
        }
    }
    t[2]
}

/// Index of the adjacent pair that agrees best, and their gap.
fn closest_pair(est: &[f64]) -> (usize, f64) {
    (0..est.len() - 1)
        .map(|k| (k, (est[k] - est[k + 1]).abs()))
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .expect("two estimates")
}

/// Steps of the base estimates in [`fd_gradient_refined`].
pub const BASE_STEPS: [f64; 5] = [1e-3, 1e-4, 1e-5, 1e-6, 1e-7];

/// Per entry, the extrapolated central difference at the largest of
/// [`BASE_STEPS`] whose neighbour agrees with it to within a few roundoff
/// units `eps |f| / h` (the closest pair when none does). Large consistent
/// steps are preferred because roundoff dominates the tiny derivatives that
/// sit next to a large `f`. An entry whose uncertainty still exceeds `1e-8`
/// of the gradient's norm is replaced by a sixth-order estimate from the
/// larger [`REFINE_STEPS`] when that estimate is self-consistent and falls
/// within the uncertainty.
pub fn fd_gradient_refined<F>(mut f: F, x: &Tensor) -> Tensor
where
    F: FnMut(&Tensor) -> f64,
{
    const AGREE: f64 = 16.0;
    const FLOOR: f64 = 4.0;
    let mut probe = x.clone();
    let f0 = f(&probe).abs().max(f64::MIN_POSITIVE);
    let roundoff = |h: f64| f64::EPSILON * f0 / h;
    let mut grad = Tensor::zeros(x.shape());
    let mut spreads = vec![0.0; x.len()];
    for i in 0..x.len() {
        let est: Vec<f64> = BASE_STEPS
            .iter()
            .map(|&h| extrapolated_entry(&mut f, &mut probe, i, h))
            .collect();
        let (k, gap) = (0..est.len() - 1)
            .map(|k| (k, (est[k] - est[k + 1]).abs()))
            .find(|&(k, gap)| gap <= AGREE * roundoff(BASE_STEPS[k + 1]))
            .unwrap_or_else(|| closest_pair(&est));
        grad.data[i] = est[k];
        spreads[i] = gap.max(FLOOR * roundoff(BASE_STEPS[k]));
    }
    let scale = grad.data.iter().map(|v| v * v).sum::<f64>().sqrt();
    for (i, &spread) in spreads.iter().enumerate() {
        if spread <= 1e-8 * scale {
            continue;
        }
        let hi: Vec<f64> = REFINE_STEPS
            .iter()
            .map(|&h| romberg_entry(&mut f, &mut probe, i, h))
            .collect();
        let (j, hi_gap) = closest_pair(&hi);
        if hi_gap < spread && (hi[j] - grad.data[i]).abs() <= 2.0 * spread {
            grad.data[i] = hi[j];
        }
    }
    grad
}

/// Norm-wise relative error `|a - b| / max(|a|, |b|)`, zero when both vanish.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    let denom = na.max(nb);
    if denom == 0.0 {
        0.0
    } else {
        diff / denom
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t2(rows: &[Vec<f64>]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut tape = Tape::new();
        let x = tape.var(t2(&[vec![0.0, 0.0]]));
        let y = tape.softmax_rows(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, 0.5]);
    }

    #[test]
    fn cross_entropy_uniform_logits_is_ln2() {
        let mut tape = Tape::new();
        let x = tape.var(t2(&[vec![0.0, 0.0]]));
        let l = tape
            .cross_entropy(x, Arc::from(vec![0usize]), Arc::from(vec![true]))
            .unwrap();
        assert!((tape.value(l).item() - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn cross_entropy_rejects_empty_mask() {
        let mut tape = Tape::new();
        let x = tape.var(t2(&[vec![0.0, 0.0]]));
        let err = tape
            .cross_entropy(x, Arc::from(vec![0usize]), Arc::from(vec![false]))
            .unwrap_err();
        assert_eq!(err, AutodiffError::EmptyMask);
    }

    #[test]
    fn segment_sum_two_cycle() {
        let mut tape = Tape::new();
        let e = tape.var(Tensor::column(vec![1.0, 1.0]));
        // edges 0->1 and 1->0, summed at destination
        let s = tape.segment_sum(e, Arc::from(vec![1usize, 0]), 2).unwrap();
        assert_eq!(tape.value(s).data(), &[1.0, 1.0]);
    }

    #[test]
    fn square_gradient() {
        let mut tape = Tape::new();
        let x = tape.var(Tensor::scalar(3.0));
        let y = tape.mul(x, x).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(x).item(), 6.0);
    }

    #[test]
    fn constant_output_has_zero_gradient() {
        let mut tape = Tape::new();
        let x = tape.var(Tensor::scalar(3.0));
        let c = tape.constant(Tensor::scalar(5.0));
        let y = tape.scale(c, 2.0).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(x).item(), 0.0);
    }

    #[test]
    fn backward_needs_scalar() {
        let mut tape = Tape::new();
        let x = tape.var(Tensor::column(vec![1.0, 2.0]));
        assert!(matches!(
            tape.backward(x),
            Err(AutodiffError::NotScalarOutput(_))
        ));
    }

    #[test]
    fn matmul_shape_mismatch() {
        let mut tape = Tape::new();
        let a = tape.var(Tensor::zeros(&[2, 3]));
        let b = tape.var(Tensor::zeros(&[2, 3]));
        assert!(matches!(
            tape.matmul(a, b),
            Err(AutodiffError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn log_of_zero_is_reported() {
        let mut tape = Tape::new();
        let a = tape.var(Tensor::scalar(0.0));
        assert_eq!(
            tape.log(a).unwrap_err(),
            AutodiffError::NonFiniteResult { op: "log" }
        );
    }

    #[test]
    fn fd_of_sum_is_ones() {
        let x = Tensor::column(vec![0.3, -1.2, 4.0]);
        let g = fd_gradient(|t| t.data().iter().sum(), &x, 1e-3);
        for v in g.data() {
            assert!((v - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn fd_of_half_norm_sq() {
        let x = Tensor::column(vec![1.0, 2.0]);
        let g = fd_gradient(|t| 0.5 * t.norm_sq(), &x, 1e-6);
        assert!((g.data()[0] - 1.0).abs() < 1e-8);
        assert!((g.data()[1] - 2.0).abs() < 1e-8);
    }

    #[test]
    fn dropout_rate_zero_is_identity() {
        let mut tape = Tape::new();
        let x = tape.var(Tensor::column(vec![1.0, 2.0]));
        let y = tape.dropout(x, 0.0, 9).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn dropout_is_seeded() {
        assert_eq!(dropout_mask(64, 0.5, 3), dropout_mask(64, 0.5, 3));
        assert_ne!(dropout_mask(64, 0.5, 3), dropout_mask(64, 0.5, 4));
        let m = dropout_mask(64, 0.5, 3);
        assert!(m.iter().all(|&v| v == 0.0 || v == 2.0));
    }
}
