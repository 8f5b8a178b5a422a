//! Minimal reverse-mode automatic differentiation over dense row-major tensors.
//!
//! A [`Graph`] is a dynamic tape: every operation appends a node holding its
//! output values and a record of how it was produced. [`Graph::backward`]
//! walks the tape in reverse and accumulates vector-Jacobian products into
//! the `grad` buffers of every reachable node that requires a gradient.
//!
//! Most kernels treat a tensor as a matrix of `rows x cols`, where `cols` is
//! the last dimension and `rows` is the product of the leading ones.

mod backward;
pub mod gradcheck;
mod scalar;

use thiserror::Error;

pub use gradcheck::{grad_check, grad_check_many, relative_error};
pub use scalar::Real;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("invalid argument to {op}: {msg}")]
    Argument { op: &'static str, msg: String },
    #[error("non-finite value in {op}")]
    NonFinite { op: &'static str },
    #[error("backward requires a single-element loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
}

pub type Result<T, E = TensorError> = std::result::Result<T, E>;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Operation that produced a node, with the parent handles and whatever the
/// backward pass needs cached from the forward pass.
#[derive(Debug, Clone)]
pub(crate) enum Op {
    Matmul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    WeightedGather {
        src: Var,
        idx: Vec<usize>,
        weights: Vec<f64>,
        k: usize,
    },
    Softmax(Var),
    SoftmaxGroups(Var, usize),
    SumGroups(Var, usize),
    MaxPoolGroups(Var, Vec<usize>),
    Relu(Var),
    LeakyRelu(Var, f64),
    Sigmoid(Var),
    Transpose(Var),
    Sum(Var),
    Mean(Var),
    MinRows(Var, Vec<usize>),
    Sqrt(Var),
    Square(Var),
    L2NormRows(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
}

impl Op {
    pub(crate) fn parents(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Matmul(a, b) | Add(a, b) | AddRow(a, b) | Sub(a, b) | Mul(a, b) | MulCol(a, b) => {
                vec![*a, *b]
            }
            ConcatRows(v) | ConcatCols(v) => v.clone(),
            Scale(a, _)
            | GatherRows(a, _)
            | Softmax(a)
            | SoftmaxGroups(a, _)
            | SumGroups(a, _)
            | MaxPoolGroups(a, _)
            | Relu(a)
            | LeakyRelu(a, _)
            | Sigmoid(a)
            | Transpose(a)
            | Sum(a)
            | Mean(a)
            | MinRows(a, _)
            | Sqrt(a)
            | Square(a)
            | L2NormRows(a) => vec![*a],
            WeightedGather { src, .. } => vec![*src],
            LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
        }
    }

    pub(crate) fn name(&self) -> &'static str {
        use Op::*;
        match self {
            Matmul(..) => "matmul",
            Add(..) => "add",
            AddRow(..) => "add_row",
            Sub(..) => "sub",
            Mul(..) => "mul",
            MulCol(..) => "mul_col",
            Scale(..) => "scale",
            ConcatRows(..) => "concat_rows",
            ConcatCols(..) => "concat_cols",
            GatherRows(..) => "gather_rows",
            WeightedGather { .. } => "weighted_gather",
            Softmax(..) => "softmax_lastdim",
            SoftmaxGroups(..) => "softmax_groups",
            SumGroups(..) => "sum_groups",
            MaxPoolGroups(..) => "max_pool_groups",
            Relu(..) => "relu",
            LeakyRelu(..) => "leaky_relu",
            Sigmoid(..) => "sigmoid",
            Transpose(..) => "transpose_last2",
            Sum(..) => "reduce_sum",
            Mean(..) => "reduce_mean",
            MinRows(..) => "min_over_rows_with_index",
            Sqrt(..) => "sqrt",
            Square(..) => "square",
            L2NormRows(..) => "l2norm_rows",
            LayerNorm { .. } => "layer_norm",
        }
    }
}

/// A node of the tape: values, optional gradient and provenance.
#[derive(Debug, Clone)]
pub struct Tensor<T> {
    pub(crate) shape: Vec<usize>,
    pub(crate) values: Vec<T>,
    pub(crate) requires_grad: bool,
    pub(crate) grad: Option<Vec<T>>,
    pub(crate) op: Option<Op>,
}

impl<T: Real> Tensor<T> {
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.op.is_none()
    }

    /// Name of the producing operation, `None` for leaves.
    pub fn op_name(&self) -> Option<&'static str> {
        self.op.as_ref().map(Op::name)
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn rows_cols(shape: &[usize]) -> (usize, usize) {
    match shape.split_last() {
        Some((&c, rest)) => (rest.iter().product(), c),
        None => (1, 1),
    }
}

/// Dynamic computation tape.
#[derive(Debug, Clone, Default)]
pub struct Graph<T> {
    pub(crate) nodes: Vec<Tensor<T>>,
    strict: bool,
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            strict: false,
        }
    }

    /// In strict mode every op rejects NaN/Inf inputs.
    pub fn strict() -> Self {
        Graph {
            nodes: Vec::new(),
            strict: true,
        }
    }

    pub fn set_strict(&mut self, strict: bool) {
        self.strict = strict;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0]
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].values
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    /// Row count when viewed as a matrix.
    pub fn rows(&self, v: Var) -> usize {
        rows_cols(self.shape(v)).0
    }

    pub fn cols(&self, v: Var) -> usize {
        rows_cols(self.shape(v)).1
    }

    /// Single value of a one-element tensor.
    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].values[0]
    }

    /// Indices selected by a `min_over_rows_with_index` or `max_pool_groups` node.
    pub fn selected_indices(&self, v: Var) -> Option<&[usize]> {
        match &self.nodes[v.0].op {
            Some(Op::MinRows(_, idx)) | Some(Op::MaxPoolGroups(_, idx)) => Some(idx),
            _ => None,
        }
    }

    /// Clears every stored gradient.
    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn push(&mut self, shape: Vec<usize>, values: Vec<T>, op: Option<Op>, requires_grad: bool) -> Var {
        debug_assert_eq!(numel(&shape), values.len());
        self.nodes.push(Tensor {
            shape,
            values,
            requires_grad,
            grad: None,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn record(&mut self, shape: Vec<usize>, values: Vec<T>, op: Op) -> Var {
        let rg = op.parents().iter().any(|p| self.nodes[p.0].requires_grad);
        self.push(shape, values, Some(op), rg)
    }

    fn check_finite(&self, op: &'static str, vars: &[Var]) -> Result<()> {
        if !self.strict {
            return Ok(());
        }
        for v in vars {
            if self.nodes[v.0].values.iter().any(|x| !x.is_finite()) {
                return Err(TensorError::NonFinite { op });
            }
        }
        Ok(())
    }

    fn check_shape(shape: &[usize], len: usize) -> Result<()> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(TensorError::Argument {
                op: "tensor",
                msg: format!("shape {shape:?} must be a nonempty list of positive sizes"),
            });
        }
        if numel(shape) != len {
            return Err(TensorError::Shape {
                op: "tensor",
                lhs: shape.to_vec(),
                rhs: vec![len],
            });
        }
        Ok(())
    }

    /// Leaf that receives a gradient.
    pub fn leaf(&mut self, shape: &[usize], values: Vec<T>) -> Result<Var> {
        Self::check_shape(shape, values.len())?;
        Ok(self.push(shape.to_vec(), values, None, true))
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&mut self, shape: &[usize], values: Vec<T>) -> Result<Var> {
        Self::check_shape(shape, values.len())?;
        Ok(self.push(shape.to_vec(), values, None, false))
    }

    pub fn constant_f64(&mut self, shape: &[usize], values: &[f64]) -> Result<Var> {
        self.constant(shape, values.iter().map(|&v| T::cast_from(v)).collect())
    }

    pub fn zeros(&mut self, shape: &[usize]) -> Result<Var> {
        self.constant(shape, vec![T::zero(); numel(shape)])
    }

    // ---------------------------------------------------------------- ops

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::Shape {
                op: "matmul",
                lhs: sa,
                rhs: sb,
            });
        }
        self.check_finite("matmul", &[a, b])?;
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            T::one(),
            self.value(a),
            k as isize,
            1,
            self.value(b),
            n as isize,
            1,
            T::zero(),
            &mut out,
            n as isize,
            1,
        );
        Ok(self.record(vec![m, n], out, Op::Matmul(a, b)))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::Shape {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        self.check_finite(op, &[a, b])
    }

    fn zip(&mut self, op: Op, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<Var> {
        self.same_shape(op.name(), a, b)?;
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.record(shape, out, op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(Op::Add(a, b), a, b, |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(Op::Sub(a, b), a, b, |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(Op::Mul(a, b), a, b, |x, y| x * y)
    }

    /// Adds a length-`cols` row vector to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (_, c) = rows_cols(self.shape(a));
        if numel(self.shape(row)) != c {
            return Err(TensorError::Shape {
                op: "add_row",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(row).to_vec(),
            });
        }
        self.check_finite("add_row", &[a, row])?;
        let r = self.value(row).to_vec();
        let out = self
            .value(a)
            .chunks(c)
            .flat_map(|chunk| chunk.iter().zip(&r).map(|(&x, &y)| x + y))
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.record(shape, out, Op::AddRow(a, row)))
    }

    /// Multiplies every row of `a` by the matching entry of the column `w` (`[rows, 1]`).
    pub fn mul_col(&mut self, a: Var, w: Var) -> Result<Var> {
        let (r, c) = rows_cols(self.shape(a));
        if numel(self.shape(w)) != r {
            return Err(TensorError::Shape {
                op: "mul_col",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(w).to_vec(),
            });
        }
        self.check_finite("mul_col", &[a, w])?;
        let wv = self.value(w);
        let out = self
            .value(a)
            .chunks(c)
            .zip(wv)
            .flat_map(|(chunk, &s)| chunk.iter().map(move |&x| x * s))
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.record(shape, out, Op::MulCol(a, w)))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        self.check_finite("scale", &[a])?;
        let st = T::cast_from(s);
        let out = self.value(a).iter().map(|&x| x * st).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.record(shape, out, Op::Scale(a, s)))
    }

    /// Stacks matrices with equal column counts vertically.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| TensorError::Argument {
            op: "concat_rows",
            msg: "no inputs".into(),
        })?;
        let c = self.cols(first);
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            if self.cols(p) != c {
                return Err(TensorError::Shape {
                    op: "concat_rows",
                    lhs: self.shape(first).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
            self.check_finite("concat_rows", &[p])?;
            rows += self.rows(p);
            out.extend_from_slice(self.value(p));
        }
        Ok(self.record(vec![rows, c], out, Op::ConcatRows(parts.to_vec())))
    }

    /// Joins matrices with equal row counts side by side.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| TensorError::Argument {
            op: "concat_cols",
            msg: "no inputs".into(),
        })?;
        let r = self.rows(first);
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            if self.rows(p) != r {
                return Err(TensorError::Shape {
                    op: "concat_cols",
                    lhs: self.shape(first).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
            self.check_finite("concat_cols", &[p])?;
            widths.push(self.cols(p));
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p)[i * w..(i + 1) * w]);
            }
        }
        Ok(self.record(vec![r, total], out, Op::ConcatCols(parts.to_vec())))
    }

    /// Selects rows by index (repeats allowed).
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let (r, c) = rows_cols(self.shape(a));
        if let Some(&bad) = idx.iter().find(|&&i| i >= r) {
            return Err(TensorError::Argument {
                op: "gather_rows",
                msg: format!("row index {bad} out of range for {r} rows"),
            });
        }
        if idx.is_empty() {
            return Err(TensorError::Argument {
                op: "gather_rows",
                msg: "empty index list".into(),
            });
        }
        self.check_finite("gather_rows", &[a])?;
        let v = self.value(a);
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            out.extend_from_slice(&v[i * c..(i + 1) * c]);
        }
        Ok(self.record(vec![idx.len(), c], out, Op::GatherRows(a, idx.to_vec())))
    }

    /// Contiguous row range `[start, start + len)`.
    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let idx: Vec<usize> = (start..start + len).collect();
        self.gather_rows(a, &idx)
    }

    /// Output row `r` is `sum_j weights[r*k + j] * a[idx[r*k + j]]`.
    pub fn weighted_gather(&mut self, a: Var, idx: &[usize], weights: &[f64], k: usize) -> Result<Var> {
        let (r, c) = rows_cols(self.shape(a));
        if k == 0 || idx.len() != weights.len() || idx.is_empty() || !idx.len().is_multiple_of(k) {
            return Err(TensorError::Argument {
                op: "weighted_gather",
                msg: format!("{} indices, {} weights, group size {k}", idx.len(), weights.len()),
            });
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= r) {
            return Err(TensorError::Argument {
                op: "weighted_gather",
                msg: format!("row index {bad} out of range for {r} rows"),
            });
        }
        self.check_finite("weighted_gather", &[a])?;
        let q = idx.len() / k;
        let v = self.value(a);
        let mut out = vec![T::zero(); q * c];
        for row in 0..q {
            let dst = &mut out[row * c..(row + 1) * c];
            for j in 0..k {
                let src = idx[row * k + j];
                let w = T::cast_from(weights[row * k + j]);
                for (d, &s) in dst.iter_mut().zip(&v[src * c..(src + 1) * c]) {
                    *d = *d + w * s;
                }
            }
        }
        Ok(self.record(
            vec![q, c],
            out,
            Op::WeightedGather {
                src: a,
                idx: idx.to_vec(),
                weights: weights.to_vec(),
                k,
            },
        ))
    }

    /// Softmax along the last dimension.
    pub fn softmax_lastdim(&mut self, a: Var) -> Result<Var> {
        self.check_finite("softmax_lastdim", &[a])?;
        let (_, c) = rows_cols(self.shape(a));
        let mut out = self.value(a).to_vec();
        for row in out.chunks_mut(c) {
            softmax_in_place(row);
        }
        let shape = self.shape(a).to_vec();
        Ok(self.record(shape, out, Op::Softmax(a)))
    }

    /// Softmax over consecutive groups of `k` rows, independently per column.
    pub fn softmax_groups(&mut self, a: Var, k: usize) -> Result<Var> {
        let (r, c) = self.group_dims("softmax_groups", a, k)?;
        let v = self.value(a);
        let mut out = vec![T::zero(); r * c];
        let mut buf = vec![T::zero(); k];
        for g in 0..r / k {
            for col in 0..c {
                for j in 0..k {
                    buf[j] = v[(g * k + j) * c + col];
                }
                softmax_in_place(&mut buf);
                for j in 0..k {
                    out[(g * k + j) * c + col] = buf[j];
                }
            }
        }
        let shape = self.shape(a).to_vec();
        Ok(self.record(shape, out, Op::SoftmaxGroups(a, k)))
    }

    /// Sums consecutive groups of `k` rows: `[q*k, c] -> [q, c]`.
    pub fn sum_groups(&mut self, a: Var, k: usize) -> Result<Var> {
        let (r, c) = self.group_dims("sum_groups", a, k)?;
        let v = self.value(a);
        let mut out = vec![T::zero(); (r / k) * c];
        for (row, chunk) in v.chunks(c).enumerate() {
            let dst = &mut out[(row / k) * c..(row / k + 1) * c];
            for (d, &s) in dst.iter_mut().zip(chunk) {
                *d = *d + s;
            }
        }
        Ok(self.record(vec![r / k, c], out, Op::SumGroups(a, k)))
    }

    /// Max over consecutive groups of `k` rows per column; ties pick the first row.
    pub fn max_pool_groups(&mut self, a: Var, k: usize) -> Result<Var> {
        let (r, c) = self.group_dims("max_pool_groups", a, k)?;
        let v = self.value(a);
        let q = r / k;
        let mut out = vec![T::zero(); q * c];
        let mut arg = vec![0usize; q * c];
        for g in 0..q {
            for col in 0..c {
                let mut best = g * k;
                for j in 1..k {
                    let row = g * k + j;
                    if v[row * c + col] > v[best * c + col] {
                        best = row;
                    }
                }
                out[g * c + col] = v[best * c + col];
                arg[g * c + col] = best;
            }
        }
        Ok(self.record(vec![q, c], out, Op::MaxPoolGroups(a, arg)))
    }

    fn group_dims(&self, op: &'static str, a: Var, k: usize) -> Result<(usize, usize)> {
        let (r, c) = rows_cols(self.shape(a));
        if k == 0 || r % k != 0 {
            return Err(TensorError::Argument {
                op,
                msg: format!("{r} rows not divisible into groups of {k}"),
            });
        }
        self.check_finite(op, &[a])?;
        Ok((r, c))
    }

    fn map(&mut self, op: Op, a: Var, f: impl Fn(T) -> T) -> Result<Var> {
        self.check_finite(op.name(), &[a])?;
        let out = self.value(a).iter().map(|&x| f(x)).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.record(shape, out, op))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.map(Op::Relu(a), a, |x| if x > T::zero() { x } else { T::zero() })
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Result<Var> {
        if !(slope > 0.0 && slope < 1.0) {
            return Err(TensorError::Argument {
                op: "leaky_relu",
                msg: format!("slope {slope} outside (0, 1)"),
            });
        }
        let s = T::cast_from(slope);
        self.map(Op::LeakyRelu(a, slope), a, move |x| if x > T::zero() { x } else { x * s })
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.map(Op::Sigmoid(a), a, |x| T::one() / (T::one() + (-x).exp()))
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        self.map(Op::Sqrt(a), a, |x| x.sqrt())
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.map(Op::Square(a), a, |x| x * x)
    }

    /// Swaps the last two dimensions.
    pub fn transpose_last2(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.len() < 2 {
            return Err(TensorError::Argument {
                op: "transpose_last2",
                msg: format!("rank {} < 2", shape.len()),
            });
        }
        self.check_finite("transpose_last2", &[a])?;
        let (m, n) = (shape[shape.len() - 2], shape[shape.len() - 1]);
        let batch = numel(&shape) / (m * n);
        let v = self.value(a);
        let mut out = vec![T::zero(); v.len()];
        for b in 0..batch {
            let off = b * m * n;
            for i in 0..m {
                for j in 0..n {
                    out[off + j * m + i] = v[off + i * n + j];
                }
            }
        }
        let mut new_shape = shape;
        let l = new_shape.len();
        new_shape.swap(l - 1, l - 2);
        Ok(self.record(new_shape, out, Op::Transpose(a)))
    }

    pub fn reduce_sum(&mut self, a: Var) -> Result<Var> {
        self.check_finite("reduce_sum", &[a])?;
        let s = self.value(a).iter().fold(T::zero(), |acc, &x| acc + x);
        Ok(self.record(vec![1], vec![s], Op::Sum(a)))
    }

    pub fn reduce_mean(&mut self, a: Var) -> Result<Var> {
        self.check_finite("reduce_mean", &[a])?;
        let v = self.value(a);
        let s = v.iter().fold(T::zero(), |acc, &x| acc + x) / T::cast_from(v.len() as f64);
        Ok(self.record(vec![1], vec![s], Op::Mean(a)))
    }

    /// Per-row minimum over the last dimension, `[r, c] -> [r, 1]`.
    ///
    /// Ties select the lowest column; the gradient flows only to it.
    pub fn min_over_rows_with_index(&mut self, a: Var) -> Result<Var> {
        self.check_finite("min_over_rows_with_index", &[a])?;
        let (r, c) = rows_cols(self.shape(a));
        let v = self.value(a);
        let mut out = Vec::with_capacity(r);
        let mut arg = Vec::with_capacity(r);
        for row in v.chunks(c) {
            let mut best = 0;
            for j in 1..c {
                if row[j] < row[best] {
                    best = j;
                }
            }
            out.push(row[best]);
            arg.push(best);
        }
        Ok(self.record(vec![r, 1], out, Op::MinRows(a, arg)))
    }

    /// Euclidean norm of every row, `[r, c] -> [r, 1]`.
    pub fn l2norm_rows(&mut self, a: Var) -> Result<Var> {
        self.check_finite("l2norm_rows", &[a])?;
        let (r, c) = rows_cols(self.shape(a));
        let out = self
            .value(a)
            .chunks(c)
            .map(|row| row.iter().fold(T::zero(), |acc, &x| acc + x * x).sqrt())
            .collect();
        Ok(self.record(vec![r, 1], out, Op::L2NormRows(a)))
    }

    /// `x w`, plus a broadcast bias row when given.
    pub fn linear(&mut self, x: Var, w: Var, bias: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match bias {
            Some(b) => self.add_row(y, b),
            None => Ok(y),
        }
    }

    /// Per-row normalization over the last dimension followed by a learned affine map.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (r, c) = rows_cols(self.shape(x));
        if numel(self.shape(gamma)) != c || numel(self.shape(beta)) != c {
            return Err(TensorError::Shape {
                op: "layer_norm",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(gamma).to_vec(),
            });
        }
        self.check_finite("layer_norm", &[x, gamma, beta])?;
        let v = self.value(x);
        let (gv, bv) = (self.value(gamma), self.value(beta));
        let mut xhat = Vec::with_capacity(r * c);
        let mut rstd = Vec::with_capacity(r);
        let mut out = Vec::with_capacity(r * c);
        for row in v.chunks(c) {
            let mean = row.iter().map(|x| x.as_f64()).sum::<f64>() / c as f64;
            let var = row.iter().map(|x| (x.as_f64() - mean).powi(2)).sum::<f64>() / c as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd.push(rs);
            for (j, &xv) in row.iter().enumerate() {
                let h = (xv.as_f64() - mean) * rs;
                xhat.push(h);
                out.push(T::cast_from(h) * gv[j] + bv[j]);
            }
        }
        let shape = self.shape(x).to_vec();
        Ok(self.record(
            shape,
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
        ))
    }
}

fn softmax_in_place<T: Real>(row: &mut [T]) {
    let max = row.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
    let mut sum = T::zero();
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum = sum + *x;
    }
    for x in row.iter_mut() {
        *x = *x / sum;
    }
}
