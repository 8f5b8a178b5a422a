use super::{rows_cols, Graph, Op, Real, Result, Tensor, TensorError, Var};

impl<T: Real> Graph<T> {
    /// Reverse pass from a single-element `loss`.
    ///
    /// Gradients accumulate into any existing `grad` buffers; call
    /// [`Graph::zero_grad`] first for a fresh pass.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].values.len() != 1 {
            return Err(TensorError::NonScalarLoss(self.nodes[loss.0].shape.clone()));
        }
        let mut reach = vec![false; loss.0 + 1];
        reach[loss.0] = true;
        for i in (0..=loss.0).rev() {
            if !reach[i] || !self.nodes[i].requires_grad {
                continue;
            }
            if let Some(op) = &self.nodes[i].op {
                for p in op.parents() {
                    reach[p.0] = true;
                }
            }
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        accumulate(&mut self.nodes[loss.0], vec![T::one()]);

        for i in (0..=loss.0).rev() {
            if !reach[i] || !self.nodes[i].requires_grad {
                continue;
            }
            let (before, rest) = self.nodes.split_at_mut(i);
            let node = &rest[0];
            let (Some(op), Some(grad)) = (&node.op, &node.grad) else {
                continue;
            };
            for (parent, contribution) in vjp(before, node, op, grad) {
                if before[parent.0].requires_grad {
                    accumulate(&mut before[parent.0], contribution);
                }
            }
        }
        Ok(())
    }
}

fn accumulate<T: Real>(node: &mut Tensor<T>, contribution: Vec<T>) {
    match &mut node.grad {
        Some(g) => {
            for (a, b) in g.iter_mut().zip(contribution) {
                *a = *a + b;
            }
        }
        None => node.grad = Some(contribution),
    }
}

/// Vector-Jacobian products of one node with respect to each parent.
fn vjp<T: Real>(nodes: &[Tensor<T>], node: &Tensor<T>, op: &Op, g: &[T]) -> Vec<(Var, Vec<T>)> {
    let val = |v: &Var| nodes[v.0].values.as_slice();
    let shape = |v: &Var| nodes[v.0].shape.as_slice();
    let wants = |v: &Var| nodes[v.0].requires_grad;
    let y = node.values.as_slice();
    let (rows, cols) = rows_cols(&node.shape);

    match op {
        Op::Matmul(a, b) => {
            let (m, k) = (shape(a)[0], shape(a)[1]);
            let n = shape(b)[1];
            let mut out = Vec::new();
            if wants(a) {
                // dA = G B^T
                let mut da = vec![T::zero(); m * k];
                T::gemm(m, n, k, T::one(), g, n as isize, 1, val(b), 1, n as isize, T::zero(), &mut da, k as isize, 1);
                out.push((*a, da));
            }
            if wants(b) {
                // dB = A^T G
                let mut db = vec![T::zero(); k * n];
                T::gemm(k, m, n, T::one(), val(a), 1, k as isize, g, n as isize, 1, T::zero(), &mut db, n as isize, 1);
                out.push((*b, db));
            }
            out
        }
        Op::Add(a, b) => vec![(*a, g.to_vec()), (*b, g.to_vec())],
        Op::Sub(a, b) => vec![(*a, g.to_vec()), (*b, g.iter().map(|&x| -x).collect())],
        Op::Mul(a, b) => {
            let (av, bv) = (val(a), val(b));
            vec![
                (*a, g.iter().zip(bv).map(|(&gi, &bi)| gi * bi).collect()),
                (*b, g.iter().zip(av).map(|(&gi, &ai)| gi * ai).collect()),
            ]
        }
        Op::AddRow(a, r) => {
            let mut dr = vec![T::zero(); cols];
            for row in g.chunks(cols) {
                for (d, &x) in dr.iter_mut().zip(row) {
                    *d = *d + x;
                }
            }
            vec![(*a, g.to_vec()), (*r, dr)]
        }
        Op::MulCol(a, w) => {
            let (av, wv) = (val(a), val(w));
            let mut da = Vec::with_capacity(g.len());
            let mut dw = Vec::with_capacity(rows);
            for (i, (grow, arow)) in g.chunks(cols).zip(av.chunks(cols)).enumerate() {
                da.extend(grow.iter().map(|&x| x * wv[i]));
                dw.push(grow.iter().zip(arow).fold(T::zero(), |s, (&x, &y)| s + x * y));
            }
            vec![(*a, da), (*w, dw)]
        }
        Op::Scale(a, s) => {
            let s = T::cast_from(*s);
            vec![(*a, g.iter().map(|&x| x * s).collect())]
        }
        Op::ConcatRows(parts) => {
            let mut off = 0;
            parts
                .iter()
                .map(|p| {
                    let n = val(p).len();
                    let c = (*p, g[off..off + n].to_vec());
                    off += n;
                    c
                })
                .collect()
        }
        Op::ConcatCols(parts) => {
            let mut col_off = 0;
            parts
                .iter()
                .map(|p| {
                    let w = rows_cols(shape(p)).1;
                    let mut d = Vec::with_capacity(rows * w);
                    for row in g.chunks(cols) {
                        d.extend_from_slice(&row[col_off..col_off + w]);
                    }
                    col_off += w;
                    (*p, d)
                })
                .collect()
        }
        Op::GatherRows(a, idx) => {
            let mut d = vec![T::zero(); val(a).len()];
            for (row, &src) in idx.iter().enumerate() {
                let dst = &mut d[src * cols..(src + 1) * cols];
                for (x, &gi) in dst.iter_mut().zip(&g[row * cols..(row + 1) * cols]) {
                    *x = *x + gi;
                }
            }
            vec![(*a, d)]
        }
        Op::WeightedGather { src, idx, weights, k } => {
            let mut d = vec![T::zero(); val(src).len()];
            for (slot, (&s, &w)) in idx.iter().zip(weights).enumerate() {
                let row = slot / k;
                let w = T::cast_from(w);
                let dst = &mut d[s * cols..(s + 1) * cols];
                for (x, &gi) in dst.iter_mut().zip(&g[row * cols..(row + 1) * cols]) {
                    *x = *x + w * gi;
                }
            }
            vec![(*src, d)]
        }
        Op::Softmax(a) => {
            let mut d = Vec::with_capacity(g.len());
            for (grow, yrow) in g.chunks(cols).zip(y.chunks(cols)) {
                let dot = grow.iter().zip(yrow).fold(T::zero(), |s, (&x, &yy)| s + x * yy);
                d.extend(grow.iter().zip(yrow).map(|(&x, &yy)| yy * (x - dot)));
            }
            vec![(*a, d)]
        }
        Op::SoftmaxGroups(a, k) => {
            let k = *k;
            let mut d = vec![T::zero(); g.len()];
            for grp in 0..rows / k {
                for c in 0..cols {
                    let at = |j: usize| (grp * k + j) * cols + c;
                    let dot = (0..k).fold(T::zero(), |s, j| s + g[at(j)] * y[at(j)]);
                    for j in 0..k {
                        d[at(j)] = y[at(j)] * (g[at(j)] - dot);
                    }
                }
            }
            vec![(*a, d)]
        }
        Op::SumGroups(a, k) => {
            let mut d = Vec::with_capacity(val(a).len());
            for grow in g.chunks(cols) {
                for _ in 0..*k {
                    d.extend_from_slice(grow);
                }
            }
            vec![(*a, d)]
        }
        Op::MaxPoolGroups(a, arg) => {
            let mut d = vec![T::zero(); val(a).len()];
            for (slot, (&src_row, &gi)) in arg.iter().zip(g).enumerate() {
                let c = slot % cols;
                d[src_row * cols + c] = d[src_row * cols + c] + gi;
            }
            vec![(*a, d)]
        }
        Op::Relu(a) => {
            let av = val(a);
            vec![(*a, g.iter().zip(av).map(|(&gi, &x)| if x > T::zero() { gi } else { T::zero() }).collect())]
        }
        Op::LeakyRelu(a, slope) => {
            let s = T::cast_from(*slope);
            let av = val(a);
            vec![(*a, g.iter().zip(av).map(|(&gi, &x)| if x > T::zero() { gi } else { gi * s }).collect())]
        }
        Op::Sigmoid(a) => vec![(*a, g.iter().zip(y).map(|(&gi, &s)| gi * s * (T::one() - s)).collect())],
        Op::Transpose(a) => {
            let sa = shape(a);
            let (m, n) = (sa[sa.len() - 2], sa[sa.len() - 1]);
            let mut d = vec![T::zero(); g.len()];
            for b in 0..g.len() / (m * n) {
                let off = b * m * n;
                for i in 0..m {
                    for j in 0..n {
                        d[off + i * n + j] = g[off + j * m + i];
                    }
                }
            }
            vec![(*a, d)]
        }
        Op::Sum(a) => vec![(*a, vec![g[0]; val(a).len()])],
        Op::Mean(a) => {
            let n = val(a).len();
            vec![(*a, vec![g[0] / T::cast_from(n as f64); n])]
        }
        Op::MinRows(a, arg) => {
            let in_cols = rows_cols(shape(a)).1;
            let mut d = vec![T::zero(); val(a).len()];
            for (r, (&j, &gi)) in arg.iter().zip(g).enumerate() {
                d[r * in_cols + j] = gi;
            }
            vec![(*a, d)]
        }
        Op::Sqrt(a) => {
            let half = T::cast_from(0.5);
            vec![(*a, g.iter().zip(y).map(|(&gi, &s)| if s > T::zero() { gi * half / s } else { T::zero() }).collect())]
        }
        Op::Square(a) => {
            let two = T::cast_from(2.0);
            vec![(*a, g.iter().zip(val(a)).map(|(&gi, &x)| gi * two * x).collect())]
        }
        Op::L2NormRows(a) => {
            let av = val(a);
            let in_cols = rows_cols(shape(a)).1;
            let mut d = Vec::with_capacity(av.len());
            for (r, row) in av.chunks(in_cols).enumerate() {
                let n = y[r];
                if n > T::zero() {
                    d.extend(row.iter().map(|&x| g[r] * x / n));
                } else {
                    d.extend(std::iter::repeat_n(T::zero(), in_cols));
                }
            }
            vec![(*a, d)]
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            rstd,
        } => {
            let gv = val(gamma);
            let mut dx = Vec::with_capacity(g.len());
            let mut dgamma = vec![0.0f64; cols];
            let mut dbeta = vec![0.0f64; cols];
            let c = cols as f64;
            for r in 0..rows {
                let grow = &g[r * cols..(r + 1) * cols];
                let hrow = &xhat[r * cols..(r + 1) * cols];
                let mut mean_dh = 0.0;
                let mut mean_dh_h = 0.0;
                for j in 0..cols {
                    let gj = grow[j].as_f64();
                    dgamma[j] += gj * hrow[j];
                    dbeta[j] += gj;
                    let dh = gj * gv[j].as_f64();
                    mean_dh += dh;
                    mean_dh_h += dh * hrow[j];
                }
                mean_dh /= c;
                mean_dh_h /= c;
                for j in 0..cols {
                    let dh = grow[j].as_f64() * gv[j].as_f64();
                    dx.push(T::cast_from(rstd[r] * (dh - mean_dh - hrow[j] * mean_dh_h)));
                }
            }
            vec![
                (*x, dx),
                (*gamma, dgamma.into_iter().map(T::cast_from).collect()),
                (*beta, dbeta.into_iter().map(T::cast_from).collect()),
            ]
        }
    }
}
