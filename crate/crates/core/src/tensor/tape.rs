use std::borrow::Cow;

use super::kernels::{matmul_acc, matmul_t_acc, matmul_tn_acc, transpose};
use super::{Result, Tensor, TensorError, GELU_CUBIC, GELU_SQRT_2_OVER_PI};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
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
    MatMulT(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddBias(Var, Var),
    Gelu(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        eps: f64,
    },
    GatherRows(Var, Vec<usize>),
    SliceCols {
        x: Var,
        start: usize,
        end: usize,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Reshape(Var),
    SumAll(Var),
    MeanAll(Var),
    Mse(Var, Var),
}

struct Node<'a> {
    value: Cow<'a, Tensor>,
    op: Op,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

/// Records operations in creation order; creation order is a valid
/// topological order, so `backward` simply walks the nodes in reverse.
///
/// Leaves may borrow their value (`'a`) so parameters are not copied
/// into every forward pass.
#[derive(Default)]
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
    score_elements: u64,
}

fn dim_err(op: &'static str, a: &Tensor, b: &Tensor) -> TensorError {
    TensorError::Dimension {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

fn matrix_dims(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        other => Err(TensorError::Dimension {
            op,
            lhs: other.to_vec(),
            rhs: vec![0, 0],
        }),
    }
}

fn gelu_value(x: f64) -> f64 {
    let inner = GELU_SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x);
    0.5 * x * (1.0 + inner.tanh())
}

fn gelu_derivative(x: f64) -> f64 {
    let inner = GELU_SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x);
    let t = inner.tanh();
    let d_inner = GELU_SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_CUBIC * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * d_inner
}

/// Normalized rows `(x - mean) * rstd` plus the per-row `rstd`.
fn layer_norm_stats(x: &Tensor, eps: f64) -> (Vec<f64>, Vec<f64>) {
    let d = x.cols();
    let mut xhat = Vec::with_capacity(x.numel());
    let mut rstd = Vec::with_capacity(x.rows());
    for r in 0..x.rows() {
        let row = x.row(r);
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let rs = 1.0 / (var + eps).sqrt();
        rstd.push(rs);
        xhat.extend(row.iter().map(|v| (v - mean) * rs));
    }
    (xhat, rstd)
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.push_node(Cow::Owned(value), op, requires_grad)
    }

    fn push_node(&mut self, value: Cow<'a, Tensor>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records an owned leaf.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push_node(Cow::Owned(value), Op::Leaf, requires_grad)
    }

    /// Records a leaf that does not take part in differentiation.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Records a borrowed, trainable leaf.
    pub fn param(&mut self, value: &'a Tensor) -> Var {
        self.push_node(Cow::Borrowed(value), Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if `backward` reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    /// Accumulated gradient as a tensor; zeros when the leaf was unreachable.
    pub fn grad_tensor(&self, v: Var) -> Tensor {
        let value = self.value(v);
        match self.grad(v) {
            Some(g) => Tensor::new(value.shape().to_vec(), g.to_vec()).expect("grad shape"),
            None => Tensor::zeros(value.shape()),
        }
    }

    pub fn zero_grads(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    /// Adds `n` to the attention score-element counter.
    pub fn count_scores(&mut self, n: u64) {
        self.score_elements += n;
    }

    /// Total attention score elements computed on this tape.
    pub fn score_elements(&self) -> u64 {
        self.score_elements
    }

    /// Bytes held by values owned by this tape.
    pub fn owned_bytes(&self) -> usize {
        self.nodes
            .iter()
            .filter(|n| matches!(n.value, Cow::Owned(_)))
            .map(|n| n.value.numel() * std::mem::size_of::<f64>())
            .sum()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = matrix_dims("matmul", ta)?;
        let (k2, n) = matrix_dims("matmul", tb)?;
        if k != k2 {
            return Err(dim_err("matmul", ta, tb));
        }
        let mut out = vec![0.0; m * n];
        matmul_acc(&mut out, ta.data(), tb.data(), m, k, n);
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(value, Op::MatMul(a, b), &[a, b]))
    }

    /// `a * b^T` without materializing the transpose.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = matrix_dims("matmul_t", ta)?;
        let (n, k2) = matrix_dims("matmul_t", tb)?;
        if k != k2 {
            return Err(dim_err("matmul_t", ta, tb));
        }
        let mut out = vec![0.0; m * n];
        matmul_t_acc(&mut out, ta.data(), tb.data(), m, k, n);
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(value, Op::MatMulT(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let (r, c) = matrix_dims("transpose", ta)?;
        let value = Tensor::new(vec![c, r], transpose(ta.data(), r, c))?;
        Ok(self.push(value, Op::Transpose(a), &[a]))
    }

    fn binary_shape(&self, op: &'static str, a: Var, b: Var) -> Result<Vec<usize>> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() == tb.shape() || tb.numel() == 1 {
            Ok(ta.shape().to_vec())
        } else if ta.numel() == 1 {
            Ok(tb.shape().to_vec())
        } else {
            Err(dim_err(op, ta, tb))
        }
    }

    fn elementwise(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let shape = self.binary_shape(name, a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let n: usize = shape.iter().product();
        let at = |t: &Tensor, i: usize| if t.numel() == 1 { t.data()[0] } else { t.data()[i] };
        let data = (0..n).map(|i| f(at(ta, i), at(tb, i))).collect();
        let value = Tensor::new(shape, data)?;
        Ok(self.push(value, op, &[a, b]))
    }

    /// Elementwise sum; shapes must match or one side must be a scalar.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let value = self.value(a).map(|v| v * factor);
        self.push(value, Op::Scale(a, factor), &[a])
    }

    /// Adds a length-`n` bias vector to every row of an `m x n` matrix.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(bias));
        if tb.numel() != ta.cols() {
            return Err(dim_err("add_bias", ta, tb));
        }
        let mut value = ta.clone();
        let n = ta.cols();
        for (i, v) in value.data_mut().iter_mut().enumerate() {
            *v += tb.data()[i % n];
        }
        Ok(self.push(value, Op::AddBias(a, bias), &[a, bias]))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(gelu_value);
        self.push(value, Op::Gelu(a), &[a])
    }

    /// Softmax along the last axis with per-row max subtraction.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        if ta.data().iter().any(|v| v.is_nan()) {
            return Err(TensorError::Numeric { op: "softmax_rows" });
        }
        let cols = ta.cols();
        let mut out = Vec::with_capacity(ta.numel());
        for r in 0..ta.rows() {
            let row = ta.row(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if !max.is_finite() {
                return Err(TensorError::Numeric { op: "softmax_rows" });
            }
            let start = out.len();
            out.extend(row.iter().map(|v| (v - max).exp()));
            let total: f64 = out[start..].iter().sum();
            for v in &mut out[start..start + cols] {
                *v /= total;
            }
        }
        let value = Tensor::new(ta.shape().to_vec(), out)?;
        Ok(self.push(value, Op::Softmax(a), &[a]))
    }

    /// Normalizes over the last axis, then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(TensorError::Contract("layer_norm eps must be positive".into()));
        }
        let (tx, tg, tb) = (self.value(x), self.value(gain), self.value(bias));
        let d = tx.cols();
        if tg.numel() != d {
            return Err(dim_err("layer_norm", tx, tg));
        }
        if tb.numel() != d {
            return Err(dim_err("layer_norm", tx, tb));
        }
        let (mut xhat, _) = layer_norm_stats(tx, eps);
        for (i, v) in xhat.iter_mut().enumerate() {
            *v = *v * tg.data()[i % d] + tb.data()[i % d];
        }
        let value = Tensor::new(tx.shape().to_vec(), xhat)?;
        Ok(self.push(value, Op::LayerNorm { x, gain, bias, eps }, &[x, gain, bias]))
    }

    /// Copies rows of an `n x d` matrix in `idx` order.
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let ta = self.value(a);
        let (n, d) = matrix_dims("gather_rows", ta)?;
        if idx.is_empty() {
            return Err(TensorError::Contract("gather_rows with no indices".into()));
        }
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            if i >= n {
                return Err(TensorError::Index {
                    op: "gather_rows",
                    index: i,
                    extent: n,
                });
            }
            data.extend_from_slice(ta.row(i));
        }
        let value = Tensor::new(vec![idx.len(), d], data)?;
        Ok(self.push(value, Op::GatherRows(a, idx.to_vec()), &[a]))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let ta = self.value(a);
        matrix_dims("slice_cols", ta)?;
        let value = ta.slice_cols(start, end)?;
        Ok(self.push(value, Op::SliceCols { x: a, start, end }, &[a]))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| TensorError::Contract("concat_cols of nothing".into()))?;
        let (rows, _) = matrix_dims("concat_cols", self.value(*first))?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let t = self.value(p);
            let (r, c) = matrix_dims("concat_cols", t)?;
            if r != rows {
                return Err(dim_err("concat_cols", self.value(*first), t));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let value = Tensor::new(vec![rows, total], data)?;
        Ok(self.push(value, Op::ConcatCols(parts.to_vec()), parts))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| TensorError::Contract("concat_rows of nothing".into()))?;
        let (_, cols) = matrix_dims("concat_rows", self.value(*first))?;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            let (r, c) = matrix_dims("concat_rows", t)?;
            if c != cols {
                return Err(dim_err("concat_rows", self.value(*first), t));
            }
            rows += r;
            data.extend_from_slice(t.data());
        }
        let value = Tensor::new(vec![rows, cols], data)?;
        Ok(self.push(value, Op::ConcatRows(parts.to_vec()), parts))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).reshaped(shape)?;
        Ok(self.push(value, Op::Reshape(a), &[a]))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::SumAll(a), &[a])
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let m = t.data().iter().sum::<f64>() / t.numel() as f64;
        self.push(Tensor::scalar(m), Op::MeanAll(a), &[a])
    }

    /// Flat mean of squared differences.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(dim_err("mse", ta, tb));
        }
        let n = ta.numel() as f64;
        let m = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            / n;
        Ok(self.push(Tensor::scalar(m), Op::Mse(a, b), &[a, b]))
    }

    /// Reverse pass from a scalar `loss`. Gradients are added onto whatever
    /// the trainable leaves already hold.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(TensorError::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = adj[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                let node = &mut self.nodes[idx];
                match &mut node.grad {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    None => node.grad = Some(g),
                }
                continue;
            }
            self.propagate(idx, &g, &mut adj);
        }
        Ok(())
    }

    fn propagate(&self, idx: usize, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let val = |v: Var| -> &Tensor { &nodes[v.0].value };
        let wants = |v: Var| nodes[v.0].requires_grad;
        macro_rules! slot {
            ($v:expr) => {{
                let v: Var = $v;
                let n = nodes[v.0].value.numel();
                adj[v.0].get_or_insert_with(|| vec![0.0; n])
            }};
        }
        let out = &*nodes[idx].value;

        match &nodes[idx].op {
            Op::Leaf => unreachable!(),
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (m, k) = (ta.shape()[0], ta.shape()[1]);
                let n = tb.shape()[1];
                if wants(*a) {
                    matmul_t_acc(slot!(*a), g, tb.data(), m, n, k);
                }
                if wants(*b) {
                    matmul_tn_acc(slot!(*b), ta.data(), g, k, m, n);
                }
            }
            Op::MatMulT(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (m, k) = (ta.shape()[0], ta.shape()[1]);
                let n = tb.shape()[0];
                if wants(*a) {
                    matmul_acc(slot!(*a), g, tb.data(), m, n, k);
                }
                if wants(*b) {
                    matmul_tn_acc(slot!(*b), g, ta.data(), n, m, k);
                }
            }
            Op::Transpose(a) => {
                if wants(*a) {
                    let (r, c) = (out.shape()[0], out.shape()[1]);
                    let gt = transpose(g, r, c);
                    slot!(*a).iter_mut().zip(&gt).for_each(|(s, v)| *s += v);
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(nodes[idx].op, Op::Sub(..)) { -1.0 } else { 1.0 };
                for (v, s) in [(*a, 1.0), (*b, sign)] {
                    if !wants(v) {
                        continue;
                    }
                    let dst = slot!(v);
                    if dst.len() == 1 && g.len() > 1 {
                        dst[0] += s * g.iter().sum::<f64>();
                    } else {
                        dst.iter_mut().zip(g).for_each(|(d, x)| *d += s * x);
                    }
                }
            }
            Op::Mul(a, b) => {
                for (v, other) in [(*a, *b), (*b, *a)] {
                    if !wants(v) {
                        continue;
                    }
                    let o = val(other).data();
                    let at = |i: usize| if o.len() == 1 { o[0] } else { o[i] };
                    let dst = slot!(v);
                    if dst.len() == 1 && g.len() > 1 {
                        dst[0] += g.iter().enumerate().map(|(i, x)| x * at(i)).sum::<f64>();
                    } else {
                        dst.iter_mut()
                            .zip(g)
                            .enumerate()
                            .for_each(|(i, (d, x))| *d += x * at(i));
                    }
                }
            }
            Op::Scale(a, f) => {
                if wants(*a) {
                    slot!(*a).iter_mut().zip(g).for_each(|(d, x)| *d += f * x);
                }
            }
            Op::AddBias(a, b) => {
                if wants(*a) {
                    slot!(*a).iter_mut().zip(g).for_each(|(d, x)| *d += x);
                }
                if wants(*b) {
                    let n = val(*b).numel();
                    let dst = slot!(*b);
                    for (i, x) in g.iter().enumerate() {
                        dst[i % n] += x;
                    }
                }
            }
            Op::Gelu(a) => {
                if wants(*a) {
                    let x = val(*a).data();
                    slot!(*a)
                        .iter_mut()
                        .zip(g)
                        .zip(x)
                        .for_each(|((d, gv), xv)| *d += gv * gelu_derivative(*xv));
                }
            }
            Op::Softmax(a) => {
                if wants(*a) {
                    let cols = out.cols();
                    let y = out.data();
                    let dst = slot!(*a);
                    for r in 0..out.rows() {
                        let span = r * cols..(r + 1) * cols;
                        let dot: f64 = g[span.clone()].iter().zip(&y[span.clone()]).map(|(p, q)| p * q).sum();
                        for i in span {
                            dst[i] += y[i] * (g[i] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm { x, gain, bias, eps } => {
                let tx = val(*x);
                let d = tx.cols();
                let (xhat, rstd) = layer_norm_stats(tx, *eps);
                let gain_v = val(*gain).data();
                if wants(*gain) {
                    let dst = slot!(*gain);
                    for (i, gv) in g.iter().enumerate() {
                        dst[i % d] += gv * xhat[i];
                    }
                }
                if wants(*bias) {
                    let dst = slot!(*bias);
                    for (i, gv) in g.iter().enumerate() {
                        dst[i % d] += gv;
                    }
                }
                if wants(*x) {
                    let dst = slot!(*x);
                    let mut dxhat = vec![0.0; d];
                    for (r, rs) in rstd.iter().enumerate() {
                        let span = r * d..(r + 1) * d;
                        for (k, i) in span.clone().enumerate() {
                            dxhat[k] = g[i] * gain_v[k];
                        }
                        let mean_d = dxhat.iter().sum::<f64>() / d as f64;
                        let mean_dx = dxhat
                            .iter()
                            .zip(&xhat[span.clone()])
                            .map(|(p, q)| p * q)
                            .sum::<f64>()
                            / d as f64;
                        for (k, i) in span.enumerate() {
                            dst[i] += rs * (dxhat[k] - mean_d - xhat[i] * mean_dx);
                        }
                    }
                }
            }
            Op::GatherRows(a, idxs) => {
                if wants(*a) {
                    let d = out.cols();
                    let dst = slot!(*a);
                    for (k, &row) in idxs.iter().enumerate() {
                        let src = &g[k * d..(k + 1) * d];
                        dst[row * d..(row + 1) * d]
                            .iter_mut()
                            .zip(src)
                            .for_each(|(p, q)| *p += q);
                    }
                }
            }
            Op::SliceCols { x, start, end } => {
                if wants(*x) {
                    let cols = val(*x).cols();
                    let width = end - start;
                    let dst = slot!(*x);
                    for r in 0..out.rows() {
                        let src = &g[r * width..(r + 1) * width];
                        dst[r * cols + start..r * cols + end]
                            .iter_mut()
                            .zip(src)
                            .for_each(|(p, q)| *p += q);
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let total = out.cols();
                let mut offset = 0;
                for &p in parts {
                    let width = val(p).cols();
                    if wants(p) {
                        let dst = slot!(p);
                        for r in 0..out.rows() {
                            let src = &g[r * total + offset..r * total + offset + width];
                            dst[r * width..(r + 1) * width]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(a, b)| *a += b);
                        }
                    }
                    offset += width;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = val(p).numel();
                    if wants(p) {
                        slot!(p)
                            .iter_mut()
                            .zip(&g[offset..offset + n])
                            .for_each(|(a, b)| *a += b);
                    }
                    offset += n;
                }
            }
            Op::Reshape(a) => {
                if wants(*a) {
                    slot!(*a).iter_mut().zip(g).for_each(|(d, x)| *d += x);
                }
            }
            Op::SumAll(a) => {
                if wants(*a) {
                    slot!(*a).iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::MeanAll(a) => {
                if wants(*a) {
                    let n = val(*a).numel() as f64;
                    slot!(*a).iter_mut().for_each(|d| *d += g[0] / n);
                }
            }
            Op::Mse(a, b) => {
                let (ta, tb) = (val(*a).data(), val(*b).data());
                let scale = 2.0 * g[0] / ta.len() as f64;
                if wants(*a) {
                    slot!(*a)
                        .iter_mut()
                        .enumerate()
                        .for_each(|(i, d)| *d += scale * (ta[i] - tb[i]));
                }
                if wants(*b) {
                    slot!(*b)
                        .iter_mut()
                        .enumerate()
                        .for_each(|(i, d)| *d -= scale * (ta[i] - tb[i]));
                }
            }
        }
    }
}
