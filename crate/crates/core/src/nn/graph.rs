//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! Every op appends a node holding its forward value. [`Graph::backward`]
//! walks the tape in reverse and only propagates into nodes that require a
//! gradient, so an inference graph with constant weights computes input
//! gradients without paying for weight gradients.

use super::tensor::{Layout, Scalar, Tensor};
use crate::error::{shape_err, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BatchNormMode {
    /// Normalize with the batch statistics (recorded on the node).
    Batch,
    /// Normalize with fixed running statistics.
    Running,
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulConst(Var, Tensor<T>),
    Scale(Var, T),
    Silu(Var),
    Relu(Var),
    Tanh(Var),
    Square(Var),
    SumAll(Var),
    MeanAll(Var),
    Concat(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    Im2Col {
        x: Var,
        layout: Layout,
        width: usize,
    },
    SegmentMean(Var, Layout),
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Tensor<T>,
        inv_std: Vec<T>,
        mode: BatchNormMode,
    },
    LogSoftmax(Var),
    PickCols(Var, Vec<usize>),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

pub struct Graph<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
    non_finite: Option<&'static str>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar with respect to every node that required one.
pub struct Grads<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            non_finite: None,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, name: &'static str, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        if self.non_finite.is_none() && !value.is_finite() {
            self.non_finite = Some(name);
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Name of the first op that produced a NaN or infinity, if any.
    pub fn check_finite(&self) -> Result<()> {
        match self.non_finite {
            Some(op) => Err(Error::NonFinite { op }),
            None => Ok(()),
        }
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push("leaf", value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push("matmul", value, Op::MatMul(a, b), rg))
    }

    /// Adds a `[cols]` vector to every row of a `[rows, cols]` matrix.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.row_broadcast(a, b, "add_row", |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push("add_row", value, Op::AddRow(a, b), rg))
    }

    /// Multiplies every row of a `[rows, cols]` matrix by a `[cols]` vector.
    pub fn mul_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.row_broadcast(a, b, "mul_row", |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push("mul_row", value, Op::MulRow(a, b), rg))
    }

    fn row_broadcast(
        &self,
        a: Var,
        b: Var,
        op: &'static str,
        f: impl Fn(T, T) -> T,
    ) -> Result<Tensor<T>> {
        let (av, bv) = (self.value(a), self.value(b));
        let c = av.cols();
        if bv.len() != c {
            return Err(shape_err(op, format!("{:?} with {:?}", av.shape(), bv.shape())));
        }
        let mut out = av.clone();
        for row in out.data_mut().chunks_mut(c.max(1)) {
            for (x, &y) in row.iter_mut().zip(bv.data()) {
                *x = f(*x, y);
            }
        }
        Ok(out)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push("add", value, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).sub(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push("sub", value, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), "mul", |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push("mul", value, Op::Mul(a, b), rg))
    }

    /// Elementwise product with a constant tensor of the same shape.
    pub fn mul_const(&mut self, a: Var, c: Tensor<T>) -> Result<Var> {
        let value = self.value(a).zip_map(&c, "mul_const", |x, y| x * y)?;
        let rg = self.rg(a);
        Ok(self.push("mul_const", value, Op::MulConst(a, c), rg))
    }

    pub fn scale(&mut self, a: Var, k: T) -> Var {
        let value = self.value(a).scale(k);
        let rg = self.rg(a);
        self.push("scale", value, Op::Scale(a, k), rg)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x * sigmoid(x));
        let rg = self.rg(a);
        self.push("silu", value, Op::Silu(a), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.max(T::zero()));
        let rg = self.rg(a);
        self.push("relu", value, Op::Relu(a), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).map(T::tanh);
        let rg = self.rg(a);
        self.push("tanh", value, Op::Tanh(a), rg)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x * x);
        let rg = self.rg(a);
        self.push("square", value, Op::Square(a), rg)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = T::lit(self.value(a).sum_f64());
        let rg = self.rg(a);
        self.push("sum_all", Tensor::scalar(s), Op::SumAll(a), rg)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let s = T::lit(self.value(a).mean_f64());
        let rg = self.rg(a);
        self.push("mean_all", Tensor::scalar(s), Op::MeanAll(a), rg)
    }

    /// Column-wise concatenation of matrices with equal row counts.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.value(parts[0]).rows();
        let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).cols()).collect();
        if parts.iter().any(|&p| self.value(p).rows() != rows) {
            return Err(shape_err("concat", "row counts differ"));
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(r));
            }
        }
        let value = Tensor::matrix(rows, total, out)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push("concat", value, Op::Concat(parts.to_vec()), rg))
    }

    /// `out[i] = a[idx[i]]` row-wise; used for embeddings and frame expansion.
    pub fn gather_rows(&mut self, a: Var, idx: Vec<usize>) -> Result<Var> {
        let av = self.value(a);
        let c = av.cols();
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in &idx {
            if i >= av.rows() {
                return Err(shape_err("gather_rows", format!("row {i} of {}", av.rows())));
            }
            out.extend_from_slice(av.row(i));
        }
        let value = Tensor::matrix(idx.len(), c, out)?;
        let rg = self.rg(a);
        Ok(self.push("gather_rows", value, Op::GatherRows(a, idx), rg))
    }

    /// Unfolds `[rows, c]` into `[rows, width * c]` windows centred on each
    /// row, zero padded at segment edges. Followed by a matmul this is a
    /// same-padded 1-D convolution that never mixes utterances.
    pub fn im2col(&mut self, x: Var, layout: &Layout, width: usize) -> Result<Var> {
        let xv = self.value(x);
        if xv.rows() != layout.total() {
            return Err(shape_err("im2col", format!("{} rows vs layout {}", xv.rows(), layout.total())));
        }
        if width.is_multiple_of(2) {
            return Err(shape_err("im2col", "kernel width must be odd"));
        }
        let c = xv.cols();
        let half = width / 2;
        let mut out = vec![T::zero(); xv.rows() * width * c];
        for seg in layout.segments() {
            for r in seg.clone() {
                let dst = &mut out[r * width * c..(r + 1) * width * c];
                for k in 0..width {
                    let src = r as isize + k as isize - half as isize;
                    if src >= seg.start as isize && src < seg.end as isize {
                        dst[k * c..(k + 1) * c].copy_from_slice(xv.row(src as usize));
                    }
                }
            }
        }
        let value = Tensor::matrix(xv.rows(), width * c, out)?;
        let rg = self.rg(x);
        Ok(self.push(
            "im2col",
            value,
            Op::Im2Col {
                x,
                layout: layout.clone(),
                width,
            },
            rg,
        ))
    }

    /// Mean over the rows of each segment: `[rows, c] -> [segments, c]`.
    pub fn segment_mean(&mut self, x: Var, layout: &Layout) -> Result<Var> {
        let xv = self.value(x);
        if xv.rows() != layout.total() {
            return Err(shape_err("segment_mean", "layout does not cover rows"));
        }
        let c = xv.cols();
        let mut out = Vec::with_capacity(layout.num_segments() * c);
        for seg in layout.segments() {
            let n = seg.len().max(1) as f64;
            let mut acc = vec![0.0f64; c];
            for r in seg {
                for (a, v) in acc.iter_mut().zip(xv.row(r)) {
                    *a += v.f64();
                }
            }
            out.extend(acc.into_iter().map(|a| T::lit(a / n)));
        }
        let value = Tensor::matrix(layout.num_segments(), c, out)?;
        let rg = self.rg(x);
        Ok(self.push("segment_mean", value, Op::SegmentMean(x, layout.clone()), rg))
    }

    /// Per-channel normalization over rows followed by a learned affine map.
    ///
    /// With [`BatchNormMode::Batch`] the returned `(mean, var)` are the batch
    /// statistics, for the caller to fold into running estimates. With
    /// [`BatchNormMode::Running`] `stats` supplies them and the op is affine.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: BatchNormMode,
        stats: Option<(&[T], &[T])>,
        eps: T,
    ) -> Result<(Var, Vec<T>, Vec<T>)> {
        let xv = self.value(x);
        let (n, c) = (xv.rows(), xv.cols());
        if self.value(gamma).len() != c || self.value(beta).len() != c {
            return Err(shape_err("batch_norm", "affine parameters do not match channels"));
        }
        let (mean, var) = match mode {
            BatchNormMode::Batch => {
                if n == 0 {
                    return Err(shape_err("batch_norm", "empty batch"));
                }
                let mut mean = vec![0.0f64; c];
                for r in 0..n {
                    for (m, v) in mean.iter_mut().zip(xv.row(r)) {
                        *m += v.f64();
                    }
                }
                mean.iter_mut().for_each(|m| *m /= n as f64);
                let mut var = vec![0.0f64; c];
                for r in 0..n {
                    for ((s, v), m) in var.iter_mut().zip(xv.row(r)).zip(&mean) {
                        let d = v.f64() - m;
                        *s += d * d;
                    }
                }
                var.iter_mut().for_each(|s| *s /= n as f64);
                (
                    mean.into_iter().map(T::lit).collect::<Vec<_>>(),
                    var.into_iter().map(T::lit).collect::<Vec<_>>(),
                )
            }
            BatchNormMode::Running => {
                let (m, v) = stats.ok_or_else(|| shape_err("batch_norm", "running mode needs statistics"))?;
                if m.len() != c || v.len() != c {
                    return Err(shape_err("batch_norm", "running statistics do not match channels"));
                }
                (m.to_vec(), v.to_vec())
            }
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let mut xhat = xv.clone();
        for row in xhat.data_mut().chunks_mut(c.max(1)) {
            for j in 0..c {
                row[j] = (row[j] - mean[j]) * inv_std[j];
            }
        }
        let (gv, bv) = (self.value(gamma).data(), self.value(beta).data());
        let mut y = xhat.clone();
        for row in y.data_mut().chunks_mut(c.max(1)) {
            for j in 0..c {
                row[j] = row[j] * gv[j] + bv[j];
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let out = self.push(
            "batch_norm",
            y,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                mode,
            },
            rg,
        );
        Ok((out, mean, var))
    }

    /// Row-wise log-softmax.
    pub fn log_softmax(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let c = av.cols().max(1);
        let mut out = av.clone();
        for row in out.data_mut().chunks_mut(c) {
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = mx + row.iter().map(|&v| (v - mx).exp()).sum::<T>().ln();
            row.iter_mut().for_each(|v| *v -= lse);
        }
        let rg = self.rg(a);
        self.push("log_softmax", out, Op::LogSoftmax(a), rg)
    }

    /// `out[i] = a[i, cols[i]]`.
    pub fn pick_cols(&mut self, a: Var, cols: Vec<usize>) -> Result<Var> {
        let av = self.value(a);
        if cols.len() != av.rows() || cols.iter().any(|&j| j >= av.cols()) {
            return Err(shape_err("pick_cols", "column index per row out of range"));
        }
        let data = cols.iter().enumerate().map(|(i, &j)| av.row(i)[j]).collect();
        let value = Tensor::new(vec![cols.len()], data)?;
        let rg = self.rg(a);
        Ok(self.push("pick_cols", value, Op::PickCols(a, cols), rg))
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Grads<T>> {
        self.check_finite()?;
        if self.value(loss).len() != 1 {
            return Err(shape_err("backward", "loss must be a scalar"));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), T::one()));

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            self.propagate(&node.op, &node.value, &g, &mut grads)?;
            grads[id] = Some(g);
        }
        Ok(Grads { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) -> Result<()> {
        if !self.rg(v) {
            return Ok(());
        }
        match &mut grads[v.0] {
            Some(acc) => acc.axpy(T::one(), &g),
            slot @ None => {
                *slot = Some(g);
                Ok(())
            }
        }
    }

    fn propagate(
        &self,
        op: &Op<T>,
        out: &Tensor<T>,
        g: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) -> Result<()> {
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                if self.rg(*a) {
                    let mut da = vec![T::zero(); m * k];
                    T::gemm(m, n, k, g.data(), false, bv.data(), true, T::zero(), &mut da);
                    self.accumulate(grads, *a, Tensor::new(av.shape().to_vec(), da)?)?;
                }
                if self.rg(*b) {
                    let mut db = vec![T::zero(); k * n];
                    T::gemm(k, m, n, av.data(), true, g.data(), false, T::zero(), &mut db);
                    self.accumulate(grads, *b, Tensor::new(bv.shape().to_vec(), db)?)?;
                }
            }
            Op::AddRow(a, b) => {
                self.accumulate(grads, *a, g.clone())?;
                if self.rg(*b) {
                    let db = col_sums(g);
                    let shape = self.value(*b).shape().to_vec();
                    self.accumulate(grads, *b, Tensor::new(shape, db)?)?;
                }
            }
            Op::MulRow(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let c = av.cols().max(1);
                if self.rg(*a) {
                    let mut da = g.clone();
                    for row in da.data_mut().chunks_mut(c) {
                        for (x, &y) in row.iter_mut().zip(bv.data()) {
                            *x *= y;
                        }
                    }
                    self.accumulate(grads, *a, da)?;
                }
                if self.rg(*b) {
                    let prod = g.zip_map(av, "mul_row", |x, y| x * y)?;
                    self.accumulate(grads, *b, Tensor::new(bv.shape().to_vec(), col_sums(&prod))?)?;
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone())?;
                self.accumulate(grads, *b, g.clone())?;
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone())?;
                if self.rg(*b) {
                    self.accumulate(grads, *b, g.scale(-T::one()))?;
                }
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    let da = g.zip_map(self.value(*b), "mul", |x, y| x * y)?;
                    self.accumulate(grads, *a, da)?;
                }
                if self.rg(*b) {
                    let db = g.zip_map(self.value(*a), "mul", |x, y| x * y)?;
                    self.accumulate(grads, *b, db)?;
                }
            }
            Op::MulConst(a, c) => {
                self.accumulate(grads, *a, g.zip_map(c, "mul_const", |x, y| x * y)?)?;
            }
            Op::Scale(a, k) => {
                self.accumulate(grads, *a, g.scale(*k))?;
            }
            Op::Silu(a) => {
                let d = self.value(*a).zip_map(g, "silu", |x, gy| {
                    let s = sigmoid(x);
                    gy * s * (T::one() + x * (T::one() - s))
                })?;
                self.accumulate(grads, *a, d)?;
            }
            Op::Relu(a) => {
                let d = self.value(*a).zip_map(g, "relu", |x, gy| {
                    if x > T::zero() {
                        gy
                    } else {
                        T::zero()
                    }
                })?;
                self.accumulate(grads, *a, d)?;
            }
            Op::Tanh(a) => {
                let d = out.zip_map(g, "tanh", |y, gy| gy * (T::one() - y * y))?;
                self.accumulate(grads, *a, d)?;
            }
            Op::Square(a) => {
                let two = T::lit(2.0);
                let d = self.value(*a).zip_map(g, "square", |x, gy| two * x * gy)?;
                self.accumulate(grads, *a, d)?;
            }
            Op::SumAll(a) => {
                let shape = self.value(*a).shape().to_vec();
                self.accumulate(grads, *a, Tensor::full(&shape, g.item()))?;
            }
            Op::MeanAll(a) => {
                let av = self.value(*a);
                let k = g.item() / T::lit(av.len().max(1) as f64);
                self.accumulate(grads, *a, Tensor::full(av.shape(), k))?;
            }
            Op::Concat(parts) => {
                let mut start = 0;
                let total = g.cols();
                for &p in parts {
                    let w = self.value(p).cols();
                    if self.rg(p) {
                        let mut d = Vec::with_capacity(g.rows() * w);
                        for r in 0..g.rows() {
                            d.extend_from_slice(&g.data()[r * total + start..r * total + start + w]);
                        }
                        self.accumulate(grads, p, Tensor::new(self.value(p).shape().to_vec(), d)?)?;
                    }
                    start += w;
                }
            }
            Op::GatherRows(a, idx) => {
                let av = self.value(*a);
                let mut d = Tensor::zeros(av.shape());
                for (i, &src) in idx.iter().enumerate() {
                    for (x, &y) in d.row_mut(src).iter_mut().zip(g.row(i)) {
                        *x += y;
                    }
                }
                self.accumulate(grads, *a, d)?;
            }
            Op::Im2Col { x, layout, width } => {
                let xv = self.value(*x);
                let c = xv.cols();
                let half = width / 2;
                let mut d = Tensor::zeros(xv.shape());
                for seg in layout.segments() {
                    for r in seg.clone() {
                        let src_row = &g.data()[r * width * c..(r + 1) * width * c];
                        for k in 0..*width {
                            let src = r as isize + k as isize - half as isize;
                            if src >= seg.start as isize && src < seg.end as isize {
                                for (x, &y) in d.row_mut(src as usize).iter_mut().zip(&src_row[k * c..(k + 1) * c]) {
                                    *x += y;
                                }
                            }
                        }
                    }
                }
                self.accumulate(grads, *x, d)?;
            }
            Op::SegmentMean(x, layout) => {
                let xv = self.value(*x);
                let mut d = Tensor::zeros(xv.shape());
                for (s, seg) in layout.segments().enumerate() {
                    let inv = T::one() / T::lit(seg.len().max(1) as f64);
                    for r in seg {
                        for (x, &y) in d.row_mut(r).iter_mut().zip(g.row(s)) {
                            *x = y * inv;
                        }
                    }
                }
                self.accumulate(grads, *x, d)?;
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                mode,
            } => {
                let c = xhat.cols().max(1);
                let n = xhat.rows();
                let gv = self.value(*gamma).data();
                if self.rg(*gamma) {
                    let prod = g.zip_map(xhat, "batch_norm", |a, b| a * b)?;
                    let shape = self.value(*gamma).shape().to_vec();
                    self.accumulate(grads, *gamma, Tensor::new(shape, col_sums(&prod))?)?;
                }
                if self.rg(*beta) {
                    let shape = self.value(*beta).shape().to_vec();
                    self.accumulate(grads, *beta, Tensor::new(shape, col_sums(g))?)?;
                }
                if self.rg(*x) {
                    let mut dxhat = g.clone();
                    for row in dxhat.data_mut().chunks_mut(c) {
                        for j in 0..c {
                            row[j] *= gv[j];
                        }
                    }
                    let mut dx = dxhat.clone();
                    match mode {
                        BatchNormMode::Running => {
                            for row in dx.data_mut().chunks_mut(c) {
                                for j in 0..c {
                                    row[j] *= inv_std[j];
                                }
                            }
                        }
                        BatchNormMode::Batch => {
                            let sum_d = col_sums(&dxhat);
                            let sum_dx = col_sums(&dxhat.zip_map(xhat, "batch_norm", |a, b| a * b)?);
                            let nn = T::lit(n as f64);
                            for (r, row) in dx.data_mut().chunks_mut(c).enumerate() {
                                let xr = xhat.row(r);
                                for j in 0..c {
                                    row[j] = inv_std[j] / nn
                                        * (nn * row[j] - sum_d[j] - xr[j] * sum_dx[j]);
                                }
                            }
                        }
                    }
                    self.accumulate(grads, *x, dx)?;
                }
            }
            Op::LogSoftmax(a) => {
                let c = out.cols().max(1);
                let mut d = g.clone();
                for (r, row) in d.data_mut().chunks_mut(c).enumerate() {
                    let total: T = g.row(r).iter().copied().sum();
                    for (j, v) in row.iter_mut().enumerate() {
                        *v -= out.row(r)[j].exp() * total;
                    }
                }
                self.accumulate(grads, *a, d)?;
            }
            Op::PickCols(a, cols) => {
                let av = self.value(*a);
                let mut d = Tensor::zeros(av.shape());
                for (i, &j) in cols.iter().enumerate() {
                    d.row_mut(i)[j] = g.data()[i];
                }
                self.accumulate(grads, *a, d)?;
            }
        }
        Ok(())
    }
}

fn col_sums<T: Scalar>(t: &Tensor<T>) -> Vec<T> {
    let c = t.cols();
    let mut acc = vec![0.0f64; c];
    for r in 0..t.rows() {
        for (a, v) in acc.iter_mut().zip(t.row(r)) {
            *a += v.f64();
        }
    }
    acc.into_iter().map(T::lit).collect()
}
