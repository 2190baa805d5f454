//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every operation of a forward pass as a node holding its
//! output value and the ids of its inputs. Nodes are appended in execution
//! order, so the node list is already topologically sorted and
//! [`Tape::backward`] simply walks it in reverse, visiting each node once.
//!
//! Handles to nodes are plain [`Var`] ids; all ops are methods on the tape:
//!
//! ```
//! use dkgh_core::{Tape, Tensor};
//!
//! let x = Tensor::<f64>::from_f64(&[3], &[1.0, 2.0, 3.0]).unwrap().with_grad();
//! let mut tape = Tape::new();
//! let v = tape.param(&x);
//! let sq = tape.mul(v, v).unwrap();
//! let loss = tape.sum(sq).unwrap();
//! tape.backward(loss).unwrap();
//! assert_eq!(x.grad().unwrap(), vec![2.0, 4.0, 6.0]);
//! ```
//!
//! Parameters are borrowed by the tape (`'p`) and receive gradients through
//! their interior gradient buffer, so a model can run forward with `&self`
//! and be updated with `&mut self` once the tape is dropped.

use alloc::vec;
use alloc::vec::Vec;
use core::ops::Deref;

use crate::error::{DkghError, Result};
use crate::kernels::{self, ConvGeom};
use crate::real::Real;
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

enum Value<'p, T> {
    Owned(Tensor<T>),
    Param(&'p Tensor<T>),
}

impl<T> Deref for Value<'_, T> {
    type Target = Tensor<T>;

    fn deref(&self) -> &Tensor<T> {
        match self {
            Value::Owned(t) => t,
            Value::Param(t) => t,
        }
    }
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    AddRowBias(Var, Var),
    AddChannelBias(Var, Var),
    Conv2d { x: Var, w: Var, geom: ConvGeom },
    GlobalAvgPool(Var),
    Relu(Var),
    Sigmoid(Var),
    Softmax { x: Var, axis: usize },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Sum(Var),
    MeanRows(Var),
    Reshape(Var),
    Take { x: Var, index: Vec<usize> },
    SelectRows { x: Var, rows: Vec<usize> },
    ScatterRows { parts: Vec<(Var, Vec<usize>)> },
    MulRows(Var, Var),
    ConcatCols(Var, Var),
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<T> },
}

struct Node<'p, T> {
    value: Value<'p, T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Records a forward computation for one backward pass.
///
/// Single-threaded by construction: every op takes `&mut self`.
pub struct Tape<'p, T> {
    nodes: Vec<Node<'p, T>>,
}

impl<T: Real> Default for Tape<'_, T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Splits a shape into `(rows, rest)` around the leading axis.
fn rows_and_stride(shape: &[usize]) -> (usize, usize) {
    match shape.split_first() {
        Some((&r, rest)) => (r, rest.iter().product()),
        None => (1, 1),
    }
}

impl<'p, T: Real> Tape<'p, T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push_node(Value::Owned(t), Op::Leaf, false)
    }

    /// Owned leaf; gradients are tracked when `t.requires_grad()`, and can be
    /// read back through [`Tape::value`] after backward.
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        let needs = t.requires_grad();
        self.push_node(Value::Owned(t), Op::Leaf, needs)
    }

    /// Borrowed parameter; backward accumulates into its gradient buffer.
    pub fn param(&mut self, t: &'p Tensor<T>) -> Var {
        let needs = t.requires_grad();
        self.push_node(Value::Param(t), Op::Leaf, needs)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push_node(&mut self, value: Value<'p, T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, name: &'static str, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(DkghError::NonFinite { op: name });
        }
        let needs = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        Ok(self.push_node(Value::Owned(value), op, needs))
    }

    fn expect_rank(&self, op: &'static str, v: Var, rank: usize) -> Result<()> {
        let shape = self.shape(v);
        if shape.len() != rank {
            let want = vec![0; rank];
            return Err(DkghError::dim(op, shape, &want));
        }
        Ok(())
    }

    // ---------------------------------------------------------------- linear algebra

    /// `[m,k] × [k,n] → [m,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(DkghError::dim("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        kernels::gemm_nn(m, k, n, self.value(a).data(), self.value(b).data(), &mut out);
        self.push("matmul", Tensor::new(&[m, n], out)?, Op::MatMul(a, b), &[a, b])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.expect_rank("transpose", a, 2)?;
        let t = self.value(a);
        let (m, n) = (t.shape()[0], t.shape()[1]);
        let src = t.data();
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        self.push("transpose", Tensor::new(&[n, m], out)?, Op::Transpose(a), &[a])
    }

    /// `x[B,F] + b[F]`, bias repeated over rows.
    pub fn add_row_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x), self.shape(b));
        if sx.len() != 2 || sb.len() != 1 || sx[1] != sb[0] {
            return Err(DkghError::dim("add_row_bias", sx, sb));
        }
        let f = sb[0];
        let bias = self.value(b).data();
        let out: Vec<T> = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + bias[i % f])
            .collect();
        let shape = sx.to_vec();
        self.push("add_row_bias", Tensor::new(&shape, out)?, Op::AddRowBias(x, b), &[x, b])
    }

    /// `x[B,C,H,W] + b[C]`, bias repeated over batch and space.
    pub fn add_channel_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x), self.shape(b));
        if sx.len() != 4 || sb.len() != 1 || sx[1] != sb[0] {
            return Err(DkghError::dim("add_channel_bias", sx, sb));
        }
        let (c, hw) = (sx[1], sx[2] * sx[3]);
        let bias = self.value(b).data();
        let out: Vec<T> = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + bias[(i / hw) % c])
            .collect();
        let shape = sx.to_vec();
        self.push(
            "add_channel_bias",
            Tensor::new(&shape, out)?,
            Op::AddChannelBias(x, b),
            &[x, b],
        )
    }

    /// 2-D cross-correlation with zero padding, no bias.
    ///
    /// `x[B,C,H,W]`, `w[O,C,kh,kw]` → `[B,O,H',W']` with
    /// `H' = (H + 2·pad − kh) / stride + 1`.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x), self.shape(w));
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] {
            return Err(DkghError::dim("conv2d", sx, sw));
        }
        if stride == 0 {
            return Err(DkghError::Contract("conv2d stride must be >= 1".into()));
        }
        let (batch, channels, height, width) = (sx[0], sx[1], sx[2], sx[3]);
        let (out_c, kh, kw) = (sw[0], sw[2], sw[3]);
        if kh > height + 2 * pad || kw > width + 2 * pad {
            return Err(DkghError::dim("conv2d", sx, sw));
        }
        let geom = ConvGeom {
            channels,
            height,
            width,
            kh,
            kw,
            stride,
            pad,
            out_h: (height + 2 * pad - kh) / stride + 1,
            out_w: (width + 2 * pad - kw) / stride + 1,
        };
        let (rows, cols) = (geom.col_rows(), geom.col_cols());
        let in_size = channels * height * width;
        let xd = self.value(x).data();
        let wd = self.value(w).data();
        let mut out = vec![T::zero(); batch * out_c * cols];
        let mut col = vec![T::zero(); rows * cols];
        for b in 0..batch {
            kernels::im2col(&geom, &xd[b * in_size..(b + 1) * in_size], &mut col);
            kernels::gemm_nn(
                out_c,
                rows,
                cols,
                wd,
                &col,
                &mut out[b * out_c * cols..(b + 1) * out_c * cols],
            );
        }
        let y = Tensor::new(&[batch, out_c, geom.out_h, geom.out_w], out)?;
        self.push("conv2d", y, Op::Conv2d { x, w, geom }, &[x, w])
    }

    /// `[B,C,H,W] → [B,C]`, mean over the spatial plane.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        self.expect_rank("global_avg_pool", x, 4)?;
        let s = self.shape(x);
        let (b, c, hw) = (s[0], s[1], s[2] * s[3]);
        let scale = T::one() / T::lit(hw as f64);
        let out: Vec<T> = self
            .value(x)
            .data()
            .chunks_exact(hw)
            .map(|plane| plane.iter().copied().sum::<T>() * scale)
            .collect();
        self.push("global_avg_pool", Tensor::new(&[b, c], out)?, Op::GlobalAvgPool(x), &[x])
    }

    // ---------------------------------------------------------------- elementwise

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let out = t.data().iter().map(|&v| v.max(T::zero())).collect();
        let shape = t.shape().to_vec();
        self.push("relu", Tensor::new(&shape, out)?, Op::Relu(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let out = t.data().iter().map(|&v| sigmoid(v)).collect();
        let shape = t.shape().to_vec();
        self.push("sigmoid", Tensor::new(&shape, out)?, Op::Sigmoid(x), &[x])
    }

    /// Softmax along `axis`, max-shifted so large inputs cannot overflow.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = self.value(x);
        let shape = t.shape().to_vec();
        if axis >= shape.len() {
            return Err(DkghError::Contract(alloc::format!(
                "softmax axis {axis} out of range for {shape:?}"
            )));
        }
        let mut out = t.data().to_vec();
        for_each_lane(&shape, axis, |idx| softmax_lane(&mut out, idx));
        self.push("softmax", Tensor::new(&shape, out)?, Op::Softmax { x, axis }, &[x])
    }

    fn zip_same(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(DkghError::dim(name, ta.shape(), tb.shape()));
        }
        let out = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let shape = ta.shape().to_vec();
        self.push(name, Tensor::new(&shape, out)?, op, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Result<Var> {
        let t = self.value(x);
        let out = t.data().iter().map(|&v| v * s).collect();
        let shape = t.shape().to_vec();
        self.push("scale", Tensor::new(&shape, out)?, Op::Scale(x, s), &[x])
    }

    /// Multiplies each leading-axis slice `x[r, ..]` by the scalar `s[r]`.
    pub fn mul_rows(&mut self, x: Var, s: Var) -> Result<Var> {
        let (tx, ts) = (self.value(x), self.value(s));
        let (rows, stride) = rows_and_stride(tx.shape());
        if tx.rank() == 0 || ts.numel() != rows {
            return Err(DkghError::dim("mul_rows", tx.shape(), ts.shape()));
        }
        let sd = ts.data();
        let out = tx
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v * sd[i / stride])
            .collect();
        let shape = tx.shape().to_vec();
        self.push("mul_rows", Tensor::new(&shape, out)?, Op::MulRows(x, s), &[x, s])
    }

    // ---------------------------------------------------------------- reductions / reshaping

    /// Sum of all elements, as a rank-0 scalar.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let total: T = self.value(x).data().iter().copied().sum();
        self.push("sum", Tensor::scalar(total), Op::Sum(x), &[x])
    }

    /// Mean over the leading axis: `[n, ...] → [...]`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.rank() < 2 {
            return Err(DkghError::dim("mean_rows", t.shape(), &[0, 0]));
        }
        let (rows, stride) = rows_and_stride(t.shape());
        let mut out = vec![T::zero(); stride];
        for row in t.data().chunks_exact(stride) {
            out.iter_mut().zip(row).for_each(|(o, &v)| *o += v);
        }
        let inv = T::one() / T::lit(rows as f64);
        out.iter_mut().for_each(|o| *o *= inv);
        let shape = t.shape()[1..].to_vec();
        self.push("mean_rows", Tensor::new(&shape, out)?, Op::MeanRows(x), &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).reshaped(shape)?;
        self.push("reshape", t, Op::Reshape(x), &[x])
    }

    /// Gathers elements of `x` at row-major flat positions into a tensor of `shape`.
    pub fn take(&mut self, x: Var, index: Vec<usize>, shape: &[usize]) -> Result<Var> {
        let t = self.value(x);
        if index.iter().any(|&i| i >= t.numel()) {
            return Err(DkghError::Contract("take: index out of range".into()));
        }
        let out = index.iter().map(|&i| t.data()[i]).collect();
        let y = Tensor::new(shape, out)?;
        self.push("take", y, Op::Take { x, index }, &[x])
    }

    /// Selects leading-axis slices `x[rows[0]], x[rows[1]], ...`.
    pub fn select_rows(&mut self, x: Var, rows: Vec<usize>) -> Result<Var> {
        let t = self.value(x);
        let (n, stride) = rows_and_stride(t.shape());
        if t.rank() == 0 || rows.is_empty() || rows.iter().any(|&r| r >= n) {
            return Err(DkghError::Contract("select_rows: invalid row selection".into()));
        }
        let mut out = Vec::with_capacity(rows.len() * stride);
        for &r in &rows {
            out.extend_from_slice(&t.data()[r * stride..(r + 1) * stride]);
        }
        let mut shape = t.shape().to_vec();
        shape[0] = rows.len();
        self.push("select_rows", Tensor::new(&shape, out)?, Op::SelectRows { x, rows }, &[x])
    }

    /// Builds a `[rows, row_shape..]` tensor by adding each part's slices into
    /// the rows it names. Rows no part touches are zero.
    pub fn scatter_rows(&mut self, rows: usize, row_shape: &[usize], parts: Vec<(Var, Vec<usize>)>) -> Result<Var> {
        let stride: usize = row_shape.iter().product();
        let mut shape = vec![rows];
        shape.extend_from_slice(row_shape);
        let mut out = vec![T::zero(); rows * stride];
        for (part, idx) in &parts {
            let t = self.value(*part);
            if t.shape().first() != Some(&idx.len()) || &t.shape()[1..] != row_shape {
                return Err(DkghError::dim("scatter_rows", t.shape(), &shape));
            }
            for (src, &r) in t.data().chunks_exact(stride).zip(idx) {
                if r >= rows {
                    return Err(DkghError::Contract("scatter_rows: row out of range".into()));
                }
                out[r * stride..(r + 1) * stride]
                    .iter_mut()
                    .zip(src)
                    .for_each(|(o, &v)| *o += v);
            }
        }
        let inputs: Vec<Var> = parts.iter().map(|(v, _)| *v).collect();
        self.push("scatter_rows", Tensor::new(&shape, out)?, Op::ScatterRows { parts }, &inputs)
    }

    /// `[B,d1] ‖ [B,d2] → [B,d1+d2]`.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[0] != sb[0] {
            return Err(DkghError::dim("concat_cols", sa, sb));
        }
        let (rows, d1, d2) = (sa[0], sa[1], sb[1]);
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(rows * (d1 + d2));
        for r in 0..rows {
            out.extend_from_slice(&da[r * d1..(r + 1) * d1]);
            out.extend_from_slice(&db[r * d2..(r + 1) * d2]);
        }
        self.push("concat_cols", Tensor::new(&[rows, d1 + d2], out)?, Op::ConcatCols(a, b), &[a, b])
    }

    /// Mean negative log-likelihood of `labels` under `softmax(logits)`,
    /// computed through log-sum-exp.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let t = self.value(logits);
        if t.rank() != 2 || t.shape()[0] != labels.len() {
            return Err(DkghError::dim("cross_entropy", t.shape(), &[labels.len()]));
        }
        let classes = t.shape()[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(DkghError::Validation(alloc::format!(
                "label {bad} out of range for {classes} classes"
            )));
        }
        let mut probs = t.data().to_vec();
        let mut total = T::zero();
        for (row, &label) in probs.chunks_exact_mut(classes).zip(labels) {
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<T>().ln();
            total += lse - row[label];
            row.iter_mut().for_each(|v| *v = (*v - lse).exp());
        }
        let loss = total / T::lit(labels.len() as f64);
        let op = Op::CrossEntropy {
            logits,
            labels: labels.to_vec(),
            probs,
        };
        self.push("cross_entropy", Tensor::scalar(loss), op, &[logits])
    }

    // ---------------------------------------------------------------- backward

    /// Back-propagates from a one-element `loss`, accumulating into the
    /// gradient buffer of every leaf that requires a gradient.
    ///
    /// Calling it twice without zeroing the parameters' gradients adds the
    /// second pass on top of the first.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(DkghError::Contract(alloc::format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![T::one()]);
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else {
                continue;
            };
            let node = &self.nodes[id];
            if !node.needs_grad {
                continue;
            }
            self.backward_node(node, &g, &mut grads);
        }
        Ok(())
    }

    fn backward_node(&self, node: &Node<'p, T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let needs = |v: Var| self.nodes[v.0].needs_grad;
        let val = |v: Var| -> &Tensor<T> { &self.nodes[v.0].value };
        match &node.op {
            Op::Leaf => node.value.accumulate_grad(g),
            Op::MatMul(a, b) => {
                let (sa, sb) = (val(*a).shape(), val(*b).shape());
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if needs(*a) {
                    let mut da = vec![T::zero(); m * k];
                    kernels::gemm_nt(m, n, k, g, val(*b).data(), &mut da);
                    accumulate(grads, *a, da);
                }
                if needs(*b) {
                    let mut db = vec![T::zero(); k * n];
                    kernels::gemm_tn(k, m, n, val(*a).data(), g, &mut db);
                    accumulate(grads, *b, db);
                }
            }
            Op::Transpose(a) => {
                let s = val(*a).shape();
                let (m, n) = (s[0], s[1]);
                let mut da = vec![T::zero(); m * n];
                for i in 0..m {
                    for j in 0..n {
                        da[i * n + j] = g[j * m + i];
                    }
                }
                accumulate(grads, *a, da);
            }
            Op::AddRowBias(x, b) => {
                if needs(*x) {
                    accumulate(grads, *x, g.to_vec());
                }
                if needs(*b) {
                    let f = val(*b).numel();
                    let mut db = vec![T::zero(); f];
                    for row in g.chunks_exact(f) {
                        db.iter_mut().zip(row).for_each(|(d, &v)| *d += v);
                    }
                    accumulate(grads, *b, db);
                }
            }
            Op::AddChannelBias(x, b) => {
                if needs(*x) {
                    accumulate(grads, *x, g.to_vec());
                }
                if needs(*b) {
                    let s = val(*x).shape();
                    let (c, hw) = (s[1], s[2] * s[3]);
                    let mut db = vec![T::zero(); c];
                    for (i, plane) in g.chunks_exact(hw).enumerate() {
                        db[i % c] += plane.iter().copied().sum::<T>();
                    }
                    accumulate(grads, *b, db);
                }
            }
            Op::Conv2d { x, w, geom } => {
                let (xd, wd) = (val(*x).data(), val(*w).data());
                let batch = val(*x).shape()[0];
                let out_c = val(*w).shape()[0];
                let (rows, cols) = (geom.col_rows(), geom.col_cols());
                let in_size = geom.channels * geom.height * geom.width;
                let mut col = vec![T::zero(); rows * cols];
                let mut dw = needs(*w).then(|| vec![T::zero(); wd.len()]);
                let mut dx = needs(*x).then(|| vec![T::zero(); xd.len()]);
                let mut dcol = vec![T::zero(); if dx.is_some() { rows * cols } else { 0 }];
                for b in 0..batch {
                    let gy = &g[b * out_c * cols..(b + 1) * out_c * cols];
                    if let Some(dw) = dw.as_mut() {
                        kernels::im2col(geom, &xd[b * in_size..(b + 1) * in_size], &mut col);
                        kernels::gemm_nt(out_c, cols, rows, gy, &col, dw);
                    }
                    if let Some(dx) = dx.as_mut() {
                        dcol.iter_mut().for_each(|v| *v = T::zero());
                        kernels::gemm_tn(rows, out_c, cols, wd, gy, &mut dcol);
                        kernels::col2im(geom, &dcol, &mut dx[b * in_size..(b + 1) * in_size]);
                    }
                }
                if let Some(dw) = dw {
                    accumulate(grads, *w, dw);
                }
                if let Some(dx) = dx {
                    accumulate(grads, *x, dx);
                }
            }
            Op::GlobalAvgPool(x) => {
                let s = val(*x).shape();
                let hw = s[2] * s[3];
                let inv = T::one() / T::lit(hw as f64);
                let dx = (0..g.len() * hw).map(|i| g[i / hw] * inv).collect();
                accumulate(grads, *x, dx);
            }
            Op::Relu(x) => {
                let dx = val(*x)
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&v, &d)| if v > T::zero() { d } else { T::zero() })
                    .collect();
                accumulate(grads, *x, dx);
            }
            Op::Sigmoid(x) => {
                let dx = node
                    .value
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&y, &d)| d * y * (T::one() - y))
                    .collect();
                accumulate(grads, *x, dx);
            }
            Op::Softmax { x, axis } => {
                let y = node.value.data();
                let mut dx = vec![T::zero(); y.len()];
                for_each_lane(node.value.shape(), *axis, |idx| {
                    let dot: T = idx.clone().map(|i| g[i] * y[i]).sum();
                    for i in idx {
                        dx[i] = y[i] * (g[i] - dot);
                    }
                });
                accumulate(grads, *x, dx);
            }
            Op::Add(a, b) => {
                if needs(*a) {
                    accumulate(grads, *a, g.to_vec());
                }
                if needs(*b) {
                    accumulate(grads, *b, g.to_vec());
                }
            }
            Op::Sub(a, b) => {
                if needs(*a) {
                    accumulate(grads, *a, g.to_vec());
                }
                if needs(*b) {
                    accumulate(grads, *b, g.iter().map(|&v| -v).collect());
                }
            }
            Op::Mul(a, b) => {
                if needs(*a) {
                    let da = g.iter().zip(val(*b).data()).map(|(&d, &v)| d * v).collect();
                    accumulate(grads, *a, da);
                }
                if needs(*b) {
                    let db = g.iter().zip(val(*a).data()).map(|(&d, &v)| d * v).collect();
                    accumulate(grads, *b, db);
                }
            }
            Op::Scale(x, s) => {
                accumulate(grads, *x, g.iter().map(|&d| d * *s).collect());
            }
            Op::MulRows(x, s) => {
                let (xd, sd) = (val(*x).data(), val(*s).data());
                let stride = xd.len() / sd.len();
                if needs(*x) {
                    let dx = g.iter().enumerate().map(|(i, &d)| d * sd[i / stride]).collect();
                    accumulate(grads, *x, dx);
                }
                if needs(*s) {
                    let ds = g
                        .chunks_exact(stride)
                        .zip(xd.chunks_exact(stride))
                        .map(|(gr, xr)| gr.iter().zip(xr).map(|(&a, &b)| a * b).sum())
                        .collect();
                    accumulate(grads, *s, ds);
                }
            }
            Op::Sum(x) => {
                accumulate(grads, *x, vec![g[0]; val(*x).numel()]);
            }
            Op::MeanRows(x) => {
                let (rows, stride) = rows_and_stride(val(*x).shape());
                let inv = T::one() / T::lit(rows as f64);
                let dx = (0..rows * stride).map(|i| g[i % stride] * inv).collect();
                accumulate(grads, *x, dx);
            }
            Op::Reshape(x) => accumulate(grads, *x, g.to_vec()),
            Op::Take { x, index } => {
                let mut dx = vec![T::zero(); val(*x).numel()];
                for (&i, &d) in index.iter().zip(g) {
                    dx[i] += d;
                }
                accumulate(grads, *x, dx);
            }
            Op::SelectRows { x, rows } => {
                let t = val(*x);
                let (_, stride) = rows_and_stride(t.shape());
                let mut dx = vec![T::zero(); t.numel()];
                for (src, &r) in g.chunks_exact(stride).zip(rows) {
                    dx[r * stride..(r + 1) * stride]
                        .iter_mut()
                        .zip(src)
                        .for_each(|(o, &v)| *o += v);
                }
                accumulate(grads, *x, dx);
            }
            Op::ScatterRows { parts } => {
                let (_, stride) = rows_and_stride(node.value.shape());
                for (part, idx) in parts {
                    if !needs(*part) {
                        continue;
                    }
                    let mut dp = Vec::with_capacity(idx.len() * stride);
                    for &r in idx {
                        dp.extend_from_slice(&g[r * stride..(r + 1) * stride]);
                    }
                    accumulate(grads, *part, dp);
                }
            }
            Op::ConcatCols(a, b) => {
                let (rows, d1) = (val(*a).shape()[0], val(*a).shape()[1]);
                let d2 = val(*b).shape()[1];
                if needs(*a) {
                    let da = (0..rows)
                        .flat_map(|r| g[r * (d1 + d2)..r * (d1 + d2) + d1].iter().copied())
                        .collect();
                    accumulate(grads, *a, da);
                }
                if needs(*b) {
                    let db = (0..rows)
                        .flat_map(|r| g[r * (d1 + d2) + d1..(r + 1) * (d1 + d2)].iter().copied())
                        .collect();
                    accumulate(grads, *b, db);
                }
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let classes = probs.len() / labels.len();
                let scale = g[0] / T::lit(labels.len() as f64);
                let mut dx: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                for (r, &l) in labels.iter().enumerate() {
                    dx[r * classes + l] -= scale;
                }
                accumulate(grads, *logits, dx);
            }
        }
    }
}

fn accumulate<T: Real>(grads: &mut [Option<Vec<T>>], v: Var, g: Vec<T>) {
    match &mut grads[v.0] {
        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
        slot @ None => *slot = Some(g),
    }
}

/// Numerically stable logistic function.
pub fn sigmoid<T: Real>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

/// Calls `f` with the flat positions of every 1-D lane along `axis`.
fn for_each_lane(shape: &[usize], axis: usize, mut f: impl FnMut(core::iter::StepBy<core::ops::Range<usize>>)) {
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    for o in 0..outer {
        for i in 0..inner {
            let start = o * len * inner + i;
            f((start..start + len * inner).step_by(inner));
        }
    }
}

fn softmax_lane<T: Real>(data: &mut [T], idx: core::iter::StepBy<core::ops::Range<usize>>) {
    let m = idx.clone().map(|i| data[i]).fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for i in idx.clone() {
        data[i] = (data[i] - m).exp();
        total += data[i];
    }
    for i in idx {
        data[i] /= total;
    }
}

/// Softmax of a plain slice; the same computation as [`Tape::softmax`].
pub fn softmax_slice<T: Real>(values: &[T]) -> Vec<T> {
    let mut out = values.to_vec();
    let n = out.len();
    softmax_lane(&mut out, (0..n).step_by(1));
    out
}
