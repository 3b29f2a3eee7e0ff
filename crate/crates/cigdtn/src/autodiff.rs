//! Reverse-mode differentiation on a recorded operation tape.
//!
//! Forward calls allocate value buffers in an arena and append one record
//! per primitive; `backward` replays the records in exact reverse execution
//! order, accumulating adjoints. One tape covers one training step and is
//! never shared. Parameters that never reach the loss get exactly-zero
//! gradients.
//!
//! Forward kernels delegate to the same `Tensor` / attention routines the
//! plain (non-differentiated) code paths use, so a tape evaluation is
//! bit-identical to the plain composition of the same ops.

use std::sync::Arc;

use crate::attention::{sparse_apply_kernel, sparse_scores_kernel, SparsePattern};
use crate::dsp::InterpMap;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{gelu, gelu_grad, Tensor};

/// Handle to a tape buffer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BufId(usize);

#[derive(Clone)]
enum Op<T> {
    Matmul { a: BufId, b: BufId },
    Add { a: BufId, b: BufId },
    Sub { a: BufId, b: BufId },
    Mul { a: BufId, b: BufId },
    Scale { x: BufId, c: T },
    AddScalar { x: BufId },
    RowBias { x: BufId, bias: BufId },
    RowScale { x: BufId, scale: BufId },
    Gelu { x: BufId },
    Abs { x: BufId },
    Hypot { a: BufId, b: BufId },
    LayerNormRows { x: BufId, eps: T },
    SoftmaxRows { x: BufId },
    SumAll { x: BufId },
    MeanAll { x: BufId },
    Slice { x: BufId, offset: usize },
    SliceCols { x: BufId, start: usize },
    ConcatCols { parts: Vec<BufId> },
    Gather { x: BufId, idx: Arc<Vec<usize>> },
    Transpose { x: BufId },
    Interp { x: BufId, map: Arc<InterpMap<T>> },
    SparseScores { q: BufId, k: BufId, pattern: Arc<SparsePattern> },
    SparseApply { w: BufId, v: BufId, pattern: Arc<SparsePattern> },
    OverlapAdd { frames: BufId, hop: usize },
}

struct Node<T> {
    value: Tensor<T>,
    grad: Option<Vec<T>>,
    op: Option<Op<T>>,
    param: bool,
}

/// Wengert-style gradient tape.
pub struct GradTape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for GradTape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> GradTape<T> {
    pub fn new() -> Self {
        GradTape { nodes: Vec::new() }
    }

    fn push(&mut self, value: Tensor<T>, op: Option<Op<T>>, param: bool) -> BufId {
        self.nodes.push(Node {
            value,
            grad: None,
            op,
            param,
        });
        BufId(self.nodes.len() - 1)
    }

    /// Register a constant input.
    pub fn leaf(&mut self, value: Tensor<T>) -> BufId {
        self.push(value, None, false)
    }

    /// Register a trainable parameter (snapshotted).
    pub fn param(&mut self, value: &Tensor<T>) -> BufId {
        self.push(value.clone(), None, true)
    }

    pub fn value(&self, id: BufId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn scalar_value(&self, id: BufId) -> T {
        debug_assert_eq!(self.nodes[id.0].value.numel(), 1);
        self.nodes[id.0].value.data()[0]
    }

    pub fn check_finite(&self, id: BufId, context: &str) -> Result<()> {
        self.nodes[id.0].value.check_finite(context)
    }

    // ── forward ops ──────────────────────────────────────────────────

    pub fn matmul(&mut self, a: BufId, b: BufId) -> Result<BufId> {
        let v = self.value(a).matmul(self.value(b))?;
        Ok(self.push(v, Some(Op::Matmul { a, b }), false))
    }

    pub fn add(&mut self, a: BufId, b: BufId) -> Result<BufId> {
        let v = self.value(a).add(self.value(b))?;
        Ok(self.push(v, Some(Op::Add { a, b }), false))
    }

    pub fn sub(&mut self, a: BufId, b: BufId) -> Result<BufId> {
        let v = self.value(a).sub(self.value(b))?;
        Ok(self.push(v, Some(Op::Sub { a, b }), false))
    }

    pub fn mul(&mut self, a: BufId, b: BufId) -> Result<BufId> {
        let v = self.value(a).hadamard(self.value(b))?;
        Ok(self.push(v, Some(Op::Mul { a, b }), false))
    }

    pub fn scale(&mut self, x: BufId, c: T) -> BufId {
        let v = self.value(x).scale(c);
        self.push(v, Some(Op::Scale { x, c }), false)
    }

    pub fn add_scalar(&mut self, x: BufId, c: T) -> BufId {
        let v = self.value(x).map(|u| u + c);
        self.push(v, Some(Op::AddScalar { x }), false)
    }

    /// `out[r, c] = x[r, c] + bias[c]` — the only broadcasting form allowed.
    pub fn row_bias(&mut self, x: BufId, bias: BufId) -> Result<BufId> {
        let xv = self.value(x);
        let bv = self.value(bias);
        if xv.shape().len() != 2 || bv.numel() != xv.cols() {
            return Err(Error::ShapeMismatch {
                op: "row_bias",
                lhs: xv.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        }
        let cols = xv.cols();
        let mut data = xv.data().to_vec();
        for (i, d) in data.iter_mut().enumerate() {
            *d += bv.data()[i % cols];
        }
        let v = Tensor::new(xv.shape().to_vec(), data)?;
        Ok(self.push(v, Some(Op::RowBias { x, bias }), false))
    }

    /// `out[r, c] = x[r, c] * scale[c]`.
    pub fn row_scale(&mut self, x: BufId, scale: BufId) -> Result<BufId> {
        let xv = self.value(x);
        let sv = self.value(scale);
        if xv.shape().len() != 2 || sv.numel() != xv.cols() {
            return Err(Error::ShapeMismatch {
                op: "row_scale",
                lhs: xv.shape().to_vec(),
                rhs: sv.shape().to_vec(),
            });
        }
        let cols = xv.cols();
        let mut data = xv.data().to_vec();
        for (i, d) in data.iter_mut().enumerate() {
            *d *= sv.data()[i % cols];
        }
        let v = Tensor::new(xv.shape().to_vec(), data)?;
        Ok(self.push(v, Some(Op::RowScale { x, scale }), false))
    }

    pub fn gelu(&mut self, x: BufId) -> BufId {
        let v = self.value(x).map(gelu);
        self.push(v, Some(Op::Gelu { x }), false)
    }

    pub fn abs(&mut self, x: BufId) -> BufId {
        let v = self.value(x).map(|u| u.abs());
        self.push(v, Some(Op::Abs { x }), false)
    }

    /// Elementwise `sqrt(a² + b²)` (complex modulus of paired grids).
    pub fn hypot(&mut self, a: BufId, b: BufId) -> Result<BufId> {
        let v = self
            .value(a)
            .hadamard(self.value(a))?
            .add(&self.value(b).hadamard(self.value(b))?)?
            .map(|u| u.sqrt());
        Ok(self.push(v, Some(Op::Hypot { a, b }), false))
    }

    pub fn layernorm_rows(&mut self, x: BufId, eps: T) -> Result<BufId> {
        let v = self.value(x).layernorm_rows(eps)?;
        Ok(self.push(v, Some(Op::LayerNormRows { x, eps }), false))
    }

    pub fn softmax_rows(&mut self, x: BufId) -> Result<BufId> {
        let v = self.value(x).softmax_rows()?;
        Ok(self.push(v, Some(Op::SoftmaxRows { x }), false))
    }

    pub fn sum_all(&mut self, x: BufId) -> BufId {
        let v = Tensor::scalar(self.value(x).sum());
        self.push(v, Some(Op::SumAll { x }), false)
    }

    pub fn mean_all(&mut self, x: BufId) -> BufId {
        let v = Tensor::scalar(self.value(x).mean());
        self.push(v, Some(Op::MeanAll { x }), false)
    }

    /// Contiguous slice of the flat storage, reshaped to `shape`.
    pub fn slice(&mut self, x: BufId, offset: usize, shape: Vec<usize>) -> Result<BufId> {
        let len: usize = shape.iter().product();
        let xv = self.value(x);
        if offset + len > xv.numel() {
            return Err(Error::InvalidArgument(format!(
                "slice {offset}..{} exceeds {} elements",
                offset + len,
                xv.numel()
            )));
        }
        let v = Tensor::new(shape, xv.data()[offset..offset + len].to_vec())?;
        Ok(self.push(v, Some(Op::Slice { x, offset }), false))
    }

    /// Column block `[start, start+width)` of a matrix.
    pub fn slice_cols(&mut self, x: BufId, start: usize, width: usize) -> Result<BufId> {
        let xv = self.value(x);
        let (r, c) = (xv.rows(), xv.cols());
        if start + width > c {
            return Err(Error::InvalidArgument(format!(
                "column slice {start}..{} exceeds {c} columns",
                start + width
            )));
        }
        let mut data = Vec::with_capacity(r * width);
        for i in 0..r {
            data.extend_from_slice(&xv.row(i)[start..start + width]);
        }
        let v = Tensor::new(vec![r, width], data)?;
        Ok(self.push(v, Some(Op::SliceCols { x, start }), false))
    }

    /// Concatenate matrices with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[BufId]) -> Result<BufId> {
        if parts.is_empty() {
            return Err(Error::InvalidArgument("concat_cols of nothing".into()));
        }
        let r = self.value(parts[0]).rows();
        let mut total = 0;
        for &p in parts {
            if self.value(p).rows() != r {
                return Err(Error::ShapeMismatch {
                    op: "concat_cols",
                    lhs: self.value(parts[0]).shape().to_vec(),
                    rhs: self.value(p).shape().to_vec(),
                });
            }
            total += self.value(p).cols();
        }
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let v = Tensor::new(vec![r, total], data)?;
        Ok(self.push(
            v,
            Some(Op::ConcatCols {
                parts: parts.to_vec(),
            }),
            false,
        ))
    }

    /// `out[i] = x[idx[i]]` over flat storage; adjoint scatter-adds.
    pub fn gather(&mut self, x: BufId, idx: Arc<Vec<usize>>, shape: Vec<usize>) -> Result<BufId> {
        let xv = self.value(x);
        let len: usize = shape.iter().product();
        if idx.len() != len {
            return Err(Error::InvalidArgument(format!(
                "gather index count {} does not match shape {:?}",
                idx.len(),
                shape
            )));
        }
        let data = idx.iter().map(|&j| xv.data()[j]).collect();
        let v = Tensor::new(shape, data)?;
        Ok(self.push(v, Some(Op::Gather { x, idx }), false))
    }

    pub fn transpose(&mut self, x: BufId) -> Result<BufId> {
        let v = self.value(x).transpose2()?;
        Ok(self.push(v, Some(Op::Transpose { x }), false))
    }

    /// Apply a fixed sparse interpolation map (bilinear resize).
    pub fn interp(&mut self, x: BufId, map: Arc<InterpMap<T>>) -> Result<BufId> {
        let v = map.apply(self.value(x))?;
        Ok(self.push(v, Some(Op::Interp { x, map }), false))
    }

    /// Neighborhood-softmax attention scores; output is one weight per
    /// stored pattern pair.
    pub fn sparse_scores(
        &mut self,
        q: BufId,
        k: BufId,
        pattern: &Arc<SparsePattern>,
    ) -> Result<BufId> {
        let w = sparse_scores_kernel(self.value(q), self.value(k), pattern)?;
        let v = Tensor::new(vec![w.len()], w)?;
        Ok(self.push(
            v,
            Some(Op::SparseScores {
                q,
                k,
                pattern: Arc::clone(pattern),
            }),
            false,
        ))
    }

    /// `out[i] = Σ_{j ∈ Ne(i)} w_ij · v[j]`.
    pub fn sparse_apply(
        &mut self,
        w: BufId,
        v: BufId,
        pattern: &Arc<SparsePattern>,
    ) -> Result<BufId> {
        if self.value(w).numel() != pattern.pair_count() {
            return Err(Error::InvalidArgument(
                "sparse_apply weight count does not match pattern".into(),
            ));
        }
        if self.value(v).rows() != pattern.n_tokens() {
            return Err(Error::ShapeMismatch {
                op: "sparse_apply",
                lhs: vec![pattern.n_tokens()],
                rhs: self.value(v).shape().to_vec(),
            });
        }
        let out = sparse_apply_kernel(self.value(w).data(), self.value(v), pattern);
        Ok(self.push(
            out,
            Some(Op::SparseApply {
                w,
                v,
                pattern: Arc::clone(pattern),
            }),
            false,
        ))
    }

    /// Scatter-add frame rows at stride `hop` into a length-`out_len`
    /// signal. Writes that would land past `out_len` are dropped (they are
    /// zero-windowed tail positions).
    pub fn overlap_add(&mut self, frames: BufId, hop: usize, out_len: usize) -> Result<BufId> {
        let fv = self.value(frames);
        if fv.shape().len() != 2 || hop == 0 {
            return Err(Error::InvalidArgument(
                "overlap_add needs rank-2 frames and hop >= 1".into(),
            ));
        }
        let (t_frames, frame_len) = (fv.rows(), fv.cols());
        let mut out = vec![T::zero(); out_len];
        for t in 0..t_frames {
            let start = t * hop;
            for n in 0..frame_len {
                if start + n < out_len {
                    out[start + n] += fv.at2(t, n);
                }
            }
        }
        let v = Tensor::new(vec![out_len], out)?;
        Ok(self.push(v, Some(Op::OverlapAdd { frames, hop }), false))
    }

    // ── backward ─────────────────────────────────────────────────────

    fn accumulate(&mut self, id: BufId, contrib: &[T]) {
        let node = &mut self.nodes[id.0];
        match &mut node.grad {
            Some(g) => {
                for (a, &b) in g.iter_mut().zip(contrib) {
                    *a += b;
                }
            }
            None => node.grad = Some(contrib.to_vec()),
        }
    }

    /// Reverse sweep seeding `d loss = 1`. `loss` must be scalar.
    pub fn backward(&mut self, loss: BufId) -> Result<()> {
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::InvalidArgument(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        self.nodes[loss.0].grad = Some(vec![T::one()]);
        for i in (0..self.nodes.len()).rev() {
            let Some(op) = self.nodes[i].op.clone() else {
                continue;
            };
            let Some(g) = self.nodes[i].grad.take() else {
                continue;
            };
            self.backward_op(BufId(i), &op, &g)?;
        }
        Ok(())
    }

    fn backward_op(&mut self, out: BufId, op: &Op<T>, g: &[T]) -> Result<()> {
        match op {
            Op::Matmul { a, b } => {
                let g_t = Tensor::new(self.value(out).shape().to_vec(), g.to_vec())?;
                let da = g_t.matmul(&self.value(*b).transpose2()?)?;
                let db = self.value(*a).transpose2()?.matmul(&g_t)?;
                self.accumulate(*a, da.data());
                self.accumulate(*b, db.data());
            }
            Op::Add { a, b } => {
                self.accumulate(*a, g);
                self.accumulate(*b, g);
            }
            Op::Sub { a, b } => {
                self.accumulate(*a, g);
                let neg: Vec<T> = g.iter().map(|&v| -v).collect();
                self.accumulate(*b, &neg);
            }
            Op::Mul { a, b } => {
                let da: Vec<T> = g
                    .iter()
                    .zip(self.value(*b).data())
                    .map(|(&u, &v)| u * v)
                    .collect();
                let db: Vec<T> = g
                    .iter()
                    .zip(self.value(*a).data())
                    .map(|(&u, &v)| u * v)
                    .collect();
                self.accumulate(*a, &da);
                self.accumulate(*b, &db);
            }
            Op::Scale { x, c } => {
                let dx: Vec<T> = g.iter().map(|&v| v * *c).collect();
                self.accumulate(*x, &dx);
            }
            Op::AddScalar { x } => {
                self.accumulate(*x, g);
            }
            Op::RowBias { x, bias } => {
                self.accumulate(*x, g);
                let cols = self.value(*bias).numel();
                let mut db = vec![T::zero(); cols];
                for (i, &v) in g.iter().enumerate() {
                    db[i % cols] += v;
                }
                self.accumulate(*bias, &db);
            }
            Op::RowScale { x, scale } => {
                let cols = self.value(*scale).numel();
                let sdata = self.value(*scale).data().to_vec();
                let xdata = self.value(*x).data().to_vec();
                let dx: Vec<T> = g
                    .iter()
                    .enumerate()
                    .map(|(i, &v)| v * sdata[i % cols])
                    .collect();
                let mut ds = vec![T::zero(); cols];
                for (i, &v) in g.iter().enumerate() {
                    ds[i % cols] += v * xdata[i];
                }
                self.accumulate(*x, &dx);
                self.accumulate(*scale, &ds);
            }
            Op::Gelu { x } => {
                let dx: Vec<T> = g
                    .iter()
                    .zip(self.value(*x).data())
                    .map(|(&v, &u)| v * gelu_grad(u))
                    .collect();
                self.accumulate(*x, &dx);
            }
            Op::Abs { x } => {
                let dx: Vec<T> = g
                    .iter()
                    .zip(self.value(*x).data())
                    .map(|(&v, &u)| {
                        if u > T::zero() {
                            v
                        } else if u < T::zero() {
                            -v
                        } else {
                            T::zero()
                        }
                    })
                    .collect();
                self.accumulate(*x, &dx);
            }
            Op::Hypot { a, b } => {
                let out_data = self.value(out).data().to_vec();
                let da: Vec<T> = g
                    .iter()
                    .zip(self.value(*a).data())
                    .zip(&out_data)
                    .map(|((&v, &u), &r)| if r > T::zero() { v * u / r } else { T::zero() })
                    .collect();
                let db: Vec<T> = g
                    .iter()
                    .zip(self.value(*b).data())
                    .zip(&out_data)
                    .map(|((&v, &u), &r)| if r > T::zero() { v * u / r } else { T::zero() })
                    .collect();
                self.accumulate(*a, &da);
                self.accumulate(*b, &db);
            }
            Op::LayerNormRows { x, eps } => {
                let xv = self.value(*x);
                let (r, c) = (xv.rows(), xv.cols());
                let cn = T::of_usize(c);
                let y = self.value(out).data().to_vec();
                let xdata = xv.data().to_vec();
                let mut dx = vec![T::zero(); r * c];
                for i in 0..r {
                    let row = &xdata[i * c..(i + 1) * c];
                    let mut mean = T::zero();
                    for &v in row {
                        mean += v;
                    }
                    mean = mean / cn;
                    let mut var = T::zero();
                    for &v in row {
                        var += (v - mean) * (v - mean);
                    }
                    var = var / cn;
                    let inv = (var + *eps).sqrt().recip();
                    let gi = &g[i * c..(i + 1) * c];
                    let yi = &y[i * c..(i + 1) * c];
                    let mut g_mean = T::zero();
                    let mut gy_mean = T::zero();
                    for (&gv, &yv) in gi.iter().zip(yi) {
                        g_mean += gv;
                        gy_mean += gv * yv;
                    }
                    g_mean = g_mean / cn;
                    gy_mean = gy_mean / cn;
                    for (k, d) in dx[i * c..(i + 1) * c].iter_mut().enumerate() {
                        *d = inv * (gi[k] - g_mean - yi[k] * gy_mean);
                    }
                }
                self.accumulate(*x, &dx);
            }
            Op::SoftmaxRows { x } => {
                let y = self.value(out);
                let (r, c) = (y.rows(), y.cols());
                let ydata = y.data().to_vec();
                let mut dx = vec![T::zero(); r * c];
                for i in 0..r {
                    let yi = &ydata[i * c..(i + 1) * c];
                    let gi = &g[i * c..(i + 1) * c];
                    let mut dot = T::zero();
                    for (&gv, &yv) in gi.iter().zip(yi) {
                        dot += gv * yv;
                    }
                    for (k, d) in dx[i * c..(i + 1) * c].iter_mut().enumerate() {
                        *d = yi[k] * (gi[k] - dot);
                    }
                }
                self.accumulate(*x, &dx);
            }
            Op::SumAll { x } => {
                let dx = vec![g[0]; self.value(*x).numel()];
                self.accumulate(*x, &dx);
            }
            Op::MeanAll { x } => {
                let n = self.value(*x).numel();
                let dx = vec![g[0] / T::of_usize(n); n];
                self.accumulate(*x, &dx);
            }
            Op::Slice { x, offset } => {
                let mut dx = vec![T::zero(); self.value(*x).numel()];
                dx[*offset..*offset + g.len()].copy_from_slice(g);
                self.accumulate(*x, &dx);
            }
            Op::SliceCols { x, start } => {
                let xv = self.value(*x);
                let (r, c) = (xv.rows(), xv.cols());
                let width = g.len() / r;
                let mut dx = vec![T::zero(); r * c];
                for i in 0..r {
                    for k in 0..width {
                        dx[i * c + start + k] = g[i * width + k];
                    }
                }
                self.accumulate(*x, &dx);
            }
            Op::ConcatCols { parts } => {
                let r = self.value(out).rows();
                let total = self.value(out).cols();
                let mut start = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    let mut dp = vec![T::zero(); r * w];
                    for i in 0..r {
                        dp[i * w..(i + 1) * w]
                            .copy_from_slice(&g[i * total + start..i * total + start + w]);
                    }
                    self.accumulate(p, &dp);
                    start += w;
                }
            }
            Op::Gather { x, idx } => {
                let mut dx = vec![T::zero(); self.value(*x).numel()];
                for (&j, &v) in idx.iter().zip(g) {
                    dx[j] += v;
                }
                self.accumulate(*x, &dx);
            }
            Op::Transpose { x } => {
                let g_t = Tensor::new(self.value(out).shape().to_vec(), g.to_vec())?;
                let dx = g_t.transpose2()?;
                self.accumulate(*x, dx.data());
            }
            Op::Interp { x, map } => {
                let mut dx = vec![T::zero(); map.in_numel()];
                for (i, &v) in g.iter().enumerate() {
                    for (j, w) in map.row(i) {
                        dx[j] += w * v;
                    }
                }
                self.accumulate(*x, &dx);
            }
            Op::SparseScores { q, k, pattern } => {
                let qv = self.value(*q);
                let kv = self.value(*k);
                let a = self.value(out).data().to_vec();
                let d = qv.cols();
                let scale = T::of_usize(d).sqrt().recip();
                let n = pattern.n_tokens();
                let mut dq = vec![T::zero(); qv.numel()];
                let mut dk = vec![T::zero(); kv.numel()];
                for i in 0..n {
                    let range = pattern.row_range(i);
                    // Softmax adjoint within the neighborhood, then chain
                    // through the scaled dot products.
                    let mut dot = T::zero();
                    for idx in range.clone() {
                        dot += g[idx] * a[idx];
                    }
                    for (idx, &j) in range.zip(pattern.neighbors(i)) {
                        let ds = a[idx] * (g[idx] - dot) * scale;
                        if ds == T::zero() {
                            continue;
                        }
                        for t in 0..d {
                            dq[i * d + t] += ds * kv.at2(j, t);
                            dk[j * d + t] += ds * qv.at2(i, t);
                        }
                    }
                }
                self.accumulate(*q, &dq);
                self.accumulate(*k, &dk);
            }
            Op::SparseApply { w, v, pattern } => {
                let vv = self.value(*v);
                let d = vv.cols();
                let wdata = self.value(*w).data().to_vec();
                let n = pattern.n_tokens();
                let mut dw = vec![T::zero(); wdata.len()];
                let mut dv = vec![T::zero(); vv.numel()];
                for i in 0..n {
                    let gi = &g[i * d..(i + 1) * d];
                    for (idx, &j) in pattern.row_range(i).zip(pattern.neighbors(i)) {
                        let mut acc = T::zero();
                        for (t, &gv) in gi.iter().enumerate() {
                            acc += gv * vv.at2(j, t);
                            dv[j * d + t] += wdata[idx] * gv;
                        }
                        dw[idx] += acc;
                    }
                }
                self.accumulate(*w, &dw);
                self.accumulate(*v, &dv);
            }
            Op::OverlapAdd { frames, hop } => {
                let fv = self.value(*frames);
                let (t_frames, frame_len) = (fv.rows(), fv.cols());
                let out_len = g.len();
                let mut df = vec![T::zero(); t_frames * frame_len];
                for t in 0..t_frames {
                    let start = t * *hop;
                    for n in 0..frame_len {
                        if start + n < out_len {
                            df[t * frame_len + n] = g[start + n];
                        }
                    }
                }
                self.accumulate(*frames, &df);
            }
        }
        Ok(())
    }

    /// Gradient of a leaf/param after `backward`; zeros if the loss never
    /// touched it.
    pub fn grad(&self, id: BufId) -> Tensor<T> {
        let node = &self.nodes[id.0];
        match &node.grad {
            Some(g) => Tensor::new(node.value.shape().to_vec(), g.clone()).expect("grad shape"),
            None => Tensor::zeros(node.value.shape().to_vec()),
        }
    }

    pub fn is_param(&self, id: BufId) -> bool {
        self.nodes[id.0].param
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }
}

/// Max relative error between analytic gradients and central finite
/// differences of `f` at `x`. `f` must build a scalar loss from its input
/// buffer.
pub fn grad_check<T, F>(f: &F, x: &Tensor<T>, step: T) -> Result<T>
where
    T: Scalar,
    F: Fn(&mut GradTape<T>, BufId) -> Result<BufId>,
{
    if step <= T::zero() {
        return Err(Error::InvalidArgument("grad_check step must be > 0".into()));
    }
    let mut tape = GradTape::new();
    let xid = tape.param(x);
    let loss = f(&mut tape, xid)?;
    tape.backward(loss)?;
    let analytic = tape.grad(xid);

    let eval = |probe: &Tensor<T>| -> Result<T> {
        let mut t = GradTape::new();
        let id = t.param(probe);
        let loss = f(&mut t, id)?;
        Ok(t.scalar_value(loss))
    };

    let floor = T::of(1e-8);
    let mut worst = T::zero();
    for i in 0..x.numel() {
        let mut plus = x.clone();
        plus.data_mut()[i] += step;
        let mut minus = x.clone();
        minus.data_mut()[i] -= step;
        let fd = (eval(&plus)? - eval(&minus)?) / (T::of(2.0) * step);
        let a = analytic.data()[i];
        let denom = a.abs().max(fd.abs()).max(floor);
        let rel = (a - fd).abs() / denom;
        if rel > worst {
            worst = rel;
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;
    use rand::Rng;

    fn rand_tensor(seed: u64, shape: Vec<usize>) -> Tensor<f64> {
        let mut rng = substream(seed, "gc");
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn grad_of_sum_is_ones() {
        let x = rand_tensor(1, vec![3, 4]);
        let mut tape = GradTape::new();
        let id = tape.param(&x);
        let loss = tape.sum_all(id);
        tape.backward(loss).unwrap();
        assert!(tape.grad(id).data().iter().all(|&g| g == 1.0));
    }

    #[test]
    fn grad_of_sum_of_squares_is_2x() {
        let x = rand_tensor(2, vec![5]);
        let mut tape = GradTape::new();
        let id = tape.param(&x);
        let sq = tape.mul(id, id).unwrap();
        let loss = tape.sum_all(sq);
        tape.backward(loss).unwrap();
        for (g, v) in tape.grad(id).data().iter().zip(x.data()) {
            assert!((g - 2.0 * v).abs() < 1e-14);
        }
    }

    #[test]
    fn backward_rejects_vector_loss() {
        let x = rand_tensor(3, vec![2, 2]);
        let mut tape = GradTape::new();
        let id = tape.param(&x);
        assert!(tape.backward(id).is_err());
    }

    #[test]
    fn unused_parameter_gets_exact_zeros() {
        let x = rand_tensor(4, vec![3]);
        let unused = rand_tensor(5, vec![7]);
        let mut tape = GradTape::new();
        let a = tape.param(&x);
        let b = tape.param(&unused);
        let loss = tape.sum_all(a);
        tape.backward(loss).unwrap();
        assert!(tape.grad(b).data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn grad_check_sum_of_squares() {
        let x = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        let err = grad_check(
            &|tape, id| {
                let sq = tape.mul(id, id)?;
                Ok(tape.sum_all(sq))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-8, "relative error {err}");
    }

    #[test]
    fn grad_check_softmax_sum_of_squares() {
        let x = rand_tensor(6, vec![3, 5]);
        let err = grad_check(
            &|tape, id| {
                let sm = tape.softmax_rows(id)?;
                let sq = tape.mul(sm, sm)?;
                Ok(tape.sum_all(sq))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "relative error {err}");
    }

    /// Finite-difference battery over every primitive at f64.
    #[test]
    fn grad_check_primitive_battery() {
        let weights = rand_tensor(100, vec![4, 6]);
        let cases: Vec<(&str, Box<dyn Fn(&mut GradTape<f64>, BufId) -> Result<BufId>>, Tensor<f64>)> = vec![
            (
                "matmul",
                {
                    let rhs = rand_tensor(101, vec![6, 3]);
                    Box::new(move |t: &mut GradTape<f64>, id: BufId| {
                        let r = t.leaf(rhs.clone());
                        let y = t.matmul(id, r)?;
                        let sq = t.mul(y, y)?;
                        Ok(t.sum_all(sq))
                    })
                },
                rand_tensor(102, vec![4, 6]),
            ),
            (
                "matmul_rhs",
                {
                    let lhs = rand_tensor(103, vec![3, 4]);
                    Box::new(move |t: &mut GradTape<f64>, id: BufId| {
                        let l = t.leaf(lhs.clone());
                        let y = t.matmul(l, id)?;
                        let sq = t.mul(y, y)?;
                        Ok(t.sum_all(sq))
                    })
                },
                rand_tensor(104, vec![4, 6]),
            ),
            (
                "add_mul_scale",
                {
                    let w = weights.clone();
                    Box::new(move |t: &mut GradTape<f64>, id: BufId| {
                        let wl = t.leaf(w.clone());
                        let a = t.add(id, wl)?;
                        let m = t.mul(a, id)?;
                        let s = t.scale(m, -0.7);
                        let s = t.add_scalar(s, 0.3);
                        Ok(t.sum_all(s))
                    })
                },
                rand_tensor(105, vec![4, 6]),
            ),
            (
                "sub_abs_mean",
                {
                    let w = weights.clone();
                    Box::new(move |t: &mut GradTape<f64>, id: BufId| {
                        let wl = t.leaf(w.clone());
                        let d = t.sub(id, wl)?;
                        let a = t.abs(d);
                        Ok(t.mean_all(a))
                    })
                },
                rand_tensor(106, vec![4, 6]),
            ),
            (
                "hypot",
                {
                    let w = weights.clone();
                    Box::new(move |t: &mut GradTape<f64>, id: BufId| {
                        let wl = t.leaf(w.clone());
                        let h = t.hypot(id, wl)?;
                        Ok(t.mean_all(h))
                    })
                },
                rand_tensor(107, vec![4, 6]),
            ),
            (
                "row_bias_row_scale",
                Box::new(|t: &mut GradTape<f64>, id: BufId| {
                    let bias = t.slice(id, 0, vec![1, 6])?;
                    let scale = t.slice(id, 6, vec![1, 6])?;
                    let body = t.slice(id, 12, vec![2, 6])?;
                    let b = t.row_bias(body, bias)?;
                    let s = t.row_scale(b, scale)?;
                    let sq = t.mul(s, s)?;
                    Ok(t.sum_all(sq))
                }),
                rand_tensor(108, vec![4, 6]),
            ),
            (
                "gelu",
                Box::new(|t: &mut GradTape<f64>, id: BufId| {
                    let y = t.gelu(id);
                    let sq = t.mul(y, y)?;
                    Ok(t.sum_all(sq))
                }),
                rand_tensor(109, vec![4, 6]),
            ),
            (
                "layernorm",
                Box::new(|t: &mut GradTape<f64>, id: BufId| {
                    let y = t.layernorm_rows(id, 1e-5)?;
                    let sq = t.mul(y, y)?;
                    let c = t.scale(sq, 0.31);
                    Ok(t.sum_all(c))
                }),
                rand_tensor(110, vec![4, 6]),
            ),
            (
                "softmax_then_affine",
                {
                    let w = weights.clone();
                    Box::new(move |t: &mut GradTape<f64>, id: BufId| {
                        let y = t.softmax_rows(id)?;
                        let wl = t.leaf(w.clone());
                        let m = t.mul(y, wl)?;
                        Ok(t.sum_all(m))
                    })
                },
                rand_tensor(111, vec![4, 6]),
            ),
            (
                "slice_concat_transpose_gather",
                Box::new(|t: &mut GradTape<f64>, id: BufId| {
                    let a = t.slice_cols(id, 0, 2)?;
                    let b = t.slice_cols(id, 2, 4)?;
                    let b2 = t.slice_cols(b, 0, 2)?;
                    let cat = t.concat_cols(&[a, b2])?;
                    let tr = t.transpose(cat)?;
                    let idx = Arc::new((0..16).rev().collect::<Vec<_>>());
                    let gathered = t.gather(tr, idx, vec![4, 4])?;
                    let sq = t.mul(gathered, gathered)?;
                    Ok(t.sum_all(sq))
                }),
                rand_tensor(112, vec![4, 6]),
            ),
            (
                "interp",
                Box::new(|t: &mut GradTape<f64>, id: BufId| {
                    let map = Arc::new(InterpMap::bilinear((4, 6), (7, 5)));
                    let y = t.interp(id, map)?;
                    let sq = t.mul(y, y)?;
                    Ok(t.sum_all(sq))
                }),
                rand_tensor(113, vec![4, 6]),
            ),
            (
                "overlap_add",
                Box::new(|t: &mut GradTape<f64>, id: BufId| {
                    let y = t.overlap_add(id, 2, 12)?;
                    let sq = t.mul(y, y)?;
                    Ok(t.sum_all(sq))
                }),
                rand_tensor(114, vec![4, 6]),
            ),
        ];
        for (name, f, x) in &cases {
            let err = grad_check(f, x, 1e-5).unwrap();
            // Documented tolerance; FD roundoff dominates on coordinates
            // whose true gradient is ~1e-6.
            assert!(err < 1e-4, "{name}: relative error {err}");
        }
    }

    #[test]
    fn grad_check_sparse_attention_ops() {
        let pattern = Arc::new(SparsePattern::build(6, 1, &[0], 1, 3).unwrap());
        // d loss / d Q and d K through neighborhood softmax.
        let x = rand_tensor(115, vec![12, 4]);
        let err = grad_check(
            &|t, id| {
                let q = t.slice(id, 0, vec![6, 4])?;
                let k = t.slice(id, 24, vec![6, 4])?;
                let w = t.sparse_scores(q, k, &pattern)?;
                let sq = t.mul(w, w)?;
                Ok(t.sum_all(sq))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-7, "sparse_scores gradient error {err}");

        // d loss / d weights and d V through the sparse application.
        let nnz = pattern.pair_count();
        let x2 = rand_tensor(116, vec![nnz + 24]);
        let p2 = Arc::clone(&pattern);
        let err2 = grad_check(
            &move |t, id| {
                let w = t.slice(id, 0, vec![nnz])?;
                let v = t.slice(id, nnz, vec![6, 4])?;
                let z = t.sparse_apply(w, v, &p2)?;
                let sq = t.mul(z, z)?;
                Ok(t.sum_all(sq))
            },
            &x2,
            1e-5,
        )
        .unwrap();
        assert!(err2 < 1e-7, "sparse_apply gradient error {err2}");
    }

    #[test]
    fn zero_gate_kills_branch_gradient_exactly() {
        // loss = sum(x + 0 * f(w)): dw must be exactly zero, not merely small.
        let x = rand_tensor(117, vec![2, 3]);
        let w = rand_tensor(118, vec![3, 3]);
        let mut tape = GradTape::new();
        let xid = tape.leaf(x);
        let wid = tape.param(&w);
        let y = tape.matmul(xid, wid).unwrap();
        let gated = tape.scale(y, 0.0);
        let out = tape.add(xid, gated).unwrap();
        let loss = tape.sum_all(out);
        tape.backward(loss).unwrap();
        assert!(tape.grad(wid).data().iter().all(|&g| g == 0.0));
    }
}

