//! Reverse-mode automatic differentiation over dense row-major `f64`
//! tensors.
//!
//! A [`Graph`] records every operation as it executes (define-by-run); a
//! [`Tensor`] is a cheap copyable handle into that graph. Calling
//! [`Graph::backward`] on a scalar result walks the recorded operations in
//! reverse creation order and accumulates gradients into every leaf created
//! with `requires_grad = true`. The graph is rebuilt for every forward pass;
//! leaves with `requires_grad = false` never accumulate gradient, and
//! repeated `backward` calls without [`Graph::clear_grads`] accumulate
//! additively.
//!
//! A graph is single-threaded; independent graphs may run concurrently on
//! different threads (`Graph` is `Send`).

use std::sync::Arc;

use thiserror::Error;

/// Epsilon inside the layer-norm variance square root.
pub const LAYER_NORM_EPS: f64 = 1e-5;

const GELU_COEF: f64 = 0.044715;
// sqrt(2 / pi) for the tanh-based GELU approximation.
const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: unsupported shape {shape:?} ({reason})")]
    BadShape {
        op: &'static str,
        shape: Vec<usize>,
        reason: &'static str,
    },
    #[error("leaf data length {actual} does not match shape {shape:?} (expected {expected})")]
    DataLen {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("backward on a leaf tensor: no recorded operations to traverse")]
    BackwardOnLeaf,
    #[error("softmax over an empty last dimension")]
    EmptySoftmax,
    #[error("masked softmax row {row} has an empty neighbourhood (all-false mask row)")]
    EmptyMaskRow { row: usize },
    #[error("gather index {index} out of range for table with {rows} rows")]
    GatherOutOfRange { index: usize, rows: usize },
    #[error("operation requires a leaf tensor")]
    NotALeaf,
    #[error("{context}: non-finite value at input {input}, coordinate {coord}")]
    NonFinite {
        context: &'static str,
        input: usize,
        coord: usize,
    },
}

/// A linear operator with an explicit adjoint, pluggable into the graph as a
/// differentiable node (the gradient of a linear map is its adjoint).
///
/// Implementations must satisfy `<A x, y> = <x, A^T y>`; this is what makes
/// gradients through the node match finite differences.
pub trait LinearOperator: Send + Sync {
    fn input_shape(&self) -> &[usize];
    fn output_shape(&self) -> &[usize];
    /// Writes `A x` into `out` (overwriting it). `x.len()` and `out.len()`
    /// equal the products of the input and output shapes.
    fn apply(&self, x: &[f64], out: &mut [f64]);
    /// Writes `A^T y` into `out` (overwriting it).
    fn adjoint(&self, y: &[f64], out: &mut [f64]);
    fn name(&self) -> &'static str {
        "linear_map"
    }
}

/// Handle to a node inside a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Tensor(usize);

enum Op {
    Leaf,
    MatMul { lhs: usize, rhs: usize },
    Add { lhs: usize, rhs: usize },
    Sub { lhs: usize, rhs: usize },
    Mul { lhs: usize, rhs: usize },
    Scale { input: usize, factor: f64 },
    AddScalar { input: usize },
    TransposeLast2 { input: usize },
    Reshape { input: usize },
    ConcatLastDim { inputs: Vec<usize> },
    NarrowLastDim { input: usize, start: usize, len: usize },
    SoftmaxLastDim { input: usize },
    // Backward needs only the stored output (zeros outside the mask kill
    // those gradient entries), so the mask itself is not retained.
    MaskedSoftmaxLastDim { input: usize },
    LayerNormLastDim { input: usize, gamma: usize, beta: usize },
    Linear { input: usize, weight: usize, bias: usize },
    Relu { input: usize },
    Gelu { input: usize },
    Mean { input: usize },
    SumSquares { input: usize },
    Detach,
    GatherRows { table: usize, indices: Arc<Vec<usize>> },
    LinearMap { input: usize, map: Arc<dyn LinearOperator> },
}

struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    op: Op,
    requires_grad: bool,
    /// Persistent accumulated gradient; only ever populated on leaves.
    grad: Option<Vec<f64>>,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Define-by-run computation graph. Nodes are appended in creation order, so
/// a reverse sweep visits every consumer before its producers.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    #[must_use]
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    #[must_use]
    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    /// Enters a leaf tensor. Only leaves with `requires_grad = true`
    /// accumulate gradients during [`Graph::backward`].
    pub fn leaf(
        &mut self,
        data: Vec<f64>,
        shape: &[usize],
        requires_grad: bool,
    ) -> Result<Tensor, TensorError> {
        let expected = numel(shape);
        if data.len() != expected {
            return Err(TensorError::DataLen {
                shape: shape.to_vec(),
                expected,
                actual: data.len(),
            });
        }
        Ok(self.push(shape.to_vec(), data, Op::Leaf, requires_grad))
    }

    /// A non-trainable leaf.
    pub fn constant(&mut self, data: Vec<f64>, shape: &[usize]) -> Result<Tensor, TensorError> {
        self.leaf(data, shape, false)
    }

    /// A non-trainable scalar with shape `[1]`.
    pub fn scalar(&mut self, value: f64) -> Tensor {
        self.push(vec![1], vec![value], Op::Leaf, false)
    }

    #[must_use]
    pub fn shape(&self, t: Tensor) -> &[usize] {
        &self.nodes[t.0].shape
    }

    #[must_use]
    pub fn data(&self, t: Tensor) -> &[f64] {
        &self.nodes[t.0].data
    }

    /// The first element; convenient for scalar results.
    #[must_use]
    pub fn value(&self, t: Tensor) -> f64 {
        self.nodes[t.0].data[0]
    }

    #[must_use]
    pub fn requires_grad(&self, t: Tensor) -> bool {
        self.nodes[t.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if any has been produced.
    #[must_use]
    pub fn grad(&self, t: Tensor) -> Option<&[f64]> {
        self.nodes[t.0].grad.as_deref()
    }

    /// Clears accumulated leaf gradients (the "reset" between optimizer
    /// steps when a graph is reused).
    pub fn clear_grads(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    /// Mutable view of a leaf's values, for in-place optimizer updates and
    /// checkpoint restores. Rejects derived nodes: rewriting one would
    /// silently desynchronize it from its inputs.
    pub fn leaf_data_mut(&mut self, t: Tensor) -> Result<&mut [f64], TensorError> {
        let node = &mut self.nodes[t.0];
        if !matches!(node.op, Op::Leaf) {
            return Err(TensorError::NotALeaf);
        }
        Ok(&mut node.data)
    }

    /// Drops every node appended after the first `len`, keeping leaf values
    /// (and any accumulated gradients) on the survivors. Training loops
    /// create parameters first, then truncate back to them after each step
    /// so the tape does not grow without bound.
    pub fn truncate(&mut self, len: usize) {
        self.nodes.truncate(len);
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op, requires_grad: bool) -> Tensor {
        debug_assert_eq!(numel(&shape), data.len());
        self.nodes.push(Node {
            shape,
            data,
            op,
            requires_grad,
            grad: None,
        });
        Tensor(self.nodes.len() - 1)
    }

    fn wants_grad(&self, id: usize) -> bool {
        self.nodes[id].requires_grad
    }

    // ----- forward operations -------------------------------------------

    /// Matrix product. Either `lhs (..., m, k) @ rhs (k, n)` with a shared
    /// right operand, or `lhs (b..., m, k) @ rhs (b..., k, n)` with equal
    /// leading dimensions (the batched form).
    pub fn matmul(&mut self, lhs: Tensor, rhs: Tensor) -> Result<Tensor, TensorError> {
        let (ls, rs) = (&self.nodes[lhs.0].shape, &self.nodes[rhs.0].shape);
        let mismatch = || TensorError::ShapeMismatch {
            op: "matmul",
            lhs: self.nodes[lhs.0].shape.clone(),
            rhs: self.nodes[rhs.0].shape.clone(),
        };
        if ls.len() < 2 {
            return Err(mismatch());
        }
        let (m, k) = (ls[ls.len() - 2], ls[ls.len() - 1]);
        let shared = rs.len() == 2;
        let batched = rs.len() == ls.len() && ls.len() > 2 && ls[..ls.len() - 2] == rs[..rs.len() - 2];
        if !(shared || batched) || rs[rs.len() - 2] != k {
            return Err(mismatch());
        }
        let n = rs[rs.len() - 1];
        let batch: usize = ls[..ls.len() - 2].iter().product();
        let mut out_shape = ls[..ls.len() - 2].to_vec();
        out_shape.extend([m, n]);
        let mut out = vec![0.0; batch * m * n];
        let (ld, rd) = (&self.nodes[lhs.0].data, &self.nodes[rhs.0].data);
        for b in 0..batch {
            let a = &ld[b * m * k..(b + 1) * m * k];
            let bm = if shared { &rd[..] } else { &rd[b * k * n..(b + 1) * k * n] };
            matmul_nn(a, bm, m, k, n, &mut out[b * m * n..(b + 1) * m * n]);
        }
        let rg = self.wants_grad(lhs.0) || self.wants_grad(rhs.0);
        Ok(self.push(out_shape, out, Op::MatMul { lhs: lhs.0, rhs: rhs.0 }, rg))
    }

    /// Batched matrix product; requires equal leading dimensions on both
    /// operands (a stricter spelling of [`Graph::matmul`]).
    pub fn batched_matmul(&mut self, lhs: Tensor, rhs: Tensor) -> Result<Tensor, TensorError> {
        let (ls, rs) = (&self.nodes[lhs.0].shape, &self.nodes[rhs.0].shape);
        if ls.len() < 3 || rs.len() != ls.len() {
            return Err(TensorError::ShapeMismatch {
                op: "batched_matmul",
                lhs: ls.clone(),
                rhs: rs.clone(),
            });
        }
        self.matmul(lhs, rhs)
    }

    /// Elementwise sum. `rhs` may have a shape that is a suffix of `lhs`'s
    /// shape, in which case it broadcasts over the leading dimensions.
    pub fn add(&mut self, lhs: Tensor, rhs: Tensor) -> Result<Tensor, TensorError> {
        let (ls, rs) = (&self.nodes[lhs.0].shape, &self.nodes[rhs.0].shape);
        let suffix = rs.len() <= ls.len() && &ls[ls.len() - rs.len()..] == rs.as_slice();
        if !suffix {
            return Err(TensorError::ShapeMismatch {
                op: "add",
                lhs: ls.clone(),
                rhs: rs.clone(),
            });
        }
        let (ld, rd) = (&self.nodes[lhs.0].data, &self.nodes[rhs.0].data);
        let chunk = rd.len();
        let mut out = ld.clone();
        for block in out.chunks_mut(chunk) {
            for (o, r) in block.iter_mut().zip(rd) {
                *o += r;
            }
        }
        let shape = ls.clone();
        let rg = self.wants_grad(lhs.0) || self.wants_grad(rhs.0);
        Ok(self.push(shape, out, Op::Add { lhs: lhs.0, rhs: rhs.0 }, rg))
    }

    /// Elementwise difference of equally shaped tensors.
    pub fn sub(&mut self, lhs: Tensor, rhs: Tensor) -> Result<Tensor, TensorError> {
        self.same_shape("sub", lhs, rhs)?;
        let out: Vec<f64> = self.nodes[lhs.0]
            .data
            .iter()
            .zip(&self.nodes[rhs.0].data)
            .map(|(a, b)| a - b)
            .collect();
        let shape = self.nodes[lhs.0].shape.clone();
        let rg = self.wants_grad(lhs.0) || self.wants_grad(rhs.0);
        Ok(self.push(shape, out, Op::Sub { lhs: lhs.0, rhs: rhs.0 }, rg))
    }

    /// Hadamard (elementwise) product of equally shaped tensors.
    pub fn mul(&mut self, lhs: Tensor, rhs: Tensor) -> Result<Tensor, TensorError> {
        self.same_shape("mul", lhs, rhs)?;
        let out: Vec<f64> = self.nodes[lhs.0]
            .data
            .iter()
            .zip(&self.nodes[rhs.0].data)
            .map(|(a, b)| a * b)
            .collect();
        let shape = self.nodes[lhs.0].shape.clone();
        let rg = self.wants_grad(lhs.0) || self.wants_grad(rhs.0);
        Ok(self.push(shape, out, Op::Mul { lhs: lhs.0, rhs: rhs.0 }, rg))
    }

    fn same_shape(&self, op: &'static str, lhs: Tensor, rhs: Tensor) -> Result<(), TensorError> {
        if self.nodes[lhs.0].shape != self.nodes[rhs.0].shape {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: self.nodes[lhs.0].shape.clone(),
                rhs: self.nodes[rhs.0].shape.clone(),
            });
        }
        Ok(())
    }

    /// Multiplication by a compile-time-known scalar.
    pub fn scale(&mut self, input: Tensor, factor: f64) -> Tensor {
        let out: Vec<f64> = self.nodes[input.0].data.iter().map(|x| x * factor).collect();
        let shape = self.nodes[input.0].shape.clone();
        let rg = self.wants_grad(input.0);
        self.push(shape, out, Op::Scale { input: input.0, factor }, rg)
    }

    /// Addition of a scalar constant to every element.
    pub fn add_scalar(&mut self, input: Tensor, value: f64) -> Tensor {
        let out: Vec<f64> = self.nodes[input.0].data.iter().map(|x| x + value).collect();
        let shape = self.nodes[input.0].shape.clone();
        let rg = self.wants_grad(input.0);
        self.push(shape, out, Op::AddScalar { input: input.0 }, rg)
    }

    /// Swaps the last two dimensions.
    pub fn transpose_last2(&mut self, input: Tensor) -> Result<Tensor, TensorError> {
        let shape = self.nodes[input.0].shape.clone();
        if shape.len() < 2 {
            return Err(TensorError::BadShape {
                op: "transpose_last2",
                shape,
                reason: "needs at least 2 dimensions",
            });
        }
        let (r, c) = (shape[shape.len() - 2], shape[shape.len() - 1]);
        let mut out_shape = shape.clone();
        let len = out_shape.len();
        out_shape.swap(len - 2, len - 1);
        let out = transpose_blocks(&self.nodes[input.0].data, r, c);
        let rg = self.wants_grad(input.0);
        Ok(self.push(out_shape, out, Op::TransposeLast2 { input: input.0 }, rg))
    }

    /// Reinterprets the (row-major) data under a new shape of equal size.
    pub fn reshape(&mut self, input: Tensor, new_shape: &[usize]) -> Result<Tensor, TensorError> {
        let node = &self.nodes[input.0];
        if numel(new_shape) != node.data.len() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                lhs: node.shape.clone(),
                rhs: new_shape.to_vec(),
            });
        }
        let data = node.data.clone();
        let rg = node.requires_grad;
        Ok(self.push(new_shape.to_vec(), data, Op::Reshape { input: input.0 }, rg))
    }

    /// Concatenates along the last dimension; all other dimensions must
    /// match.
    pub fn concat_lastdim(&mut self, inputs: &[Tensor]) -> Result<Tensor, TensorError> {
        let first = inputs.first().ok_or(TensorError::BadShape {
            op: "concat_lastdim",
            shape: vec![],
            reason: "needs at least one input",
        })?;
        let lead = self.nodes[first.0].shape[..self.nodes[first.0].shape.len() - 1].to_vec();
        let mut last = 0;
        for t in inputs {
            let s = &self.nodes[t.0].shape;
            if s.len() != lead.len() + 1 || s[..s.len() - 1] != lead[..] {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_lastdim",
                    lhs: self.nodes[first.0].shape.clone(),
                    rhs: s.clone(),
                });
            }
            last += s[s.len() - 1];
        }
        let rows = lead.iter().product::<usize>();
        let mut out = vec![0.0; rows * last];
        let mut offset = 0;
        for t in inputs {
            let c = *self.nodes[t.0].shape.last().unwrap();
            let data = &self.nodes[t.0].data;
            for row in 0..rows {
                out[row * last + offset..row * last + offset + c]
                    .copy_from_slice(&data[row * c..(row + 1) * c]);
            }
            offset += c;
        }
        let mut out_shape = lead;
        out_shape.push(last);
        let rg = inputs.iter().any(|t| self.wants_grad(t.0));
        let ids = inputs.iter().map(|t| t.0).collect();
        Ok(self.push(out_shape, out, Op::ConcatLastDim { inputs: ids }, rg))
    }

    /// Takes `len` entries starting at `start` along the last dimension.
    pub fn narrow_lastdim(
        &mut self,
        input: Tensor,
        start: usize,
        len: usize,
    ) -> Result<Tensor, TensorError> {
        let shape = self.nodes[input.0].shape.clone();
        let last = *shape.last().ok_or(TensorError::BadShape {
            op: "narrow_lastdim",
            shape: shape.clone(),
            reason: "needs at least 1 dimension",
        })?;
        if len == 0 || start + len > last {
            return Err(TensorError::BadShape {
                op: "narrow_lastdim",
                shape,
                reason: "range out of bounds",
            });
        }
        let rows = numel(&shape) / last;
        let mut out = vec![0.0; rows * len];
        let data = &self.nodes[input.0].data;
        for row in 0..rows {
            out[row * len..(row + 1) * len]
                .copy_from_slice(&data[row * last + start..row * last + start + len]);
        }
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = len;
        let rg = self.wants_grad(input.0);
        Ok(self.push(out_shape, out, Op::NarrowLastDim { input: input.0, start, len }, rg))
    }

    /// Splits the last dimension into `chunks` equal parts.
    pub fn split_lastdim(&mut self, input: Tensor, chunks: usize) -> Result<Vec<Tensor>, TensorError> {
        let shape = self.nodes[input.0].shape.clone();
        let last = *shape.last().unwrap_or(&0);
        if chunks == 0 || !last.is_multiple_of(chunks) {
            return Err(TensorError::BadShape {
                op: "split_lastdim",
                shape,
                reason: "last dimension not divisible by chunk count",
            });
        }
        let w = last / chunks;
        (0..chunks).map(|i| self.narrow_lastdim(input, i * w, w)).collect()
    }

    /// Numerically stabilized softmax over the last dimension.
    pub fn softmax_lastdim(&mut self, input: Tensor) -> Result<Tensor, TensorError> {
        let shape = self.nodes[input.0].shape.clone();
        let cols = *shape.last().unwrap_or(&0);
        if cols == 0 {
            return Err(TensorError::EmptySoftmax);
        }
        let data = &self.nodes[input.0].data;
        let mut out = vec![0.0; data.len()];
        for (orow, irow) in out.chunks_mut(cols).zip(data.chunks(cols)) {
            let max = irow.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for (o, &x) in orow.iter_mut().zip(irow) {
                *o = (x - max).exp();
                sum += *o;
            }
            for o in orow.iter_mut() {
                *o /= sum;
            }
        }
        let rg = self.wants_grad(input.0);
        Ok(self.push(shape, out, Op::SoftmaxLastDim { input: input.0 }, rg))
    }

    /// Softmax over the last dimension restricted to `mask`ed entries.
    ///
    /// `mask` has shape `(rows, cols)` matching the input's last two
    /// dimensions and broadcasts over any leading dimensions. Entries
    /// outside the mask are exactly `0.0` in the output; each masked row
    /// renormalizes over its own support. Rows of `mask` must be non-empty.
    pub fn masked_softmax_lastdim(
        &mut self,
        input: Tensor,
        mask: Arc<Vec<bool>>,
        rows: usize,
    ) -> Result<Tensor, TensorError> {
        let shape = self.nodes[input.0].shape.clone();
        if shape.len() < 2 {
            return Err(TensorError::BadShape {
                op: "masked_softmax_lastdim",
                shape,
                reason: "needs at least 2 dimensions",
            });
        }
        let cols = shape[shape.len() - 1];
        if shape[shape.len() - 2] != rows || mask.len() != rows * cols {
            return Err(TensorError::ShapeMismatch {
                op: "masked_softmax_lastdim",
                lhs: shape,
                rhs: vec![rows, mask.len() / rows.max(1)],
            });
        }
        for r in 0..rows {
            if !mask[r * cols..(r + 1) * cols].iter().any(|&m| m) {
                return Err(TensorError::EmptyMaskRow { row: r });
            }
        }
        let data = &self.nodes[input.0].data;
        let mut out = vec![0.0; data.len()];
        for (flat, (orow, irow)) in out.chunks_mut(cols).zip(data.chunks(cols)).enumerate() {
            let mrow = &mask[(flat % rows) * cols..(flat % rows + 1) * cols];
            let max = irow
                .iter()
                .zip(mrow)
                .filter(|(_, &m)| m)
                .map(|(&x, _)| x)
                .fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for ((o, &x), &m) in orow.iter_mut().zip(irow).zip(mrow) {
                if m {
                    *o = (x - max).exp();
                    sum += *o;
                }
            }
            for (o, &m) in orow.iter_mut().zip(mrow) {
                if m {
                    *o /= sum;
                }
            }
        }
        let rg = self.wants_grad(input.0);
        Ok(self.push(shape, out, Op::MaskedSoftmaxLastDim { input: input.0 }, rg))
    }

    /// Layer normalization over the last dimension with learnable gain and
    /// shift (`gamma`, `beta`, both shaped `[last_dim]`).
    pub fn layer_norm_lastdim(
        &mut self,
        input: Tensor,
        gamma: Tensor,
        beta: Tensor,
    ) -> Result<Tensor, TensorError> {
        let shape = self.nodes[input.0].shape.clone();
        let cols = *shape.last().unwrap_or(&0);
        if cols == 0 {
            return Err(TensorError::BadShape {
                op: "layer_norm_lastdim",
                shape,
                reason: "empty last dimension",
            });
        }
        for t in [gamma, beta] {
            if self.nodes[t.0].shape != [cols] {
                return Err(TensorError::ShapeMismatch {
                    op: "layer_norm_lastdim",
                    lhs: shape,
                    rhs: self.nodes[t.0].shape.clone(),
                });
            }
        }
        let data = &self.nodes[input.0].data;
        let (gd, bd) = (&self.nodes[gamma.0].data, &self.nodes[beta.0].data);
        let mut out = vec![0.0; data.len()];
        for (orow, irow) in out.chunks_mut(cols).zip(data.chunks(cols)) {
            let (mean, var) = row_mean_var(irow);
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for j in 0..cols {
                orow[j] = (irow[j] - mean) * inv * gd[j] + bd[j];
            }
        }
        let rg =
            self.wants_grad(input.0) || self.wants_grad(gamma.0) || self.wants_grad(beta.0);
        Ok(self.push(
            shape,
            out,
            Op::LayerNormLastDim { input: input.0, gamma: gamma.0, beta: beta.0 },
            rg,
        ))
    }

    /// Affine map on the last dimension: `y = x W + b` with `x (..., in)`,
    /// `W (in, out)`, `b (out)`.
    pub fn linear(
        &mut self,
        input: Tensor,
        weight: Tensor,
        bias: Tensor,
    ) -> Result<Tensor, TensorError> {
        let xs = self.nodes[input.0].shape.clone();
        let ws = self.nodes[weight.0].shape.clone();
        let bs = self.nodes[bias.0].shape.clone();
        let d_in = *xs.last().unwrap_or(&0);
        if ws.len() != 2 || ws[0] != d_in {
            return Err(TensorError::ShapeMismatch { op: "linear", lhs: xs, rhs: ws });
        }
        let d_out = ws[1];
        if bs != [d_out] {
            return Err(TensorError::ShapeMismatch { op: "linear", lhs: ws, rhs: bs });
        }
        let rows = numel(&xs) / d_in;
        let mut out = vec![0.0; rows * d_out];
        matmul_nn(
            &self.nodes[input.0].data,
            &self.nodes[weight.0].data,
            rows,
            d_in,
            d_out,
            &mut out,
        );
        let bd = &self.nodes[bias.0].data;
        for row in out.chunks_mut(d_out) {
            for (o, b) in row.iter_mut().zip(bd) {
                *o += b;
            }
        }
        let mut out_shape = xs;
        *out_shape.last_mut().unwrap() = d_out;
        let rg = self.wants_grad(input.0) || self.wants_grad(weight.0) || self.wants_grad(bias.0);
        Ok(self.push(
            out_shape,
            out,
            Op::Linear { input: input.0, weight: weight.0, bias: bias.0 },
            rg,
        ))
    }

    /// Elementwise rectified linear unit.
    pub fn relu(&mut self, input: Tensor) -> Tensor {
        let out: Vec<f64> = self.nodes[input.0].data.iter().map(|&x| x.max(0.0)).collect();
        let shape = self.nodes[input.0].shape.clone();
        let rg = self.wants_grad(input.0);
        self.push(shape, out, Op::Relu { input: input.0 }, rg)
    }

    /// Elementwise GELU, tanh approximation.
    pub fn gelu(&mut self, input: Tensor) -> Tensor {
        let out: Vec<f64> = self.nodes[input.0].data.iter().map(|&x| gelu_value(x)).collect();
        let shape = self.nodes[input.0].shape.clone();
        let rg = self.wants_grad(input.0);
        self.push(shape, out, Op::Gelu { input: input.0 }, rg)
    }

    /// Mean over all elements; result has shape `[1]`.
    pub fn mean(&mut self, input: Tensor) -> Tensor {
        let data = &self.nodes[input.0].data;
        let m = data.iter().sum::<f64>() / data.len() as f64;
        let rg = self.wants_grad(input.0);
        self.push(vec![1], vec![m], Op::Mean { input: input.0 }, rg)
    }

    /// Sum of squared elements; result has shape `[1]`.
    pub fn sum_squares(&mut self, input: Tensor) -> Tensor {
        let s = self.nodes[input.0].data.iter().map(|x| x * x).sum::<f64>();
        let rg = self.wants_grad(input.0);
        self.push(vec![1], vec![s], Op::SumSquares { input: input.0 }, rg)
    }

    /// Identity in value, but blocks gradient flow (stop-gradient).
    pub fn detach(&mut self, input: Tensor) -> Tensor {
        let data = self.nodes[input.0].data.clone();
        let shape = self.nodes[input.0].shape.clone();
        self.push(shape, data, Op::Detach, false)
    }

    /// Selects rows of a 2-D `table` by index; gradients scatter-add back
    /// into the selected rows.
    pub fn gather_rows(
        &mut self,
        table: Tensor,
        indices: Arc<Vec<usize>>,
    ) -> Result<Tensor, TensorError> {
        let ts = self.nodes[table.0].shape.clone();
        if ts.len() != 2 {
            return Err(TensorError::BadShape {
                op: "gather_rows",
                shape: ts,
                reason: "table must be 2-D",
            });
        }
        let (rows, d) = (ts[0], ts[1]);
        let mut out = vec![0.0; indices.len() * d];
        let data = &self.nodes[table.0].data;
        for (l, &idx) in indices.iter().enumerate() {
            if idx >= rows {
                return Err(TensorError::GatherOutOfRange { index: idx, rows });
            }
            out[l * d..(l + 1) * d].copy_from_slice(&data[idx * d..(idx + 1) * d]);
        }
        let rg = self.wants_grad(table.0);
        let shape = vec![indices.len(), d];
        Ok(self.push(shape, out, Op::GatherRows { table: table.0, indices }, rg))
    }

    /// Applies a [`LinearOperator`] along the trailing dimensions; leading
    /// dimensions are treated as a batch. Gradients use the operator's
    /// adjoint.
    pub fn apply_linear_map(
        &mut self,
        map: Arc<dyn LinearOperator>,
        input: Tensor,
    ) -> Result<Tensor, TensorError> {
        let xs = self.nodes[input.0].shape.clone();
        let in_shape = map.input_shape().to_vec();
        if xs.len() < in_shape.len() || xs[xs.len() - in_shape.len()..] != in_shape[..] {
            return Err(TensorError::ShapeMismatch {
                op: "apply_linear_map",
                lhs: xs,
                rhs: in_shape,
            });
        }
        let in_len = numel(&in_shape);
        let out_shape_tail = map.output_shape().to_vec();
        let out_len = numel(&out_shape_tail);
        let lead = &xs[..xs.len() - in_shape.len()];
        let batch = lead.iter().product::<usize>();
        let mut out = vec![0.0; batch * out_len];
        let data = &self.nodes[input.0].data;
        for b in 0..batch {
            map.apply(&data[b * in_len..(b + 1) * in_len], &mut out[b * out_len..(b + 1) * out_len]);
        }
        let mut out_shape = lead.to_vec();
        out_shape.extend(out_shape_tail);
        let rg = self.wants_grad(input.0);
        Ok(self.push(out_shape, out, Op::LinearMap { input: input.0, map }, rg))
    }

    // ----- backward -------------------------------------------------------

    /// Reverse sweep from a scalar `loss`. Gradients accumulate additively
    /// into every reachable leaf with `requires_grad = true`; repeated calls
    /// keep accumulating until [`Graph::clear_grads`].
    pub fn backward(&mut self, loss: Tensor) -> Result<(), TensorError> {
        let lid = loss.0;
        if self.nodes[lid].data.len() != 1 {
            return Err(TensorError::NonScalarLoss {
                shape: self.nodes[lid].shape.clone(),
            });
        }
        if matches!(self.nodes[lid].op, Op::Leaf) {
            return Err(TensorError::BackwardOnLeaf);
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::new();
        grads.resize_with(lid + 1, || None);
        grads[lid] = Some(vec![1.0]);
        for id in (0..=lid).rev() {
            let Some(g) = grads[id].take() else { continue };
            if !self.nodes[id].requires_grad {
                continue;
            }
            if matches!(self.nodes[id].op, Op::Leaf) {
                let node = &mut self.nodes[id];
                let len = node.data.len();
                let buf = node.grad.get_or_insert_with(|| vec![0.0; len]);
                for (b, gi) in buf.iter_mut().zip(&g) {
                    *b += gi;
                }
                continue;
            }
            self.propagate(id, &g, &mut grads);
        }
        Ok(())
    }

    #[allow(clippy::too_many_lines)]
    fn propagate(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        match &node.op {
            Op::Leaf | Op::Detach => {}
            Op::MatMul { lhs, rhs } => {
                let (ls, rs) = (&self.nodes[*lhs].shape, &self.nodes[*rhs].shape);
                let (m, k) = (ls[ls.len() - 2], ls[ls.len() - 1]);
                let n = rs[rs.len() - 1];
                let shared = rs.len() == 2;
                let batch: usize = ls[..ls.len() - 2].iter().product();
                let (ld, rd) = (&self.nodes[*lhs].data, &self.nodes[*rhs].data);
                if self.wants_grad(*lhs) {
                    let gl = slot(grads, *lhs, ld.len());
                    for b in 0..batch {
                        let gc = &g[b * m * n..(b + 1) * m * n];
                        let bm = if shared { &rd[..] } else { &rd[b * k * n..(b + 1) * k * n] };
                        matmul_nt(gc, bm, m, n, k, &mut gl[b * m * k..(b + 1) * m * k]);
                    }
                }
                if self.wants_grad(*rhs) {
                    let gr = slot(grads, *rhs, rd.len());
                    for b in 0..batch {
                        let gc = &g[b * m * n..(b + 1) * m * n];
                        let a = &ld[b * m * k..(b + 1) * m * k];
                        let out = if shared { &mut gr[..] } else { &mut gr[b * k * n..(b + 1) * k * n] };
                        matmul_tn(a, gc, m, k, n, out);
                    }
                }
            }
            Op::Add { lhs, rhs } => {
                if self.wants_grad(*lhs) {
                    let gl = slot(grads, *lhs, g.len());
                    for (o, gi) in gl.iter_mut().zip(g) {
                        *o += gi;
                    }
                }
                if self.wants_grad(*rhs) {
                    let rlen = self.nodes[*rhs].data.len();
                    let gr = slot(grads, *rhs, rlen);
                    for block in g.chunks(rlen) {
                        for (o, gi) in gr.iter_mut().zip(block) {
                            *o += gi;
                        }
                    }
                }
            }
            Op::Sub { lhs, rhs } => {
                if self.wants_grad(*lhs) {
                    let gl = slot(grads, *lhs, g.len());
                    for (o, gi) in gl.iter_mut().zip(g) {
                        *o += gi;
                    }
                }
                if self.wants_grad(*rhs) {
                    let gr = slot(grads, *rhs, g.len());
                    for (o, gi) in gr.iter_mut().zip(g) {
                        *o -= gi;
                    }
                }
            }
            Op::Mul { lhs, rhs } => {
                if self.wants_grad(*lhs) {
                    let rd = &self.nodes[*rhs].data;
                    let gl = slot(grads, *lhs, g.len());
                    for ((o, gi), r) in gl.iter_mut().zip(g).zip(rd) {
                        *o += gi * r;
                    }
                }
                if self.wants_grad(*rhs) {
                    let ld = &self.nodes[*lhs].data;
                    let gr = slot(grads, *rhs, g.len());
                    for ((o, gi), l) in gr.iter_mut().zip(g).zip(ld) {
                        *o += gi * l;
                    }
                }
            }
            Op::Scale { input, factor } => {
                if self.wants_grad(*input) {
                    let gi = slot(grads, *input, g.len());
                    for (o, gv) in gi.iter_mut().zip(g) {
                        *o += gv * factor;
                    }
                }
            }
            Op::AddScalar { input } => {
                if self.wants_grad(*input) {
                    let gi = slot(grads, *input, g.len());
                    for (o, gv) in gi.iter_mut().zip(g) {
                        *o += gv;
                    }
                }
            }
            Op::TransposeLast2 { input } => {
                if self.wants_grad(*input) {
                    let s = &node.shape;
                    let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
                    let gt = transpose_blocks(g, r, c);
                    let gi = slot(grads, *input, gt.len());
                    for (o, gv) in gi.iter_mut().zip(&gt) {
                        *o += gv;
                    }
                }
            }
            Op::Reshape { input } => {
                if self.wants_grad(*input) {
                    let gi = slot(grads, *input, g.len());
                    for (o, gv) in gi.iter_mut().zip(g) {
                        *o += gv;
                    }
                }
            }
            Op::ConcatLastDim { inputs } => {
                let last = *node.shape.last().unwrap();
                let rows = node.data.len() / last;
                let mut offset = 0;
                for &inp in inputs {
                    let c = *self.nodes[inp].shape.last().unwrap();
                    if self.wants_grad(inp) {
                        let gi = slot(grads, inp, rows * c);
                        for row in 0..rows {
                            for j in 0..c {
                                gi[row * c + j] += g[row * last + offset + j];
                            }
                        }
                    }
                    offset += c;
                }
            }
            Op::NarrowLastDim { input, start, len } => {
                if self.wants_grad(*input) {
                    let full = *self.nodes[*input].shape.last().unwrap();
                    let rows = self.nodes[*input].data.len() / full;
                    let gi = slot(grads, *input, rows * full);
                    for row in 0..rows {
                        for j in 0..*len {
                            gi[row * full + start + j] += g[row * len + j];
                        }
                    }
                }
            }
            Op::SoftmaxLastDim { input } => {
                if self.wants_grad(*input) {
                    let cols = *node.shape.last().unwrap();
                    let y = &node.data;
                    let gi = slot(grads, *input, y.len());
                    for ((orow, yrow), grow) in
                        gi.chunks_mut(cols).zip(y.chunks(cols)).zip(g.chunks(cols))
                    {
                        let dot: f64 = yrow.iter().zip(grow).map(|(yv, gv)| yv * gv).sum();
                        for ((o, &yv), &gv) in orow.iter_mut().zip(yrow).zip(grow) {
                            *o += yv * (gv - dot);
                        }
                    }
                }
            }
            Op::MaskedSoftmaxLastDim { input, .. } => {
                // Outside the mask y = 0, so the plain softmax Jacobian
                // restricted to the support falls out of the same formula.
                if self.wants_grad(*input) {
                    let cols = *node.shape.last().unwrap();
                    let y = &node.data;
                    let gi = slot(grads, *input, y.len());
                    for ((orow, yrow), grow) in
                        gi.chunks_mut(cols).zip(y.chunks(cols)).zip(g.chunks(cols))
                    {
                        let dot: f64 = yrow.iter().zip(grow).map(|(yv, gv)| yv * gv).sum();
                        for ((o, &yv), &gv) in orow.iter_mut().zip(yrow).zip(grow) {
                            *o += yv * (gv - dot);
                        }
                    }
                }
            }
            Op::LayerNormLastDim { input, gamma, beta } => {
                let cols = *node.shape.last().unwrap();
                let x = &self.nodes[*input].data;
                let gd = &self.nodes[*gamma].data;
                let rows = x.len() / cols;
                if self.wants_grad(*beta) {
                    let gb = slot(grads, *beta, cols);
                    for grow in g.chunks(cols) {
                        for (o, gv) in gb.iter_mut().zip(grow) {
                            *o += gv;
                        }
                    }
                }
                if self.wants_grad(*gamma) {
                    let gg = slot(grads, *gamma, cols);
                    for (xrow, grow) in x.chunks(cols).zip(g.chunks(cols)) {
                        let (mean, var) = row_mean_var(xrow);
                        let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                        for j in 0..cols {
                            gg[j] += grow[j] * (xrow[j] - mean) * inv;
                        }
                    }
                }
                if self.wants_grad(*input) {
                    let gi = slot(grads, *input, x.len());
                    for row in 0..rows {
                        let xrow = &x[row * cols..(row + 1) * cols];
                        let grow = &g[row * cols..(row + 1) * cols];
                        let (mean, var) = row_mean_var(xrow);
                        let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for j in 0..cols {
                            let d = grow[j] * gd[j];
                            let xh = (xrow[j] - mean) * inv;
                            m1 += d;
                            m2 += d * xh;
                        }
                        m1 /= cols as f64;
                        m2 /= cols as f64;
                        for j in 0..cols {
                            let d = grow[j] * gd[j];
                            let xh = (xrow[j] - mean) * inv;
                            gi[row * cols + j] += (d - m1 - xh * m2) * inv;
                        }
                    }
                }
            }
            Op::Linear { input, weight, bias } => {
                let ws = &self.nodes[*weight].shape;
                let (d_in, d_out) = (ws[0], ws[1]);
                let x = &self.nodes[*input].data;
                let rows = x.len() / d_in;
                if self.wants_grad(*input) {
                    let w = &self.nodes[*weight].data;
                    let gi = slot(grads, *input, x.len());
                    matmul_nt(g, w, rows, d_out, d_in, gi);
                }
                if self.wants_grad(*weight) {
                    let gw = slot(grads, *weight, d_in * d_out);
                    matmul_tn(x, g, rows, d_in, d_out, gw);
                }
                if self.wants_grad(*bias) {
                    let gb = slot(grads, *bias, d_out);
                    for grow in g.chunks(d_out) {
                        for (o, gv) in gb.iter_mut().zip(grow) {
                            *o += gv;
                        }
                    }
                }
            }
            Op::Relu { input } => {
                if self.wants_grad(*input) {
                    let x = &self.nodes[*input].data;
                    let gi = slot(grads, *input, x.len());
                    for ((o, gv), &xv) in gi.iter_mut().zip(g).zip(x) {
                        if xv > 0.0 {
                            *o += gv;
                        }
                    }
                }
            }
            Op::Gelu { input } => {
                if self.wants_grad(*input) {
                    let x = &self.nodes[*input].data;
                    let gi = slot(grads, *input, x.len());
                    for ((o, gv), &xv) in gi.iter_mut().zip(g).zip(x) {
                        *o += gv * gelu_derivative(xv);
                    }
                }
            }
            Op::Mean { input } => {
                if self.wants_grad(*input) {
                    let len = self.nodes[*input].data.len();
                    let gi = slot(grads, *input, len);
                    let gv = g[0] / len as f64;
                    for o in gi.iter_mut() {
                        *o += gv;
                    }
                }
            }
            Op::SumSquares { input } => {
                if self.wants_grad(*input) {
                    let x = &self.nodes[*input].data;
                    let gi = slot(grads, *input, x.len());
                    for (o, &xv) in gi.iter_mut().zip(x) {
                        *o += 2.0 * xv * g[0];
                    }
                }
            }
            Op::GatherRows { table, indices } => {
                if self.wants_grad(*table) {
                    let d = self.nodes[*table].shape[1];
                    let len = self.nodes[*table].data.len();
                    let gt = slot(grads, *table, len);
                    for (l, &idx) in indices.iter().enumerate() {
                        for j in 0..d {
                            gt[idx * d + j] += g[l * d + j];
                        }
                    }
                }
            }
            Op::LinearMap { input, map } => {
                if self.wants_grad(*input) {
                    let in_len = numel(map.input_shape());
                    let out_len = numel(map.output_shape());
                    let total = self.nodes[*input].data.len();
                    let batch = total / in_len;
                    let gi = slot(grads, *input, total);
                    let mut tmp = vec![0.0; in_len];
                    for b in 0..batch {
                        map.adjoint(&g[b * out_len..(b + 1) * out_len], &mut tmp);
                        for (o, t) in gi[b * in_len..(b + 1) * in_len].iter_mut().zip(&tmp) {
                            *o += t;
                        }
                    }
                }
            }
        }
    }
}

fn slot(grads: &mut [Option<Vec<f64>>], id: usize, len: usize) -> &mut Vec<f64> {
    grads[id].get_or_insert_with(|| vec![0.0; len])
}

fn row_mean_var(row: &[f64]) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var)
}

fn gelu_value(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_COEF * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

fn gelu_derivative(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_COEF * x * x * x);
    let t = u.tanh();
    let du = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_COEF * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

/// `out += a @ b` with `a (m, k)`, `b (k, n)`; `out` must be zeroed by the
/// caller when a fresh product is wanted.
fn matmul_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (kk, &aik) in arow.iter().enumerate() {
            let brow = &b[kk * n..(kk + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aik * bv;
            }
        }
    }
}

/// `out += a @ b^T` with `a (m, q)`, `b (p, q)`, `out (m, p)`.
fn matmul_nt(a: &[f64], b: &[f64], m: usize, q: usize, p: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * q..(i + 1) * q];
        let orow = &mut out[i * p..(i + 1) * p];
        for (l, o) in orow.iter_mut().enumerate() {
            let brow = &b[l * q..(l + 1) * q];
            let mut acc = 0.0;
            for (av, bv) in arow.iter().zip(brow) {
                acc += av * bv;
            }
            *o += acc;
        }
    }
}

/// `out += a^T @ b` with `a (r, m)`, `b (r, n)`, `out (m, n)`.
fn matmul_tn(a: &[f64], b: &[f64], r: usize, m: usize, n: usize, out: &mut [f64]) {
    for row in 0..r {
        let arow = &a[row * m..(row + 1) * m];
        let brow = &b[row * n..(row + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

fn transpose_blocks(data: &[f64], r: usize, c: usize) -> Vec<f64> {
    let block = r * c;
    let mut out = vec![0.0; data.len()];
    for (oblk, iblk) in out.chunks_mut(block).zip(data.chunks(block)) {
        for i in 0..r {
            for j in 0..c {
                oblk[j * r + i] = iblk[i * c + j];
            }
        }
    }
    out
}

/// Compares analytic gradients against central finite differences.
///
/// Builds the computation `f` once with every input marked trainable, runs
/// [`Graph::backward`], and then, for each input coordinate, re-evaluates
/// `f` at `x ± step`. Returns the maximum over all coordinates of
/// `|analytic - fd| / max(1, |fd|)`.
pub fn grad_check<F>(
    f: &F,
    inputs: &[(Vec<f64>, Vec<usize>)],
    step: f64,
) -> Result<f64, TensorError>
where
    F: Fn(&mut Graph, &[Tensor]) -> Result<Tensor, TensorError>,
{
    // Analytic pass.
    let mut g = Graph::new();
    let tensors: Vec<Tensor> = inputs
        .iter()
        .map(|(data, shape)| g.leaf(data.clone(), shape, true))
        .collect::<Result<_, _>>()?;
    let loss = f(&mut g, &tensors)?;
    if g.data(loss).len() != 1 {
        return Err(TensorError::NonScalarLoss { shape: g.shape(loss).to_vec() });
    }
    g.backward(loss)?;
    let analytic: Vec<Vec<f64>> = tensors
        .iter()
        .zip(inputs)
        .map(|(t, (data, _))| g.grad(*t).map_or_else(|| vec![0.0; data.len()], <[f64]>::to_vec))
        .collect();

    let eval = |point: &[Vec<f64>]| -> Result<f64, TensorError> {
        let mut g = Graph::new();
        let ts: Vec<Tensor> = point
            .iter()
            .zip(inputs)
            .map(|(data, (_, shape))| g.leaf(data.clone(), shape, false))
            .collect::<Result<_, _>>()?;
        let out = f(&mut g, &ts)?;
        Ok(g.value(out))
    };

    let mut point: Vec<Vec<f64>> = inputs.iter().map(|(d, _)| d.clone()).collect();
    let mut max_err: f64 = 0.0;
    for i in 0..point.len() {
        for c in 0..point[i].len() {
            let orig = point[i][c];
            point[i][c] = orig + step;
            let fp = eval(&point)?;
            point[i][c] = orig - step;
            let fm = eval(&point)?;
            point[i][c] = orig;
            let fd = (fp - fm) / (2.0 * step);
            if !fd.is_finite() || !analytic[i][c].is_finite() {
                return Err(TensorError::NonFinite { context: "grad_check", input: i, coord: c });
            }
            let err = (analytic[i][c] - fd).abs() / fd.abs().max(1.0);
            max_err = max_err.max(err);
        }
    }
    Ok(max_err)
}
