//! Recording tape for reverse-mode differentiation.
//!
//! Every forward operation appends one node to the tape; [`ComputationTape::backward`]
//! replays the nodes in reverse and accumulates gradients into each tensor that
//! requires them. Tensors are addressed by [`TensorId`], which is only valid on
//! the tape that created it.

use std::sync::atomic::{AtomicU64, Ordering};

use rayon::prelude::*;
use thiserror::Error;

use crate::tensor::{same_shape, Tensor};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Parallel matmul kicks in above these sizes; per-element summation order is
/// identical either way, so results are bitwise independent of thread count.
const PAR_ROWS_MIN: usize = 32;
const PAR_WORK_MIN: usize = 1 << 18;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape {shape:?} contains a zero extent")]
    InvalidShape { shape: Vec<usize> },
    #[error("data length {data_len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, data_len: usize },
    #[error("{op}: operand shapes {lhs:?} and {rhs:?} are incompatible")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: expected a matrix, got shape {shape:?}")]
    NotAMatrix { op: &'static str, shape: Vec<usize> },
    #[error("tensor id belongs to a different tape")]
    ForeignTensor,
    #[error("mask entry at row {row}, position {pos} is {value}; masks hold only 0 or -inf")]
    InvalidMask { row: usize, pos: usize, value: f64 },
    #[error("softmax row {row} is fully masked")]
    FullyMaskedRow { row: usize },
    #[error("log of non-positive value {value} at index {index}")]
    LogDomain { index: usize, value: f64 },
    #[error("backward expects a scalar loss, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },
    #[error("backward already ran on this tape; call reset_grads first")]
    BackwardTwice,
    #[error("{op}: row index {row} out of bounds for {rows} rows")]
    RowOutOfBounds {
        op: &'static str,
        row: usize,
        rows: usize,
    },
    #[error("concat of an empty sequence")]
    EmptyConcat,
    #[error("{op}: axis {axis} out of bounds for rank {rank}")]
    AxisOutOfBounds {
        op: &'static str,
        axis: usize,
        rank: usize,
    },
}

/// Handle to a tensor stored on one specific tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId {
    tape: u64,
    index: usize,
}

#[derive(Debug)]
enum Node {
    MatMul { a: usize, b: usize, out: usize },
    MaskedSoftmax { x: usize, mask: usize, out: usize },
    CausalConv1d { x: usize, kernel: usize, bias: usize, out: usize },
    LeakyRelu { x: usize, out: usize, slope: f64 },
    Elu { x: usize, out: usize },
    Sigmoid { x: usize, out: usize },
    Add { a: usize, b: usize, out: usize },
    Multiply { a: usize, b: usize, out: usize },
    Scale { x: usize, out: usize, factor: f64 },
    Exp { x: usize, out: usize },
    Log { x: usize, out: usize },
    Negate { x: usize, out: usize },
    ClampMin { x: usize, out: usize, min: f64 },
    Concat { parts: Vec<usize>, out: usize, axis: usize },
    Sum { x: usize, out: usize },
    Transpose { x: usize, out: usize },
    GatherRows { x: usize, out: usize, rows: Vec<usize> },
    StackRows { rows: Vec<(usize, usize)>, out: usize },
    PairScores { x: usize, out: usize, pairs: Vec<(usize, usize)> },
}

/// Forward recorder and reverse-mode evaluator.
#[derive(Debug)]
pub struct ComputationTape {
    id: u64,
    tensors: Vec<Tensor>,
    nodes: Vec<Node>,
    backward_run: bool,
}

impl Default for ComputationTape {
    fn default() -> Self {
        Self::new()
    }
}

impl ComputationTape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            tensors: Vec::new(),
            nodes: Vec::new(),
            backward_run: false,
        }
    }

    /// Registers a tensor as-is (leaf); its `requires_grad` flag is kept.
    pub fn leaf(&mut self, tensor: Tensor) -> TensorId {
        self.push(tensor)
    }

    /// Registers a non-differentiable input (masks, adjacency, ones).
    pub fn constant(&mut self, mut tensor: Tensor) -> TensorId {
        if tensor.requires_grad() {
            tensor = Tensor::new(tensor.shape().to_vec(), tensor.data().to_vec())
                .expect("tensor was already valid");
        }
        self.push(tensor)
    }

    /// Registers a trainable input.
    pub fn param(&mut self, tensor: Tensor) -> TensorId {
        self.push(tensor.with_grad())
    }

    pub fn value(&self, id: TensorId) -> Result<&Tensor, TensorError> {
        Ok(&self.tensors[self.check(id)?])
    }

    pub fn grad(&self, id: TensorId) -> Result<Option<&[f64]>, TensorError> {
        Ok(self.tensors[self.check(id)?].grad())
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    fn push(&mut self, tensor: Tensor) -> TensorId {
        let index = self.tensors.len();
        self.tensors.push(tensor);
        TensorId {
            tape: self.id,
            index,
        }
    }

    fn check(&self, id: TensorId) -> Result<usize, TensorError> {
        if id.tape != self.id || id.index >= self.tensors.len() {
            return Err(TensorError::ForeignTensor);
        }
        Ok(id.index)
    }

    fn check2(&self, a: TensorId, b: TensorId) -> Result<(usize, usize), TensorError> {
        Ok((self.check(a)?, self.check(b)?))
    }

    fn requires_any(&self, indices: &[usize]) -> bool {
        indices.iter().any(|&i| self.tensors[i].requires_grad())
    }

    fn record(&mut self, mut out: Tensor, requires: bool, node: impl FnOnce(usize) -> Node) -> TensorId {
        if requires {
            out = out.with_grad();
        }
        let id = self.push(out);
        self.nodes.push(node(id.index));
        id
    }

    fn matrix_dims(&self, op: &'static str, idx: usize) -> Result<(usize, usize), TensorError> {
        let shape = self.tensors[idx].shape();
        if shape.len() != 2 {
            return Err(TensorError::NotAMatrix {
                op,
                shape: shape.to_vec(),
            });
        }
        Ok((shape[0], shape[1]))
    }

    // ---- forward operations -------------------------------------------------

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        let (ai, bi) = self.check2(a, b)?;
        let (m, ka) = self.matrix_dims("matmul", ai)?;
        let (kb, n) = self.matrix_dims("matmul", bi)?;
        if ka != kb {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: self.tensors[ai].shape().to_vec(),
                rhs: self.tensors[bi].shape().to_vec(),
            });
        }
        let data = mm_nn(self.tensors[ai].data(), self.tensors[bi].data(), m, ka, n);
        let out = Tensor::new(vec![m, n], data)?;
        let requires = self.requires_any(&[ai, bi]);
        Ok(self.record(out, requires, |out| Node::MatMul { a: ai, b: bi, out }))
    }

    /// Softmax over the last axis of `logits + mask`, where the mask holds only
    /// 0 or -inf. Masked positions come out exactly 0.0; stabilization subtracts
    /// the max over unmasked entries only.
    pub fn masked_softmax(&mut self, logits: TensorId, mask: TensorId) -> Result<TensorId, TensorError> {
        let (xi, mi) = self.check2(logits, mask)?;
        let (xs, ms) = (self.tensors[xi].shape(), self.tensors[mi].shape());
        if !same_shape(xs, ms) {
            return Err(TensorError::ShapeMismatch {
                op: "masked_softmax",
                lhs: xs.to_vec(),
                rhs: ms.to_vec(),
            });
        }
        let cols = *xs.last().expect("non-empty shape");
        let rows = self.tensors[xi].numel() / cols;
        let x = self.tensors[xi].data();
        let m = self.tensors[mi].data();
        let mut out = vec![0.0; x.len()];
        for r in 0..rows {
            let base = r * cols;
            let mut max = f64::NEG_INFINITY;
            for c in 0..cols {
                let mv = m[base + c];
                if mv == 0.0 {
                    max = max.max(x[base + c]);
                } else if mv != f64::NEG_INFINITY {
                    return Err(TensorError::InvalidMask {
                        row: r,
                        pos: c,
                        value: mv,
                    });
                }
            }
            if max == f64::NEG_INFINITY {
                return Err(TensorError::FullyMaskedRow { row: r });
            }
            let mut denom = 0.0;
            for c in 0..cols {
                if m[base + c] == 0.0 {
                    let e = (x[base + c] - max).exp();
                    out[base + c] = e;
                    denom += e;
                }
            }
            for c in 0..cols {
                if m[base + c] == 0.0 {
                    out[base + c] /= denom;
                }
            }
        }
        let out = Tensor::new(xs.to_vec(), out)?;
        let requires = self.tensors[xi].requires_grad();
        Ok(self.record(out, requires, |out| Node::MaskedSoftmax { x: xi, mask: mi, out }))
    }

    /// 1-D convolution along the time axis with k-1 rows of left zero padding,
    /// so `out[t]` depends only on `x[..=t]`.
    pub fn causal_conv1d(
        &mut self,
        x: TensorId,
        kernel: TensorId,
        bias: TensorId,
    ) -> Result<TensorId, TensorError> {
        let (xi, ki) = self.check2(x, kernel)?;
        let bi = self.check(bias)?;
        let (t_len, d) = self.matrix_dims("causal_conv1d", xi)?;
        let ks = self.tensors[ki].shape();
        if ks.len() != 3 || ks[1] != d {
            return Err(TensorError::ShapeMismatch {
                op: "causal_conv1d",
                lhs: vec![t_len, d],
                rhs: ks.to_vec(),
            });
        }
        let (k, f) = (ks[0], ks[2]);
        if self.tensors[bi].shape() != [f] {
            return Err(TensorError::ShapeMismatch {
                op: "causal_conv1d",
                lhs: vec![k, d, f],
                rhs: self.tensors[bi].shape().to_vec(),
            });
        }
        let xv = self.tensors[xi].data();
        let kv = self.tensors[ki].data();
        let bv = self.tensors[bi].data();
        let mut out = vec![0.0; t_len * f];
        for t in 0..t_len {
            let row = &mut out[t * f..(t + 1) * f];
            row.copy_from_slice(bv);
            for p in 0..k {
                let src = t as isize - (k as isize - 1) + p as isize;
                if src < 0 {
                    continue;
                }
                let xrow = &xv[src as usize * d..(src as usize + 1) * d];
                for (dd, &xval) in xrow.iter().enumerate() {
                    let krow = &kv[(p * d + dd) * f..(p * d + dd + 1) * f];
                    for (o, &kval) in row.iter_mut().zip(krow) {
                        *o += xval * kval;
                    }
                }
            }
        }
        let out = Tensor::new(vec![t_len, f], out)?;
        let requires = self.requires_any(&[xi, ki, bi]);
        Ok(self.record(out, requires, |out| Node::CausalConv1d {
            x: xi,
            kernel: ki,
            bias: bi,
            out,
        }))
    }

    pub fn leaky_relu(&mut self, x: TensorId, slope: f64) -> Result<TensorId, TensorError> {
        let xi = self.check(x)?;
        let data = self.tensors[xi]
            .data()
            .iter()
            .map(|&v| if v > 0.0 { v } else { slope * v })
            .collect();
        let out = Tensor::new(self.tensors[xi].shape().to_vec(), data)?;
        let requires = self.tensors[xi].requires_grad();
        Ok(self.record(out, requires, |out| Node::LeakyRelu { x: xi, out, slope }))
    }

    pub fn elu(&mut self, x: TensorId) -> Result<TensorId, TensorError> {
        let xi = self.check(x)?;
        let data = self.tensors[xi]
            .data()
            .iter()
            .map(|&v| if v > 0.0 { v } else { v.exp() - 1.0 })
            .collect();
        let out = Tensor::new(self.tensors[xi].shape().to_vec(), data)?;
        let requires = self.tensors[xi].requires_grad();
        Ok(self.record(out, requires, |out| Node::Elu { x: xi, out }))
    }

    pub fn sigmoid(&mut self, x: TensorId) -> Result<TensorId, TensorError> {
        let xi = self.check(x)?;
        let data = self.tensors[xi].data().iter().map(|&v| sigmoid(v)).collect();
        let out = Tensor::new(self.tensors[xi].shape().to_vec(), data)?;
        let requires = self.tensors[xi].requires_grad();
        Ok(self.record(out, requires, |out| Node::Sigmoid { x: xi, out }))
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        let (ai, bi) = self.check2(a, b)?;
        self.binary_shapes("add", ai, bi)?;
        let data = self.tensors[ai]
            .data()
            .iter()
            .zip(self.tensors[bi].data())
            .map(|(&x, &y)| x + y)
            .collect();
        let out = Tensor::new(self.tensors[ai].shape().to_vec(), data)?;
        let requires = self.requires_any(&[ai, bi]);
        Ok(self.record(out, requires, |out| Node::Add { a: ai, b: bi, out }))
    }

    pub fn multiply(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        let (ai, bi) = self.check2(a, b)?;
        self.binary_shapes("multiply", ai, bi)?;
        let data = self.tensors[ai]
            .data()
            .iter()
            .zip(self.tensors[bi].data())
            .map(|(&x, &y)| x * y)
            .collect();
        let out = Tensor::new(self.tensors[ai].shape().to_vec(), data)?;
        let requires = self.requires_any(&[ai, bi]);
        Ok(self.record(out, requires, |out| Node::Multiply { a: ai, b: bi, out }))
    }

    pub fn scale(&mut self, x: TensorId, factor: f64) -> Result<TensorId, TensorError> {
        let xi = self.check(x)?;
        let data = self.tensors[xi].data().iter().map(|&v| factor * v).collect();
        let out = Tensor::new(self.tensors[xi].shape().to_vec(), data)?;
        let requires = self.tensors[xi].requires_grad();
        Ok(self.record(out, requires, |out| Node::Scale { x: xi, out, factor }))
    }

    pub fn exp(&mut self, x: TensorId) -> Result<TensorId, TensorError> {
        let xi = self.check(x)?;
        let data = self.tensors[xi].data().iter().map(|&v| v.exp()).collect();
        let out = Tensor::new(self.tensors[xi].shape().to_vec(), data)?;
        let requires = self.tensors[xi].requires_grad();
        Ok(self.record(out, requires, |out| Node::Exp { x: xi, out }))
    }

    pub fn log(&mut self, x: TensorId) -> Result<TensorId, TensorError> {
        let xi = self.check(x)?;
        for (index, &v) in self.tensors[xi].data().iter().enumerate() {
            if v <= 0.0 {
                return Err(TensorError::LogDomain { index, value: v });
            }
        }
        let data = self.tensors[xi].data().iter().map(|&v| v.ln()).collect();
        let out = Tensor::new(self.tensors[xi].shape().to_vec(), data)?;
        let requires = self.tensors[xi].requires_grad();
        Ok(self.record(out, requires, |out| Node::Log { x: xi, out }))
    }

    pub fn negate(&mut self, x: TensorId) -> Result<TensorId, TensorError> {
        let xi = self.check(x)?;
        let data = self.tensors[xi].data().iter().map(|&v| -v).collect();
        let out = Tensor::new(self.tensors[xi].shape().to_vec(), data)?;
        let requires = self.tensors[xi].requires_grad();
        Ok(self.record(out, requires, |out| Node::Negate { x: xi, out }))
    }

    pub fn clamp_min(&mut self, x: TensorId, min: f64) -> Result<TensorId, TensorError> {
        let xi = self.check(x)?;
        let data = self.tensors[xi].data().iter().map(|&v| v.max(min)).collect();
        let out = Tensor::new(self.tensors[xi].shape().to_vec(), data)?;
        let requires = self.tensors[xi].requires_grad();
        Ok(self.record(out, requires, |out| Node::ClampMin { x: xi, out, min }))
    }

    pub fn concat(&mut self, parts: &[TensorId], axis: usize) -> Result<TensorId, TensorError> {
        if parts.is_empty() {
            return Err(TensorError::EmptyConcat);
        }
        let indices = parts
            .iter()
            .map(|&p| self.check(p))
            .collect::<Result<Vec<_>, _>>()?;
        let first_shape = self.tensors[indices[0]].shape().to_vec();
        let rank = first_shape.len();
        if axis >= rank {
            return Err(TensorError::AxisOutOfBounds {
                op: "concat",
                axis,
                rank,
            });
        }
        let mut axis_total = 0;
        for &i in &indices {
            let s = self.tensors[i].shape();
            let compatible = s.len() == rank
                && s.iter()
                    .zip(&first_shape)
                    .enumerate()
                    .all(|(ax, (a, b))| ax == axis || a == b);
            if !compatible {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: first_shape.clone(),
                    rhs: s.to_vec(),
                });
            }
            axis_total += s[axis];
        }
        let mut out_shape = first_shape.clone();
        out_shape[axis] = axis_total;
        let outer: usize = first_shape[..axis].iter().product();
        let inner: usize = first_shape[axis + 1..].iter().product();
        let mut data = vec![0.0; outer * axis_total * inner];
        let row_len = axis_total * inner;
        let mut offset = 0;
        for &i in &indices {
            let block = self.tensors[i].shape()[axis] * inner;
            let src = self.tensors[i].data();
            for o in 0..outer {
                data[o * row_len + offset..o * row_len + offset + block]
                    .copy_from_slice(&src[o * block..(o + 1) * block]);
            }
            offset += block;
        }
        let out = Tensor::new(out_shape, data)?;
        let requires = self.requires_any(&indices);
        Ok(self.record(out, requires, |out| Node::Concat {
            parts: indices,
            out,
            axis,
        }))
    }

    /// Sum of all entries, producing a scalar of shape `[1]`.
    pub fn sum(&mut self, x: TensorId) -> Result<TensorId, TensorError> {
        let xi = self.check(x)?;
        let total = self.tensors[xi].data().iter().sum();
        let out = Tensor::scalar(total);
        let requires = self.tensors[xi].requires_grad();
        Ok(self.record(out, requires, |out| Node::Sum { x: xi, out }))
    }

    pub fn transpose(&mut self, x: TensorId) -> Result<TensorId, TensorError> {
        let xi = self.check(x)?;
        let (r, c) = self.matrix_dims("transpose", xi)?;
        let src = self.tensors[xi].data();
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = src[i * c + j];
            }
        }
        let out = Tensor::new(vec![c, r], data)?;
        let requires = self.tensors[xi].requires_grad();
        Ok(self.record(out, requires, |out| Node::Transpose { x: xi, out }))
    }

    /// Selects rows of a matrix; duplicate indices are allowed, the backward
    /// pass scatter-adds.
    pub fn gather_rows(&mut self, x: TensorId, rows: &[usize]) -> Result<TensorId, TensorError> {
        let xi = self.check(x)?;
        let (r, c) = self.matrix_dims("gather_rows", xi)?;
        if rows.is_empty() {
            return Err(TensorError::InvalidShape { shape: vec![0, c] });
        }
        for &row in rows {
            if row >= r {
                return Err(TensorError::RowOutOfBounds {
                    op: "gather_rows",
                    row,
                    rows: r,
                });
            }
        }
        let src = self.tensors[xi].data();
        let mut data = Vec::with_capacity(rows.len() * c);
        for &row in rows {
            data.extend_from_slice(&src[row * c..(row + 1) * c]);
        }
        let out = Tensor::new(vec![rows.len(), c], data)?;
        let requires = self.tensors[xi].requires_grad();
        let rows = rows.to_vec();
        Ok(self.record(out, requires, |out| Node::GatherRows { x: xi, out, rows }))
    }

    /// Builds a matrix whose row j is row `sources[j].1` of tensor `sources[j].0`.
    /// All source tensors must be matrices sharing a column count.
    pub fn stack_rows(&mut self, sources: &[(TensorId, usize)]) -> Result<TensorId, TensorError> {
        if sources.is_empty() {
            return Err(TensorError::EmptyConcat);
        }
        let mut resolved = Vec::with_capacity(sources.len());
        for &(id, row) in sources {
            let idx = self.check(id)?;
            let (r, c) = self.matrix_dims("stack_rows", idx)?;
            if row >= r {
                return Err(TensorError::RowOutOfBounds {
                    op: "stack_rows",
                    row,
                    rows: r,
                });
            }
            resolved.push((idx, row, c));
        }
        let cols = resolved[0].2;
        if let Some(&(_, _, c)) = resolved.iter().find(|&&(_, _, c)| c != cols) {
            return Err(TensorError::ShapeMismatch {
                op: "stack_rows",
                lhs: vec![resolved[0].0, cols],
                rhs: vec![c],
            });
        }
        let mut data = Vec::with_capacity(resolved.len() * cols);
        for &(idx, row, _) in &resolved {
            data.extend_from_slice(&self.tensors[idx].data()[row * cols..(row + 1) * cols]);
        }
        let out = Tensor::new(vec![resolved.len(), cols], data)?;
        let indices: Vec<usize> = resolved.iter().map(|&(i, _, _)| i).collect();
        let requires = self.requires_any(&indices);
        let rows: Vec<(usize, usize)> = resolved.iter().map(|&(i, r, _)| (i, r)).collect();
        Ok(self.record(out, requires, |out| Node::StackRows { rows, out }))
    }

    /// Dot products between row pairs of one matrix: `out[p] = x[r_p] . x[s_p]`.
    pub fn pair_scores(&mut self, x: TensorId, pairs: &[(usize, usize)]) -> Result<TensorId, TensorError> {
        let xi = self.check(x)?;
        let (r, c) = self.matrix_dims("pair_scores", xi)?;
        if pairs.is_empty() {
            return Err(TensorError::InvalidShape { shape: vec![0] });
        }
        for &(a, b) in pairs {
            let bad = if a >= r { Some(a) } else if b >= r { Some(b) } else { None };
            if let Some(row) = bad {
                return Err(TensorError::RowOutOfBounds {
                    op: "pair_scores",
                    row,
                    rows: r,
                });
            }
        }
        let src = self.tensors[xi].data();
        let data: Vec<f64> = pairs
            .iter()
            .map(|&(a, b)| {
                src[a * c..(a + 1) * c]
                    .iter()
                    .zip(&src[b * c..(b + 1) * c])
                    .map(|(&x, &y)| x * y)
                    .sum()
            })
            .collect();
        let out = Tensor::new(vec![pairs.len()], data)?;
        let requires = self.tensors[xi].requires_grad();
        let pairs = pairs.to_vec();
        Ok(self.record(out, requires, |out| Node::PairScores { x: xi, out, pairs }))
    }

    fn binary_shapes(&self, op: &'static str, a: usize, b: usize) -> Result<(), TensorError> {
        if !same_shape(self.tensors[a].shape(), self.tensors[b].shape()) {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: self.tensors[a].shape().to_vec(),
                rhs: self.tensors[b].shape().to_vec(),
            });
        }
        Ok(())
    }

    // ---- reverse pass -------------------------------------------------------

    /// Accumulates d(loss)/d(tensor) into every tensor with `requires_grad`.
    /// Nodes replay in reverse recording order, so accumulation order is fixed.
    pub fn backward(&mut self, loss: TensorId) -> Result<(), TensorError> {
        let li = self.check(loss)?;
        if self.tensors[li].numel() != 1 {
            return Err(TensorError::NotScalar {
                shape: self.tensors[li].shape().to_vec(),
            });
        }
        if self.backward_run {
            return Err(TensorError::BackwardTwice);
        }
        self.backward_run = true;
        if !self.tensors[li].requires_grad() {
            return Ok(());
        }
        self.tensors[li].grad_mut()[0] += 1.0;
        for n in (0..self.nodes.len()).rev() {
            self.step_backward(n);
        }
        Ok(())
    }

    /// Clears every gradient buffer and re-arms backward.
    pub fn reset_grads(&mut self) {
        for t in &mut self.tensors {
            t.clear_grad();
        }
        self.backward_run = false;
    }

    fn out_grad(&self, idx: usize) -> Option<Vec<f64>> {
        if !self.tensors[idx].has_grad() {
            return None;
        }
        self.tensors[idx].grad().map(|g| g.to_vec())
    }

    fn accumulate(&mut self, idx: usize, contrib: &[f64]) {
        if !self.tensors[idx].requires_grad() {
            return;
        }
        for (g, &c) in self.tensors[idx].grad_mut().iter_mut().zip(contrib) {
            *g += c;
        }
    }

    fn step_backward(&mut self, node: usize) {
        // Nodes are matched by value to keep borrows simple; saved index data is
        // tiny compared to the tensors themselves.
        match &self.nodes[node] {
            &Node::MatMul { a, b, out } => {
                let Some(g) = self.out_grad(out) else { return };
                let (m, k) = {
                    let s = self.tensors[a].shape();
                    (s[0], s[1])
                };
                let n = self.tensors[b].shape()[1];
                if self.tensors[a].requires_grad() {
                    // dA = dC . B^T: dC is m x n, B is k x n.
                    let da = mm_nt(&g, self.tensors[b].data(), m, k, n);
                    self.accumulate(a, &da);
                }
                if self.tensors[b].requires_grad() {
                    let db = mm_tn(self.tensors[a].data(), &g, m, k, n);
                    self.accumulate(b, &db);
                }
            }
            &Node::MaskedSoftmax { x, mask, out } => {
                let Some(g) = self.out_grad(out) else { return };
                if !self.tensors[x].requires_grad() {
                    return;
                }
                let y = self.tensors[out].data();
                let m = self.tensors[mask].data();
                let cols = *self.tensors[x].shape().last().expect("non-empty shape");
                let rows = y.len() / cols;
                let mut dx = vec![0.0; y.len()];
                for r in 0..rows {
                    let base = r * cols;
                    let mut dot = 0.0;
                    for c in 0..cols {
                        dot += y[base + c] * g[base + c];
                    }
                    for c in 0..cols {
                        if m[base + c] == 0.0 {
                            dx[base + c] = y[base + c] * (g[base + c] - dot);
                        }
                    }
                }
                self.accumulate(x, &dx);
            }
            Node::CausalConv1d { x, kernel, bias, out } => {
                let (x, kernel, bias, out) = (*x, *kernel, *bias, *out);
                let Some(g) = self.out_grad(out) else { return };
                let (t_len, d) = {
                    let s = self.tensors[x].shape();
                    (s[0], s[1])
                };
                let ks = self.tensors[kernel].shape();
                let (k, f) = (ks[0], ks[2]);
                if self.tensors[x].requires_grad() {
                    let kv = self.tensors[kernel].data();
                    let mut dx = vec![0.0; t_len * d];
                    for t in 0..t_len {
                        let grow = &g[t * f..(t + 1) * f];
                        for p in 0..k {
                            let src = t as isize - (k as isize - 1) + p as isize;
                            if src < 0 {
                                continue;
                            }
                            let drow = &mut dx[src as usize * d..(src as usize + 1) * d];
                            for (dd, dv) in drow.iter_mut().enumerate() {
                                let krow = &kv[(p * d + dd) * f..(p * d + dd + 1) * f];
                                let mut s = 0.0;
                                for (&gv, &kvv) in grow.iter().zip(krow) {
                                    s += gv * kvv;
                                }
                                *dv += s;
                            }
                        }
                    }
                    self.accumulate(x, &dx);
                }
                if self.tensors[kernel].requires_grad() {
                    let xv = self.tensors[x].data();
                    let mut dk = vec![0.0; k * d * f];
                    for t in 0..t_len {
                        let grow = &g[t * f..(t + 1) * f];
                        for p in 0..k {
                            let src = t as isize - (k as isize - 1) + p as isize;
                            if src < 0 {
                                continue;
                            }
                            let xrow = &xv[src as usize * d..(src as usize + 1) * d];
                            for (dd, &xval) in xrow.iter().enumerate() {
                                let krow = &mut dk[(p * d + dd) * f..(p * d + dd + 1) * f];
                                for (kv, &gv) in krow.iter_mut().zip(grow) {
                                    *kv += xval * gv;
                                }
                            }
                        }
                    }
                    self.accumulate(kernel, &dk);
                }
                if self.tensors[bias].requires_grad() {
                    let mut db = vec![0.0; f];
                    for t in 0..t_len {
                        for (bv, &gv) in db.iter_mut().zip(&g[t * f..(t + 1) * f]) {
                            *bv += gv;
                        }
                    }
                    self.accumulate(bias, &db);
                }
            }
            &Node::LeakyRelu { x, out, slope } => {
                let Some(g) = self.out_grad(out) else { return };
                let dx: Vec<f64> = self.tensors[x]
                    .data()
                    .iter()
                    .zip(&g)
                    .map(|(&v, &gv)| if v > 0.0 { gv } else { slope * gv })
                    .collect();
                self.accumulate(x, &dx);
            }
            &Node::Elu { x, out } => {
                let Some(g) = self.out_grad(out) else { return };
                let y = self.tensors[out].data().to_vec();
                let dx: Vec<f64> = self.tensors[x]
                    .data()
                    .iter()
                    .zip(y.iter().zip(&g))
                    .map(|(&v, (&yv, &gv))| if v > 0.0 { gv } else { (yv + 1.0) * gv })
                    .collect();
                self.accumulate(x, &dx);
            }
            &Node::Sigmoid { x, out } => {
                let Some(g) = self.out_grad(out) else { return };
                let dx: Vec<f64> = self.tensors[out]
                    .data()
                    .iter()
                    .zip(&g)
                    .map(|(&y, &gv)| y * (1.0 - y) * gv)
                    .collect();
                self.accumulate(x, &dx);
            }
            &Node::Add { a, b, out } => {
                let Some(g) = self.out_grad(out) else { return };
                self.accumulate(a, &g);
                self.accumulate(b, &g);
            }
            &Node::Multiply { a, b, out } => {
                let Some(g) = self.out_grad(out) else { return };
                if self.tensors[a].requires_grad() {
                    let da: Vec<f64> = self.tensors[b]
                        .data()
                        .iter()
                        .zip(&g)
                        .map(|(&bv, &gv)| bv * gv)
                        .collect();
                    self.accumulate(a, &da);
                }
                if self.tensors[b].requires_grad() {
                    let db: Vec<f64> = self.tensors[a]
                        .data()
                        .iter()
                        .zip(&g)
                        .map(|(&av, &gv)| av * gv)
                        .collect();
                    self.accumulate(b, &db);
                }
            }
            &Node::Scale { x, out, factor } => {
                let Some(g) = self.out_grad(out) else { return };
                let dx: Vec<f64> = g.iter().map(|&gv| factor * gv).collect();
                self.accumulate(x, &dx);
            }
            &Node::Exp { x, out } => {
                let Some(g) = self.out_grad(out) else { return };
                let dx: Vec<f64> = self.tensors[out]
                    .data()
                    .iter()
                    .zip(&g)
                    .map(|(&y, &gv)| y * gv)
                    .collect();
                self.accumulate(x, &dx);
            }
            &Node::Log { x, out } => {
                let Some(g) = self.out_grad(out) else { return };
                let dx: Vec<f64> = self.tensors[x]
                    .data()
                    .iter()
                    .zip(&g)
                    .map(|(&v, &gv)| gv / v)
                    .collect();
                self.accumulate(x, &dx);
            }
            &Node::Negate { x, out } => {
                let Some(g) = self.out_grad(out) else { return };
                let dx: Vec<f64> = g.iter().map(|&gv| -gv).collect();
                self.accumulate(x, &dx);
            }
            &Node::ClampMin { x, out, min } => {
                let Some(g) = self.out_grad(out) else { return };
                let dx: Vec<f64> = self.tensors[x]
                    .data()
                    .iter()
                    .zip(&g)
                    .map(|(&v, &gv)| if v > min { gv } else { 0.0 })
                    .collect();
                self.accumulate(x, &dx);
            }
            Node::Concat { parts, out, axis } => {
                let (parts, out, axis) = (parts.clone(), *out, *axis);
                let Some(g) = self.out_grad(out) else { return };
                let out_shape = self.tensors[out].shape().to_vec();
                let outer: usize = out_shape[..axis].iter().product();
                let inner: usize = out_shape[axis + 1..].iter().product();
                let row_len = out_shape[axis] * inner;
                let mut offset = 0;
                for &p in &parts {
                    let block = self.tensors[p].shape()[axis] * inner;
                    if self.tensors[p].requires_grad() {
                        let mut dp = vec![0.0; outer * block];
                        for o in 0..outer {
                            dp[o * block..(o + 1) * block].copy_from_slice(
                                &g[o * row_len + offset..o * row_len + offset + block],
                            );
                        }
                        self.accumulate(p, &dp);
                    }
                    offset += block;
                }
            }
            &Node::Sum { x, out } => {
                let Some(g) = self.out_grad(out) else { return };
                let dx = vec![g[0]; self.tensors[x].numel()];
                self.accumulate(x, &dx);
            }
            &Node::Transpose { x, out } => {
                let Some(g) = self.out_grad(out) else { return };
                let (r, c) = {
                    let s = self.tensors[x].shape();
                    (s[0], s[1])
                };
                let mut dx = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        dx[i * c + j] = g[j * r + i];
                    }
                }
                self.accumulate(x, &dx);
            }
            Node::GatherRows { x, out, rows } => {
                let (x, out, rows) = (*x, *out, rows.clone());
                let Some(g) = self.out_grad(out) else { return };
                if !self.tensors[x].requires_grad() {
                    return;
                }
                let c = self.tensors[x].shape()[1];
                let mut dx = vec![0.0; self.tensors[x].numel()];
                for (j, &row) in rows.iter().enumerate() {
                    for (dv, &gv) in dx[row * c..(row + 1) * c].iter_mut().zip(&g[j * c..(j + 1) * c]) {
                        *dv += gv;
                    }
                }
                self.accumulate(x, &dx);
            }
            Node::StackRows { rows, out } => {
                let (rows, out) = (rows.clone(), *out);
                let Some(g) = self.out_grad(out) else { return };
                let cols = self.tensors[out].shape()[1];
                for (j, &(src, row)) in rows.iter().enumerate() {
                    if !self.tensors[src].requires_grad() {
                        continue;
                    }
                    let mut dsrc = vec![0.0; self.tensors[src].numel()];
                    dsrc[row * cols..(row + 1) * cols].copy_from_slice(&g[j * cols..(j + 1) * cols]);
                    self.accumulate(src, &dsrc);
                }
            }
            Node::PairScores { x, out, pairs } => {
                let (x, out, pairs) = (*x, *out, pairs.clone());
                let Some(g) = self.out_grad(out) else { return };
                if !self.tensors[x].requires_grad() {
                    return;
                }
                let c = self.tensors[x].shape()[1];
                let xv = self.tensors[x].data().to_vec();
                let mut dx = vec![0.0; xv.len()];
                for (p, &(a, b)) in pairs.iter().enumerate() {
                    let gv = g[p];
                    for j in 0..c {
                        dx[a * c + j] += gv * xv[b * c + j];
                        dx[b * c + j] += gv * xv[a * c + j];
                    }
                }
                self.accumulate(x, &dx);
            }
        }
    }
}

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// `C = A (m x k) . B (k x n)`. Row-parallel above the size threshold; each
/// output element is a fixed-order sum either way.
pub(crate) fn mm_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    let work = m * k * n;
    if m >= PAR_ROWS_MIN && work >= PAR_WORK_MIN {
        c.par_chunks_mut(n)
            .enumerate()
            .for_each(|(i, row)| mm_nn_row(a, b, k, n, i, row));
    } else {
        for (i, row) in c.chunks_mut(n).enumerate() {
            mm_nn_row(a, b, k, n, i, row);
        }
    }
    c
}

fn mm_nn_row(a: &[f64], b: &[f64], k: usize, n: usize, i: usize, row: &mut [f64]) {
    for p in 0..k {
        let av = a[i * k + p];
        let brow = &b[p * n..(p + 1) * n];
        for (cv, &bv) in row.iter_mut().zip(brow) {
            *cv += av * bv;
        }
    }
}

/// `C = A . B^T` where A is `rows x inner` and B is `cols x inner`.
pub(crate) fn mm_nt(a: &[f64], b: &[f64], rows: usize, cols: usize, inner: usize) -> Vec<f64> {
    let mut c = vec![0.0; rows * cols];
    let work = rows * cols * inner;
    if rows >= PAR_ROWS_MIN && work >= PAR_WORK_MIN {
        c.par_chunks_mut(cols)
            .enumerate()
            .for_each(|(i, row)| mm_nt_row(a, b, inner, i, row));
    } else {
        for (i, row) in c.chunks_mut(cols).enumerate() {
            mm_nt_row(a, b, inner, i, row);
        }
    }
    c
}

fn mm_nt_row(a: &[f64], b: &[f64], inner: usize, i: usize, row: &mut [f64]) {
    let arow = &a[i * inner..(i + 1) * inner];
    for (j, cv) in row.iter_mut().enumerate() {
        let brow = &b[j * inner..(j + 1) * inner];
        let mut s = 0.0;
        for (&av, &bv) in arow.iter().zip(brow) {
            s += av * bv;
        }
        *cv = s;
    }
}

/// `C = A^T . G` where A is `m x k` and G is `m x n`, giving `k x n`.
pub(crate) fn mm_tn(a: &[f64], g: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; k * n];
    let work = m * k * n;
    if k >= PAR_ROWS_MIN && work >= PAR_WORK_MIN {
        c.par_chunks_mut(n)
            .enumerate()
            .for_each(|(p, row)| mm_tn_row(a, g, m, k, n, p, row));
    } else {
        for (p, row) in c.chunks_mut(n).enumerate() {
            mm_tn_row(a, g, m, k, n, p, row);
        }
    }
    c
}

fn mm_tn_row(a: &[f64], g: &[f64], m: usize, k: usize, n: usize, p: usize, row: &mut [f64]) {
    for i in 0..m {
        let av = a[i * k + p];
        let grow = &g[i * n..(i + 1) * n];
        for (cv, &gv) in row.iter_mut().zip(grow) {
            *cv += av * gv;
        }
    }
}
