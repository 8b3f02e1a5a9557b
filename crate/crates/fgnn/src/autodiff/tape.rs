//! The operation tape: forward recording and the reverse sweep.

use crate::error::{FgnnError, Result};

use super::Tensor;

/// Handle to a node on a tape. Valid only for the tape that issued it.
pub type TensorId = usize;

// ── Recorded operations ──────────────────────────────────────────────

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    /// out = A @ B, A:[m,k] B:[k,n]
    Matmul {
        a: TensorId,
        b: TensorId,
    },
    /// out = Aᵀ
    Transpose {
        a: TensorId,
    },
    /// out = A + B (identical shapes)
    Add {
        a: TensorId,
        b: TensorId,
    },
    /// out = A ⊙ B (identical shapes)
    Mul {
        a: TensorId,
        b: TensorId,
    },
    /// out = factor · A
    Scale {
        a: TensorId,
        factor: f64,
    },
    Relu {
        a: TensorId,
    },
    /// slope · x for x < 0
    LeakyRelu {
        a: TensorId,
        slope: f64,
    },
    Sigmoid {
        a: TensorId,
    },
    Tanh {
        a: TensorId,
    },
    /// Total sum of all entries, scalar output.
    Sum {
        a: TensorId,
    },
    /// Stack matrices with equal column counts.
    ConcatRows {
        parts: Vec<TensorId>,
    },
    /// Join matrices with equal row counts side by side.
    ConcatCols {
        parts: Vec<TensorId>,
    },
    /// Contiguous row range of a matrix.
    SliceRows {
        a: TensorId,
        start: usize,
        len: usize,
    },
    /// Row selection with scatter-add backward; the embedding-lookup
    /// primitive. Repeated indices accumulate gradient additively.
    GatherRows {
        a: TensorId,
        indices: Vec<usize>,
    },
    /// Row i of A multiplied by scalar scales[i].
    ScaleRows {
        a: TensorId,
        scales: TensorId,
    },
    /// Row s of the output is the sum of A's rows in segment s.
    SegmentSum {
        a: TensorId,
        segments: Vec<Vec<usize>>,
    },
    /// Exp-normalization within each segment, max-stabilized.
    SegmentSoftmax {
        a: TensorId,
        segments: Vec<Vec<usize>>,
    },
    /// Fused -log softmax(z)[label], numerically stable.
    CrossEntropyLogits {
        logits: TensorId,
        label: usize,
    },
}

#[derive(Debug)]
struct Node {
    op: Op,
    shape: Vec<usize>,
    values: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

impl Node {
    fn rows(&self) -> usize {
        self.shape[0]
    }
    fn cols(&self) -> usize {
        if self.shape.len() >= 2 {
            self.shape[1]
        } else {
            1
        }
    }
    fn numel(&self) -> usize {
        self.values.len()
    }
}

// ── Raw matrix kernels ───────────────────────────────────────────────

/// C += A @ B with A:[m,k], B:[k,n].
fn matmul_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let c_row = &mut c[i * n..(i + 1) * n];
        for (p, &aip) in a_row.iter().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            for j in 0..n {
                c_row[j] += aip * b_row[j];
            }
        }
    }
}

/// C += A @ Bᵀ with A:[m,n], B:[k,n] → C:[m,k].
fn matmul_nt_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let a_row = &a[i * n..(i + 1) * n];
        let c_row = &mut c[i * k..(i + 1) * k];
        for p in 0..k {
            let b_row = &b[p * n..(p + 1) * n];
            let mut acc = 0.0;
            for j in 0..n {
                acc += a_row[j] * b_row[j];
            }
            c_row[p] += acc;
        }
    }
}

/// C += Aᵀ @ B with A:[m,k], B:[m,n] → C:[k,n].
fn matmul_tn_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let b_row = &b[i * n..(i + 1) * n];
        for (p, &aip) in a_row.iter().enumerate() {
            let c_row = &mut c[p * n..(p + 1) * n];
            for j in 0..n {
                c_row[j] += aip * b_row[j];
            }
        }
    }
}

// ── The tape ─────────────────────────────────────────────────────────

/// Append-only recording of one forward computation. Nodes are stored in
/// topological order by construction; the reverse sweep visits them in
/// strict reverse recording order exactly once.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Bind an external tensor as a leaf. Values are snapshotted, so the
    /// source may not be mutated until gradients have been read back.
    pub fn leaf(&mut self, tensor: &Tensor) -> TensorId {
        self.push(
            Op::Leaf,
            tensor.shape().to_vec(),
            tensor.values().to_vec(),
            tensor.requires_grad(),
        )
    }

    /// A leaf that never receives gradient (graph structure, edge weights).
    pub fn constant(&mut self, shape: Vec<usize>, values: Vec<f64>) -> Result<TensorId> {
        let numel: usize = shape.iter().product();
        if numel != values.len() || shape.is_empty() {
            return Err(FgnnError::Contract(format!(
                "constant shape {:?} does not describe {} values",
                shape,
                values.len()
            )));
        }
        Ok(self.push(Op::Leaf, shape, values, false))
    }

    pub fn constant_column(&mut self, values: Vec<f64>) -> TensorId {
        let n = values.len();
        self.push(Op::Leaf, vec![n, 1], values, false)
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id].shape
    }

    pub fn values(&self, id: TensorId) -> &[f64] {
        &self.nodes[id].values
    }

    pub fn value_scalar(&self, id: TensorId) -> f64 {
        self.nodes[id].values[0]
    }

    pub fn grad(&self, id: TensorId) -> Option<&[f64]> {
        self.nodes[id].grad.as_deref()
    }

    pub fn requires_grad(&self, id: TensorId) -> bool {
        self.nodes[id].requires_grad
    }

    /// Drop all accumulated gradients on this tape.
    pub fn zero_grads(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    /// Copy a node out of the tape as a plain tensor.
    pub fn to_tensor(&self, id: TensorId) -> Tensor {
        Tensor::new(self.nodes[id].shape.clone(), self.nodes[id].values.clone())
            .expect("tape nodes are well formed")
    }

    fn push(
        &mut self,
        op: Op,
        shape: Vec<usize>,
        values: Vec<f64>,
        requires_grad: bool,
    ) -> TensorId {
        let id = self.nodes.len();
        self.nodes.push(Node {
            op,
            shape,
            values,
            requires_grad,
            grad: None,
        });
        id
    }

    fn check_id(&self, id: TensorId) -> Result<()> {
        if id >= self.nodes.len() {
            return Err(FgnnError::Contract(format!(
                "tensor id {id} is not on this tape (len {})",
                self.nodes.len()
            )));
        }
        Ok(())
    }

    fn matrix_dims(&self, id: TensorId, op: &'static str) -> Result<(usize, usize)> {
        let node = &self.nodes[id];
        if node.shape.len() != 2 {
            return Err(FgnnError::ShapeMismatch {
                op,
                lhs: node.shape.clone(),
                rhs: vec![],
            });
        }
        Ok((node.shape[0], node.shape[1]))
    }

    // ── Forward ops ──────────────────────────────────────────────

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.check_id(a)?;
        self.check_id(b)?;
        let (m, k) = self.matrix_dims(a, "matmul")?;
        let (k2, n) = self.matrix_dims(b, "matmul")?;
        if k != k2 {
            return Err(FgnnError::ShapeMismatch {
                op: "matmul",
                lhs: self.nodes[a].shape.clone(),
                rhs: self.nodes[b].shape.clone(),
            });
        }
        let mut out = vec![0.0; m * n];
        matmul_acc(
            &self.nodes[a].values,
            &self.nodes[b].values,
            &mut out,
            m,
            k,
            n,
        );
        let rg = self.nodes[a].requires_grad || self.nodes[b].requires_grad;
        Ok(self.push(Op::Matmul { a, b }, vec![m, n], out, rg))
    }

    pub fn transpose(&mut self, a: TensorId) -> Result<TensorId> {
        self.check_id(a)?;
        let (r, c) = self.matrix_dims(a, "transpose")?;
        let src = &self.nodes[a].values;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let rg = self.nodes[a].requires_grad;
        Ok(self.push(Op::Transpose { a }, vec![c, r], out, rg))
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.check_id(a)?;
        self.check_id(b)?;
        if self.nodes[a].shape != self.nodes[b].shape {
            return Err(FgnnError::ShapeMismatch {
                op: "add",
                lhs: self.nodes[a].shape.clone(),
                rhs: self.nodes[b].shape.clone(),
            });
        }
        let out: Vec<f64> = self.nodes[a]
            .values
            .iter()
            .zip(&self.nodes[b].values)
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.nodes[a].shape.clone();
        let rg = self.nodes[a].requires_grad || self.nodes[b].requires_grad;
        Ok(self.push(Op::Add { a, b }, shape, out, rg))
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.check_id(a)?;
        self.check_id(b)?;
        if self.nodes[a].shape != self.nodes[b].shape {
            return Err(FgnnError::ShapeMismatch {
                op: "mul",
                lhs: self.nodes[a].shape.clone(),
                rhs: self.nodes[b].shape.clone(),
            });
        }
        let out: Vec<f64> = self.nodes[a]
            .values
            .iter()
            .zip(&self.nodes[b].values)
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.nodes[a].shape.clone();
        let rg = self.nodes[a].requires_grad || self.nodes[b].requires_grad;
        Ok(self.push(Op::Mul { a, b }, shape, out, rg))
    }

    pub fn scale(&mut self, a: TensorId, factor: f64) -> Result<TensorId> {
        self.check_id(a)?;
        let out: Vec<f64> = self.nodes[a].values.iter().map(|x| factor * x).collect();
        let shape = self.nodes[a].shape.clone();
        let rg = self.nodes[a].requires_grad;
        Ok(self.push(Op::Scale { a, factor }, shape, out, rg))
    }

    pub fn relu(&mut self, a: TensorId) -> Result<TensorId> {
        self.check_id(a)?;
        let out: Vec<f64> = self.nodes[a].values.iter().map(|&x| x.max(0.0)).collect();
        let shape = self.nodes[a].shape.clone();
        let rg = self.nodes[a].requires_grad;
        Ok(self.push(Op::Relu { a }, shape, out, rg))
    }

    pub fn leaky_relu(&mut self, a: TensorId, slope: f64) -> Result<TensorId> {
        self.check_id(a)?;
        let out: Vec<f64> = self.nodes[a]
            .values
            .iter()
            .map(|&x| if x > 0.0 { x } else { slope * x })
            .collect();
        let shape = self.nodes[a].shape.clone();
        let rg = self.nodes[a].requires_grad;
        Ok(self.push(Op::LeakyRelu { a, slope }, shape, out, rg))
    }

    pub fn sigmoid(&mut self, a: TensorId) -> Result<TensorId> {
        self.check_id(a)?;
        let out: Vec<f64> = self.nodes[a]
            .values
            .iter()
            .map(|&x| 1.0 / (1.0 + (-x).exp()))
            .collect();
        let shape = self.nodes[a].shape.clone();
        let rg = self.nodes[a].requires_grad;
        Ok(self.push(Op::Sigmoid { a }, shape, out, rg))
    }

    pub fn tanh(&mut self, a: TensorId) -> Result<TensorId> {
        self.check_id(a)?;
        let out: Vec<f64> = self.nodes[a].values.iter().map(|&x| x.tanh()).collect();
        let shape = self.nodes[a].shape.clone();
        let rg = self.nodes[a].requires_grad;
        Ok(self.push(Op::Tanh { a }, shape, out, rg))
    }

    pub fn sum(&mut self, a: TensorId) -> Result<TensorId> {
        self.check_id(a)?;
        let total: f64 = self.nodes[a].values.iter().sum();
        let rg = self.nodes[a].requires_grad;
        Ok(self.push(Op::Sum { a }, vec![1], vec![total], rg))
    }

    pub fn concat_rows(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        if parts.is_empty() {
            return Err(FgnnError::Contract("concat_rows of zero tensors".into()));
        }
        for &p in parts {
            self.check_id(p)?;
        }
        let (_, cols) = self.matrix_dims(parts[0], "concat_rows")?;
        let mut rows = 0;
        for &p in parts {
            let (r, c) = self.matrix_dims(p, "concat_rows")?;
            if c != cols {
                return Err(FgnnError::ShapeMismatch {
                    op: "concat_rows",
                    lhs: self.nodes[parts[0]].shape.clone(),
                    rhs: self.nodes[p].shape.clone(),
                });
            }
            rows += r;
        }
        let mut out = Vec::with_capacity(rows * cols);
        for &p in parts {
            out.extend_from_slice(&self.nodes[p].values);
        }
        let rg = parts.iter().any(|&p| self.nodes[p].requires_grad);
        Ok(self.push(
            Op::ConcatRows {
                parts: parts.to_vec(),
            },
            vec![rows, cols],
            out,
            rg,
        ))
    }

    pub fn concat_cols(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        if parts.is_empty() {
            return Err(FgnnError::Contract("concat_cols of zero tensors".into()));
        }
        for &p in parts {
            self.check_id(p)?;
        }
        let (rows, _) = self.matrix_dims(parts[0], "concat_cols")?;
        let mut cols = 0;
        for &p in parts {
            let (r, c) = self.matrix_dims(p, "concat_cols")?;
            if r != rows {
                return Err(FgnnError::ShapeMismatch {
                    op: "concat_cols",
                    lhs: self.nodes[parts[0]].shape.clone(),
                    rhs: self.nodes[p].shape.clone(),
                });
            }
            cols += c;
        }
        let mut out = vec![0.0; rows * cols];
        let mut col_off = 0;
        for &p in parts {
            let c = self.nodes[p].cols();
            for i in 0..rows {
                let src = &self.nodes[p].values[i * c..(i + 1) * c];
                out[i * cols + col_off..i * cols + col_off + c].copy_from_slice(src);
            }
            col_off += c;
        }
        let rg = parts.iter().any(|&p| self.nodes[p].requires_grad);
        Ok(self.push(
            Op::ConcatCols {
                parts: parts.to_vec(),
            },
            vec![rows, cols],
            out,
            rg,
        ))
    }

    pub fn slice_rows(&mut self, a: TensorId, start: usize, len: usize) -> Result<TensorId> {
        self.check_id(a)?;
        let (r, c) = self.matrix_dims(a, "slice_rows")?;
        if start + len > r || len == 0 {
            return Err(FgnnError::Contract(format!(
                "slice_rows {start}..{} outside matrix of {r} rows",
                start + len
            )));
        }
        let out = self.nodes[a].values[start * c..(start + len) * c].to_vec();
        let rg = self.nodes[a].requires_grad;
        Ok(self.push(Op::SliceRows { a, start, len }, vec![len, c], out, rg))
    }

    pub fn gather_rows(&mut self, a: TensorId, indices: &[usize]) -> Result<TensorId> {
        self.check_id(a)?;
        let (r, c) = self.matrix_dims(a, "gather_rows")?;
        for &idx in indices {
            if idx >= r {
                return Err(FgnnError::IndexOutOfRange {
                    what: "gather_rows",
                    index: idx,
                    size: r,
                });
            }
        }
        let mut out = Vec::with_capacity(indices.len() * c);
        for &idx in indices {
            out.extend_from_slice(&self.nodes[a].values[idx * c..(idx + 1) * c]);
        }
        let rg = self.nodes[a].requires_grad;
        Ok(self.push(
            Op::GatherRows {
                a,
                indices: indices.to_vec(),
            },
            vec![indices.len(), c],
            out,
            rg,
        ))
    }

    /// Multiply each row of `a` by the matching scalar in `scales`
    /// (shape `[r]` or `[r, 1]`).
    pub fn scale_rows(&mut self, a: TensorId, scales: TensorId) -> Result<TensorId> {
        self.check_id(a)?;
        self.check_id(scales)?;
        let (r, c) = self.matrix_dims(a, "scale_rows")?;
        if self.nodes[scales].numel() != r || self.nodes[scales].cols() != 1 {
            return Err(FgnnError::ShapeMismatch {
                op: "scale_rows",
                lhs: self.nodes[a].shape.clone(),
                rhs: self.nodes[scales].shape.clone(),
            });
        }
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let s = self.nodes[scales].values[i];
            for j in 0..c {
                out[i * c + j] = s * self.nodes[a].values[i * c + j];
            }
        }
        let rg = self.nodes[a].requires_grad || self.nodes[scales].requires_grad;
        Ok(self.push(Op::ScaleRows { a, scales }, vec![r, c], out, rg))
    }

    /// Sum rows of `a` within each segment; output row s corresponds to
    /// segment s. Segments must partition `0..rows(a)`.
    pub fn segment_sum(&mut self, a: TensorId, segments: &[Vec<usize>]) -> Result<TensorId> {
        self.check_id(a)?;
        let (r, c) = self.matrix_dims(a, "segment_sum")?;
        validate_segments(segments, r)?;
        let mut out = vec![0.0; segments.len() * c];
        for (s, segment) in segments.iter().enumerate() {
            for &e in segment {
                for j in 0..c {
                    out[s * c + j] += self.nodes[a].values[e * c + j];
                }
            }
        }
        let rg = self.nodes[a].requires_grad;
        Ok(self.push(
            Op::SegmentSum {
                a,
                segments: segments.to_vec(),
            },
            vec![segments.len(), c],
            out,
            rg,
        ))
    }

    /// Independent softmax within each segment of a flat score vector,
    /// stabilized by per-segment max subtraction. Entries in different
    /// segments never interact.
    pub fn segment_softmax(&mut self, a: TensorId, segments: &[Vec<usize>]) -> Result<TensorId> {
        self.check_id(a)?;
        let n = self.nodes[a].numel();
        if self.nodes[a].cols() != 1 {
            return Err(FgnnError::ShapeMismatch {
                op: "segment_softmax",
                lhs: self.nodes[a].shape.clone(),
                rhs: vec![n, 1],
            });
        }
        validate_segments(segments, n)?;
        let src = &self.nodes[a].values;
        let mut out = vec![0.0; n];
        for segment in segments {
            let max = segment
                .iter()
                .map(|&e| src[e])
                .fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for &e in segment {
                let v = (src[e] - max).exp();
                out[e] = v;
                total += v;
            }
            for &e in segment {
                out[e] /= total;
            }
        }
        let shape = self.nodes[a].shape.clone();
        let rg = self.nodes[a].requires_grad;
        Ok(self.push(
            Op::SegmentSoftmax {
                a,
                segments: segments.to_vec(),
            },
            shape,
            out,
            rg,
        ))
    }

    /// Cross-entropy against a one-hot label, fused with log-softmax:
    /// `logsumexp(z) - z[label]`.
    pub fn cross_entropy_logits(&mut self, logits: TensorId, label: usize) -> Result<TensorId> {
        self.check_id(logits)?;
        let m = self.nodes[logits].numel();
        if self.nodes[logits].cols() != 1 {
            return Err(FgnnError::ShapeMismatch {
                op: "cross_entropy_logits",
                lhs: self.nodes[logits].shape.clone(),
                rhs: vec![m, 1],
            });
        }
        if label >= m {
            return Err(FgnnError::IndexOutOfRange {
                what: "cross_entropy_logits label",
                index: label,
                size: m,
            });
        }
        let z = &self.nodes[logits].values;
        let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let log_sum: f64 = z.iter().map(|&v| (v - max).exp()).sum::<f64>().ln() + max;
        let loss = log_sum - z[label];
        let rg = self.nodes[logits].requires_grad;
        Ok(self.push(
            Op::CrossEntropyLogits { logits, label },
            vec![1],
            vec![loss],
            rg,
        ))
    }

    // ── Backward ─────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Each call computes one fresh
    /// gradient and adds it into the nodes' `grad` slots, so repeated
    /// calls accumulate until [`Tape::zero_grads`]. After returning,
    /// every node with `requires_grad` holds a populated gradient.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        self.check_id(loss)?;
        if self.nodes[loss].numel() != 1 {
            return Err(FgnnError::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.nodes[loss].shape
            )));
        }

        // Working cotangents for this sweep only; merged into node.grad at
        // the end so that repeated backward() calls accumulate exactly.
        let mut deriv: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        deriv[loss] = Some(vec![1.0]);

        for id in (0..=loss).rev() {
            let d_out = match deriv[id].take() {
                Some(d) => d,
                None => continue,
            };
            self.backprop_node(id, &d_out, &mut deriv);
            // Keep the sweep's own contribution for this node.
            deriv[id] = Some(d_out);
        }

        for (node, d) in self.nodes.iter_mut().zip(deriv) {
            if !node.requires_grad {
                continue;
            }
            let contribution = d.unwrap_or_else(|| vec![0.0; node.values.len()]);
            match &mut node.grad {
                Some(g) => {
                    for (gi, ci) in g.iter_mut().zip(&contribution) {
                        *gi += ci;
                    }
                }
                None => node.grad = Some(contribution),
            }
        }
        Ok(())
    }

    fn accumulate(
        deriv: &mut [Option<Vec<f64>>],
        id: TensorId,
        numel: usize,
        f: impl FnOnce(&mut [f64]),
    ) {
        let slot = deriv[id].get_or_insert_with(|| vec![0.0; numel]);
        f(slot);
    }

    fn backprop_node(&self, id: TensorId, d_out: &[f64], deriv: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        match &node.op {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                let (m, k) = (self.nodes[*a].rows(), self.nodes[*a].cols());
                let n = self.nodes[*b].cols();
                if self.nodes[*a].requires_grad {
                    let b_vals = &self.nodes[*b].values;
                    Self::accumulate(deriv, *a, m * k, |d_a| {
                        matmul_nt_acc(d_out, b_vals, d_a, m, n, k);
                    });
                }
                if self.nodes[*b].requires_grad {
                    let a_vals = &self.nodes[*a].values;
                    Self::accumulate(deriv, *b, k * n, |d_b| {
                        matmul_tn_acc(a_vals, d_out, d_b, m, k, n);
                    });
                }
            }
            Op::Transpose { a } => {
                if self.nodes[*a].requires_grad {
                    let (r, c) = (self.nodes[*a].rows(), self.nodes[*a].cols());
                    Self::accumulate(deriv, *a, r * c, |d_a| {
                        for i in 0..r {
                            for j in 0..c {
                                d_a[i * c + j] += d_out[j * r + i];
                            }
                        }
                    });
                }
            }
            Op::Add { a, b } => {
                for &src in &[*a, *b] {
                    if self.nodes[src].requires_grad {
                        Self::accumulate(deriv, src, d_out.len(), |d| {
                            for (di, oi) in d.iter_mut().zip(d_out) {
                                *di += oi;
                            }
                        });
                    }
                }
            }
            Op::Mul { a, b } => {
                if self.nodes[*a].requires_grad {
                    let b_vals = &self.nodes[*b].values;
                    Self::accumulate(deriv, *a, d_out.len(), |d| {
                        for i in 0..d.len() {
                            d[i] += d_out[i] * b_vals[i];
                        }
                    });
                }
                if self.nodes[*b].requires_grad {
                    let a_vals = &self.nodes[*a].values;
                    Self::accumulate(deriv, *b, d_out.len(), |d| {
                        for i in 0..d.len() {
                            d[i] += d_out[i] * a_vals[i];
                        }
                    });
                }
            }
            Op::Scale { a, factor } => {
                if self.nodes[*a].requires_grad {
                    let factor = *factor;
                    Self::accumulate(deriv, *a, d_out.len(), |d| {
                        for i in 0..d.len() {
                            d[i] += factor * d_out[i];
                        }
                    });
                }
            }
            Op::Relu { a } => {
                if self.nodes[*a].requires_grad {
                    let x = &self.nodes[*a].values;
                    Self::accumulate(deriv, *a, d_out.len(), |d| {
                        for i in 0..d.len() {
                            if x[i] > 0.0 {
                                d[i] += d_out[i];
                            }
                        }
                    });
                }
            }
            Op::LeakyRelu { a, slope } => {
                if self.nodes[*a].requires_grad {
                    let x = &self.nodes[*a].values;
                    let slope = *slope;
                    Self::accumulate(deriv, *a, d_out.len(), |d| {
                        for i in 0..d.len() {
                            d[i] += d_out[i] * if x[i] > 0.0 { 1.0 } else { slope };
                        }
                    });
                }
            }
            Op::Sigmoid { a } => {
                if self.nodes[*a].requires_grad {
                    let y = &node.values;
                    Self::accumulate(deriv, *a, d_out.len(), |d| {
                        for i in 0..d.len() {
                            d[i] += d_out[i] * y[i] * (1.0 - y[i]);
                        }
                    });
                }
            }
            Op::Tanh { a } => {
                if self.nodes[*a].requires_grad {
                    let y = &node.values;
                    Self::accumulate(deriv, *a, d_out.len(), |d| {
                        for i in 0..d.len() {
                            d[i] += d_out[i] * (1.0 - y[i] * y[i]);
                        }
                    });
                }
            }
            Op::Sum { a } => {
                if self.nodes[*a].requires_grad {
                    let n = self.nodes[*a].numel();
                    let g = d_out[0];
                    Self::accumulate(deriv, *a, n, |d| {
                        for di in d.iter_mut() {
                            *di += g;
                        }
                    });
                }
            }
            Op::ConcatRows { parts } => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.nodes[p].numel();
                    if self.nodes[p].requires_grad {
                        let chunk = &d_out[offset..offset + len];
                        Self::accumulate(deriv, p, len, |d| {
                            for (di, ci) in d.iter_mut().zip(chunk) {
                                *di += ci;
                            }
                        });
                    }
                    offset += len;
                }
            }
            Op::ConcatCols { parts } => {
                let rows = node.rows();
                let total_cols = node.cols();
                let mut col_off = 0;
                for &p in parts {
                    let c = self.nodes[p].cols();
                    if self.nodes[p].requires_grad {
                        Self::accumulate(deriv, p, rows * c, |d| {
                            for i in 0..rows {
                                for j in 0..c {
                                    d[i * c + j] += d_out[i * total_cols + col_off + j];
                                }
                            }
                        });
                    }
                    col_off += c;
                }
            }
            Op::SliceRows { a, start, len } => {
                if self.nodes[*a].requires_grad {
                    let c = self.nodes[*a].cols();
                    let numel = self.nodes[*a].numel();
                    let (start, len) = (*start, *len);
                    Self::accumulate(deriv, *a, numel, |d| {
                        for i in 0..len {
                            for j in 0..c {
                                d[(start + i) * c + j] += d_out[i * c + j];
                            }
                        }
                    });
                }
            }
            Op::GatherRows { a, indices } => {
                if self.nodes[*a].requires_grad {
                    let c = self.nodes[*a].cols();
                    let numel = self.nodes[*a].numel();
                    Self::accumulate(deriv, *a, numel, |d| {
                        for (i, &idx) in indices.iter().enumerate() {
                            for j in 0..c {
                                d[idx * c + j] += d_out[i * c + j];
                            }
                        }
                    });
                }
            }
            Op::ScaleRows { a, scales } => {
                let (r, c) = (self.nodes[*a].rows(), self.nodes[*a].cols());
                if self.nodes[*a].requires_grad {
                    let s = &self.nodes[*scales].values;
                    Self::accumulate(deriv, *a, r * c, |d| {
                        for i in 0..r {
                            for j in 0..c {
                                d[i * c + j] += d_out[i * c + j] * s[i];
                            }
                        }
                    });
                }
                if self.nodes[*scales].requires_grad {
                    let a_vals = &self.nodes[*a].values;
                    Self::accumulate(deriv, *scales, r, |d| {
                        for i in 0..r {
                            let mut acc = 0.0;
                            for j in 0..c {
                                acc += d_out[i * c + j] * a_vals[i * c + j];
                            }
                            d[i] += acc;
                        }
                    });
                }
            }
            Op::SegmentSum { a, segments } => {
                if self.nodes[*a].requires_grad {
                    let c = self.nodes[*a].cols();
                    let numel = self.nodes[*a].numel();
                    Self::accumulate(deriv, *a, numel, |d| {
                        for (s, segment) in segments.iter().enumerate() {
                            for &e in segment {
                                for j in 0..c {
                                    d[e * c + j] += d_out[s * c + j];
                                }
                            }
                        }
                    });
                }
            }
            Op::SegmentSoftmax { a, segments } => {
                if self.nodes[*a].requires_grad {
                    let y = &node.values;
                    let n = y.len();
                    Self::accumulate(deriv, *a, n, |d| {
                        for segment in segments {
                            let mut dot = 0.0;
                            for &e in segment {
                                dot += d_out[e] * y[e];
                            }
                            for &e in segment {
                                d[e] += y[e] * (d_out[e] - dot);
                            }
                        }
                    });
                }
            }
            Op::CrossEntropyLogits { logits, label } => {
                if self.nodes[*logits].requires_grad {
                    let z = &self.nodes[*logits].values;
                    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let total: f64 = z.iter().map(|&v| (v - max).exp()).sum();
                    let g = d_out[0];
                    let label = *label;
                    Self::accumulate(deriv, *logits, z.len(), |d| {
                        for i in 0..z.len() {
                            let softmax = (z[i] - max).exp() / total;
                            let indicator = if i == label { 1.0 } else { 0.0 };
                            d[i] += g * (softmax - indicator);
                        }
                    });
                }
            }
        }
    }
}

/// Every index in `0..n` must appear in exactly one non-empty segment.
fn validate_segments(segments: &[Vec<usize>], n: usize) -> Result<()> {
    let mut seen = vec![false; n];
    let mut covered = 0usize;
    for (s, segment) in segments.iter().enumerate() {
        if segment.is_empty() {
            return Err(FgnnError::InvalidSegmentation(format!(
                "segment {s} is empty"
            )));
        }
        for &e in segment {
            if e >= n {
                return Err(FgnnError::InvalidSegmentation(format!(
                    "segment {s} references index {e} outside 0..{n}"
                )));
            }
            if seen[e] {
                return Err(FgnnError::InvalidSegmentation(format!(
                    "index {e} appears in more than one segment"
                )));
            }
            seen[e] = true;
            covered += 1;
        }
    }
    if covered != n {
        return Err(FgnnError::InvalidSegmentation(format!(
            "segments cover {covered} of {n} indices"
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{check_gradients, GradCheckConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn assert_close(actual: &[f64], expected: &[f64], tol: f64) {
        assert_eq!(actual.len(), expected.len());
        for (a, e) in actual.iter().zip(expected) {
            assert!(
                (a - e).abs() <= tol,
                "expected {expected:?}, got {actual:?}"
            );
        }
    }

    fn random_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
        let numel: usize = shape.iter().product();
        let values: Vec<f64> = (0..numel).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::new(shape, values).unwrap()
    }

    /// Random values in [-1,1] kept clear of an activation kink at zero
    /// so the finite-difference oracle stays valid.
    fn random_tensor_off_kink(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
        let mut t = random_tensor(rng, shape);
        for v in t.values_mut() {
            if v.abs() < 1e-3 {
                *v = 1e-3 * if *v < 0.0 { -1.0 } else { 1.0 };
            }
        }
        t
    }

    #[test]
    fn matmul_identity_and_hand_arithmetic() {
        let mut tape = Tape::new();
        let eye = tape.constant(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let v = tape.constant(vec![2, 1], vec![3.0, 4.0]).unwrap();
        let out = tape.matmul(eye, v).unwrap();
        assert_eq!(tape.values(out), &[3.0, 4.0]);

        let row = tape.constant(vec![1, 2], vec![1.0, 2.0]).unwrap();
        let prod = tape.matmul(row, v).unwrap();
        assert_eq!(tape.values(prod), &[11.0]);
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(vec![2, 3], vec![0.0; 6]).unwrap();
        let b = tape.constant(vec![2, 2], vec![0.0; 4]).unwrap();
        match tape.matmul(a, b) {
            Err(FgnnError::ShapeMismatch { lhs, rhs, .. }) => {
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![2, 2]);
            }
            other => panic!("expected shape mismatch, got {other:?}"),
        }
    }

    #[test]
    fn tensor_shape_must_describe_values() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
    }

    #[test]
    fn relu_and_leaky_relu_values() {
        let mut tape = Tape::new();
        let x = tape.constant(vec![3], vec![-1.0, -3.5, 2.0]).unwrap();
        let leaky = tape.leaky_relu(x, 0.2).unwrap();
        assert_close(tape.values(leaky), &[-0.2, -0.7, 2.0], 1e-12);
        let relu = tape.relu(x).unwrap();
        assert_close(tape.values(relu), &[0.0, 0.0, 2.0], 1e-12);
    }

    #[test]
    fn segment_softmax_examples() {
        let mut tape = Tape::new();
        let both = tape.constant(vec![2, 1], vec![0.0, 0.0]).unwrap();
        let out = tape.segment_softmax(both, &[vec![0, 1]]).unwrap();
        assert_close(tape.values(out), &[0.5, 0.5], 1e-12);

        let single = tape.constant(vec![1, 1], vec![42.0]).unwrap();
        let out = tape.segment_softmax(single, &[vec![0]]).unwrap();
        assert_close(tape.values(out), &[1.0], 1e-12);

        // Hand-computed softmax of [1,2,3].
        let scores = tape.constant(vec![3, 1], vec![1.0, 2.0, 3.0]).unwrap();
        let out = tape.segment_softmax(scores, &[vec![0, 1, 2]]).unwrap();
        assert_close(tape.values(out), &[0.09003, 0.24473, 0.66524], 1e-5);
    }

    #[test]
    fn segment_softmax_segments_do_not_interact() {
        let mut tape = Tape::new();
        let scores = tape
            .constant(vec![4, 1], vec![100.0, 1.0, 2.0, -50.0])
            .unwrap();
        let out = tape
            .segment_softmax(scores, &[vec![0, 3], vec![1, 2]])
            .unwrap();
        let v = tape.values(out);
        assert!((v[0] + v[3] - 1.0).abs() < 1e-12);
        assert!((v[1] + v[2] - 1.0).abs() < 1e-12);
        // Same relative mass as a plain two-way softmax of [1,2].
        assert_close(&[v[1], v[2]], &[0.26894, 0.73106], 1e-5);
    }

    #[test]
    fn segment_softmax_rejects_bad_segmentations() {
        let mut tape = Tape::new();
        let scores = tape.constant(vec![2, 1], vec![0.0, 0.0]).unwrap();
        assert!(matches!(
            tape.segment_softmax(scores, &[vec![0, 1], vec![]]),
            Err(FgnnError::InvalidSegmentation(_))
        ));
        assert!(matches!(
            tape.segment_softmax(scores, &[vec![0]]),
            Err(FgnnError::InvalidSegmentation(_))
        ));
        assert!(matches!(
            tape.segment_softmax(scores, &[vec![0, 0], vec![1]]),
            Err(FgnnError::InvalidSegmentation(_))
        ));
    }

    #[test]
    fn segment_softmax_sums_and_positivity_on_random_inputs() {
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut tape = Tape::new();
            let scores = tape.leaf(&random_tensor(&mut rng, vec![7, 1]));
            let segments = vec![vec![0, 2, 4], vec![1, 3], vec![5, 6]];
            let out = tape.segment_softmax(scores, &segments).unwrap();
            let v = tape.values(out);
            for segment in &segments {
                let total: f64 = segment.iter().map(|&e| v[e]).sum();
                assert!((total - 1.0).abs() <= 1e-9);
            }
            assert!(v.iter().all(|&x| x > 0.0));
        }
    }

    #[test]
    fn gather_rows_duplicates_rows_and_accumulates_gradient() {
        let mut tape = Tape::new();
        let table = Tensor::matrix(5, 2, (0..10).map(f64::from).collect())
            .unwrap()
            .with_grad();
        let id = tape.leaf(&table);
        let picked = tape.gather_rows(id, &[2, 2]).unwrap();
        assert_eq!(tape.values(picked), &[4.0, 5.0, 4.0, 5.0]);
        let total = tape.sum(picked).unwrap();
        tape.backward(total).unwrap();
        // Both gathered copies push gradient onto row 2.
        assert_eq!(
            tape.grad(id).unwrap(),
            &[0.0, 0.0, 0.0, 0.0, 2.0, 2.0, 0.0, 0.0, 0.0, 0.0]
        );

        assert!(matches!(
            tape.gather_rows(id, &[5]),
            Err(FgnnError::IndexOutOfRange { index: 5, .. })
        ));
    }

    #[test]
    fn backward_of_sum_is_ones_and_of_square_is_2x() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::column(vec![1.0, 2.0]).with_grad());
        let loss = tape.sum(x).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0, 1.0]);

        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::column(vec![1.0, 2.0]).with_grad());
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum(sq).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_requires_scalar_loss_and_accumulates() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::column(vec![1.0, 2.0]).with_grad());
        assert!(matches!(tape.backward(x), Err(FgnnError::Contract(_))));

        let loss = tape.sum(x).unwrap();
        tape.backward(loss).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0, 2.0]);
        tape.zero_grads();
        assert!(tape.grad(x).is_none());
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0, 1.0]);
    }

    #[test]
    fn replay_is_bit_identical() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(99);
            let a = random_tensor(&mut rng, vec![3, 4]).with_grad();
            let b = random_tensor(&mut rng, vec![4, 2]).with_grad();
            let mut tape = Tape::new();
            let (ia, ib) = (tape.leaf(&a), tape.leaf(&b));
            let prod = tape.matmul(ia, ib).unwrap();
            let act = tape.tanh(prod).unwrap();
            let loss = tape.sum(act).unwrap();
            tape.backward(loss).unwrap();
            (
                tape.values(loss).to_vec(),
                tape.grad(ia).unwrap().to_vec(),
                tape.grad(ib).unwrap().to_vec(),
            )
        };
        let first = run();
        let second = run();
        assert_eq!(first, second);
    }

    #[test]
    fn cross_entropy_matches_naive_log_softmax() {
        // Uniform logits over m=4 cost exactly ln 4.
        let mut tape = Tape::new();
        let z = tape.constant(vec![4, 1], vec![0.3; 4]).unwrap();
        let loss = tape.cross_entropy_logits(z, 1).unwrap();
        assert!((tape.value_scalar(loss) - 4.0f64.ln()).abs() < 1e-12);

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..10 {
            let logits: Vec<f64> = (0..10).map(|_| rng.gen_range(-4.0..4.0)).collect();
            let label = rng.gen_range(0..10);
            let mut tape = Tape::new();
            let z = tape.constant(vec![10, 1], logits.clone()).unwrap();
            let fused = tape.cross_entropy_logits(z, label).unwrap();
            // Naive route: softmax, then -log of the label entry.
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let total: f64 = logits.iter().map(|v| (v - max).exp()).sum();
            let naive = -((logits[label] - max).exp() / total).ln();
            assert!((tape.value_scalar(fused) - naive).abs() < 1e-10);
        }

        let mut tape = Tape::new();
        let z = tape.constant(vec![4, 1], vec![0.0; 4]).unwrap();
        assert!(matches!(
            tape.cross_entropy_logits(z, 4),
            Err(FgnnError::IndexOutOfRange { .. })
        ));
    }

    /// Finite-difference sweep over every differentiable op, random
    /// inputs in [-1, 1], 20 seeds, random cotangents.
    #[test]
    fn every_op_matches_finite_differences() {
        let cfg = GradCheckConfig::default();
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);

            let a = random_tensor(&mut rng, vec![3, 4]);
            let b = random_tensor(&mut rng, vec![4, 2]);
            let cot: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let report = check_gradients(
                &[("a".into(), a.clone()), ("b".into(), b.clone())],
                |tape, ids| {
                    let prod = tape.matmul(ids[0], ids[1])?;
                    let w = tape.constant(vec![3, 2], cot.clone())?;
                    let weighted = tape.mul(prod, w)?;
                    tape.sum(weighted)
                },
                &cfg,
            )
            .unwrap();
            assert!(report.passed(cfg.tolerance), "matmul: {report:?}");

            let x = random_tensor_off_kink(&mut rng, vec![4, 3]);
            let y = random_tensor(&mut rng, vec![4, 3]);
            let cot: Vec<f64> = (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect();
            for op in ["add", "mul", "scale", "relu", "leaky", "sigmoid", "tanh"] {
                let report = check_gradients(
                    &[("x".into(), x.clone()), ("y".into(), y.clone())],
                    |tape, ids| {
                        let out = match op {
                            "add" => tape.add(ids[0], ids[1])?,
                            "mul" => tape.mul(ids[0], ids[1])?,
                            "scale" => tape.scale(ids[0], -1.7)?,
                            "relu" => tape.relu(ids[0])?,
                            "leaky" => tape.leaky_relu(ids[0], 0.2)?,
                            "sigmoid" => tape.sigmoid(ids[0])?,
                            _ => tape.tanh(ids[0])?,
                        };
                        let w = tape.constant(vec![4, 3], cot.clone())?;
                        let weighted = tape.mul(out, w)?;
                        tape.sum(weighted)
                    },
                    &cfg,
                )
                .unwrap();
                assert!(report.passed(cfg.tolerance), "{op}: {report:?}");
            }

            // Structural ops: transpose, concat, slice, gather, scale_rows,
            // segment_sum, chained into one loss.
            let m = random_tensor(&mut rng, vec![5, 3]);
            let n2 = random_tensor(&mut rng, vec![2, 3]);
            let s = random_tensor(&mut rng, vec![5, 1]);
            let segments = vec![vec![0, 2], vec![1, 4], vec![3]];
            let label = rng.gen_range(0..5);
            let cot6: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let report = check_gradients(
                &[
                    ("m".into(), m.clone()),
                    ("n".into(), n2.clone()),
                    ("s".into(), s.clone()),
                ],
                |tape, ids| {
                    let stacked = tape.concat_rows(&[ids[0], ids[1]])?; // [7,3]
                    let sliced = tape.slice_rows(stacked, 1, 5)?; // [5,3]
                    let gathered = tape.gather_rows(sliced, &[0, 0, 2, 4, 3])?; // [5,3]
                    let scaled = tape.scale_rows(gathered, ids[2])?; // [5,3]
                    let summed = tape.segment_sum(scaled, &segments)?; // [3,3]
                    let wide = tape.concat_cols(&[summed, summed])?; // [3,6]
                    let t = tape.transpose(wide)?; // [6,3]
                    let first_col = tape.slice_rows(ids[2], 0, 3)?; // [3,1]
                    let folded = tape.matmul(t, first_col)?; // [6,1]
                    let w = tape.constant(vec![6, 1], cot6.clone())?;
                    let weighted = tape.mul(folded, w)?;
                    tape.sum(weighted)
                },
                &cfg,
            )
            .unwrap();
            assert!(report.passed(cfg.tolerance), "structural: {report:?}");

            let scores = random_tensor(&mut rng, vec![6, 1]);
            let soft_segments = vec![vec![0, 1, 2], vec![3, 5], vec![4]];
            let cot: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let report = check_gradients(
                &[("scores".into(), scores.clone())],
                |tape, ids| {
                    let alpha = tape.segment_softmax(ids[0], &soft_segments)?;
                    let w = tape.constant(vec![6, 1], cot.clone())?;
                    let weighted = tape.mul(alpha, w)?;
                    tape.sum(weighted)
                },
                &cfg,
            )
            .unwrap();
            assert!(report.passed(cfg.tolerance), "segment_softmax: {report:?}");

            let logits = random_tensor(&mut rng, vec![5, 1]);
            let report = check_gradients(
                &[("z".into(), logits.clone())],
                |tape, ids| tape.cross_entropy_logits(ids[0], label),
                &cfg,
            )
            .unwrap();
            assert!(report.passed(cfg.tolerance), "cross_entropy: {report:?}");
        }
    }
}
