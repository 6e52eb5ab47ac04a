//! Reverse-mode autodiff on a recording tape.
//!
//! Forward calls append nodes that own their materialized buffers; the node
//! index doubles as the topological order. [`Tape::backward`] walks nodes in
//! reverse from the loss and accumulates adjoints for everything that
//! transitively touches a gradient-carrying leaf. The tape itself is never
//! mutated by backward, so differentiating twice gives bitwise-equal results.

use crate::tensor::kernels::{matmul_acc, matmul_nt_acc, matmul_tn_acc};
use crate::tensor::{numel_of, Tensor, TensorError};

const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorId(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: TensorId, b: TensorId, m: usize, k: usize, n: usize },
    MatMulNT { a: TensorId, b: TensorId, m: usize, k: usize, n: usize },
    Add { a: TensorId, b: TensorId },
    Mul { a: TensorId, b: TensorId },
    Scale { x: TensorId, c: f64 },
    AddRowBias { x: TensorId, bias: TensorId, rows: usize, cols: usize },
    LayerNorm { x: TensorId, gamma: TensorId, beta: TensorId, rows: usize, cols: usize, eps: f64 },
    Gelu { x: TensorId },
    Embedding { table: TensorId, ids: Vec<u32>, cols: usize },
    SoftmaxRows { x: TensorId, rows: usize, cols: usize },
    LogSoftmaxRows { x: TensorId, rows: usize, cols: usize },
    LogSumExp { x: TensorId },
    SliceCols { x: TensorId, start: usize, len: usize, rows: usize, cols: usize },
    ConcatCols { xs: Vec<TensorId>, rows: usize, widths: Vec<usize> },
    GatherRows { x: TensorId, rows_idx: Vec<usize>, cols: usize },
    PickPerRow { x: TensorId, idx: Vec<u32>, rows: usize, cols: usize },
    StackScalars { xs: Vec<TensorId> },
    Dot { a: TensorId, b: TensorId, n: usize },
    SumAll { x: TensorId },
    Reshape { x: TensorId },
}

struct Node {
    op: Op,
    shape: Vec<usize>,
    data: Vec<f64>,
    needs_grad: bool,
}

/// Adjoints produced by one backward pass, indexed by [`TensorId`].
#[derive(Debug)]
pub struct Gradients {
    adj: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// The adjoint for `id`, or `None` if the loss does not depend on it.
    pub fn get(&self, id: TensorId) -> Option<&[f64]> {
        self.adj.get(id.0).and_then(|a| a.as_deref())
    }
}

#[derive(Default)]
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

    fn push(&mut self, op: Op, shape: Vec<usize>, data: Vec<f64>, needs_grad: bool) -> TensorId {
        debug_assert_eq!(data.len(), numel_of(&shape));
        self.nodes.push(Node { op, shape, data, needs_grad });
        TensorId(self.nodes.len() - 1)
    }

    fn node(&self, id: TensorId) -> &Node {
        &self.nodes[id.0]
    }

    pub fn value(&self, id: TensorId) -> &[f64] {
        &self.node(id).data
    }

    pub fn shape_of(&self, id: TensorId) -> &[usize] {
        &self.node(id).shape
    }

    fn needs(&self, id: TensorId) -> bool {
        self.node(id).needs_grad
    }

    fn want_matrix(&self, op: &'static str, id: TensorId) -> Result<(usize, usize), TensorError> {
        match self.node(id).shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(TensorError::WrongShape {
                op,
                expected: "a rank-2 tensor",
                got: self.node(id).shape.clone(),
            }),
        }
    }

    fn want_vector(&self, op: &'static str, id: TensorId) -> Result<usize, TensorError> {
        match self.node(id).shape[..] {
            [n] => Ok(n),
            _ => Err(TensorError::WrongShape {
                op,
                expected: "a rank-1 tensor",
                got: self.node(id).shape.clone(),
            }),
        }
    }

    fn want_finite(&self, op: &'static str, id: TensorId) -> Result<(), TensorError> {
        for (i, &v) in self.node(id).data.iter().enumerate() {
            if !v.is_finite() {
                return Err(TensorError::NonFinite { op, index: i, value: v });
            }
        }
        Ok(())
    }

    /// Copies a tensor onto the tape. Gradient-carrying leaves are the only
    /// entry points for [`Tape::backward`] adjoints that outlive the tape.
    pub fn leaf(&mut self, t: &Tensor) -> TensorId {
        self.push(Op::Leaf, t.shape().to_vec(), t.data().to_vec(), t.requires_grad())
    }

    pub fn constant(&mut self, shape: &[usize], data: Vec<f64>) -> Result<TensorId, TensorError> {
        if data.len() != numel_of(shape) {
            return Err(TensorError::LengthMismatch {
                op: "constant",
                shape: shape.to_vec(),
                len: data.len(),
            });
        }
        Ok(self.push(Op::Leaf, shape.to_vec(), data, false))
    }

    pub fn scalar(&mut self, v: f64) -> TensorId {
        self.push(Op::Leaf, Vec::new(), vec![v], false)
    }

    /// a[m,k] @ b[k,n]
    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        let (m, k) = self.want_matrix("matmul", a)?;
        let (k2, n) = self.want_matrix("matmul", b)?;
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                left: vec![m, k],
                right: vec![k2, n],
            });
        }
        let mut out = vec![0.0; m * n];
        matmul_acc(&self.node(a).data, &self.node(b).data, m, k, n, &mut out);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Op::MatMul { a, b, m, k, n }, vec![m, n], out, needs))
    }

    /// a[m,k] @ b[n,k]^T
    pub fn matmul_nt(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        let (m, k) = self.want_matrix("matmul_nt", a)?;
        let (n, k2) = self.want_matrix("matmul_nt", b)?;
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul_nt",
                left: vec![m, k],
                right: vec![n, k2],
            });
        }
        let mut out = vec![0.0; m * n];
        matmul_nt_acc(&self.node(a).data, &self.node(b).data, m, k, n, &mut out);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Op::MatMulNT { a, b, m, k, n }, vec![m, n], out, needs))
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        if self.node(a).shape != self.node(b).shape {
            return Err(TensorError::ShapeMismatch {
                op: "add",
                left: self.node(a).shape.clone(),
                right: self.node(b).shape.clone(),
            });
        }
        let data = self
            .node(a)
            .data
            .iter()
            .zip(&self.node(b).data)
            .map(|(x, y)| x + y)
            .collect();
        let needs = self.needs(a) || self.needs(b);
        let shape = self.node(a).shape.clone();
        Ok(self.push(Op::Add { a, b }, shape, data, needs))
    }

    /// Elementwise product of same-shape tensors.
    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        if self.node(a).shape != self.node(b).shape {
            return Err(TensorError::ShapeMismatch {
                op: "mul",
                left: self.node(a).shape.clone(),
                right: self.node(b).shape.clone(),
            });
        }
        let data = self
            .node(a)
            .data
            .iter()
            .zip(&self.node(b).data)
            .map(|(x, y)| x * y)
            .collect();
        let needs = self.needs(a) || self.needs(b);
        let shape = self.node(a).shape.clone();
        Ok(self.push(Op::Mul { a, b }, shape, data, needs))
    }

    pub fn scale(&mut self, x: TensorId, c: f64) -> TensorId {
        let data = self.node(x).data.iter().map(|v| v * c).collect();
        let shape = self.node(x).shape.clone();
        let needs = self.needs(x);
        self.push(Op::Scale { x, c }, shape, data, needs)
    }

    /// x[r,c] + bias[c] broadcast over rows.
    pub fn add_row_bias(&mut self, x: TensorId, bias: TensorId) -> Result<TensorId, TensorError> {
        let (rows, cols) = self.want_matrix("add_row_bias", x)?;
        let bn = self.want_vector("add_row_bias", bias)?;
        if bn != cols {
            return Err(TensorError::ShapeMismatch {
                op: "add_row_bias",
                left: vec![rows, cols],
                right: vec![bn],
            });
        }
        let bdata = &self.node(bias).data;
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            let row = &self.node(x).data[r * cols..(r + 1) * cols];
            for (xv, bv) in row.iter().zip(bdata) {
                data.push(xv + bv);
            }
        }
        let needs = self.needs(x) || self.needs(bias);
        Ok(self.push(Op::AddRowBias { x, bias, rows, cols }, vec![rows, cols], data, needs))
    }

    /// Per-row layer normalization with learned gain and shift.
    pub fn layer_norm(
        &mut self,
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        eps: f64,
    ) -> Result<TensorId, TensorError> {
        let (rows, cols) = self.want_matrix("layer_norm", x)?;
        let gn = self.want_vector("layer_norm", gamma)?;
        let bn = self.want_vector("layer_norm", beta)?;
        if gn != cols || bn != cols {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm",
                left: vec![rows, cols],
                right: vec![gn, bn],
            });
        }
        let g = &self.node(gamma).data;
        let b = &self.node(beta).data;
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            let row = &self.node(x).data[r * cols..(r + 1) * cols];
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let inv_std = 1.0 / (var + eps).sqrt();
            for j in 0..cols {
                data.push((row[j] - mean) * inv_std * g[j] + b[j]);
            }
        }
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(
            Op::LayerNorm { x, gamma, beta, rows, cols, eps },
            vec![rows, cols],
            data,
            needs,
        ))
    }

    /// Exact-erf GELU, elementwise.
    pub fn gelu(&mut self, x: TensorId) -> TensorId {
        let data = self
            .node(x)
            .data
            .iter()
            .map(|&v| 0.5 * v * (1.0 + libm::erf(v / std::f64::consts::SQRT_2)))
            .collect();
        let shape = self.node(x).shape.clone();
        let needs = self.needs(x);
        self.push(Op::Gelu { x }, shape, data, needs)
    }

    /// Row lookup: out[i,:] = table[ids[i],:].
    pub fn embedding(&mut self, table: TensorId, ids: &[u32]) -> Result<TensorId, TensorError> {
        let (vocab, cols) = self.want_matrix("embedding", table)?;
        for &id in ids {
            if id as usize >= vocab {
                return Err(TensorError::IndexOutOfBounds {
                    op: "embedding",
                    index: id as usize,
                    size: vocab,
                });
            }
        }
        let mut data = Vec::with_capacity(ids.len() * cols);
        for &id in ids {
            let row = &self.node(table).data[id as usize * cols..(id as usize + 1) * cols];
            data.extend_from_slice(row);
        }
        let needs = self.needs(table);
        Ok(self.push(
            Op::Embedding { table, ids: ids.to_vec(), cols },
            vec![ids.len(), cols],
            data,
            needs,
        ))
    }

    /// Numerically stable softmax over each row. Inputs must be finite;
    /// entries at or below -1e30 act as exact exclusions (their weight
    /// underflows to zero).
    pub fn softmax_rows(&mut self, x: TensorId) -> Result<TensorId, TensorError> {
        let (rows, cols) = self.want_matrix("softmax_rows", x)?;
        self.want_finite("softmax_rows", x)?;
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            let row = &self.node(x).data[r * cols..(r + 1) * cols];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
            let sum: f64 = exps.iter().sum();
            data.extend(exps.iter().map(|e| e / sum));
        }
        let needs = self.needs(x);
        Ok(self.push(Op::SoftmaxRows { x, rows, cols }, vec![rows, cols], data, needs))
    }

    /// log(softmax) over each row, kept in log space throughout.
    pub fn log_softmax_rows(&mut self, x: TensorId) -> Result<TensorId, TensorError> {
        let (rows, cols) = self.want_matrix("log_softmax_rows", x)?;
        self.want_finite("log_softmax_rows", x)?;
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            let row = &self.node(x).data[r * cols..(r + 1) * cols];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            data.extend(row.iter().map(|v| v - lse));
        }
        let needs = self.needs(x);
        Ok(self.push(Op::LogSoftmaxRows { x, rows, cols }, vec![rows, cols], data, needs))
    }

    /// log(sum(exp(x))) of a vector, as a scalar.
    pub fn log_sum_exp(&mut self, x: TensorId) -> Result<TensorId, TensorError> {
        let n = self.want_vector("log_sum_exp", x)?;
        if n == 0 {
            return Err(TensorError::WrongShape {
                op: "log_sum_exp",
                expected: "a non-empty vector",
                got: vec![0],
            });
        }
        self.want_finite("log_sum_exp", x)?;
        let row = &self.node(x).data;
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let out = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        let needs = self.needs(x);
        Ok(self.push(Op::LogSumExp { x }, Vec::new(), vec![out], needs))
    }

    pub fn slice_cols(
        &mut self,
        x: TensorId,
        start: usize,
        len: usize,
    ) -> Result<TensorId, TensorError> {
        let (rows, cols) = self.want_matrix("slice_cols", x)?;
        if len == 0 || start + len > cols {
            return Err(TensorError::IndexOutOfBounds {
                op: "slice_cols",
                index: start + len,
                size: cols,
            });
        }
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&self.node(x).data[r * cols + start..r * cols + start + len]);
        }
        let needs = self.needs(x);
        Ok(self.push(
            Op::SliceCols { x, start, len, rows, cols },
            vec![rows, len],
            data,
            needs,
        ))
    }

    pub fn concat_cols(&mut self, xs: &[TensorId]) -> Result<TensorId, TensorError> {
        let first = *xs.first().ok_or(TensorError::WrongShape {
            op: "concat_cols",
            expected: "at least one input",
            got: vec![0],
        })?;
        let (rows, _) = self.want_matrix("concat_cols", first)?;
        let mut widths = Vec::with_capacity(xs.len());
        for &x in xs {
            let (r, c) = self.want_matrix("concat_cols", x)?;
            if r != rows {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_cols",
                    left: self.node(first).shape.clone(),
                    right: self.node(x).shape.clone(),
                });
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&x, &w) in xs.iter().zip(&widths) {
                data.extend_from_slice(&self.node(x).data[r * w..(r + 1) * w]);
            }
        }
        let needs = xs.iter().any(|&x| self.needs(x));
        Ok(self.push(
            Op::ConcatCols { xs: xs.to_vec(), rows, widths },
            vec![rows, total],
            data,
            needs,
        ))
    }

    /// out[i,:] = x[rows_idx[i],:]. Duplicate indices are allowed; their
    /// adjoints sum.
    pub fn gather_rows(&mut self, x: TensorId, rows_idx: &[usize]) -> Result<TensorId, TensorError> {
        let (rows, cols) = self.want_matrix("gather_rows", x)?;
        for &r in rows_idx {
            if r >= rows {
                return Err(TensorError::IndexOutOfBounds {
                    op: "gather_rows",
                    index: r,
                    size: rows,
                });
            }
        }
        let mut data = Vec::with_capacity(rows_idx.len() * cols);
        for &r in rows_idx {
            data.extend_from_slice(&self.node(x).data[r * cols..(r + 1) * cols]);
        }
        let needs = self.needs(x);
        Ok(self.push(
            Op::GatherRows { x, rows_idx: rows_idx.to_vec(), cols },
            vec![rows_idx.len(), cols],
            data,
            needs,
        ))
    }

    /// out[r] = x[r, idx[r]].
    pub fn pick_per_row(&mut self, x: TensorId, idx: &[u32]) -> Result<TensorId, TensorError> {
        let (rows, cols) = self.want_matrix("pick_per_row", x)?;
        if idx.len() != rows {
            return Err(TensorError::ShapeMismatch {
                op: "pick_per_row",
                left: vec![rows, cols],
                right: vec![idx.len()],
            });
        }
        for &i in idx {
            if i as usize >= cols {
                return Err(TensorError::IndexOutOfBounds {
                    op: "pick_per_row",
                    index: i as usize,
                    size: cols,
                });
            }
        }
        let data = idx
            .iter()
            .enumerate()
            .map(|(r, &i)| self.node(x).data[r * cols + i as usize])
            .collect();
        let needs = self.needs(x);
        Ok(self.push(
            Op::PickPerRow { x, idx: idx.to_vec(), rows, cols },
            vec![rows],
            data,
            needs,
        ))
    }

    /// Stacks scalars into a vector, preserving order.
    pub fn stack_scalars(&mut self, xs: &[TensorId]) -> Result<TensorId, TensorError> {
        if xs.is_empty() {
            return Err(TensorError::WrongShape {
                op: "stack_scalars",
                expected: "at least one input",
                got: vec![0],
            });
        }
        for &x in xs {
            if !self.node(x).shape.is_empty() {
                return Err(TensorError::WrongShape {
                    op: "stack_scalars",
                    expected: "scalar inputs",
                    got: self.node(x).shape.clone(),
                });
            }
        }
        let data = xs.iter().map(|&x| self.node(x).data[0]).collect();
        let needs = xs.iter().any(|&x| self.needs(x));
        Ok(self.push(Op::StackScalars { xs: xs.to_vec() }, vec![xs.len()], data, needs))
    }

    /// Inner product of two equal-length vectors, as a scalar.
    pub fn dot(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        let an = self.want_vector("dot", a)?;
        let bn = self.want_vector("dot", b)?;
        if an != bn {
            return Err(TensorError::ShapeMismatch {
                op: "dot",
                left: vec![an],
                right: vec![bn],
            });
        }
        let out = self
            .node(a)
            .data
            .iter()
            .zip(&self.node(b).data)
            .map(|(x, y)| x * y)
            .sum();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Dot { a, b, n: an }, Vec::new(), vec![out], needs))
    }

    pub fn sum_all(&mut self, x: TensorId) -> TensorId {
        let out = self.node(x).data.iter().sum();
        let needs = self.needs(x);
        self.push(Op::SumAll { x }, Vec::new(), vec![out], needs)
    }

    pub fn reshape(&mut self, x: TensorId, shape: &[usize]) -> Result<TensorId, TensorError> {
        if numel_of(shape) != self.node(x).data.len() {
            return Err(TensorError::LengthMismatch {
                op: "reshape",
                shape: shape.to_vec(),
                len: self.node(x).data.len(),
            });
        }
        let data = self.node(x).data.clone();
        let needs = self.needs(x);
        Ok(self.push(Op::Reshape { x }, shape.to_vec(), data, needs))
    }

    /// Accumulates adjoints of everything below `loss`, which must be a
    /// scalar. The tape is unchanged; calling this twice gives bitwise-equal
    /// gradients, and absorbing both results into a [`Tensor`] doubles them.
    pub fn backward(&self, loss: TensorId) -> Result<Gradients, TensorError> {
        if !self.node(loss).shape.is_empty() {
            return Err(TensorError::WrongShape {
                op: "backward",
                expected: "a scalar loss",
                got: self.node(loss).shape.clone(),
            });
        }
        let mut adj: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.node(loss).needs_grad {
            return Ok(Gradients { adj });
        }
        adj[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(d) = adj[i].take() else { continue };
            self.propagate(i, &d, &mut adj);
            adj[i] = Some(d);
        }
        Ok(Gradients { adj })
    }

    fn propagate(&self, i: usize, d: &[f64], adj: &mut [Option<Vec<f64>>]) {
        // Creates (or reuses) the adjoint buffer of an input node.
        macro_rules! buf {
            ($id:expr) => {
                adj[$id.0].get_or_insert_with(|| vec![0.0; self.nodes[$id.0].data.len()])
            };
        }
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::MatMul { a, b, m, k, n } => {
                if self.needs(*a) {
                    matmul_nt_acc(d, &self.node(*b).data, *m, *n, *k, buf!(a));
                }
                if self.needs(*b) {
                    matmul_tn_acc(&self.node(*a).data, d, *m, *k, *n, buf!(b));
                }
            }
            Op::MatMulNT { a, b, m, k, n } => {
                if self.needs(*a) {
                    matmul_acc(d, &self.node(*b).data, *m, *n, *k, buf!(a));
                }
                if self.needs(*b) {
                    matmul_tn_acc(d, &self.node(*a).data, *m, *n, *k, buf!(b));
                }
            }
            Op::Add { a, b } => {
                if self.needs(*a) {
                    for (g, dv) in buf!(a).iter_mut().zip(d) {
                        *g += dv;
                    }
                }
                if self.needs(*b) {
                    for (g, dv) in buf!(b).iter_mut().zip(d) {
                        *g += dv;
                    }
                }
            }
            Op::Mul { a, b } => {
                if self.needs(*a) {
                    let bd = &self.node(*b).data;
                    let ga = buf!(a);
                    for j in 0..d.len() {
                        ga[j] += d[j] * bd[j];
                    }
                }
                if self.needs(*b) {
                    let ad = &self.node(*a).data;
                    let gb = buf!(b);
                    for j in 0..d.len() {
                        gb[j] += d[j] * ad[j];
                    }
                }
            }
            Op::Scale { x, c } => {
                if self.needs(*x) {
                    for (g, dv) in buf!(x).iter_mut().zip(d) {
                        *g += c * dv;
                    }
                }
            }
            Op::AddRowBias { x, bias, rows, cols } => {
                if self.needs(*x) {
                    for (g, dv) in buf!(x).iter_mut().zip(d) {
                        *g += dv;
                    }
                }
                if self.needs(*bias) {
                    let gb = buf!(bias);
                    for r in 0..*rows {
                        for j in 0..*cols {
                            gb[j] += d[r * cols + j];
                        }
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta, rows, cols, eps } => {
                let xd = &self.node(*x).data;
                let g = &self.node(*gamma).data;
                let c = *cols;
                for r in 0..*rows {
                    let row = &xd[r * c..(r + 1) * c];
                    let drow = &d[r * c..(r + 1) * c];
                    let mean = row.iter().sum::<f64>() / c as f64;
                    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
                    let inv_std = 1.0 / (var + eps).sqrt();
                    let y: Vec<f64> = row.iter().map(|v| (v - mean) * inv_std).collect();
                    if self.needs(*x) {
                        let dy: Vec<f64> = drow.iter().zip(g).map(|(dv, gv)| dv * gv).collect();
                        let mean_dy = dy.iter().sum::<f64>() / c as f64;
                        let mean_dy_y =
                            dy.iter().zip(&y).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                        let gx = buf!(x);
                        for j in 0..c {
                            gx[r * c + j] += (dy[j] - mean_dy - y[j] * mean_dy_y) * inv_std;
                        }
                    }
                    if self.needs(*gamma) {
                        let gg = buf!(gamma);
                        for j in 0..c {
                            gg[j] += drow[j] * y[j];
                        }
                    }
                    if self.needs(*beta) {
                        let gb = buf!(beta);
                        for j in 0..c {
                            gb[j] += drow[j];
                        }
                    }
                }
            }
            Op::Gelu { x } => {
                if self.needs(*x) {
                    let xd = &self.node(*x).data;
                    let gx = buf!(x);
                    for j in 0..d.len() {
                        let v = xd[j];
                        let cdf = 0.5 * (1.0 + libm::erf(v / std::f64::consts::SQRT_2));
                        let pdf = FRAC_1_SQRT_2PI * (-0.5 * v * v).exp();
                        gx[j] += d[j] * (cdf + v * pdf);
                    }
                }
            }
            Op::Embedding { table, ids, cols } => {
                if self.needs(*table) {
                    let gt = buf!(table);
                    for (row, &id) in ids.iter().enumerate() {
                        let base = id as usize * cols;
                        for j in 0..*cols {
                            gt[base + j] += d[row * cols + j];
                        }
                    }
                }
            }
            Op::SoftmaxRows { x, rows, cols } => {
                if self.needs(*x) {
                    let p = &self.nodes[i].data;
                    let gx = buf!(x);
                    for r in 0..*rows {
                        let prow = &p[r * cols..(r + 1) * cols];
                        let drow = &d[r * cols..(r + 1) * cols];
                        let dot: f64 = prow.iter().zip(drow).map(|(a, b)| a * b).sum();
                        for j in 0..*cols {
                            gx[r * cols + j] += prow[j] * (drow[j] - dot);
                        }
                    }
                }
            }
            Op::LogSoftmaxRows { x, rows, cols } => {
                if self.needs(*x) {
                    let out = &self.nodes[i].data;
                    let gx = buf!(x);
                    for r in 0..*rows {
                        let orow = &out[r * cols..(r + 1) * cols];
                        let drow = &d[r * cols..(r + 1) * cols];
                        let dsum: f64 = drow.iter().sum();
                        for j in 0..*cols {
                            gx[r * cols + j] += drow[j] - orow[j].exp() * dsum;
                        }
                    }
                }
            }
            Op::LogSumExp { x } => {
                if self.needs(*x) {
                    let out = self.nodes[i].data[0];
                    let xd = &self.node(*x).data;
                    let gx = buf!(x);
                    for j in 0..xd.len() {
                        gx[j] += (xd[j] - out).exp() * d[0];
                    }
                }
            }
            Op::SliceCols { x, start, len, rows, cols } => {
                if self.needs(*x) {
                    let gx = buf!(x);
                    for r in 0..*rows {
                        for j in 0..*len {
                            gx[r * cols + start + j] += d[r * len + j];
                        }
                    }
                }
            }
            Op::ConcatCols { xs, rows, widths } => {
                let total: usize = widths.iter().sum();
                for (which, &x) in xs.iter().enumerate() {
                    if !self.needs(x) {
                        continue;
                    }
                    let offset: usize = widths[..which].iter().sum();
                    let w = widths[which];
                    let gx = buf!(x);
                    for r in 0..*rows {
                        for j in 0..w {
                            gx[r * w + j] += d[r * total + offset + j];
                        }
                    }
                }
            }
            Op::GatherRows { x, rows_idx, cols } => {
                if self.needs(*x) {
                    let gx = buf!(x);
                    for (row, &src) in rows_idx.iter().enumerate() {
                        for j in 0..*cols {
                            gx[src * cols + j] += d[row * cols + j];
                        }
                    }
                }
            }
            Op::PickPerRow { x, idx, rows, cols } => {
                if self.needs(*x) {
                    let gx = buf!(x);
                    for r in 0..*rows {
                        gx[r * cols + idx[r] as usize] += d[r];
                    }
                }
            }
            Op::StackScalars { xs } => {
                for (j, &x) in xs.iter().enumerate() {
                    if self.needs(x) {
                        buf!(x)[0] += d[j];
                    }
                }
            }
            Op::Dot { a, b, n } => {
                if self.needs(*a) {
                    let bd = &self.node(*b).data;
                    let ga = buf!(a);
                    for j in 0..*n {
                        ga[j] += d[0] * bd[j];
                    }
                }
                if self.needs(*b) {
                    let ad = &self.node(*a).data;
                    let gb = buf!(b);
                    for j in 0..*n {
                        gb[j] += d[0] * ad[j];
                    }
                }
            }
            Op::SumAll { x } => {
                if self.needs(*x) {
                    for g in buf!(x).iter_mut() {
                        *g += d[0];
                    }
                }
            }
            Op::Reshape { x } => {
                if self.needs(*x) {
                    for (g, dv) in buf!(x).iter_mut().zip(d) {
                        *g += dv;
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol * a.abs().max(b.abs()).max(1.0)
    }

    #[test]
    fn softmax_matches_frozen_reference() {
        // Reference computed with an independent implementation
        // (max-shifted exp over [1,2,3]).
        let mut tape = Tape::new();
        let x = tape.constant(&[1, 3], vec![1.0, 2.0, 3.0]).unwrap();
        let p = tape.softmax_rows(x).unwrap();
        let want = [0.09003057317038046, 0.24472847105479764, 0.6652409557748218];
        for (got, want) in tape.value(p).iter().zip(want) {
            assert!(close(*got, want, 1e-15), "{got} vs {want}");
        }
        assert!((tape.value(p).iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn log_sum_exp_matches_frozen_reference() {
        let mut tape = Tape::new();
        let x = tape.constant(&[3], vec![1.0, 2.0, 3.0]).unwrap();
        let l = tape.log_sum_exp(x).unwrap();
        assert!(close(tape.value(l)[0], 3.4076059644443806, 1e-15));
    }

    #[test]
    fn gelu_matches_frozen_reference() {
        let mut tape = Tape::new();
        let x = tape.constant(&[5], vec![-2.0, -0.5, 0.0, 0.5, 2.0]).unwrap();
        let y = tape.gelu(x);
        let want = [
            -0.04550026389635842,
            -0.15426876936299344,
            0.0,
            0.34573123063700656,
            1.9544997361036416,
        ];
        for (got, want) in tape.value(y).iter().zip(want) {
            assert!(close(*got, want, 1e-15), "{got} vs {want}");
        }
    }

    #[test]
    fn softmax_rejects_non_finite_input() {
        let mut tape = Tape::new();
        let x = tape.constant(&[1, 2], vec![1.0, f64::NAN]).unwrap();
        let err = tape.softmax_rows(x).unwrap_err();
        assert!(err.to_string().contains("non-finite"), "{err}");
    }

    #[test]
    fn huge_negative_entries_get_exactly_zero_weight() {
        let mut tape = Tape::new();
        let x = tape.constant(&[1, 3], vec![0.3, -1e30, -0.7]).unwrap();
        let p = tape.softmax_rows(x).unwrap();
        assert_eq!(tape.value(p)[1], 0.0);
        let masked = [tape.value(p)[0], tape.value(p)[2]];
        let x2 = tape.constant(&[1, 2], vec![0.3, -0.7]).unwrap();
        let p2 = tape.softmax_rows(x2).unwrap();
        assert_eq!(tape.value(p2), &masked);
    }

    #[test]
    fn matmul_shape_mismatch_reports_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(&[2, 3], vec![0.0; 6]).unwrap();
        let b = tape.constant(&[2, 2], vec![0.0; 4]).unwrap();
        let err = tape.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[2, 2]"), "{msg}");
    }

    #[test]
    fn backward_of_dot_is_the_other_operand() {
        let mut tape = Tape::new();
        let a_t = Tensor::from_vec(&[3], vec![1.0, -2.0, 0.5]).unwrap().with_grad();
        let b_t = Tensor::from_vec(&[3], vec![4.0, 0.25, -1.0]).unwrap().with_grad();
        let a = tape.leaf(&a_t);
        let b = tape.leaf(&b_t);
        let y = tape.dot(a, b).unwrap();
        let grads = tape.backward(y).unwrap();
        assert_eq!(grads.get(a).unwrap(), b_t.data());
        assert_eq!(grads.get(b).unwrap(), a_t.data());
    }

    #[test]
    fn backward_requires_scalar_loss() {
        let mut tape = Tape::new();
        let t = Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap().with_grad();
        let x = tape.leaf(&t);
        let err = tape.backward(x).unwrap_err();
        assert!(err.to_string().contains("scalar"), "{err}");
    }

    #[test]
    fn constant_only_graph_yields_no_adjoints() {
        let mut tape = Tape::new();
        let x = tape.constant(&[2], vec![1.0, 2.0]).unwrap();
        let y = tape.sum_all(x);
        let grads = tape.backward(y).unwrap();
        assert!(grads.get(x).is_none());
    }

    #[test]
    fn repeated_backward_is_bitwise_identical_and_absorb_accumulates() {
        let mut tape = Tape::new();
        let mut w = Tensor::from_vec(&[2, 2], vec![0.5, -1.0, 2.0, 0.1])
            .unwrap()
            .with_grad();
        let wid = tape.leaf(&w);
        let x = tape.constant(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let h = tape.matmul(x, wid).unwrap();
        let g = tape.gelu(h);
        let loss = tape.sum_all(g);
        let g1 = tape.backward(loss).unwrap();
        let g2 = tape.backward(loss).unwrap();
        assert_eq!(g1.get(wid).unwrap(), g2.get(wid).unwrap());
        w.absorb(&g1, wid).unwrap();
        let once = w.grad().unwrap().to_vec();
        w.absorb(&g2, wid).unwrap();
        let twice: Vec<f64> = once.iter().map(|v| v * 2.0).collect();
        assert_eq!(w.grad().unwrap(), &twice[..]);
    }

    #[test]
    fn embedding_rejects_out_of_vocab_ids() {
        let mut tape = Tape::new();
        let table = tape.constant(&[4, 2], vec![0.0; 8]).unwrap();
        let err = tape.embedding(table, &[0, 4]).unwrap_err();
        assert!(err.to_string().contains("out of bounds"), "{err}");
    }

    #[test]
    fn gather_with_duplicates_sums_adjoints() {
        let mut tape = Tape::new();
        let t = Tensor::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0])
            .unwrap()
            .with_grad();
        let x = tape.leaf(&t);
        let g = tape.gather_rows(x, &[0, 0, 1]).unwrap();
        let s = tape.sum_all(g);
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[2.0, 2.0, 1.0, 1.0]);
    }
}
