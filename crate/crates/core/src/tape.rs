//! Reverse-mode automatic differentiation over small dense matrices.
//!
//! Every value is a row-major 2-D [`Tensor`]; vectors are `1 x n`. Nodes are
//! appended to a [`Tape`] in creation order, which is a valid topological
//! order, so `backward` is a single reverse sweep over the registry.
//!
//! Gradients accumulate. Call [`Tape::zero_grad`] between backward passes
//! unless summing is intended: two passes without a reset give exactly twice
//! the gradient.

use std::fmt;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TapeError {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("index {index} out of range for {op} with bound {bound}")]
    Index {
        op: &'static str,
        index: usize,
        bound: usize,
    },
    #[error("backward root must be scalar, got shape {0:?}")]
    NonScalarRoot((usize, usize)),
    #[error("objective is not finite at coordinate {0}")]
    NonFinite(usize),
    #[error("finite-difference step {0} outside [1e-6, 1e-3]")]
    BadStep(f64),
}

/// Dense row-major matrix of `f64`.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}{:?}", self.shape(), self.data)
    }
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Tensor {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, TapeError> {
        if data.len() != rows * cols {
            return Err(TapeError::Shape {
                op: "from_vec",
                left: (rows, cols),
                right: (data.len(), 1),
            });
        }
        Ok(Tensor { rows, cols, data })
    }

    pub fn row_vector(data: Vec<f64>) -> Self {
        Tensor {
            rows: 1,
            cols: data.len(),
            data,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            rows: 1,
            cols: 1,
            data: vec![value],
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    fn add_assign(&mut self, other: &Tensor) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn transpose(&self) -> Tensor {
        let mut out = Tensor::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    /// `self * other`, plain triple loop in i-k-j order.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor, TapeError> {
        if self.cols != other.rows {
            return Err(TapeError::Shape {
                op: "matmul",
                left: self.shape(),
                right: other.shape(),
            });
        }
        let mut out = Tensor::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                let b_row = &other.data[k * other.cols..(k + 1) * other.cols];
                for (o, b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// Row-wise softmax with max subtraction.
    pub fn row_softmax(&self) -> Tensor {
        let mut out = self.clone();
        for r in 0..self.rows {
            softmax_in_place(out.row_mut(r));
        }
        out
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Numerically stable softmax of a slice, in place.
pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// `ln(sum(exp(row)))` with max shift.
pub fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    Rows,
    Cols,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    /// Elementwise add; the right operand may be a `1 x n` row broadcast over rows.
    Add(NodeId, NodeId, bool),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Tanh(NodeId),
    RowSoftmax(NodeId),
    LogSumExp(NodeId),
    Gather(NodeId, Vec<usize>),
    Pick(NodeId, Vec<usize>),
    Concat(Vec<NodeId>, Axis),
    Slice(NodeId, Axis, usize, usize),
    Transpose(NodeId),
    Sum(NodeId),
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    grad: Tensor,
    op: Op,
}

/// Append-only registry of nodes. One tape per forward pass and per worker.
#[derive(Debug, Default, Clone)]
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

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        let (r, c) = value.shape();
        self.nodes.push(Node {
            value,
            grad: Tensor::zeros(r, c),
            op,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn grad(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].grad
    }

    pub fn shape(&self, id: NodeId) -> (usize, usize) {
        self.nodes[id.0].value.shape()
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad.data.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TapeError> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.push(value, Op::MatMul(a, b)))
    }

    /// Elementwise sum. `b` may also be a single row matching `a`'s width.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TapeError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let broadcast = if sa == sb {
            false
        } else if sb.0 == 1 && sb.1 == sa.1 {
            true
        } else {
            return Err(TapeError::Shape {
                op: "add",
                left: sa,
                right: sb,
            });
        };
        let mut value = self.value(a).clone();
        let bv = self.value(b);
        for r in 0..sa.0 {
            let src = if broadcast { bv.row(0) } else { bv.row(r) };
            for (o, s) in value.row_mut(r).iter_mut().zip(src) {
                *o += s;
            }
        }
        Ok(self.push(value, Op::Add(a, b, broadcast)))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TapeError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(TapeError::Shape {
                op: "mul",
                left: sa,
                right: sb,
            });
        }
        let data = self
            .value(a)
            .data
            .iter()
            .zip(&self.value(b).data)
            .map(|(x, y)| x * y)
            .collect();
        let value = Tensor {
            rows: sa.0,
            cols: sa.1,
            data,
        };
        Ok(self.push(value, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> NodeId {
        let mut value = self.value(a).clone();
        value.data.iter_mut().for_each(|v| *v *= factor);
        self.push(value, Op::Scale(a, factor))
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let mut value = self.value(a).clone();
        value.data.iter_mut().for_each(|v| *v = v.tanh());
        self.push(value, Op::Tanh(a))
    }

    pub fn row_softmax(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).row_softmax();
        self.push(value, Op::RowSoftmax(a))
    }

    /// Row-wise log-sum-exp, producing a `rows x 1` column.
    pub fn log_sum_exp(&mut self, a: NodeId) -> NodeId {
        let src = self.value(a);
        let data: Vec<f64> = (0..src.rows).map(|r| log_sum_exp(src.row(r))).collect();
        let value = Tensor {
            rows: src.rows,
            cols: 1,
            data,
        };
        self.push(value, Op::LogSumExp(a))
    }

    /// Rows of `table` selected by `indices`, in order.
    pub fn embedding_gather(&mut self, table: NodeId, indices: &[usize]) -> Result<NodeId, TapeError> {
        let t = self.value(table);
        let mut value = Tensor::zeros(indices.len(), t.cols);
        for (r, &i) in indices.iter().enumerate() {
            if i >= t.rows {
                return Err(TapeError::Index {
                    op: "embedding_gather",
                    index: i,
                    bound: t.rows,
                });
            }
            value.row_mut(r).copy_from_slice(t.row(i));
        }
        Ok(self.push(value, Op::Gather(table, indices.to_vec())))
    }

    /// One element per row: `out[r] = a[r, indices[r]]`, shape `rows x 1`.
    pub fn pick(&mut self, a: NodeId, indices: &[usize]) -> Result<NodeId, TapeError> {
        let src = self.value(a);
        if indices.len() != src.rows {
            return Err(TapeError::Shape {
                op: "pick",
                left: src.shape(),
                right: (indices.len(), 1),
            });
        }
        let mut data = Vec::with_capacity(indices.len());
        for (r, &c) in indices.iter().enumerate() {
            if c >= src.cols {
                return Err(TapeError::Index {
                    op: "pick",
                    index: c,
                    bound: src.cols,
                });
            }
            data.push(src.get(r, c));
        }
        let value = Tensor {
            rows: indices.len(),
            cols: 1,
            data,
        };
        Ok(self.push(value, Op::Pick(a, indices.to_vec())))
    }

    pub fn concat(&mut self, parts: &[NodeId], axis: Axis) -> Result<NodeId, TapeError> {
        let first = self.shape(parts[0]);
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let ok = match axis {
                Axis::Rows => s.1 == first.1,
                Axis::Cols => s.0 == first.0,
            };
            if !ok {
                return Err(TapeError::Shape {
                    op: "concat",
                    left: first,
                    right: s,
                });
            }
            total += match axis {
                Axis::Rows => s.0,
                Axis::Cols => s.1,
            };
        }
        let value = match axis {
            Axis::Rows => {
                let mut data = Vec::with_capacity(total * first.1);
                for &p in parts {
                    data.extend_from_slice(&self.value(p).data);
                }
                Tensor {
                    rows: total,
                    cols: first.1,
                    data,
                }
            }
            Axis::Cols => {
                let mut value = Tensor::zeros(first.0, total);
                for r in 0..first.0 {
                    let mut offset = 0;
                    for &p in parts {
                        let src = self.value(p).row(r);
                        value.row_mut(r)[offset..offset + src.len()].copy_from_slice(src);
                        offset += src.len();
                    }
                }
                value
            }
        };
        Ok(self.push(value, Op::Concat(parts.to_vec(), axis)))
    }

    pub fn slice(&mut self, a: NodeId, axis: Axis, start: usize, len: usize) -> Result<NodeId, TapeError> {
        let src = self.value(a);
        let bound = match axis {
            Axis::Rows => src.rows,
            Axis::Cols => src.cols,
        };
        if start + len > bound {
            return Err(TapeError::Index {
                op: "slice",
                index: start + len,
                bound,
            });
        }
        let value = match axis {
            Axis::Rows => Tensor {
                rows: len,
                cols: src.cols,
                data: src.data[start * src.cols..(start + len) * src.cols].to_vec(),
            },
            Axis::Cols => {
                let mut v = Tensor::zeros(src.rows, len);
                for r in 0..src.rows {
                    v.row_mut(r).copy_from_slice(&src.row(r)[start..start + len]);
                }
                v
            }
        };
        Ok(self.push(value, Op::Slice(a, axis, start, len)))
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).transpose();
        self.push(value, Op::Transpose(a))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let s = self.value(a).data.iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    /// Backpropagate from a scalar root with seed 1.
    pub fn backward(&mut self, root: NodeId) -> Result<(), TapeError> {
        let shape = self.shape(root);
        if shape != (1, 1) {
            return Err(TapeError::NonScalarRoot(shape));
        }
        self.backward_seeded(&[(root, Tensor::scalar(1.0))])
    }

    /// Backpropagate arbitrary upstream gradients injected at several nodes.
    pub fn backward_seeded(&mut self, seeds: &[(NodeId, Tensor)]) -> Result<(), TapeError> {
        let Some(last) = seeds.iter().map(|(id, _)| id.0).max() else {
            return Ok(());
        };
        // Upstream gradients of this pass, kept apart from the accumulated totals.
        let mut pass: Vec<Option<Tensor>> = vec![None; last + 1];
        for (id, g) in seeds {
            let shape = self.shape(*id);
            if g.shape() != shape {
                return Err(TapeError::Shape {
                    op: "backward_seeded",
                    left: shape,
                    right: g.shape(),
                });
            }
            match &mut pass[id.0] {
                Some(acc) => acc.add_assign(g),
                slot => *slot = Some(g.clone()),
            }
        }
        for idx in (0..=last).rev() {
            let Some(upstream) = pass[idx].take() else {
                continue;
            };
            self.nodes[idx].grad.add_assign(&upstream);
            let contributions = self.local_backward(idx, &upstream);
            for (parent, g) in contributions {
                match &mut pass[parent.0] {
                    Some(acc) => acc.add_assign(&g),
                    slot => *slot = Some(g),
                }
            }
        }
        Ok(())
    }

    fn local_backward(&self, idx: usize, up: &Tensor) -> Vec<(NodeId, Tensor)> {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => vec![],
            Op::MatMul(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let ga = up.matmul(&bv.transpose()).expect("matmul grad shape");
                let gb = av.transpose().matmul(up).expect("matmul grad shape");
                vec![(*a, ga), (*b, gb)]
            }
            Op::Add(a, b, broadcast) => {
                let gb = if *broadcast {
                    let mut g = Tensor::zeros(1, up.cols);
                    for r in 0..up.rows {
                        for (o, v) in g.data.iter_mut().zip(up.row(r)) {
                            *o += v;
                        }
                    }
                    g
                } else {
                    up.clone()
                };
                vec![(*a, up.clone()), (*b, gb)]
            }
            Op::Mul(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let mut ga = up.clone();
                let mut gb = up.clone();
                for i in 0..up.data.len() {
                    ga.data[i] *= bv.data[i];
                    gb.data[i] *= av.data[i];
                }
                vec![(*a, ga), (*b, gb)]
            }
            Op::Scale(a, f) => {
                let mut g = up.clone();
                g.data.iter_mut().for_each(|v| *v *= f);
                vec![(*a, g)]
            }
            Op::Tanh(a) => {
                let mut g = up.clone();
                for (gi, y) in g.data.iter_mut().zip(&node.value.data) {
                    *gi *= 1.0 - y * y;
                }
                vec![(*a, g)]
            }
            Op::RowSoftmax(a) => vec![(*a, softmax_backward(&node.value, up))],
            Op::LogSumExp(a) => {
                // d lse / dx = softmax(x)
                let mut g = self.value(*a).row_softmax();
                for r in 0..g.rows {
                    let u = up.data[r];
                    g.row_mut(r).iter_mut().for_each(|v| *v *= u);
                }
                vec![(*a, g)]
            }
            Op::Gather(table, indices) => {
                let (tr, tc) = self.shape(*table);
                let mut g = Tensor::zeros(tr, tc);
                for (r, &i) in indices.iter().enumerate() {
                    for (o, v) in g.row_mut(i).iter_mut().zip(up.row(r)) {
                        *o += v;
                    }
                }
                vec![(*table, g)]
            }
            Op::Pick(a, indices) => {
                let (ar, ac) = self.shape(*a);
                let mut g = Tensor::zeros(ar, ac);
                for (r, &c) in indices.iter().enumerate() {
                    g.set(r, c, up.data[r]);
                }
                vec![(*a, g)]
            }
            Op::Concat(parts, axis) => {
                let mut out = Vec::with_capacity(parts.len());
                let mut offset = 0;
                for &p in parts {
                    let (pr, pc) = self.shape(p);
                    let g = match axis {
                        Axis::Rows => {
                            let g = Tensor {
                                rows: pr,
                                cols: pc,
                                data: up.data[offset * pc..(offset + pr) * pc].to_vec(),
                            };
                            offset += pr;
                            g
                        }
                        Axis::Cols => {
                            let mut g = Tensor::zeros(pr, pc);
                            for r in 0..pr {
                                g.row_mut(r).copy_from_slice(&up.row(r)[offset..offset + pc]);
                            }
                            offset += pc;
                            g
                        }
                    };
                    out.push((p, g));
                }
                out
            }
            Op::Slice(a, axis, start, len) => {
                let (ar, ac) = self.shape(*a);
                let mut g = Tensor::zeros(ar, ac);
                match axis {
                    Axis::Rows => {
                        g.data[start * ac..(start + len) * ac].copy_from_slice(&up.data);
                    }
                    Axis::Cols => {
                        for r in 0..ar {
                            g.row_mut(r)[*start..start + len].copy_from_slice(up.row(r));
                        }
                    }
                }
                vec![(*a, g)]
            }
            Op::Transpose(a) => vec![(*a, up.transpose())],
            Op::Sum(a) => {
                let (ar, ac) = self.shape(*a);
                vec![(*a, Tensor::filled(ar, ac, up.data[0]))]
            }
        }
    }
}

/// Vector-Jacobian product of a row softmax: `y * (g - <g, y>)` per row.
pub fn softmax_backward(probs: &Tensor, upstream: &Tensor) -> Tensor {
    let mut g = upstream.clone();
    for r in 0..probs.rows {
        let y = probs.row(r);
        let dot: f64 = y.iter().zip(upstream.row(r)).map(|(a, b)| a * b).sum();
        for (gi, yi) in g.row_mut(r).iter_mut().zip(y) {
            *gi = yi * (*gi - dot);
        }
    }
    g
}

/// Central-difference gradient check.
///
/// Returns `max_i |analytic_i - numeric_i| / max(1, |numeric_i|)` over the
/// requested coordinates (all coordinates when `coords` is `None`).
pub fn grad_check<F>(
    mut f: F,
    params: &[f64],
    analytic: &[f64],
    h: f64,
    coords: Option<&[usize]>,
) -> Result<f64, TapeError>
where
    F: FnMut(&[f64]) -> f64,
{
    if !(1e-6..=1e-3).contains(&h) {
        return Err(TapeError::BadStep(h));
    }
    if analytic.len() != params.len() {
        return Err(TapeError::Shape {
            op: "grad_check",
            left: (params.len(), 1),
            right: (analytic.len(), 1),
        });
    }
    let all: Vec<usize>;
    let coords = match coords {
        Some(c) => c,
        None => {
            all = (0..params.len()).collect();
            &all
        }
    };
    let mut x = params.to_vec();
    let mut worst = 0.0f64;
    for &i in coords {
        let orig = x[i];
        x[i] = orig + h;
        let fp = f(&x);
        x[i] = orig - h;
        let fm = f(&x);
        x[i] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(TapeError::NonFinite(i));
        }
        let numeric = (fp - fm) / (2.0 * h);
        let err = (analytic[i] - numeric).abs() / numeric.abs().max(1.0);
        worst = worst.max(err);
    }
    Ok(worst)
}
