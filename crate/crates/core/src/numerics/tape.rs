//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! Every operation appends one node holding its output value, the ids of its
//! inputs and whatever it needs to run backward. Nodes are appended in
//! evaluation order, so the node list is always topologically sorted and a
//! single reverse sweep visits each node once.
//!
//! Leaves are either *tracked* (they receive gradients) or constants. A node is
//! tracked when any of its inputs is, and backward work is skipped for
//! untracked branches entirely. Constants may be borrowed for the lifetime of
//! the tape, which lets frozen weights enter many tapes without copies.

use std::borrow::Cow;

use super::kernels;
use super::{NumericsError, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Constant,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    /// Local derivatives, kept only when the input is tracked.
    Gelu(Var, Vec<f64>),
    ConcatRows(Vec<Var>),
    SelectRows(Var, Vec<usize>),
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    Sum(Var),
    CrossEntropy {
        logits: Var,
        label: usize,
        probs: Vec<f64>,
    },
    CosineDistancePairs {
        a: Var,
        b: Var,
        pairs: Vec<(usize, usize)>,
    },
}

impl Op {
    fn kind(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Constant => "constant",
            Op::MatMul(..) => "matmul",
            Op::MatMulNt(..) => "matmul_nt",
            Op::Add(..) => "add",
            Op::AddRow(..) => "add_row",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::SoftmaxRows(..) => "softmax_rows",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Gelu(..) => "gelu",
            Op::ConcatRows(..) => "concat_rows",
            Op::SelectRows(..) => "select_rows",
            Op::SliceCols { .. } => "slice_cols",
            Op::ConcatCols(..) => "concat_cols",
            Op::Sum(..) => "sum",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::CosineDistancePairs { .. } => "cosine_distance_pairs",
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf | Op::Constant => vec![],
            Op::MatMul(a, b)
            | Op::MatMulNt(a, b)
            | Op::Add(a, b)
            | Op::AddRow(a, b)
            | Op::Mul(a, b) => vec![*a, *b],
            Op::Scale(x, _) | Op::SoftmaxRows(x) | Op::Gelu(x, _) | Op::Sum(x) => vec![*x],
            Op::LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            Op::ConcatRows(v) | Op::ConcatCols(v) => v.clone(),
            Op::SelectRows(x, _) => vec![*x],
            Op::SliceCols { x, .. } => vec![*x],
            Op::CrossEntropy { logits, .. } => vec![*logits],
            Op::CosineDistancePairs { a, b, .. } => vec![*a, *b],
        }
    }
}

struct Node<'a> {
    value: Cow<'a, Tensor>,
    op: Op,
    tracked: bool,
}

/// Read-only view of one recorded node.
#[derive(Debug, Clone)]
pub struct NodeInfo {
    pub id: usize,
    pub kind: &'static str,
    pub inputs: Vec<usize>,
    pub shape: Vec<usize>,
    pub tracked: bool,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;
const COSINE_EPS: f64 = 1e-12;

#[derive(Default)]
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
    grads: Vec<Option<Vec<f64>>>,
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

    fn push(&mut self, value: Cow<'a, Tensor>, op: Op, tracked: bool) -> Var {
        let id = self.nodes.len();
        self.nodes.push(Node { value, op, tracked });
        Var(id)
    }

    fn push_op(&mut self, value: Tensor, op: Op) -> Var {
        let tracked = op.inputs().iter().any(|v| self.nodes[v.0].tracked);
        self.push(Cow::Owned(value), op, tracked)
    }

    /// Records a tracked leaf; its gradient is populated by [`Tape::backward`].
    pub fn leaf(&mut self, mut value: Tensor) -> Var {
        value.set_tape_id(self.nodes.len());
        self.push(Cow::Owned(value), Op::Leaf, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(Cow::Owned(value), Op::Constant, false)
    }

    /// Records a borrowed constant without copying it.
    pub fn constant_ref(&mut self, value: &'a Tensor) -> Var {
        self.push(Cow::Borrowed(value), Op::Constant, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn is_tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    /// Gradient of the last [`Tape::backward`] call with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn node_info(&self, v: Var) -> NodeInfo {
        let n = &self.nodes[v.0];
        NodeInfo {
            id: v.0,
            kind: n.op.kind(),
            inputs: n.op.inputs().iter().map(|x| x.0).collect(),
            shape: n.value.shape().to_vec(),
            tracked: n.tracked,
        }
    }

    pub fn nodes(&self) -> impl Iterator<Item = NodeInfo> + '_ {
        (0..self.nodes.len()).map(|i| self.node_info(Var(i)))
    }

    /// First node (in evaluation order) holding a NaN or infinite value.
    pub fn first_non_finite(&self) -> Option<NodeInfo> {
        self.nodes
            .iter()
            .position(|n| !n.value.is_finite())
            .map(|i| self.node_info(Var(i)))
    }

    fn matrix_dims(&self, v: Var, op: &'static str) -> Result<(usize, usize), NumericsError> {
        let t = self.value(v);
        if t.rank() != 2 {
            return Err(NumericsError::dimension(
                op,
                format!("expected a matrix, got shape {:?}", t.shape()),
            ));
        }
        Ok((t.shape()[0], t.shape()[1]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (m, k) = self.matrix_dims(a, "matmul")?;
        let (k2, n) = self.matrix_dims(b, "matmul")?;
        if k != k2 {
            return Err(NumericsError::dimension(
                "matmul",
                format!("[{m}×{k}] · [{k2}×{n}]"),
            ));
        }
        let data = kernels::matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        Ok(self.push_op(Tensor::matrix(m, n, data), Op::MatMul(a, b)))
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (m, k) = self.matrix_dims(a, "matmul_nt")?;
        let (n, k2) = self.matrix_dims(b, "matmul_nt")?;
        if k != k2 {
            return Err(NumericsError::dimension(
                "matmul_nt",
                format!("[{m}×{k}] · [{n}×{k2}]ᵀ"),
            ));
        }
        let data = kernels::matmul_nt(self.value(a).data(), self.value(b).data(), m, k, n);
        Ok(self.push_op(Tensor::matrix(m, n, data), Op::MatMulNt(a, b)))
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<(), NumericsError> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(NumericsError::dimension(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.same_shape(a, b, "add")?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| x + y)
            .collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push_op(out, Op::Add(a, b)))
    }

    /// Adds a length-`n` vector to every row of `x`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var, NumericsError> {
        let (tx, tb) = (self.value(x), self.value(bias));
        let n = tx.cols();
        if tb.numel() != n {
            return Err(NumericsError::dimension(
                "add_row",
                format!("rows of width {n}, bias of length {}", tb.numel()),
            ));
        }
        let mut data = tx.data().to_vec();
        for row in data.chunks_exact_mut(n) {
            for (v, b) in row.iter_mut().zip(tb.data()) {
                *v += b;
            }
        }
        let out = Tensor::new(tx.shape().to_vec(), data)?;
        Ok(self.push_op(out, Op::AddRow(x, bias)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.same_shape(a, b, "mul")?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| x * y)
            .collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push_op(out, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let tx = self.value(x);
        let data = tx.data().iter().map(|v| v * factor).collect();
        let out = Tensor::new(tx.shape().to_vec(), data).expect("same shape");
        self.push_op(out, Op::Scale(x, factor))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let data = kernels::softmax_rows(tx.data(), tx.cols());
        let out = Tensor::new(tx.shape().to_vec(), data).expect("same shape");
        self.push_op(out, Op::SoftmaxRows(x))
    }

    /// Normalizes each trailing-axis vector to zero mean and unit variance,
    /// then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var, NumericsError> {
        let (tx, tg, tb) = (self.value(x), self.value(gain), self.value(bias));
        let d = tx.cols();
        if tg.numel() != d || tb.numel() != d {
            return Err(NumericsError::dimension(
                "layer_norm",
                format!(
                    "last extent {d}, gain {} and bias {}",
                    tg.numel(),
                    tb.numel()
                ),
            ));
        }
        let rows = tx.rows();
        let mut xhat = vec![0.0; tx.numel()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; tx.numel()];
        for r in 0..rows {
            let row = tx.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let s = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd[r] = s;
            for j in 0..d {
                let h = (row[j] - mean) * s;
                xhat[r * d + j] = h;
                out[r * d + j] = h * tg.data()[j] + tb.data()[j];
            }
        }
        let out = Tensor::new(tx.shape().to_vec(), out)?;
        Ok(self.push_op(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
        ))
    }

    /// Exact-erf GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let (data, deriv) = if self.nodes[x.0].tracked {
            tx.data()
                .iter()
                .map(|&v| kernels::gelu_with_derivative(v))
                .unzip()
        } else {
            (
                tx.data().iter().map(|&v| kernels::gelu(v)).collect(),
                Vec::new(),
            )
        };
        let out = Tensor::new(tx.shape().to_vec(), data).expect("same shape");
        self.push_op(out, Op::Gelu(x, deriv))
    }

    /// Stacks matrices with equal column counts on top of each other.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, NumericsError> {
        let cols = match parts.first() {
            Some(&p) => self.matrix_dims(p, "concat_rows")?.1,
            None => return Err(NumericsError::contract("concat_rows of nothing")),
        };
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (r, c) = self.matrix_dims(p, "concat_rows")?;
            if c != cols {
                return Err(NumericsError::dimension(
                    "concat_rows",
                    format!("column counts {cols} and {c}"),
                ));
            }
            rows += r;
            data.extend_from_slice(self.value(p).data());
        }
        Ok(self.push_op(
            Tensor::matrix(rows, cols, data),
            Op::ConcatRows(parts.to_vec()),
        ))
    }

    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var, NumericsError> {
        let (r, c) = self.matrix_dims(x, "select_rows")?;
        if rows.is_empty() {
            return Err(NumericsError::contract("select_rows with no rows"));
        }
        if let Some(&bad) = rows.iter().find(|&&i| i >= r) {
            return Err(NumericsError::dimension(
                "select_rows",
                format!("row {bad} of a {r}-row matrix"),
            ));
        }
        let tx = self.value(x);
        let mut data = Vec::with_capacity(rows.len() * c);
        for &i in rows {
            data.extend_from_slice(tx.row(i));
        }
        Ok(self.push_op(
            Tensor::matrix(rows.len(), c, data),
            Op::SelectRows(x, rows.to_vec()),
        ))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, width: usize) -> Result<Var, NumericsError> {
        let (r, c) = self.matrix_dims(x, "slice_cols")?;
        if width == 0 || start + width > c {
            return Err(NumericsError::dimension(
                "slice_cols",
                format!("columns {start}..{} of {c}", start + width),
            ));
        }
        let tx = self.value(x);
        let mut data = Vec::with_capacity(r * width);
        for i in 0..r {
            data.extend_from_slice(&tx.row(i)[start..start + width]);
        }
        Ok(self.push_op(Tensor::matrix(r, width, data), Op::SliceCols { x, start }))
    }

    /// Places matrices with equal row counts side by side.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, NumericsError> {
        let rows = match parts.first() {
            Some(&p) => self.matrix_dims(p, "concat_cols")?.0,
            None => return Err(NumericsError::contract("concat_cols of nothing")),
        };
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.matrix_dims(p, "concat_cols")?;
            if r != rows {
                return Err(NumericsError::dimension(
                    "concat_cols",
                    format!("row counts {rows} and {r}"),
                ));
            }
            widths.push(c);
        }
        let cols: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        Ok(self.push_op(
            Tensor::matrix(rows, cols, data),
            Op::ConcatCols(parts.to_vec()),
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push_op(Tensor::scalar(s), Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel();
        let s = self.sum(x);
        self.scale(s, 1.0 / n as f64)
    }

    /// Softmax cross-entropy of a single logit vector against `label`.
    pub fn cross_entropy(&mut self, logits: Var, label: usize) -> Result<Var, NumericsError> {
        let z = self.value(logits).data();
        if label >= z.len() {
            return Err(NumericsError::contract(format!(
                "label {label} out of range for {} classes",
                z.len()
            )));
        }
        let probs = kernels::softmax_rows(z, z.len());
        let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        let loss = lse - z[label];
        Ok(self.push_op(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                label,
                probs,
            },
        ))
    }

    /// Cosine distances `1 − cos(a_i, b_k)` for each `(i, k)` in `pairs`.
    ///
    /// A pair where either row has norm below `1e-12` yields exactly 1 and
    /// passes no gradient.
    pub fn cosine_distance_pairs(
        &mut self,
        a: Var,
        b: Var,
        pairs: &[(usize, usize)],
    ) -> Result<Var, NumericsError> {
        let (ra, ca) = self.matrix_dims(a, "cosine_distance_pairs")?;
        let (rb, cb) = self.matrix_dims(b, "cosine_distance_pairs")?;
        if ca != cb {
            return Err(NumericsError::dimension(
                "cosine_distance_pairs",
                format!("row widths {ca} and {cb}"),
            ));
        }
        if pairs.is_empty() {
            return Err(NumericsError::contract(
                "cosine_distance_pairs with no pairs",
            ));
        }
        if let Some(&(i, k)) = pairs.iter().find(|&&(i, k)| i >= ra || k >= rb) {
            return Err(NumericsError::dimension(
                "cosine_distance_pairs",
                format!("pair ({i}, {k}) outside [{ra}] × [{rb}]"),
            ));
        }
        let (ta, tb) = (self.value(a), self.value(b));
        let data = pairs
            .iter()
            .map(|&(i, k)| cosine_distance(ta.row(i), tb.row(k)))
            .collect();
        Ok(self.push_op(
            Tensor::vector(data),
            Op::CosineDistancePairs {
                a,
                b,
                pairs: pairs.to_vec(),
            },
        ))
    }

    /// Reverse sweep from a scalar `loss`. Gradients accumulate additively
    /// where a value feeds several consumers; every tracked leaf ends up with
    /// a gradient (zeros when it did not influence the loss).
    pub fn backward(&mut self, loss: Var) -> Result<(), NumericsError> {
        if self.value(loss).numel() != 1 {
            return Err(NumericsError::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].tracked {
            grads[loss.0] = Some(vec![1.0]);
        }
        for id in (0..=loss.0).rev() {
            if !self.nodes[id].tracked {
                continue;
            }
            if matches!(self.nodes[id].op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else {
                continue;
            };
            self.propagate(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        for (id, node) in self.nodes.iter_mut().enumerate() {
            if matches!(node.op, Op::Leaf) {
                let g = grads[id]
                    .get_or_insert_with(|| vec![0.0; node.value.numel()])
                    .clone();
                node.value.to_mut().set_grad(g);
            }
        }
        self.grads = grads;
        Ok(())
    }

    fn propagate(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        let tracked = |v: Var| self.nodes[v.0].tracked;
        let val = |v: Var| -> &Tensor { &self.nodes[v.0].value };
        match &node.op {
            Op::Leaf | Op::Constant => {}
            Op::MatMul(a, b) => {
                let (m, k) = (val(*a).shape()[0], val(*a).shape()[1]);
                let n = val(*b).shape()[1];
                if tracked(*a) {
                    accumulate(grads, *a, kernels::matmul_nt(g, val(*b).data(), m, n, k));
                }
                if tracked(*b) {
                    accumulate(grads, *b, kernels::matmul_tn(val(*a).data(), g, m, k, n));
                }
            }
            Op::MatMulNt(a, b) => {
                let (m, k) = (val(*a).shape()[0], val(*a).shape()[1]);
                let n = val(*b).shape()[0];
                if tracked(*a) {
                    accumulate(grads, *a, kernels::matmul(g, val(*b).data(), m, n, k));
                }
                if tracked(*b) {
                    accumulate(grads, *b, kernels::matmul_tn(g, val(*a).data(), m, n, k));
                }
            }
            Op::Add(a, b) => {
                if tracked(*a) {
                    accumulate(grads, *a, g.to_vec());
                }
                if tracked(*b) {
                    accumulate(grads, *b, g.to_vec());
                }
            }
            Op::AddRow(x, bias) => {
                if tracked(*x) {
                    accumulate(grads, *x, g.to_vec());
                }
                if tracked(*bias) {
                    let n = val(*bias).numel();
                    let mut gb = vec![0.0; n];
                    for row in g.chunks_exact(n) {
                        for (acc, v) in gb.iter_mut().zip(row) {
                            *acc += v;
                        }
                    }
                    accumulate(grads, *bias, gb);
                }
            }
            Op::Mul(a, b) => {
                if tracked(*a) {
                    let d = g.iter().zip(val(*b).data()).map(|(x, y)| x * y).collect();
                    accumulate(grads, *a, d);
                }
                if tracked(*b) {
                    let d = g.iter().zip(val(*a).data()).map(|(x, y)| x * y).collect();
                    accumulate(grads, *b, d);
                }
            }
            Op::Scale(x, f) => {
                if tracked(*x) {
                    accumulate(grads, *x, g.iter().map(|v| v * f).collect());
                }
            }
            Op::SoftmaxRows(x) => {
                if tracked(*x) {
                    let y = node.value.data();
                    let cols = node.value.cols();
                    let mut d = vec![0.0; y.len()];
                    for ((yr, gr), dr) in y
                        .chunks_exact(cols)
                        .zip(g.chunks_exact(cols))
                        .zip(d.chunks_exact_mut(cols))
                    {
                        let s: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for ((o, &yv), &gv) in dr.iter_mut().zip(yr).zip(gr) {
                            *o = yv * (gv - s);
                        }
                    }
                    accumulate(grads, *x, d);
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let d = val(*gain).numel();
                let gv = val(*gain).data();
                if tracked(*x) {
                    let mut dx = vec![0.0; g.len()];
                    for (r, s) in rstd.iter().enumerate() {
                        let gr = &g[r * d..(r + 1) * d];
                        let hr = &xhat[r * d..(r + 1) * d];
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for j in 0..d {
                            let dh = gr[j] * gv[j];
                            m1 += dh;
                            m2 += dh * hr[j];
                        }
                        m1 /= d as f64;
                        m2 /= d as f64;
                        for j in 0..d {
                            let dh = gr[j] * gv[j];
                            dx[r * d + j] = s * (dh - m1 - hr[j] * m2);
                        }
                    }
                    accumulate(grads, *x, dx);
                }
                if tracked(*gain) {
                    let mut dg = vec![0.0; d];
                    for (gr, hr) in g.chunks_exact(d).zip(xhat.chunks_exact(d)) {
                        for j in 0..d {
                            dg[j] += gr[j] * hr[j];
                        }
                    }
                    accumulate(grads, *gain, dg);
                }
                if tracked(*bias) {
                    let mut db = vec![0.0; d];
                    for gr in g.chunks_exact(d) {
                        for j in 0..d {
                            db[j] += gr[j];
                        }
                    }
                    accumulate(grads, *bias, db);
                }
            }
            Op::Gelu(x, deriv) => {
                if tracked(*x) {
                    let d = g.iter().zip(deriv).map(|(gv, dv)| gv * dv).collect();
                    accumulate(grads, *x, d);
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = val(p).numel();
                    if tracked(p) {
                        accumulate(grads, p, g[offset..offset + n].to_vec());
                    }
                    offset += n;
                }
            }
            Op::SelectRows(x, rows) => {
                if tracked(*x) {
                    let c = val(*x).cols();
                    let mut d = vec![0.0; val(*x).numel()];
                    for (k, &i) in rows.iter().enumerate() {
                        for j in 0..c {
                            d[i * c + j] += g[k * c + j];
                        }
                    }
                    accumulate(grads, *x, d);
                }
            }
            Op::SliceCols { x, start } => {
                if tracked(*x) {
                    let c = val(*x).cols();
                    let w = node.value.cols();
                    let mut d = vec![0.0; val(*x).numel()];
                    for (i, gr) in g.chunks_exact(w).enumerate() {
                        d[i * c + start..i * c + start + w].copy_from_slice(gr);
                    }
                    accumulate(grads, *x, d);
                }
            }
            Op::ConcatCols(parts) => {
                let total = node.value.cols();
                let mut offset = 0;
                for &p in parts {
                    let w = val(p).cols();
                    if tracked(p) {
                        let mut d = Vec::with_capacity(val(p).numel());
                        for gr in g.chunks_exact(total) {
                            d.extend_from_slice(&gr[offset..offset + w]);
                        }
                        accumulate(grads, p, d);
                    }
                    offset += w;
                }
            }
            Op::Sum(x) => {
                if tracked(*x) {
                    accumulate(grads, *x, vec![g[0]; val(*x).numel()]);
                }
            }
            Op::CrossEntropy {
                logits,
                label,
                probs,
            } => {
                if tracked(*logits) {
                    let mut d: Vec<f64> = probs.iter().map(|p| p * g[0]).collect();
                    d[*label] -= g[0];
                    accumulate(grads, *logits, d);
                }
            }
            Op::CosineDistancePairs { a, b, pairs } => {
                let (ta, tb) = (val(*a), val(*b));
                let mut da = tracked(*a).then(|| vec![0.0; ta.numel()]);
                let mut db = tracked(*b).then(|| vec![0.0; tb.numel()]);
                let c = ta.cols();
                for (&(i, k), &gv) in pairs.iter().zip(g) {
                    let (u, v) = (ta.row(i), tb.row(k));
                    let (nu, nv) = (kernels::norm2(u), kernels::norm2(v));
                    if nu < COSINE_EPS || nv < COSINE_EPS {
                        continue;
                    }
                    let cos = kernels::dot(u, v) / (nu * nv);
                    // d(1 - cos)/du = -(v/(|u||v|) - cos·u/|u|²)
                    if let Some(da) = da.as_mut() {
                        for j in 0..c {
                            da[i * c + j] -= gv * (v[j] / (nu * nv) - cos * u[j] / (nu * nu));
                        }
                    }
                    if let Some(db) = db.as_mut() {
                        for j in 0..c {
                            db[k * c + j] -= gv * (u[j] / (nu * nv) - cos * v[j] / (nv * nv));
                        }
                    }
                }
                if let Some(da) = da {
                    accumulate(grads, *a, da);
                }
                if let Some(db) = db {
                    accumulate(grads, *b, db);
                }
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, contrib: Vec<f64>) {
    match &mut grads[v.0] {
        Some(g) => {
            for (a, b) in g.iter_mut().zip(&contrib) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(contrib),
    }
}

/// `1 − u·v / (‖u‖‖v‖)`, or exactly 1 when either norm is below `1e-12`.
pub fn cosine_distance(u: &[f64], v: &[f64]) -> f64 {
    let (nu, nv) = (kernels::norm2(u), kernels::norm2(v));
    if nu < COSINE_EPS || nv < COSINE_EPS {
        return 1.0;
    }
    (1.0 - kernels::dot(u, v) / (nu * nv)).clamp(0.0, 2.0)
}
