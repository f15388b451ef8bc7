//! Reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] is an append-only list of nodes. Every operation pushes one
//! node whose parents already exist, so insertion order is a topological
//! order and [`Graph::backward`] walks the list in reverse exactly once.
//!
//! Leaves created with [`Graph::param`] accumulate gradients across calls to
//! `backward` until [`Graph::zero_grad`] is called. Intermediate gradients
//! are scratch state and are dropped after each pass.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{shape_err, Error, Result};
use crate::tensor::{matmul_into, Tensor, EPS};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Operation kind, used for diagnostics and fault injection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    MatMul,
    Add,
    AddRow,
    Scale,
    Relu,
    RowSoftmax,
    L2NormalizeRows,
    MeanPoolRows,
    ConcatCols,
    ConcatRows,
    Transpose,
    Exp,
    Log,
    Sum,
    WeightedSum,
    MulConst,
    LogSumExpRows,
    GatherRows,
    SliceRows,
    CrossEntropy,
}

impl OpKind {
    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::MatMul => "matmul",
            OpKind::Add => "add",
            OpKind::AddRow => "add_row",
            OpKind::Scale => "scale",
            OpKind::Relu => "relu",
            OpKind::RowSoftmax => "row_softmax",
            OpKind::L2NormalizeRows => "l2_normalize_rows",
            OpKind::MeanPoolRows => "mean_pool_rows",
            OpKind::ConcatCols => "concat_cols",
            OpKind::ConcatRows => "concat_rows",
            OpKind::Transpose => "transpose",
            OpKind::Exp => "exp",
            OpKind::Log => "log",
            OpKind::Sum => "sum",
            OpKind::WeightedSum => "weighted_sum",
            OpKind::MulConst => "mul_const",
            OpKind::LogSumExpRows => "logsumexp_rows",
            OpKind::GatherRows => "gather_rows",
            OpKind::SliceRows => "slice_rows",
            OpKind::CrossEntropy => "cross_entropy",
        }
    }

    pub fn from_name(name: &str) -> Option<OpKind> {
        Self::ALL.iter().copied().find(|k| k.name() == name)
    }

    pub const ALL: [OpKind; 21] = ALL_OPS;
}

const ALL_OPS: [OpKind; 21] = [
    OpKind::Leaf,
    OpKind::MatMul,
    OpKind::Add,
    OpKind::AddRow,
    OpKind::Scale,
    OpKind::Relu,
    OpKind::RowSoftmax,
    OpKind::L2NormalizeRows,
    OpKind::MeanPoolRows,
    OpKind::ConcatCols,
    OpKind::ConcatRows,
    OpKind::Transpose,
    OpKind::Exp,
    OpKind::Log,
    OpKind::Sum,
    OpKind::WeightedSum,
    OpKind::MulConst,
    OpKind::LogSumExpRows,
    OpKind::GatherRows,
    OpKind::SliceRows,
    OpKind::CrossEntropy,
];

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    RowSoftmax {
        input: Var,
        scale: f64,
    },
    L2NormalizeRows {
        input: Var,
        norms: Vec<f64>,
    },
    MeanPoolRows(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Transpose(Var),
    Exp(Var),
    Log(Var),
    Sum(Var),
    WeightedSum(Var, Tensor),
    MulConst(Var, Tensor),
    LogSumExpRows {
        input: Var,
        log_weights: Tensor,
    },
    GatherRows {
        table: Var,
        ids: Vec<usize>,
    },
    SliceRows {
        input: Var,
        start: usize,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Tensor,
        count: usize,
    },
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::MatMul(..) => OpKind::MatMul,
            Op::Add(..) => OpKind::Add,
            Op::AddRow(..) => OpKind::AddRow,
            Op::Scale(..) => OpKind::Scale,
            Op::Relu(..) => OpKind::Relu,
            Op::RowSoftmax { .. } => OpKind::RowSoftmax,
            Op::L2NormalizeRows { .. } => OpKind::L2NormalizeRows,
            Op::MeanPoolRows(..) => OpKind::MeanPoolRows,
            Op::ConcatCols(..) => OpKind::ConcatCols,
            Op::ConcatRows(..) => OpKind::ConcatRows,
            Op::Transpose(..) => OpKind::Transpose,
            Op::Exp(..) => OpKind::Exp,
            Op::Log(..) => OpKind::Log,
            Op::Sum(..) => OpKind::Sum,
            Op::WeightedSum(..) => OpKind::WeightedSum,
            Op::MulConst(..) => OpKind::MulConst,
            Op::LogSumExpRows { .. } => OpKind::LogSumExpRows,
            Op::GatherRows { .. } => OpKind::GatherRows,
            Op::SliceRows { .. } => OpKind::SliceRows,
            Op::CrossEntropy { .. } => OpKind::CrossEntropy,
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    /// True if any leaf with `requires_grad` is reachable through parents.
    tracked: bool,
    grad: Option<Tensor>,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    fault: Option<OpKind>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Deliberately corrupts the backward rule of one op kind. Only used to
    /// prove that the gradient checker detects a wrong derivative.
    #[doc(hidden)]
    pub fn inject_fault(&mut self, kind: OpKind) {
        self.fault = Some(kind);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, false)
    }

    fn push_leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            tracked: requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    #[inline]
    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    /// Accumulated gradient of a `param` leaf, if `backward` reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn push(&mut self, value: Tensor, op: Op, parents_tracked: bool) -> Result<Var> {
        let kind = op.kind();
        value.check_finite(kind.name())?;
        self.nodes.push(Node {
            value,
            op,
            requires_grad: false,
            tracked: parents_tracked,
            grad: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let out = va.matmul(vb)?;
        let t = self.tracked(a) || self.tracked(b);
        self.push(out, Op::MatMul(a, b), t)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        let t = self.tracked(a) || self.tracked(b);
        self.push(out, Op::Add(a, b), t)
    }

    /// Adds a `1 x c` row to every row of `a` (bias broadcast).
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (va, vr) = (self.value(a), self.value(row));
        if vr.rows() != 1 || vr.cols() != va.cols() {
            return shape_err("add_row", format!("{:?} + row {:?}", va.shape(), vr.shape()));
        }
        let mut out = va.clone();
        for r in 0..out.rows() {
            for (o, b) in out.row_mut(r).iter_mut().zip(vr.data()) {
                *o += b;
            }
        }
        let t = self.tracked(a) || self.tracked(row);
        self.push(out, Op::AddRow(a, row), t)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Result<Var> {
        let out = self.value(a).scale(k);
        let t = self.tracked(a);
        self.push(out, Op::Scale(a, k), t)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|v| if v > 0.0 { v } else { 0.0 });
        let t = self.tracked(a);
        self.push(out, Op::Relu(a), t)
    }

    /// `softmax(scale * a)` along each row, max-subtracted.
    pub fn row_softmax(&mut self, a: Var, scale: f64) -> Result<Var> {
        self.softmax_impl(a, scale, false)
    }

    /// Row softmax where row `i` only sees columns `0..=i`.
    pub fn causal_row_softmax(&mut self, a: Var, scale: f64) -> Result<Var> {
        self.softmax_impl(a, scale, true)
    }

    fn softmax_impl(&mut self, a: Var, scale: f64, causal: bool) -> Result<Var> {
        let va = self.value(a);
        let (rows, cols) = va.shape();
        if cols == 0 {
            return shape_err("row_softmax", format!("empty rows in {rows}x0 input"));
        }
        if causal && rows > cols {
            return shape_err(
                "row_softmax",
                format!("causal mask needs rows <= cols, got {rows}x{cols}"),
            );
        }
        let mut out = Tensor::zeros(rows, cols);
        for r in 0..rows {
            let width = if causal { r + 1 } else { cols };
            let src = &va.row(r)[..width];
            let max = src.iter().fold(f64::NEG_INFINITY, |m, &v| f64::max(m, scale * v));
            let dst = &mut out.row_mut(r)[..width];
            let mut total = 0.0;
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = libm::exp(scale * s - max);
                total += *d;
            }
            for d in dst.iter_mut() {
                *d /= total;
            }
        }
        let t = self.tracked(a);
        self.push(out, Op::RowSoftmax { input: a, scale }, t)
    }

    pub fn l2_normalize_rows(&mut self, a: Var) -> Result<Var> {
        let va = self.value(a);
        let mut out = va.clone();
        let mut norms = Vec::with_capacity(va.rows());
        for r in 0..va.rows() {
            let n = libm::sqrt(va.row(r).iter().map(|v| v * v).sum());
            if n < EPS {
                return Err(Error::Degenerate {
                    op: "l2_normalize_rows",
                    detail: format!("row {r} has norm {n:e}"),
                });
            }
            for v in out.row_mut(r) {
                *v /= n;
            }
            norms.push(n);
        }
        let t = self.tracked(a);
        self.push(out, Op::L2NormalizeRows { input: a, norms }, t)
    }

    pub fn mean_pool_rows(&mut self, a: Var) -> Result<Var> {
        let va = self.value(a);
        let (rows, cols) = va.shape();
        if rows == 0 {
            return shape_err("mean_pool_rows", format!("0x{cols} input"));
        }
        let mut out = Tensor::zeros(1, cols);
        for r in 0..rows {
            for (o, v) in out.data_mut().iter_mut().zip(va.row(r)) {
                *o += v;
            }
        }
        let inv = 1.0 / rows as f64;
        for o in out.data_mut() {
            *o *= inv;
        }
        let t = self.tracked(a);
        self.push(out, Op::MeanPoolRows(a), t)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return shape_err("concat_cols", "no inputs".into());
        };
        let rows = self.value(first).rows();
        let mut cols = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.0 != rows {
                return shape_err("concat_cols", format!("row counts {rows} and {}", s.0));
            }
            cols += s.1;
        }
        let mut out = Tensor::zeros(rows, cols);
        for r in 0..rows {
            let mut offset = 0;
            for &p in parts {
                let src = self.value(p).row(r);
                out.row_mut(r)[offset..offset + src.len()].copy_from_slice(src);
                offset += src.len();
            }
        }
        let t = parts.iter().any(|&p| self.tracked(p));
        self.push(out, Op::ConcatCols(parts.to_vec()), t)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return shape_err("concat_rows", "no inputs".into());
        };
        let cols = self.value(first).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let v = self.value(p);
            if v.cols() != cols {
                return shape_err("concat_rows", format!("column counts {cols} and {}", v.cols()));
            }
            data.extend_from_slice(v.data());
            rows += v.rows();
        }
        let out = Tensor::new(rows, cols, data)?;
        let t = parts.iter().any(|&p| self.tracked(p));
        self.push(out, Op::ConcatRows(parts.to_vec()), t)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).transpose();
        let t = self.tracked(a);
        self.push(out, Op::Transpose(a), t)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(libm::exp);
        let t = self.tracked(a);
        self.push(out, Op::Exp(a), t)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let va = self.value(a);
        if va.data().iter().any(|&v| v <= 0.0) {
            return Err(Error::Degenerate {
                op: "log",
                detail: "non-positive argument".into(),
            });
        }
        let out = va.map(libm::log);
        let t = self.tracked(a);
        self.push(out, Op::Log(a), t)
    }

    /// Sum of all entries as a `1 x 1` tensor.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        let t = self.tracked(a);
        self.push(Tensor::scalar(s), Op::Sum(a), t)
    }

    /// `sum_ij a_ij * w_ij` for a constant weight matrix.
    pub fn weighted_sum(&mut self, a: Var, weights: Tensor) -> Result<Var> {
        let va = self.value(a);
        if va.shape() != weights.shape() {
            return shape_err(
                "weighted_sum",
                format!("{:?} vs weights {:?}", va.shape(), weights.shape()),
            );
        }
        let s = va.data().iter().zip(weights.data()).map(|(a, w)| a * w).sum();
        let t = self.tracked(a);
        self.push(Tensor::scalar(s), Op::WeightedSum(a, weights), t)
    }

    /// Elementwise product with a constant matrix.
    pub fn mul_const(&mut self, a: Var, k: Tensor) -> Result<Var> {
        let va = self.value(a);
        if va.shape() != k.shape() {
            return shape_err("mul_const", format!("{:?} vs {:?}", va.shape(), k.shape()));
        }
        let data = va.data().iter().zip(k.data()).map(|(a, b)| a * b).collect();
        let out = Tensor::new(va.rows(), va.cols(), data)?;
        let t = self.tracked(a);
        self.push(out, Op::MulConst(a, k), t)
    }

    /// Row-wise stabilized `log(z + sum_j exp(a_ij + lw_ij))` as an `r x 1`
    /// column, where `z` is 1 when `include_one` is set and 0 otherwise.
    ///
    /// Entries with `lw_ij = -inf` are excluded. A row with no included
    /// entries and `include_one == false` yields 0; callers must give such
    /// rows zero weight downstream.
    pub fn logsumexp_rows(&mut self, a: Var, log_weights: Tensor, include_one: bool) -> Result<Var> {
        let va = self.value(a);
        if va.shape() != log_weights.shape() {
            return shape_err(
                "logsumexp_rows",
                format!("{:?} vs log-weights {:?}", va.shape(), log_weights.shape()),
            );
        }
        let rows = va.rows();
        let mut out = Tensor::zeros(rows, 1);
        for r in 0..rows {
            let terms = va
                .row(r)
                .iter()
                .zip(log_weights.row(r))
                .filter(|(_, lw)| **lw != f64::NEG_INFINITY)
                .map(|(x, lw)| x + lw);
            let mut max = if include_one { 0.0 } else { f64::NEG_INFINITY };
            for v in terms.clone() {
                max = f64::max(max, v);
            }
            if max == f64::NEG_INFINITY {
                continue;
            }
            let mut total: f64 = terms.map(|v| libm::exp(v - max)).sum();
            if include_one {
                total += libm::exp(-max);
            }
            out.set(r, 0, max + libm::log(total));
        }
        let t = self.tracked(a);
        self.push(out, Op::LogSumExpRows { input: a, log_weights }, t)
    }

    /// Selects rows of `table` by index (embedding lookup).
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let vt = self.value(table);
        let cols = vt.cols();
        let mut data = Vec::with_capacity(ids.len() * cols);
        for &id in ids {
            if id >= vt.rows() {
                return shape_err("gather_rows", format!("row {id} of {}", vt.rows()));
            }
            data.extend_from_slice(vt.row(id));
        }
        let out = Tensor::new(ids.len(), cols, data)?;
        let t = self.tracked(table);
        self.push(
            out,
            Op::GatherRows {
                table,
                ids: ids.to_vec(),
            },
            t,
        )
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let va = self.value(a);
        if start + len > va.rows() {
            return shape_err("slice_rows", format!("rows {start}..{} of {}", start + len, va.rows()));
        }
        let cols = va.cols();
        let out = Tensor::new(len, cols, va.data()[start * cols..(start + len) * cols].to_vec())?;
        let t = self.tracked(a);
        self.push(out, Op::SliceRows { input: a, start }, t)
    }

    /// Mean over rows with `Some(target)` of `-log softmax(logits_row)[target]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let vl = self.value(logits);
        if vl.rows() != targets.len() {
            return shape_err(
                "cross_entropy",
                format!("{} logit rows for {} targets", vl.rows(), targets.len()),
            );
        }
        let count = targets.iter().filter(|t| t.is_some()).count();
        if count == 0 {
            return Err(Error::Contract("cross-entropy over an all-padding sequence".into()));
        }
        let mut probs = Tensor::zeros(vl.rows(), vl.cols());
        let mut total = 0.0;
        for (r, target) in targets.iter().enumerate() {
            let row = vl.row(r);
            let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| f64::max(m, v));
            let z: f64 = row.iter().map(|v| libm::exp(v - max)).sum();
            let lse = max + libm::log(z);
            for (p, v) in probs.row_mut(r).iter_mut().zip(row) {
                *p = libm::exp(v - lse);
            }
            if let Some(tok) = *target {
                if tok >= vl.cols() {
                    return shape_err("cross_entropy", format!("target {tok} >= vocab {}", vl.cols()));
                }
                total += lse - row[tok];
            }
        }
        let out = Tensor::scalar(total / count as f64);
        let t = self.tracked(logits);
        self.push(
            out,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
                count,
            },
            t,
        )
    }

    /// Reverse accumulation from a `1 x 1` loss into every reachable
    /// `param` leaf. Leaf gradients add onto any previous pass.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).shape() != (1, 1) {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.tracked {
                continue;
            }
            if let Op::Leaf = node.op {
                if node.requires_grad {
                    match &mut self.nodes[idx].grad {
                        Some(acc) => acc.add_assign(&g),
                        slot @ None => *slot = Some(g),
                    }
                }
                continue;
            }
            let mut contributions = self.local_backward(idx, &g);
            if self.fault == Some(node.op.kind()) {
                for (_, c) in &mut contributions {
                    for v in c.data_mut() {
                        *v *= 1.5;
                    }
                }
            }
            for (parent, c) in contributions {
                if !self.nodes[parent.0].tracked {
                    continue;
                }
                match &mut grads[parent.0] {
                    Some(acc) => acc.add_assign(&c),
                    slot @ None => *slot = Some(c),
                }
            }
        }
        Ok(())
    }

    fn local_backward(&self, idx: usize, g: &Tensor) -> Vec<(Var, Tensor)> {
        let node = &self.nodes[idx];
        let y = &node.value;
        match &node.op {
            Op::Leaf => Vec::new(),
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (va.rows(), va.cols(), vb.cols());
                let mut out = Vec::with_capacity(2);
                if self.tracked(*a) {
                    // dA = G B^T
                    let mut da = Tensor::zeros(m, k);
                    for i in 0..m {
                        let g_row = g.row(i);
                        let da_row = da.row_mut(i);
                        for (p, d) in da_row.iter_mut().enumerate() {
                            *d = g_row.iter().zip(vb.row(p)).map(|(x, y)| x * y).sum();
                        }
                    }
                    out.push((*a, da));
                }
                if self.tracked(*b) {
                    // dB = A^T G
                    let mut db = Tensor::zeros(k, n);
                    let at = va.transpose();
                    matmul_into(at.data(), g.data(), db.data_mut(), k, m, n);
                    out.push((*b, db));
                }
                out
            }
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::AddRow(a, row) => {
                let mut dr = Tensor::zeros(1, g.cols());
                for r in 0..g.rows() {
                    for (d, v) in dr.data_mut().iter_mut().zip(g.row(r)) {
                        *d += v;
                    }
                }
                vec![(*a, g.clone()), (*row, dr)]
            }
            Op::Scale(a, k) => vec![(*a, g.scale(*k))],
            Op::Relu(a) => {
                let mut d = g.clone();
                for (dv, yv) in d.data_mut().iter_mut().zip(y.data()) {
                    if *yv <= 0.0 {
                        *dv = 0.0;
                    }
                }
                vec![(*a, d)]
            }
            Op::RowSoftmax { input, scale } => {
                let mut d = Tensor::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((dv, yv), gv) in d.row_mut(r).iter_mut().zip(yr).zip(gr) {
                        *dv = scale * yv * (gv - dot);
                    }
                }
                vec![(*input, d)]
            }
            Op::L2NormalizeRows { input, norms } => {
                let mut d = Tensor::zeros(y.rows(), y.cols());
                for (r, n) in norms.iter().enumerate() {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((dv, yv), gv) in d.row_mut(r).iter_mut().zip(yr).zip(gr) {
                        *dv = (gv - yv * dot) / n;
                    }
                }
                vec![(*input, d)]
            }
            Op::MeanPoolRows(a) => {
                let rows = self.value(*a).rows();
                let inv = 1.0 / rows as f64;
                let mut d = Tensor::zeros(rows, g.cols());
                for r in 0..rows {
                    for (dv, gv) in d.row_mut(r).iter_mut().zip(g.data()) {
                        *dv = gv * inv;
                    }
                }
                vec![(*a, d)]
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                parts
                    .iter()
                    .map(|&p| {
                        let (rows, cols) = self.shape(p);
                        let mut d = Tensor::zeros(rows, cols);
                        for r in 0..rows {
                            d.row_mut(r).copy_from_slice(&g.row(r)[offset..offset + cols]);
                        }
                        offset += cols;
                        (p, d)
                    })
                    .collect()
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                parts
                    .iter()
                    .map(|&p| {
                        let (rows, cols) = self.shape(p);
                        let slice = &g.data()[offset * cols..(offset + rows) * cols];
                        offset += rows;
                        (p, Tensor::new(rows, cols, slice.to_vec()).expect("shape"))
                    })
                    .collect()
            }
            Op::Transpose(a) => vec![(*a, g.transpose())],
            Op::Exp(a) => {
                let data = g.data().iter().zip(y.data()).map(|(g, y)| g * y).collect();
                vec![(*a, Tensor::new(g.rows(), g.cols(), data).expect("shape"))]
            }
            Op::Log(a) => {
                let x = self.value(*a);
                let data = g.data().iter().zip(x.data()).map(|(g, x)| g / x).collect();
                vec![(*a, Tensor::new(g.rows(), g.cols(), data).expect("shape"))]
            }
            Op::Sum(a) => {
                let (rows, cols) = self.shape(*a);
                vec![(*a, Tensor::filled(rows, cols, g.data()[0]))]
            }
            Op::WeightedSum(a, w) => vec![(*a, w.scale(g.data()[0]))],
            Op::MulConst(a, k) => {
                let data = g.data().iter().zip(k.data()).map(|(g, k)| g * k).collect();
                vec![(*a, Tensor::new(g.rows(), g.cols(), data).expect("shape"))]
            }
            Op::LogSumExpRows { input, log_weights } => {
                let x = self.value(*input);
                let mut d = Tensor::zeros(x.rows(), x.cols());
                for r in 0..x.rows() {
                    let (gr, out) = (g.get(r, 0), y.get(r, 0));
                    let drow = d.row_mut(r);
                    for ((dv, xv), lw) in drow.iter_mut().zip(x.row(r)).zip(log_weights.row(r)) {
                        if *lw != f64::NEG_INFINITY {
                            *dv = gr * libm::exp(xv + lw - out);
                        }
                    }
                }
                vec![(*input, d)]
            }
            Op::GatherRows { table, ids } => {
                let (rows, cols) = self.shape(*table);
                let mut d = Tensor::zeros(rows, cols);
                for (i, &id) in ids.iter().enumerate() {
                    for (dv, gv) in d.row_mut(id).iter_mut().zip(g.row(i)) {
                        *dv += gv;
                    }
                }
                vec![(*table, d)]
            }
            Op::SliceRows { input, start } => {
                let (rows, cols) = self.shape(*input);
                let mut d = Tensor::zeros(rows, cols);
                d.data_mut()[start * cols..start * cols + g.len()].copy_from_slice(g.data());
                vec![(*input, d)]
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                count,
            } => {
                let k = g.data()[0] / *count as f64;
                let mut d = Tensor::zeros(probs.rows(), probs.cols());
                for (r, target) in targets.iter().enumerate() {
                    if let Some(tok) = *target {
                        for (dv, p) in d.row_mut(r).iter_mut().zip(probs.row(r)) {
                            *dv = k * p;
                        }
                        d.row_mut(r)[tok] -= k;
                    }
                }
                vec![(*logits, d)]
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn matmul_identity_zero_and_hand_case() {
        let mut g = Graph::new();
        let i2 = g.constant(Tensor::eye(2));
        let a = g.constant(t(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let b = g.constant(t(&[&[5.0, 6.0], &[7.0, 8.0]]));
        let z = g.constant(Tensor::zeros(2, 2));
        let ia = g.matmul(i2, a).unwrap();
        assert_eq!(g.value(ia), g.value(a));
        let za = g.matmul(z, b).unwrap();
        assert_eq!(g.value(za), &Tensor::zeros(2, 2));
        let ab = g.matmul(a, b).unwrap();
        assert_eq!(g.value(ab).data(), &[19.0, 22.0, 43.0, 50.0]);
        let bad = g.constant(Tensor::zeros(3, 3));
        assert!(matches!(g.matmul(a, bad), Err(Error::Shape { .. })));
    }

    #[test]
    fn softmax_edge_cases() {
        let mut g = Graph::new();
        let zeros = g.constant(Tensor::zeros(1, 3));
        let s = g.row_softmax(zeros, 1.0).unwrap();
        for v in g.value(s).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let single = g.constant(Tensor::scalar(-7.5));
        let s1 = g.row_softmax(single, 1.0).unwrap();
        assert_eq!(g.value(s1).data(), &[1.0]);
        let empty = g.constant(Tensor::zeros(2, 0));
        assert!(g.row_softmax(empty, 1.0).is_err());
    }

    #[test]
    fn softmax_survives_large_logits() {
        let mut g = Graph::new();
        let x = g.constant(t(&[&[1000.0, 1001.0, 999.0]]));
        let s = g.row_softmax(x, 1.0).unwrap();
        let sum: f64 = g.value(s).data().iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn l2_normalize_known_rows_and_degenerate() {
        let mut g = Graph::new();
        let x = g.constant(t(&[&[3.0, 4.0], &[0.6, 0.8]]));
        let n = g.l2_normalize_rows(x).unwrap();
        assert!((g.value(n).get(0, 0) - 0.6).abs() < 1e-15);
        assert!((g.value(n).get(0, 1) - 0.8).abs() < 1e-15);
        assert!(g.value(n).max_abs_diff(&t(&[&[0.6, 0.8], &[0.6, 0.8]])) < 1e-15);
        let tiny = g.constant(t(&[&[1e-13, 0.0]]));
        assert!(matches!(g.l2_normalize_rows(tiny), Err(Error::Degenerate { .. })));
    }

    #[test]
    fn mean_pool_cases() {
        let mut g = Graph::new();
        let x = g.constant(t(&[&[1.0, 3.0], &[3.0, 5.0]]));
        let m = g.mean_pool_rows(x).unwrap();
        assert_eq!(g.value(m).data(), &[2.0, 4.0]);
        let one = g.constant(t(&[&[1.5, -2.0]]));
        let m1 = g.mean_pool_rows(one).unwrap();
        assert_eq!(g.value(m1), g.value(one));
        let empty = g.constant(Tensor::zeros(0, 2));
        assert!(g.mean_pool_rows(empty).is_err());
    }

    #[test]
    fn backward_linear_and_quadratic() {
        let mut g = Graph::new();
        let x = g.param(t(&[&[1.0, -2.0, 3.5]]));
        let s = g.sum(x).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[1.0, 1.0, 1.0]);

        let mut g = Graph::new();
        let x = g.param(t(&[&[1.0, -2.0, 3.5]]));
        let xt = g.transpose(x).unwrap();
        let sq = g.matmul(x, xt).unwrap();
        g.backward(sq).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[2.0, -4.0, 7.0]);
    }

    #[test]
    fn backward_accumulates_until_reset() {
        let mut g = Graph::new();
        let x = g.param(t(&[&[2.0]]));
        let y = g.scale(x, 3.0).unwrap();
        g.backward(y).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[6.0]);
        g.zero_grad();
        assert!(g.grad(x).is_none());
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[3.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let x = g.param(Tensor::zeros(2, 2));
        assert!(matches!(g.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::new();
        let c = g.constant(t(&[&[1.0, 2.0]]));
        let p = g.param(t(&[&[3.0, 4.0]]));
        let s = g.add(c, p).unwrap();
        let l = g.sum(s).unwrap();
        g.backward(l).unwrap();
        assert!(g.grad(c).is_none());
        assert!(g.grad(p).is_some());
    }

    #[test]
    fn logsumexp_rows_handles_excluded_entries() {
        let mut g = Graph::new();
        let x = g.constant(t(&[&[0.0, 0.0], &[1.0, 2.0]]));
        let lw = t(&[&[f64::NEG_INFINITY, f64::NEG_INFINITY], &[0.0, f64::NEG_INFINITY]]);
        let out = g.logsumexp_rows(x, lw.clone(), false).unwrap();
        assert_eq!(g.value(out).get(0, 0), 0.0);
        assert!((g.value(out).get(1, 0) - 1.0).abs() < 1e-15);
        let out1 = g.logsumexp_rows(x, lw, true).unwrap();
        assert!((g.value(out1).get(0, 0)).abs() < 1e-15);
        assert!((g.value(out1).get(1, 0) - libm::log(1.0 + libm::exp(1.0))).abs() < 1e-15);
    }

    #[test]
    fn causal_softmax_masks_future() {
        let mut g = Graph::new();
        let x = g.constant(t(&[&[1.0, 5.0, 9.0], &[1.0, 1.0, 9.0], &[0.0, 0.0, 0.0]]));
        let s = g.causal_row_softmax(x, 1.0).unwrap();
        let v = g.value(s);
        assert_eq!(v.row(0), &[1.0, 0.0, 0.0]);
        assert_eq!(v.row(1), &[0.5, 0.5, 0.0]);
        assert!((v.get(2, 2) - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn op_names_round_trip() {
        for k in ALL_OPS {
            assert_eq!(OpKind::from_name(k.name()), Some(k));
        }
    }
}
