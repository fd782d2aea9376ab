//! Define-by-run computation graph with reverse-mode differentiation.
//!
//! Building a node evaluates it immediately, so a freshly built graph is
//! already "forwarded". [`Graph::forward`] replays every node in
//! construction order from a new set of leaf bindings, which is what the
//! finite-difference checker relies on.

use std::collections::BTreeMap;
use std::fmt;

use super::tensor::{gemm, gemm_at, gemm_bt, Tensor};
use super::NumericsError;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

impl fmt::Display for Var {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "%{}", self.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    Rows,
    Cols,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LeafKind {
    /// Trainable; receives a gradient slot in [`Gradients`].
    Param,
    /// Constant data (masks, fixed inputs).
    Input,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf { name: String, kind: LeafKind },
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    RowScale(Var, Var),
    Scale(Var, f64),
    Tanh(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Transpose(Var),
    Concat(Vec<Var>),
    Slice { x: Var, start: usize, len: usize },
    Mean { x: Var, axis: Axis },
    Sum(Var),
    Softmax { x: Var, mask: Option<Vec<f64>> },
    LogSoftmax(Var),
    GatherRows { table: Var, ids: Vec<Option<usize>> },
    Pick { x: Var, ids: Vec<usize> },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf { .. } => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddRow(..) => "add_row",
            Op::RowScale(..) => "row_scale",
            Op::Scale(..) => "scale",
            Op::Tanh(..) => "tanh",
            Op::Sigmoid(..) => "sigmoid",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Transpose(..) => "transpose",
            Op::Concat(..) => "concat",
            Op::Slice { .. } => "slice",
            Op::Mean { .. } => "mean",
            Op::Sum(..) => "sum",
            Op::Softmax { .. } => "softmax",
            Op::LogSoftmax(..) => "log_softmax",
            Op::GatherRows { .. } => "gather_rows",
            Op::Pick { .. } => "pick",
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    value: Tensor,
}

/// An ordered list of primitive operations over tensors.
///
/// Nodes can only refer to earlier nodes, so construction order is a
/// topological order.
#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    leaves: BTreeMap<String, Var>,
}

/// Gradients produced by [`Graph::backward`].
#[derive(Clone, Debug)]
pub struct Gradients {
    params: BTreeMap<String, Tensor>,
    nodes: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor> {
        &self.params
    }

    pub fn into_params(self) -> BTreeMap<String, Tensor> {
        self.params
    }

    /// Gradient with respect to any node; `None` when the node does not
    /// influence the loss.
    pub fn node(&self, v: Var) -> Option<&Tensor> {
        self.nodes.get(v.0).and_then(|g| g.as_ref())
    }
}

fn mismatch(op: &'static str, a: (Var, &Tensor), b: (Var, &Tensor)) -> NumericsError {
    NumericsError::OperandMismatch {
        op,
        lhs: a.0.index(),
        lhs_shape: a.1.shape().to_vec(),
        rhs: b.0.index(),
        rhs_shape: b.1.shape().to_vec(),
    }
}

fn require_rank2(op: &'static str, v: Var, t: &Tensor) -> Result<(usize, usize), NumericsError> {
    if t.rank() != 2 {
        return Err(NumericsError::Rank {
            op,
            node: v.index(),
            shape: t.shape().to_vec(),
        });
    }
    Ok(t.dims2())
}

fn softmax_row(x: &[f64], mask: Option<&[f64]>, out: &mut [f64]) {
    let live = |i: usize| mask.is_none_or(|m| m[i] > 0.0);
    let max = (0..x.len())
        .filter(|&i| live(i))
        .map(|i| x[i])
        .fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for i in 0..x.len() {
        out[i] = if live(i) { (x[i] - max).exp() } else { 0.0 };
        total += out[i];
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}

fn compute(op: &Op, vals: &[Node]) -> Result<Tensor, NumericsError> {
    let v = |x: Var| &vals[x.0].value;
    let out = match op {
        Op::Leaf { .. } => unreachable!("leaves are bound, not computed"),
        Op::MatMul(a, b) => {
            let (ta, tb) = (v(*a), v(*b));
            let (m, k) = require_rank2("matmul", *a, ta)?;
            let (k2, n) = require_rank2("matmul", *b, tb)?;
            if k != k2 {
                return Err(mismatch("matmul", (*a, ta), (*b, tb)));
            }
            let mut out = vec![0.0; m * n];
            gemm(ta.data(), tb.data(), &mut out, m, k, n);
            Tensor::new(vec![m, n], out)?
        }
        Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => {
            let (ta, tb) = (v(*a), v(*b));
            if ta.shape() != tb.shape() {
                return Err(mismatch(op.name(), (*a, ta), (*b, tb)));
            }
            let f: fn(f64, f64) -> f64 = match op {
                Op::Add(..) => |x, y| x + y,
                Op::Sub(..) => |x, y| x - y,
                _ => |x, y| x * y,
            };
            let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
            Tensor::new(ta.shape().to_vec(), data)?
        }
        Op::AddRow(a, b) => {
            let (ta, tb) = (v(*a), v(*b));
            let (_, c) = require_rank2("add_row", *a, ta)?;
            if tb.len() != c {
                return Err(mismatch("add_row", (*a, ta), (*b, tb)));
            }
            let mut out = ta.clone();
            for row in out.data_mut().chunks_mut(c) {
                for (o, &bv) in row.iter_mut().zip(tb.data()) {
                    *o += bv;
                }
            }
            out
        }
        Op::RowScale(a, s) => {
            let (ta, ts) = (v(*a), v(*s));
            let (r, c) = require_rank2("row_scale", *a, ta)?;
            if ts.len() != r {
                return Err(mismatch("row_scale", (*a, ta), (*s, ts)));
            }
            let mut out = ta.clone();
            for (row, &sv) in out.data_mut().chunks_mut(c).zip(ts.data()) {
                row.iter_mut().for_each(|o| *o *= sv);
            }
            out
        }
        Op::Scale(a, c) => v(*a).map(|x| x * c),
        Op::Tanh(a) => v(*a).map(f64::tanh),
        Op::Sigmoid(a) => v(*a).map(sigmoid),
        Op::Exp(a) => v(*a).map(f64::exp),
        Op::Log(a) => v(*a).map(f64::ln),
        Op::Transpose(a) => {
            require_rank2("transpose", *a, v(*a))?;
            v(*a).transpose()
        }
        Op::Concat(parts) => {
            let first = v(parts[0]);
            let (r, _) = require_rank2("concat", parts[0], first)?;
            let mut widths = Vec::with_capacity(parts.len());
            for p in parts {
                let (pr, pc) = require_rank2("concat", *p, v(*p))?;
                if pr != r {
                    return Err(mismatch("concat", (parts[0], first), (*p, v(*p))));
                }
                widths.push(pc);
            }
            let total: usize = widths.iter().sum();
            let mut out = Vec::with_capacity(r * total);
            for row in 0..r {
                for (p, &w) in parts.iter().zip(&widths) {
                    out.extend_from_slice(&v(*p).data()[row * w..(row + 1) * w]);
                }
            }
            Tensor::new(vec![r, total], out)?
        }
        Op::Slice { x, start, len } => {
            let t = v(*x);
            let (r, c) = require_rank2("slice", *x, t)?;
            if *len == 0 || start + len > c {
                return Err(NumericsError::SliceBounds {
                    node: x.index(),
                    start: *start,
                    len: *len,
                    cols: c,
                });
            }
            let mut out = Vec::with_capacity(r * len);
            for row in 0..r {
                out.extend_from_slice(&t.data()[row * c + start..row * c + start + len]);
            }
            Tensor::new(vec![r, *len], out)?
        }
        Op::Mean { x, axis } => {
            let t = v(*x);
            let (r, c) = require_rank2("mean", *x, t)?;
            match axis {
                Axis::Rows => {
                    let mut out = vec![0.0; c];
                    for row in t.data().chunks(c) {
                        for (o, &x) in out.iter_mut().zip(row) {
                            *o += x;
                        }
                    }
                    out.iter_mut().for_each(|o| *o /= r as f64);
                    Tensor::new(vec![1, c], out)?
                }
                Axis::Cols => {
                    let out = t.data().chunks(c).map(|row| row.iter().sum::<f64>() / c as f64).collect();
                    Tensor::new(vec![r, 1], out)?
                }
            }
        }
        Op::Sum(a) => Tensor::scalar(v(*a).sum()),
        Op::Softmax { x, mask } => {
            let t = v(*x);
            let (r, c) = t.dims2();
            if let Some(m) = mask {
                if m.len() != t.len() {
                    return Err(NumericsError::MaskLength {
                        node: x.index(),
                        expected: t.len(),
                        got: m.len(),
                    });
                }
                if m.chunks(c).any(|row| row.iter().all(|&w| w <= 0.0)) {
                    return Err(NumericsError::EmptyMaskRow { node: x.index() });
                }
            }
            let mut out = vec![0.0; r * c];
            for row in 0..r {
                let span = row * c..(row + 1) * c;
                softmax_row(
                    &t.data()[span.clone()],
                    mask.as_ref().map(|m| &m[span.clone()]),
                    &mut out[span],
                );
            }
            Tensor::new(t.shape().to_vec(), out)?
        }
        Op::LogSoftmax(x) => {
            let t = v(*x);
            let (_, c) = t.dims2();
            let mut out = t.clone();
            for row in out.data_mut().chunks_mut(c) {
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + row.iter().map(|&z| (z - max).exp()).sum::<f64>().ln();
                row.iter_mut().for_each(|z| *z -= lse);
            }
            out
        }
        Op::GatherRows { table, ids } => {
            let t = v(*table);
            let (rows, c) = require_rank2("gather_rows", *table, t)?;
            let mut out = vec![0.0; ids.len() * c];
            for (i, id) in ids.iter().enumerate() {
                if let Some(id) = *id {
                    if id >= rows {
                        return Err(NumericsError::IndexOutOfRange {
                            node: table.index(),
                            index: id,
                            bound: rows,
                        });
                    }
                    out[i * c..(i + 1) * c].copy_from_slice(t.row(id));
                }
            }
            Tensor::new(vec![ids.len(), c], out)?
        }
        Op::Pick { x, ids } => {
            let t = v(*x);
            let (r, c) = require_rank2("pick", *x, t)?;
            if ids.len() != r {
                return Err(NumericsError::IndexCount {
                    node: x.index(),
                    expected: r,
                    got: ids.len(),
                });
            }
            let mut out = Vec::with_capacity(r);
            for (row, &id) in ids.iter().enumerate() {
                if id >= c {
                    return Err(NumericsError::IndexOutOfRange {
                        node: x.index(),
                        index: id,
                        bound: c,
                    });
                }
                out.push(t.get2(row, id));
            }
            Tensor::new(vec![r, 1], out)?
        }
    };
    Ok(out)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push_leaf(&mut self, name: String, kind: LeafKind, value: Tensor) -> Result<Var, NumericsError> {
        if self.leaves.contains_key(&name) {
            return Err(NumericsError::DuplicateLeaf(name));
        }
        if !value.is_finite() {
            return Err(NumericsError::NonFinite {
                op: "leaf",
                node: self.nodes.len(),
            });
        }
        let var = Var(self.nodes.len());
        self.leaves.insert(name.clone(), var);
        self.nodes.push(Node {
            op: Op::Leaf { name, kind },
            value,
        });
        Ok(var)
    }

    /// Adds a trainable leaf. Names must be unique within the graph.
    pub fn param(&mut self, name: impl Into<String>, value: Tensor) -> Result<Var, NumericsError> {
        self.push_leaf(name.into(), LeafKind::Param, value)
    }

    /// Adds a named constant leaf.
    pub fn input(&mut self, name: impl Into<String>, value: Tensor) -> Result<Var, NumericsError> {
        self.push_leaf(name.into(), LeafKind::Input, value)
    }

    /// Adds an anonymous constant leaf.
    pub fn constant(&mut self, value: Tensor) -> Var {
        let name = format!("const#{}", self.nodes.len());
        self.push_leaf(name, LeafKind::Input, value)
            .expect("anonymous constants are unique and finite by construction")
    }

    pub fn leaf_names(&self) -> impl Iterator<Item = (&str, LeafKind)> {
        self.leaves.values().map(|v| match &self.nodes[v.0].op {
            Op::Leaf { name, kind } => (name.as_str(), *kind),
            _ => unreachable!(),
        })
    }

    pub fn leaf(&self, name: &str) -> Option<Var> {
        self.leaves.get(name).copied()
    }

    /// The current value of every leaf, keyed by name.
    pub fn bindings(&self) -> BTreeMap<String, Tensor> {
        self.leaves
            .iter()
            .map(|(n, v)| (n.clone(), self.nodes[v.0].value.clone()))
            .collect()
    }

    fn push(&mut self, op: Op) -> Result<Var, NumericsError> {
        let value = compute(&op, &self.nodes)?;
        if !value.is_finite() {
            return Err(NumericsError::NonFinite {
                op: op.name(),
                node: self.nodes.len(),
            });
        }
        self.nodes.push(Node { op, value });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.push(Op::MatMul(a, b))
    }
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.push(Op::Add(a, b))
    }
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.push(Op::Sub(a, b))
    }
    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.push(Op::Mul(a, b))
    }
    /// Adds a bias vector to every row of a matrix.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var, NumericsError> {
        self.push(Op::AddRow(a, bias))
    }
    /// Multiplies row `r` of `a` by `s[r]`.
    pub fn row_scale(&mut self, a: Var, s: Var) -> Result<Var, NumericsError> {
        self.push(Op::RowScale(a, s))
    }
    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var, NumericsError> {
        self.push(Op::Scale(a, c))
    }
    pub fn tanh(&mut self, a: Var) -> Result<Var, NumericsError> {
        self.push(Op::Tanh(a))
    }
    pub fn sigmoid(&mut self, a: Var) -> Result<Var, NumericsError> {
        self.push(Op::Sigmoid(a))
    }
    pub fn exp(&mut self, a: Var) -> Result<Var, NumericsError> {
        self.push(Op::Exp(a))
    }
    pub fn log(&mut self, a: Var) -> Result<Var, NumericsError> {
        self.push(Op::Log(a))
    }
    pub fn transpose(&mut self, a: Var) -> Result<Var, NumericsError> {
        self.push(Op::Transpose(a))
    }
    /// Column-wise concatenation of matrices with equal row counts.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var, NumericsError> {
        if parts.is_empty() {
            return Err(NumericsError::EmptyOperands("concat"));
        }
        if parts.len() == 1 {
            return Ok(parts[0]);
        }
        self.push(Op::Concat(parts.to_vec()))
    }
    /// Columns `start..start + len`.
    pub fn slice(&mut self, x: Var, start: usize, len: usize) -> Result<Var, NumericsError> {
        self.push(Op::Slice { x, start, len })
    }
    pub fn mean(&mut self, x: Var, axis: Axis) -> Result<Var, NumericsError> {
        self.push(Op::Mean { x, axis })
    }
    pub fn sum(&mut self, x: Var) -> Result<Var, NumericsError> {
        self.push(Op::Sum(x))
    }
    /// Row-wise softmax.
    pub fn softmax(&mut self, x: Var) -> Result<Var, NumericsError> {
        self.push(Op::Softmax { x, mask: None })
    }
    /// Row-wise softmax restricted to entries whose mask is positive; masked
    /// entries come out as exact zeros.
    pub fn masked_softmax(&mut self, x: Var, mask: Vec<f64>) -> Result<Var, NumericsError> {
        self.push(Op::Softmax { x, mask: Some(mask) })
    }
    pub fn log_softmax(&mut self, x: Var) -> Result<Var, NumericsError> {
        self.push(Op::LogSoftmax(x))
    }
    /// Selects rows of `table`; `None` yields an all-zero row.
    pub fn gather_rows(&mut self, table: Var, ids: Vec<Option<usize>>) -> Result<Var, NumericsError> {
        if ids.is_empty() {
            return Err(NumericsError::EmptyOperands("gather_rows"));
        }
        self.push(Op::GatherRows { table, ids })
    }
    /// `out[r] = x[r, ids[r]]`, shape `rows x 1`.
    pub fn pick(&mut self, x: Var, ids: Vec<usize>) -> Result<Var, NumericsError> {
        self.push(Op::Pick { x, ids })
    }

    /// Recomputes every node from `bindings`, which must bind every leaf.
    /// Values are then read back with [`Graph::value`].
    pub fn forward(&mut self, bindings: &BTreeMap<String, Tensor>) -> Result<(), NumericsError> {
        for i in 0..self.nodes.len() {
            let (done, rest) = self.nodes.split_at_mut(i);
            let node = &mut rest[0];
            if let Op::Leaf { name, .. } = &node.op {
                let bound = bindings
                    .get(name)
                    .ok_or_else(|| NumericsError::UnboundLeaf(name.clone()))?;
                if !bound.is_finite() {
                    return Err(NumericsError::NonFinite { op: "leaf", node: i });
                }
                node.value = bound.clone();
                continue;
            }
            let value = compute(&node.op, done)?;
            if !value.is_finite() {
                return Err(NumericsError::NonFinite {
                    op: node.op.name(),
                    node: i,
                });
            }
            node.value = value;
        }
        Ok(())
    }

    /// Reverse-mode sweep from a scalar `loss` node.
    ///
    /// Every parameter leaf gets a gradient; leaves the loss does not
    /// depend on get zeros.
    pub fn backward(&self, loss: Var) -> Result<Gradients, NumericsError> {
        let lv = &self.nodes[loss.0].value;
        if lv.len() != 1 {
            return Err(NumericsError::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::filled(lv.shape(), 1.0));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }

        let mut params = BTreeMap::new();
        for (name, var) in &self.leaves {
            if let Op::Leaf {
                kind: LeafKind::Param,
                ..
            } = self.nodes[var.0].op
            {
                let g = grads
                    .get(var.0)
                    .and_then(|g| g.clone())
                    .unwrap_or_else(|| Tensor::zeros(self.nodes[var.0].value.shape()));
                params.insert(name.clone(), g);
            }
        }
        for (i, g) in grads.iter().enumerate() {
            if let Some(g) = g {
                if !g.is_finite() {
                    return Err(NumericsError::NonFinite { op: "backward", node: i });
                }
            }
        }
        Ok(Gradients { params, nodes: grads })
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        let y = &self.nodes[i].value;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            let slot = grads[v.0].get_or_insert_with(|| Tensor::zeros(self.nodes[v.0].value.shape()));
            f(slot.data_mut());
        };
        match &self.nodes[i].op {
            Op::Leaf { .. } => {}
            Op::MatMul(a, b) => {
                let (m, k) = val(*a).dims2();
                let (_, n) = val(*b).dims2();
                let bd = val(*b).data();
                let ad = val(*a).data();
                acc(*a, &mut |ga| gemm_bt(g.data(), bd, ga, m, n, k));
                acc(*b, &mut |gb| gemm_at(ad, g.data(), gb, m, k, n));
            }
            Op::Add(a, b) => {
                acc(*a, &mut |ga| add_into(ga, g.data(), 1.0));
                acc(*b, &mut |gb| add_into(gb, g.data(), 1.0));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |ga| add_into(ga, g.data(), 1.0));
                acc(*b, &mut |gb| add_into(gb, g.data(), -1.0));
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (val(*a).data(), val(*b).data());
                acc(*a, &mut |ga| {
                    for ((o, &gv), &bv) in ga.iter_mut().zip(g.data()).zip(bd) {
                        *o += gv * bv;
                    }
                });
                acc(*b, &mut |gb| {
                    for ((o, &gv), &av) in gb.iter_mut().zip(g.data()).zip(ad) {
                        *o += gv * av;
                    }
                });
            }
            Op::AddRow(a, b) => {
                let (_, c) = val(*a).dims2();
                acc(*a, &mut |ga| add_into(ga, g.data(), 1.0));
                acc(*b, &mut |gb| {
                    for row in g.data().chunks(c) {
                        add_into(gb, row, 1.0);
                    }
                });
            }
            Op::RowScale(a, s) => {
                let (_, c) = val(*a).dims2();
                let (ad, sd) = (val(*a).data(), val(*s).data());
                acc(*a, &mut |ga| {
                    for ((orow, grow), &sv) in ga.chunks_mut(c).zip(g.data().chunks(c)).zip(sd) {
                        add_into(orow, grow, sv);
                    }
                });
                acc(*s, &mut |gs| {
                    for ((o, grow), arow) in gs.iter_mut().zip(g.data().chunks(c)).zip(ad.chunks(c)) {
                        *o += grow.iter().zip(arow).map(|(x, y)| x * y).sum::<f64>();
                    }
                });
            }
            Op::Scale(a, c) => acc(*a, &mut |ga| add_into(ga, g.data(), *c)),
            Op::Tanh(a) => acc(*a, &mut |ga| {
                for ((o, &gv), &yv) in ga.iter_mut().zip(g.data()).zip(y.data()) {
                    *o += gv * (1.0 - yv * yv);
                }
            }),
            Op::Sigmoid(a) => acc(*a, &mut |ga| {
                for ((o, &gv), &yv) in ga.iter_mut().zip(g.data()).zip(y.data()) {
                    *o += gv * yv * (1.0 - yv);
                }
            }),
            Op::Exp(a) => acc(*a, &mut |ga| {
                for ((o, &gv), &yv) in ga.iter_mut().zip(g.data()).zip(y.data()) {
                    *o += gv * yv;
                }
            }),
            Op::Log(a) => {
                let ad = val(*a).data();
                acc(*a, &mut |ga| {
                    for ((o, &gv), &xv) in ga.iter_mut().zip(g.data()).zip(ad) {
                        *o += gv / xv;
                    }
                })
            }
            Op::Transpose(a) => {
                let gt = g.transpose();
                acc(*a, &mut |ga| add_into(ga, gt.data(), 1.0));
            }
            Op::Concat(parts) => {
                let (r, total) = y.dims2();
                let mut offset = 0;
                for p in parts {
                    let (_, w) = val(*p).dims2();
                    acc(*p, &mut |gp| {
                        for row in 0..r {
                            let src = &g.data()[row * total + offset..row * total + offset + w];
                            add_into(&mut gp[row * w..(row + 1) * w], src, 1.0);
                        }
                    });
                    offset += w;
                }
            }
            Op::Slice { x, start, len } => {
                let (r, c) = val(*x).dims2();
                acc(*x, &mut |gx| {
                    for row in 0..r {
                        let dst = &mut gx[row * c + start..row * c + start + len];
                        add_into(dst, &g.data()[row * len..(row + 1) * len], 1.0);
                    }
                });
            }
            Op::Mean { x, axis } => {
                let (r, c) = val(*x).dims2();
                acc(*x, &mut |gx| match axis {
                    Axis::Rows => {
                        for row in gx.chunks_mut(c) {
                            add_into(row, g.data(), 1.0 / r as f64);
                        }
                    }
                    Axis::Cols => {
                        for (row, &gv) in gx.chunks_mut(c).zip(g.data()) {
                            row.iter_mut().for_each(|o| *o += gv / c as f64);
                        }
                    }
                });
            }
            Op::Sum(a) => {
                let gv = g.item();
                acc(*a, &mut |ga| ga.iter_mut().for_each(|o| *o += gv));
            }
            Op::Softmax { x, .. } => {
                let (_, c) = y.dims2();
                acc(*x, &mut |gx| {
                    for ((orow, grow), yrow) in gx.chunks_mut(c).zip(g.data().chunks(c)).zip(y.data().chunks(c)) {
                        let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                        for ((o, &gv), &yv) in orow.iter_mut().zip(grow).zip(yrow) {
                            *o += yv * (gv - dot);
                        }
                    }
                });
            }
            Op::LogSoftmax(x) => {
                let (_, c) = y.dims2();
                acc(*x, &mut |gx| {
                    for ((orow, grow), yrow) in gx.chunks_mut(c).zip(g.data().chunks(c)).zip(y.data().chunks(c)) {
                        let total: f64 = grow.iter().sum();
                        for ((o, &gv), &yv) in orow.iter_mut().zip(grow).zip(yrow) {
                            *o += gv - yv.exp() * total;
                        }
                    }
                });
            }
            Op::GatherRows { table, ids } => {
                let (_, c) = val(*table).dims2();
                acc(*table, &mut |gt| {
                    for (grow, id) in g.data().chunks(c).zip(ids) {
                        if let Some(id) = *id {
                            add_into(&mut gt[id * c..(id + 1) * c], grow, 1.0);
                        }
                    }
                });
            }
            Op::Pick { x, ids } => {
                let (_, c) = val(*x).dims2();
                acc(*x, &mut |gx| {
                    for (row, (&id, &gv)) in ids.iter().zip(g.data()).enumerate() {
                        gx[row * c + id] += gv;
                    }
                });
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64], scale: f64) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += scale * s;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() < 1e-12
    }

    #[test]
    fn tanh_of_zero() {
        let mut g = Graph::new();
        let x = g.input("x", Tensor::vector(vec![0.0, 0.0])).unwrap();
        let y = g.tanh(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 0.0]);
    }

    #[test]
    fn uniform_softmax() {
        let mut g = Graph::new();
        let x = g.input("x", Tensor::vector(vec![0.0; 3])).unwrap();
        let y = g.softmax(x).unwrap();
        for &p in g.value(y).data() {
            assert!(close(p, 1.0 / 3.0));
        }
    }

    #[test]
    fn identity_matmul() {
        let mut g = Graph::new();
        let i = g.input("I", Tensor::identity(2)).unwrap();
        let x = g.input("x", Tensor::matrix(2, 1, vec![2.0, -3.0]).unwrap()).unwrap();
        let y = g.matmul(i, x).unwrap();
        assert_eq!(g.value(y).data(), &[2.0, -3.0]);
    }

    #[test]
    fn shape_mismatch_names_both_operands() {
        let mut g = Graph::new();
        let a = g.input("a", Tensor::zeros(&[2, 3])).unwrap();
        let b = g.input("b", Tensor::zeros(&[2, 3])).unwrap();
        let err = g.matmul(a, b).unwrap_err();
        match err {
            NumericsError::OperandMismatch { lhs, rhs, .. } => {
                assert_eq!((lhs, rhs), (a.index(), b.index()));
            }
            e => panic!("unexpected {e:?}"),
        }
    }

    #[test]
    fn overflow_is_an_error() {
        let mut g = Graph::new();
        let x = g.input("x", Tensor::scalar(1000.0)).unwrap();
        assert!(matches!(g.exp(x), Err(NumericsError::NonFinite { op: "exp", .. })));
    }

    #[test]
    fn elementary_gradients() {
        let mut g = Graph::new();
        let x = g.param("x", Tensor::vector(vec![0.0])).unwrap();
        let t = g.tanh(x).unwrap();
        let l = g.sum(t).unwrap();
        let grads = g.backward(l).unwrap();
        assert!(close(grads.param("x").unwrap().item(), 1.0));
        assert!(close(grads.node(l).unwrap().item(), 1.0));

        let mut g = Graph::new();
        let x = g.param("x", Tensor::vector(vec![0.0])).unwrap();
        let s = g.sigmoid(x).unwrap();
        let l = g.sum(s).unwrap();
        let grads = g.backward(l).unwrap();
        assert!(close(grads.param("x").unwrap().item(), 0.25));
    }

    #[test]
    fn non_scalar_loss_rejected_and_unreached_params_get_zeros() {
        let mut g = Graph::new();
        let x = g.param("x", Tensor::vector(vec![1.0, 2.0])).unwrap();
        let _unused = g.param("w", Tensor::zeros(&[2, 2])).unwrap();
        let y = g.tanh(x).unwrap();
        assert!(matches!(g.backward(y), Err(NumericsError::NonScalarLoss(_))));
        let l = g.sum(y).unwrap();
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.param("w").unwrap(), &Tensor::zeros(&[2, 2]));
    }

    #[test]
    fn forward_replay_requires_every_leaf() {
        let mut g = Graph::new();
        let x = g.input("x", Tensor::vector(vec![1.0])).unwrap();
        let _ = g.exp(x).unwrap();
        let empty = BTreeMap::new();
        assert!(matches!(g.forward(&empty), Err(NumericsError::UnboundLeaf(_))));
    }

    #[test]
    fn masked_softmax_zeroes_masked_entries() {
        let mut g = Graph::new();
        let x = g.input("x", Tensor::matrix(1, 3, vec![5.0, 1.0, 1.0]).unwrap()).unwrap();
        let y = g.masked_softmax(x, vec![0.0, 1.0, 1.0]).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 0.5, 0.5]);
        assert!(matches!(
            g.masked_softmax(x, vec![0.0; 3]),
            Err(NumericsError::EmptyMaskRow { .. })
        ));
    }
}
