//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] owns every node created while evaluating an expression. Node
//! ids are assigned in creation order, which is a topological order of the
//! DAG, so the backward pass is a single descending sweep over ids.

use std::cell::{Cell, RefCell};
use std::rc::Rc;

use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub usize);

/// How the right operand of an elementwise op lines up with the left one.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Broadcast {
    Same,
    Scalar,
    /// rhs shape equals lhs shape without its leading (batch) axis.
    Leading,
}

impl Broadcast {
    fn resolve(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Result<Self> {
        if lhs == rhs {
            Ok(Broadcast::Same)
        } else if rhs.is_empty() {
            Ok(Broadcast::Scalar)
        } else if !lhs.is_empty() && &lhs[1..] == rhs {
            Ok(Broadcast::Leading)
        } else {
            Err(Error::Dimension {
                op,
                lhs: lhs.to_vec(),
                rhs: rhs.to_vec(),
            })
        }
    }

    #[inline]
    fn index(self, k: usize, rhs_len: usize) -> usize {
        match self {
            Broadcast::Same => k,
            Broadcast::Scalar => 0,
            Broadcast::Leading => k % rhs_len,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum UnaryKind {
    Exp,
    Log,
    Neg,
    Square,
    Relu,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Binary(BinaryKind, Broadcast, NodeId, NodeId),
    Unary(UnaryKind, NodeId),
    AddScalar(NodeId),
    MulScalar(NodeId, f64),
    MatMul(NodeId, NodeId),
    Sum(NodeId),
    Mean(NodeId),
    MaxLast(NodeId, Vec<usize>),
    LogSumExpLast(NodeId),
    Gather(NodeId, Vec<usize>, Vec<usize>),
}

#[derive(Debug)]
struct Node {
    value: Rc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Computation graph. Build with [`Graph::var`] / [`Graph::constant`] and the
/// methods on [`DiffTensor`], then call [`Graph::backward`] once.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
    grads: RefCell<Vec<Option<Tensor>>>,
    consumed: Cell<bool>,
}

/// Handle to a node in a [`Graph`]. Cheap to copy; values are immutable once
/// recorded.
#[derive(Clone, Copy)]
pub struct DiffTensor<'g> {
    graph: &'g Graph,
    id: NodeId,
}

impl std::fmt::Debug for DiffTensor<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("DiffTensor")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// A leaf whose gradient is tracked.
    pub fn var(&self, value: Tensor) -> DiffTensor<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf treated as a constant: no gradient is accumulated for it.
    pub fn constant(&self, value: Tensor) -> DiffTensor<'_> {
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar(&self, value: f64) -> DiffTensor<'_> {
        self.constant(Tensor::scalar(value))
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> DiffTensor<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let id = NodeId(nodes.len());
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
        });
        DiffTensor { graph: self, id }
    }

    fn value(&self, id: NodeId) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id.0].value)
    }

    fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes.borrow()[id.0].requires_grad
    }

    /// Runs the reverse sweep from `loss`, seeding its gradient with 1.
    ///
    /// A graph supports exactly one backward pass; a second call is rejected.
    pub fn backward(&self, loss: DiffTensor<'_>) -> Result<()> {
        if !std::ptr::eq(self, loss.graph) {
            return Err(Error::Contract(
                "loss belongs to a different graph".to_string(),
            ));
        }
        if self.consumed.get() {
            return Err(Error::Contract(
                "backward already ran on this graph".to_string(),
            ));
        }
        let nodes = self.nodes.borrow();
        let seed_shape = nodes[loss.id.0].value.shape().to_vec();
        if nodes[loss.id.0].value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a single-element loss, got shape {seed_shape:?}"
            )));
        }
        self.consumed.set(true);

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[loss.id.0] = Some(vec![1.0]);

        for idx in (0..=loss.id.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &nodes[idx];
            if node.requires_grad {
                propagate(&nodes, &node.op, &node.value, &g, &mut grads);
            }
            grads[idx] = Some(g);
        }

        let mut out = self.grads.borrow_mut();
        *out = grads
            .into_iter()
            .zip(nodes.iter())
            .map(|(g, node)| {
                g.filter(|_| node.requires_grad).map(|data| {
                    Tensor::new(node.value.shape().to_vec(), data)
                        .expect("gradient length matches value length")
                })
            })
            .collect();
        Ok(())
    }

    /// Gradient of the last backward pass with respect to `t`, if `t` was
    /// reached and tracks gradients.
    pub fn grad(&self, t: DiffTensor<'_>) -> Option<Tensor> {
        self.grads.borrow().get(t.id.0).cloned().flatten()
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], id: NodeId, len: usize) -> &mut Vec<f64> {
    grads[id.0].get_or_insert_with(|| vec![0.0; len])
}

fn propagate(nodes: &[Node], op: &Op, out: &Tensor, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let needs = |id: NodeId| nodes[id.0].requires_grad;
    match op {
        Op::Leaf => {}
        Op::Binary(kind, bc, a, b) => {
            let av = &nodes[a.0].value;
            let bv = &nodes[b.0].value;
            let (ad, bd) = (av.data(), bv.data());
            let blen = bd.len();
            if needs(*a) {
                let ga = accumulate(grads, *a, ad.len());
                for k in 0..ad.len() {
                    let bk = bd[bc.index(k, blen)];
                    ga[k] += match kind {
                        BinaryKind::Add | BinaryKind::Sub => g[k],
                        BinaryKind::Mul => g[k] * bk,
                        BinaryKind::Div => g[k] / bk,
                    };
                }
            }
            if needs(*b) {
                let gb = accumulate(grads, *b, blen);
                for k in 0..ad.len() {
                    let j = bc.index(k, blen);
                    gb[j] += match kind {
                        BinaryKind::Add => g[k],
                        BinaryKind::Sub => -g[k],
                        BinaryKind::Mul => g[k] * ad[k],
                        BinaryKind::Div => -g[k] * ad[k] / (bd[j] * bd[j]),
                    };
                }
            }
        }
        Op::Unary(kind, a) => {
            if !needs(*a) {
                return;
            }
            let ad = nodes[a.0].value.data();
            let od = out.data();
            let ga = accumulate(grads, *a, ad.len());
            for k in 0..ad.len() {
                ga[k] += match kind {
                    UnaryKind::Exp => g[k] * od[k],
                    UnaryKind::Log => g[k] / ad[k],
                    UnaryKind::Neg => -g[k],
                    UnaryKind::Square => 2.0 * ad[k] * g[k],
                    UnaryKind::Relu => {
                        if ad[k] > 0.0 {
                            g[k]
                        } else {
                            0.0
                        }
                    }
                };
            }
        }
        Op::AddScalar(a) => {
            if needs(*a) {
                let ga = accumulate(grads, *a, g.len());
                for (acc, gk) in ga.iter_mut().zip(g) {
                    *acc += gk;
                }
            }
        }
        Op::MulScalar(a, s) => {
            if needs(*a) {
                let ga = accumulate(grads, *a, g.len());
                for (acc, gk) in ga.iter_mut().zip(g) {
                    *acc += gk * s;
                }
            }
        }
        Op::MatMul(a, b) => {
            let av = &nodes[a.0].value;
            let bv = &nodes[b.0].value;
            let (n, k) = (av.shape()[0], av.shape()[1]);
            let m = bv.shape()[1];
            let (ad, bd) = (av.data(), bv.data());
            if needs(*a) {
                // dA = G · Bᵀ
                let ga = accumulate(grads, *a, n * k);
                for i in 0..n {
                    for p in 0..k {
                        let mut s = 0.0;
                        for j in 0..m {
                            s += g[i * m + j] * bd[p * m + j];
                        }
                        ga[i * k + p] += s;
                    }
                }
            }
            if needs(*b) {
                // dB = Aᵀ · G
                let gb = accumulate(grads, *b, k * m);
                for i in 0..n {
                    for p in 0..k {
                        let aip = ad[i * k + p];
                        if aip == 0.0 {
                            continue;
                        }
                        for j in 0..m {
                            gb[p * m + j] += aip * g[i * m + j];
                        }
                    }
                }
            }
        }
        Op::Sum(a) | Op::Mean(a) => {
            if needs(*a) {
                let len = nodes[a.0].value.len();
                let scale = if matches!(op, Op::Mean(_)) {
                    g[0] / len as f64
                } else {
                    g[0]
                };
                let ga = accumulate(grads, *a, len);
                for acc in ga.iter_mut() {
                    *acc += scale;
                }
            }
        }
        Op::MaxLast(a, argmax) => {
            if needs(*a) {
                let av = &nodes[a.0].value;
                let cols = av.cols();
                let ga = accumulate(grads, *a, av.len());
                for (r, &j) in argmax.iter().enumerate() {
                    ga[r * cols + j] += g[r];
                }
            }
        }
        Op::LogSumExpLast(a) => {
            if needs(*a) {
                let av = &nodes[a.0].value;
                let cols = av.cols();
                let ad = av.data();
                let od = out.data();
                let ga = accumulate(grads, *a, ad.len());
                for r in 0..od.len() {
                    for j in 0..cols {
                        let k = r * cols + j;
                        ga[k] += g[r] * (ad[k] - od[r]).exp();
                    }
                }
            }
        }
        Op::Gather(a, rows, cols) => {
            if needs(*a) {
                let av = &nodes[a.0].value;
                let width = av.cols();
                let ga = accumulate(grads, *a, av.len());
                for (k, (&i, &j)) in rows.iter().zip(cols).enumerate() {
                    ga[i * width + j] += g[k];
                }
            }
        }
    }
}

/// Numerically stable `log Σ exp(xs)`.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    if m.is_infinite() {
        return m;
    }
    m + xs.iter().map(|&x| (x - m).exp()).sum::<f64>().ln()
}

impl<'g> DiffTensor<'g> {
    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.graph.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn item(&self) -> Result<f64> {
        self.value().item()
    }

    pub fn grad(&self) -> Option<Tensor> {
        self.graph.grad(*self)
    }

    fn same_graph(&self, other: &DiffTensor<'_>) -> Result<()> {
        if std::ptr::eq(self.graph, other.graph) {
            Ok(())
        } else {
            Err(Error::Contract(
                "operands belong to different graphs".to_string(),
            ))
        }
    }

    fn derived(&self, value: Tensor, op: Op, inputs: &[NodeId]) -> DiffTensor<'g> {
        let rg = inputs.iter().any(|&i| self.graph.requires_grad(i));
        self.graph.push(value, op, rg)
    }

    fn binary(
        self,
        other: DiffTensor<'g>,
        kind: BinaryKind,
        name: &'static str,
    ) -> Result<DiffTensor<'g>> {
        self.same_graph(&other)?;
        let a = self.value();
        let b = other.value();
        let bc = Broadcast::resolve(name, a.shape(), b.shape())?;
        let (ad, bd) = (a.data(), b.data());
        let blen = bd.len();
        let data = (0..ad.len())
            .map(|k| {
                let (x, y) = (ad[k], bd[bc.index(k, blen)]);
                match kind {
                    BinaryKind::Add => x + y,
                    BinaryKind::Sub => x - y,
                    BinaryKind::Mul => x * y,
                    BinaryKind::Div => x / y,
                }
            })
            .collect();
        let value = Tensor::new(a.shape().to_vec(), data)?;
        Ok(self.derived(
            value,
            Op::Binary(kind, bc, self.id, other.id),
            &[self.id, other.id],
        ))
    }

    fn unary(self, kind: UnaryKind) -> Result<DiffTensor<'g>> {
        let a = self.value();
        if kind == UnaryKind::Log {
            if let Some(bad) = a.data().iter().find(|&&v| !(v > 0.0)) {
                return Err(Error::domain("log", format!("non-positive input {bad}")));
            }
        }
        let value = a.map(|v| match kind {
            UnaryKind::Exp => v.exp(),
            UnaryKind::Log => v.ln(),
            UnaryKind::Neg => -v,
            UnaryKind::Square => v * v,
            UnaryKind::Relu => v.max(0.0),
        });
        Ok(self.derived(value, Op::Unary(kind, self.id), &[self.id]))
    }

    /// Elementwise sum; `other` may be a scalar or drop the leading axis.
    pub fn add(self, other: DiffTensor<'g>) -> Result<DiffTensor<'g>> {
        self.binary(other, BinaryKind::Add, "add")
    }

    pub fn sub(self, other: DiffTensor<'g>) -> Result<DiffTensor<'g>> {
        self.binary(other, BinaryKind::Sub, "sub")
    }

    pub fn mul(self, other: DiffTensor<'g>) -> Result<DiffTensor<'g>> {
        self.binary(other, BinaryKind::Mul, "mul")
    }

    pub fn div(self, other: DiffTensor<'g>) -> Result<DiffTensor<'g>> {
        self.binary(other, BinaryKind::Div, "div")
    }

    pub fn exp(self) -> Result<DiffTensor<'g>> {
        self.unary(UnaryKind::Exp)
    }

    /// Natural log; any non-positive entry is a domain error.
    pub fn log(self) -> Result<DiffTensor<'g>> {
        self.unary(UnaryKind::Log)
    }

    pub fn neg(self) -> Result<DiffTensor<'g>> {
        self.unary(UnaryKind::Neg)
    }

    pub fn square(self) -> Result<DiffTensor<'g>> {
        self.unary(UnaryKind::Square)
    }

    pub fn relu(self) -> Result<DiffTensor<'g>> {
        self.unary(UnaryKind::Relu)
    }

    pub fn add_scalar(self, s: f64) -> Result<DiffTensor<'g>> {
        let value = self.value().map(|v| v + s);
        Ok(self.derived(value, Op::AddScalar(self.id), &[self.id]))
    }

    pub fn mul_scalar(self, s: f64) -> Result<DiffTensor<'g>> {
        let value = self.value().map(|v| v * s);
        Ok(self.derived(value, Op::MulScalar(self.id, s), &[self.id]))
    }

    /// Matrix product of `[n, k]` and `[k, m]`.
    pub fn matmul(self, other: DiffTensor<'g>) -> Result<DiffTensor<'g>> {
        self.same_graph(&other)?;
        let a = self.value();
        let b = other.value();
        let mismatch = || Error::Dimension {
            op: "matmul",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        };
        if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
            return Err(mismatch());
        }
        let (n, k, m) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let (ad, bd) = (a.data(), b.data());
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let row = &mut out[i * m..(i + 1) * m];
            for p in 0..k {
                let aip = ad[i * k + p];
                let brow = &bd[p * m..(p + 1) * m];
                for (o, &bv) in row.iter_mut().zip(brow) {
                    *o += aip * bv;
                }
            }
        }
        let value = Tensor::matrix(n, m, out)?;
        Ok(self.derived(value, Op::MatMul(self.id, other.id), &[self.id, other.id]))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(self) -> Result<DiffTensor<'g>> {
        let s = self.value().data().iter().sum();
        Ok(self.derived(Tensor::scalar(s), Op::Sum(self.id), &[self.id]))
    }

    /// Mean of all elements, as a scalar.
    pub fn mean(self) -> Result<DiffTensor<'g>> {
        let v = self.value();
        if v.is_empty() {
            return Err(Error::Contract("mean of an empty tensor".to_string()));
        }
        let s = v.data().iter().sum::<f64>() / v.len() as f64;
        Ok(self.derived(Tensor::scalar(s), Op::Mean(self.id), &[self.id]))
    }

    fn reduced_shape(v: &Tensor) -> Vec<usize> {
        match v.rank() {
            2 => vec![v.shape()[0]],
            _ => vec![],
        }
    }

    /// Maximum over the last axis. Ties route the gradient to the first
    /// maximal entry.
    pub fn max(self) -> Result<DiffTensor<'g>> {
        let v = self.value();
        if v.is_empty() {
            return Err(Error::Contract("max of an empty tensor".to_string()));
        }
        let (mut out, mut argmax) = (Vec::new(), Vec::new());
        for r in 0..v.rows() {
            let row = v.row(r);
            let mut best = 0;
            for (j, &x) in row.iter().enumerate() {
                if x > row[best] {
                    best = j;
                }
            }
            argmax.push(best);
            out.push(row[best]);
        }
        let value = Tensor::new(Self::reduced_shape(&v), out)?;
        Ok(self.derived(value, Op::MaxLast(self.id, argmax), &[self.id]))
    }

    /// Max-shifted log-sum-exp over the last axis.
    pub fn log_sum_exp(self) -> Result<DiffTensor<'g>> {
        let v = self.value();
        if v.is_empty() {
            return Err(Error::Contract(
                "log_sum_exp of an empty tensor".to_string(),
            ));
        }
        let out = (0..v.rows()).map(|r| log_sum_exp(v.row(r))).collect();
        let value = Tensor::new(Self::reduced_shape(&v), out)?;
        Ok(self.derived(value, Op::LogSumExpLast(self.id), &[self.id]))
    }

    /// Picks `self[rows[k], cols[k]]` for every k, producing a vector.
    pub fn gather(self, rows: &[usize], cols: &[usize]) -> Result<DiffTensor<'g>> {
        let v = self.value();
        if v.rank() != 2 || rows.len() != cols.len() {
            return Err(Error::Dimension {
                op: "gather",
                lhs: v.shape().to_vec(),
                rhs: vec![rows.len(), cols.len()],
            });
        }
        let (n, c) = (v.shape()[0], v.shape()[1]);
        let mut out = Vec::with_capacity(rows.len());
        for (&i, &j) in rows.iter().zip(cols) {
            if i >= n {
                return Err(Error::Index { index: i, bound: n });
            }
            if j >= c {
                return Err(Error::Index { index: j, bound: c });
            }
            out.push(v.at(i, j));
        }
        Ok(self.derived(
            Tensor::vector(out),
            Op::Gather(self.id, rows.to_vec(), cols.to_vec()),
            &[self.id],
        ))
    }

    /// Column `c` of a matrix as a vector.
    pub fn column(self, c: usize) -> Result<DiffTensor<'g>> {
        let n = self.value().rows();
        let rows: Vec<usize> = (0..n).collect();
        self.gather(&rows, &vec![c; n])
    }
}
