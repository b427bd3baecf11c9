//! Tape of matrix operations with reverse-mode differentiation.
//!
//! Nodes are appended in evaluation order, so the tape is topologically
//! sorted by construction. Shape errors while *building* a graph are
//! programming errors and panic; callers validate user-facing dimensions
//! before they reach the tape.

use std::collections::HashMap;
use std::sync::Arc;

use thiserror::Error;

use super::{ParamId, ParamStore, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub(crate) usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Reduction / normalization axis under the matrix view.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    /// Along the row index: a `r × c` input reduces to `1 × c`.
    Rows,
    /// Along the column index: a `r × c` input reduces to `r × 1`.
    Cols,
}

/// Precomputed sparse row mixing: output row `i` is
/// `Σ_k weights[i][k] · table[rows[i][k]]`.
#[derive(Clone, Debug, PartialEq)]
pub struct GatherTaps {
    pub rows: Vec<[usize; 4]>,
    pub weights: Vec<[f64; 4]>,
}

#[derive(Clone, Debug)]
pub enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    MatMul(NodeId, NodeId),
    Broadcast(NodeId),
    Scale(NodeId, f64),
    Offset(NodeId, f64),
    Exp(NodeId),
    Log(NodeId),
    Relu(NodeId),
    Tanh(NodeId),
    Softplus(NodeId),
    Sigmoid(NodeId),
    Softmax(NodeId, Axis),
    Power(NodeId, f64),
    Sum(NodeId),
    SumAxis(NodeId, Axis),
    Mean(NodeId),
    Slice {
        input: NodeId,
        axis: Axis,
        start: usize,
        len: usize,
    },
    Concat(Vec<NodeId>, Axis),
    QuadForm(NodeId, NodeId),
    Transpose(NodeId),
    Gather(NodeId, Arc<GatherTaps>),
}

impl Op {
    fn inputs(&self) -> Vec<NodeId> {
        use Op::*;
        match self {
            Leaf => vec![],
            Add(a, b) | Sub(a, b) | Mul(a, b) | MatMul(a, b) | QuadForm(a, b) => vec![*a, *b],
            Broadcast(a)
            | Scale(a, _)
            | Offset(a, _)
            | Exp(a)
            | Log(a)
            | Relu(a)
            | Tanh(a)
            | Softplus(a)
            | Sigmoid(a)
            | Softmax(a, _)
            | Power(a, _)
            | Sum(a)
            | SumAxis(a, _)
            | Mean(a)
            | Transpose(a)
            | Gather(a, _) => vec![*a],
            Slice { input, .. } => vec![*input],
            Concat(xs, _) => xs.clone(),
        }
    }
}

struct Node {
    op: Op,
    value: Arc<Tensor>,
    needs_grad: bool,
}

#[derive(Debug, Error, PartialEq)]
pub enum AutodiffError {
    #[error("loss node must be scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("node {node} consumes node {input}, which does not precede it")]
    Cycle { node: usize, input: usize },
    #[error("node {0} is not part of this graph")]
    UnknownNode(usize),
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: Vec<(ParamId, NodeId)>,
    param_lookup: HashMap<ParamId, NodeId>,
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

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn op(&self, id: NodeId) -> &Op {
        &self.nodes[id.0].op
    }

    /// Leaf nodes bound to parameters, in insertion order.
    pub fn param_nodes(&self) -> &[(ParamId, NodeId)] {
        &self.params
    }

    fn push(&mut self, op: Op, value: Tensor) -> NodeId {
        let needs_grad = op.inputs().iter().any(|i| self.nodes[i.0].needs_grad);
        self.push_with(op, Arc::new(value), needs_grad)
    }

    fn push_with(&mut self, op: Op, value: Arc<Tensor>, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            op,
            value,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> NodeId {
        self.push_with(Op::Leaf, Arc::new(value), requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.leaf(value, false)
    }

    /// Binds a stored parameter as a differentiable leaf; repeated calls for
    /// the same parameter return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> NodeId {
        if let Some(&n) = self.param_lookup.get(&id) {
            return n;
        }
        let n = self.push_with(Op::Leaf, store.shared(id), true);
        self.params.push((id, n));
        self.param_lookup.insert(id, n);
        n
    }

    /// Binds a parameter as a constant leaf (no gradient flows into it).
    pub fn frozen_param(&mut self, store: &ParamStore, id: ParamId) -> NodeId {
        self.push_with(Op::Leaf, store.shared(id), false)
    }

    fn dims(&self, id: NodeId) -> (usize, usize) {
        self.nodes[id.0].value.dims2()
    }

    // ---- elementwise binary ----------------------------------------------

    fn align(&mut self, a: NodeId, b: NodeId) -> (NodeId, NodeId) {
        let (da, db) = (self.dims(a), self.dims(b));
        if da == db {
            return (a, b);
        }
        let target = (da.0.max(db.0), da.1.max(db.1));
        let a = if da == target {
            a
        } else {
            self.broadcast(a, target.0, target.1)
        };
        let b = if db == target {
            b
        } else {
            self.broadcast(b, target.0, target.1)
        };
        (a, b)
    }

    fn zip(&self, a: NodeId, b: NodeId, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        let (r, c) = ta.dims2();
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::matrix(r, c, data)
    }

    /// `a + b`, broadcasting a row, column or scalar operand.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (a, b) = self.align(a, b);
        let v = self.zip(a, b, |x, y| x + y);
        self.push(Op::Add(a, b), v)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (a, b) = self.align(a, b);
        let v = self.zip(a, b, |x, y| x - y);
        self.push(Op::Sub(a, b), v)
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (a, b) = self.align(a, b);
        let v = self.zip(a, b, |x, y| x * y);
        self.push(Op::Mul(a, b), v)
    }

    /// `a / b` composed as `a · b⁻¹`.
    pub fn div(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let inv = self.power(b, -1.0);
        self.mul(a, inv)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (m, k) = self.dims(a);
        let (k2, n) = self.dims(b);
        assert_eq!(k, k2, "matmul inner dimensions {m}x{k} · {k2}x{n}");
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            false,
            &mut out,
            0.0,
        );
        self.push(Op::MatMul(a, b), Tensor::matrix(m, n, out))
    }

    /// Repeats a `1 × c`, `r × 1` or `1 × 1` tensor up to `rows × cols`.
    pub fn broadcast(&mut self, a: NodeId, rows: usize, cols: usize) -> NodeId {
        let (r, c) = self.dims(a);
        assert!(
            (r == rows || r == 1) && (c == cols || c == 1),
            "cannot broadcast {r}x{c} to {rows}x{cols}"
        );
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            let ri = if r == 1 { 0 } else { i };
            for j in 0..cols {
                let cj = if c == 1 { 0 } else { j };
                out.push(src[ri * c + cj]);
            }
        }
        self.push(Op::Broadcast(a), Tensor::matrix(rows, cols, out))
    }

    // ---- elementwise unary -----------------------------------------------

    fn unary(&mut self, a: NodeId, op: Op, f: impl Fn(f64) -> f64) -> NodeId {
        let v = self.value(a).map(f);
        self.push(op, v)
    }

    pub fn scale(&mut self, a: NodeId, k: f64) -> NodeId {
        self.unary(a, Op::Scale(a, k), |x| k * x)
    }

    pub fn offset(&mut self, a: NodeId, k: f64) -> NodeId {
        self.unary(a, Op::Offset(a, k), |x| x + k)
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Exp(a), f64::exp)
    }

    pub fn log(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Log(a), f64::ln)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Relu(a), |x| x.max(0.0))
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Tanh(a), f64::tanh)
    }

    pub fn softplus(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Softplus(a), softplus)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Sigmoid(a), sigmoid)
    }

    pub fn power(&mut self, a: NodeId, p: f64) -> NodeId {
        self.unary(a, Op::Power(a, p), |x| x.powf(p))
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        self.mul(a, a)
    }

    pub fn softmax(&mut self, a: NodeId, axis: Axis) -> NodeId {
        let t = self.value(a);
        let (r, c) = t.dims2();
        let mut out = t.data().to_vec();
        for_each_lane(r, c, axis, |idx| {
            let m = idx
                .clone()
                .map(|i| out[i])
                .fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for i in idx.clone() {
                out[i] = (out[i] - m).exp();
                z += out[i];
            }
            for i in idx {
                out[i] /= z;
            }
        });
        self.push(Op::Softmax(a, axis), Tensor::matrix(r, c, out))
    }

    // ---- reductions and structure -----------------------------------------

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let s = self.value(a).data().iter().sum();
        self.push(Op::Sum(a), Tensor::scalar(s))
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let t = self.value(a);
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        self.push(Op::Mean(a), Tensor::scalar(s))
    }

    pub fn sum_axis(&mut self, a: NodeId, axis: Axis) -> NodeId {
        let t = self.value(a);
        let (r, c) = t.dims2();
        let d = t.data();
        let out = match axis {
            Axis::Rows => {
                let mut o = vec![0.0; c];
                for i in 0..r {
                    for j in 0..c {
                        o[j] += d[i * c + j];
                    }
                }
                Tensor::matrix(1, c, o)
            }
            Axis::Cols => Tensor::matrix(
                r,
                1,
                (0..r).map(|i| d[i * c..(i + 1) * c].iter().sum()).collect(),
            ),
        };
        self.push(Op::SumAxis(a, axis), out)
    }

    pub fn slice(&mut self, a: NodeId, axis: Axis, start: usize, len: usize) -> NodeId {
        let t = self.value(a);
        let (r, c) = t.dims2();
        let d = t.data();
        let out = match axis {
            Axis::Rows => {
                assert!(
                    start + len <= r,
                    "row slice {start}..{} of {r}",
                    start + len
                );
                Tensor::matrix(len, c, d[start * c..(start + len) * c].to_vec())
            }
            Axis::Cols => {
                assert!(
                    start + len <= c,
                    "column slice {start}..{} of {c}",
                    start + len
                );
                let mut o = Vec::with_capacity(r * len);
                for i in 0..r {
                    o.extend_from_slice(&d[i * c + start..i * c + start + len]);
                }
                Tensor::matrix(r, len, o)
            }
        };
        self.push(
            Op::Slice {
                input: a,
                axis,
                start,
                len,
            },
            out,
        )
    }

    pub fn concat(&mut self, parts: &[NodeId], axis: Axis) -> NodeId {
        assert!(!parts.is_empty(), "concat of nothing");
        let dims: Vec<_> = parts.iter().map(|&p| self.dims(p)).collect();
        let out = match axis {
            Axis::Rows => {
                let c = dims[0].1;
                assert!(
                    dims.iter().all(|d| d.1 == c),
                    "row concat with differing widths {dims:?}"
                );
                let mut o = Vec::new();
                for &p in parts {
                    o.extend_from_slice(self.value(p).data());
                }
                Tensor::matrix(o.len() / c, c, o)
            }
            Axis::Cols => {
                let r = dims[0].0;
                assert!(
                    dims.iter().all(|d| d.0 == r),
                    "column concat with differing heights {dims:?}"
                );
                let total: usize = dims.iter().map(|d| d.1).sum();
                let mut o = Vec::with_capacity(r * total);
                for i in 0..r {
                    for &p in parts {
                        o.extend_from_slice(self.value(p).row_slice(i));
                    }
                }
                Tensor::matrix(r, total, o)
            }
        };
        self.push(Op::Concat(parts.to_vec(), axis), out)
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let t = self.value(a);
        let out = transposed(t);
        self.push(Op::Transpose(a), out)
    }

    /// Row-wise quadratic form: row `i` of the `m × 1` result is `xᵢ A xᵢᵀ`.
    pub fn quad_form(&mut self, x: NodeId, a: NodeId) -> NodeId {
        let (m, k) = self.dims(x);
        assert_eq!(self.dims(a), (k, k), "quad_form needs a {k}x{k} matrix");
        let (xv, av) = (self.value(x).data(), self.value(a).data());
        let out = (0..m)
            .map(|i| {
                let row = &xv[i * k..(i + 1) * k];
                let mut s = 0.0;
                for p in 0..k {
                    for q in 0..k {
                        s += row[p] * av[p * k + q] * row[q];
                    }
                }
                s
            })
            .collect();
        self.push(Op::QuadForm(x, a), Tensor::matrix(m, 1, out))
    }

    /// Weighted four-tap row gather from `table` (see [`GatherTaps`]).
    pub fn gather(&mut self, table: NodeId, taps: Arc<GatherTaps>) -> NodeId {
        let t = self.value(table);
        let (tr, c) = t.dims2();
        let n = taps.rows.len();
        let mut out = vec![0.0; n * c];
        for (i, (rows, ws)) in taps.rows.iter().zip(&taps.weights).enumerate() {
            let dst = &mut out[i * c..(i + 1) * c];
            for (&r, &w) in rows.iter().zip(ws) {
                assert!(r < tr, "gather row {r} of {tr}");
                if w != 0.0 {
                    for (d, s) in dst.iter_mut().zip(t.row_slice(r)) {
                        *d += w * s;
                    }
                }
            }
        }
        self.push(Op::Gather(table, taps), Tensor::matrix(n, c, out))
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn transposed(t: &Tensor) -> Tensor {
    let (r, c) = t.dims2();
    let d = t.data();
    let mut o = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            o[j * r + i] = d[i * c + j];
        }
    }
    Tensor::matrix(c, r, o)
}

/// Calls `f` with the flat indices of each lane along `axis`.
fn for_each_lane(
    r: usize,
    c: usize,
    axis: Axis,
    mut f: impl FnMut(std::iter::StepBy<std::ops::Range<usize>>),
) {
    match axis {
        Axis::Cols => {
            for i in 0..r {
                f((i * c..(i + 1) * c).step_by(1));
            }
        }
        Axis::Rows => {
            for j in 0..c {
                f((j..r * c).step_by(c));
            }
        }
    }
}

/// `c = op(a) · op(b) + beta · c` with row-major storage.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    c: &mut [f64],
    beta: f64,
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    let (rsa, csa) = if a_trans {
        (1, m as isize)
    } else {
        (k as isize, 1)
    };
    let (rsb, csb) = if b_trans {
        (1, k as isize)
    } else {
        (n as isize, 1)
    };
    // SAFETY: the asserted lengths bound every index touched by the given
    // dimensions and strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Per-node gradients produced by [`backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// Gradient for `node`; zeros when the loss does not depend on it.
    pub fn get(&self, node: NodeId) -> Tensor {
        match &self.grads[node.0] {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes[node.0];
                Tensor::zeros(&[r, c])
            }
        }
    }

    pub fn take(&mut self, node: NodeId) -> Tensor {
        self.grads[node.0].take().unwrap_or_else(|| {
            let (r, c) = self.shapes[node.0];
            Tensor::zeros(&[r, c])
        })
    }

    /// Gradients for every parameter bound in `graph`, keyed by parameter.
    pub fn for_params(mut self, graph: &Graph) -> Vec<(ParamId, Tensor)> {
        graph
            .params
            .iter()
            .map(|&(p, n)| (p, self.take(n)))
            .collect()
    }
}

/// Reverse-mode sweep from a scalar `loss`. Every leaf created with
/// `requires_grad` receives a gradient (zero when it does not participate).
pub fn backward(graph: &Graph, loss: NodeId) -> Result<Gradients, AutodiffError> {
    let nodes = &graph.nodes;
    if loss.0 >= nodes.len() {
        return Err(AutodiffError::UnknownNode(loss.0));
    }
    let lv = &nodes[loss.0].value;
    if lv.len() != 1 {
        return Err(AutodiffError::NonScalarLoss(lv.shape().to_vec()));
    }
    for (i, node) in nodes.iter().enumerate() {
        if let Some(bad) = node.op.inputs().into_iter().find(|inp| inp.0 >= i) {
            return Err(AutodiffError::Cycle {
                node: i,
                input: bad.0,
            });
        }
    }

    let mut grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
    if nodes[loss.0].needs_grad {
        grads[loss.0] = Some(Tensor::scalar(1.0));
    }
    for i in (0..=loss.0).rev() {
        let Some(g) = grads[i].take() else { continue };
        let node = &nodes[i];
        if let Op::Leaf = node.op {
            grads[i] = Some(g);
            continue;
        }
        propagate(nodes, &node.op, &node.value, g, &mut grads);
    }
    Ok(Gradients {
        grads,
        shapes: nodes.iter().map(|n| n.value.dims2()).collect(),
    })
}

fn accumulate(nodes: &[Node], grads: &mut [Option<Tensor>], id: NodeId, g: Tensor) {
    if !nodes[id.0].needs_grad {
        return;
    }
    match &mut grads[id.0] {
        Some(acc) => acc.add_assign(&g),
        slot => *slot = Some(g),
    }
}

fn elementwise(g: &Tensor, x: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let (r, c) = g.dims2();
    Tensor::matrix(
        r,
        c,
        g.data()
            .iter()
            .zip(x.data())
            .map(|(&gi, &xi)| f(gi, xi))
            .collect(),
    )
}

fn propagate(nodes: &[Node], op: &Op, out: &Tensor, g: Tensor, grads: &mut [Option<Tensor>]) {
    let val = |id: NodeId| -> &Tensor { &nodes[id.0].value };
    let needs = |id: NodeId| nodes[id.0].needs_grad;
    match op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            if needs(*b) {
                accumulate(nodes, grads, *b, g.clone());
            }
            accumulate(nodes, grads, *a, g);
        }
        Op::Sub(a, b) => {
            if needs(*b) {
                accumulate(nodes, grads, *b, g.map(|v| -v));
            }
            accumulate(nodes, grads, *a, g);
        }
        Op::Mul(a, b) => {
            if needs(*a) {
                accumulate(nodes, grads, *a, elementwise(&g, val(*b), |gi, y| gi * y));
            }
            if needs(*b) {
                accumulate(nodes, grads, *b, elementwise(&g, val(*a), |gi, x| gi * x));
            }
        }
        Op::MatMul(a, b) => {
            let (m, k) = val(*a).dims2();
            let n = val(*b).cols();
            if needs(*a) {
                let mut da = vec![0.0; m * k];
                gemm(m, n, k, g.data(), false, val(*b).data(), true, &mut da, 0.0);
                accumulate(nodes, grads, *a, Tensor::matrix(m, k, da));
            }
            if needs(*b) {
                let mut db = vec![0.0; k * n];
                gemm(k, m, n, val(*a).data(), true, g.data(), false, &mut db, 0.0);
                accumulate(nodes, grads, *b, Tensor::matrix(k, n, db));
            }
        }
        Op::Broadcast(a) => {
            let (r, c) = val(*a).dims2();
            let (gr, gc) = g.dims2();
            let mut o = vec![0.0; r * c];
            for i in 0..gr {
                let ri = if r == 1 { 0 } else { i };
                for j in 0..gc {
                    let cj = if c == 1 { 0 } else { j };
                    o[ri * c + cj] += g.data()[i * gc + j];
                }
            }
            accumulate(nodes, grads, *a, Tensor::matrix(r, c, o));
        }
        Op::Scale(a, k) => accumulate(nodes, grads, *a, g.map(|v| v * k)),
        Op::Offset(a, _) => accumulate(nodes, grads, *a, g),
        Op::Exp(a) => accumulate(nodes, grads, *a, elementwise(&g, out, |gi, y| gi * y)),
        Op::Log(a) => accumulate(nodes, grads, *a, elementwise(&g, val(*a), |gi, x| gi / x)),
        Op::Relu(a) => accumulate(
            nodes,
            grads,
            *a,
            elementwise(&g, val(*a), |gi, x| if x > 0.0 { gi } else { 0.0 }),
        ),
        Op::Tanh(a) => accumulate(
            nodes,
            grads,
            *a,
            elementwise(&g, out, |gi, y| gi * (1.0 - y * y)),
        ),
        Op::Softplus(a) => accumulate(
            nodes,
            grads,
            *a,
            elementwise(&g, val(*a), |gi, x| gi * sigmoid(x)),
        ),
        Op::Sigmoid(a) => accumulate(
            nodes,
            grads,
            *a,
            elementwise(&g, out, |gi, y| gi * y * (1.0 - y)),
        ),
        Op::Power(a, p) => accumulate(
            nodes,
            grads,
            *a,
            elementwise(&g, val(*a), |gi, x| gi * p * x.powf(p - 1.0)),
        ),
        Op::Softmax(a, axis) => {
            let (r, c) = out.dims2();
            let y = out.data();
            let gd = g.data();
            let mut o = vec![0.0; r * c];
            for_each_lane(r, c, *axis, |idx| {
                let dot: f64 = idx.clone().map(|i| gd[i] * y[i]).sum();
                for i in idx {
                    o[i] = y[i] * (gd[i] - dot);
                }
            });
            accumulate(nodes, grads, *a, Tensor::matrix(r, c, o));
        }
        Op::Sum(a) => {
            let (r, c) = val(*a).dims2();
            accumulate(nodes, grads, *a, Tensor::full(&[r, c], g.item()));
        }
        Op::Mean(a) => {
            let (r, c) = val(*a).dims2();
            accumulate(
                nodes,
                grads,
                *a,
                Tensor::full(&[r, c], g.item() / (r * c) as f64),
            );
        }
        Op::SumAxis(a, axis) => {
            let (r, c) = val(*a).dims2();
            let gd = g.data();
            let o = match axis {
                Axis::Rows => (0..r * c).map(|i| gd[i % c]).collect(),
                Axis::Cols => (0..r * c).map(|i| gd[i / c]).collect(),
            };
            accumulate(nodes, grads, *a, Tensor::matrix(r, c, o));
        }
        Op::Slice {
            input,
            axis,
            start,
            len,
        } => {
            let (r, c) = val(*input).dims2();
            let mut o = vec![0.0; r * c];
            let gd = g.data();
            match axis {
                Axis::Rows => o[start * c..(start + len) * c].copy_from_slice(gd),
                Axis::Cols => {
                    for i in 0..r {
                        o[i * c + start..i * c + start + len]
                            .copy_from_slice(&gd[i * len..(i + 1) * len]);
                    }
                }
            }
            accumulate(nodes, grads, *input, Tensor::matrix(r, c, o));
        }
        Op::Concat(parts, axis) => {
            let (gr, gc) = g.dims2();
            let gd = g.data();
            let mut offset = 0;
            for &p in parts {
                let (r, c) = val(p).dims2();
                if needs(p) {
                    let piece = match axis {
                        Axis::Rows => gd[offset * gc..(offset + r) * gc].to_vec(),
                        Axis::Cols => {
                            let mut o = Vec::with_capacity(r * c);
                            for i in 0..gr {
                                o.extend_from_slice(&gd[i * gc + offset..i * gc + offset + c]);
                            }
                            o
                        }
                    };
                    accumulate(nodes, grads, p, Tensor::matrix(r, c, piece));
                }
                offset += match axis {
                    Axis::Rows => r,
                    Axis::Cols => c,
                };
            }
        }
        Op::QuadForm(x, a) => {
            let (m, k) = val(*x).dims2();
            let xv = val(*x).data();
            let av = val(*a).data();
            let gd = g.data();
            if needs(*x) {
                let mut dx = vec![0.0; m * k];
                for i in 0..m {
                    let row = &xv[i * k..(i + 1) * k];
                    for p in 0..k {
                        let mut s = 0.0;
                        for q in 0..k {
                            s += (av[p * k + q] + av[q * k + p]) * row[q];
                        }
                        dx[i * k + p] = gd[i] * s;
                    }
                }
                accumulate(nodes, grads, *x, Tensor::matrix(m, k, dx));
            }
            if needs(*a) {
                let mut da = vec![0.0; k * k];
                for i in 0..m {
                    let row = &xv[i * k..(i + 1) * k];
                    for p in 0..k {
                        for q in 0..k {
                            da[p * k + q] += gd[i] * row[p] * row[q];
                        }
                    }
                }
                accumulate(nodes, grads, *a, Tensor::matrix(k, k, da));
            }
        }
        Op::Transpose(a) => accumulate(nodes, grads, *a, transposed(&g)),
        Op::Gather(table, taps) => {
            let (tr, c) = val(*table).dims2();
            let mut o = vec![0.0; tr * c];
            for (i, (rows, ws)) in taps.rows.iter().zip(&taps.weights).enumerate() {
                let src = g.row_slice(i);
                for (&r, &w) in rows.iter().zip(ws) {
                    if w != 0.0 {
                        for (d, s) in o[r * c..(r + 1) * c].iter_mut().zip(src) {
                            *d += w * s;
                        }
                    }
                }
            }
            accumulate(nodes, grads, *table, Tensor::matrix(tr, c, o));
        }
    }
}
