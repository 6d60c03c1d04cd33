//! Define-by-run reverse-mode differentiation over dense vectors.
//!
//! A [`Graph`] records every operation applied to its nodes. Parameters are
//! read in place from a borrowed [`ParamStore`]; each parameter appears as a
//! single leaf no matter how often it is used, so gradients of weights shared
//! across time steps accumulate naturally. The graph is rebuilt per utterance.

use super::array::matvec;
use super::{DenseArray, Grads, ParamId, ParamStore};
use crate::error::{contract, Error, Result};

/// Handle to a node recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    Constant,
    Param(ParamId),
    MatVec { w: NodeId, x: NodeId },
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Affine { a: NodeId, scale: f64 },
    Sigmoid(NodeId),
    Tanh(NodeId),
    Relu(NodeId),
    Exp(NodeId),
    Ln(NodeId),
    Recip(NodeId),
    Concat(Vec<NodeId>),
    Slice { a: NodeId, start: usize },
    Sum(NodeId),
    ScaleBy { v: NodeId, s: NodeId },
    LogSoftmax(NodeId),
    Pick { a: NodeId, index: usize },
    Row { m: NodeId, index: usize },
    Clamp { a: NodeId, lo: f64, hi: f64 },
}

struct Node {
    // `None` for parameters, which live in the store.
    value: Option<DenseArray>,
    op: Op,
}

/// Recorded computation over a borrowed parameter store.
pub struct Graph<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    param_nodes: Vec<Option<NodeId>>,
    first_nonfinite: Option<usize>,
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            param_nodes: vec![None; params.len()],
            first_nonfinite: None,
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &DenseArray {
        let node = &self.nodes[id.0];
        match (&node.value, &node.op) {
            (Some(v), _) => v,
            (None, Op::Param(p)) => self.params.get(*p),
            _ => unreachable!("node without value"),
        }
    }

    pub fn data(&self, id: NodeId) -> &[f64] {
        self.value(id).data()
    }

    pub fn dim(&self, id: NodeId) -> usize {
        self.value(id).len()
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        self.value(id).item()
    }

    /// Fails if any recorded value is NaN or infinite.
    pub fn check_finite(&self) -> Result<()> {
        match self.first_nonfinite {
            None => Ok(()),
            Some(i) => Err(Error::Numeric(format!(
                "non-finite value produced by {:?} (node {i})",
                op_name(&self.nodes[i].op)
            ))),
        }
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op) -> NodeId {
        if self.first_nonfinite.is_none() && data.iter().any(|v| !v.is_finite()) {
            self.first_nonfinite = Some(self.nodes.len());
        }
        self.nodes.push(Node {
            value: Some(DenseArray::from_parts_unchecked(shape, data)),
            op,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn push_vec(&mut self, data: Vec<f64>, op: Op) -> NodeId {
        self.push(vec![data.len()], data, op)
    }

    fn unary(&mut self, a: NodeId, f: impl Fn(f64) -> f64, op: Op) -> NodeId {
        let v = self.value(a);
        let shape = v.shape().to_vec();
        let data = v.data().iter().map(|&x| f(x)).collect();
        self.push(shape, data, op)
    }

    fn binary(&mut self, a: NodeId, b: NodeId, f: impl Fn(f64, f64) -> f64, op: Op) -> NodeId {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(
            va.shape(),
            vb.shape(),
            "{} operands differ in shape",
            op_name(&op)
        );
        let shape = va.shape().to_vec();
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        self.push(shape, data, op)
    }

    pub fn constant(&mut self, value: DenseArray) -> NodeId {
        let shape = value.shape().to_vec();
        self.push(shape, value.into_data(), Op::Constant)
    }

    pub fn constant_vec(&mut self, data: Vec<f64>) -> NodeId {
        self.push_vec(data, Op::Constant)
    }

    pub fn constant_scalar(&mut self, v: f64) -> NodeId {
        self.push_vec(vec![v], Op::Constant)
    }

    pub fn zeros(&mut self, n: usize) -> NodeId {
        self.push_vec(vec![0.0; n], Op::Constant)
    }

    /// Leaf for a stored parameter; repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> NodeId {
        if let Some(n) = self.param_nodes[id.0] {
            return n;
        }
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
        });
        let n = NodeId(self.nodes.len() - 1);
        self.param_nodes[id.0] = Some(n);
        n
    }

    /// `W x` for a matrix node `W` of shape `[rows, cols]` and vector `x` of length `cols`.
    pub fn matvec(&mut self, w: NodeId, x: NodeId) -> NodeId {
        let wv = self.value(w);
        assert_eq!(wv.shape().len(), 2, "matvec needs a matrix, got {:?}", wv.shape());
        let (rows, cols) = (wv.shape()[0], wv.shape()[1]);
        let xv = self.value(x);
        assert_eq!(xv.len(), cols, "matvec: matrix {rows}x{cols}, vector {}", xv.len());
        let data = matvec(wv.data(), rows, cols, xv.data());
        self.push_vec(data, Op::MatVec { w, x })
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// `scale * a + shift`, elementwise.
    pub fn affine(&mut self, a: NodeId, scale: f64, shift: f64) -> NodeId {
        self.unary(a, |x| scale * x + shift, Op::Affine { a, scale })
    }

    /// `1 - a`, elementwise.
    pub fn one_minus(&mut self, a: NodeId) -> NodeId {
        self.unary(a, |x| 1.0 - x, Op::Affine { a, scale: -1.0 })
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn ln(&mut self, a: NodeId) -> NodeId {
        self.unary(a, f64::ln, Op::Ln(a))
    }

    pub fn recip(&mut self, a: NodeId) -> NodeId {
        self.unary(a, f64::recip, Op::Recip(a))
    }

    /// Elementwise clamp to `[lo, hi]`; the gradient is zero where clamping is active.
    pub fn clamp(&mut self, a: NodeId, lo: f64, hi: f64) -> NodeId {
        self.unary(a, |x| x.clamp(lo, hi), Op::Clamp { a, lo, hi })
    }

    pub fn concat(&mut self, parts: &[NodeId]) -> NodeId {
        let mut data = Vec::with_capacity(parts.iter().map(|&p| self.dim(p)).sum());
        for &p in parts {
            data.extend_from_slice(self.data(p));
        }
        self.push_vec(data, Op::Concat(parts.to_vec()))
    }

    pub fn slice(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let data = self.data(a)[start..start + len].to_vec();
        self.push_vec(data, Op::Slice { a, start })
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let s = self.data(a).iter().sum();
        self.push_vec(vec![s], Op::Sum(a))
    }

    /// Vector `v` times the one-element node `s`.
    pub fn scale_by(&mut self, v: NodeId, s: NodeId) -> NodeId {
        let k = self.scalar(s);
        let data = self.data(v).iter().map(|x| x * k).collect();
        self.push_vec(data, Op::ScaleBy { v, s })
    }

    pub fn log_softmax(&mut self, a: NodeId) -> NodeId {
        let data = log_softmax(self.data(a));
        self.push_vec(data, Op::LogSoftmax(a))
    }

    /// Entry `index` of `a` as a one-element node.
    pub fn pick(&mut self, a: NodeId, index: usize) -> NodeId {
        let v = self.data(a)[index];
        self.push_vec(vec![v], Op::Pick { a, index })
    }

    /// Row `index` of the matrix node `m`.
    pub fn row(&mut self, m: NodeId, index: usize) -> NodeId {
        let mv = self.value(m);
        assert_eq!(mv.shape().len(), 2, "row lookup needs a matrix");
        let cols = mv.shape()[1];
        let data = mv.data()[index * cols..(index + 1) * cols].to_vec();
        self.push_vec(data, Op::Row { m, index })
    }

    /// Sum of a list of same-shaped nodes, accumulated left to right.
    pub fn add_all(&mut self, parts: &[NodeId]) -> NodeId {
        let mut acc = parts[0];
        for &p in &parts[1..] {
            acc = self.add(acc, p);
        }
        acc
    }

    /// Reverse sweep from a one-element `loss` node.
    pub fn backward(&self, loss: NodeId) -> Result<Grads> {
        contract!(
            self.value(loss).len() == 1,
            "loss must be a scalar, got shape {:?}",
            self.value(loss).shape()
        );
        self.check_finite()?;

        let mut grads = Grads::zeros_like(self.params);
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Constant => {}
                Op::Param(p) => grads.add_into(*p, &g),
                Op::MatVec { w, x } => {
                    let wv = self.value(*w);
                    let cols = wv.shape()[1];
                    let xv = self.data(*x);
                    {
                        let gw = slot(&mut adj, *w, wv.len());
                        for (r, gr) in g.iter().enumerate() {
                            if *gr != 0.0 {
                                for (c, xc) in xv.iter().enumerate() {
                                    gw[r * cols + c] += gr * xc;
                                }
                            }
                        }
                    }
                    let gx = slot(&mut adj, *x, cols);
                    for (r, gr) in g.iter().enumerate() {
                        if *gr != 0.0 {
                            let row = &wv.data()[r * cols..(r + 1) * cols];
                            for (c, wrc) in row.iter().enumerate() {
                                gx[c] += gr * wrc;
                            }
                        }
                    }
                }
                Op::Add(a, b) => {
                    add_to(slot(&mut adj, *a, g.len()), &g, 1.0);
                    add_to(slot(&mut adj, *b, g.len()), &g, 1.0);
                }
                Op::Sub(a, b) => {
                    add_to(slot(&mut adj, *a, g.len()), &g, 1.0);
                    add_to(slot(&mut adj, *b, g.len()), &g, -1.0);
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (self.data(*a), self.data(*b));
                    let ga = slot(&mut adj, *a, g.len());
                    for k in 0..g.len() {
                        ga[k] += g[k] * vb[k];
                    }
                    let gb = slot(&mut adj, *b, g.len());
                    for k in 0..g.len() {
                        gb[k] += g[k] * va[k];
                    }
                }
                Op::Affine { a, scale } => add_to(slot(&mut adj, *a, g.len()), &g, *scale),
                Op::Sigmoid(a) => {
                    let y = self.data(NodeId(i));
                    let ga = slot(&mut adj, *a, g.len());
                    for k in 0..g.len() {
                        ga[k] += g[k] * y[k] * (1.0 - y[k]);
                    }
                }
                Op::Tanh(a) => {
                    let y = self.data(NodeId(i));
                    let ga = slot(&mut adj, *a, g.len());
                    for k in 0..g.len() {
                        ga[k] += g[k] * (1.0 - y[k] * y[k]);
                    }
                }
                Op::Relu(a) => {
                    let x = self.data(*a);
                    let ga = slot(&mut adj, *a, g.len());
                    for k in 0..g.len() {
                        if x[k] > 0.0 {
                            ga[k] += g[k];
                        }
                    }
                }
                Op::Exp(a) => {
                    let y = self.data(NodeId(i));
                    let ga = slot(&mut adj, *a, g.len());
                    for k in 0..g.len() {
                        ga[k] += g[k] * y[k];
                    }
                }
                Op::Ln(a) => {
                    let x = self.data(*a);
                    let ga = slot(&mut adj, *a, g.len());
                    for k in 0..g.len() {
                        ga[k] += g[k] / x[k];
                    }
                }
                Op::Recip(a) => {
                    let y = self.data(NodeId(i));
                    let ga = slot(&mut adj, *a, g.len());
                    for k in 0..g.len() {
                        ga[k] -= g[k] * y[k] * y[k];
                    }
                }
                Op::Clamp { a, lo, hi } => {
                    let x = self.data(*a);
                    let ga = slot(&mut adj, *a, g.len());
                    for k in 0..g.len() {
                        if x[k] >= *lo && x[k] <= *hi {
                            ga[k] += g[k];
                        }
                    }
                }
                Op::Concat(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let n = self.dim(*p);
                        add_to(slot(&mut adj, *p, n), &g[off..off + n], 1.0);
                        off += n;
                    }
                }
                Op::Slice { a, start } => {
                    let n = self.dim(*a);
                    add_to(&mut slot(&mut adj, *a, n)[*start..*start + g.len()], &g, 1.0);
                }
                Op::Sum(a) => {
                    let n = self.dim(*a);
                    for v in slot(&mut adj, *a, n) {
                        *v += g[0];
                    }
                }
                Op::ScaleBy { v, s } => {
                    let k = self.scalar(*s);
                    let vv = self.data(*v);
                    let dot: f64 = g.iter().zip(vv).map(|(a, b)| a * b).sum();
                    add_to(slot(&mut adj, *v, g.len()), &g, k);
                    slot(&mut adj, *s, 1)[0] += dot;
                }
                Op::LogSoftmax(a) => {
                    let y = self.data(NodeId(i));
                    let total: f64 = g.iter().sum();
                    let ga = slot(&mut adj, *a, g.len());
                    for k in 0..g.len() {
                        ga[k] += g[k] - y[k].exp() * total;
                    }
                }
                Op::Pick { a, index } => {
                    let n = self.dim(*a);
                    slot(&mut adj, *a, n)[*index] += g[0];
                }
                Op::Row { m, index } => {
                    let mv = self.value(*m);
                    let cols = mv.shape()[1];
                    let gm = slot(&mut adj, *m, mv.len());
                    add_to(&mut gm[index * cols..(index + 1) * cols], &g, 1.0);
                }
            }
        }
        Ok(grads)
    }
}

fn slot(adj: &mut [Option<Vec<f64>>], id: NodeId, n: usize) -> &mut Vec<f64> {
    adj[id.0].get_or_insert_with(|| vec![0.0; n])
}

fn add_to(dst: &mut [f64], src: &[f64], k: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += k * s;
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn log_softmax(x: &[f64]) -> Vec<f64> {
    let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + x.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    x.iter().map(|v| v - lse).collect()
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Constant => "constant",
        Op::Param(_) => "param",
        Op::MatVec { .. } => "matvec",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::Affine { .. } => "affine",
        Op::Sigmoid(_) => "sigmoid",
        Op::Tanh(_) => "tanh",
        Op::Relu(_) => "relu",
        Op::Exp(_) => "exp",
        Op::Ln(_) => "ln",
        Op::Recip(_) => "recip",
        Op::Concat(_) => "concat",
        Op::Slice { .. } => "slice",
        Op::Sum(_) => "sum",
        Op::ScaleBy { .. } => "scale_by",
        Op::LogSoftmax(_) => "log_softmax",
        Op::Pick { .. } => "pick",
        Op::Row { .. } => "row",
        Op::Clamp { .. } => "clamp",
    }
}
