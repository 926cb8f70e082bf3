//! Reverse-mode differentiation over a linear record of primitive ops.
//!
//! Every op appends one node; `backward` replays the record in exact reverse
//! order, so gradients are bit-reproducible for identical inputs.

use std::cell::{Ref, RefCell};
use std::fmt;

use super::array::Array;
use crate::error::{Error, Result};

pub type NodeId = usize;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
    Min,
    Max,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Broadcast {
    None,
    /// rhs is `[1, n]`, expanded over the leading axis of lhs
    Row,
    /// rhs holds a single value
    Scalar,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum UnaryKind {
    Neg,
    Relu,
    Sigmoid,
    Tanh,
    Gelu,
    Exp,
    Log,
    Abs,
}

enum Op {
    Leaf,
    Binary {
        kind: BinaryKind,
        a: NodeId,
        b: NodeId,
        bcast: Broadcast,
    },
    Unary {
        kind: UnaryKind,
        x: NodeId,
    },
    Scale {
        x: NodeId,
        factor: f64,
    },
    AddScalar {
        x: NodeId,
    },
    Clamp {
        x: NodeId,
        lo: f64,
        hi: f64,
    },
    MatMul {
        a: NodeId,
        b: NodeId,
    },
    /// `a · bᵀ`
    MatMulT {
        a: NodeId,
        b: NodeId,
    },
    Transpose {
        x: NodeId,
    },
    Softmax {
        x: NodeId,
        outer: usize,
        n: usize,
        inner: usize,
        /// slices that fell back to uniform weights
        fallback: Vec<bool>,
    },
    LogSumExpRows {
        x: NodeId,
        keep: Vec<bool>,
    },
    NormalizeRows {
        x: NodeId,
        norms: Vec<f64>,
    },
    Sum {
        x: NodeId,
    },
    Mean {
        x: NodeId,
    },
    SumAxis0 {
        x: NodeId,
    },
    WeightedSum {
        x: NodeId,
        weights: Vec<f64>,
    },
    BceWithLogits {
        x: NodeId,
        targets: Vec<f64>,
        weights: Vec<f64>,
    },
    SliceCols {
        x: NodeId,
        start: usize,
    },
    SliceRows {
        x: NodeId,
        start: usize,
    },
    SelectRows {
        x: NodeId,
        indices: Vec<usize>,
    },
    ConcatRows {
        parts: Vec<NodeId>,
    },
    ConcatCols {
        parts: Vec<NodeId>,
    },
    Reshape {
        x: NodeId,
    },
    Attention {
        q: NodeId,
        k: NodeId,
        v: NodeId,
        heads: usize,
        probs: Vec<f64>,
        fallback: Vec<bool>,
    },
}

struct Node {
    value: Array,
    op: Op,
    requires_grad: bool,
}

/// Gradient tape. Tensors borrow the tape they were recorded on.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    detached: RefCell<Vec<Array>>,
    replay: Option<Vec<Array>>,
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape").field("len", &self.len()).finish()
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Tensor<'t> {
    tape: &'t Tape,
    id: NodeId,
}

impl fmt::Debug for Tensor<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// A tape whose `detach` calls return `values` in order instead of the
    /// live value, so finite differences see stop-gradient points as
    /// constants. Values of the wrong shape are ignored.
    pub fn replaying(values: Vec<Array>) -> Self {
        Self {
            replay: Some(values),
            ..Self::default()
        }
    }

    /// Values produced by `detach` so far, in call order.
    pub fn detached_values(&self) -> Vec<Array> {
        self.detached.borrow().clone()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Trainable leaf.
    pub fn param(&self, value: Array) -> Tensor<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&self, value: Array) -> Tensor<'_> {
        self.push(value, Op::Leaf, false)
    }

    fn push(&self, value: Array, op: Op, requires_grad: bool) -> Tensor<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Tensor {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn needs(&self, ids: &[NodeId]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }

    fn record(&self, value: Array, op: Op, inputs: &[NodeId]) -> Tensor<'_> {
        let rg = self.needs(inputs);
        self.push(value, op, rg)
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Tensor<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.len() != 1 {
            return Err(Error::NonScalarLoss(root.value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(vec![1.0]);
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            backprop(&nodes, id, &g, &mut grads);
        }
        let shapes = nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        let leaf = nodes
            .iter()
            .map(|n| matches!(n.op, Op::Leaf) && n.requires_grad)
            .collect();
        Ok(Gradients {
            grads,
            shapes,
            leaf,
        })
    }
}

/// Gradients produced by [`Tape::backward`]. Leaves that did not contribute to
/// the loss report zeros.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
    leaf: Vec<bool>,
}

impl Gradients {
    pub fn get(&self, t: Tensor<'_>) -> Array {
        self.get_id(t.id)
    }

    pub fn get_id(&self, id: NodeId) -> Array {
        let shape = self.shapes[id].clone();
        match &self.grads[id] {
            Some(g) if self.leaf[id] => Array::from_parts(shape, g.clone()),
            _ => Array::zeros(&shape),
        }
    }

    /// Move the gradient out without cloning.
    pub fn take_id(&mut self, id: NodeId) -> Array {
        let shape = self.shapes[id].clone();
        match self.grads[id].take() {
            Some(g) if self.leaf[id] => Array::from_parts(shape, g),
            _ => Array::zeros(&shape),
        }
    }
}

fn slot<'g>(
    nodes: &[Node],
    grads: &'g mut [Option<Vec<f64>>],
    id: NodeId,
) -> Option<&'g mut Vec<f64>> {
    if !nodes[id].requires_grad {
        return None;
    }
    let n = nodes[id].value.len();
    Some(grads[id].get_or_insert_with(|| vec![0.0; n]))
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

fn bce_term(z: f64, y: f64) -> f64 {
    z.max(0.0) - z * y + (-z.abs()).exp().ln_1p()
}

fn backprop(nodes: &[Node], id: NodeId, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let node = &nodes[id];
    let out = node.value.data();
    match &node.op {
        Op::Leaf => {}
        Op::Binary { kind, a, b, bcast } => {
            let av = nodes[*a].value.data();
            let bv = nodes[*b].value.data();
            let cols = nodes[*a].value.cols();
            let bi = |i: usize| match bcast {
                Broadcast::None => i,
                Broadcast::Row => i % cols,
                Broadcast::Scalar => 0,
            };
            if let Some(ga) = slot(nodes, grads, *a) {
                for i in 0..g.len() {
                    let (x, y) = (av[i], bv[bi(i)]);
                    ga[i] += match kind {
                        BinaryKind::Add | BinaryKind::Sub => g[i],
                        BinaryKind::Mul => g[i] * y,
                        BinaryKind::Div => g[i] / y,
                        BinaryKind::Min => {
                            if x <= y {
                                g[i]
                            } else {
                                0.0
                            }
                        }
                        BinaryKind::Max => {
                            if x >= y {
                                g[i]
                            } else {
                                0.0
                            }
                        }
                    };
                }
            }
            if let Some(gb) = slot(nodes, grads, *b) {
                for i in 0..g.len() {
                    let (x, y) = (av[i], bv[bi(i)]);
                    gb[bi(i)] += match kind {
                        BinaryKind::Add => g[i],
                        BinaryKind::Sub => -g[i],
                        BinaryKind::Mul => g[i] * x,
                        BinaryKind::Div => -g[i] * x / (y * y),
                        BinaryKind::Min => {
                            if x <= y {
                                0.0
                            } else {
                                g[i]
                            }
                        }
                        BinaryKind::Max => {
                            if x >= y {
                                0.0
                            } else {
                                g[i]
                            }
                        }
                    };
                }
            }
        }
        Op::Unary { kind, x } => {
            let xv = nodes[*x].value.data();
            if let Some(gx) = slot(nodes, grads, *x) {
                for i in 0..g.len() {
                    gx[i] += g[i]
                        * match kind {
                            UnaryKind::Neg => -1.0,
                            UnaryKind::Relu => {
                                if xv[i] > 0.0 {
                                    1.0
                                } else {
                                    0.0
                                }
                            }
                            UnaryKind::Sigmoid => out[i] * (1.0 - out[i]),
                            UnaryKind::Tanh => 1.0 - out[i] * out[i],
                            UnaryKind::Gelu => gelu_grad(xv[i]),
                            UnaryKind::Exp => out[i],
                            UnaryKind::Log => 1.0 / xv[i],
                            UnaryKind::Abs => {
                                if xv[i] > 0.0 {
                                    1.0
                                } else if xv[i] < 0.0 {
                                    -1.0
                                } else {
                                    0.0
                                }
                            }
                        };
                }
            }
        }
        Op::Scale { x, factor } => {
            if let Some(gx) = slot(nodes, grads, *x) {
                for (a, b) in gx.iter_mut().zip(g) {
                    *a += b * factor;
                }
            }
        }
        Op::AddScalar { x } | Op::Reshape { x } => {
            if let Some(gx) = slot(nodes, grads, *x) {
                for (a, b) in gx.iter_mut().zip(g) {
                    *a += b;
                }
            }
        }
        Op::Clamp { x, lo, hi } => {
            let xv = nodes[*x].value.data();
            if let Some(gx) = slot(nodes, grads, *x) {
                for i in 0..g.len() {
                    if xv[i] > *lo && xv[i] < *hi {
                        gx[i] += g[i];
                    }
                }
            }
        }
        Op::MatMul { a, b } => {
            let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
            let (m, k, n) = (av.rows(), av.cols(), bv.cols());
            let (ad, bd) = (av.data(), bv.data());
            if let Some(ga) = slot(nodes, grads, *a) {
                // dA = G Bᵀ
                for i in 0..m {
                    let grow = &g[i * n..(i + 1) * n];
                    for p in 0..k {
                        let brow = &bd[p * n..(p + 1) * n];
                        ga[i * k + p] += dot(grow, brow);
                    }
                }
            }
            if let Some(gb) = slot(nodes, grads, *b) {
                // dB = Aᵀ G
                for i in 0..m {
                    let grow = &g[i * n..(i + 1) * n];
                    for p in 0..k {
                        let s = ad[i * k + p];
                        if s != 0.0 {
                            axpy(s, grow, &mut gb[p * n..(p + 1) * n]);
                        }
                    }
                }
            }
        }
        Op::MatMulT { a, b } => {
            let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
            let (m, k, n) = (av.rows(), av.cols(), bv.rows());
            let (ad, bd) = (av.data(), bv.data());
            if let Some(ga) = slot(nodes, grads, *a) {
                // dA = G B
                for i in 0..m {
                    for j in 0..n {
                        let s = g[i * n + j];
                        if s != 0.0 {
                            axpy(s, &bd[j * k..(j + 1) * k], &mut ga[i * k..(i + 1) * k]);
                        }
                    }
                }
            }
            if let Some(gb) = slot(nodes, grads, *b) {
                // dB = Gᵀ A
                for i in 0..m {
                    for j in 0..n {
                        let s = g[i * n + j];
                        if s != 0.0 {
                            axpy(s, &ad[i * k..(i + 1) * k], &mut gb[j * k..(j + 1) * k]);
                        }
                    }
                }
            }
        }
        Op::Transpose { x } => {
            let (r, c) = (nodes[*x].value.rows(), nodes[*x].value.cols());
            if let Some(gx) = slot(nodes, grads, *x) {
                for i in 0..r {
                    for j in 0..c {
                        gx[i * c + j] += g[j * r + i];
                    }
                }
            }
        }
        Op::Softmax {
            x,
            outer,
            n,
            inner,
            fallback,
        } => {
            if let Some(gx) = slot(nodes, grads, *x) {
                for o in 0..*outer {
                    for i in 0..*inner {
                        if fallback[o * inner + i] {
                            continue;
                        }
                        let idx = |k: usize| o * n * inner + k * inner + i;
                        let s: f64 = (0..*n).map(|k| g[idx(k)] * out[idx(k)]).sum();
                        for k in 0..*n {
                            gx[idx(k)] += out[idx(k)] * (g[idx(k)] - s);
                        }
                    }
                }
            }
        }
        Op::LogSumExpRows { x, keep } => {
            let xv = &nodes[*x].value;
            let c = xv.cols();
            let xd = xv.data();
            if let Some(gx) = slot(nodes, grads, *x) {
                for r in 0..xv.rows() {
                    for j in 0..c {
                        let i = r * c + j;
                        if keep[i] {
                            gx[i] += g[r] * (xd[i] - out[r]).exp();
                        }
                    }
                }
            }
        }
        Op::NormalizeRows { x, norms } => {
            let c = nodes[*x].value.cols();
            if let Some(gx) = slot(nodes, grads, *x) {
                for (r, &norm) in norms.iter().enumerate() {
                    let y = &out[r * c..(r + 1) * c];
                    let gy = &g[r * c..(r + 1) * c];
                    let proj = dot(y, gy);
                    for j in 0..c {
                        gx[r * c + j] += (gy[j] - y[j] * proj) / norm;
                    }
                }
            }
        }
        Op::Sum { x } => {
            if let Some(gx) = slot(nodes, grads, *x) {
                gx.iter_mut().for_each(|v| *v += g[0]);
            }
        }
        Op::Mean { x } => {
            if let Some(gx) = slot(nodes, grads, *x) {
                let s = g[0] / gx.len() as f64;
                gx.iter_mut().for_each(|v| *v += s);
            }
        }
        Op::SumAxis0 { x } => {
            let c = nodes[*x].value.cols();
            if let Some(gx) = slot(nodes, grads, *x) {
                for (i, v) in gx.iter_mut().enumerate() {
                    *v += g[i % c];
                }
            }
        }
        Op::WeightedSum { x, weights } => {
            if let Some(gx) = slot(nodes, grads, *x) {
                for (v, w) in gx.iter_mut().zip(weights) {
                    *v += g[0] * w;
                }
            }
        }
        Op::BceWithLogits {
            x,
            targets,
            weights,
        } => {
            let xd = nodes[*x].value.data();
            if let Some(gx) = slot(nodes, grads, *x) {
                let n = xd.len() as f64;
                for i in 0..xd.len() {
                    gx[i] += g[0] * weights[i] * (sigmoid(xd[i]) - targets[i]) / n;
                }
            }
        }
        Op::SliceCols { x, start } => {
            let c = nodes[*x].value.cols();
            let w = node.value.cols();
            if let Some(gx) = slot(nodes, grads, *x) {
                for r in 0..node.value.rows() {
                    for j in 0..w {
                        gx[r * c + start + j] += g[r * w + j];
                    }
                }
            }
        }
        Op::SliceRows { x, start } => {
            let c = nodes[*x].value.cols();
            if let Some(gx) = slot(nodes, grads, *x) {
                let off = start * c;
                for (i, v) in g.iter().enumerate() {
                    gx[off + i] += v;
                }
            }
        }
        Op::SelectRows { x, indices } => {
            let c = nodes[*x].value.cols();
            if let Some(gx) = slot(nodes, grads, *x) {
                for (r, &src) in indices.iter().enumerate() {
                    axpy(1.0, &g[r * c..(r + 1) * c], &mut gx[src * c..(src + 1) * c]);
                }
            }
        }
        Op::ConcatRows { parts } => {
            let mut off = 0;
            for &p in parts {
                let len = nodes[p].value.len();
                if let Some(gp) = slot(nodes, grads, p) {
                    axpy(1.0, &g[off..off + len], gp);
                }
                off += len;
            }
        }
        Op::ConcatCols { parts } => {
            let total = node.value.cols();
            let rows = node.value.rows();
            let mut off = 0;
            for &p in parts {
                let c = nodes[p].value.cols();
                if let Some(gp) = slot(nodes, grads, p) {
                    for r in 0..rows {
                        axpy(
                            1.0,
                            &g[r * total + off..r * total + off + c],
                            &mut gp[r * c..(r + 1) * c],
                        );
                    }
                }
                off += c;
            }
        }
        Op::Attention {
            q,
            k,
            v,
            heads,
            probs,
            fallback,
        } => attention_backward(nodes, grads, g, (*q, *k, *v), *heads, probs, fallback),
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn axpy(s: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += s * xi;
    }
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let s = a[i * k + p];
            if s != 0.0 {
                axpy(s, &b[p * n..(p + 1) * n], orow);
            }
        }
    }
    out
}

/// Softmax over `row` in place, honoring `-inf` entries as hard masks. Returns
/// `true` when every entry was masked and uniform weights were substituted.
fn softmax_in_place(row: &mut [f64]) -> bool {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        log::warn!("fully masked attention row; using uniform weights");
        let u = 1.0 / row.len() as f64;
        row.iter_mut().for_each(|v| *v = u);
        return true;
    }
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = if *v == f64::NEG_INFINITY {
            0.0
        } else {
            (*v - max).exp()
        };
        sum += *v;
    }
    row.iter_mut().for_each(|v| *v /= sum);
    false
}

fn attention_backward(
    nodes: &[Node],
    grads: &mut [Option<Vec<f64>>],
    g: &[f64],
    (q, k, v): (NodeId, NodeId, NodeId),
    heads: usize,
    probs: &[f64],
    fallback: &[bool],
) {
    let (qa, ka, va) = (&nodes[q].value, &nodes[k].value, &nodes[v].value);
    let (m, n) = (qa.rows(), ka.rows());
    let (dq_all, dv_all) = (qa.cols(), va.cols());
    let (dh, dvh) = (dq_all / heads, dv_all / heads);
    let scale = 1.0 / (dh as f64).sqrt();
    let (qd, kd, vd) = (qa.data(), ka.data(), va.data());

    let mut dq = vec![0.0; qd.len()];
    let mut dk = vec![0.0; kd.len()];
    let mut dv = vec![0.0; vd.len()];
    let mut ds = vec![0.0; n];
    for h in 0..heads {
        let p = &probs[h * m * n..(h + 1) * m * n];
        let (qo, vo) = (h * dh, h * dvh);
        for i in 0..m {
            let go = &g[i * dv_all + vo..i * dv_all + vo + dvh];
            let prow = &p[i * n..(i + 1) * n];
            for j in 0..n {
                ds[j] = dot(go, &vd[j * dv_all + vo..j * dv_all + vo + dvh]);
                if prow[j] != 0.0 {
                    axpy(prow[j], go, &mut dv[j * dv_all + vo..j * dv_all + vo + dvh]);
                }
            }
            if fallback[h * m + i] {
                continue;
            }
            let s: f64 = (0..n).map(|j| prow[j] * ds[j]).sum();
            for j in 0..n {
                let d = prow[j] * (ds[j] - s) * scale;
                if d != 0.0 {
                    axpy(
                        d,
                        &kd[j * dq_all + qo..j * dq_all + qo + dh],
                        &mut dq[i * dq_all + qo..i * dq_all + qo + dh],
                    );
                    axpy(
                        d,
                        &qd[i * dq_all + qo..i * dq_all + qo + dh],
                        &mut dk[j * dq_all + qo..j * dq_all + qo + dh],
                    );
                }
            }
        }
    }
    for (id, contrib) in [(q, dq), (k, dk), (v, dv)] {
        if let Some(gx) = slot(nodes, grads, id) {
            axpy(1.0, &contrib, gx);
        }
    }
}

impl<'t> Tensor<'t> {
    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    fn node(&self) -> Ref<'t, Node> {
        Ref::map(self.tape.nodes.borrow(), |n| &n[self.id])
    }

    pub fn shape(&self) -> Vec<usize> {
        self.node().value.shape().to_vec()
    }

    pub fn rows(&self) -> usize {
        self.node().value.rows()
    }

    pub fn cols(&self) -> usize {
        self.node().value.cols()
    }

    pub fn len(&self) -> usize {
        self.node().value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn requires_grad(&self) -> bool {
        self.node().requires_grad
    }

    /// Borrow the recorded value.
    pub fn value(&self) -> Ref<'t, Array> {
        Ref::map(self.tape.nodes.borrow(), |n| &n[self.id].value)
    }

    pub fn to_array(&self) -> Array {
        self.value().clone()
    }

    pub fn item(&self) -> f64 {
        self.value().data()[0]
    }

    fn unary(self, kind: UnaryKind) -> Tensor<'t> {
        let v = {
            let x = self.value();
            match kind {
                UnaryKind::Neg => x.map(|a| -a),
                UnaryKind::Relu => x.map(|a| a.max(0.0)),
                UnaryKind::Sigmoid => x.map(sigmoid),
                UnaryKind::Tanh => x.map(f64::tanh),
                UnaryKind::Gelu => x.map(gelu),
                UnaryKind::Exp => x.map(f64::exp),
                UnaryKind::Log => x.map(f64::ln),
                UnaryKind::Abs => x.map(f64::abs),
            }
        };
        self.tape
            .record(v, Op::Unary { kind, x: self.id }, &[self.id])
    }

    pub fn neg(self) -> Tensor<'t> {
        self.unary(UnaryKind::Neg)
    }

    pub fn relu(self) -> Tensor<'t> {
        self.unary(UnaryKind::Relu)
    }

    pub fn sigmoid(self) -> Tensor<'t> {
        self.unary(UnaryKind::Sigmoid)
    }

    pub fn tanh(self) -> Tensor<'t> {
        self.unary(UnaryKind::Tanh)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(self) -> Tensor<'t> {
        self.unary(UnaryKind::Gelu)
    }

    pub fn exp(self) -> Tensor<'t> {
        self.unary(UnaryKind::Exp)
    }

    /// Natural log; the caller guarantees positive inputs.
    pub fn log(self) -> Tensor<'t> {
        self.unary(UnaryKind::Log)
    }

    pub fn abs(self) -> Tensor<'t> {
        self.unary(UnaryKind::Abs)
    }

    fn binary(self, rhs: Tensor<'t>, kind: BinaryKind, op: &'static str) -> Result<Tensor<'t>> {
        let v = {
            let (a, b) = (self.value(), rhs.value());
            let bcast = if a.shape() == b.shape() {
                Broadcast::None
            } else if b.len() == 1 {
                Broadcast::Scalar
            } else if b.rank() == 2 && b.shape()[0] == 1 && b.cols() == a.cols() {
                Broadcast::Row
            } else {
                return Err(Error::shape(op, a.shape(), b.shape()));
            };
            let (ad, bd, cols) = (a.data(), b.data(), a.cols());
            let f = |x: f64, y: f64| match kind {
                BinaryKind::Add => x + y,
                BinaryKind::Sub => x - y,
                BinaryKind::Mul => x * y,
                BinaryKind::Div => x / y,
                BinaryKind::Min => x.min(y),
                BinaryKind::Max => x.max(y),
            };
            let data = match bcast {
                Broadcast::None => ad.iter().zip(bd).map(|(&x, &y)| f(x, y)).collect(),
                Broadcast::Scalar => ad.iter().map(|&x| f(x, bd[0])).collect(),
                Broadcast::Row => ad
                    .iter()
                    .enumerate()
                    .map(|(i, &x)| f(x, bd[i % cols]))
                    .collect(),
            };
            (Array::from_parts(a.shape().to_vec(), data), bcast)
        };
        let op = Op::Binary {
            kind,
            a: self.id,
            b: rhs.id,
            bcast: v.1,
        };
        Ok(self.tape.record(v.0, op, &[self.id, rhs.id]))
    }

    /// Elementwise sum. `rhs` may also be a `[1, n]` row or a single value,
    /// expanded over the leading axis.
    pub fn add(self, rhs: Tensor<'t>) -> Result<Tensor<'t>> {
        self.binary(rhs, BinaryKind::Add, "add")
    }

    pub fn sub(self, rhs: Tensor<'t>) -> Result<Tensor<'t>> {
        self.binary(rhs, BinaryKind::Sub, "sub")
    }

    pub fn mul(self, rhs: Tensor<'t>) -> Result<Tensor<'t>> {
        self.binary(rhs, BinaryKind::Mul, "mul")
    }

    pub fn div(self, rhs: Tensor<'t>) -> Result<Tensor<'t>> {
        self.binary(rhs, BinaryKind::Div, "div")
    }

    pub fn minimum(self, rhs: Tensor<'t>) -> Result<Tensor<'t>> {
        self.binary(rhs, BinaryKind::Min, "minimum")
    }

    pub fn maximum(self, rhs: Tensor<'t>) -> Result<Tensor<'t>> {
        self.binary(rhs, BinaryKind::Max, "maximum")
    }

    pub fn scale(self, factor: f64) -> Tensor<'t> {
        let v = self.value().map(|a| a * factor);
        self.tape
            .record(v, Op::Scale { x: self.id, factor }, &[self.id])
    }

    pub fn add_scalar(self, c: f64) -> Tensor<'t> {
        let v = self.value().map(|a| a + c);
        self.tape
            .record(v, Op::AddScalar { x: self.id }, &[self.id])
    }

    pub fn clamp(self, lo: f64, hi: f64) -> Tensor<'t> {
        let v = self.value().map(|a| a.clamp(lo, hi));
        self.tape
            .record(v, Op::Clamp { x: self.id, lo, hi }, &[self.id])
    }

    fn check_rank2(&self, op: &'static str) -> Result<()> {
        let s = self.shape();
        if s.len() != 2 {
            return Err(Error::shape(op, &s, &[0, 0]));
        }
        Ok(())
    }

    pub fn matmul(self, rhs: Tensor<'t>) -> Result<Tensor<'t>> {
        self.check_rank2("matmul")?;
        rhs.check_rank2("matmul")?;
        let v = {
            let (a, b) = (self.value(), rhs.value());
            if a.cols() != b.rows() {
                return Err(Error::shape("matmul", a.shape(), b.shape()));
            }
            let (m, k, n) = (a.rows(), a.cols(), b.cols());
            Array::from_parts(vec![m, n], matmul_raw(a.data(), b.data(), m, k, n))
        };
        Ok(self.tape.record(
            v,
            Op::MatMul {
                a: self.id,
                b: rhs.id,
            },
            &[self.id, rhs.id],
        ))
    }

    /// `self · rhsᵀ` without materializing the transpose.
    pub fn matmul_t(self, rhs: Tensor<'t>) -> Result<Tensor<'t>> {
        self.check_rank2("matmul_t")?;
        rhs.check_rank2("matmul_t")?;
        let v = {
            let (a, b) = (self.value(), rhs.value());
            if a.cols() != b.cols() {
                return Err(Error::shape("matmul_t", a.shape(), b.shape()));
            }
            let (m, k, n) = (a.rows(), a.cols(), b.rows());
            let (ad, bd) = (a.data(), b.data());
            let mut out = vec![0.0; m * n];
            for i in 0..m {
                for j in 0..n {
                    out[i * n + j] = dot(&ad[i * k..(i + 1) * k], &bd[j * k..(j + 1) * k]);
                }
            }
            Array::from_parts(vec![m, n], out)
        };
        Ok(self.tape.record(
            v,
            Op::MatMulT {
                a: self.id,
                b: rhs.id,
            },
            &[self.id, rhs.id],
        ))
    }

    pub fn transpose(self) -> Result<Tensor<'t>> {
        self.check_rank2("transpose")?;
        let v = self.value().transpose();
        Ok(self
            .tape
            .record(v, Op::Transpose { x: self.id }, &[self.id]))
    }

    /// Softmax along `axis`.
    pub fn softmax(self, axis: usize) -> Result<Tensor<'t>> {
        self.softmax_impl(axis, None)
    }

    /// Softmax along `axis` where entries with `keep[i] == false` receive
    /// exactly zero weight. A slice with nothing kept falls back to uniform.
    pub fn softmax_masked(self, axis: usize, keep: &[bool]) -> Result<Tensor<'t>> {
        self.softmax_impl(axis, Some(keep))
    }

    fn softmax_impl(self, axis: usize, keep: Option<&[bool]>) -> Result<Tensor<'t>> {
        let (v, outer, n, inner, fallback) = {
            let x = self.value();
            let shape = x.shape();
            if axis >= shape.len() {
                return Err(Error::InvalidAxis {
                    axis,
                    rank: shape.len(),
                });
            }
            if let Some(k) = keep {
                if k.len() != x.len() {
                    return Err(Error::shape("softmax_masked", shape, &[k.len()]));
                }
            }
            let outer: usize = shape[..axis].iter().product();
            let n = shape[axis];
            let inner: usize = shape[axis + 1..].iter().product();
            let xd = x.data();
            let mut out = vec![0.0; xd.len()];
            let mut fallback = vec![false; outer * inner];
            let mut buf = vec![0.0; n];
            for o in 0..outer {
                for i in 0..inner {
                    let idx = |k: usize| o * n * inner + k * inner + i;
                    for (k, b) in buf.iter_mut().enumerate() {
                        let j = idx(k);
                        *b = match keep {
                            Some(m) if !m[j] => f64::NEG_INFINITY,
                            _ => xd[j],
                        };
                    }
                    fallback[o * inner + i] = softmax_in_place(&mut buf);
                    for (k, b) in buf.iter().enumerate() {
                        out[idx(k)] = *b;
                    }
                }
            }
            (
                Array::from_parts(shape.to_vec(), out),
                outer,
                n,
                inner,
                fallback,
            )
        };
        let op = Op::Softmax {
            x: self.id,
            outer,
            n,
            inner,
            fallback,
        };
        Ok(self.tape.record(v, op, &[self.id]))
    }

    /// Per-row `log Σ_{j: keep} exp(x_ij)`, shape `[rows, 1]`.
    pub fn logsumexp_rows(self, keep: &[bool]) -> Result<Tensor<'t>> {
        let v = {
            let x = self.value();
            if keep.len() != x.len() {
                return Err(Error::shape("logsumexp_rows", x.shape(), &[keep.len()]));
            }
            let c = x.cols();
            let mut out = Vec::with_capacity(x.rows());
            for r in 0..x.rows() {
                let row = x.row_slice(r);
                let mask = &keep[r * c..(r + 1) * c];
                let max = row
                    .iter()
                    .zip(mask)
                    .filter(|(_, &k)| k)
                    .map(|(&v, _)| v)
                    .fold(f64::NEG_INFINITY, f64::max);
                if max == f64::NEG_INFINITY {
                    return Err(Error::invalid(format!(
                        "logsumexp row {r} has no kept entries"
                    )));
                }
                let s: f64 = row
                    .iter()
                    .zip(mask)
                    .filter(|(_, &k)| k)
                    .map(|(&v, _)| (v - max).exp())
                    .sum();
                out.push(max + s.ln());
            }
            Array::from_parts(vec![x.rows(), 1], out)
        };
        let op = Op::LogSumExpRows {
            x: self.id,
            keep: keep.to_vec(),
        };
        Ok(self.tape.record(v, op, &[self.id]))
    }

    /// Scale each row to unit L2 norm. Zero rows are an error.
    pub fn l2_normalize_rows(self) -> Result<Tensor<'t>> {
        let (v, norms) = {
            let x = self.value();
            let c = x.cols();
            let mut out = x.data().to_vec();
            let mut norms = Vec::with_capacity(x.rows());
            for r in 0..x.rows() {
                let row = &mut out[r * c..(r + 1) * c];
                let norm = row.iter().map(|a| a * a).sum::<f64>().sqrt();
                if norm == 0.0 || !norm.is_finite() {
                    return Err(Error::ZeroNorm("l2_normalize_rows"));
                }
                row.iter_mut().for_each(|a| *a /= norm);
                norms.push(norm);
            }
            (Array::from_parts(x.shape().to_vec(), out), norms)
        };
        Ok(self
            .tape
            .record(v, Op::NormalizeRows { x: self.id, norms }, &[self.id]))
    }

    pub fn sum(self) -> Tensor<'t> {
        let v = Array::scalar(self.value().data().iter().sum());
        self.tape.record(v, Op::Sum { x: self.id }, &[self.id])
    }

    pub fn mean(self) -> Tensor<'t> {
        let v = {
            let x = self.value();
            Array::scalar(x.data().iter().sum::<f64>() / x.len() as f64)
        };
        self.tape.record(v, Op::Mean { x: self.id }, &[self.id])
    }

    /// Column sums, shape `[1, cols]`.
    pub fn sum_rows(self) -> Tensor<'t> {
        let v = {
            let x = self.value();
            let c = x.cols();
            let mut out = vec![0.0; c];
            for (i, a) in x.data().iter().enumerate() {
                out[i % c] += a;
            }
            Array::from_parts(vec![1, c], out)
        };
        self.tape.record(v, Op::SumAxis0 { x: self.id }, &[self.id])
    }

    /// `Σ_i w_i x_i` as a scalar.
    pub fn weighted_sum(self, weights: &[f64]) -> Result<Tensor<'t>> {
        let v = {
            let x = self.value();
            if weights.len() != x.len() {
                return Err(Error::shape("weighted_sum", x.shape(), &[weights.len()]));
            }
            Array::scalar(dot(x.data(), weights))
        };
        let op = Op::WeightedSum {
            x: self.id,
            weights: weights.to_vec(),
        };
        Ok(self.tape.record(v, op, &[self.id]))
    }

    /// Mean binary cross-entropy of `self` (logits) against `targets`.
    pub fn bce_with_logits(self, targets: &[f64]) -> Result<Tensor<'t>> {
        let w = vec![1.0; targets.len()];
        self.weighted_bce_with_logits(targets, &w)
    }

    /// `(1/n) Σ_i w_i · BCE(x_i, y_i)`, evaluated in the stable
    /// `max(z,0) − z·y + log(1 + e^{−|z|})` form.
    pub fn weighted_bce_with_logits(self, targets: &[f64], weights: &[f64]) -> Result<Tensor<'t>> {
        let v = {
            let x = self.value();
            if targets.len() != x.len() || weights.len() != x.len() {
                return Err(Error::shape("bce_with_logits", x.shape(), &[targets.len()]));
            }
            if let Some(t) = targets.iter().find(|t| !(0.0..=1.0).contains(*t)) {
                return Err(Error::invalid(format!("bce target {t} outside [0, 1]")));
            }
            let s: f64 = x
                .data()
                .iter()
                .zip(targets)
                .zip(weights)
                .map(|((&z, &y), &w)| w * bce_term(z, y))
                .sum();
            Array::scalar(s / x.len() as f64)
        };
        let op = Op::BceWithLogits {
            x: self.id,
            targets: targets.to_vec(),
            weights: weights.to_vec(),
        };
        Ok(self.tape.record(v, op, &[self.id]))
    }

    pub fn slice_cols(self, start: usize, end: usize) -> Result<Tensor<'t>> {
        let v = {
            let x = self.value();
            let c = x.cols();
            if start >= end || end > c || x.rank() != 2 {
                return Err(Error::invalid(format!(
                    "column slice {start}..{end} of {c}"
                )));
            }
            let mut out = Vec::with_capacity(x.rows() * (end - start));
            for r in 0..x.rows() {
                out.extend_from_slice(&x.row_slice(r)[start..end]);
            }
            Array::from_parts(vec![x.rows(), end - start], out)
        };
        Ok(self
            .tape
            .record(v, Op::SliceCols { x: self.id, start }, &[self.id]))
    }

    pub fn slice_rows(self, start: usize, end: usize) -> Result<Tensor<'t>> {
        let v = {
            let x = self.value();
            let r = x.rows();
            if start >= end || end > r || x.rank() != 2 {
                return Err(Error::invalid(format!("row slice {start}..{end} of {r}")));
            }
            let c = x.cols();
            Array::from_parts(vec![end - start, c], x.data()[start * c..end * c].to_vec())
        };
        Ok(self
            .tape
            .record(v, Op::SliceRows { x: self.id, start }, &[self.id]))
    }

    pub fn row(self, i: usize) -> Result<Tensor<'t>> {
        self.slice_rows(i, i + 1)
    }

    /// Gather rows by index (repeats allowed); gradients scatter-add back.
    pub fn select_rows(self, indices: &[usize]) -> Result<Tensor<'t>> {
        let v = {
            let x = self.value();
            if indices.is_empty() {
                return Err(Error::invalid("select_rows with no indices"));
            }
            if let Some(bad) = indices.iter().find(|&&i| i >= x.rows()) {
                return Err(Error::invalid(format!("row {bad} out of {}", x.rows())));
            }
            x.select_rows(indices)
        };
        let op = Op::SelectRows {
            x: self.id,
            indices: indices.to_vec(),
        };
        Ok(self.tape.record(v, op, &[self.id]))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Tensor<'t>> {
        let v = self.to_array().reshape(shape.to_vec())?;
        Ok(self.tape.record(v, Op::Reshape { x: self.id }, &[self.id]))
    }

    /// Copy of the value with no gradient path back to `self`.
    pub fn detach(self) -> Tensor<'t> {
        let live = self.to_array();
        let mut log = self.tape.detached.borrow_mut();
        let v = match self.tape.replay.as_ref().and_then(|r| r.get(log.len())) {
            Some(fixed) if fixed.shape() == live.shape() => fixed.clone(),
            _ => live,
        };
        log.push(v.clone());
        drop(log);
        self.tape.constant(v)
    }

    pub fn concat_rows(parts: &[Tensor<'t>]) -> Result<Tensor<'t>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("concat of nothing"))?;
        let tape = first.tape;
        let v = {
            let c = first.cols();
            let mut data = Vec::new();
            let mut rows = 0;
            for p in parts {
                let pv = p.value();
                if pv.cols() != c || pv.rank() != 2 {
                    return Err(Error::shape("concat_rows", &[rows, c], pv.shape()));
                }
                rows += pv.rows();
                data.extend_from_slice(pv.data());
            }
            Array::from_parts(vec![rows, c], data)
        };
        let ids: Vec<NodeId> = parts.iter().map(|p| p.id).collect();
        Ok(tape.record(v, Op::ConcatRows { parts: ids.clone() }, &ids))
    }

    pub fn concat_cols(parts: &[Tensor<'t>]) -> Result<Tensor<'t>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("concat of nothing"))?;
        let tape = first.tape;
        let v = {
            let rows = first.rows();
            let vals: Vec<Ref<'_, Array>> = parts.iter().map(|p| p.value()).collect();
            for pv in &vals {
                if pv.rows() != rows || pv.rank() != 2 {
                    return Err(Error::shape(
                        "concat_cols",
                        first.value().shape(),
                        pv.shape(),
                    ));
                }
            }
            let total: usize = vals.iter().map(|p| p.cols()).sum();
            let mut data = Vec::with_capacity(rows * total);
            for r in 0..rows {
                for pv in &vals {
                    data.extend_from_slice(pv.row_slice(r));
                }
            }
            Array::from_parts(vec![rows, total], data)
        };
        let ids: Vec<NodeId> = parts.iter().map(|p| p.id).collect();
        Ok(tape.record(v, Op::ConcatCols { parts: ids.clone() }, &ids))
    }
}

/// Scaled dot-product attention split over `heads` column blocks:
/// `softmax(Q_h K_hᵀ / sqrt(d_h) + mask) V_h` per head, heads concatenated.
///
/// `mask` is additive with shape `[q_len, k_len]` or `[1, k_len]`; `-inf`
/// entries receive exactly zero weight. Rows where every key is masked fall
/// back to uniform weights.
pub fn multi_head_attention<'t>(
    q: Tensor<'t>,
    k: Tensor<'t>,
    v: Tensor<'t>,
    heads: usize,
    mask: Option<&Array>,
) -> Result<Tensor<'t>> {
    let tape = q.tape;
    let (out, probs, fallback) = {
        let (qa, ka, va) = (q.value(), k.value(), v.value());
        let (m, n) = (qa.rows(), ka.rows());
        let (dq_all, dv_all) = (qa.cols(), va.cols());
        if heads == 0 || dq_all % heads != 0 || dv_all % heads != 0 {
            return Err(Error::invalid(format!(
                "model dims {dq_all}/{dv_all} not divisible by {heads} heads"
            )));
        }
        if ka.cols() != dq_all {
            return Err(Error::shape("attention keys", qa.shape(), ka.shape()));
        }
        if va.rows() != n {
            return Err(Error::shape("attention values", ka.shape(), va.shape()));
        }
        let mask_row = |i: usize| -> Option<&[f64]> {
            mask.map(|mk| {
                if mk.rows() == 1 {
                    mk.row_slice(0)
                } else {
                    mk.row_slice(i)
                }
            })
        };
        if let Some(mk) = mask {
            if mk.cols() != n || (mk.rows() != 1 && mk.rows() != m) {
                return Err(Error::shape("attention mask", mk.shape(), &[m, n]));
            }
        }
        let (dh, dvh) = (dq_all / heads, dv_all / heads);
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (qa.data(), ka.data(), va.data());
        let mut out = vec![0.0; m * dv_all];
        let mut probs = vec![0.0; heads * m * n];
        let mut fallback = vec![false; heads * m];
        for h in 0..heads {
            let (qo, vo) = (h * dh, h * dvh);
            for i in 0..m {
                let row = &mut probs[h * m * n + i * n..h * m * n + (i + 1) * n];
                let qrow = &qd[i * dq_all + qo..i * dq_all + qo + dh];
                for (j, s) in row.iter_mut().enumerate() {
                    *s = dot(qrow, &kd[j * dq_all + qo..j * dq_all + qo + dh]) * scale;
                    if let Some(mr) = mask_row(i) {
                        *s += mr[j];
                    }
                }
                fallback[h * m + i] = softmax_in_place(row);
                let orow = &mut out[i * dv_all + vo..i * dv_all + vo + dvh];
                for (j, &p) in row.iter().enumerate() {
                    if p != 0.0 {
                        axpy(p, &vd[j * dv_all + vo..j * dv_all + vo + dvh], orow);
                    }
                }
            }
        }
        (Array::from_parts(vec![m, dv_all], out), probs, fallback)
    };
    let op = Op::Attention {
        q: q.id,
        k: k.id,
        v: v.id,
        heads,
        probs,
        fallback,
    };
    Ok(tape.record(out, op, &[q.id, k.id, v.id]))
}
