//! Tape of recorded operations and the reverse sweep over it.
//!
//! Nodes are appended in evaluation order, so creation order is already a
//! topological order; the backward pass walks the tape once from the end and
//! never revisits a node.

use super::tensor::{axis_split, broadcast_strides, for_each_broadcast, Tensor};
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// An operation whose forward pass is computed outside the graph and whose
/// adjoint is supplied by the implementor.
pub trait CustomOp {
    fn name(&self) -> &'static str;

    /// Returns one gradient per input (`None` when the input receives nothing).
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &[f64]) -> Vec<Option<Vec<f64>>>;
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) enum Unary {
    Exp,
    Log,
    Sigmoid,
    Softplus,
    Relu,
    Gelu,
    Sqrt,
    Square,
    Abs,
    Neg,
    Scale(f64),
    Offset(f64),
    MaxConst(f64),
    Clamp(f64, f64),
    ClampSoft(f64, f64),
}

pub(crate) enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Unary(Var, Unary),
    MatMul(Var, Var),
    Transpose(Var),
    SumAxis(Var, usize),
    MeanAxis(Var, usize),
    SumAll(Var),
    MeanAll(Var),
    Softmax { x: Var, axis: usize, temperature: f64 },
    NormalizeL2 { x: Var, axis: usize },
    LayerNorm { x: Var, axis: usize, eps: f64 },
    Concat { parts: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    Broadcast(Var),
    Reshape(Var),
    StopGradient,
    Cross3(Var, Var),
    Sobel(Var),
    AvgPool2(Var),
    Custom(Box<dyn CustomOp>, Vec<Var>),
}

pub(crate) struct Node {
    pub(crate) value: Tensor,
    pub(crate) op: Op,
    /// Whether any trainable leaf feeds this node.
    pub(crate) tracked: bool,
}

/// Reverse-mode differentiation tape.
#[derive(Default)]
pub struct Graph {
    pub(crate) nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to every tracked node.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient as a tensor shaped like the node, zero when nothing flowed.
    pub fn tensor(&self, graph: &Graph, v: Var) -> Tensor {
        let shape = graph.value(v).shape();
        match self.get(v) {
            Some(g) => Tensor::new(shape, g.to_vec()).expect("gradient shape"),
            None => Tensor::zeros(shape),
        }
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

    /// Bytes held by node values; used as a peak-memory proxy.
    pub fn storage_bytes(&self) -> usize {
        self.nodes.iter().map(|n| n.value.len() * 8).sum()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn is_tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Constant leaf; never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub(crate) fn push(&mut self, value: Tensor, op: Op, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    pub(crate) fn tracked_any(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].tracked)
    }

    /// Records an externally computed operation.
    pub fn custom(&mut self, op: Box<dyn CustomOp>, inputs: &[Var], output: Tensor) -> Var {
        let tracked = self.tracked_any(inputs);
        self.push(output, Op::Custom(op, inputs.to_vec()), tracked)
    }

    /// Reverse sweep from a single-element node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::invalid(format!(
                "backward needs a scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if node.tracked {
                self.backward_node(node, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn backward_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out = &node.value;
        match &node.op {
            Op::Leaf | Op::StopGradient => {}
            Op::Add(a, b) => {
                self.reduce_into(*a, out.shape(), g, |x| x, grads);
                self.reduce_into(*b, out.shape(), g, |x| x, grads);
            }
            Op::Sub(a, b) => {
                self.reduce_into(*a, out.shape(), g, |x| x, grads);
                self.reduce_into(*b, out.shape(), g, |x| -x, grads);
            }
            Op::Mul(a, b) | Op::Div(a, b) => {
                let is_div = matches!(node.op, Op::Div(..));
                let (va, vb) = (self.value(*a), self.value(*b));
                let sa = broadcast_strides(va.shape(), out.shape());
                let sb = broadcast_strides(vb.shape(), out.shape());
                let (da, db) = (va.data(), vb.data());
                let ta = self.nodes[a.0].tracked;
                let tb = self.nodes[b.0].tracked;
                let mut ga = if ta { vec![0.0; va.len()] } else { Vec::new() };
                let mut gb = if tb { vec![0.0; vb.len()] } else { Vec::new() };
                for_each_broadcast(out.shape(), &sa, &sb, |o, ia, ib| {
                    if is_div {
                        let inv = 1.0 / db[ib];
                        if ta {
                            ga[ia] += g[o] * inv;
                        }
                        if tb {
                            gb[ib] -= g[o] * da[ia] * inv * inv;
                        }
                    } else {
                        if ta {
                            ga[ia] += g[o] * db[ib];
                        }
                        if tb {
                            gb[ib] += g[o] * da[ia];
                        }
                    }
                });
                if ta {
                    add_into(grads, *a, &ga);
                }
                if tb {
                    add_into(grads, *b, &gb);
                }
            }
            Op::Unary(x, kind) => {
                if !self.nodes[x.0].tracked {
                    return;
                }
                let xv = self.value(*x).data();
                let yv = out.data();
                let dx: Vec<f64> = (0..g.len())
                    .map(|i| g[i] * unary_derivative(*kind, xv[i], yv[i]))
                    .collect();
                add_into(grads, *x, &dx);
            }
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k) = (va.shape()[0], va.shape()[1]);
                let n = vb.shape()[1];
                if self.nodes[a.0].tracked {
                    // dA = G Bᵀ
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, g, (n, 1), vb.data(), (1, n), &mut da);
                    add_into(grads, *a, &da);
                }
                if self.nodes[b.0].tracked {
                    // dB = Aᵀ G
                    let mut db = vec![0.0; k * n];
                    gemm(k, m, n, va.data(), (1, k), g, (n, 1), &mut db);
                    add_into(grads, *b, &db);
                }
            }
            Op::Transpose(x) => {
                let (r, c) = (out.shape()[0], out.shape()[1]);
                let mut dx = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        dx[j * r + i] = g[i * c + j];
                    }
                }
                add_into(grads, *x, &dx);
            }
            Op::SumAxis(x, axis) | Op::MeanAxis(x, axis) => {
                let xs = self.value(*x).shape();
                let (outer, len, inner) = axis_split(xs, *axis);
                let scale = if matches!(node.op, Op::MeanAxis(..)) {
                    1.0 / len as f64
                } else {
                    1.0
                };
                let mut dx = vec![0.0; outer * len * inner];
                for o in 0..outer {
                    for l in 0..len {
                        for i in 0..inner {
                            dx[(o * len + l) * inner + i] = g[o * inner + i] * scale;
                        }
                    }
                }
                add_into(grads, *x, &dx);
            }
            Op::SumAll(x) | Op::MeanAll(x) => {
                let n = self.value(*x).len();
                let s = if matches!(node.op, Op::MeanAll(_)) {
                    g[0] / n as f64
                } else {
                    g[0]
                };
                add_into(grads, *x, &vec![s; n]);
            }
            Op::Softmax { x, axis, temperature } => {
                let (outer, len, inner) = axis_split(out.shape(), *axis);
                let y = out.data();
                let mut dx = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |l: usize| (o * len + l) * inner + i;
                        let dot: f64 = (0..len).map(|l| g[at(l)] * y[at(l)]).sum();
                        for l in 0..len {
                            dx[at(l)] = y[at(l)] * (g[at(l)] - dot) / temperature;
                        }
                    }
                }
                add_into(grads, *x, &dx);
            }
            Op::NormalizeL2 { x, axis } => {
                let xv = self.value(*x).data();
                let (outer, len, inner) = axis_split(out.shape(), *axis);
                let y = out.data();
                let mut dx = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |l: usize| (o * len + l) * inner + i;
                        let norm = (0..len).map(|l| xv[at(l)] * xv[at(l)]).sum::<f64>().sqrt();
                        let dot: f64 = (0..len).map(|l| g[at(l)] * y[at(l)]).sum();
                        for l in 0..len {
                            dx[at(l)] = (g[at(l)] - y[at(l)] * dot) / norm;
                        }
                    }
                }
                add_into(grads, *x, &dx);
            }
            Op::LayerNorm { x, axis, eps } => {
                let xv = self.value(*x).data();
                let (outer, len, inner) = axis_split(out.shape(), *axis);
                let y = out.data();
                let mut dx = vec![0.0; y.len()];
                let nl = len as f64;
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |l: usize| (o * len + l) * inner + i;
                        let mean = (0..len).map(|l| xv[at(l)]).sum::<f64>() / nl;
                        let var = (0..len).map(|l| (xv[at(l)] - mean).powi(2)).sum::<f64>() / nl;
                        let inv_std = 1.0 / (var + eps).sqrt();
                        let mg = (0..len).map(|l| g[at(l)]).sum::<f64>() / nl;
                        let mgy = (0..len).map(|l| g[at(l)] * y[at(l)]).sum::<f64>() / nl;
                        for l in 0..len {
                            dx[at(l)] = inv_std * (g[at(l)] - mg - y[at(l)] * mgy);
                        }
                    }
                }
                add_into(grads, *x, &dx);
            }
            Op::Concat { parts, axis } => {
                let (outer, total, inner) = axis_split(out.shape(), *axis);
                let mut offset = 0;
                for p in parts {
                    let len = self.shape(*p)[*axis];
                    if self.nodes[p.0].tracked {
                        let mut dp = vec![0.0; outer * len * inner];
                        for o in 0..outer {
                            let src = (o * total + offset) * inner;
                            dp[o * len * inner..(o + 1) * len * inner]
                                .copy_from_slice(&g[src..src + len * inner]);
                        }
                        add_into(grads, *p, &dp);
                    }
                    offset += len;
                }
            }
            Op::Slice { x, axis, start } => {
                let xs = self.value(*x).shape();
                let (outer, full, inner) = axis_split(xs, *axis);
                let len = out.shape()[*axis];
                let mut dx = vec![0.0; outer * full * inner];
                for o in 0..outer {
                    let dst = (o * full + start) * inner;
                    dx[dst..dst + len * inner]
                        .copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                add_into(grads, *x, &dx);
            }
            Op::Broadcast(x) => {
                self.reduce_into(*x, out.shape(), g, |v| v, grads);
            }
            Op::Reshape(x) => add_into(grads, *x, g),
            Op::Cross3(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                let mut da = vec![0.0; va.len()];
                let mut db = vec![0.0; vb.len()];
                for r in 0..va.len() / 3 {
                    let s = r * 3;
                    let (x, y, gg) = (&va[s..s + 3], &vb[s..s + 3], &g[s..s + 3]);
                    da[s..s + 3].copy_from_slice(&cross(y, gg));
                    db[s..s + 3].copy_from_slice(&cross(gg, x));
                }
                if self.nodes[a.0].tracked {
                    add_into(grads, *a, &da);
                }
                if self.nodes[b.0].tracked {
                    add_into(grads, *b, &db);
                }
            }
            Op::Sobel(x) => {
                let xs = self.value(*x).shape().to_vec();
                let mut dx = vec![0.0; xs.iter().product()];
                sobel_adjoint(&xs, g, &mut dx);
                add_into(grads, *x, &dx);
            }
            Op::AvgPool2(x) => {
                let xs = self.value(*x).shape().to_vec();
                let (h, w, c) = (xs[0], xs[1], xs[2]);
                let (ho, wo) = (h / 2, w / 2);
                let mut dx = vec![0.0; h * w * c];
                for i in 0..ho {
                    for j in 0..wo {
                        for ch in 0..c {
                            let v = g[(i * wo + j) * c + ch] * 0.25;
                            for (di, dj) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                                dx[((2 * i + di) * w + 2 * j + dj) * c + ch] += v;
                            }
                        }
                    }
                }
                add_into(grads, *x, &dx);
            }
            Op::Custom(op, inputs) => {
                let values: Vec<&Tensor> = inputs.iter().map(|v| self.value(*v)).collect();
                let dins = op.backward(&values, out, g);
                for (v, d) in inputs.iter().zip(dins) {
                    if let Some(d) = d {
                        if self.nodes[v.0].tracked {
                            add_into(grads, *v, &d);
                        }
                    }
                }
            }
        }
    }

    /// Sums a broadcast gradient back onto the operand's shape.
    fn reduce_into(
        &self,
        x: Var,
        out_shape: &[usize],
        g: &[f64],
        f: impl Fn(f64) -> f64,
        grads: &mut [Option<Vec<f64>>],
    ) {
        if !self.nodes[x.0].tracked {
            return;
        }
        let xs = self.value(x).shape();
        if xs == out_shape {
            let d: Vec<f64> = g.iter().map(|&v| f(v)).collect();
            add_into(grads, x, &d);
            return;
        }
        let sx = broadcast_strides(xs, out_shape);
        let zeros = vec![0; out_shape.len()];
        let mut d = vec![0.0; self.value(x).len()];
        for_each_broadcast(out_shape, &sx, &zeros, |o, ix, _| d[ix] += f(g[o]));
        add_into(grads, x, &d);
    }
}

fn add_into(grads: &mut [Option<Vec<f64>>], v: Var, d: &[f64]) {
    match &mut grads[v.0] {
        Some(acc) => {
            for (a, b) in acc.iter_mut().zip(d) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(d.to_vec()),
    }
}

pub(crate) fn cross(a: &[f64], b: &[f64]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

pub(crate) fn unary_forward(kind: Unary, x: f64) -> f64 {
    match kind {
        Unary::Exp => x.exp(),
        Unary::Log => x.ln(),
        Unary::Sigmoid => sigmoid(x),
        Unary::Softplus => softplus(x),
        Unary::Relu => x.max(0.0),
        Unary::Gelu => 0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh()),
        Unary::Sqrt => x.sqrt(),
        Unary::Square => x * x,
        Unary::Abs => x.abs(),
        Unary::Neg => -x,
        Unary::Scale(c) => c * x,
        Unary::Offset(c) => x + c,
        Unary::MaxConst(c) => x.max(c),
        Unary::Clamp(lo, hi) => x.clamp(lo, hi),
        Unary::ClampSoft(lo, hi) => lo + softplus(x - lo) - softplus(x - hi),
    }
}

fn unary_derivative(kind: Unary, x: f64, y: f64) -> f64 {
    match kind {
        Unary::Exp => y,
        Unary::Log => 1.0 / x,
        Unary::Sigmoid => y * (1.0 - y),
        Unary::Softplus => sigmoid(x),
        Unary::Relu => {
            if x > 0.0 {
                1.0
            } else {
                0.0
            }
        }
        Unary::Gelu => {
            let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
            0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
        }
        Unary::Sqrt => 0.5 / y,
        Unary::Square => 2.0 * x,
        Unary::Abs => {
            if x > 0.0 {
                1.0
            } else if x < 0.0 {
                -1.0
            } else {
                0.0
            }
        }
        Unary::Neg => -1.0,
        Unary::Scale(c) => c,
        Unary::Offset(_) => 1.0,
        Unary::MaxConst(c) => {
            if x > c {
                1.0
            } else {
                0.0
            }
        }
        Unary::Clamp(lo, hi) => {
            if x > lo && x < hi {
                1.0
            } else {
                0.0
            }
        }
        Unary::ClampSoft(lo, hi) => sigmoid(x - lo) - sigmoid(x - hi),
    }
}

/// `c = a · b` for row-major `a: m×k`, `b: k×n` given as (row stride, col stride).
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (usize, usize),
    b: &[f64],
    b_strides: (usize, usize),
    c: &mut [f64],
) {
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|v| *v = 0.0);
        return;
    }
    // SAFETY: the strides describe in-bounds views of `a` (m×k), `b` (k×n)
    // and the contiguous row-major `c` (m×n); `beta = 0` overwrites `c`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0 as isize,
            a_strides.1 as isize,
            b.as_ptr(),
            b_strides.0 as isize,
            b_strides.1 as isize,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub(crate) fn sobel_forward(shape: &[usize], x: &[f64]) -> Vec<f64> {
    let (h, w, c) = (shape[0], shape[1], shape[2]);
    let (ho, wo) = (h - 2, w - 2);
    let mut out = vec![0.0; ho * wo * c * 2];
    for i in 0..ho {
        for j in 0..wo {
            for ch in 0..c {
                let at = |ii: usize, jj: usize| x[(ii * w + jj) * c + ch];
                let (ci, cj) = (i + 1, j + 1);
                let gx = (at(ci - 1, cj + 1) + 2.0 * at(ci, cj + 1) + at(ci + 1, cj + 1))
                    - (at(ci - 1, cj - 1) + 2.0 * at(ci, cj - 1) + at(ci + 1, cj - 1));
                let gy = (at(ci + 1, cj - 1) + 2.0 * at(ci + 1, cj) + at(ci + 1, cj + 1))
                    - (at(ci - 1, cj - 1) + 2.0 * at(ci - 1, cj) + at(ci - 1, cj + 1));
                let o = ((i * wo + j) * c + ch) * 2;
                out[o] = gx;
                out[o + 1] = gy;
            }
        }
    }
    out
}

fn sobel_adjoint(shape: &[usize], g: &[f64], dx: &mut [f64]) {
    let (h, w, c) = (shape[0], shape[1], shape[2]);
    let (ho, wo) = (h - 2, w - 2);
    for i in 0..ho {
        for j in 0..wo {
            for ch in 0..c {
                let o = ((i * wo + j) * c + ch) * 2;
                let (gx, gy) = (g[o], g[o + 1]);
                let (ci, cj) = (i + 1, j + 1);
                let mut put = |ii: usize, jj: usize, v: f64| dx[(ii * w + jj) * c + ch] += v;
                put(ci - 1, cj + 1, gx - gy);
                put(ci, cj + 1, 2.0 * gx);
                put(ci + 1, cj + 1, gx + gy);
                put(ci - 1, cj - 1, -gx - gy);
                put(ci, cj - 1, -2.0 * gx);
                put(ci + 1, cj - 1, -gx + gy);
                put(ci + 1, cj, 2.0 * gy);
                put(ci - 1, cj, -2.0 * gy);
            }
        }
    }
}
