use std::cell::{Ref, RefCell};
use std::ops::{Add, Div, Mul, Neg, Sub};

use ndarray::linalg::general_mat_mul;
use ndarray::{Array3, ArrayView2, Axis, Ix2, Ix3, IxDyn, Slice};

use crate::Tensor;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

#[derive(Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Neg(usize),
    Scale(usize, f64),
    Shift(usize),
    Exp(usize),
    Log(usize),
    Sqrt(usize),
    Square(usize),
    Tanh(usize),
    Sigmoid(usize),
    Silu(usize),
    Gelu {
        a: usize,
        tanh: Tensor,
    },
    Relu(usize),
    Softplus(usize),
    MatMul(usize, usize),
    Bmm {
        a: usize,
        b: usize,
        ta: bool,
        tb: bool,
    },
    Sum(usize),
    SumAxis {
        a: usize,
        axis: usize,
        keep: bool,
    },
    Reshape(usize),
    Permute(usize, Vec<usize>),
    Softmax(usize),
    LogSoftmax(usize),
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Tensor,
        inv_std: Tensor,
    },
    Slice {
        a: usize,
        axis: usize,
        start: usize,
    },
    Concat {
        parts: Vec<usize>,
        axis: usize,
    },
}

impl Op {
    fn parents(&self) -> Vec<usize> {
        use Op::*;
        match self {
            Leaf => vec![],
            Add(a, b) | Sub(a, b) | Mul(a, b) | Div(a, b) | MatMul(a, b) => vec![*a, *b],
            Bmm { a, b, .. } => vec![*a, *b],
            Neg(a)
            | Scale(a, _)
            | Shift(a)
            | Exp(a)
            | Log(a)
            | Sqrt(a)
            | Square(a)
            | Tanh(a)
            | Sigmoid(a)
            | Silu(a)
            | Gelu { a, .. }
            | Relu(a)
            | Softplus(a)
            | Sum(a)
            | Reshape(a)
            | Permute(a, _)
            | Softmax(a)
            | LogSoftmax(a) => vec![*a],
            SumAxis { a, .. } | Slice { a, .. } => vec![*a],
            LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Concat { parts, .. } => parts.clone(),
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// A tape of tensor operations.
///
/// Every operation on a [`Var`] appends a node. When recording is disabled
/// (see [`Graph::inference`]) values are still computed but no backward
/// information is kept.
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
    record: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            record: true,
        }
    }

    /// A graph that never records gradients.
    pub fn inference() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            record: false,
        }
    }

    pub fn is_recording(&self) -> bool {
        self.record
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A differentiable leaf.
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, self.record)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, false)
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.constant(ndarray::arr0(value).into_dyn())
    }

    fn leaf(&self, value: Tensor, requires_grad: bool) -> Var<'_> {
        let value = standard(value);
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    fn push(&self, value: Tensor, op: Op) -> Var<'_> {
        let value = standard(value);
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = self.record && op.parents().iter().any(|&p| nodes[p].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    fn value(&self, id: usize) -> Ref<'_, Tensor> {
        Ref::map(self.nodes.borrow(), |n| &n[id].value)
    }

    /// Reverse-mode sweep from a scalar `loss`.
    ///
    /// Gradients are retained for leaves only.
    pub fn backward(&self, loss: Var<'_>) -> Gradients {
        assert!(std::ptr::eq(loss.graph, self), "loss belongs to another graph");
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[loss.id].value.len(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
        if !nodes[loss.id].requires_grad {
            return Gradients { grads };
        }
        grads[loss.id] = Some(Tensor::ones(nodes[loss.id].value.raw_dim()));

        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            backprop_node(&nodes, id, &g, &mut grads);
        }
        Gradients { grads }
    }
}

/// Leaf gradients produced by [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn wrt(&self, var: Var<'_>) -> Option<&Tensor> {
        self.grads.get(var.id).and_then(|g| g.as_ref())
    }

    /// Gradient of `var`, or zeros of its shape when it did not influence the loss.
    pub fn wrt_or_zeros(&self, var: Var<'_>) -> Tensor {
        match self.wrt(var) {
            Some(g) => g.clone(),
            None => Tensor::zeros(var.value().raw_dim()),
        }
    }
}

fn standard(t: Tensor) -> Tensor {
    if t.is_standard_layout() {
        t
    } else {
        t.as_standard_layout().into_owned()
    }
}

fn accumulate(nodes: &[Node], grads: &mut [Option<Tensor>], id: usize, contrib: Tensor) {
    if !nodes[id].requires_grad {
        return;
    }
    match &mut grads[id] {
        Some(existing) => *existing += &contrib,
        slot @ None => *slot = Some(standard(contrib)),
    }
}

/// Reduce a broadcast gradient back onto `shape`.
pub(crate) fn sum_to_shape(grad: Tensor, shape: &[usize]) -> Tensor {
    let mut g = grad;
    while g.ndim() > shape.len() {
        g = g.sum_axis(Axis(0));
    }
    for (axis, &s) in shape.iter().enumerate() {
        if s == 1 && g.shape()[axis] != 1 {
            g = g.sum_axis(Axis(axis)).insert_axis(Axis(axis));
        }
    }
    g
}

fn as_matrix(t: &Tensor) -> ArrayView2<'_, f64> {
    let k = *t.shape().last().expect("matrix operand needs rank >= 1");
    let m = t.len() / k.max(1);
    t.view().into_shape_with_order((m, k)).expect("standard layout")
}

fn as_batch(t: &Tensor) -> ndarray::ArrayView3<'_, f64> {
    t.view()
        .into_dimensionality::<Ix3>()
        .expect("bmm operand must be rank 3")
}

/// `op(a) @ op(b)` for each batch element, where `op` optionally transposes.
pub(crate) fn bmm_raw(a: &Tensor, b: &Tensor, ta: bool, tb: bool) -> Tensor {
    let a3 = as_batch(a);
    let b3 = as_batch(b);
    assert_eq!(a3.shape()[0], b3.shape()[0], "bmm batch mismatch");
    let (m, ka) = if ta {
        (a3.shape()[2], a3.shape()[1])
    } else {
        (a3.shape()[1], a3.shape()[2])
    };
    let (kb, n) = if tb {
        (b3.shape()[2], b3.shape()[1])
    } else {
        (b3.shape()[1], b3.shape()[2])
    };
    assert_eq!(ka, kb, "bmm inner dimension mismatch");
    let mut out = Array3::<f64>::zeros((a3.shape()[0], m, n));
    for ((ai, bi), mut oi) in a3.outer_iter().zip(b3.outer_iter()).zip(out.outer_iter_mut()) {
        let ai = if ta { ai.reversed_axes() } else { ai };
        let bi = if tb { bi.reversed_axes() } else { bi };
        general_mat_mul(1.0, &ai, &bi, 0.0, &mut oi);
    }
    out.into_dyn()
}

/// Applies `f` to each contiguous row along the last axis.
fn map_rows(x: &Tensor, f: impl Fn(&mut [f64])) -> Tensor {
    let mut out = standard(x.clone());
    let n = *out.shape().last().expect("softmax needs rank >= 1");
    if n > 0 {
        let data = out.as_slice_mut().expect("standard layout");
        data.chunks_mut(n).for_each(f);
    }
    out
}

fn softmax_last(x: &Tensor) -> Tensor {
    map_rows(x, |row| {
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let mut s = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            s += *v;
        }
        row.iter_mut().for_each(|v| *v /= s);
    })
}

fn log_softmax_last(x: &Tensor) -> Tensor {
    map_rows(x, |row| {
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
        row.iter_mut().for_each(|v| *v -= lse);
    })
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn gelu_inner(x: f64) -> f64 {
    GELU_C * (x + GELU_K * x * x * x)
}

/// Derivative of GELU at `x` given `t = tanh(gelu_inner(x))`.
fn gelu_grad(x: f64, t: f64) -> f64 {
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
}

fn backprop_node(nodes: &[Node], id: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
    let out = &nodes[id].value;
    let val = |i: usize| &nodes[i].value;
    match &nodes[id].op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            accumulate(nodes, grads, *a, sum_to_shape(g.clone(), val(*a).shape()));
            accumulate(nodes, grads, *b, sum_to_shape(g.clone(), val(*b).shape()));
        }
        Op::Sub(a, b) => {
            accumulate(nodes, grads, *a, sum_to_shape(g.clone(), val(*a).shape()));
            accumulate(nodes, grads, *b, sum_to_shape(-g, val(*b).shape()));
        }
        Op::Mul(a, b) => {
            if nodes[*a].requires_grad {
                accumulate(nodes, grads, *a, sum_to_shape(g * val(*b), val(*a).shape()));
            }
            if nodes[*b].requires_grad {
                accumulate(nodes, grads, *b, sum_to_shape(g * val(*a), val(*b).shape()));
            }
        }
        Op::Div(a, b) => {
            if nodes[*a].requires_grad {
                accumulate(nodes, grads, *a, sum_to_shape(g / val(*b), val(*a).shape()));
            }
            if nodes[*b].requires_grad {
                let gb = -(g * out) / val(*b);
                accumulate(nodes, grads, *b, sum_to_shape(gb, val(*b).shape()));
            }
        }
        Op::Neg(a) => accumulate(nodes, grads, *a, -g),
        Op::Scale(a, c) => accumulate(nodes, grads, *a, g * *c),
        Op::Shift(a) => accumulate(nodes, grads, *a, g.clone()),
        Op::Exp(a) => accumulate(nodes, grads, *a, g * out),
        Op::Log(a) => accumulate(nodes, grads, *a, g / val(*a)),
        Op::Sqrt(a) => {
            let mut d = g.clone();
            d.zip_mut_with(out, |d, &y| *d *= 0.5 / y);
            accumulate(nodes, grads, *a, d)
        }
        Op::Square(a) => {
            let mut d = g.clone();
            d.zip_mut_with(val(*a), |d, &x| *d *= 2.0 * x);
            accumulate(nodes, grads, *a, d)
        }
        Op::Tanh(a) => {
            let mut d = g.clone();
            d.zip_mut_with(out, |d, &y| *d *= 1.0 - y * y);
            accumulate(nodes, grads, *a, d)
        }
        Op::Sigmoid(a) => {
            let mut d = g.clone();
            d.zip_mut_with(out, |d, &y| *d *= y * (1.0 - y));
            accumulate(nodes, grads, *a, d)
        }
        Op::Silu(a) => {
            let mut d = g.clone();
            d.zip_mut_with(val(*a), |d, &x| {
                let s = sigmoid(x);
                *d *= s + x * s * (1.0 - s)
            });
            accumulate(nodes, grads, *a, d)
        }
        Op::Gelu { a, tanh } => {
            let mut d = g.clone();
            ndarray::Zip::from(&mut d)
                .and(val(*a))
                .and(tanh)
                .for_each(|d, &x, &t| *d *= gelu_grad(x, t));
            accumulate(nodes, grads, *a, d)
        }
        Op::Relu(a) => {
            let mut d = g.clone();
            d.zip_mut_with(val(*a), |d, &x| {
                if x <= 0.0 {
                    *d = 0.0
                }
            });
            accumulate(nodes, grads, *a, d)
        }
        Op::Softplus(a) => {
            let mut d = g.clone();
            d.zip_mut_with(val(*a), |d, &x| *d *= sigmoid(x));
            accumulate(nodes, grads, *a, d)
        }
        Op::MatMul(a, w) => {
            let av = val(*a);
            let wv = val(*w).view().into_dimensionality::<Ix2>().unwrap();
            let g2 = as_matrix(g);
            if nodes[*a].requires_grad {
                let da = g2.dot(&wv.t());
                let da = da.into_dyn().into_shape_with_order(av.raw_dim()).unwrap();
                accumulate(nodes, grads, *a, da);
            }
            if nodes[*w].requires_grad {
                let dw = as_matrix(av).t().dot(&g2);
                accumulate(nodes, grads, *w, dw.into_dyn());
            }
        }
        Op::Bmm { a, b, ta, tb } => {
            let (av, bv) = (val(*a), val(*b));
            if nodes[*a].requires_grad {
                let da = if !*ta {
                    bmm_raw(g, bv, false, !*tb)
                } else {
                    bmm_raw(bv, g, *tb, true)
                };
                accumulate(nodes, grads, *a, da);
            }
            if nodes[*b].requires_grad {
                let db = if !*tb {
                    bmm_raw(av, g, !*ta, false)
                } else {
                    bmm_raw(g, av, true, *ta)
                };
                accumulate(nodes, grads, *b, db);
            }
        }
        Op::Sum(a) => {
            let s = g.iter().next().copied().unwrap_or(0.0);
            accumulate(nodes, grads, *a, Tensor::from_elem(val(*a).raw_dim(), s));
        }
        Op::SumAxis { a, axis, keep } => {
            let gk = if *keep {
                g.clone()
            } else {
                g.clone().insert_axis(Axis(*axis))
            };
            let shape = val(*a).raw_dim();
            let full = gk.broadcast(shape).expect("sum_axis broadcast").to_owned();
            accumulate(nodes, grads, *a, full);
        }
        Op::Reshape(a) => {
            let d = g
                .clone()
                .into_shape_with_order(val(*a).raw_dim())
                .expect("reshape grad");
            accumulate(nodes, grads, *a, d)
        }
        Op::Permute(a, perm) => {
            let mut inv = vec![0; perm.len()];
            for (i, &p) in perm.iter().enumerate() {
                inv[p] = i;
            }
            let d = g.view().permuted_axes(IxDyn(&inv)).as_standard_layout().into_owned();
            accumulate(nodes, grads, *a, d)
        }
        Op::Softmax(a) => {
            let last = Axis(out.ndim() - 1);
            let dot = (g * out).sum_axis(last).insert_axis(last);
            let d = out * &(g - &dot);
            accumulate(nodes, grads, *a, d)
        }
        Op::LogSoftmax(a) => {
            let last = Axis(out.ndim() - 1);
            let sm = out.mapv(f64::exp);
            let gs = g.sum_axis(last).insert_axis(last);
            let d = g - &(sm * &gs);
            accumulate(nodes, grads, *a, d)
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
        } => {
            let last = Axis(xhat.ndim() - 1);
            let d = xhat.shape()[xhat.ndim() - 1];
            let gv = val(*gamma);
            if nodes[*x].requires_grad {
                let dxhat = g * gv;
                let mean_d = dxhat.sum_axis(last).insert_axis(last) / d as f64;
                let mean_dx = (&dxhat * xhat).sum_axis(last).insert_axis(last) / d as f64;
                let dx = (&dxhat - &mean_d - &(xhat * &mean_dx)) * inv_std;
                accumulate(nodes, grads, *x, dx);
            }
            if nodes[*gamma].requires_grad {
                let dg = sum_to_shape(g * xhat, gv.shape());
                accumulate(nodes, grads, *gamma, dg);
            }
            if nodes[*beta].requires_grad {
                let db = sum_to_shape(g.clone(), val(*beta).shape());
                accumulate(nodes, grads, *beta, db);
            }
        }
        Op::Slice { a, axis, start } => {
            let mut d = Tensor::zeros(val(*a).raw_dim());
            let len = g.shape()[*axis];
            d.slice_axis_mut(Axis(*axis), Slice::from(*start..*start + len))
                .assign(g);
            accumulate(nodes, grads, *a, d)
        }
        Op::Concat { parts, axis } => {
            let mut start = 0;
            for &p in parts {
                let len = val(p).shape()[*axis];
                let piece = g.slice_axis(Axis(*axis), Slice::from(start..start + len)).to_owned();
                accumulate(nodes, grads, p, piece);
                start += len;
            }
        }
    }
}

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g> {
    graph: &'g Graph,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

impl<'g> Var<'g> {
    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn value(&self) -> Ref<'g, Tensor> {
        self.graph.value(self.id)
    }

    pub fn to_tensor(&self) -> Tensor {
        self.value().clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    /// The value of a single-element tensor.
    pub fn item(&self) -> f64 {
        let v = self.value();
        assert_eq!(v.len(), 1, "item() on a tensor with {} elements", v.len());
        *v.iter().next().unwrap()
    }

    fn same_graph(&self, other: &Var<'g>) {
        assert!(
            std::ptr::eq(self.graph, other.graph),
            "operands belong to different graphs"
        );
    }

    fn unary(self, f: impl Fn(f64) -> f64, op: Op) -> Var<'g> {
        let v = self.value().mapv(f);
        self.graph.push(v, op)
    }

    pub fn scale(self, c: f64) -> Var<'g> {
        self.unary(|x| x * c, Op::Scale(self.id, c))
    }

    pub fn shift(self, c: f64) -> Var<'g> {
        self.unary(|x| x + c, Op::Shift(self.id))
    }

    pub fn exp(self) -> Var<'g> {
        self.unary(f64::exp, Op::Exp(self.id))
    }

    pub fn ln(self) -> Var<'g> {
        self.unary(f64::ln, Op::Log(self.id))
    }

    pub fn sqrt(self) -> Var<'g> {
        self.unary(f64::sqrt, Op::Sqrt(self.id))
    }

    pub fn square(self) -> Var<'g> {
        self.unary(|x| x * x, Op::Square(self.id))
    }

    pub fn tanh(self) -> Var<'g> {
        self.unary(f64::tanh, Op::Tanh(self.id))
    }

    pub fn sigmoid(self) -> Var<'g> {
        self.unary(sigmoid, Op::Sigmoid(self.id))
    }

    pub fn silu(self) -> Var<'g> {
        self.unary(|x| x * sigmoid(x), Op::Silu(self.id))
    }

    /// Tanh approximation of GELU.
    pub fn gelu(self) -> Var<'g> {
        let (v, tanh) = {
            let x = self.value();
            let tanh = x.mapv(|x| gelu_inner(x).tanh());
            let mut v = x.clone();
            v.zip_mut_with(&tanh, |x, &t| *x *= 0.5 * (1.0 + t));
            (v, tanh)
        };
        self.graph.push(v, Op::Gelu { a: self.id, tanh })
    }

    pub fn relu(self) -> Var<'g> {
        self.unary(|x| x.max(0.0), Op::Relu(self.id))
    }

    pub fn softplus(self) -> Var<'g> {
        self.unary(softplus, Op::Softplus(self.id))
    }

    /// `self[..., k] @ w[k, n] -> [..., n]`.
    pub fn matmul(self, w: Var<'g>) -> Var<'g> {
        self.same_graph(&w);
        let v = {
            let a = self.value();
            let wv = w.value();
            let w2 = wv
                .view()
                .into_dimensionality::<Ix2>()
                .expect("matmul weight must be rank 2");
            let out = as_matrix(&a).dot(&w2);
            let mut shape = a.shape().to_vec();
            *shape.last_mut().unwrap() = w2.shape()[1];
            out.into_dyn().into_shape_with_order(IxDyn(&shape)).unwrap()
        };
        self.graph.push(v, Op::MatMul(self.id, w.id))
    }

    /// Batched matrix product over rank-3 tensors with optional transposes.
    pub fn bmm(self, other: Var<'g>, ta: bool, tb: bool) -> Var<'g> {
        self.same_graph(&other);
        let v = bmm_raw(&self.value(), &other.value(), ta, tb);
        self.graph.push(
            v,
            Op::Bmm {
                a: self.id,
                b: other.id,
                ta,
                tb,
            },
        )
    }

    pub fn sum(self) -> Var<'g> {
        let s = self.value().sum();
        self.graph.push(ndarray::arr0(s).into_dyn(), Op::Sum(self.id))
    }

    pub fn mean(self) -> Var<'g> {
        let n = self.value().len() as f64;
        self.sum().scale(1.0 / n)
    }

    pub fn sum_axis(self, axis: usize, keep: bool) -> Var<'g> {
        let mut v = self.value().sum_axis(Axis(axis));
        if keep {
            v = v.insert_axis(Axis(axis));
        }
        self.graph.push(v, Op::SumAxis { a: self.id, axis, keep })
    }

    pub fn mean_axis(self, axis: usize, keep: bool) -> Var<'g> {
        let n = self.value().shape()[axis] as f64;
        self.sum_axis(axis, keep).scale(1.0 / n)
    }

    pub fn reshape(self, shape: &[usize]) -> Var<'g> {
        let v = self
            .value()
            .clone()
            .into_shape_with_order(IxDyn(shape))
            .unwrap_or_else(|e| panic!("cannot reshape {:?} to {:?}: {e}", self.shape(), shape));
        self.graph.push(v, Op::Reshape(self.id))
    }

    pub fn permute(self, perm: &[usize]) -> Var<'g> {
        let v = self
            .value()
            .view()
            .permuted_axes(IxDyn(perm))
            .as_standard_layout()
            .into_owned();
        self.graph.push(v, Op::Permute(self.id, perm.to_vec()))
    }

    /// Swap the last two axes.
    pub fn transpose_last(self) -> Var<'g> {
        let n = self.value().ndim();
        let mut perm: Vec<usize> = (0..n).collect();
        perm.swap(n - 1, n - 2);
        self.permute(&perm)
    }

    pub fn softmax(self) -> Var<'g> {
        let v = softmax_last(&self.value());
        self.graph.push(v, Op::Softmax(self.id))
    }

    pub fn log_softmax(self) -> Var<'g> {
        let v = log_softmax_last(&self.value());
        self.graph.push(v, Op::LogSoftmax(self.id))
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(self, gamma: Var<'g>, beta: Var<'g>, eps: f64) -> Var<'g> {
        self.same_graph(&gamma);
        self.same_graph(&beta);
        let (xhat, inv_std, y) = {
            let x = self.value();
            let last = Axis(x.ndim() - 1);
            let mean = x.mean_axis(last).unwrap().insert_axis(last);
            let centered = &*x - &mean;
            let var = centered.mapv(|v| v * v).mean_axis(last).unwrap().insert_axis(last);
            let inv_std = var.mapv(|v| 1.0 / (v + eps).sqrt());
            let xhat = centered * &inv_std;
            let y = &xhat * &*gamma.value() + &*beta.value();
            (xhat, inv_std, y)
        };
        self.graph.push(
            y,
            Op::LayerNorm {
                x: self.id,
                gamma: gamma.id,
                beta: beta.id,
                xhat,
                inv_std,
            },
        )
    }

    /// Contiguous slice `[start, start + len)` along `axis`.
    pub fn slice(self, axis: usize, start: usize, len: usize) -> Var<'g> {
        let v = self
            .value()
            .slice_axis(Axis(axis), Slice::from(start..start + len))
            .to_owned();
        self.graph.push(
            v,
            Op::Slice {
                a: self.id,
                axis,
                start,
            },
        )
    }
}

impl Graph {
    /// Join `parts` along `axis`; all other extents must agree.
    pub fn concat<'g>(&'g self, parts: &[Var<'g>], axis: usize) -> Var<'g> {
        assert!(!parts.is_empty(), "concat of nothing");
        for p in parts {
            assert!(std::ptr::eq(p.graph, self), "operands belong to different graphs");
        }
        let v = {
            let values: Vec<Ref<'_, Tensor>> = parts.iter().map(|p| p.value()).collect();
            let views: Vec<_> = values.iter().map(|v| v.view()).collect();
            ndarray::concatenate(Axis(axis), &views).expect("concat shape mismatch")
        };
        self.push(
            v,
            Op::Concat {
                parts: parts.iter().map(|p| p.id).collect(),
                axis,
            },
        )
    }
}

macro_rules! binary_op {
    ($trait:ident, $method:ident, $variant:ident, $sym:tt) => {
        impl<'g> $trait<Var<'g>> for Var<'g> {
            type Output = Var<'g>;
            fn $method(self, rhs: Var<'g>) -> Var<'g> {
                self.same_graph(&rhs);
                let v = &*self.value() $sym &*rhs.value();
                self.graph.push(v, Op::$variant(self.id, rhs.id))
            }
        }
    };
}

binary_op!(Add, add, Add, +);
binary_op!(Sub, sub, Sub, -);
binary_op!(Mul, mul, Mul, *);
binary_op!(Div, div, Div, /);

impl<'g> Neg for Var<'g> {
    type Output = Var<'g>;
    fn neg(self) -> Var<'g> {
        self.unary(|x| -x, Op::Neg(self.id))
    }
}

impl<'g> Mul<f64> for Var<'g> {
    type Output = Var<'g>;
    fn mul(self, rhs: f64) -> Var<'g> {
        self.scale(rhs)
    }
}

impl<'g> Add<f64> for Var<'g> {
    type Output = Var<'g>;
    fn add(self, rhs: f64) -> Var<'g> {
        self.shift(rhs)
    }
}

impl<'g> Sub<f64> for Var<'g> {
    type Output = Var<'g>;
    fn sub(self, rhs: f64) -> Var<'g> {
        self.shift(-rhs)
    }
}
