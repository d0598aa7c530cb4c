use std::cell::RefCell;

use super::kernels::gemm_acc;
use super::{split_axis, Result, Tensor, TensorError};

const LAYER_NORM_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul {
        a: usize,
        b: usize,
        ta: bool,
        tb: bool,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        b_shared: bool,
    },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    MulRows(usize, usize),
    DivRows(usize, usize),
    AddScalar(usize),
    MulScalar(usize, f64),
    Relu(usize),
    Gelu(usize),
    Tanh(usize),
    Sigmoid(usize),
    Exp(usize),
    Log(usize),
    Sqrt(usize),
    Softplus(usize),
    Square(usize),
    Clip(usize, f64, f64),
    Softmax(usize),
    LayerNorm { x: usize, rstd: Vec<f64> },
    Sum(usize),
    Mean(usize),
    SumAxis(usize, usize),
    MeanAxis(usize, usize),
    VarAxis { x: usize, axis: usize, mean: Vec<f64> },
    Gather(usize, Vec<usize>),
    ScatterAdd(usize, Vec<usize>),
    Narrow { x: usize, axis: usize, start: usize },
    Concat { xs: Vec<usize>, axis: usize },
    Reshape(usize),
    Expand(usize),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::MulRows(..) => "mul_rows",
            Op::DivRows(..) => "div_rows",
            Op::AddScalar(..) => "add_scalar",
            Op::MulScalar(..) => "mul_scalar",
            Op::Relu(..) => "relu",
            Op::Gelu(..) => "gelu",
            Op::Tanh(..) => "tanh",
            Op::Sigmoid(..) => "sigmoid",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Sqrt(..) => "sqrt",
            Op::Softplus(..) => "softplus",
            Op::Square(..) => "square",
            Op::Clip(..) => "clip",
            Op::Softmax(..) => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::SumAxis(..) => "sum_axis",
            Op::MeanAxis(..) => "mean_axis",
            Op::VarAxis { .. } => "var_axis",
            Op::Gather(..) => "gather",
            Op::ScatterAdd(..) => "scatter_add",
            Op::Narrow { .. } => "narrow",
            Op::Concat { .. } => "concat",
            Op::Reshape(..) => "reshape",
            Op::Expand(..) => "expand",
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Append-only record of primitive operations. Node ids are assigned in
/// creation order, which is a valid topological order.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var(#{} {:?})", self.id, self.shape())
    }
}

/// Gradients of leaf nodes produced by one backward pass.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var<'_>) -> Option<&[f64]> {
        self.grads.get(v.id).and_then(|g| g.as_deref())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Drops every recorded node and its saved intermediates. Outstanding
    /// [`Var`] handles become invalid.
    pub fn clear(&self) {
        self.nodes.borrow_mut().clear();
    }

    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Var<'_> {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, true)
    }

    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, false)
    }

    pub fn scalar(&self, v: f64) -> Var<'_> {
        self.constant(Tensor::scalar(v))
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn rg(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Reverse pass from a scalar root with upstream gradient 1.
    pub fn backward(&self, root: Var<'_>) -> Result<Gradients> {
        self.backward_scaled(root, 1.0)
    }

    /// Reverse pass from a scalar root with upstream gradient `seed`.
    pub fn backward_scaled(&self, root: Var<'_>, seed: f64) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let rnode = &nodes[root.id];
        if rnode.value.numel() != 1 {
            return Err(TensorError::NonScalarRoot(rnode.value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root.id + 1];
        if !rnode.requires_grad {
            return Ok(Gradients { grads });
        }
        grads[root.id] = Some(vec![seed]);
        for id in (0..=root.id).rev() {
            let node = &nodes[id];
            if matches!(node.op, Op::Leaf) || !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            let contribs = backward_node(&nodes, node, &g);
            for (pid, pg) in contribs {
                if !nodes[pid].requires_grad {
                    continue;
                }
                if pg.iter().any(|v| !v.is_finite()) {
                    return Err(TensorError::NonFiniteGradient {
                        op: node.op.name(),
                    });
                }
                match &mut grads[pid] {
                    Some(acc) => acc.iter_mut().zip(&pg).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(pg),
                }
            }
        }
        Ok(Gradients { grads })
    }
}

fn backward_node(nodes: &[Node], node: &Node, g: &[f64]) -> Vec<(usize, Vec<f64>)> {
    let val = |id: usize| nodes[id].value.data();
    let out = node.value.data();
    let unary = |x: usize, f: &dyn Fn(f64, f64, f64) -> f64| -> Vec<(usize, Vec<f64>)> {
        let xs = val(x);
        let d = g
            .iter()
            .zip(xs)
            .zip(out)
            .map(|((&gv, &xv), &yv)| f(gv, xv, yv))
            .collect();
        vec![(x, d)]
    };
    match &node.op {
        Op::Leaf => vec![],
        &Op::MatMul {
            a,
            b,
            ta,
            tb,
            batch,
            m,
            k,
            n,
            b_shared,
        } => {
            let (av, bv) = (val(a), val(b));
            let mut da = vec![0.0; av.len()];
            let mut db = vec![0.0; bv.len()];
            let need_a = nodes[a].requires_grad;
            let need_b = nodes[b].requires_grad;
            for t in 0..batch {
                let gs = &g[t * m * n..(t + 1) * m * n];
                let asl = &av[t * m * k..(t + 1) * m * k];
                let boff = if b_shared { 0 } else { t * k * n };
                let bsl = &bv[boff..boff + k * n];
                let da_s = &mut da[t * m * k..(t + 1) * m * k];
                let db_s = &mut db[boff..boff + k * n];
                match (ta, tb) {
                    (false, false) => {
                        if need_a {
                            gemm_acc(gs, bsl, da_s, m, n, k, false, true);
                        }
                        if need_b {
                            gemm_acc(asl, gs, db_s, k, m, n, true, false);
                        }
                    }
                    (false, true) => {
                        if need_a {
                            gemm_acc(gs, bsl, da_s, m, n, k, false, false);
                        }
                        if need_b {
                            gemm_acc(gs, asl, db_s, n, m, k, true, false);
                        }
                    }
                    (true, false) => {
                        if need_a {
                            gemm_acc(bsl, gs, da_s, k, n, m, false, true);
                        }
                        if need_b {
                            gemm_acc(asl, gs, db_s, k, m, n, false, false);
                        }
                    }
                    (true, true) => {
                        if need_a {
                            gemm_acc(bsl, gs, da_s, k, n, m, true, true);
                        }
                        if need_b {
                            gemm_acc(gs, asl, db_s, n, m, k, true, true);
                        }
                    }
                }
            }
            vec![(a, da), (b, db)]
        }
        &Op::Add(a, b) => {
            let nb = val(b).len();
            vec![(a, g.to_vec()), (b, reduce_lead(g, nb))]
        }
        &Op::Sub(a, b) => {
            let nb = val(b).len();
            let db = reduce_lead(g, nb).into_iter().map(|v| -v).collect();
            vec![(a, g.to_vec()), (b, db)]
        }
        &Op::Mul(a, b) => {
            let (av, bv) = (val(a), val(b));
            let nb = bv.len();
            let da = g.iter().enumerate().map(|(i, &gv)| gv * bv[i % nb]).collect();
            let mut db = vec![0.0; nb];
            for (i, &gv) in g.iter().enumerate() {
                db[i % nb] += gv * av[i];
            }
            vec![(a, da), (b, db)]
        }
        &Op::Div(a, b) => {
            let (av, bv) = (val(a), val(b));
            let nb = bv.len();
            let da = g.iter().enumerate().map(|(i, &gv)| gv / bv[i % nb]).collect();
            let mut db = vec![0.0; nb];
            for (i, &gv) in g.iter().enumerate() {
                let bj = bv[i % nb];
                db[i % nb] -= gv * av[i] / (bj * bj);
            }
            vec![(a, da), (b, db)]
        }
        &Op::MulRows(x, s) => {
            let (xv, sv) = (val(x), val(s));
            let w = xv.len() / sv.len();
            let mut dx = vec![0.0; xv.len()];
            let mut ds = vec![0.0; sv.len()];
            for r in 0..sv.len() {
                for j in r * w..(r + 1) * w {
                    dx[j] = g[j] * sv[r];
                    ds[r] += g[j] * xv[j];
                }
            }
            vec![(x, dx), (s, ds)]
        }
        &Op::DivRows(x, s) => {
            let (xv, sv) = (val(x), val(s));
            let w = xv.len() / sv.len();
            let mut dx = vec![0.0; xv.len()];
            let mut ds = vec![0.0; sv.len()];
            for r in 0..sv.len() {
                let inv = 1.0 / sv[r];
                for j in r * w..(r + 1) * w {
                    dx[j] = g[j] * inv;
                    ds[r] -= g[j] * xv[j] * inv * inv;
                }
            }
            vec![(x, dx), (s, ds)]
        }
        &Op::AddScalar(x) => vec![(x, g.to_vec())],
        &Op::MulScalar(x, c) => vec![(x, g.iter().map(|v| v * c).collect())],
        &Op::Relu(x) => unary(x, &|g, x, _| if x > 0.0 { g } else { 0.0 }),
        &Op::Gelu(x) => unary(x, &|g, x, _| {
            let u = GELU_C * (x + GELU_A * x * x * x);
            let t = u.tanh();
            let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
            g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)
        }),
        &Op::Tanh(x) => unary(x, &|g, _, y| g * (1.0 - y * y)),
        &Op::Sigmoid(x) => unary(x, &|g, _, y| g * y * (1.0 - y)),
        &Op::Exp(x) => unary(x, &|g, _, y| g * y),
        &Op::Log(x) => unary(x, &|g, x, _| g / x),
        &Op::Sqrt(x) => unary(x, &|g, _, y| g * 0.5 / y),
        &Op::Softplus(x) => unary(x, &|g, x, _| g * sigmoid(x)),
        &Op::Square(x) => unary(x, &|g, x, _| 2.0 * g * x),
        &Op::Clip(x, lo, hi) => unary(x, &|g, x, _| if x >= lo && x <= hi { g } else { 0.0 }),
        &Op::Softmax(x) => {
            let w = *node.value.shape().last().unwrap_or(&1);
            let mut dx = vec![0.0; g.len()];
            for r in 0..g.len() / w.max(1) {
                let ys = &out[r * w..(r + 1) * w];
                let gs = &g[r * w..(r + 1) * w];
                let s: f64 = ys.iter().zip(gs).map(|(y, g)| y * g).sum();
                for j in 0..w {
                    dx[r * w + j] = ys[j] * (gs[j] - s);
                }
            }
            vec![(x, dx)]
        }
        Op::LayerNorm { x, rstd } => {
            let w = *node.value.shape().last().unwrap_or(&1);
            let mut dx = vec![0.0; g.len()];
            let wf = w as f64;
            for (r, &rs) in rstd.iter().enumerate() {
                let xh = &out[r * w..(r + 1) * w];
                let gs = &g[r * w..(r + 1) * w];
                let sg: f64 = gs.iter().sum();
                let sgx: f64 = gs.iter().zip(xh).map(|(g, x)| g * x).sum();
                for j in 0..w {
                    dx[r * w + j] = rs / wf * (wf * gs[j] - sg - xh[j] * sgx);
                }
            }
            vec![(*x, dx)]
        }
        &Op::Sum(x) => vec![(x, vec![g[0]; val(x).len()])],
        &Op::Mean(x) => {
            let n = val(x).len();
            vec![(x, vec![g[0] / n as f64; n])]
        }
        &Op::SumAxis(x, axis) | &Op::MeanAxis(x, axis) => {
            let (outer, dim, inner) = split_axis(nodes[x].value.shape(), axis);
            let scale = if matches!(node.op, Op::MeanAxis(..)) {
                1.0 / dim as f64
            } else {
                1.0
            };
            let mut dx = vec![0.0; outer * dim * inner];
            for o in 0..outer {
                for d in 0..dim {
                    for i in 0..inner {
                        dx[(o * dim + d) * inner + i] = g[o * inner + i] * scale;
                    }
                }
            }
            vec![(x, dx)]
        }
        Op::VarAxis { x, axis, mean } => {
            let xv = val(*x);
            let (outer, dim, inner) = split_axis(nodes[*x].value.shape(), *axis);
            let mut dx = vec![0.0; xv.len()];
            let c = 2.0 / dim as f64;
            for o in 0..outer {
                for d in 0..dim {
                    for i in 0..inner {
                        let idx = (o * dim + d) * inner + i;
                        let oi = o * inner + i;
                        dx[idx] = g[oi] * c * (xv[idx] - mean[oi]);
                    }
                }
            }
            vec![(*x, dx)]
        }
        Op::Gather(x, idx) => {
            let mut dx = vec![0.0; val(*x).len()];
            for (k, &i) in idx.iter().enumerate() {
                dx[i] += g[k];
            }
            vec![(*x, dx)]
        }
        Op::ScatterAdd(src, idx) => vec![(*src, idx.iter().map(|&i| g[i]).collect())],
        &Op::Narrow { x, axis, start } => {
            let (outer, dim, inner) = split_axis(nodes[x].value.shape(), axis);
            let len = node.value.shape()[axis];
            let mut dx = vec![0.0; outer * dim * inner];
            for o in 0..outer {
                let src = &g[o * len * inner..(o + 1) * len * inner];
                let dst = &mut dx[(o * dim + start) * inner..(o * dim + start + len) * inner];
                dst.copy_from_slice(src);
            }
            vec![(x, dx)]
        }
        Op::Concat { xs, axis } => {
            let (outer, total, inner) = split_axis(node.value.shape(), *axis);
            let mut off = 0;
            let mut res = Vec::with_capacity(xs.len());
            for &x in xs {
                let len = nodes[x].value.shape()[*axis];
                let mut dx = vec![0.0; outer * len * inner];
                for o in 0..outer {
                    let src = &g[(o * total + off) * inner..(o * total + off + len) * inner];
                    dx[o * len * inner..(o + 1) * len * inner].copy_from_slice(src);
                }
                off += len;
                res.push((x, dx));
            }
            res
        }
        &Op::Reshape(x) => vec![(x, g.to_vec())],
        &Op::Expand(x) => vec![(x, vec![g.iter().sum()])],
    }
}

/// Sums `g` over leading repetitions of a trailing block of length `nb`.
fn reduce_lead(g: &[f64], nb: usize) -> Vec<f64> {
    let mut out = vec![0.0; nb];
    for chunk in g.chunks(nb) {
        out.iter_mut().zip(chunk).for_each(|(o, v)| *o += v);
    }
    out
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub(crate) fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn is_suffix(short: &[usize], long: &[usize]) -> bool {
    short.len() <= long.len() && long[long.len() - short.len()..] == *short
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn value(&self) -> Tensor {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn item(&self) -> f64 {
        self.tape.nodes.borrow()[self.id].value.data()[0]
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.tape.nodes.borrow()[self.id].value.data().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.rg(self.id)
    }

    fn with<R>(&self, f: impl FnOnce(&Tensor) -> R) -> R {
        f(&self.tape.nodes.borrow()[self.id].value)
    }

    fn map_unary(self, op: Op, f: impl Fn(f64) -> f64) -> Var<'t> {
        let value = self.with(|t| {
            Tensor::new(t.shape().to_vec(), t.data().iter().map(|&v| f(v)).collect())
                .expect("same shape")
        });
        let rg = self.requires_grad();
        self.tape.push(value, op, rg)
    }

    fn binary(self, other: Var<'t>, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<(Tensor, bool)> {
        let nodes = self.tape.nodes.borrow();
        let (a, b) = (&nodes[self.id].value, &nodes[other.id].value);
        if !is_suffix(b.shape(), a.shape()) {
            return Err(TensorError::ShapeMismatch {
                op: name,
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let nb = b.numel();
        let bd = b.data();
        let data = a
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, bd[i % nb]))
            .collect();
        let rg = nodes[self.id].requires_grad || nodes[other.id].requires_grad;
        Ok((Tensor::new(a.shape().to_vec(), data)?, rg))
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        let (v, rg) = self.binary(other, "add", |a, b| a + b)?;
        Ok(self.tape.push(v, Op::Add(self.id, other.id), rg))
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        let (v, rg) = self.binary(other, "sub", |a, b| a - b)?;
        Ok(self.tape.push(v, Op::Sub(self.id, other.id), rg))
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        let (v, rg) = self.binary(other, "mul", |a, b| a * b)?;
        Ok(self.tape.push(v, Op::Mul(self.id, other.id), rg))
    }

    pub fn div(self, other: Var<'t>) -> Result<Var<'t>> {
        let (v, rg) = self.binary(other, "div", |a, b| a / b)?;
        Ok(self.tape.push(v, Op::Div(self.id, other.id), rg))
    }

    fn rows_op(self, s: Var<'t>, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<(Tensor, bool)> {
        let nodes = self.tape.nodes.borrow();
        let (x, sv) = (&nodes[self.id].value, &nodes[s.id].value);
        if x.shape().is_empty() || sv.shape() != [x.shape()[0]] {
            return Err(TensorError::ShapeMismatch {
                op: name,
                lhs: x.shape().to_vec(),
                rhs: sv.shape().to_vec(),
            });
        }
        let w = x.numel() / x.shape()[0].max(1);
        let data = x
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| f(v, sv.data()[i / w]))
            .collect();
        let rg = nodes[self.id].requires_grad || nodes[s.id].requires_grad;
        Ok((Tensor::new(x.shape().to_vec(), data)?, rg))
    }

    /// Scales row `i` (slice along the first axis) by `s[i]`.
    pub fn mul_rows(self, s: Var<'t>) -> Result<Var<'t>> {
        let (v, rg) = self.rows_op(s, "mul_rows", |a, b| a * b)?;
        Ok(self.tape.push(v, Op::MulRows(self.id, s.id), rg))
    }

    /// Divides row `i` (slice along the first axis) by `s[i]`.
    pub fn div_rows(self, s: Var<'t>) -> Result<Var<'t>> {
        let (v, rg) = self.rows_op(s, "div_rows", |a, b| a / b)?;
        Ok(self.tape.push(v, Op::DivRows(self.id, s.id), rg))
    }

    pub fn add_scalar(self, c: f64) -> Var<'t> {
        self.map_unary(Op::AddScalar(self.id), |v| v + c)
    }

    pub fn mul_scalar(self, c: f64) -> Var<'t> {
        self.map_unary(Op::MulScalar(self.id, c), |v| v * c)
    }

    pub fn neg(self) -> Var<'t> {
        self.mul_scalar(-1.0)
    }

    pub fn relu(self) -> Var<'t> {
        self.map_unary(Op::Relu(self.id), |v| v.max(0.0))
    }

    /// GELU, tanh approximation.
    pub fn gelu(self) -> Var<'t> {
        self.map_unary(Op::Gelu(self.id), |x| {
            0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
        })
    }

    pub fn tanh(self) -> Var<'t> {
        self.map_unary(Op::Tanh(self.id), f64::tanh)
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.map_unary(Op::Sigmoid(self.id), sigmoid)
    }

    pub fn exp(self) -> Var<'t> {
        self.map_unary(Op::Exp(self.id), f64::exp)
    }

    pub fn log(self) -> Var<'t> {
        self.map_unary(Op::Log(self.id), f64::ln)
    }

    pub fn sqrt(self) -> Var<'t> {
        self.map_unary(Op::Sqrt(self.id), f64::sqrt)
    }

    pub fn softplus(self) -> Var<'t> {
        self.map_unary(Op::Softplus(self.id), softplus)
    }

    pub fn square(self) -> Var<'t> {
        self.map_unary(Op::Square(self.id), |v| v * v)
    }

    /// Clamps to `[lo, hi]`; the gradient is zero outside the range.
    pub fn clip(self, lo: f64, hi: f64) -> Var<'t> {
        self.map_unary(Op::Clip(self.id, lo, hi), move |v| v.clamp(lo, hi))
    }

    /// Softmax over the last axis.
    pub fn softmax(self) -> Var<'t> {
        let value = self.with(|t| {
            let w = *t.shape().last().unwrap_or(&1);
            let mut out = t.data().to_vec();
            for row in out.chunks_mut(w.max(1)) {
                let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut s = 0.0;
                for v in row.iter_mut() {
                    *v = (*v - mx).exp();
                    s += *v;
                }
                for v in row.iter_mut() {
                    *v /= s;
                }
            }
            Tensor::new(t.shape().to_vec(), out).expect("same shape")
        });
        let rg = self.requires_grad();
        self.tape.push(value, Op::Softmax(self.id), rg)
    }

    /// Normalizes the last axis to zero mean and unit variance (no affine).
    pub fn layer_norm(self) -> Var<'t> {
        let (value, rstd) = self.with(|t| {
            let w = *t.shape().last().unwrap_or(&1);
            let mut out = t.data().to_vec();
            let mut rstd = Vec::with_capacity(out.len() / w.max(1));
            for row in out.chunks_mut(w.max(1)) {
                let mean = row.iter().sum::<f64>() / w as f64;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / w as f64;
                let rs = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                for v in row.iter_mut() {
                    *v = (*v - mean) * rs;
                }
                rstd.push(rs);
            }
            (Tensor::new(t.shape().to_vec(), out).expect("same shape"), rstd)
        });
        let rg = self.requires_grad();
        self.tape.push(value, Op::LayerNorm { x: self.id, rstd }, rg)
    }

    pub fn sum(self) -> Var<'t> {
        let v = self.with(|t| t.data().iter().sum::<f64>());
        let rg = self.requires_grad();
        self.tape.push(Tensor::scalar(v), Op::Sum(self.id), rg)
    }

    pub fn mean(self) -> Var<'t> {
        let v = self.with(|t| crate::stats::mean(t.data()));
        let rg = self.requires_grad();
        self.tape.push(Tensor::scalar(v), Op::Mean(self.id), rg)
    }

    fn axis_check(&self, axis: usize, name: &'static str) -> Result<Vec<usize>> {
        let shape = self.shape();
        if axis >= shape.len() {
            return Err(TensorError::Invalid {
                op: name,
                msg: format!("axis {axis} out of range for shape {shape:?}"),
            });
        }
        Ok(shape)
    }

    fn reduce_axis(self, axis: usize, name: &'static str) -> Result<(Vec<usize>, Vec<f64>, usize)> {
        let shape = self.axis_check(axis, name)?;
        let (outer, dim, inner) = split_axis(&shape, axis);
        let mut sums = vec![0.0; outer * inner];
        self.with(|t| {
            let d = t.data();
            for o in 0..outer {
                for k in 0..dim {
                    for i in 0..inner {
                        sums[o * inner + i] += d[(o * dim + k) * inner + i];
                    }
                }
            }
        });
        let mut out_shape = shape;
        out_shape.remove(axis);
        Ok((out_shape, sums, dim))
    }

    pub fn sum_axis(self, axis: usize) -> Result<Var<'t>> {
        let (shape, sums, _) = self.reduce_axis(axis, "sum_axis")?;
        let rg = self.requires_grad();
        Ok(self.tape.push(Tensor::new(shape, sums)?, Op::SumAxis(self.id, axis), rg))
    }

    pub fn mean_axis(self, axis: usize) -> Result<Var<'t>> {
        let (shape, sums, dim) = self.reduce_axis(axis, "mean_axis")?;
        let means = sums.into_iter().map(|s| s / dim as f64).collect();
        let rg = self.requires_grad();
        Ok(self.tape.push(Tensor::new(shape, means)?, Op::MeanAxis(self.id, axis), rg))
    }

    /// Population variance along `axis`.
    pub fn var_axis(self, axis: usize) -> Result<Var<'t>> {
        let (shape, sums, dim) = self.reduce_axis(axis, "var_axis")?;
        let means: Vec<f64> = sums.into_iter().map(|s| s / dim as f64).collect();
        let full = self.shape();
        let (outer, _, inner) = split_axis(&full, axis);
        let mut vars = vec![0.0; outer * inner];
        self.with(|t| {
            let d = t.data();
            for o in 0..outer {
                for k in 0..dim {
                    for i in 0..inner {
                        let dv = d[(o * dim + k) * inner + i] - means[o * inner + i];
                        vars[o * inner + i] += dv * dv;
                    }
                }
            }
        });
        vars.iter_mut().for_each(|v| *v /= dim as f64);
        let rg = self.requires_grad();
        Ok(self.tape.push(
            Tensor::new(shape, vars)?,
            Op::VarAxis {
                x: self.id,
                axis,
                mean: means,
            },
            rg,
        ))
    }

    /// Picks `self.flat[idx[k]]` into a tensor of shape `out_shape`.
    pub fn gather(self, idx: Vec<usize>, out_shape: Vec<usize>) -> Result<Var<'t>> {
        let numel: usize = out_shape.iter().product();
        if numel != idx.len() {
            return Err(TensorError::ShapeMismatch {
                op: "gather",
                lhs: out_shape,
                rhs: vec![idx.len()],
            });
        }
        let value = self.with(|t| {
            let d = t.data();
            idx.iter()
                .map(|&i| {
                    d.get(i).copied().ok_or_else(|| TensorError::Invalid {
                        op: "gather",
                        msg: format!("index {i} out of bounds for {} elements", d.len()),
                    })
                })
                .collect::<Result<Vec<f64>>>()
        })?;
        let rg = self.requires_grad();
        Ok(self.tape.push(Tensor::new(out_shape, value)?, Op::Gather(self.id, idx), rg))
    }

    /// Sums `self.flat[k]` into `out.flat[idx[k]]` of a zero tensor with
    /// shape `out_shape`.
    pub fn scatter_add(self, idx: Vec<usize>, out_shape: Vec<usize>) -> Result<Var<'t>> {
        let numel: usize = out_shape.iter().product();
        let mut out = vec![0.0; numel];
        self.with(|t| {
            if t.numel() != idx.len() {
                return Err(TensorError::ShapeMismatch {
                    op: "scatter_add",
                    lhs: t.shape().to_vec(),
                    rhs: vec![idx.len()],
                });
            }
            for (&i, &v) in idx.iter().zip(t.data()) {
                if i >= numel {
                    return Err(TensorError::Invalid {
                        op: "scatter_add",
                        msg: format!("index {i} out of bounds for {numel} elements"),
                    });
                }
                out[i] += v;
            }
            Ok(())
        })?;
        let rg = self.requires_grad();
        Ok(self.tape.push(Tensor::new(out_shape, out)?, Op::ScatterAdd(self.id, idx), rg))
    }

    /// Contiguous slice `[start, start + len)` along `axis`.
    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Result<Var<'t>> {
        let shape = self.axis_check(axis, "narrow")?;
        if start + len > shape[axis] {
            return Err(TensorError::Invalid {
                op: "narrow",
                msg: format!("range {start}..{} exceeds extent {} of axis {axis}", start + len, shape[axis]),
            });
        }
        let (outer, dim, inner) = split_axis(&shape, axis);
        let mut out = Vec::with_capacity(outer * len * inner);
        self.with(|t| {
            let d = t.data();
            for o in 0..outer {
                out.extend_from_slice(&d[(o * dim + start) * inner..(o * dim + start + len) * inner]);
            }
        });
        let mut out_shape = shape;
        out_shape[axis] = len;
        let rg = self.requires_grad();
        Ok(self.tape.push(
            Tensor::new(out_shape, out)?,
            Op::Narrow {
                x: self.id,
                axis,
                start,
            },
            rg,
        ))
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
        let first = parts.first().ok_or(TensorError::Invalid {
            op: "concat",
            msg: "no inputs".into(),
        })?;
        let tape = first.tape;
        let base = first.axis_check(axis, "concat")?;
        let mut total = 0;
        for p in parts {
            let s = p.shape();
            let ok = s.len() == base.len()
                && s.iter().enumerate().all(|(i, &e)| i == axis || e == base[i]);
            if !ok {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: base,
                    rhs: s,
                });
            }
            total += s[axis];
        }
        let mut out_shape = base.clone();
        out_shape[axis] = total;
        let (outer, _, inner) = split_axis(&out_shape, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        let nodes = tape.nodes.borrow();
        for o in 0..outer {
            for p in parts {
                let t = &nodes[p.id].value;
                let len = t.shape()[axis];
                out.extend_from_slice(&t.data()[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let rg = parts.iter().any(|p| nodes[p.id].requires_grad);
        drop(nodes);
        Ok(tape.push(
            Tensor::new(out_shape, out)?,
            Op::Concat {
                xs: parts.iter().map(|p| p.id).collect(),
                axis,
            },
            rg,
        ))
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Var<'t>> {
        let value = self.value().reshape(shape)?;
        let rg = self.requires_grad();
        Ok(self.tape.push(value, Op::Reshape(self.id), rg))
    }

    /// Broadcasts a single-element tensor to `shape`.
    pub fn expand(self, shape: Vec<usize>) -> Result<Var<'t>> {
        let (numel, v) = self.with(|t| (t.numel(), t.data().first().copied()));
        if numel != 1 {
            return Err(TensorError::ShapeMismatch {
                op: "expand",
                lhs: self.shape(),
                rhs: shape,
            });
        }
        let value = Tensor::full(&shape, v.unwrap_or(0.0));
        let rg = self.requires_grad();
        Ok(self.tape.push(value, Op::Expand(self.id), rg))
    }

    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.matmul_t(other, false, false)
    }

    /// `op(self) @ op(other)` with optional transposition of the last two
    /// axes. Supports rank-2 x rank-2, batched rank-3 x rank-3 and rank-3 x
    /// rank-2 (the right operand shared across the batch).
    pub fn matmul_t(self, other: Var<'t>, ta: bool, tb: bool) -> Result<Var<'t>> {
        let nodes = self.tape.nodes.borrow();
        let (a, b) = (&nodes[self.id].value, &nodes[other.id].value);
        let mismatch = || TensorError::ShapeMismatch {
            op: "matmul",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        };
        let (batch, ar, ac) = match a.shape() {
            &[r, c] => (1, r, c),
            &[bt, r, c] => (bt, r, c),
            _ => return Err(mismatch()),
        };
        let (b_batch, br, bc) = match b.shape() {
            &[r, c] => (None, r, c),
            &[bt, r, c] => (Some(bt), r, c),
            _ => return Err(mismatch()),
        };
        let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if tb { (bc, br) } else { (br, bc) };
        if k != k2 {
            return Err(mismatch());
        }
        let b_shared = match (a.shape().len(), b_batch) {
            (2, None) => true,
            (3, None) => true,
            (3, Some(bt)) if bt == batch => false,
            _ => return Err(mismatch()),
        };
        let mut c = vec![0.0; batch * m * n];
        for t in 0..batch {
            let asl = &a.data()[t * m * k..(t + 1) * m * k];
            let boff = if b_shared { 0 } else { t * k * n };
            let bsl = &b.data()[boff..boff + k * n];
            gemm_acc(asl, bsl, &mut c[t * m * n..(t + 1) * m * n], m, k, n, ta, tb);
        }
        let shape = if a.shape().len() == 3 {
            vec![batch, m, n]
        } else {
            vec![m, n]
        };
        let rg = nodes[self.id].requires_grad || nodes[other.id].requires_grad;
        drop(nodes);
        Ok(self.tape.push(
            Tensor::new(shape, c)?,
            Op::MatMul {
                a: self.id,
                b: other.id,
                ta,
                tb,
                batch,
                m,
                k,
                n,
                b_shared,
            },
            rg,
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_padded() {
        let tape = Tape::new();
        let a = tape.constant(t(&[2, 3], &[1., 2., 3., 4., 5., 6.]));
        let eye = tape.constant(t(&[3, 2], &[1., 0., 0., 1., 0., 0.]));
        assert_eq!(a.matmul(eye).unwrap().to_vec(), vec![1., 2., 4., 5.]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 2]));
        match a.matmul(b) {
            Err(TensorError::ShapeMismatch { op, lhs, rhs }) => {
                assert_eq!(op, "matmul");
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![2, 2]);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn softmax_uniform() {
        let tape = Tape::new();
        let z = tape.constant(Tensor::full(&[4], 0.7));
        assert_eq!(z.softmax().to_vec(), vec![0.25; 4]);
    }

    #[test]
    fn scatter_add_hand_summed() {
        let tape = Tape::new();
        let v = tape.constant(Tensor::vector(vec![0.2, 0.3, 0.5]));
        let out = v.scatter_add(vec![1, 1, 0], vec![2]).unwrap().to_vec();
        assert_eq!(out, vec![0.5, 0.2 + 0.3]);
        assert!((out[1] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn sum_of_squares_gradient() {
        let tape = Tape::new();
        let x = tape.param(Tensor::vector(vec![1.0, 2.0]));
        let loss = x.square().sum();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn log_softmax_gradient_identity() {
        let tape = Tape::new();
        let zv = vec![0.3, -1.2, 2.0, 0.5];
        let z = tape.param(Tensor::vector(zv.clone()));
        let p = z.softmax();
        let loss = p.gather(vec![2], vec![]).unwrap().log();
        let g = tape.backward(loss).unwrap();
        let sm = p.to_vec();
        for (k, gv) in g.get(z).unwrap().iter().enumerate() {
            let want = if k == 2 { 1.0 - sm[k] } else { -sm[k] };
            assert!((gv - want).abs() < 1e-12);
        }
    }

    #[test]
    fn non_scalar_root_rejected() {
        let tape = Tape::new();
        let x = tape.param(Tensor::vector(vec![1.0, 2.0]));
        assert_eq!(
            tape.backward(x).unwrap_err(),
            TensorError::NonScalarRoot(vec![2])
        );
    }

    #[test]
    fn nan_gradient_names_primitive() {
        let tape = Tape::new();
        let x = tape.param(Tensor::vector(vec![0.0, 1.0]));
        let loss = x.sqrt().sum();
        assert_eq!(
            tape.backward(loss).unwrap_err(),
            TensorError::NonFiniteGradient { op: "sqrt" }
        );
    }

    #[test]
    fn clip_gradient_zero_outside() {
        let tape = Tape::new();
        let x = tape.param(Tensor::vector(vec![-5.0, 0.5, 5.0]));
        let g = tape.backward(x.clip(-4.0, 4.0).sum()).unwrap();
        assert_eq!(g.get(x).unwrap(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn accumulation_is_additive() {
        use crate::tensor::ParamSet;
        let mut ps = ParamSet::new();
        ps.push("w", Tensor::vector(vec![0.5, -1.5, 2.0]));
        let mut twice = ps.clone();
        let mut doubled = ps.clone();
        for _ in 0..2 {
            let tape = Tape::new();
            let b = twice.bind(&tape, true);
            let loss = b.get("w").tanh().square().sum();
            let g = tape.backward(loss).unwrap();
            twice.accumulate(&b, &g, 1.0);
        }
        let tape = Tape::new();
        let b = doubled.bind(&tape, true);
        let loss = b.get("w").tanh().square().sum();
        let g = tape.backward_scaled(loss, 2.0).unwrap();
        doubled.accumulate(&b, &g, 1.0);
        let a = twice.iter().next().unwrap().grad.clone().unwrap();
        let d = doubled.iter().next().unwrap().grad.clone().unwrap();
        assert_eq!(a, d);
    }

    #[test]
    fn clear_frees_nodes() {
        let tape = Tape::new();
        let x = tape.param(Tensor::vector(vec![1.0; 8]));
        let _ = x.exp().sum();
        assert_eq!(tape.len(), 3);
        tape.clear();
        assert!(tape.is_empty());
    }

    #[test]
    fn constants_do_not_require_grad() {
        let tape = Tape::new();
        let c = tape.constant(Tensor::vector(vec![1.0, 2.0]));
        let p = tape.param(Tensor::vector(vec![1.0, 2.0]));
        assert!(!c.exp().requires_grad());
        assert!(c.mul(p).unwrap().requires_grad());
    }

    #[test]
    fn leading_broadcast_only() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[3, 2]));
        let row = tape.constant(Tensor::vector(vec![1.0, 2.0]));
        let col = tape.constant(Tensor::vector(vec![1.0, 2.0, 3.0]));
        assert_eq!(x.add(row).unwrap().to_vec(), vec![1., 2., 1., 2., 1., 2.]);
        assert!(x.add(col).is_err());
    }
}
