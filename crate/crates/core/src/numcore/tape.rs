//! Reverse-mode differentiation over a Wengert list.
//!
//! Every value on a [`Tape`] is a rank-2 matrix (row vectors are `1×n`,
//! scalars `1×1`). Forward operations append nodes; [`Tape::backward`]
//! replays them in reverse and returns gradients for every leaf that was
//! registered with `requires_grad`.

use std::cell::{Cell, Ref, RefCell};
use std::collections::HashMap;
use std::rc::Rc;

use super::tensor::{gemm, softmax_in_place, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Unary {
    Exp,
    Log,
    Sigmoid,
    Tanh,
    Gelu,
    Relu,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul {
        a: usize,
        b: usize,
        b_trans: bool,
    },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    AddRow {
        a: usize,
        row: usize,
    },
    MulRow {
        a: usize,
        row: usize,
    },
    Scale(usize, f64),
    AddScalar(usize),
    Unary(usize, Unary),
    Softmax {
        a: usize,
    },
    LogSoftmax {
        a: usize,
    },
    LayerNorm {
        a: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    L2Normalize {
        a: usize,
        norms: Vec<f64>,
    },
    Transpose(usize),
    SumAll(usize),
    MeanAll(usize),
    MeanRows(usize),
    SumRows(usize),
    MaxGroups {
        a: usize,
        argmax: Vec<usize>,
    },
    ConcatRows(Vec<usize>),
    SliceRows {
        a: usize,
        start: usize,
    },
    GatherRows {
        table: usize,
        ids: Vec<usize>,
    },
    Pick {
        a: usize,
        idx: Vec<usize>,
    },
    Reshape(usize),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Recording context for one forward/backward pass.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    params: RefCell<HashMap<String, usize>>,
    non_finite: RefCell<Option<String>>,
    frozen_hits: Cell<usize>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

fn as_matrix(t: Tensor) -> Tensor {
    if t.shape().len() == 2 {
        t
    } else {
        let (r, c) = (t.rows(), t.cols());
        t.reshape(vec![r, c]).expect("matrix view")
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

    fn push(&self, value: Tensor, op: Op, needs_grad: bool, name: &str) -> usize {
        if !value.is_finite() {
            let mut nf = self.non_finite.borrow_mut();
            if nf.is_none() {
                *nf = Some(name.to_string());
            }
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        nodes.len() - 1
    }

    fn var(&self, id: usize) -> Var<'_> {
        Var { tape: self, id }
    }

    /// Leaf value; gradients are reported for it iff `requires_grad`.
    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Var<'_> {
        let id = self.push(as_matrix(value), Op::Leaf, requires_grad, "leaf");
        self.var(id)
    }

    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, false)
    }

    /// Named parameter leaf, registered once per tape.
    pub fn param(&self, name: &str, value: &Tensor, requires_grad: bool) -> Var<'_> {
        if let Some(&id) = self.params.borrow().get(name) {
            return self.var(id);
        }
        if !requires_grad {
            self.frozen_hits.set(self.frozen_hits.get() + 1);
        }
        let id = self.push(as_matrix(value.clone()), Op::Leaf, requires_grad, name);
        self.params.borrow_mut().insert(name.to_string(), id);
        self.var(id)
    }

    /// Number of distinct frozen parameters bound to this tape.
    pub fn frozen_params_bound(&self) -> usize {
        self.frozen_hits.get()
    }

    /// Fails if any forward value so far was NaN or infinite.
    pub fn check_finite(&self) -> Result<()> {
        match &*self.non_finite.borrow() {
            Some(op) => Err(Error::NonFinite { op: op.clone() }),
            None => Ok(()),
        }
    }

    /// Back-propagates from a `1×1` value.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        self.check_finite()?;
        let nodes = self.nodes.borrow();
        if nodes[loss.id].value.len() != 1 {
            return Err(Error::invalid("backward requires a scalar loss"));
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(nodes.len());
        grads.resize_with(nodes.len(), || None);
        grads[loss.id] = Some(vec![1.0]);
        for i in (0..=loss.id).rev() {
            let node = &nodes[i];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            backprop(&nodes, i, &g, &mut grads);
        }
        let mut leaves = HashMap::new();
        for (i, node) in nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.needs_grad {
                let shape = node.value.shape().to_vec();
                let data = grads[i]
                    .take()
                    .unwrap_or_else(|| vec![0.0; node.value.len()]);
                leaves.insert(i, Tensor::new(shape, data)?);
            }
        }
        Ok(Gradients {
            leaves,
            params: self.params.borrow().clone(),
        })
    }

    fn unary_out(&self, a: Var<'_>, name: &str, op: Op, f: impl Fn(&Tensor) -> Tensor) -> usize {
        let (out, ng) = {
            let nodes = self.nodes.borrow();
            let n = &nodes[a.id];
            (f(&n.value), n.needs_grad)
        };
        self.push(out, op, ng, name)
    }
}

fn acc<'g>(
    grads: &'g mut [Option<Vec<f64>>],
    nodes: &[Node],
    id: usize,
) -> Option<&'g mut Vec<f64>> {
    if !nodes[id].needs_grad {
        return None;
    }
    let len = nodes[id].value.len();
    Some(grads[id].get_or_insert_with(|| vec![0.0; len]))
}

fn backprop(nodes: &[Node], i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let out = &nodes[i].value;
    match &nodes[i].op {
        Op::Leaf => {}
        &Op::MatMul { a, b, b_trans } => {
            let av = &nodes[a].value;
            let bv = &nodes[b].value;
            let (m, k) = (av.rows(), av.cols());
            let n = out.cols();
            if let Some(ga) = acc(grads, nodes, a) {
                // dA = G · op(B)ᵀ
                gemm(m, n, k, g, false, bv.data(), !b_trans, ga, true);
            }
            if let Some(gb) = acc(grads, nodes, b) {
                if b_trans {
                    // B is n×k: dB = Gᵀ · A
                    gemm(n, m, k, g, true, av.data(), false, gb, true);
                } else {
                    // dB = Aᵀ · G
                    gemm(k, m, n, av.data(), true, g, false, gb, true);
                }
            }
        }
        &Op::Add(a, b) => {
            for id in [a, b] {
                if let Some(ga) = acc(grads, nodes, id) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
            }
        }
        &Op::Sub(a, b) => {
            if let Some(ga) = acc(grads, nodes, a) {
                ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
            }
            if let Some(gb) = acc(grads, nodes, b) {
                gb.iter_mut().zip(g).for_each(|(x, y)| *x -= y);
            }
        }
        &Op::Mul(a, b) => {
            let (av, bv) = (&nodes[a].value, &nodes[b].value);
            if let Some(ga) = acc(grads, nodes, a) {
                for ((x, y), bb) in ga.iter_mut().zip(g).zip(bv.data()) {
                    *x += y * bb;
                }
            }
            if let Some(gb) = acc(grads, nodes, b) {
                for ((x, y), aa) in gb.iter_mut().zip(g).zip(av.data()) {
                    *x += y * aa;
                }
            }
        }
        &Op::Div(a, b) => {
            let bv = &nodes[b].value;
            if let Some(ga) = acc(grads, nodes, a) {
                for ((x, y), bb) in ga.iter_mut().zip(g).zip(bv.data()) {
                    *x += y / bb;
                }
            }
            if let Some(gb) = acc(grads, nodes, b) {
                for (((x, y), bb), o) in gb.iter_mut().zip(g).zip(bv.data()).zip(out.data()) {
                    *x -= y * o / bb;
                }
            }
        }
        &Op::AddRow { a, row } => {
            if let Some(ga) = acc(grads, nodes, a) {
                ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
            }
            let c = out.cols();
            if let Some(gr) = acc(grads, nodes, row) {
                for chunk in g.chunks(c) {
                    gr.iter_mut().zip(chunk).for_each(|(x, y)| *x += y);
                }
            }
        }
        &Op::MulRow { a, row } => {
            let c = out.cols();
            let (av, rv) = (&nodes[a].value, &nodes[row].value);
            if let Some(ga) = acc(grads, nodes, a) {
                for (gchunk, xchunk) in g.chunks(c).zip(ga.chunks_mut(c)) {
                    for j in 0..c {
                        xchunk[j] += gchunk[j] * rv.data()[j];
                    }
                }
            }
            if let Some(gr) = acc(grads, nodes, row) {
                for (gchunk, achunk) in g.chunks(c).zip(av.data().chunks(c)) {
                    for j in 0..c {
                        gr[j] += gchunk[j] * achunk[j];
                    }
                }
            }
        }
        &Op::Scale(a, s) => {
            if let Some(ga) = acc(grads, nodes, a) {
                ga.iter_mut().zip(g).for_each(|(x, y)| *x += s * y);
            }
        }
        &Op::AddScalar(a) | &Op::Reshape(a) => {
            if let Some(ga) = acc(grads, nodes, a) {
                ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
            }
        }
        &Op::Unary(a, kind) => {
            let xv = &nodes[a].value;
            if let Some(ga) = acc(grads, nodes, a) {
                for (((dx, gy), x), y) in ga.iter_mut().zip(g).zip(xv.data()).zip(out.data()) {
                    let d = match kind {
                        Unary::Exp => *y,
                        Unary::Log => 1.0 / x,
                        Unary::Sigmoid => y * (1.0 - y),
                        Unary::Tanh => 1.0 - y * y,
                        Unary::Gelu => gelu_grad(*x),
                        Unary::Relu => {
                            if *x > 0.0 {
                                1.0
                            } else {
                                0.0
                            }
                        }
                    };
                    *dx += gy * d;
                }
            }
        }
        &Op::Softmax { a } => {
            let c = out.cols();
            if let Some(ga) = acc(grads, nodes, a) {
                for ((gy, y), dx) in g.chunks(c).zip(out.data().chunks(c)).zip(ga.chunks_mut(c)) {
                    let s: f64 = gy.iter().zip(y).map(|(u, v)| u * v).sum();
                    for j in 0..c {
                        dx[j] += y[j] * (gy[j] - s);
                    }
                }
            }
        }
        &Op::LogSoftmax { a } => {
            let c = out.cols();
            if let Some(ga) = acc(grads, nodes, a) {
                for ((gy, y), dx) in g.chunks(c).zip(out.data().chunks(c)).zip(ga.chunks_mut(c)) {
                    let s: f64 = gy.iter().sum();
                    for j in 0..c {
                        dx[j] += gy[j] - y[j].exp() * s;
                    }
                }
            }
        }
        Op::LayerNorm { a, xhat, inv_std } => {
            let c = out.cols();
            if let Some(ga) = acc(grads, nodes, *a) {
                for (r, ((gy, xh), dx)) in g
                    .chunks(c)
                    .zip(xhat.chunks(c))
                    .zip(ga.chunks_mut(c))
                    .enumerate()
                {
                    let mg = gy.iter().sum::<f64>() / c as f64;
                    let mgx = gy.iter().zip(xh).map(|(u, v)| u * v).sum::<f64>() / c as f64;
                    for j in 0..c {
                        dx[j] += inv_std[r] * (gy[j] - mg - xh[j] * mgx);
                    }
                }
            }
        }
        Op::L2Normalize { a, norms } => {
            let c = out.cols();
            if let Some(ga) = acc(grads, nodes, *a) {
                for (r, ((gy, y), dx)) in g
                    .chunks(c)
                    .zip(out.data().chunks(c))
                    .zip(ga.chunks_mut(c))
                    .enumerate()
                {
                    let s: f64 = gy.iter().zip(y).map(|(u, v)| u * v).sum();
                    for j in 0..c {
                        dx[j] += (gy[j] - y[j] * s) / norms[r];
                    }
                }
            }
        }
        &Op::Transpose(a) => {
            let (r, c) = (out.rows(), out.cols());
            if let Some(ga) = acc(grads, nodes, a) {
                for i in 0..r {
                    for j in 0..c {
                        ga[j * r + i] += g[i * c + j];
                    }
                }
            }
        }
        &Op::SumAll(a) => {
            if let Some(ga) = acc(grads, nodes, a) {
                ga.iter_mut().for_each(|x| *x += g[0]);
            }
        }
        &Op::MeanAll(a) => {
            if let Some(ga) = acc(grads, nodes, a) {
                let s = g[0] / ga.len() as f64;
                ga.iter_mut().for_each(|x| *x += s);
            }
        }
        &Op::MeanRows(a) => {
            let c = out.cols();
            if let Some(ga) = acc(grads, nodes, a) {
                let r = ga.len() / c;
                for chunk in ga.chunks_mut(c) {
                    for j in 0..c {
                        chunk[j] += g[j] / r as f64;
                    }
                }
            }
        }
        &Op::SumRows(a) => {
            if let Some(ga) = acc(grads, nodes, a) {
                let c = nodes[a].value.cols();
                for (r, chunk) in ga.chunks_mut(c).enumerate() {
                    chunk.iter_mut().for_each(|x| *x += g[r]);
                }
            }
        }
        Op::MaxGroups { a, argmax } => {
            let c = out.cols();
            if let Some(ga) = acc(grads, nodes, *a) {
                for (k, &src) in argmax.iter().enumerate() {
                    ga[src * c + k % c] += g[k];
                }
            }
        }
        Op::ConcatRows(parts) => {
            let mut offset = 0;
            for &p in parts {
                let len = nodes[p].value.len();
                if let Some(gp) = acc(grads, nodes, p) {
                    gp.iter_mut()
                        .zip(&g[offset..offset + len])
                        .for_each(|(x, y)| *x += y);
                }
                offset += len;
            }
        }
        &Op::SliceRows { a, start } => {
            let c = out.cols();
            if let Some(ga) = acc(grads, nodes, a) {
                ga[start * c..start * c + g.len()]
                    .iter_mut()
                    .zip(g)
                    .for_each(|(x, y)| *x += y);
            }
        }
        Op::GatherRows { table, ids } => {
            let c = out.cols();
            if let Some(gt) = acc(grads, nodes, *table) {
                for (r, &id) in ids.iter().enumerate() {
                    for j in 0..c {
                        gt[id * c + j] += g[r * c + j];
                    }
                }
            }
        }
        Op::Pick { a, idx } => {
            let c = nodes[*a].value.cols();
            if let Some(ga) = acc(grads, nodes, *a) {
                for (r, &j) in idx.iter().enumerate() {
                    ga[r * c + j] += g[r];
                }
            }
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Gradients of one backward pass, keyed by leaf.
pub struct Gradients {
    leaves: HashMap<usize, Tensor>,
    params: HashMap<String, usize>,
}

impl Gradients {
    pub fn wrt(&self, v: Var<'_>) -> Option<&Tensor> {
        self.leaves.get(&v.id)
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name).and_then(|id| self.leaves.get(id))
    }

    /// Gradients for every named parameter that required them.
    pub fn into_params(mut self) -> HashMap<String, Tensor> {
        self.params
            .into_iter()
            .filter_map(|(name, id)| self.leaves.remove(&id).map(|t| (name, t)))
            .collect()
    }
}

fn shape_panic(op: &str, a: &[usize], b: &[usize]) -> ! {
    panic!("shape mismatch in {op}: {a:?} vs {b:?}")
}

// Named arithmetic methods back the operator impls below.
#[allow(clippy::should_implement_trait)]
impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Ref<'t, Tensor> {
        Ref::map(self.tape.nodes.borrow(), |n| &n[self.id].value)
    }

    pub fn to_tensor(&self) -> Tensor {
        self.value().clone()
    }

    pub fn item(&self) -> f64 {
        self.value().item()
    }

    pub fn shape(&self) -> [usize; 2] {
        let v = self.value();
        [v.rows(), v.cols()]
    }

    pub fn rows(&self) -> usize {
        self.shape()[0]
    }

    pub fn cols(&self) -> usize {
        self.shape()[1]
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].needs_grad
    }

    fn binary(
        self,
        other: Var<'t>,
        name: &str,
        op: Op,
        f: impl Fn(&Tensor, &Tensor) -> Tensor,
    ) -> Var<'t> {
        let (out, ng) = {
            let nodes = self.tape.nodes.borrow();
            let (a, b) = (&nodes[self.id], &nodes[other.id]);
            (f(&a.value, &b.value), a.needs_grad || b.needs_grad)
        };
        let id = self.tape.push(out, op, ng, name);
        self.tape.var(id)
    }

    fn zip_with(
        self,
        other: Var<'t>,
        name: &'static str,
        op: Op,
        f: fn(f64, f64) -> f64,
    ) -> Var<'t> {
        self.binary(other, name, op, |a, b| {
            if a.shape() != b.shape() {
                shape_panic(name, a.shape(), b.shape());
            }
            let data = a
                .data()
                .iter()
                .zip(b.data())
                .map(|(&x, &y)| f(x, y))
                .collect();
            Tensor::new(a.shape().to_vec(), data).expect("same shape")
        })
    }

    fn map(self, name: &str, op: Op, f: impl Fn(f64) -> f64) -> Var<'t> {
        let id = self.tape.unary_out(self, name, op, |t| t.map(&f));
        self.tape.var(id)
    }

    pub fn matmul(self, other: Var<'t>) -> Var<'t> {
        self.matmul_impl(other, false)
    }

    /// `self · otherᵀ`
    pub fn matmul_t(self, other: Var<'t>) -> Var<'t> {
        self.matmul_impl(other, true)
    }

    fn matmul_impl(self, other: Var<'t>, b_trans: bool) -> Var<'t> {
        let op = Op::MatMul {
            a: self.id,
            b: other.id,
            b_trans,
        };
        self.binary(other, "matmul", op, |a, b| {
            let (m, k) = (a.rows(), a.cols());
            let (bk, n) = if b_trans {
                (b.cols(), b.rows())
            } else {
                (b.rows(), b.cols())
            };
            if k != bk {
                shape_panic("matmul", a.shape(), b.shape());
            }
            let mut out = vec![0.0; m * n];
            gemm(m, k, n, a.data(), false, b.data(), b_trans, &mut out, false);
            Tensor::matrix(m, n, out).expect("matmul shape")
        })
    }

    pub fn add(self, other: Var<'t>) -> Var<'t> {
        self.zip_with(other, "add", Op::Add(self.id, other.id), |x, y| x + y)
    }

    pub fn sub(self, other: Var<'t>) -> Var<'t> {
        self.zip_with(other, "sub", Op::Sub(self.id, other.id), |x, y| x - y)
    }

    pub fn mul(self, other: Var<'t>) -> Var<'t> {
        self.zip_with(other, "mul", Op::Mul(self.id, other.id), |x, y| x * y)
    }

    pub fn div(self, other: Var<'t>) -> Var<'t> {
        self.zip_with(other, "div", Op::Div(self.id, other.id), |x, y| x / y)
    }

    /// Adds a `1×c` row to every row.
    pub fn add_row(self, row: Var<'t>) -> Var<'t> {
        let op = Op::AddRow {
            a: self.id,
            row: row.id,
        };
        self.binary(row, "add_row", op, |a, r| {
            if r.len() != a.cols() {
                shape_panic("add_row", a.shape(), r.shape());
            }
            let mut out = a.clone();
            let c = a.cols();
            for chunk in out.data_mut().chunks_mut(c) {
                chunk.iter_mut().zip(r.data()).for_each(|(x, y)| *x += y);
            }
            out
        })
    }

    /// Multiplies every row element-wise by a `1×c` row.
    pub fn mul_row(self, row: Var<'t>) -> Var<'t> {
        let op = Op::MulRow {
            a: self.id,
            row: row.id,
        };
        self.binary(row, "mul_row", op, |a, r| {
            if r.len() != a.cols() {
                shape_panic("mul_row", a.shape(), r.shape());
            }
            let mut out = a.clone();
            let c = a.cols();
            for chunk in out.data_mut().chunks_mut(c) {
                chunk.iter_mut().zip(r.data()).for_each(|(x, y)| *x *= y);
            }
            out
        })
    }

    pub fn scale(self, s: f64) -> Var<'t> {
        self.map("scale", Op::Scale(self.id, s), |x| x * s)
    }

    pub fn add_scalar(self, s: f64) -> Var<'t> {
        self.map("add_scalar", Op::AddScalar(self.id), |x| x + s)
    }

    pub fn neg(self) -> Var<'t> {
        self.scale(-1.0)
    }

    pub fn exp(self) -> Var<'t> {
        self.map("exp", Op::Unary(self.id, Unary::Exp), f64::exp)
    }

    pub fn ln(self) -> Var<'t> {
        self.map("ln", Op::Unary(self.id, Unary::Log), f64::ln)
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.map("sigmoid", Op::Unary(self.id, Unary::Sigmoid), sigmoid)
    }

    pub fn tanh(self) -> Var<'t> {
        self.map("tanh", Op::Unary(self.id, Unary::Tanh), f64::tanh)
    }

    pub fn gelu(self) -> Var<'t> {
        self.map("gelu", Op::Unary(self.id, Unary::Gelu), gelu)
    }

    pub fn relu(self) -> Var<'t> {
        self.map("relu", Op::Unary(self.id, Unary::Relu), |x| x.max(0.0))
    }

    /// Row-wise softmax (last axis).
    pub fn softmax(self) -> Var<'t> {
        self.masked_softmax(None)
    }

    /// Row-wise softmax where entries with `allowed[i] == false` receive
    /// probability zero. Every row must allow at least one entry.
    pub fn masked_softmax(self, allowed: Option<&[bool]>) -> Var<'t> {
        let id = self
            .tape
            .unary_out(self, "softmax", Op::Softmax { a: self.id }, |t| {
                let c = t.cols();
                let mut out = t.clone();
                match allowed {
                    None => out.data_mut().chunks_mut(c).for_each(softmax_in_place),
                    Some(mask) => {
                        assert_eq!(mask.len(), t.len(), "attention mask size");
                        for (row, m) in out.data_mut().chunks_mut(c).zip(mask.chunks(c)) {
                            let max = row
                                .iter()
                                .zip(m)
                                .filter(|(_, &ok)| ok)
                                .map(|(v, _)| *v)
                                .fold(f64::NEG_INFINITY, f64::max);
                            let mut sum = 0.0;
                            for (v, &ok) in row.iter_mut().zip(m) {
                                *v = if ok { (*v - max).exp() } else { 0.0 };
                                sum += *v;
                            }
                            row.iter_mut().for_each(|v| *v /= sum);
                        }
                    }
                }
                out
            });
        self.tape.var(id)
    }

    pub fn log_softmax(self) -> Var<'t> {
        let id = self
            .tape
            .unary_out(self, "log_softmax", Op::LogSoftmax { a: self.id }, |t| {
                let c = t.cols();
                let mut out = t.clone();
                for row in out.data_mut().chunks_mut(c) {
                    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let lse = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
                    row.iter_mut().for_each(|v| *v -= lse);
                }
                out
            });
        self.tape.var(id)
    }

    /// Row-wise standardization (no affine part).
    pub fn layer_norm(self, eps: f64) -> Var<'t> {
        let (out, xhat, inv_std, ng) = {
            let nodes = self.tape.nodes.borrow();
            let n = &nodes[self.id];
            let c = n.value.cols();
            let mut xhat = n.value.data().to_vec();
            let mut inv = Vec::with_capacity(n.value.rows());
            for row in xhat.chunks_mut(c) {
                let mean = row.iter().sum::<f64>() / c as f64;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
                let s = 1.0 / (var + eps).sqrt();
                row.iter_mut().for_each(|v| *v = (*v - mean) * s);
                inv.push(s);
            }
            let out = Tensor::new(n.value.shape().to_vec(), xhat.clone()).expect("shape");
            (out, xhat, inv, n.needs_grad)
        };
        let op = Op::LayerNorm {
            a: self.id,
            xhat,
            inv_std,
        };
        let id = self.tape.push(out, op, ng, "layer_norm");
        self.tape.var(id)
    }

    /// Scales every row to unit Euclidean norm.
    pub fn l2_normalize(self) -> Var<'t> {
        let (out, norms, ng) = {
            let nodes = self.tape.nodes.borrow();
            let n = &nodes[self.id];
            let c = n.value.cols();
            let mut data = n.value.data().to_vec();
            let mut norms = Vec::with_capacity(n.value.rows());
            for row in data.chunks_mut(c) {
                let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                row.iter_mut().for_each(|v| *v /= norm);
                norms.push(norm);
            }
            let out = Tensor::new(n.value.shape().to_vec(), data).expect("shape");
            (out, norms, n.needs_grad)
        };
        let id = self.tape.push(
            out,
            Op::L2Normalize { a: self.id, norms },
            ng,
            "l2_normalize",
        );
        self.tape.var(id)
    }

    pub fn transpose(self) -> Var<'t> {
        let id = self
            .tape
            .unary_out(self, "transpose", Op::Transpose(self.id), Tensor::transpose);
        self.tape.var(id)
    }

    pub fn sum(self) -> Var<'t> {
        let id = self.tape.unary_out(self, "sum", Op::SumAll(self.id), |t| {
            Tensor::scalar(t.data().iter().sum())
        });
        self.tape.var(id)
    }

    pub fn mean(self) -> Var<'t> {
        let id = self
            .tape
            .unary_out(self, "mean", Op::MeanAll(self.id), |t| {
                Tensor::scalar(t.data().iter().sum::<f64>() / t.len() as f64)
            });
        self.tape.var(id)
    }

    /// Mean over rows: `r×c → 1×c`.
    pub fn mean_rows(self) -> Var<'t> {
        let id = self
            .tape
            .unary_out(self, "mean_rows", Op::MeanRows(self.id), |t| {
                let (r, c) = (t.rows(), t.cols());
                let mut out = vec![0.0; c];
                for row in t.data().chunks(c) {
                    out.iter_mut().zip(row).for_each(|(x, y)| *x += y);
                }
                out.iter_mut().for_each(|x| *x /= r as f64);
                Tensor::row_vector(out)
            });
        self.tape.var(id)
    }

    /// Sum of each row: `r×c → r×1`.
    pub fn sum_cols(self) -> Var<'t> {
        let id = self
            .tape
            .unary_out(self, "sum_cols", Op::SumRows(self.id), |t| {
                let c = t.cols();
                let data: Vec<f64> = t.data().chunks(c).map(|r| r.iter().sum()).collect();
                Tensor::matrix(data.len(), 1, data).expect("shape")
            });
        self.tape.var(id)
    }

    /// Column-wise max within consecutive groups of `group` rows:
    /// `(n·group)×c → n×c`.
    pub fn max_groups(self, group: usize) -> Var<'t> {
        let (out, argmax, ng) = {
            let nodes = self.tape.nodes.borrow();
            let n = &nodes[self.id];
            let (r, c) = (n.value.rows(), n.value.cols());
            assert!(
                group > 0 && r % group == 0,
                "max_groups: {r} rows not divisible by {group}"
            );
            let groups = r / group;
            let mut out = vec![f64::NEG_INFINITY; groups * c];
            let mut arg = vec![0usize; groups * c];
            for gi in 0..groups {
                for t in 0..group {
                    let src = gi * group + t;
                    for j in 0..c {
                        let v = n.value.data()[src * c + j];
                        if v > out[gi * c + j] {
                            out[gi * c + j] = v;
                            arg[gi * c + j] = src;
                        }
                    }
                }
            }
            (
                Tensor::matrix(groups, c, out).expect("shape"),
                arg,
                n.needs_grad,
            )
        };
        let id = self
            .tape
            .push(out, Op::MaxGroups { a: self.id, argmax }, ng, "max_groups");
        self.tape.var(id)
    }

    pub fn slice_rows(self, start: usize, len: usize) -> Var<'t> {
        let op = Op::SliceRows { a: self.id, start };
        let id = self.tape.unary_out(self, "slice_rows", op, |t| {
            let c = t.cols();
            assert!(
                len > 0 && start + len <= t.rows(),
                "slice_rows out of range"
            );
            Tensor::matrix(len, c, t.data()[start * c..(start + len) * c].to_vec()).expect("shape")
        });
        self.tape.var(id)
    }

    pub fn row(self, r: usize) -> Var<'t> {
        self.slice_rows(r, 1)
    }

    /// Picks `self[r, idx[r]]` for every row: `r×c → r×1`.
    pub fn pick(self, idx: &[usize]) -> Var<'t> {
        let op = Op::Pick {
            a: self.id,
            idx: idx.to_vec(),
        };
        let id = self.tape.unary_out(self, "pick", op, |t| {
            assert_eq!(idx.len(), t.rows(), "pick: one index per row");
            let data: Vec<f64> = idx.iter().enumerate().map(|(r, &j)| t.at(r, j)).collect();
            Tensor::matrix(idx.len(), 1, data).expect("shape")
        });
        self.tape.var(id)
    }

    /// Rows of `self` (a lookup table) selected by `ids`.
    pub fn gather_rows(self, ids: &[usize]) -> Var<'t> {
        let op = Op::GatherRows {
            table: self.id,
            ids: ids.to_vec(),
        };
        let id = self.tape.unary_out(self, "gather_rows", op, |t| {
            let c = t.cols();
            let mut data = Vec::with_capacity(ids.len() * c);
            for &i in ids {
                data.extend_from_slice(t.row(i));
            }
            Tensor::matrix(ids.len(), c, data).expect("shape")
        });
        self.tape.var(id)
    }

    pub fn reshape(self, rows: usize, cols: usize) -> Var<'t> {
        let id = self
            .tape
            .unary_out(self, "reshape", Op::Reshape(self.id), |t| {
                t.clone().reshape(vec![rows, cols]).expect("reshape size")
            });
        self.tape.var(id)
    }
}

/// Vertical concatenation.
pub fn concat_rows<'t>(parts: &[Var<'t>]) -> Var<'t> {
    assert!(!parts.is_empty(), "concat_rows of nothing");
    let tape = parts[0].tape;
    let (out, ng) = {
        let nodes = tape.nodes.borrow();
        let c = nodes[parts[0].id].value.cols();
        let mut data = Vec::new();
        let mut rows = 0;
        let mut ng = false;
        for p in parts {
            let n = &nodes[p.id];
            if n.value.cols() != c {
                shape_panic("concat_rows", &[rows, c], n.value.shape());
            }
            data.extend_from_slice(n.value.data());
            rows += n.value.rows();
            ng |= n.needs_grad;
        }
        (Tensor::matrix(rows, c, data).expect("shape"), ng)
    };
    let op = Op::ConcatRows(parts.iter().map(|p| p.id).collect());
    let id = tape.push(out, op, ng, "concat_rows");
    tape.var(id)
}

/// Sum of several same-shape values.
pub fn sum_all<'t>(parts: &[Var<'t>]) -> Var<'t> {
    let mut it = parts.iter().copied();
    let first = it.next().expect("sum of nothing");
    it.fold(first, |acc, v| acc.add(v))
}

impl<'t> std::ops::Add for Var<'t> {
    type Output = Var<'t>;
    fn add(self, rhs: Self) -> Self::Output {
        Var::add(self, rhs)
    }
}

impl<'t> std::ops::Sub for Var<'t> {
    type Output = Var<'t>;
    fn sub(self, rhs: Self) -> Self::Output {
        Var::sub(self, rhs)
    }
}

impl<'t> std::ops::Mul for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, rhs: Self) -> Self::Output {
        Var::mul(self, rhs)
    }
}

/// Shared handle so callers can hold tensors without copying per pass.
pub type SharedTensor = Rc<Tensor>;
