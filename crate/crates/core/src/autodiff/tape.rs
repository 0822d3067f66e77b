//! Tape-based reverse-mode differentiation.
//!
//! Every primitive appends one record to a [`Tape`]: the forward value and
//! the operation that produced it. [`Tape::backward`] walks the records in
//! reverse order and applies each operation's pullback, accumulating
//! cotangents into its inputs. A tape is built for one forward pass and then
//! discarded.
//!
//! ```
//! use diveq::autodiff::Tape;
//! use diveq::Tensor;
//!
//! let tape = Tape::new();
//! let x = tape.var(Tensor::vector(vec![1.0, 2.0]));
//! let loss = x.square().unwrap().sum().unwrap();
//! let grads = loss.backward().unwrap();
//! assert_eq!(grads.wrt(x).data(), &[2.0, 4.0]);
//! ```

use std::cell::{Ref, RefCell};
use std::fmt;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Magnitude guard added to denominators in division and norm pullbacks.
pub const GUARD_EPS: f64 = 1e-12;

enum Op {
    Leaf,
    Constant,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    MatMul(usize, usize),
    Transpose(usize),
    Exp(usize),
    Log(usize),
    Square(usize),
    Relu(usize),
    Tanh(usize),
    Sum(usize),
    Mean(usize),
    RowSums(usize),
    ColumnMeans(usize),
    L2Norm(usize),
    RowNorms(usize),
    Softmax(usize),
    AddRow(usize, usize),
    AddColumn(usize, usize),
    MulColumn(usize, usize),
    GatherRows(usize, Vec<usize>),
    /// Records the cut; no input is kept so nothing flows back.
    StopGradient,
    StraightThrough(usize),
    RowLinear(usize, Tensor),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Constant => "constant",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::MatMul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Square(..) => "square",
            Op::Relu(..) => "relu",
            Op::Tanh(..) => "tanh",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::RowSums(..) => "row_sums",
            Op::ColumnMeans(..) => "column_means",
            Op::L2Norm(..) => "l2norm",
            Op::RowNorms(..) => "row_norms",
            Op::Softmax(..) => "softmax",
            Op::AddRow(..) => "add_row",
            Op::AddColumn(..) => "add_column",
            Op::MulColumn(..) => "mul_column",
            Op::GatherRows(..) => "gather_rows",
            Op::StopGradient => "stop_gradient",
            Op::StraightThrough(..) => "straight_through",
            Op::RowLinear(..) => "row_linear",
        }
    }

    fn inputs(&self) -> Vec<usize> {
        match *self {
            Op::Leaf | Op::Constant => vec![],
            Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::Div(a, b)
            | Op::MatMul(a, b)
            | Op::AddRow(a, b)
            | Op::AddColumn(a, b)
            | Op::MulColumn(a, b) => vec![a, b],
            Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::Transpose(a)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Square(a)
            | Op::Relu(a)
            | Op::Tanh(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::RowSums(a)
            | Op::ColumnMeans(a)
            | Op::L2Norm(a)
            | Op::RowNorms(a)
            | Op::Softmax(a)
            | Op::GatherRows(a, _)
            | Op::StraightThrough(a)
            | Op::RowLinear(a, _) => vec![a],
            // an sg node has no differentiable inputs
            Op::StopGradient => vec![],
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// An append-only record of primitive operations.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape")
            .field("len", &self.nodes.borrow().len())
            .finish()
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
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

    /// Records a differentiable leaf.
    pub fn var(&self, value: Tensor) -> Var<'_> {
        self.push_unchecked(value, Op::Leaf, true)
    }

    /// Records a leaf that never receives a cotangent.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push_unchecked(value, Op::Constant, false)
    }

    /// A node whose forward value is `forward` and whose pullback copies the
    /// cotangent into `surrogate` unchanged.
    pub fn straight_through<'t>(&'t self, forward: Tensor, surrogate: Var<'t>) -> Result<Var<'t>> {
        self.check_owner(surrogate)?;
        let shape = surrogate.shape();
        if forward.shape() != shape.as_slice() {
            return Err(Error::shape("straight_through", forward.shape(), &shape));
        }
        self.push(forward, Op::StraightThrough(surrogate.id))
    }

    fn check_owner(&self, v: Var<'_>) -> Result<()> {
        if std::ptr::eq(self, v.tape) {
            Ok(())
        } else {
            Err(Error::Usage("variable belongs to a different tape".into()))
        }
    }

    fn push_unchecked(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
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

    fn push(&self, value: Tensor, op: Op) -> Result<Var<'_>> {
        if !value.is_finite() {
            return Err(Error::Domain {
                op: op.name(),
                detail: "non-finite output".into(),
            });
        }
        let requires_grad = {
            let nodes = self.nodes.borrow();
            op.inputs().iter().any(|&i| nodes[i].requires_grad)
        };
        Ok(self.push_unchecked(value, op, requires_grad))
    }

    fn value(&self, id: usize) -> Ref<'_, Tensor> {
        Ref::map(self.nodes.borrow(), |n| &n[id].value)
    }

    /// Propagates `seed` from `output` back to every recorded node.
    pub fn backward(&self, output: Var<'_>, seed: &Tensor) -> Result<Gradients> {
        self.check_owner(output)?;
        let nodes = self.nodes.borrow();
        if nodes.is_empty() {
            return Err(Error::Usage("backward called before any forward operation".into()));
        }
        let out_shape = nodes[output.id].value.shape();
        if seed.shape() != out_shape {
            return Err(Error::shape("backward", seed.shape(), out_shape));
        }

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[output.id] = Some(seed.data().to_vec());

        for id in (0..=output.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let (before, rest) = grads.split_at_mut(id);
            let Some(g) = rest[0].as_deref() else {
                continue;
            };
            pullback(&nodes, node, g, before);
        }

        let shapes = nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        let live = nodes.iter().map(|n| n.requires_grad).collect::<Vec<_>>();
        for (slot, live) in grads.iter_mut().zip(live) {
            if !live {
                *slot = None;
            }
        }
        Ok(Gradients { grads, shapes })
    }
}

/// Cotangents produced by [`Tape::backward`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Cotangent of `var`; zeros if no cotangent reached it.
    pub fn wrt(&self, var: Var<'_>) -> Tensor {
        let shape = self.shapes[var.id].clone();
        match &self.grads[var.id] {
            Some(g) => Tensor::new(shape, g.clone()).expect("gradient shape"),
            None => Tensor::zeros(&shape),
        }
    }
}

fn slot<'a>(grads: &'a mut [Option<Vec<f64>>], nodes: &[Node], id: usize) -> Option<&'a mut Vec<f64>> {
    if !nodes[id].requires_grad {
        return None;
    }
    let len = nodes[id].value.len();
    Some(grads[id].get_or_insert_with(|| vec![0.0; len]))
}

fn pullback(nodes: &[Node], node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let out = &node.value;
    let val = |id: usize| &nodes[id].value;
    match &node.op {
        Op::Leaf | Op::Constant | Op::StopGradient => {}
        Op::Add(a, b) => {
            if let Some(ga) = slot(grads, nodes, *a) {
                ga.iter_mut().zip(g).for_each(|(x, g)| *x += g);
            }
            if let Some(gb) = slot(grads, nodes, *b) {
                gb.iter_mut().zip(g).for_each(|(x, g)| *x += g);
            }
        }
        Op::Sub(a, b) => {
            if let Some(ga) = slot(grads, nodes, *a) {
                ga.iter_mut().zip(g).for_each(|(x, g)| *x += g);
            }
            if let Some(gb) = slot(grads, nodes, *b) {
                gb.iter_mut().zip(g).for_each(|(x, g)| *x -= g);
            }
        }
        Op::Mul(a, b) => {
            let (av, bv) = (val(*a).data(), val(*b).data());
            if let Some(ga) = slot(grads, nodes, *a) {
                for i in 0..g.len() {
                    ga[i] += g[i] * bv[i];
                }
            }
            if let Some(gb) = slot(grads, nodes, *b) {
                for i in 0..g.len() {
                    gb[i] += g[i] * av[i];
                }
            }
        }
        Op::Div(a, b) => {
            let (av, bv) = (val(*a).data(), val(*b).data());
            if let Some(ga) = slot(grads, nodes, *a) {
                for i in 0..g.len() {
                    ga[i] += g[i] / guard(bv[i]);
                }
            }
            if let Some(gb) = slot(grads, nodes, *b) {
                for i in 0..g.len() {
                    let d = guard(bv[i]);
                    gb[i] -= g[i] * av[i] / (d * d);
                }
            }
        }
        Op::Scale(a, s) => {
            if let Some(ga) = slot(grads, nodes, *a) {
                ga.iter_mut().zip(g).for_each(|(x, g)| *x += s * g);
            }
        }
        Op::AddScalar(a) | Op::StraightThrough(a) => {
            if let Some(ga) = slot(grads, nodes, *a) {
                ga.iter_mut().zip(g).for_each(|(x, g)| *x += g);
            }
        }
        Op::MatMul(a, b) => {
            let (at, bt) = (val(*a), val(*b));
            let (n, k, m) = (at.shape()[0], at.shape()[1], bt.shape()[1]);
            let (av, bv) = (at.data(), bt.data());
            if let Some(ga) = slot(grads, nodes, *a) {
                for i in 0..n {
                    for p in 0..k {
                        let mut s = 0.0;
                        for j in 0..m {
                            s += g[i * m + j] * bv[p * m + j];
                        }
                        ga[i * k + p] += s;
                    }
                }
            }
            if let Some(gb) = slot(grads, nodes, *b) {
                for p in 0..k {
                    for i in 0..n {
                        let a_ip = av[i * k + p];
                        for j in 0..m {
                            gb[p * m + j] += a_ip * g[i * m + j];
                        }
                    }
                }
            }
        }
        Op::Transpose(a) => {
            let (r, c) = (out.shape()[0], out.shape()[1]);
            if let Some(ga) = slot(grads, nodes, *a) {
                // out is r x c, input is c x r
                for i in 0..r {
                    for j in 0..c {
                        ga[j * r + i] += g[i * c + j];
                    }
                }
            }
        }
        Op::Exp(a) => {
            let y = out.data();
            if let Some(ga) = slot(grads, nodes, *a) {
                for i in 0..g.len() {
                    ga[i] += g[i] * y[i];
                }
            }
        }
        Op::Log(a) => {
            let x = val(*a).data();
            if let Some(ga) = slot(grads, nodes, *a) {
                for i in 0..g.len() {
                    ga[i] += g[i] / x[i];
                }
            }
        }
        Op::Square(a) => {
            let x = val(*a).data();
            if let Some(ga) = slot(grads, nodes, *a) {
                for i in 0..g.len() {
                    ga[i] += 2.0 * x[i] * g[i];
                }
            }
        }
        Op::Relu(a) => {
            let x = val(*a).data();
            if let Some(ga) = slot(grads, nodes, *a) {
                for i in 0..g.len() {
                    if x[i] > 0.0 {
                        ga[i] += g[i];
                    }
                }
            }
        }
        Op::Tanh(a) => {
            let y = out.data();
            if let Some(ga) = slot(grads, nodes, *a) {
                for i in 0..g.len() {
                    ga[i] += g[i] * (1.0 - y[i] * y[i]);
                }
            }
        }
        Op::Sum(a) => {
            if let Some(ga) = slot(grads, nodes, *a) {
                ga.iter_mut().for_each(|x| *x += g[0]);
            }
        }
        Op::Mean(a) => {
            if let Some(ga) = slot(grads, nodes, *a) {
                let scale = g[0] / ga.len() as f64;
                ga.iter_mut().for_each(|x| *x += scale);
            }
        }
        Op::RowSums(a) => {
            let c = val(*a).cols();
            if let Some(ga) = slot(grads, nodes, *a) {
                for (i, row) in ga.chunks_exact_mut(c).enumerate() {
                    row.iter_mut().for_each(|x| *x += g[i]);
                }
            }
        }
        Op::ColumnMeans(a) => {
            let t = val(*a);
            let (r, c) = (t.rows(), t.cols());
            if let Some(ga) = slot(grads, nodes, *a) {
                for row in ga.chunks_exact_mut(c) {
                    for j in 0..c {
                        row[j] += g[j] / r as f64;
                    }
                }
            }
        }
        Op::L2Norm(a) => {
            let x = val(*a).data();
            let n = out.item();
            if let Some(ga) = slot(grads, nodes, *a) {
                for i in 0..x.len() {
                    ga[i] += g[0] * x[i] / (n + GUARD_EPS);
                }
            }
        }
        Op::RowNorms(a) => {
            let t = val(*a);
            let c = t.cols();
            let norms = out.data();
            if let Some(ga) = slot(grads, nodes, *a) {
                for (i, (grow, xrow)) in ga.chunks_exact_mut(c).zip(t.data().chunks_exact(c)).enumerate() {
                    let s = g[i] / (norms[i] + GUARD_EPS);
                    for j in 0..c {
                        grow[j] += s * xrow[j];
                    }
                }
            }
        }
        Op::Softmax(a) => {
            let c = out.cols();
            if let Some(ga) = slot(grads, nodes, *a) {
                for ((grow, yrow), gout) in ga
                    .chunks_exact_mut(c)
                    .zip(out.data().chunks_exact(c))
                    .zip(g.chunks_exact(c))
                {
                    let dot: f64 = yrow.iter().zip(gout).map(|(y, g)| y * g).sum();
                    for j in 0..c {
                        grow[j] += yrow[j] * (gout[j] - dot);
                    }
                }
            }
        }
        Op::AddRow(a, b) => {
            let c = out.cols();
            if let Some(ga) = slot(grads, nodes, *a) {
                ga.iter_mut().zip(g).for_each(|(x, g)| *x += g);
            }
            if let Some(gb) = slot(grads, nodes, *b) {
                for row in g.chunks_exact(c) {
                    for j in 0..c {
                        gb[j] += row[j];
                    }
                }
            }
        }
        Op::AddColumn(a, b) => {
            let c = out.cols();
            if let Some(ga) = slot(grads, nodes, *a) {
                ga.iter_mut().zip(g).for_each(|(x, g)| *x += g);
            }
            if let Some(gb) = slot(grads, nodes, *b) {
                for (i, row) in g.chunks_exact(c).enumerate() {
                    gb[i] += row.iter().sum::<f64>();
                }
            }
        }
        Op::MulColumn(a, s) => {
            let c = out.cols();
            let (av, sv) = (val(*a).data(), val(*s).data());
            if let Some(ga) = slot(grads, nodes, *a) {
                for i in 0..g.len() {
                    ga[i] += g[i] * sv[i / c];
                }
            }
            if let Some(gs) = slot(grads, nodes, *s) {
                for (i, (grow, arow)) in g.chunks_exact(c).zip(av.chunks_exact(c)).enumerate() {
                    gs[i] += grow.iter().zip(arow).map(|(g, a)| g * a).sum::<f64>();
                }
            }
        }
        Op::GatherRows(a, indices) => {
            let c = out.cols();
            if let Some(ga) = slot(grads, nodes, *a) {
                for (n, &k) in indices.iter().enumerate() {
                    for j in 0..c {
                        ga[k * c + j] += g[n * c + j];
                    }
                }
            }
        }
        Op::RowLinear(a, mats) => {
            let d = out.cols();
            let m = mats.data();
            if let Some(ga) = slot(grads, nodes, *a) {
                for n in 0..out.rows() {
                    let base = n * d * d;
                    for i in 0..d {
                        let gi = g[n * d + i];
                        for j in 0..d {
                            ga[n * d + j] += m[base + i * d + j] * gi;
                        }
                    }
                }
            }
        }
    }
}

fn guard(b: f64) -> f64 {
    if b >= 0.0 {
        b + GUARD_EPS
    } else {
        b - GUARD_EPS
    }
}

fn as_matrix_shape(t: &Tensor) -> (usize, usize) {
    match t.ndim() {
        0 => (1, 1),
        1 => (1, t.shape()[0]),
        _ => (t.rows(), t.cols()),
    }
}

// fallible ops; the std operator traits cannot return Result
#[allow(clippy::should_implement_trait)]
impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Tensor {
        self.tape.value(self.id).clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.value(self.id).shape().to_vec()
    }

    /// Value of a one-element variable.
    pub fn item(&self) -> f64 {
        self.tape.value(self.id).data()[0]
    }

    /// Backpropagates from a scalar output with seed 1.
    pub fn backward(&self) -> Result<Gradients> {
        let shape = self.shape();
        if shape.iter().product::<usize>() != 1 {
            return Err(Error::Usage(format!(
                "implicit seed needs a one-element output, got shape {shape:?}"
            )));
        }
        self.tape.backward(*self, &Tensor::full(&shape, 1.0))
    }

    fn unary(self, op: impl FnOnce(usize) -> Op, f: impl Fn(f64) -> f64) -> Result<Var<'t>> {
        let value = {
            let x = self.tape.value(self.id);
            Tensor::new(x.shape().to_vec(), x.data().iter().map(|&v| f(v)).collect())?
        };
        self.tape.push(value, op(self.id))
    }

    fn elementwise(
        self,
        other: Var<'t>,
        name: &'static str,
        op: impl FnOnce(usize, usize) -> Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var<'t>> {
        self.tape.check_owner(other)?;
        let value = {
            let (a, b) = (self.tape.value(self.id), self.tape.value(other.id));
            if a.shape() != b.shape() {
                return Err(Error::shape(name, a.shape(), b.shape()));
            }
            let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
            Tensor::new(a.shape().to_vec(), data)?
        };
        self.tape.push(value, op(self.id, other.id))
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.elementwise(other, "add", Op::Add, |a, b| a + b)
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.elementwise(other, "sub", Op::Sub, |a, b| a - b)
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.elementwise(other, "mul", Op::Mul, |a, b| a * b)
    }

    /// Elementwise division with the denominator pushed `GUARD_EPS` away from zero.
    pub fn div(self, other: Var<'t>) -> Result<Var<'t>> {
        self.elementwise(other, "div", Op::Div, |a, b| a / guard(b))
    }

    pub fn scale(self, s: f64) -> Result<Var<'t>> {
        self.unary(|a| Op::Scale(a, s), |v| s * v)
    }

    pub fn neg(self) -> Result<Var<'t>> {
        self.scale(-1.0)
    }

    pub fn add_scalar(self, c: f64) -> Result<Var<'t>> {
        self.unary(Op::AddScalar, |v| v + c)
    }

    pub fn exp(self) -> Result<Var<'t>> {
        self.unary(Op::Exp, f64::exp)
    }

    /// Natural log; errors on non-positive entries.
    pub fn log(self) -> Result<Var<'t>> {
        if let Some(bad) = self.tape.value(self.id).data().iter().find(|&&v| v <= 0.0) {
            return Err(Error::Domain {
                op: "log",
                detail: format!("non-positive input {bad}"),
            });
        }
        self.unary(Op::Log, f64::ln)
    }

    pub fn square(self) -> Result<Var<'t>> {
        self.unary(Op::Square, |v| v * v)
    }

    pub fn relu(self) -> Result<Var<'t>> {
        self.unary(Op::Relu, |v| v.max(0.0))
    }

    pub fn tanh(self) -> Result<Var<'t>> {
        self.unary(Op::Tanh, f64::tanh)
    }

    pub fn stop_gradient(self) -> Result<Var<'t>> {
        let value = self.value();
        self.tape.push(value, Op::StopGradient)
    }

    pub fn sum(self) -> Result<Var<'t>> {
        let s = self.tape.value(self.id).data().iter().sum();
        self.tape.push(Tensor::scalar(s), Op::Sum(self.id))
    }

    pub fn mean(self) -> Result<Var<'t>> {
        let m = {
            let x = self.tape.value(self.id);
            if x.is_empty() {
                return Err(Error::Domain {
                    op: "mean",
                    detail: "empty input".into(),
                });
            }
            x.data().iter().sum::<f64>() / x.len() as f64
        };
        self.tape.push(Tensor::scalar(m), Op::Mean(self.id))
    }

    /// Euclidean norm of all entries.
    pub fn l2norm(self) -> Result<Var<'t>> {
        let n = self.tape.value(self.id).sum_squares().sqrt();
        self.tape.push(Tensor::scalar(n), Op::L2Norm(self.id))
    }

    fn require_matrix(&self, op: &'static str) -> Result<(usize, usize)> {
        let x = self.tape.value(self.id);
        if x.ndim() != 2 {
            return Err(Error::shape(op, x.shape(), &[0, 0]));
        }
        Ok((x.rows(), x.cols()))
    }

    /// `N x D -> N x 1` sums along each row.
    pub fn row_sums(self) -> Result<Var<'t>> {
        let (r, _) = self.require_matrix("row_sums")?;
        let data = self.tape.value(self.id).iter_rows().map(|row| row.iter().sum()).collect();
        self.tape.push(Tensor::matrix(r, 1, data)?, Op::RowSums(self.id))
    }

    /// `N x D -> N x 1` Euclidean norm of each row.
    pub fn row_norms(self) -> Result<Var<'t>> {
        let (r, _) = self.require_matrix("row_norms")?;
        let data = self
            .tape
            .value(self.id)
            .iter_rows()
            .map(|row| row.iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect();
        self.tape.push(Tensor::matrix(r, 1, data)?, Op::RowNorms(self.id))
    }

    /// `N x D -> 1 x D` mean over rows.
    pub fn column_means(self) -> Result<Var<'t>> {
        let (r, c) = self.require_matrix("column_means")?;
        if r == 0 {
            return Err(Error::Domain {
                op: "column_means",
                detail: "no rows".into(),
            });
        }
        let mut data = vec![0.0; c];
        for row in self.tape.value(self.id).iter_rows() {
            for j in 0..c {
                data[j] += row[j];
            }
        }
        data.iter_mut().for_each(|v| *v /= r as f64);
        self.tape.push(Tensor::matrix(1, c, data)?, Op::ColumnMeans(self.id))
    }

    pub fn transpose(self) -> Result<Var<'t>> {
        let (r, c) = self.require_matrix("transpose")?;
        let mut data = vec![0.0; r * c];
        {
            let x = self.tape.value(self.id);
            let xv = x.data();
            for i in 0..r {
                for j in 0..c {
                    data[j * r + i] = xv[i * c + j];
                }
            }
        }
        self.tape.push(Tensor::matrix(c, r, data)?, Op::Transpose(self.id))
    }

    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.tape.check_owner(other)?;
        let value = {
            let (a, b) = (self.tape.value(self.id), self.tape.value(other.id));
            if a.ndim() != 2 || b.ndim() != 2 || a.shape()[1] != b.shape()[0] {
                return Err(Error::shape("matmul", a.shape(), b.shape()));
            }
            let (n, k, m) = (a.shape()[0], a.shape()[1], b.shape()[1]);
            let (av, bv) = (a.data(), b.data());
            let mut out = vec![0.0; n * m];
            for i in 0..n {
                for p in 0..k {
                    let a_ip = av[i * k + p];
                    for j in 0..m {
                        out[i * m + j] += a_ip * bv[p * m + j];
                    }
                }
            }
            Tensor::matrix(n, m, out)?
        };
        self.tape.push(value, Op::MatMul(self.id, other.id))
    }

    /// Row-wise softmax (a vector is a single row).
    pub fn softmax(self) -> Result<Var<'t>> {
        let value = {
            let x = self.tape.value(self.id);
            let (_, c) = as_matrix_shape(&x);
            let mut data = Vec::with_capacity(x.len());
            for row in x.data().chunks_exact(c.max(1)) {
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
                let total: f64 = exps.iter().sum();
                data.extend(exps.into_iter().map(|e| e / total));
            }
            Tensor::new(x.shape().to_vec(), data)?
        };
        self.tape.push(value, Op::Softmax(self.id))
    }

    /// Adds a `1 x M` row to every row of an `N x M` matrix.
    pub fn add_row(self, row: Var<'t>) -> Result<Var<'t>> {
        self.tape.check_owner(row)?;
        let value = {
            let (a, b) = (self.tape.value(self.id), self.tape.value(row.id));
            let (_, c) = as_matrix_shape(&a);
            if a.ndim() != 2 || b.len() != c || as_matrix_shape(&b).0 != 1 {
                return Err(Error::shape("add_row", a.shape(), b.shape()));
            }
            let data = a
                .data()
                .iter()
                .enumerate()
                .map(|(i, v)| v + b.data()[i % c])
                .collect();
            Tensor::new(a.shape().to_vec(), data)?
        };
        self.tape.push(value, Op::AddRow(self.id, row.id))
    }

    /// Adds an `N x 1` column to every column of an `N x M` matrix.
    pub fn add_column(self, column: Var<'t>) -> Result<Var<'t>> {
        self.tape.check_owner(column)?;
        let value = {
            let (a, b) = (self.tape.value(self.id), self.tape.value(column.id));
            if a.ndim() != 2 || b.shape() != [a.rows(), 1] {
                return Err(Error::shape("add_column", a.shape(), b.shape()));
            }
            let c = a.cols();
            let data = a
                .data()
                .iter()
                .enumerate()
                .map(|(i, v)| v + b.data()[i / c])
                .collect();
            Tensor::new(a.shape().to_vec(), data)?
        };
        self.tape.push(value, Op::AddColumn(self.id, column.id))
    }

    /// Scales row `n` of an `N x D` matrix by entry `n` of an `N x 1` column.
    pub fn mul_column(self, column: Var<'t>) -> Result<Var<'t>> {
        self.tape.check_owner(column)?;
        let value = {
            let (a, b) = (self.tape.value(self.id), self.tape.value(column.id));
            if a.ndim() != 2 || b.shape() != [a.rows(), 1] {
                return Err(Error::shape("mul_column", a.shape(), b.shape()));
            }
            let c = a.cols();
            let data = a
                .data()
                .iter()
                .enumerate()
                .map(|(i, v)| v * b.data()[i / c])
                .collect();
            Tensor::new(a.shape().to_vec(), data)?
        };
        self.tape.push(value, Op::MulColumn(self.id, column.id))
    }

    /// Selects rows of a `K x D` matrix; the pullback scatter-adds into them.
    pub fn gather_rows(self, indices: &[usize]) -> Result<Var<'t>> {
        let value = {
            let x = self.tape.value(self.id);
            if x.ndim() != 2 {
                return Err(Error::shape("gather_rows", x.shape(), &[0, 0]));
            }
            if let Some(&bad) = indices.iter().find(|&&i| i >= x.rows()) {
                return Err(Error::Domain {
                    op: "gather_rows",
                    detail: format!("row {bad} out of range for {} rows", x.rows()),
                });
            }
            x.select_rows(indices)
        };
        self.tape.push(value, Op::GatherRows(self.id, indices.to_vec()))
    }

    /// Applies a fixed `D x D` matrix to each row: `out[n] = M[n] x[n]`.
    /// `matrices` has shape `N x D x D` and is treated as a constant.
    pub fn row_linear(self, matrices: Tensor) -> Result<Var<'t>> {
        let value = {
            let x = self.tape.value(self.id);
            let (n, d) = (x.rows(), x.cols());
            if x.ndim() != 2 || matrices.shape() != [n, d, d] {
                return Err(Error::shape("row_linear", x.shape(), matrices.shape()));
            }
            let m = matrices.data();
            let mut out = vec![0.0; n * d];
            for s in 0..n {
                let row = x.row(s);
                for i in 0..d {
                    out[s * d + i] = (0..d).map(|j| m[s * d * d + i * d + j] * row[j]).sum();
                }
            }
            Tensor::matrix(n, d, out)?
        };
        self.tape.push(value, Op::RowLinear(self.id, matrices))
    }
}
