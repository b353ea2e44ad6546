//! Reverse-mode automatic differentiation over dense 2-D tensors.
//!
//! A [`Graph`] is an append-only arena of nodes. Building an expression
//! records each operation; [`Graph::backward`] walks the arena in reverse
//! (which is a reverse topological order by construction) and accumulates
//! gradients into leaf nodes. A graph lives for one training step.
//!
//! Vectors are `1 × n` rows and scalars are `1 × 1`. Binary elementwise ops
//! broadcast along any axis of length 1.

pub mod math;
mod container;
mod params;

pub use container::{TensorContainer, TensorEntry, MAGIC, FORMAT_VERSION};
pub use math::tanh;
pub use params::{AdamConfig, Bindings, Grads, ParamStore, PlateauScheduler};

use ndarray::{s, Array2, Axis, Zip};

use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    Tanh(Var),
    Softplus(Var),
    Exp(Var),
    Ln(Var),
    Sqrt(Var),
    Square(Var),
    Sum(Var),
    Mean(Var),
    SumRows(Var),
    SumCols(Var),
    MaxRows(Var, Vec<usize>),
    Concat(Vec<Var>),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    BroadcastRows(Var),
    Transpose(Var),
}

#[derive(Debug)]
struct Node {
    value: Array2<f64>,
    op: Op,
    needs_grad: bool,
    grad: Option<Array2<f64>>,
}

fn shape_of(a: &Array2<f64>) -> Vec<usize> {
    a.shape().to_vec()
}

fn broadcast_dim(a: usize, b: usize) -> Option<usize> {
    match (a, b) {
        _ if a == b => Some(a),
        (1, n) | (n, 1) => Some(n),
        _ => None,
    }
}

/// Sums `g` down to `shape` along broadcast axes.
fn reduce_to(g: &Array2<f64>, shape: (usize, usize)) -> Array2<f64> {
    let mut out = g.clone();
    if shape.0 == 1 && out.nrows() != 1 {
        out = out.sum_axis(Axis(0)).insert_axis(Axis(0));
    }
    if shape.1 == 1 && out.ncols() != 1 {
        out = out.sum_axis(Axis(1)).insert_axis(Axis(1));
    }
    out
}

#[inline]
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn accumulate(slot: &mut Option<Array2<f64>>, g: Array2<f64>) {
    match slot {
        Some(acc) => *acc += &g,
        None => *slot = Some(g),
    }
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
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

    /// Drops every node; previously issued [`Var`]s become invalid.
    pub fn clear(&mut self) {
        self.nodes.clear();
    }

    fn push(&mut self, value: Array2<f64>, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A differentiable leaf.
    pub fn param(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A constant leaf: no gradient is tracked through it.
    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.constant(Array2::from_elem((1, 1), v))
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.ng(v)
    }

    /// Accumulated gradient of a differentiable leaf (`None` before any
    /// backward pass reached it).
    pub fn grad(&self, v: Var) -> Option<&Array2<f64>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.ncols() != vb.nrows() {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                left: shape_of(va),
                right: shape_of(vb),
            });
        }
        let out = va.dot(vb);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::MatMul(a, b), ng))
    }

    fn broadcast_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(usize, usize)> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        match (broadcast_dim(sa.0, sb.0), broadcast_dim(sa.1, sb.1)) {
            (Some(r), Some(c)) => Ok((r, c)),
            _ => Err(Error::ShapeMismatch {
                op,
                left: vec![sa.0, sa.1],
                right: vec![sb.0, sb.1],
            }),
        }
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let shape = self.broadcast_shape(name, a, b)?;
        let va = self.value(a).broadcast(shape).expect("checked");
        let vb = self.value(b).broadcast(shape).expect("checked");
        let out = Zip::from(&va).and(&vb).map_collect(|&x, &y| f(x, y));
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, op, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let out = self.value(a).mapv(f);
        let ng = self.ng(a);
        self.push(out, op, ng)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |x| c * x, Op::Scale(a, c))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    /// `a + c` elementwise.
    pub fn offset(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |x| x + c, Op::Offset(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, tanh, Op::Tanh(a))
    }

    /// `ln(1 + eˣ)`, evaluated stably.
    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, softplus, Op::Softplus(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.unary(a, f64::ln, Op::Ln(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, f64::sqrt, Op::Sqrt(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * x, Op::Square(a))
    }

    /// Sum of all elements, `1 × 1`.
    pub fn sum(&mut self, a: Var) -> Var {
        let out = Array2::from_elem((1, 1), self.value(a).sum());
        let ng = self.ng(a);
        self.push(out, Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let out = Array2::from_elem((1, 1), v.sum() / v.len() as f64);
        let ng = self.ng(a);
        self.push(out, Op::Mean(a), ng)
    }

    /// `m × n → 1 × n`.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let out = self.value(a).sum_axis(Axis(0)).insert_axis(Axis(0));
        let ng = self.ng(a);
        self.push(out, Op::SumRows(a), ng)
    }

    /// `m × n → 1 × n` mean over rows.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let m = self.shape(a).0 as f64;
        let s = self.sum_rows(a);
        self.scale(s, 1.0 / m)
    }

    /// `m × n → m × 1`.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let out = self.value(a).sum_axis(Axis(1)).insert_axis(Axis(1));
        let ng = self.ng(a);
        self.push(out, Op::SumCols(a), ng)
    }

    /// Column-wise maximum, `m × n → 1 × n`. Ties go to the lowest row.
    pub fn max_rows(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        if v.nrows() == 0 {
            return Err(Error::Empty("max_rows input"));
        }
        let mut arg = vec![0usize; v.ncols()];
        let mut out = Array2::zeros((1, v.ncols()));
        for (j, col) in v.columns().into_iter().enumerate() {
            let mut best = 0;
            for (i, &x) in col.iter().enumerate() {
                if x > col[best] {
                    best = i;
                }
            }
            arg[j] = best;
            out[[0, j]] = col[best];
        }
        let ng = self.ng(a);
        Ok(self.push(out, Op::MaxRows(a, arg), ng))
    }

    /// Horizontal concatenation of equal-height blocks.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(Error::Empty("concat_cols parts"))?;
        let rows = self.shape(first).0;
        if let Some(bad) = parts.iter().find(|&&p| self.shape(p).0 != rows) {
            return Err(Error::ShapeMismatch {
                op: "concat_cols",
                left: shape_of(self.value(first)),
                right: shape_of(self.value(*bad)),
            });
        }
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let out = ndarray::concatenate(Axis(1), &views).expect("rows checked");
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(out, Op::Concat(parts.to_vec()), ng))
    }

    /// Columns `start..end`.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let v = self.value(a);
        if start >= end || end > v.ncols() {
            return Err(Error::ShapeMismatch {
                op: "slice_cols",
                left: shape_of(v),
                right: vec![start, end],
            });
        }
        let out = v.slice(s![.., start..end]).to_owned();
        let ng = self.ng(a);
        Ok(self.push(out, Op::SliceCols(a, start), ng))
    }

    /// Rows `start..end`.
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let v = self.value(a);
        if start >= end || end > v.nrows() {
            return Err(Error::ShapeMismatch {
                op: "slice_rows",
                left: shape_of(v),
                right: vec![start, end],
            });
        }
        let out = v.slice(s![start..end, ..]).to_owned();
        let ng = self.ng(a);
        Ok(self.push(out, Op::SliceRows(a, start), ng))
    }

    /// Repeats a `1 × n` row `m` times.
    pub fn broadcast_rows(&mut self, a: Var, m: usize) -> Result<Var> {
        let v = self.value(a);
        if v.nrows() != 1 {
            return Err(Error::ShapeMismatch {
                op: "broadcast_rows",
                left: shape_of(v),
                right: vec![1, v.ncols()],
            });
        }
        let out = v.broadcast((m, v.ncols())).expect("single row").to_owned();
        let ng = self.ng(a);
        Ok(self.push(out, Op::BroadcastRows(a), ng))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).t().to_owned();
        let ng = self.ng(a);
        self.push(out, Op::Transpose(a), ng)
    }

    /// Back-propagates from a scalar root, adding `∂root/∂leaf` into every
    /// differentiable leaf's gradient. Calling twice accumulates twice.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.shape(root) != (1, 1) {
            return Err(Error::ShapeMismatch {
                op: "backward (root must be scalar)",
                left: shape_of(self.value(root)),
                right: vec![1, 1],
            });
        }
        let mut local: Vec<Option<Array2<f64>>> = vec![None; root.0 + 1];
        local[root.0] = Some(Array2::ones((1, 1)));
        for i in (0..=root.0).rev() {
            let Some(g) = local[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                accumulate(&mut self.nodes[i].grad, g);
                continue;
            }
            let node = &self.nodes[i];
            let val = |v: Var| &self.nodes[v.0].value;
            let ng = |v: Var| self.nodes[v.0].needs_grad;
            let mut push = |v: Var, contrib: Array2<f64>| accumulate(&mut local[v.0], contrib);
            match &node.op {
                Op::Leaf => unreachable!("handled above"),
                Op::MatMul(a, b) => {
                    if ng(*a) {
                        push(*a, g.dot(&val(*b).t()));
                    }
                    if ng(*b) {
                        push(*b, val(*a).t().dot(&g));
                    }
                }
                Op::Add(a, b) => {
                    if ng(*a) {
                        push(*a, reduce_to(&g, val(*a).dim()));
                    }
                    if ng(*b) {
                        push(*b, reduce_to(&g, val(*b).dim()));
                    }
                }
                Op::Sub(a, b) => {
                    if ng(*a) {
                        push(*a, reduce_to(&g, val(*a).dim()));
                    }
                    if ng(*b) {
                        push(*b, -reduce_to(&g, val(*b).dim()));
                    }
                }
                Op::Mul(a, b) => {
                    let shape = g.dim();
                    if ng(*a) {
                        let bb = val(*b).broadcast(shape).expect("forward checked");
                        push(*a, reduce_to(&(&g * &bb), val(*a).dim()));
                    }
                    if ng(*b) {
                        let aa = val(*a).broadcast(shape).expect("forward checked");
                        push(*b, reduce_to(&(&g * &aa), val(*b).dim()));
                    }
                }
                Op::Scale(a, c) => push(*a, g * *c),
                Op::Offset(a) => push(*a, g),
                Op::Tanh(a) => {
                    let mut d = g;
                    Zip::from(&mut d).and(&node.value).for_each(|d, &y| *d *= 1.0 - y * y);
                    push(*a, d);
                }
                Op::Softplus(a) => {
                    let mut d = g;
                    Zip::from(&mut d).and(val(*a)).for_each(|d, &x| *d *= sigmoid(x));
                    push(*a, d);
                }
                Op::Exp(a) => push(*a, g * &node.value),
                Op::Ln(a) => push(*a, g / val(*a)),
                Op::Sqrt(a) => {
                    let mut d = g;
                    Zip::from(&mut d).and(&node.value).for_each(|d, &y| *d /= 2.0 * y);
                    push(*a, d);
                }
                Op::Square(a) => {
                    let mut d = g;
                    Zip::from(&mut d).and(val(*a)).for_each(|d, &x| *d *= 2.0 * x);
                    push(*a, d);
                }
                Op::Sum(a) => push(*a, Array2::from_elem(val(*a).dim(), g[[0, 0]])),
                Op::Mean(a) => {
                    let n = val(*a).len() as f64;
                    push(*a, Array2::from_elem(val(*a).dim(), g[[0, 0]] / n));
                }
                Op::SumRows(a) => {
                    let shape = val(*a).dim();
                    push(*a, g.broadcast(shape).expect("row").to_owned());
                }
                Op::BroadcastRows(a) => push(*a, g.sum_axis(Axis(0)).insert_axis(Axis(0))),
                Op::SumCols(a) => {
                    let shape = val(*a).dim();
                    push(*a, g.broadcast(shape).expect("column").to_owned());
                }
                Op::MaxRows(a, arg) => {
                    let mut d = Array2::zeros(val(*a).dim());
                    for (j, &r) in arg.iter().enumerate() {
                        d[[r, j]] = g[[0, j]];
                    }
                    push(*a, d);
                }
                Op::Concat(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let w = val(*p).ncols();
                        if ng(*p) {
                            push(*p, g.slice(s![.., start..start + w]).to_owned());
                        }
                        start += w;
                    }
                }
                Op::SliceCols(a, start) => {
                    let mut d = Array2::zeros(val(*a).dim());
                    d.slice_mut(s![.., *start..*start + g.ncols()]).assign(&g);
                    push(*a, d);
                }
                Op::SliceRows(a, start) => {
                    let mut d = Array2::zeros(val(*a).dim());
                    d.slice_mut(s![*start..*start + g.nrows(), ..]).assign(&g);
                    push(*a, d);
                }
                Op::Transpose(a) => push(*a, g.t().to_owned()),
            }
        }
        Ok(())
    }
}
