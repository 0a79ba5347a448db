//! Tape-based reverse-mode differentiation.
//!
//! Every op appends a node holding its forward value. Node indices are a
//! topological order, so the backward sweep walks them in reverse and
//! accumulates gradients in a fixed order.

use ndarray::linalg::general_mat_mul;
use ndarray::{ArrayView2, ArrayViewMut2};

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// How a binary op lines up its operands. Only the leading (batch) axis may
/// be broadcast: the smaller operand's shape must equal the larger one's
/// shape with the first axis removed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Bcast {
    Same,
    Rhs,
    Lhs,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Constant,
    MatMul(Var, Var),
    Add(Var, Var, Bcast),
    Sub(Var, Var, Bcast),
    Mul(Var, Var, Bcast),
    Div(Var, Var, Bcast),
    Neg(Var),
    Scale(Var, f64),
    Offset(Var),
    Square(Var),
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    Softplus(Var),
    Exp(Var),
    Log(Var),
    Sum(Var),
    Mean(Var),
    SumLast(Var),
    Concat(Vec<Var>),
    Slice(Var, usize),
    ClampMin(Var, f64),
    StopGradient,
    Reshape(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to every node that lies on a path to it.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient for `v`, zero-filled when `v` does not influence the loss.
    pub fn wrt(&self, v: Var) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }
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

fn broadcast(op: &'static str, a: &[usize], b: &[usize]) -> Result<(Bcast, Vec<usize>)> {
    if a == b {
        Ok((Bcast::Same, a.to_vec()))
    } else if !a.is_empty() && &a[1..] == b {
        Ok((Bcast::Rhs, a.to_vec()))
    } else if !b.is_empty() && &b[1..] == a {
        Ok((Bcast::Lhs, b.to_vec()))
    } else {
        Err(Error::dim(op, format!("{a:?} vs {b:?}")))
    }
}

fn mat<'a>(t: &'a [f64], rows: usize, cols: usize) -> ArrayView2<'a, f64> {
    ArrayView2::from_shape((rows, cols), t).expect("matrix view matches tensor length")
}

fn mat_mut<'a>(t: &'a mut [f64], rows: usize, cols: usize) -> ArrayViewMut2<'a, f64> {
    ArrayViewMut2::from_shape((rows, cols), t).expect("matrix view matches tensor length")
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A trainable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push_raw(value, Op::Leaf, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_raw(value, Op::Constant, false)
    }

    fn push_raw(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::Numeric { op: name });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push_raw(value, op, requires_grad))
    }

    // -- binary elementwise ------------------------------------------------

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        mk: impl Fn(Var, Var, Bcast) -> Op,
    ) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (mode, shape) = broadcast(name, av.shape(), bv.shape())?;
        let (ad, bd) = (av.data(), bv.data());
        let data: Vec<f64> = match mode {
            Bcast::Same => ad.iter().zip(bd).map(|(&x, &y)| f(x, y)).collect(),
            Bcast::Rhs => {
                let n = bd.len();
                ad.iter()
                    .enumerate()
                    .map(|(i, &x)| f(x, bd[i % n]))
                    .collect()
            }
            Bcast::Lhs => {
                let n = ad.len();
                bd.iter()
                    .enumerate()
                    .map(|(i, &y)| f(ad[i % n], y))
                    .collect()
            }
        };
        let value = Tensor::new(shape, data)?;
        self.push(name, value, mk(a, b, mode), &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (sa, sb) = (av.shape(), bv.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dim("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        general_mat_mul(
            1.0,
            &mat(av.data(), m, k),
            &mat(bv.data(), k, n),
            0.0,
            &mut mat_mut(&mut out, m, n),
        );
        let value = Tensor::new(vec![m, n], out)?;
        self.push("matmul", value, Op::MatMul(a, b), &[a, b])
    }

    // -- unary elementwise -------------------------------------------------

    fn unary(&mut self, name: &'static str, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let av = self.value(a);
        let data = av.data().iter().map(|&x| f(x)).collect();
        let value = Tensor::new(av.shape().to_vec(), data)?;
        self.push(name, value, op, &[a])
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.unary("neg", a, |x| -x, Op::Neg(a))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary("scale", a, |x| c * x, Op::Scale(a, c))
    }

    /// Adds a constant to every element.
    pub fn offset(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary("offset", a, |x| x + c, Op::Offset(a))
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.unary("square", a, |x| x * x, Op::Square(a))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary("tanh", a, f64::tanh, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary("sigmoid", a, sigmoid, Op::Sigmoid(a))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary("relu", a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        self.unary("softplus", a, softplus, Op::Softplus(a))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary("exp", a, f64::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary("log", a, f64::ln, Op::Log(a))
    }

    /// `max(a, floor)` with zero gradient wherever `a <= floor`.
    pub fn clamp_min(&mut self, a: Var, floor: f64) -> Result<Var> {
        self.unary("clamp_min", a, |x| x.max(floor), Op::ClampMin(a, floor))
    }

    /// Same value, no gradient flows back through it.
    pub fn stop_gradient(&mut self, a: Var) -> Var {
        let value = self.value(a).clone();
        self.push_raw(value, Op::StopGradient, false)
    }

    // -- reductions and shape ops ------------------------------------------

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let s = av.data().iter().sum::<f64>() / av.numel() as f64;
        self.push("mean", Tensor::scalar(s), Op::Mean(a), &[a])
    }

    /// Sums over the last axis: `[.., D] -> [..]`.
    pub fn sum_last(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let d = av.last_dim();
        let data = av.data().chunks(d).map(|c| c.iter().sum()).collect();
        let shape = av.shape()[..av.ndim().saturating_sub(1)].to_vec();
        let value = Tensor::new(shape, data)?;
        self.push("sum_last", value, Op::SumLast(a), &[a])
    }

    /// Concatenates along the last axis; leading axes must agree.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::dim("concat", "no inputs"))?;
        let lead = self.shape(*first)[..self.shape(*first).len().saturating_sub(1)].to_vec();
        let rows: usize = lead.iter().product();
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.is_empty() || s[..s.len() - 1] != lead[..] {
                return Err(Error::dim("concat", format!("{s:?} vs leading {lead:?}")));
            }
            total += s[s.len() - 1];
        }
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let mut shape = lead;
        shape.push(total);
        let value = Tensor::new(shape, data)?;
        self.push("concat", value, Op::Concat(parts.to_vec()), parts)
    }

    /// Columns `start..start + len` of the last axis.
    pub fn slice(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let av = self.value(a);
        let d = av.last_dim();
        if av.ndim() == 0 || start + len > d {
            return Err(Error::dim(
                "slice",
                format!("{start}..{} of {:?}", start + len, av.shape()),
            ));
        }
        let data = av
            .data()
            .chunks(d)
            .flat_map(|row| row[start..start + len].iter().copied())
            .collect();
        let mut shape = av.shape().to_vec();
        *shape.last_mut().expect("ndim checked") = len;
        let value = Tensor::new(shape, data)?;
        self.push("slice", value, Op::Slice(a, start), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshape(shape.to_vec())?;
        self.push("reshape", value, Op::Reshape(a), &[a])
    }

    // -- backward ------------------------------------------------------------

    /// Reverse sweep from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::dim(
                "backward",
                format!("loss must be scalar, got {:?}", self.shape(loss)),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads)?;
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric { op: "backward" });
            }
            grads[i] = Some(g);
        }

        let shapes = self
            .nodes
            .iter()
            .map(|n| n.value.shape().to_vec())
            .collect();
        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| g.map(|d| Tensor::new(self.nodes[i].value.shape().to_vec(), d)))
            .map(Option::transpose)
            .collect::<Result<Vec<_>>>()?;
        Ok(Gradients { grads, shapes })
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let n = self.nodes[v.0].value.numel();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
    }

    fn unary_back(
        &self,
        grads: &mut [Option<Vec<f64>>],
        a: Var,
        g: &[f64],
        local: impl Fn(usize) -> f64,
    ) {
        if let Some(ga) = self.slot(grads, a) {
            for (i, (dst, gi)) in ga.iter_mut().zip(g).enumerate() {
                *dst += gi * local(i);
            }
        }
    }

    /// Accumulates `g * d/d(lhs)` and `g * d/d(rhs)` for a broadcast binary op.
    fn binary_back(
        &self,
        grads: &mut [Option<Vec<f64>>],
        a: Var,
        b: Var,
        mode: Bcast,
        g: &[f64],
        da: impl Fn(f64, f64) -> f64,
        db: impl Fn(f64, f64) -> f64,
    ) {
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let (na, nb) = (ad.len(), bd.len());
        let ia = |i: usize| if mode == Bcast::Lhs { i % na } else { i };
        let ib = |i: usize| if mode == Bcast::Rhs { i % nb } else { i };
        if let Some(ga) = self.slot(grads, a) {
            for (i, gi) in g.iter().enumerate() {
                ga[ia(i)] += gi * da(ad[ia(i)], bd[ib(i)]);
            }
        }
        if let Some(gb) = self.slot(grads, b) {
            for (i, gi) in g.iter().enumerate() {
                gb[ib(i)] += gi * db(ad[ia(i)], bd[ib(i)]);
            }
        }
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let out = node.value.data();
        match &node.op {
            Op::Leaf | Op::Constant | Op::StopGradient => {}
            Op::Add(a, b, m) => self.binary_back(grads, *a, *b, *m, g, |_, _| 1.0, |_, _| 1.0),
            Op::Sub(a, b, m) => self.binary_back(grads, *a, *b, *m, g, |_, _| 1.0, |_, _| -1.0),
            Op::Mul(a, b, m) => self.binary_back(grads, *a, *b, *m, g, |_, y| y, |x, _| x),
            Op::Div(a, b, m) => {
                self.binary_back(grads, *a, *b, *m, g, |_, y| 1.0 / y, |x, y| -x / (y * y))
            }
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                let gm = mat(g, m, n);
                if let Some(ga) = self.slot(grads, *a) {
                    general_mat_mul(
                        1.0,
                        &gm,
                        &mat(bv.data(), k, n).t(),
                        1.0,
                        &mut mat_mut(ga, m, k),
                    );
                }
                if let Some(gb) = self.slot(grads, *b) {
                    general_mat_mul(
                        1.0,
                        &mat(av.data(), m, k).t(),
                        &gm,
                        1.0,
                        &mut mat_mut(gb, k, n),
                    );
                }
            }
            Op::Neg(a) => self.unary_back(grads, *a, g, |_| -1.0),
            Op::Scale(a, c) => self.unary_back(grads, *a, g, |_| *c),
            Op::Offset(a) | Op::Reshape(a) => self.unary_back(grads, *a, g, |_| 1.0),
            Op::Square(a) => {
                let x = self.value(*a).data();
                self.unary_back(grads, *a, g, |i| 2.0 * x[i])
            }
            Op::Tanh(a) => self.unary_back(grads, *a, g, |i| 1.0 - out[i] * out[i]),
            Op::Sigmoid(a) => self.unary_back(grads, *a, g, |i| out[i] * (1.0 - out[i])),
            Op::Relu(a) => {
                let x = self.value(*a).data();
                self.unary_back(grads, *a, g, |i| if x[i] > 0.0 { 1.0 } else { 0.0 })
            }
            Op::Softplus(a) => {
                let x = self.value(*a).data();
                self.unary_back(grads, *a, g, |i| sigmoid(x[i]))
            }
            Op::Exp(a) => self.unary_back(grads, *a, g, |i| out[i]),
            Op::Log(a) => {
                let x = self.value(*a).data();
                self.unary_back(grads, *a, g, |i| 1.0 / x[i])
            }
            Op::ClampMin(a, floor) => {
                let x = self.value(*a).data();
                self.unary_back(grads, *a, g, |i| if x[i] > *floor { 1.0 } else { 0.0 })
            }
            Op::Sum(a) => {
                if let Some(ga) = self.slot(grads, *a) {
                    ga.iter_mut().for_each(|dst| *dst += g[0]);
                }
            }
            Op::Mean(a) => {
                let n = self.value(*a).numel() as f64;
                if let Some(ga) = self.slot(grads, *a) {
                    ga.iter_mut().for_each(|dst| *dst += g[0] / n);
                }
            }
            Op::SumLast(a) => {
                let d = self.value(*a).last_dim();
                if let Some(ga) = self.slot(grads, *a) {
                    for (i, dst) in ga.iter_mut().enumerate() {
                        *dst += g[i / d];
                    }
                }
            }
            Op::Concat(parts) => {
                let total = node.value.last_dim();
                let mut start = 0;
                for &p in parts {
                    let w = self.value(p).last_dim();
                    if let Some(gp) = self.slot(grads, p) {
                        for (r, row) in gp.chunks_mut(w).enumerate() {
                            for (j, dst) in row.iter_mut().enumerate() {
                                *dst += g[r * total + start + j];
                            }
                        }
                    }
                    start += w;
                }
            }
            Op::Slice(a, start) => {
                let d = self.value(*a).last_dim();
                let w = node.value.last_dim();
                if let Some(ga) = self.slot(grads, *a) {
                    for (r, row) in ga.chunks_mut(d).enumerate() {
                        for j in 0..w {
                            row[start + j] += g[r * w + j];
                        }
                    }
                }
            }
        }
        Ok(())
    }
}
