//! Define-by-run reverse-mode tape.
//!
//! Every operation appends one node holding its forward value. `backward`
//! walks the nodes in exact reverse recording order, so inputs always precede
//! the operations that consume them.

use std::fmt;

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

type CustomBackward = Box<dyn Fn(&Tensor, &Tensor, &Tensor) -> Tensor>;

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Neg(Var),
    Relu(Var),
    Sigmoid(Var),
    Exp(Var),
    Log { x: Var, floor: f64 },
    Abs(Var),
    SmoothL1(Var),
    Softmax { x: Var, axis: usize },
    Sum { x: Var, axis: Option<usize> },
    Mean { x: Var, axis: Option<usize> },
    L2Norm { x: Var, axis: usize },
    Center(Var),
    Reshape(Var),
    Stack(Vec<Var>),
    SortColumns { x: Var, perm: Vec<usize> },
    Grl { x: Var, scale: f64 },
    Detach,
    Custom {
        x: Var,
        name: &'static str,
        backward: CustomBackward,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Neg(..) => "neg",
            Op::Relu(..) => "relu",
            Op::Sigmoid(..) => "sigmoid",
            Op::Exp(..) => "exp",
            Op::Log { .. } => "log",
            Op::Abs(..) => "abs",
            Op::SmoothL1(..) => "smooth_l1",
            Op::Softmax { .. } => "softmax",
            Op::Sum { .. } => "sum",
            Op::Mean { .. } => "mean",
            Op::L2Norm { .. } => "l2_norm",
            Op::Center(..) => "center",
            Op::Reshape(..) => "reshape",
            Op::Stack(..) => "stack",
            Op::SortColumns { .. } => "sort_columns",
            Op::Grl { .. } => "grl",
            Op::Detach => "detach",
            Op::Custom { name, .. } => name,
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by node.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `var`; zeros when unreached.
    pub fn get(&self, var: Var) -> Tensor {
        match &self.grads[var.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[var.0]),
        }
    }

    pub fn get_ref(&self, var: Var) -> Option<&Tensor> {
        self.grads[var.0].as_ref()
    }

    pub fn reached(&self, var: Var) -> bool {
        self.grads[var.0].is_some()
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape").field("nodes", &self.nodes.len()).finish()
    }
}

/// How a binary elementwise op lays its right operand over the left one.
#[derive(Clone, Copy)]
enum Broadcast {
    Same,
    /// Right operand repeats every `inner` elements along the leading dim.
    Leading { inner: usize },
}

fn broadcast(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Result<Broadcast> {
    if lhs == rhs {
        return Ok(Broadcast::Same);
    }
    let trailing_match = !lhs.is_empty()
        && (rhs == &lhs[1..] || (rhs.len() == lhs.len() && rhs[0] == 1 && rhs[1..] == lhs[1..]));
    if trailing_match {
        let inner = lhs[1..].iter().product();
        return Ok(Broadcast::Leading { inner });
    }
    Err(Error::Shape {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    })
}

fn reduce_leading(g: &Tensor, inner: usize, shape: &[usize]) -> Tensor {
    let mut out = vec![0.0; inner];
    for chunk in g.data().chunks(inner) {
        for (o, v) in out.iter_mut().zip(chunk) {
            *o += v;
        }
    }
    Tensor::new(shape.to_vec(), out).expect("reduced shape")
}

fn rank2(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    t.dims2().ok_or_else(|| Error::Shape {
        op,
        lhs: t.shape().to_vec(),
        rhs: vec![],
    })
}

/// Output shape and (outer, len, inner) strides for a reduction over `axis`.
fn axis_layout(op: &'static str, shape: &[usize], axis: usize) -> Result<(Vec<usize>, usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::Shape {
            op,
            lhs: shape.to_vec(),
            rhs: vec![axis],
        });
    }
    let outer: usize = shape[..axis].iter().product();
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let mut out: Vec<usize> = shape[..axis].iter().chain(&shape[axis + 1..]).copied().collect();
    if out.is_empty() {
        out.push(1);
    }
    Ok((out, outer, len, inner))
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    /// Name of the operation that produced `var`.
    pub fn op_name(&self, var: Var) -> &'static str {
        self.nodes[var.0].op.name()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Result<Var> {
        if let Some(index) = value.first_non_finite() {
            return Err(Error::NonFinite {
                op: op.name().to_string(),
                index,
            });
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    /// Trainable leaf: receives gradients.
    pub fn param(&mut self, value: Tensor) -> Result<Var> {
        self.push(value, Op::Leaf, true)
    }

    /// Constant leaf: gradients are never propagated into it.
    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.push(value, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = rank2("matmul", ta)?;
        let (k2, n) = rank2("matmul", tb)?;
        if k != k2 {
            return Err(Error::Shape {
                op: "matmul",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let out = Tensor::new(vec![m, n], matmul_raw(ta.data(), tb.data(), m, k, n))?;
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::MatMul(a, b), rg)
    }

    fn binary(&mut self, a: Var, b: Var, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = match broadcast(op, ta.shape(), tb.shape())? {
            Broadcast::Same => ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect(),
            Broadcast::Leading { inner } => ta
                .data()
                .iter()
                .enumerate()
                .map(|(i, &x)| f(x, tb.data()[i % inner]))
                .collect(),
        };
        Tensor::new(ta.shape().to_vec(), data)
    }

    /// Elementwise sum; `b` may broadcast over the leading dimension of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "add", |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "sub", |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "mul", |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Mul(a, b), rg)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        let out = self.value(x).map(|v| v * s);
        let rg = self.rg(x);
        self.push(out, Op::Scale(x, s), rg)
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Result<Var> {
        let out = self.value(x).map(|v| v + s);
        let rg = self.rg(x);
        self.push(out, Op::AddScalar(x), rg)
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| -v);
        let rg = self.rg(x);
        self.push(out, Op::Neg(x), rg)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| v.max(0.0));
        let rg = self.rg(x);
        self.push(out, Op::Relu(x), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| {
            if v >= 0.0 {
                1.0 / (1.0 + (-v).exp())
            } else {
                let e = v.exp();
                e / (1.0 + e)
            }
        });
        let rg = self.rg(x);
        self.push(out, Op::Sigmoid(x), rg)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(f64::exp);
        let rg = self.rg(x);
        self.push(out, Op::Exp(x), rg)
    }

    /// Natural log. Inputs at or below `floor` are clamped to it (with zero
    /// gradient); `floor = 0` disables the clamp.
    pub fn log(&mut self, x: Var, floor: f64) -> Result<Var> {
        let out = self.value(x).map(|v| if v > floor { v.ln() } else { floor.ln() });
        let rg = self.rg(x);
        self.push(out, Op::Log { x, floor }, rg)
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(f64::abs);
        let rg = self.rg(x);
        self.push(out, Op::Abs(x), rg)
    }

    /// Elementwise smooth-L1 with beta = 1.
    pub fn smooth_l1(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| {
            let a = v.abs();
            if a < 1.0 {
                0.5 * v * v
            } else {
                a - 0.5
            }
        });
        let rg = self.rg(x);
        self.push(out, Op::SmoothL1(x), rg)
    }

    /// Softmax of a rank-2 tensor along `axis` (0 = down columns, 1 = across rows).
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = self.value(x);
        rank2("softmax", t)?;
        let (_, outer, len, inner) = axis_layout("softmax", t.shape(), axis)?;
        let src = t.data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * len * inner + j * inner + i;
                let max = (0..len).map(|j| src[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for j in 0..len {
                    let e = (src[at(j)] - max).exp();
                    out[at(j)] = e;
                    total += e;
                }
                for j in 0..len {
                    out[at(j)] /= total;
                }
            }
        }
        let out = Tensor::new(t.shape().to_vec(), out)?;
        let rg = self.rg(x);
        self.push(out, Op::Softmax { x, axis }, rg)
    }

    fn reduce(&self, x: Var, axis: Option<usize>, op: &'static str, mean: bool) -> Result<Tensor> {
        let t = self.value(x);
        match axis {
            None => {
                let s: f64 = t.data().iter().sum();
                let n = t.len().max(1) as f64;
                Ok(Tensor::scalar(if mean { s / n } else { s }))
            }
            Some(axis) => {
                let (shape, outer, len, inner) = axis_layout(op, t.shape(), axis)?;
                let src = t.data();
                let mut out = vec![0.0; outer * inner];
                for o in 0..outer {
                    for j in 0..len {
                        let base = o * len * inner + j * inner;
                        for i in 0..inner {
                            out[o * inner + i] += src[base + i];
                        }
                    }
                }
                if mean {
                    let n = len.max(1) as f64;
                    out.iter_mut().for_each(|v| *v /= n);
                }
                Tensor::new(shape, out)
            }
        }
    }

    /// Sum over `axis` (which is removed), or over everything when `None`.
    pub fn sum(&mut self, x: Var, axis: Option<usize>) -> Result<Var> {
        let out = self.reduce(x, axis, "sum", false)?;
        let rg = self.rg(x);
        self.push(out, Op::Sum { x, axis }, rg)
    }

    pub fn mean(&mut self, x: Var, axis: Option<usize>) -> Result<Var> {
        let out = self.reduce(x, axis, "mean", true)?;
        let rg = self.rg(x);
        self.push(out, Op::Mean { x, axis }, rg)
    }

    /// Euclidean norm along `axis`. The gradient at a zero-norm slice is zero.
    pub fn l2_norm(&mut self, x: Var, axis: usize) -> Result<Var> {
        let sq = self.value(x).map(|v| v * v);
        let t = self.value(x);
        let (shape, outer, len, inner) = axis_layout("l2_norm", t.shape(), axis)?;
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..len {
                let base = o * len * inner + j * inner;
                for i in 0..inner {
                    out[o * inner + i] += sq.data()[base + i];
                }
            }
        }
        out.iter_mut().for_each(|v| *v = v.sqrt());
        let out = Tensor::new(shape, out)?;
        let rg = self.rg(x);
        self.push(out, Op::L2Norm { x, axis }, rg)
    }

    /// Subtracts the column mean from every row of a rank-2 tensor.
    ///
    /// The mean is taken relative to the first row, so columns whose entries
    /// are all equal center to exactly zero.
    pub fn center(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let (rows, cols) = rank2("center", t)?;
        let src = t.data();
        let mut out = vec![0.0; src.len()];
        for c in 0..cols {
            let anchor = src[c];
            let mean = (0..rows).map(|r| src[r * cols + c] - anchor).sum::<f64>() / rows as f64;
            for r in 0..rows {
                out[r * cols + c] = (src[r * cols + c] - anchor) - mean;
            }
        }
        let out = Tensor::new(vec![rows, cols], out)?;
        let rg = self.rg(x);
        self.push(out, Op::Center(x), rg)
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let out = self.value(x).clone().reshaped(shape)?;
        let rg = self.rg(x);
        self.push(out, Op::Reshape(x), rg)
    }

    /// Flattens each input into one row of an `n x numel` matrix.
    pub fn stack(&mut self, xs: &[Var]) -> Result<Var> {
        let first = xs.first().ok_or_else(|| Error::invalid("stack of zero tensors"))?;
        let numel = self.value(*first).len();
        let mut data = Vec::with_capacity(numel * xs.len());
        for &x in xs {
            let t = self.value(x);
            if t.len() != numel {
                return Err(Error::Shape {
                    op: "stack",
                    lhs: self.shape(*first).to_vec(),
                    rhs: t.shape().to_vec(),
                });
            }
            data.extend_from_slice(t.data());
        }
        let out = Tensor::new(vec![xs.len(), numel], data)?;
        let rg = xs.iter().any(|&x| self.rg(x));
        self.push(out, Op::Stack(xs.to_vec()), rg)
    }

    /// Sorts every column of a rank-2 tensor ascending.
    pub fn sort_columns(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let (rows, cols) = rank2("sort_columns", t)?;
        let src = t.data();
        let mut perm = vec![0usize; rows * cols];
        let mut out = vec![0.0; rows * cols];
        let mut idx: Vec<usize> = Vec::with_capacity(rows);
        for c in 0..cols {
            idx.clear();
            idx.extend(0..rows);
            idx.sort_by(|&a, &b| src[a * cols + c].total_cmp(&src[b * cols + c]));
            for (r, &from) in idx.iter().enumerate() {
                perm[r * cols + c] = from;
                out[r * cols + c] = src[from * cols + c];
            }
        }
        let out = Tensor::new(vec![rows, cols], out)?;
        let rg = self.rg(x);
        self.push(out, Op::SortColumns { x, perm }, rg)
    }

    /// Gradient reversal: identity forward, `-scale * g` backward.
    pub fn grl(&mut self, x: Var, scale: f64) -> Result<Var> {
        if !(scale.is_finite() && scale >= 0.0) {
            return Err(Error::invalid(format!(
                "gradient reversal scale must be finite and nonnegative, got {scale}"
            )));
        }
        let out = self.value(x).clone();
        let rg = self.rg(x);
        self.push(out, Op::Grl { x, scale }, rg)
    }

    /// Identity forward, no gradient to anything upstream.
    pub fn detach(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).clone();
        self.push(out, Op::Detach, false)
    }

    /// Unary op with caller-supplied forward value and adjoint
    /// `backward(input, output, upstream) -> input gradient`.
    pub fn custom_unary(
        &mut self,
        x: Var,
        name: &'static str,
        forward: impl Fn(&Tensor) -> Tensor,
        backward: impl Fn(&Tensor, &Tensor, &Tensor) -> Tensor + 'static,
    ) -> Result<Var> {
        let out = forward(self.value(x));
        let rg = self.rg(x);
        self.push(
            out,
            Op::Custom {
                x,
                name,
                backward: Box::new(backward),
            },
            rg,
        )
    }

    /// Reverse sweep from a scalar `loss`, seeded with 1.0.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::Shape {
                op: "backward",
                lhs: lv.shape().to_vec(),
                rhs: vec![1],
            });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(lv.shape(), 1.0));

        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[id] = Some(g);
        }

        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let mut accum = |var: Var, contrib: Tensor| {
            if !self.nodes[var.0].requires_grad {
                return;
            }
            match &mut grads[var.0] {
                Some(existing) => existing.add_assign(&contrib),
                slot @ None => *slot = Some(contrib),
            }
        };
        let y = &node.value;
        match &node.op {
            Op::Leaf | Op::Detach => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k) = ta.dims2().expect("rank 2");
                let n = tb.shape()[1];
                if self.rg(*a) {
                    let bt = transpose(tb.data(), k, n);
                    let da = matmul_raw(g.data(), &bt, m, n, k);
                    accum(*a, Tensor::new(vec![m, k], da).expect("shape"));
                }
                if self.rg(*b) {
                    let at = transpose(ta.data(), m, k);
                    let db = matmul_raw(&at, g.data(), k, m, n);
                    accum(*b, Tensor::new(vec![k, n], db).expect("shape"));
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let negate = matches!(node.op, Op::Sub(..));
                accum(*a, g.clone());
                if self.rg(*b) {
                    let gb = if negate { g.map(|v| -v) } else { g.clone() };
                    let shape = self.shape(*b);
                    match broadcast("add", y.shape(), shape).expect("checked in forward") {
                        Broadcast::Same => accum(*b, gb),
                        Broadcast::Leading { inner } => accum(*b, reduce_leading(&gb, inner, shape)),
                    }
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let mode = broadcast("mul", ta.shape(), tb.shape()).expect("checked in forward");
                let inner = match mode {
                    Broadcast::Same => ta.len(),
                    Broadcast::Leading { inner } => inner,
                };
                if self.rg(*a) {
                    let da: Vec<f64> = g
                        .data()
                        .iter()
                        .enumerate()
                        .map(|(i, gv)| gv * tb.data()[i % inner])
                        .collect();
                    accum(*a, Tensor::new(ta.shape().to_vec(), da).expect("shape"));
                }
                if self.rg(*b) {
                    let prod: Vec<f64> = g.data().iter().zip(ta.data()).map(|(gv, av)| gv * av).collect();
                    let prod = Tensor::new(ta.shape().to_vec(), prod).expect("shape");
                    match mode {
                        Broadcast::Same => accum(*b, prod),
                        Broadcast::Leading { inner } => accum(*b, reduce_leading(&prod, inner, tb.shape())),
                    }
                }
            }
            Op::Scale(x, s) => accum(*x, g.map(|v| v * s)),
            Op::AddScalar(x) => accum(*x, g.clone()),
            Op::Neg(x) => accum(*x, g.map(|v| -v)),
            Op::Relu(x) => {
                let xv = self.value(*x);
                let d = g.data().iter().zip(xv.data()).map(|(gv, v)| if *v > 0.0 { *gv } else { 0.0 }).collect();
                accum(*x, Tensor::new(xv.shape().to_vec(), d).expect("shape"));
            }
            Op::Sigmoid(x) => {
                let d = g.data().iter().zip(y.data()).map(|(gv, s)| gv * s * (1.0 - s)).collect();
                accum(*x, Tensor::new(y.shape().to_vec(), d).expect("shape"));
            }
            Op::Exp(x) => {
                let d = g.data().iter().zip(y.data()).map(|(gv, e)| gv * e).collect();
                accum(*x, Tensor::new(y.shape().to_vec(), d).expect("shape"));
            }
            Op::Log { x, floor } => {
                let xv = self.value(*x);
                let d = g
                    .data()
                    .iter()
                    .zip(xv.data())
                    .map(|(gv, v)| if *v > *floor { gv / v } else { 0.0 })
                    .collect();
                accum(*x, Tensor::new(xv.shape().to_vec(), d).expect("shape"));
            }
            Op::Abs(x) => {
                let xv = self.value(*x);
                let d = g
                    .data()
                    .iter()
                    .zip(xv.data())
                    .map(|(gv, v)| if *v > 0.0 { *gv } else if *v < 0.0 { -gv } else { 0.0 })
                    .collect();
                accum(*x, Tensor::new(xv.shape().to_vec(), d).expect("shape"));
            }
            Op::SmoothL1(x) => {
                let xv = self.value(*x);
                let d = g
                    .data()
                    .iter()
                    .zip(xv.data())
                    .map(|(gv, v)| if v.abs() < 1.0 { gv * v } else { gv * v.signum() })
                    .collect();
                accum(*x, Tensor::new(xv.shape().to_vec(), d).expect("shape"));
            }
            Op::Softmax { x, axis } => {
                let (_, outer, len, inner) = axis_layout("softmax", y.shape(), *axis).expect("checked");
                let (yd, gd) = (y.data(), g.data());
                let mut d = vec![0.0; yd.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| o * len * inner + j * inner + i;
                        let dot: f64 = (0..len).map(|j| yd[at(j)] * gd[at(j)]).sum();
                        for j in 0..len {
                            d[at(j)] = yd[at(j)] * (gd[at(j)] - dot);
                        }
                    }
                }
                accum(*x, Tensor::new(y.shape().to_vec(), d).expect("shape"));
            }
            Op::Sum { x, axis } | Op::Mean { x, axis } => {
                let mean = matches!(node.op, Op::Mean { .. });
                let xs = self.shape(*x).to_vec();
                let d = match axis {
                    None => {
                        let n = xs.iter().product::<usize>().max(1) as f64;
                        let v = if mean { g.item() / n } else { g.item() };
                        Tensor::full(&xs, v)
                    }
                    Some(axis) => {
                        let (_, outer, len, inner) = axis_layout("sum", &xs, *axis).expect("checked");
                        let scale = if mean { 1.0 / len.max(1) as f64 } else { 1.0 };
                        let mut d = vec![0.0; outer * len * inner];
                        for o in 0..outer {
                            for j in 0..len {
                                for i in 0..inner {
                                    d[o * len * inner + j * inner + i] = g.data()[o * inner + i] * scale;
                                }
                            }
                        }
                        Tensor::new(xs, d).expect("shape")
                    }
                };
                accum(*x, d);
            }
            Op::L2Norm { x, axis } => {
                let xv = self.value(*x);
                let (_, outer, len, inner) = axis_layout("l2_norm", xv.shape(), *axis).expect("checked");
                let mut d = vec![0.0; xv.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let norm = y.data()[o * inner + i];
                        if norm == 0.0 {
                            continue;
                        }
                        let gv = g.data()[o * inner + i];
                        for j in 0..len {
                            let at = o * len * inner + j * inner + i;
                            d[at] = gv * xv.data()[at] / norm;
                        }
                    }
                }
                accum(*x, Tensor::new(xv.shape().to_vec(), d).expect("shape"));
            }
            Op::Center(x) => {
                let (rows, cols) = y.dims2().expect("rank 2");
                let mut d = g.data().to_vec();
                for c in 0..cols {
                    let mean = (0..rows).map(|r| g.data()[r * cols + c]).sum::<f64>() / rows as f64;
                    for r in 0..rows {
                        d[r * cols + c] -= mean;
                    }
                }
                accum(*x, Tensor::new(vec![rows, cols], d).expect("shape"));
            }
            Op::Reshape(x) => {
                let shape = self.shape(*x).to_vec();
                accum(*x, g.clone().reshaped(shape).expect("same numel"));
            }
            Op::Stack(xs) => {
                for (row, &x) in xs.iter().enumerate() {
                    if !self.rg(x) {
                        continue;
                    }
                    let shape = self.shape(x).to_vec();
                    accum(x, Tensor::new(shape, g.row(row).to_vec()).expect("shape"));
                }
            }
            Op::SortColumns { x, perm } => {
                let (rows, cols) = y.dims2().expect("rank 2");
                let mut d = vec![0.0; rows * cols];
                for r in 0..rows {
                    for c in 0..cols {
                        d[perm[r * cols + c] * cols + c] += g.data()[r * cols + c];
                    }
                }
                accum(*x, Tensor::new(vec![rows, cols], d).expect("shape"));
            }
            Op::Grl { x, scale } => accum(*x, g.map(|v| -scale * v)),
            Op::Custom { x, backward, .. } => {
                let d = backward(self.value(*x), y, g);
                accum(*x, d);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(data: &[f64]) -> Tensor {
        Tensor::vector(data.to_vec())
    }

    #[test]
    fn relu_forward() {
        let mut t = Tape::new();
        let x = t.param(v(&[-1.0, 0.0, 2.0])).unwrap();
        let y = t.relu(x).unwrap();
        assert_eq!(t.value(y).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn softmax_symmetric() {
        let mut t = Tape::new();
        let x = t.param(Tensor::from_rows(&[[0.0, 0.0]]).unwrap()).unwrap();
        let y = t.softmax(x, 1).unwrap();
        assert_eq!(t.value(y).data(), &[0.5, 0.5]);
    }

    #[test]
    fn matmul_hand_case() {
        let mut t = Tape::new();
        let a = t.param(Tensor::from_rows(&[[1.0, 2.0]]).unwrap()).unwrap();
        let b = t.param(Tensor::from_rows(&[[3.0], [4.0]]).unwrap()).unwrap();
        let c = t.matmul(a, b).unwrap();
        assert_eq!(t.value(c).shape(), &[1, 1]);
        assert_eq!(t.value(c).data(), &[11.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut t = Tape::new();
        let a = t.param(Tensor::zeros(&[2, 3])).unwrap();
        let b = t.param(Tensor::zeros(&[2, 3])).unwrap();
        let err = t.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("matmul") && err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn grl_forward_identity_backward_flipped() {
        let mut t = Tape::new();
        let x = t.param(v(&[3.0, -1.5])).unwrap();
        let y = t.grl(x, 1.0).unwrap();
        assert_eq!(t.value(y), t.value(x));

        let w = t.constant(v(&[1.0, 2.0])).unwrap();
        let p = t.mul(y, w).unwrap();
        let l = t.sum(p, None).unwrap();
        let g = t.backward(l).unwrap();
        assert_eq!(g.get(x).data(), &[-1.0, -2.0]);
    }

    #[test]
    fn grl_half_scale() {
        let mut t = Tape::new();
        let x = t.param(v(&[5.0])).unwrap();
        let y = t.grl(x, 0.5).unwrap();
        let l = t.scale(y, 4.0).unwrap();
        let l = t.sum(l, None).unwrap();
        let g = t.backward(l).unwrap();
        assert_eq!(g.get(x).data(), &[-2.0]);
    }

    #[test]
    fn grl_rejects_negative_scale() {
        let mut t = Tape::new();
        let x = t.param(v(&[1.0])).unwrap();
        assert!(t.grl(x, -1.0).is_err());
    }

    #[test]
    fn detach_blocks_gradient() {
        let mut t = Tape::new();
        let w = t.param(Tensor::from_rows(&[[2.0]]).unwrap()).unwrap();
        let x = t.constant(Tensor::from_rows(&[[3.0]]).unwrap()).unwrap();
        let wx = t.matmul(x, w).unwrap();
        let d = t.detach(wx).unwrap();
        assert_eq!(t.value(d), t.value(wx));
        let l = t.sum(d, None).unwrap();
        let g = t.backward(l).unwrap();
        assert_eq!(g.get(w).data(), &[0.0]);
        assert!(!g.reached(w));
    }

    #[test]
    fn backward_linear_and_quadratic() {
        let mut t = Tape::new();
        let x = t.param(v(&[1.0, 2.0, 3.0])).unwrap();
        let l = t.sum(x, None).unwrap();
        assert_eq!(t.backward(l).unwrap().get(x).data(), &[1.0, 1.0, 1.0]);

        let mut t = Tape::new();
        let x = t.param(v(&[1.0, 2.0])).unwrap();
        let sq = t.mul(x, x).unwrap();
        let l = t.sum(sq, None).unwrap();
        assert_eq!(t.backward(l).unwrap().get(x).data(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut t = Tape::new();
        let x = t.param(v(&[1.0, 2.0])).unwrap();
        assert!(t.backward(x).is_err());
    }

    #[test]
    fn unreached_nodes_have_zero_gradient() {
        let mut t = Tape::new();
        let x = t.param(v(&[1.0, 2.0])).unwrap();
        let other = t.param(v(&[7.0])).unwrap();
        let l = t.sum(x, None).unwrap();
        let g = t.backward(l).unwrap();
        assert_eq!(g.get(other).data(), &[0.0]);
    }

    #[test]
    fn log_of_zero_without_floor_is_an_error() {
        let mut t = Tape::new();
        let x = t.param(v(&[0.0])).unwrap();
        let err = t.log(x, 0.0).unwrap_err();
        assert!(matches!(err, Error::NonFinite { .. }));
        let y = t.log(x, 1e-12).unwrap();
        assert!((t.value(y).item() - 1e-12f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn broadcast_add_over_leading_dim() {
        let mut t = Tape::new();
        let a = t.param(Tensor::from_rows(&[[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]]).unwrap()).unwrap();
        let b = t.param(v(&[10.0, 20.0])).unwrap();
        let c = t.add(a, b).unwrap();
        assert_eq!(t.value(c).data(), &[11.0, 22.0, 13.0, 24.0, 15.0, 26.0]);
        let l = t.sum(c, None).unwrap();
        let g = t.backward(l).unwrap();
        assert_eq!(g.get(b).data(), &[3.0, 3.0]);
        assert!(t.add(b, a).is_err());
    }

    #[test]
    fn sort_columns_routes_gradient() {
        let mut t = Tape::new();
        let x = t.param(Tensor::from_rows(&[[3.0, 0.0], [1.0, 5.0]]).unwrap()).unwrap();
        let s = t.sort_columns(x).unwrap();
        assert_eq!(t.value(s).data(), &[1.0, 0.0, 3.0, 5.0]);
        let w = t.constant(Tensor::from_rows(&[[1.0, 10.0], [2.0, 20.0]]).unwrap()).unwrap();
        let p = t.mul(s, w).unwrap();
        let l = t.sum(p, None).unwrap();
        let g = t.backward(l).unwrap();
        assert_eq!(g.get(x).data(), &[2.0, 10.0, 1.0, 20.0]);
    }
}
