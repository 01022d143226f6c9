//! Reverse-mode differentiation over dense `f64` matrices.
//!
//! A [`Graph`] is an append-only tape. Every operation pushes a node whose
//! value is computed eagerly; [`Graph::backward`] walks the tape in reverse
//! creation order, which is always a valid topological order. Besides the
//! built-in operations, [`Graph::custom_op`] records a node whose backward
//! rule is supplied by the caller and is used verbatim. The straight-through
//! discretizers are built on it.

mod optim;
mod param;
mod tensor;

pub use optim::{Optimizer, OptimizerKind, StepStats};
pub use param::{Param, ParamSet};
pub use tensor::Tensor;

use std::fmt;

use thiserror::Error;

use self::tensor::gemm;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GradError {
    #[error("{op}: shape mismatch {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("{op}: {detail}")]
    InvalidArgument { op: &'static str, detail: String },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss((usize, usize)),
    #[error("custom op backward returned {got} gradients of lengths {lens:?}, expected {expected:?}")]
    CustomBackwardShape {
        got: usize,
        lens: Vec<usize>,
        expected: Vec<usize>,
    },
    #[error("non-finite gradient in parameter `{0}`")]
    NonFiniteGradient(String),
    #[error("parameter sets do not line up: {0}")]
    ParamMismatch(String),
}

pub type Result<T> = std::result::Result<T, GradError>;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule of a custom op: `(upstream, inputs, output) -> one gradient per input`.
pub type BackwardFn = Box<dyn Fn(&[f64], &[&Tensor], &Tensor) -> Vec<Vec<f64>>>;

enum Op {
    Leaf,
    Affine { x: Var, w: Var, b: Var },
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Tanh(Var),
    Relu(Var),
    Sigmoid(Var),
    Log(Var),
    SoftmaxRows(Var),
    MaxRows(Var),
    Sum(Var),
    SquaredError(Var, Var),
    ConcatCols(Var, Var),
    ConcatRows(Vec<Var>),
    Gather(Var, Vec<usize>),
    Flip(Var, Vec<bool>),
    Custom(Vec<Var>, BackwardFn),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

impl fmt::Debug for Graph {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Graph")
            .field("nodes", &self.nodes.len())
            .finish()
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient accumulated at `v` by the last [`Graph::backward`] call.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    /// Trainable leaf.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (l, r) = (self.value(a).shape(), self.value(b).shape());
        if l != r {
            return Err(GradError::ShapeMismatch {
                op,
                left: l,
                right: r,
            });
        }
        Ok(())
    }

    fn map(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let src = self.value(a);
        let data = src.data().iter().map(|&x| f(x)).collect();
        let value = Tensor::from_vec(src.rows(), src.cols(), data);
        let rg = self.rg(a);
        self.push(value, op, rg)
    }

    fn zip(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        let data = x
            .data()
            .iter()
            .zip(y.data())
            .map(|(&p, &q)| f(p, q))
            .collect();
        let value = Tensor::from_vec(x.rows(), x.cols(), data);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, op, rg)
    }

    /// `x · w + b` with `b` broadcast over the rows of `x`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xs, ws, bs) = (
            self.value(x).shape(),
            self.value(w).shape(),
            self.value(b).shape(),
        );
        if xs.1 != ws.0 {
            return Err(GradError::ShapeMismatch {
                op: "affine",
                left: xs,
                right: ws,
            });
        }
        if bs != (1, ws.1) {
            return Err(GradError::ShapeMismatch {
                op: "affine bias",
                left: ws,
                right: bs,
            });
        }
        let mut out = Tensor::zeros(xs.0, ws.1);
        let bias = self.value(b).data();
        for r in 0..xs.0 {
            out.data_mut()[r * ws.1..(r + 1) * ws.1].copy_from_slice(bias);
        }
        gemm(
            xs.0,
            xs.1,
            ws.1,
            1.0,
            self.value(x).data(),
            (xs.1 as isize, 1),
            self.value(w).data(),
            (ws.1 as isize, 1),
            1.0,
            out.data_mut(),
        );
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(out, Op::Affine { x, w, b }, rg))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (l, r) = (self.value(a).shape(), self.value(b).shape());
        if l.1 != r.0 {
            return Err(GradError::ShapeMismatch {
                op: "matmul",
                left: l,
                right: r,
            });
        }
        let out = self.value(a).matmul(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        Ok(self.zip(a, b, |p, q| p + q, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        Ok(self.zip(a, b, |p, q| p - q, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        Ok(self.zip(a, b, |p, q| p * q, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        self.map(a, |x| k * x, Op::Scale(a, k))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.map(a, f64::tanh, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.map(a, f64::ln, Op::Log(a))
    }

    /// Softmax over each row.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let src = self.value(a);
        let mut out = src.clone();
        let cols = src.cols();
        if cols > 0 {
            for row in out.data_mut().chunks_mut(cols) {
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for v in row.iter_mut() {
                    *v = (*v - m).exp();
                    z += *v;
                }
                for v in row.iter_mut() {
                    *v /= z;
                }
            }
        }
        let rg = self.rg(a);
        self.push(out, Op::SoftmaxRows(a), rg)
    }

    /// Row-wise maximum, shape `rows x 1`. Ties resolve to the lowest column.
    pub fn max_rows(&mut self, a: Var) -> Result<Var> {
        let src = self.value(a);
        if src.cols() == 0 {
            return Err(GradError::InvalidArgument {
                op: "max_rows",
                detail: "empty rows".into(),
            });
        }
        let data = (0..src.rows())
            .map(|r| src.row_slice(r)[argmax(src.row_slice(r))])
            .collect();
        let out = Tensor::from_vec(src.rows(), 1, data);
        let rg = self.rg(a);
        Ok(self.push(out, Op::MaxRows(a), rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    /// `sum((a - b)^2)` as a `1 x 1` node.
    pub fn squared_error(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("squared_error", a, b)?;
        let s = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(p, q)| (p - q) * (p - q))
            .sum();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::scalar(s), Op::SquaredError(a, b), rg))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (l, r) = (self.value(a).shape(), self.value(b).shape());
        if l.0 != r.0 {
            return Err(GradError::ShapeMismatch {
                op: "concat_cols",
                left: l,
                right: r,
            });
        }
        let cols = l.1 + r.1;
        let mut data = Vec::with_capacity(l.0 * cols);
        for row in 0..l.0 {
            data.extend_from_slice(self.value(a).row_slice(row));
            data.extend_from_slice(self.value(b).row_slice(row));
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::from_vec(l.0, cols, data), Op::ConcatCols(a, b), rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(GradError::InvalidArgument {
                op: "concat_rows",
                detail: "no inputs".into(),
            });
        };
        let cols = self.value(first).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            if t.cols() != cols {
                return Err(GradError::ShapeMismatch {
                    op: "concat_rows",
                    left: self.value(first).shape(),
                    right: t.shape(),
                });
            }
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            Tensor::from_vec(rows, cols, data),
            Op::ConcatRows(parts.to_vec()),
            rg,
        ))
    }

    /// Index-select over the flattened source: `out[k] = src[index[k]]`,
    /// shaped `rows x cols`.
    pub fn gather(&mut self, src: Var, index: Vec<usize>, rows: usize, cols: usize) -> Result<Var> {
        let n = self.value(src).len();
        if index.len() != rows * cols {
            return Err(GradError::InvalidArgument {
                op: "gather",
                detail: format!("{} indices for a {rows}x{cols} output", index.len()),
            });
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= n) {
            return Err(GradError::InvalidArgument {
                op: "gather",
                detail: format!("index {bad} out of range for {n} elements"),
            });
        }
        let s = self.value(src).data();
        let data = index.iter().map(|&i| s[i]).collect();
        let rg = self.rg(src);
        Ok(self.push(
            Tensor::from_vec(rows, cols, data),
            Op::Gather(src, index),
            rg,
        ))
    }

    /// `v -> 1 - v` wherever `mask` is set, identity elsewhere.
    pub fn flip(&mut self, a: Var, mask: Vec<bool>) -> Result<Var> {
        let src = self.value(a);
        if mask.len() != src.len() {
            return Err(GradError::InvalidArgument {
                op: "flip",
                detail: format!("mask of {} for {} elements", mask.len(), src.len()),
            });
        }
        let data = src
            .data()
            .iter()
            .zip(&mask)
            .map(|(&v, &m)| if m { 1.0 - v } else { v })
            .collect();
        let value = Tensor::from_vec(src.rows(), src.cols(), data);
        let rg = self.rg(a);
        Ok(self.push(value, Op::Flip(a, mask), rg))
    }

    /// Records a node whose forward value is `forward(inputs)` and whose
    /// backward pass calls `backward(upstream, inputs, output)` verbatim.
    pub fn custom_op<F, B>(&mut self, inputs: &[Var], forward: F, backward: B) -> Var
    where
        F: FnOnce(&[&Tensor]) -> Tensor,
        B: Fn(&[f64], &[&Tensor], &Tensor) -> Vec<Vec<f64>> + 'static,
    {
        let vals: Vec<&Tensor> = inputs.iter().map(|&v| self.value(v)).collect();
        let out = forward(&vals);
        let rg = inputs.iter().any(|&v| self.rg(v));
        self.push(out, Op::Custom(inputs.to_vec(), Box::new(backward)), rg)
    }

    /// Propagates gradients from a `1 x 1` loss, seeding it with 1.
    /// Gradients from a previous call are discarded.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.value(loss).shape();
        if shape != (1, 1) {
            return Err(GradError::NonScalarLoss(shape));
        }
        let Graph { nodes, grads } = self;
        grads.iter_mut().for_each(|g| *g = None);
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let node = &nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            propagate(nodes, grads, i, &g)?;
            grads[i] = Some(g);
        }
        Ok(())
    }
}

pub(crate) fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Adds a contribution into the gradient buffer of `v`, allocating it on first use.
fn acc<'a>(nodes: &[Node], grads: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut [f64]> {
    if !nodes[v.0].requires_grad {
        return None;
    }
    let n = nodes[v.0].value.len();
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]).as_mut_slice())
}

fn unary(nodes: &[Node], grads: &mut [Option<Vec<f64>>], a: Var, g: &[f64], d: impl Fn(usize) -> f64) {
    if let Some(ga) = acc(nodes, grads, a) {
        for (k, (dst, &up)) in ga.iter_mut().zip(g).enumerate() {
            *dst += up * d(k);
        }
    }
}

fn propagate(nodes: &[Node], grads: &mut [Option<Vec<f64>>], i: usize, g: &[f64]) -> Result<()> {
    let out = &nodes[i].value;
    match &nodes[i].op {
        Op::Leaf => {}
        Op::Affine { x, w, b } => {
            let (r, inner) = nodes[x.0].value.shape();
            let o = nodes[w.0].value.cols();
            matmul_backward(nodes, grads, *x, *w, g, r, inner, o);
            if let Some(gb) = acc(nodes, grads, *b) {
                for row in g.chunks(o) {
                    for (dst, &up) in gb.iter_mut().zip(row) {
                        *dst += up;
                    }
                }
            }
        }
        Op::MatMul(a, b) => {
            let (r, inner) = nodes[a.0].value.shape();
            let o = nodes[b.0].value.cols();
            matmul_backward(nodes, grads, *a, *b, g, r, inner, o);
        }
        Op::Add(a, b) => {
            unary(nodes, grads, *a, g, |_| 1.0);
            unary(nodes, grads, *b, g, |_| 1.0);
        }
        Op::Sub(a, b) => {
            unary(nodes, grads, *a, g, |_| 1.0);
            unary(nodes, grads, *b, g, |_| -1.0);
        }
        Op::Mul(a, b) => {
            let (av, bv) = (nodes[a.0].value.data(), nodes[b.0].value.data());
            unary(nodes, grads, *a, g, |k| bv[k]);
            unary(nodes, grads, *b, g, |k| av[k]);
        }
        Op::Scale(a, k) => unary(nodes, grads, *a, g, |_| *k),
        Op::Tanh(a) => {
            let y = out.data();
            unary(nodes, grads, *a, g, |k| 1.0 - y[k] * y[k]);
        }
        Op::Relu(a) => {
            let x = nodes[a.0].value.data();
            unary(nodes, grads, *a, g, |k| if x[k] > 0.0 { 1.0 } else { 0.0 });
        }
        Op::Sigmoid(a) => {
            let y = out.data();
            unary(nodes, grads, *a, g, |k| y[k] * (1.0 - y[k]));
        }
        Op::Log(a) => {
            let x = nodes[a.0].value.data();
            unary(nodes, grads, *a, g, |k| 1.0 / x[k]);
        }
        Op::SoftmaxRows(a) => {
            let cols = out.cols();
            if let Some(ga) = acc(nodes, grads, *a) {
                for ((dst, y), up) in ga
                    .chunks_mut(cols)
                    .zip(out.data().chunks(cols))
                    .zip(g.chunks(cols))
                {
                    let dot: f64 = y.iter().zip(up).map(|(p, q)| p * q).sum();
                    for c in 0..cols {
                        dst[c] += y[c] * (up[c] - dot);
                    }
                }
            }
        }
        Op::MaxRows(a) => {
            let src = &nodes[a.0].value;
            let cols = src.cols();
            let picks: Vec<usize> = (0..src.rows())
                .map(|r| r * cols + argmax(src.row_slice(r)))
                .collect();
            if let Some(ga) = acc(nodes, grads, *a) {
                for (r, &p) in picks.iter().enumerate() {
                    ga[p] += g[r];
                }
            }
        }
        Op::Sum(a) => {
            if let Some(ga) = acc(nodes, grads, *a) {
                ga.iter_mut().for_each(|d| *d += g[0]);
            }
        }
        Op::SquaredError(a, b) => {
            let (av, bv) = (nodes[a.0].value.data(), nodes[b.0].value.data());
            let up = g[0];
            if let Some(ga) = acc(nodes, grads, *a) {
                for k in 0..ga.len() {
                    ga[k] += 2.0 * (av[k] - bv[k]) * up;
                }
            }
            if let Some(gb) = acc(nodes, grads, *b) {
                for k in 0..gb.len() {
                    gb[k] -= 2.0 * (av[k] - bv[k]) * up;
                }
            }
        }
        Op::ConcatCols(a, b) => {
            let ca = nodes[a.0].value.cols();
            let cb = nodes[b.0].value.cols();
            let cols = ca + cb;
            if let Some(ga) = acc(nodes, grads, *a) {
                for (dst, row) in ga.chunks_mut(ca.max(1)).zip(g.chunks(cols)) {
                    for (d, u) in dst.iter_mut().zip(&row[..ca]) {
                        *d += u;
                    }
                }
            }
            if let Some(gb) = acc(nodes, grads, *b) {
                for (dst, row) in gb.chunks_mut(cb.max(1)).zip(g.chunks(cols)) {
                    for (d, u) in dst.iter_mut().zip(&row[ca..]) {
                        *d += u;
                    }
                }
            }
        }
        Op::ConcatRows(parts) => {
            let mut offset = 0;
            for p in parts {
                let n = nodes[p.0].value.len();
                if let Some(gp) = acc(nodes, grads, *p) {
                    for (d, u) in gp.iter_mut().zip(&g[offset..offset + n]) {
                        *d += u;
                    }
                }
                offset += n;
            }
        }
        Op::Gather(src, index) => {
            if let Some(gs) = acc(nodes, grads, *src) {
                for (&ix, &up) in index.iter().zip(g) {
                    gs[ix] += up;
                }
            }
        }
        Op::Flip(a, mask) => unary(nodes, grads, *a, g, |k| if mask[k] { -1.0 } else { 1.0 }),
        Op::Custom(inputs, backward) => {
            let vals: Vec<&Tensor> = inputs.iter().map(|v| &nodes[v.0].value).collect();
            let parts = backward(g, &vals, out);
            let expected: Vec<usize> = vals.iter().map(|t| t.len()).collect();
            let lens: Vec<usize> = parts.iter().map(Vec::len).collect();
            if lens != expected {
                return Err(GradError::CustomBackwardShape {
                    got: parts.len(),
                    lens,
                    expected,
                });
            }
            for (v, part) in inputs.iter().zip(parts) {
                if let Some(gv) = acc(nodes, grads, *v) {
                    for (d, u) in gv.iter_mut().zip(part) {
                        *d += u;
                    }
                }
            }
        }
    }
    Ok(())
}

/// Gradients of `y = a · b` where `a` is `r x inner` and `b` is `inner x o`.
#[allow(clippy::too_many_arguments)]
fn matmul_backward(
    nodes: &[Node],
    grads: &mut [Option<Vec<f64>>],
    a: Var,
    b: Var,
    g: &[f64],
    r: usize,
    inner: usize,
    o: usize,
) {
    let bv = nodes[b.0].value.data();
    let av = nodes[a.0].value.data();
    if let Some(ga) = acc(nodes, grads, a) {
        // dA = G · Bᵀ
        gemm(r, o, inner, 1.0, g, (o as isize, 1), bv, (1, o as isize), 1.0, ga);
    }
    if let Some(gb) = acc(nodes, grads, b) {
        // dB = Aᵀ · G
        gemm(inner, r, o, 1.0, av, (1, inner as isize), g, (o as isize, 1), 1.0, gb);
    }
}

#[cfg(test)]
mod tests;
