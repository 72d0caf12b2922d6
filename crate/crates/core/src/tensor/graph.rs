use std::ops::Range;

use super::kernels::{gemm, transpose};
use super::{Rng, Scalar, Tensor};
use crate::error::{Error, Result};
use crate::par::Exec;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Elementwise nonlinearities.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Unary {
    LeakyRelu(f64),
    Relu,
    Sigmoid,
    Softplus,
    Exp,
    Log,
    Square,
}

impl Unary {
    fn name(self) -> &'static str {
        match self {
            Unary::LeakyRelu(_) => "leaky_relu",
            Unary::Relu => "relu",
            Unary::Sigmoid => "sigmoid",
            Unary::Softplus => "softplus",
            Unary::Exp => "exp",
            Unary::Log => "log",
            Unary::Square => "square",
        }
    }

    fn forward<S: Scalar>(self, x: S) -> S {
        let zero = S::zero();
        let one = S::one();
        match self {
            Unary::LeakyRelu(slope) => {
                if x > zero {
                    x
                } else {
                    x * S::of(slope)
                }
            }
            Unary::Relu => x.max(zero),
            Unary::Sigmoid => {
                if x >= zero {
                    one / (one + (-x).exp())
                } else {
                    let e = x.exp();
                    e / (one + e)
                }
            }
            Unary::Softplus => x.max(zero) + (-x.abs()).exp().ln_1p(),
            Unary::Exp => x.exp(),
            Unary::Log => x.ln(),
            Unary::Square => x * x,
        }
    }

    /// dy/dx from the input `x` and the cached output `y`.
    fn derivative<S: Scalar>(self, x: S, y: S) -> S {
        let zero = S::zero();
        let one = S::one();
        match self {
            Unary::LeakyRelu(slope) => {
                if x > zero {
                    one
                } else {
                    S::of(slope)
                }
            }
            Unary::Relu => {
                if x > zero {
                    one
                } else {
                    zero
                }
            }
            Unary::Sigmoid => y * (one - y),
            Unary::Softplus => Unary::Sigmoid.forward(x),
            Unary::Exp => y,
            Unary::Log => one / x,
            Unary::Square => x + x,
        }
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Affine(Var, f64),
    Unary(Var, Unary),
    Clamp(Var, f64, f64),
    ConcatCols(Var, Var),
    SliceCols(Var, usize),
    GatherRows(Var, Vec<usize>),
    Reshape(Var),
    SumAll(Var),
    SumRows(Var),
    SumCols(Var),
    LogSoftmax(Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddBias(..) => "add_bias",
            Op::Affine(..) => "affine",
            Op::Unary(_, u) => u.name(),
            Op::Clamp(..) => "clamp",
            Op::ConcatCols(..) => "concat",
            Op::SliceCols(..) => "slice",
            Op::GatherRows(..) => "gather_rows",
            Op::Reshape(..) => "reshape",
            Op::SumAll(..) | Op::SumRows(..) | Op::SumCols(..) => "sum",
            Op::LogSoftmax(..) => "log_softmax",
        }
    }
}

struct Node<S> {
    value: Tensor<S>,
    op: Op,
    tracked: bool,
}

/// Reduction axis for [`Graph::sum`] and [`Graph::mean`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    /// Every element, giving a scalar.
    All,
    /// Down the rows: `[n×q] → [1×q]`.
    Rows,
    /// Across the columns: `[n×q] → [n×1]`.
    Cols,
}

/// Tape of executed operations.
///
/// Nodes are appended in execution order, so parents always precede
/// children and [`Graph::backward`] walks the tape in reverse. Forward values
/// are cached on the nodes. Every op checks its output for NaN/Inf and fails
/// with the op name instead of propagating.
pub struct Graph<S> {
    nodes: Vec<Node<S>>,
    grads: Vec<Option<Tensor<S>>>,
    backward_done: bool,
    exec: Exec,
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Self::with_exec(Exec::auto())
    }

    pub fn with_exec(exec: Exec) -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
            backward_done: false,
            exec,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Untracked input.
    pub fn constant(&mut self, t: Tensor<S>) -> Var {
        self.push_leaf(t, false)
    }

    /// Tracked input; receives a gradient on backward.
    pub fn param(&mut self, t: Tensor<S>) -> Var {
        self.push_leaf(t, true)
    }

    pub fn leaf(&mut self, t: Tensor<S>, tracked: bool) -> Var {
        self.push_leaf(t, tracked)
    }

    fn push_leaf(&mut self, t: Tensor<S>, tracked: bool) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            tracked,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor<S>, op: Op, parents: &[Var]) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::non_finite(op.name()));
        }
        let tracked = parents.iter().any(|p| self.nodes[p.0].tracked);
        self.nodes.push(Node { value, op, tracked });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn is_tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    /// Gradient of the last backward pass, if `v` is a tracked ancestor of the loss.
    pub fn grad(&self, v: Var) -> Option<&Tensor<S>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    fn mat_dims(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        let s = self.shape(v);
        if s.len() != 2 {
            return Err(Error::Shape {
                op,
                lhs: s.to_vec(),
                rhs: vec![],
            });
        }
        Ok((s[0], s[1]))
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, p) = self.mat_dims(a, "matmul")?;
        let (p2, q) = self.mat_dims(b, "matmul")?;
        if p != p2 {
            return Err(Error::Shape {
                op: "matmul",
                lhs: vec![n, p],
                rhs: vec![p2, q],
            });
        }
        let out = gemm(self.exec, self.value(a).data(), n, p, self.value(b).data(), q);
        self.push(Tensor::matrix(n, q, out)?, Op::MatMul(a, b), &[a, b])
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, f: impl Fn(S, S) -> S) -> Result<Var> {
        self.same_shape(a, b, op.name())?;
        let va = self.value(a);
        let data = va
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let t = Tensor::new(va.shape().to_vec(), data)?;
        self.push(t, op, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    /// `x[n×q] + bias` with `bias` of shape `[q]` or `[1×q]` broadcast over rows.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (n, q) = self.mat_dims(x, "add_bias")?;
        if self.value(bias).numel() != q || self.value(bias).rows() != 1 {
            return Err(Error::Shape {
                op: "add_bias",
                lhs: vec![n, q],
                rhs: self.shape(bias).to_vec(),
            });
        }
        let b = self.value(bias).data();
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_mut(q) {
            for (o, &bj) in row.iter_mut().zip(b) {
                *o = *o + bj;
            }
        }
        self.push(Tensor::matrix(n, q, data)?, Op::AddBias(x, bias), &[x, bias])
    }

    /// `scale · x + shift`.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Result<Var> {
        let (sc, sh) = (S::of(scale), S::of(shift));
        let t = self.value(x).map(|v| sc * v + sh);
        self.push(t, Op::Affine(x, scale), &[x])
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.affine(x, c, 0.0)
    }

    pub fn unary(&mut self, x: Var, f: Unary) -> Result<Var> {
        let t = self.value(x).map(|v| f.forward(v));
        self.push(t, Op::Unary(x, f), &[x])
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Result<Var> {
        self.unary(x, Unary::LeakyRelu(slope))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Relu)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Sigmoid)
    }

    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Softplus)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Exp)
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Log)
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Square)
    }

    /// Clamps into `[lo, hi]`; the gradient is zero where the bound is active.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        let (l, h) = (S::of(lo), S::of(hi));
        let t = self.value(x).map(|v| v.max(l).min(h));
        self.push(t, Op::Clamp(x, lo, hi), &[x])
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        self.mat_dims(a, "concat")?;
        self.mat_dims(b, "concat")?;
        let t = Tensor::concat_cols(self.value(a), self.value(b))?;
        self.push(t, Op::ConcatCols(a, b), &[a, b])
    }

    pub fn slice_cols(&mut self, x: Var, range: Range<usize>) -> Result<Var> {
        let (_, q) = self.mat_dims(x, "slice")?;
        if range.start >= range.end || range.end > q {
            return Err(Error::Bounds {
                op: "slice",
                detail: format!("columns {range:?} of a tensor with {q} columns"),
            });
        }
        let t = self.value(x).slice_cols(range.start, range.end);
        self.push(t, Op::SliceCols(x, range.start), &[x])
    }

    /// Output row `t` is input row `idx[t]`; repeated indices are allowed.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (n, _) = self.mat_dims(x, "gather_rows")?;
        if idx.is_empty() {
            return Err(Error::Bounds {
                op: "gather_rows",
                detail: "empty index list".into(),
            });
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(Error::Bounds {
                op: "gather_rows",
                detail: format!("row {bad} of {n}"),
            });
        }
        let t = self.value(x).select_rows(idx);
        self.push(t, Op::GatherRows(x, idx.to_vec()), &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape.to_vec())?;
        self.push(t, Op::Reshape(x), &[x])
    }

    pub fn sum(&mut self, x: Var, axis: Axis) -> Result<Var> {
        let v = self.value(x);
        match axis {
            Axis::All => {
                let s = v.data().iter().fold(S::zero(), |acc, &e| acc + e);
                self.push(Tensor::scalar(s), Op::SumAll(x), &[x])
            }
            Axis::Rows => {
                let (n, q) = self.mat_dims(x, "sum")?;
                let v = self.value(x).data();
                let mut out = vec![S::zero(); q];
                for i in 0..n {
                    for (o, &e) in out.iter_mut().zip(&v[i * q..(i + 1) * q]) {
                        *o = *o + e;
                    }
                }
                self.push(Tensor::matrix(1, q, out)?, Op::SumRows(x), &[x])
            }
            Axis::Cols => {
                let (n, q) = self.mat_dims(x, "sum")?;
                let v = self.value(x).data();
                let out = (0..n)
                    .map(|i| v[i * q..(i + 1) * q].iter().fold(S::zero(), |a, &e| a + e))
                    .collect();
                self.push(Tensor::matrix(n, 1, out)?, Op::SumCols(x), &[x])
            }
        }
    }

    pub fn mean(&mut self, x: Var, axis: Axis) -> Result<Var> {
        let count = match axis {
            Axis::All => self.value(x).numel(),
            Axis::Rows => self.value(x).rows(),
            Axis::Cols => self.value(x).cols(),
        };
        let s = self.sum(x, axis)?;
        self.scale(s, 1.0 / count as f64)
    }

    /// Row-wise `log softmax`, computed with the max-shift for stability.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let (n, q) = self.mat_dims(x, "log_softmax")?;
        let v = self.value(x).data();
        let mut out = Vec::with_capacity(n * q);
        for row in v.chunks(q) {
            let m = row.iter().fold(S::neg_infinity(), |a, &b| a.max(b));
            let lse = m + row.iter().map(|&e| (e - m).exp()).sum::<S>().ln();
            out.extend(row.iter().map(|&e| e - lse));
        }
        self.push(Tensor::matrix(n, q, out)?, Op::LogSoftmax(x), &[x])
    }

    /// Inverted dropout. In training mode each entry is zeroed with
    /// probability `rate` and survivors are scaled by `1/(1-rate)`; with
    /// `rng = None` (evaluation) the input passes through unchanged.
    pub fn dropout(&mut self, x: Var, rate: f64, rng: Option<&mut Rng>) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!("dropout rate {rate} outside [0, 1)")));
        }
        let rng = match rng {
            Some(r) if rate > 0.0 => r,
            _ => return Ok(x),
        };
        let keep = S::of(1.0 / (1.0 - rate));
        let shape = self.shape(x).to_vec();
        let mask: Vec<S> = (0..self.value(x).numel())
            .map(|_| if rng.bernoulli(rate) { S::zero() } else { keep })
            .collect();
        let m = self.constant(Tensor::new(shape, mask)?);
        self.mul(x, m)
    }

    /// Which side of every kink (ReLU and leaky ReLU inputs at 0, clamp
    /// bounds) each element sits on. Two evaluations with equal patterns lie
    /// in the same differentiable piece of the function.
    pub fn kink_pattern(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for node in &self.nodes {
            match node.op {
                Op::Unary(x, Unary::Relu | Unary::LeakyRelu(_)) => {
                    let zero = S::zero();
                    out.extend(self.value(x).data().iter().map(|&v| u8::from(v > zero)));
                }
                Op::Clamp(x, lo, hi) => {
                    let (l, h) = (S::of(lo), S::of(hi));
                    out.extend(
                        self.value(x)
                            .data()
                            .iter()
                            .map(|&v| if v < l { 0 } else if v > h { 2 } else { 1 }),
                    );
                }
                _ => {}
            }
        }
        out
    }

    /// Runs reverse-mode differentiation from the scalar `loss`.
    ///
    /// Fills gradients for every tracked node reachable from `loss`. A second
    /// call without [`Graph::reset_grads`] is an error.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::Contract(
                "backward called twice without resetting gradients".into(),
            ));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        if !self.nodes[loss.0].tracked {
            return Err(Error::Contract(
                "loss does not depend on any tracked tensor".into(),
            ));
        }
        self.backward_done = true;
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        let seed = Tensor::full(self.shape(loss), S::one());
        self.grads[loss.0] = Some(seed);

        for id in (0..=loss.0).rev() {
            let Some(g) = self.grads[id].take() else {
                continue;
            };
            if !self.nodes[id].tracked {
                continue;
            }
            self.propagate(id, &g)?;
            self.grads[id] = Some(g);
        }
        Ok(())
    }

    pub fn reset_grads(&mut self) {
        self.grads.clear();
        self.backward_done = false;
    }

    fn accumulate(&mut self, v: Var, contribution: Tensor<S>, op: &'static str) -> Result<()> {
        if !self.nodes[v.0].tracked {
            return Ok(());
        }
        if !contribution.all_finite() {
            return Err(Error::non_finite(format!("backward of {op}")));
        }
        match &mut self.grads[v.0] {
            Some(acc) => {
                for (a, &c) in acc.data_mut().iter_mut().zip(contribution.data()) {
                    *a = *a + c;
                }
            }
            slot @ None => *slot = Some(contribution),
        }
        Ok(())
    }

    fn propagate(&mut self, id: usize, g: &Tensor<S>) -> Result<()> {
        let op = self.nodes[id].op.clone();
        let name = op.name();
        let gd = g.data();
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (n, p) = self.mat_dims(a, "matmul")?;
                let q = self.value(b).cols();
                if self.is_tracked(a) {
                    let bt = transpose(self.value(b).data(), p, q);
                    let ga = gemm(self.exec, gd, n, q, &bt, p);
                    self.accumulate(a, Tensor::matrix(n, p, ga)?, name)?;
                }
                if self.is_tracked(b) {
                    let at = transpose(self.value(a).data(), n, p);
                    let gb = gemm(self.exec, &at, p, n, gd, q);
                    self.accumulate(b, Tensor::matrix(p, q, gb)?, name)?;
                }
            }
            Op::Add(a, b) => {
                self.accumulate(a, g.clone(), name)?;
                self.accumulate(b, g.clone(), name)?;
            }
            Op::Sub(a, b) => {
                self.accumulate(a, g.clone(), name)?;
                self.accumulate(b, g.map(|v| -v), name)?;
            }
            Op::Mul(a, b) => {
                if self.is_tracked(a) {
                    let t = zip(g, self.value(b), |x, y| x * y);
                    self.accumulate(a, t, name)?;
                }
                if self.is_tracked(b) {
                    let t = zip(g, self.value(a), |x, y| x * y);
                    self.accumulate(b, t, name)?;
                }
            }
            Op::AddBias(x, bias) => {
                self.accumulate(x, g.clone(), name)?;
                if self.is_tracked(bias) {
                    let q = g.cols();
                    let mut gb = vec![S::zero(); q];
                    for row in gd.chunks(q) {
                        for (o, &e) in gb.iter_mut().zip(row) {
                            *o = *o + e;
                        }
                    }
                    let shape = self.shape(bias).to_vec();
                    self.accumulate(bias, Tensor::new(shape, gb)?, name)?;
                }
            }
            Op::Affine(x, scale) => {
                let s = S::of(scale);
                self.accumulate(x, g.map(|v| v * s), name)?;
            }
            Op::Unary(x, f) => {
                let xv = self.value(x);
                let yv = &self.nodes[id].value;
                let data = gd
                    .iter()
                    .zip(xv.data().iter().zip(yv.data()))
                    .map(|(&gi, (&xi, &yi))| gi * f.derivative(xi, yi))
                    .collect();
                let t = Tensor::new(xv.shape().to_vec(), data)?;
                self.accumulate(x, t, name)?;
            }
            Op::Clamp(x, lo, hi) => {
                let (l, h) = (S::of(lo), S::of(hi));
                let t = zip(g, self.value(x), |gi, xi| {
                    if xi < l || xi > h {
                        S::zero()
                    } else {
                        gi
                    }
                });
                self.accumulate(x, t, name)?;
            }
            Op::ConcatCols(a, b) => {
                let ca = self.value(a).cols();
                let cols = g.cols();
                self.accumulate(a, g.slice_cols(0, ca), name)?;
                self.accumulate(b, g.slice_cols(ca, cols), name)?;
            }
            Op::SliceCols(x, start) => {
                let (n, q) = self.mat_dims(x, "slice")?;
                let w = g.cols();
                let mut out = vec![S::zero(); n * q];
                for i in 0..n {
                    out[i * q + start..i * q + start + w].copy_from_slice(g.row(i));
                }
                self.accumulate(x, Tensor::matrix(n, q, out)?, name)?;
            }
            Op::GatherRows(x, idx) => {
                let (n, q) = self.mat_dims(x, "gather_rows")?;
                let mut out = vec![S::zero(); n * q];
                for (t, &src) in idx.iter().enumerate() {
                    for (o, &e) in out[src * q..(src + 1) * q].iter_mut().zip(g.row(t)) {
                        *o = *o + e;
                    }
                }
                self.accumulate(x, Tensor::matrix(n, q, out)?, name)?;
            }
            Op::Reshape(x) => {
                let shape = self.shape(x).to_vec();
                self.accumulate(x, g.clone().reshape(shape)?, name)?;
            }
            Op::SumAll(x) => {
                let shape = self.shape(x).to_vec();
                self.accumulate(x, Tensor::full(&shape, g.item()), name)?;
            }
            Op::SumRows(x) => {
                let (n, q) = self.mat_dims(x, "sum")?;
                let mut out = Vec::with_capacity(n * q);
                for _ in 0..n {
                    out.extend_from_slice(gd);
                }
                self.accumulate(x, Tensor::matrix(n, q, out)?, name)?;
            }
            Op::SumCols(x) => {
                let (n, q) = self.mat_dims(x, "sum")?;
                let out = gd.iter().flat_map(|&v| std::iter::repeat_n(v, q)).collect();
                self.accumulate(x, Tensor::matrix(n, q, out)?, name)?;
            }
            Op::LogSoftmax(x) => {
                // dx = g - softmax * rowsum(g)
                let y = &self.nodes[id].value;
                let q = y.cols();
                let mut out = Vec::with_capacity(y.numel());
                for (yr, gr) in y.data().chunks(q).zip(gd.chunks(q)) {
                    let gs = gr.iter().fold(S::zero(), |a, &b| a + b);
                    out.extend(yr.iter().zip(gr).map(|(&yi, &gi)| gi - yi.exp() * gs));
                }
                let t = Tensor::new(y.shape().to_vec(), out)?;
                self.accumulate(x, t, name)?;
            }
        }
        Ok(())
    }
}

fn zip<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>, f: impl Fn(S, S) -> S) -> Tensor<S> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("same shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn mat(rows: &[&[f64]]) -> Tensor<f64> {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn identity_matmul() {
        let mut g = Graph::<f64>::new();
        let i = g.constant(mat(&[&[1.0, 0.0], &[0.0, 1.0]]));
        let m = g.constant(mat(&[&[2.5, -1.0], &[0.25, 7.0]]));
        let p = g.matmul(i, m).unwrap();
        assert_eq!(g.value(p), g.value(m));
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn pointwise_values() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::scalar(0.0));
        let s = g.sigmoid(x).unwrap();
        let sp = g.softplus(x).unwrap();
        assert_eq!(g.value(s).item(), 0.5);
        assert_abs_diff_eq!(g.value(sp).item(), std::f64::consts::LN_2, epsilon = 1e-15);
        let y = g.constant(Tensor::scalar(-1.0));
        let l = g.leaky_relu(y, 0.2).unwrap();
        assert_abs_diff_eq!(g.value(l).item(), -0.2, epsilon = 1e-15);
    }

    #[test]
    fn log_of_zero_is_a_numeric_error() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::scalar(0.0));
        let err = g.log(x).unwrap_err();
        assert!(matches!(err, Error::NonFinite { ref op } if op == "log"), "{err}");
    }

    #[test]
    fn slice_gradient_has_disjoint_support() {
        let mut g = Graph::<f64>::new();
        let a = g.param(Tensor::full(&[4, 2], 1.0));
        let b = g.param(Tensor::full(&[4, 3], 2.0));
        let h = g.concat_cols(a, b).unwrap();
        assert_eq!(g.shape(h), &[4, 5]);
        let hs = g.slice_cols(h, 0..2).unwrap();
        assert_eq!(g.value(hs), g.value(a));
        let loss = g.sum(hs, Axis::All).unwrap();
        g.backward(loss).unwrap();
        assert!(g.grad(a).unwrap().data().iter().all(|&v| v == 1.0));
        assert!(g.grad(b).unwrap().data().iter().all(|&v| v == 0.0));
        assert!(g.grad(h).unwrap().slice_cols(2, 5).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn out_of_range_slice() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros(&[2, 3]));
        assert!(matches!(g.slice_cols(x, 2..4), Err(Error::Bounds { .. })));
    }

    #[test]
    fn mean_and_dropout_identity() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::matrix(1, 4, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let m = g.mean(x, Axis::All).unwrap();
        assert_eq!(g.value(m).item(), 2.5);
        let mut rng = Rng::new(0, "dropout");
        let d = g.dropout(x, 0.0, Some(&mut rng)).unwrap();
        assert_eq!(d, x);
        assert!(matches!(
            g.dropout(x, 1.0, Some(&mut rng)),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn dropout_preserves_mean() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::full(&[1, 100_000], 1.0));
        let mut rng = Rng::new(11, "dropout");
        let d = g.dropout(x, 0.5, Some(&mut rng)).unwrap();
        let mean = g.value(d).data().iter().sum::<f64>() / 100_000.0;
        assert!((mean - 1.0).abs() < 0.02, "{mean}");
    }

    #[test]
    fn linear_loss_gradient_is_replicated_input() {
        // loss = sum(x · W): dL/dW[i][j] = sum over rows of x[:, i]
        let mut g = Graph::<f64>::new();
        let x = g.constant(mat(&[&[1.0, 2.0, 3.0]]));
        let w = g.param(Tensor::full(&[3, 2], 0.5));
        let y = g.matmul(x, w).unwrap();
        let loss = g.sum(y, Axis::All).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(w).unwrap(), &mat(&[&[1.0, 1.0], &[2.0, 2.0], &[3.0, 3.0]]));
        assert!(g.grad(x).is_none());
    }

    #[test]
    fn backward_contract_errors() {
        let mut g = Graph::<f64>::new();
        let w = g.param(Tensor::full(&[2, 2], 1.0));
        assert!(matches!(g.backward(w), Err(Error::Contract(_))));
        let c = g.constant(Tensor::scalar(1.0));
        assert!(matches!(g.backward(c), Err(Error::Contract(_))));
        let s = g.sum(w, Axis::All).unwrap();
        g.backward(s).unwrap();
        assert!(matches!(g.backward(s), Err(Error::Contract(_))));
        g.reset_grads();
        g.backward(s).unwrap();
    }

    #[test]
    fn log_softmax_rows_normalize() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(mat(&[&[1.0, 2.0, 3.0], &[1000.0, 0.0, -1000.0]]));
        let y = g.log_softmax(x).unwrap();
        for r in 0..2 {
            let s: f64 = g.value(y).row(r).iter().map(|v| v.exp()).sum();
            assert_abs_diff_eq!(s, 1.0, epsilon = 1e-12);
        }
    }
}
