//! Tape-based reverse-mode differentiation.
//!
//! Every operation appends a node holding its output value and the handles
//! of its inputs. Because inputs always precede outputs, walking the tape
//! backwards visits nodes in reverse topological order and each adjoint rule
//! runs exactly once.

use super::tensor::{pairwise_sum, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Closed set of element-wise operations.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ElementwiseKind {
    Add,
    Mul,
    Relu,
    Log,
    Exp,
    Square,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Relu(Var),
    Log(Var),
    Exp(Var),
    Square(Var),
    Softmax(Var),
    Concat(Vec<Var>),
    Slice { src: Var, start: usize, end: usize },
    Sum(Var),
    Mean(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of executed operations.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    backward_done: bool,
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

    /// Drops every recorded node so the tape can be reused.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.grads.clear();
        self.backward_done = false;
    }

    /// Records an input. It tracks gradients iff `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        let requires_grad = tensor.requires_grad();
        self.push(tensor, Op::Leaf, requires_grad)
    }

    /// Records a non-tracking input.
    pub fn constant(&mut self, tensor: Tensor) -> Var {
        let tensor = tensor.with_grad(false);
        self.push(tensor, Op::Leaf, false)
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

    /// Gradient of the last backward pass, if `v` tracks gradients.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        if !self.backward_done || !self.nodes[v.0].requires_grad {
            return None;
        }
        match self.grads.get(v.0) {
            Some(Some(g)) => Some(g),
            // tracked but unreachable from the loss
            _ => None,
        }
    }

    /// Gradient of `v`, zeros when it was not reached by the loss.
    pub fn grad_or_zeros(&self, v: Var) -> Option<Vec<f64>> {
        if !self.backward_done || !self.nodes[v.0].requires_grad {
            return None;
        }
        Some(
            self.grad(v)
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; self.nodes[v.0].value.numel()]),
        )
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn tracks(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dim("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            (self.value(a).data(), k as isize, 1),
            (self.value(b).data(), n as isize, 1),
            &mut out,
            0.0,
        );
        let value = Tensor::new(vec![m, n], out)?;
        let rg = self.tracks(&[a, b]);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    fn binary(&mut self, a: Var, b: Var, mul: bool) -> Result<Var> {
        let op_name = if mul { "mul" } else { "add" };
        let (ta, tb) = (self.value(a), self.value(b));
        let f = |x: f64, y: f64| if mul { x * y } else { x + y };
        let value = if ta.shape() == tb.shape() {
            let data = ta
                .data()
                .iter()
                .zip(tb.data())
                .map(|(&x, &y)| f(x, y))
                .collect();
            Tensor::new(ta.shape().to_vec(), data)?
        } else if tb.is_scalar() {
            let y = tb.item();
            let data = ta.data().iter().map(|&x| f(x, y)).collect();
            Tensor::new(ta.shape().to_vec(), data)?
        } else if ta.is_scalar() {
            let x = ta.item();
            let data = tb.data().iter().map(|&y| f(x, y)).collect();
            Tensor::new(tb.shape().to_vec(), data)?
        } else {
            return Err(Error::dim(op_name, ta.shape(), tb.shape()));
        };
        let rg = self.tracks(&[a, b]);
        let op = if mul { Op::Mul(a, b) } else { Op::Add(a, b) };
        Ok(self.push(value, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, false)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, true)
    }

    fn unary(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let t = self.value(x);
        let data = t.data().iter().map(|&v| f(v)).collect();
        let value = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        let rg = self.tracks(&[x]);
        self.push(value, op, rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Relu(x), |v| if v < 0.0 { 0.0 } else { v })
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Op::Exp(x), f64::exp)
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, Op::Square(x), |v| v * v)
    }

    /// Natural log; every entry must be strictly positive.
    pub fn log(&mut self, x: Var) -> Result<Var> {
        if let Some(bad) = self.value(x).data().iter().find(|&&v| !(v > 0.0)) {
            return Err(Error::Domain {
                op: "log",
                detail: format!("non-positive input {bad}"),
            });
        }
        Ok(self.unary(x, Op::Log(x), f64::ln))
    }

    /// Dispatches one of the closed element-wise operations.
    pub fn elementwise(&mut self, kind: ElementwiseKind, inputs: &[Var]) -> Result<Var> {
        let arity = match kind {
            ElementwiseKind::Add | ElementwiseKind::Mul => 2,
            _ => 1,
        };
        if inputs.len() != arity {
            return Err(Error::Contract(format!(
                "{kind:?} takes {arity} inputs, got {}",
                inputs.len()
            )));
        }
        match kind {
            ElementwiseKind::Add => self.add(inputs[0], inputs[1]),
            ElementwiseKind::Mul => self.mul(inputs[0], inputs[1]),
            ElementwiseKind::Relu => Ok(self.relu(inputs[0])),
            ElementwiseKind::Log => self.log(inputs[0]),
            ElementwiseKind::Exp => Ok(self.exp(inputs[0])),
            ElementwiseKind::Square => Ok(self.square(inputs[0])),
        }
    }

    /// Softmax over the last axis, max-subtracted.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.data().iter().any(|v| v.is_nan()) {
            return Err(Error::Numeric("NaN input to softmax".into()));
        }
        let cols = t.cols();
        let mut data = Vec::with_capacity(t.numel());
        for row in t.data().chunks(cols) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let start = data.len();
            data.extend(row.iter().map(|&v| (v - max).exp()));
            let total: f64 = data[start..].iter().sum();
            data[start..].iter_mut().for_each(|v| *v /= total);
        }
        let value = Tensor::new(t.shape().to_vec(), data)?;
        let rg = self.tracks(&[x]);
        Ok(self.push(value, Op::Softmax(x), rg))
    }

    /// Concatenation along the last axis. Leading dimensions must agree.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
        let lead = self.shape(*first)[..self.shape(*first).len().saturating_sub(1)].to_vec();
        let rows = self.value(*first).rows();
        let mut total_cols = 0;
        for p in parts {
            let s = self.shape(*p);
            if s.len() != lead.len() + 1 || s[..lead.len()] != lead[..] {
                return Err(Error::dim("concat", self.shape(*first), s));
            }
            total_cols += self.value(*p).cols();
        }
        let mut data = Vec::with_capacity(rows * total_cols);
        for r in 0..rows {
            for p in parts {
                data.extend_from_slice(self.value(*p).row(r));
            }
        }
        let mut shape = lead;
        shape.push(total_cols);
        let value = Tensor::new(shape, data)?;
        let rg = self.tracks(parts);
        Ok(self.push(value, Op::Concat(parts.to_vec()), rg))
    }

    /// Columns `start..end` of the last axis.
    pub fn slice(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let t = self.value(x);
        let cols = t.cols();
        if start >= end || end > cols {
            return Err(Error::dim("slice", t.shape(), &[start, end]));
        }
        let data = (0..t.rows())
            .flat_map(|r| t.row(r)[start..end].iter().copied())
            .collect();
        let mut shape = t.shape().to_vec();
        if let Some(last) = shape.last_mut() {
            *last = end - start;
        } else {
            shape.push(end - start);
        }
        let value = Tensor::new(shape, data)?;
        let rg = self.tracks(&[x]);
        Ok(self.push(value, Op::Slice { src: x, start, end }, rg))
    }

    /// Sum of all entries, as a scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = pairwise_sum(self.value(x).data());
        let rg = self.tracks(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    /// Mean of all entries, as a scalar.
    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = pairwise_sum(t.data()) / t.numel() as f64;
        let rg = self.tracks(&[x]);
        self.push(Tensor::scalar(s), Op::Mean(x), rg)
    }

    /// `x · c` for a constant `c`.
    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let k = self.constant(Tensor::scalar(c));
        self.mul(x, k)
    }

    /// `a − b`.
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let nb = self.scale(b, -1.0)?;
        self.add(a, nb)
    }

    /// Adds a `[1 × n]` row to every row of a `[m × n]` matrix, via
    /// `ones[m×1] · row`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let m = self.value(x).rows();
        let ones = self.constant(Tensor::ones(&[m, 1]));
        let expanded = self.matmul(ones, row)?;
        self.add(x, expanded)
    }

    /// Multiplies every row of `x` by the matching entry of the `[m × 1]`
    /// column `weights`.
    pub fn scale_rows(&mut self, x: Var, weights: Var) -> Result<Var> {
        let n = self.value(x).cols();
        let ones = self.constant(Tensor::ones(&[1, n]));
        let expanded = self.matmul(weights, ones)?;
        self.mul(x, expanded)
    }

    /// Populates gradients of every tracking node reachable from `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(Error::Contract("backward on an empty tape".into()));
        }
        if self.backward_done {
            return Err(Error::State(
                "backward already ran on this tape; reset it first".into(),
            ));
        }
        if !self.value(loss).is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.backward_done = true;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let val = |v: Var| &self.nodes[v.0].value;
        let rg = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                if rg(*a) {
                    let ga = slot(grads, *a, m * k);
                    // dA = dC · Bᵀ
                    gemm(
                        m,
                        n,
                        k,
                        (g, n as isize, 1),
                        (tb.data(), 1, n as isize),
                        ga,
                        1.0,
                    );
                }
                if rg(*b) {
                    let gb = slot(grads, *b, k * n);
                    // dB = Aᵀ · dC
                    gemm(
                        k,
                        m,
                        n,
                        (ta.data(), 1, k as isize),
                        (g, n as isize, 1),
                        gb,
                        1.0,
                    );
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if rg(v) {
                        accumulate_broadcast(grads, v, val(v).numel(), g, None);
                    }
                }
            }
            Op::Mul(a, b) => {
                if rg(*a) {
                    accumulate_broadcast(grads, *a, val(*a).numel(), g, Some(val(*b).data()));
                }
                if rg(*b) {
                    accumulate_broadcast(grads, *b, val(*b).numel(), g, Some(val(*a).data()));
                }
            }
            Op::Relu(x) => {
                let xs = val(*x).data();
                let gx = slot(grads, *x, xs.len());
                for ((acc, &gi), &xi) in gx.iter_mut().zip(g).zip(xs) {
                    if xi > 0.0 {
                        *acc += gi;
                    }
                }
            }
            Op::Log(x) => {
                let xs = val(*x).data();
                let gx = slot(grads, *x, xs.len());
                for ((acc, &gi), &xi) in gx.iter_mut().zip(g).zip(xs) {
                    *acc += gi / xi;
                }
            }
            Op::Exp(x) => {
                let ys = node.value.data();
                let gx = slot(grads, *x, ys.len());
                for ((acc, &gi), &yi) in gx.iter_mut().zip(g).zip(ys) {
                    *acc += gi * yi;
                }
            }
            Op::Square(x) => {
                let xs = val(*x).data();
                let gx = slot(grads, *x, xs.len());
                for ((acc, &gi), &xi) in gx.iter_mut().zip(g).zip(xs) {
                    *acc += 2.0 * xi * gi;
                }
            }
            Op::Softmax(x) => {
                let ys = node.value.data();
                let cols = node.value.cols();
                let gx = slot(grads, *x, ys.len());
                for ((gr, yr), acc) in g.chunks(cols).zip(ys.chunks(cols)).zip(gx.chunks_mut(cols))
                {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for ((a, &gi), &yi) in acc.iter_mut().zip(gr).zip(yr) {
                        *a += yi * (gi - dot);
                    }
                }
            }
            Op::Concat(parts) => {
                let rows = node.value.rows();
                let total = node.value.cols();
                let mut offset = 0;
                for p in parts {
                    let c = val(*p).cols();
                    if rg(*p) {
                        let gp = slot(grads, *p, rows * c);
                        for r in 0..rows {
                            let src = &g[r * total + offset..r * total + offset + c];
                            for (a, &s) in gp[r * c..(r + 1) * c].iter_mut().zip(src) {
                                *a += s;
                            }
                        }
                    }
                    offset += c;
                }
            }
            Op::Slice { src, start, end } => {
                let t = val(*src);
                let (rows, cols, w) = (t.rows(), t.cols(), end - start);
                let gs = slot(grads, *src, rows * cols);
                for r in 0..rows {
                    for (a, &s) in gs[r * cols + start..r * cols + end]
                        .iter_mut()
                        .zip(&g[r * w..(r + 1) * w])
                    {
                        *a += s;
                    }
                }
            }
            Op::Sum(x) => {
                let n = val(*x).numel();
                slot(grads, *x, n).iter_mut().for_each(|a| *a += g[0]);
            }
            Op::Mean(x) => {
                let n = val(*x).numel();
                let share = g[0] / n as f64;
                slot(grads, *x, n).iter_mut().for_each(|a| *a += share);
            }
        }
    }
}

fn slot(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut [f64] {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

/// Adds `g` (optionally multiplied by `factor`) into `v`'s gradient,
/// summing when `v` is a broadcast scalar.
fn accumulate_broadcast(
    grads: &mut [Option<Vec<f64>>],
    v: Var,
    len: usize,
    g: &[f64],
    factor: Option<&[f64]>,
) {
    let term = |i: usize| -> f64 {
        match factor {
            None => g[i],
            Some(f) if f.len() == g.len() => g[i] * f[i],
            Some(f) => g[i] * f[0],
        }
    };
    let gv = slot(grads, v, len);
    if len == g.len() {
        for (i, a) in gv.iter_mut().enumerate() {
            *a += term(i);
        }
    } else {
        let terms: Vec<f64> = (0..g.len()).map(term).collect();
        gv[0] += pairwise_sum(&terms);
    }
}

/// `c = a·b + beta·c` for strided row/col views; `c` is dense row-major.
/// Plain matrix product of two 2-D tensors, outside any tape.
pub fn matmul_values(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
        return Err(Error::dim("matmul", sa, sb));
    }
    let (m, k, n) = (sa[0], sa[1], sb[1]);
    let mut out = vec![0.0; m * n];
    gemm(
        m,
        k,
        n,
        (a.data(), k as isize, 1),
        (b.data(), n as isize, 1),
        &mut out,
        0.0,
    );
    Tensor::new(vec![m, n], out)
}

fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: (&[f64], isize, isize),
    b: (&[f64], isize, isize),
    c: &mut [f64],
    beta: f64,
) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(c.len() >= m * n);
    // SAFETY: every view is in-bounds for the given dimensions and strides,
    // which the callers derive from validated tensor shapes.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.0.as_ptr(),
            a.1,
            a.2,
            b.0.as_ptr(),
            b.1,
            b.2,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}
