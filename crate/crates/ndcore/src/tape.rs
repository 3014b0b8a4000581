//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! Every operation on a [`Var`] appends a node to its [`Tape`]. Nodes are
//! stored in creation order, so the tape is always topologically sorted and
//! [`Tape::backward`] is a single reverse sweep.
//!
//! ```
//! use ndcore::{Tape, Tensor};
//!
//! let tape = Tape::new();
//! let x = tape.leaf(Tensor::vector(vec![1.0, 2.0, 3.0]));
//! let loss = x.square().sum();
//! tape.backward(loss).unwrap();
//! assert_eq!(tape.grad(x).unwrap().data(), &[2.0, 4.0, 6.0]);
//! ```

use std::cell::RefCell;
use std::rc::Rc;

use crate::error::{Result, TensorError};
use crate::tensor::{matmul_nt_acc, matmul_tn_acc, matrix_dims, transpose_raw, Tensor};

/// Negative slope used by [`Var::leaky_relu`] in the model code.
pub const LEAKY_RELU_SLOPE: f64 = 0.01;

/// Cubic coefficient of the tanh approximation of GeLU.
pub const GELU_COEFF: f64 = 0.044715;

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Elementwise {
    Add,
    Sub,
    Mul,
    Div,
    Exp,
    Log,
    Tanh,
    Sigmoid,
    Gelu,
    LeakyRelu(f64),
}

#[derive(Clone, Copy, Debug)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug)]
enum Unary {
    Exp,
    Log,
    Tanh,
    Sigmoid,
    Gelu,
    LeakyRelu(f64),
    Neg,
    Sqrt,
    Square,
    Scale(f64),
    AddScalar,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Binary(Binary, usize, usize),
    Unary(Unary, usize),
    MatMul(usize, usize),
    Transpose(usize),
    AddRow(usize, usize),
    MulRow(usize, usize),
    Sum(usize),
    Mean(usize),
    SumRows(usize),
    MeanRows(usize),
    SelectRows(usize, Rc<[Option<usize>]>),
    ConcatCols(Vec<usize>),
    ConcatRows(Vec<usize>),
    SliceCols(usize, usize, usize),
    SoftmaxRows(usize),
    LayerNormRows(usize, f64),
    BatchNormCols(usize, f64),
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

/// Single-threaded operation recorder.
#[derive(Default)]
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
        write!(f, "Var(#{}, {:?})", self.id, self.shape())
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

    /// Trainable leaf: receives a gradient on [`Tape::backward`].
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
            grad: None,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn value_of(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn requires_grad_of(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, var: Var<'_>) -> Option<Tensor> {
        let nodes = self.nodes.borrow();
        let node = &nodes[var.id];
        node.grad
            .as_ref()
            .map(|g| Tensor::new(node.value.shape().to_vec(), g.clone()).expect("grad shape"))
    }

    pub fn zero_grad(&self) {
        for node in self.nodes.borrow_mut().iter_mut() {
            node.grad = None;
        }
    }

    /// Propagates `∂loss/∂leaf` into every trainable leaf. Gradients
    /// accumulate across calls until [`Tape::zero_grad`].
    pub fn backward(&self, loss: Var<'_>) -> Result<()> {
        let mut nodes = self.nodes.borrow_mut();
        if nodes[loss.id].value.numel() != 1 {
            return Err(TensorError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.id].value.shape()
            )));
        }
        let n = loss.id + 1;
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; n];
        adj[loss.id] = Some(vec![1.0]);
        let mut leaf_grads = Vec::new();

        for id in (0..n).rev() {
            let Some(g) = adj[id].take() else { continue };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            propagate(&nodes, id, g, &mut adj, &mut leaf_grads);
        }
        for (id, g) in leaf_grads {
            let slot = &mut nodes[id].grad;
            match slot {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                None => *slot = Some(g),
            }
        }
        Ok(())
    }
}

fn slot<'a>(adj: &'a mut [Option<Vec<f64>>], nodes: &[Node], id: usize) -> Option<&'a mut Vec<f64>> {
    if !nodes[id].requires_grad {
        return None;
    }
    let numel = nodes[id].value.numel();
    Some(adj[id].get_or_insert_with(|| vec![0.0; numel]))
}

fn propagate(
    nodes: &[Node],
    id: usize,
    g: Vec<f64>,
    adj: &mut [Option<Vec<f64>>],
    leaf_grads: &mut Vec<(usize, Vec<f64>)>,
) {
    let out = &nodes[id].value;
    match &nodes[id].op {
        Op::Leaf => leaf_grads.push((id, g)),
        &Op::Binary(kind, a, b) => {
            let av = Rc::clone(&nodes[a].value);
            let bv = Rc::clone(&nodes[b].value);
            let (ad, bd) = (av.data(), bv.data());
            let a_scalar = ad.len() == 1 && g.len() != 1;
            let b_scalar = bd.len() == 1 && g.len() != 1;
            let ai = |i: usize| if a_scalar { ad[0] } else { ad[i] };
            let bi = |i: usize| if b_scalar { bd[0] } else { bd[i] };
            if let Some(ga) = slot(adj, nodes, a) {
                for (i, &gi) in g.iter().enumerate() {
                    let d = match kind {
                        Binary::Add | Binary::Sub => gi,
                        Binary::Mul => gi * bi(i),
                        Binary::Div => gi / bi(i),
                    };
                    ga[if a_scalar { 0 } else { i }] += d;
                }
            }
            if let Some(gb) = slot(adj, nodes, b) {
                for (i, &gi) in g.iter().enumerate() {
                    let d = match kind {
                        Binary::Add => gi,
                        Binary::Sub => -gi,
                        Binary::Mul => gi * ai(i),
                        Binary::Div => -gi * ai(i) / (bi(i) * bi(i)),
                    };
                    gb[if b_scalar { 0 } else { i }] += d;
                }
            }
        }
        &Op::Unary(kind, a) => {
            let x = Rc::clone(&nodes[a].value);
            if let Some(ga) = slot(adj, nodes, a) {
                let (xd, yd) = (x.data(), out.data());
                for i in 0..g.len() {
                    let d = match kind {
                        Unary::Exp => yd[i],
                        Unary::Log => 1.0 / xd[i],
                        Unary::Tanh => 1.0 - yd[i] * yd[i],
                        Unary::Sigmoid => yd[i] * (1.0 - yd[i]),
                        Unary::Gelu => gelu_grad(xd[i]),
                        Unary::LeakyRelu(s) => {
                            if xd[i] > 0.0 {
                                1.0
                            } else {
                                s
                            }
                        }
                        Unary::Neg => -1.0,
                        Unary::Sqrt => 0.5 / yd[i],
                        Unary::Square => 2.0 * xd[i],
                        Unary::Scale(c) => c,
                        Unary::AddScalar => 1.0,
                    };
                    ga[i] += g[i] * d;
                }
            }
        }
        &Op::MatMul(a, b) => {
            let av = Rc::clone(&nodes[a].value);
            let bv = Rc::clone(&nodes[b].value);
            let (m, k) = (av.shape()[0], av.shape()[1]);
            let n = bv.shape()[1];
            if let Some(ga) = slot(adj, nodes, a) {
                matmul_nt_acc(&g, bv.data(), m, k, n, ga);
            }
            if let Some(gb) = slot(adj, nodes, b) {
                matmul_tn_acc(av.data(), &g, m, k, n, gb);
            }
        }
        &Op::Transpose(a) => {
            let (m, n) = (out.shape()[0], out.shape()[1]);
            if let Some(ga) = slot(adj, nodes, a) {
                let t = transpose_raw(&g, m, n);
                ga.iter_mut().zip(t).for_each(|(x, y)| *x += y);
            }
        }
        &Op::AddRow(a, r) => {
            let n = out.cols();
            if let Some(ga) = slot(adj, nodes, a) {
                ga.iter_mut().zip(&g).for_each(|(x, y)| *x += y);
            }
            if let Some(gr) = slot(adj, nodes, r) {
                for row in g.chunks(n) {
                    gr.iter_mut().zip(row).for_each(|(x, y)| *x += y);
                }
            }
        }
        &Op::MulRow(a, r) => {
            let n = out.cols();
            let av = Rc::clone(&nodes[a].value);
            let rv = Rc::clone(&nodes[r].value);
            if let Some(ga) = slot(adj, nodes, a) {
                for (i, gi) in g.iter().enumerate() {
                    ga[i] += gi * rv.data()[i % n];
                }
            }
            if let Some(gr) = slot(adj, nodes, r) {
                for (i, gi) in g.iter().enumerate() {
                    gr[i % n] += gi * av.data()[i];
                }
            }
        }
        &Op::Sum(a) => {
            if let Some(ga) = slot(adj, nodes, a) {
                ga.iter_mut().for_each(|x| *x += g[0]);
            }
        }
        &Op::Mean(a) => {
            if let Some(ga) = slot(adj, nodes, a) {
                let s = g[0] / ga.len() as f64;
                ga.iter_mut().for_each(|x| *x += s);
            }
        }
        &Op::SumRows(a) | &Op::MeanRows(a) => {
            let m = nodes[a].value.rows();
            let scale = if matches!(nodes[id].op, Op::MeanRows(_)) {
                1.0 / m as f64
            } else {
                1.0
            };
            let n = g.len();
            if let Some(ga) = slot(adj, nodes, a) {
                for row in ga.chunks_mut(n) {
                    row.iter_mut().zip(&g).for_each(|(x, y)| *x += scale * y);
                }
            }
        }
        Op::SelectRows(a, idx) => {
            let n = out.cols();
            if let Some(ga) = slot(adj, nodes, *a) {
                for (o, src) in idx.iter().enumerate() {
                    if let Some(s) = src {
                        let dst = &mut ga[s * n..(s + 1) * n];
                        dst.iter_mut()
                            .zip(&g[o * n..(o + 1) * n])
                            .for_each(|(x, y)| *x += y);
                    }
                }
            }
        }
        Op::ConcatCols(parts) => {
            let total = out.cols();
            let rows = out.rows();
            let mut offset = 0;
            for &p in parts {
                let w = nodes[p].value.cols();
                if let Some(gp) = slot(adj, nodes, p) {
                    for r in 0..rows {
                        let src = &g[r * total + offset..r * total + offset + w];
                        gp[r * w..(r + 1) * w]
                            .iter_mut()
                            .zip(src)
                            .for_each(|(x, y)| *x += y);
                    }
                }
                offset += w;
            }
        }
        Op::ConcatRows(parts) => {
            let mut offset = 0;
            for &p in parts {
                let len = nodes[p].value.numel();
                if let Some(gp) = slot(adj, nodes, p) {
                    gp.iter_mut()
                        .zip(&g[offset..offset + len])
                        .for_each(|(x, y)| *x += y);
                }
                offset += len;
            }
        }
        &Op::SliceCols(a, start, end) => {
            let src_cols = nodes[a].value.cols();
            let w = end - start;
            if let Some(ga) = slot(adj, nodes, a) {
                for (r, row) in g.chunks(w).enumerate() {
                    ga[r * src_cols + start..r * src_cols + end]
                        .iter_mut()
                        .zip(row)
                        .for_each(|(x, y)| *x += y);
                }
            }
        }
        &Op::SoftmaxRows(a) => {
            let n = out.cols();
            if let Some(ga) = slot(adj, nodes, a) {
                for (r, (yrow, grow)) in out.data().chunks(n).zip(g.chunks(n)).enumerate() {
                    let dot: f64 = yrow.iter().zip(grow).map(|(y, g)| y * g).sum();
                    for j in 0..n {
                        ga[r * n + j] += yrow[j] * (grow[j] - dot);
                    }
                }
            }
        }
        &Op::LayerNormRows(a, eps) => {
            let x = Rc::clone(&nodes[a].value);
            let n = x.cols();
            if let Some(ga) = slot(adj, nodes, a) {
                for (r, (xrow, grow)) in x.data().chunks(n).zip(g.chunks(n)).enumerate() {
                    let (mu, var) = moments(xrow.iter().copied());
                    let inv = 1.0 / (var + eps).sqrt();
                    let gmean = grow.iter().sum::<f64>() / n as f64;
                    let gx: f64 = xrow
                        .iter()
                        .zip(grow)
                        .map(|(&xv, &gv)| gv * (xv - mu) * inv)
                        .sum::<f64>()
                        / n as f64;
                    for j in 0..n {
                        let xhat = (xrow[j] - mu) * inv;
                        ga[r * n + j] += inv * (grow[j] - gmean - xhat * gx);
                    }
                }
            }
        }
        &Op::BatchNormCols(a, eps) => {
            let x = Rc::clone(&nodes[a].value);
            let (m, n) = (x.rows(), x.cols());
            let xd = x.data();
            if let Some(ga) = slot(adj, nodes, a) {
                for j in 0..n {
                    let (mu, var) = moments((0..m).map(|i| xd[i * n + j]));
                    let inv = 1.0 / (var + eps).sqrt();
                    let gmean = (0..m).map(|i| g[i * n + j]).sum::<f64>() / m as f64;
                    let gx = (0..m)
                        .map(|i| g[i * n + j] * (xd[i * n + j] - mu) * inv)
                        .sum::<f64>()
                        / m as f64;
                    for i in 0..m {
                        let xhat = (xd[i * n + j] - mu) * inv;
                        ga[i * n + j] += inv * (g[i * n + j] - gmean - xhat * gx);
                    }
                }
            }
        }
    }
}

/// Mean and population variance.
pub(crate) fn moments(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let mut n = 0usize;
    let mut sum = 0.0;
    for v in values.clone() {
        sum += v;
        n += 1;
    }
    let mu = sum / n as f64;
    let var = values.map(|v| (v - mu) * (v - mu)).sum::<f64>() / n as f64;
    (mu, var)
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + GELU_COEFF * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_COEFF * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_COEFF * x * x)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires_grad_of(self.id)
    }

    fn derived(&self, value: Tensor, op: Op, inputs: &[usize]) -> Var<'t> {
        let rg = inputs.iter().any(|&i| self.tape.requires_grad_of(i));
        self.tape.push(value, op, rg)
    }

    fn same_tape(&self, other: &Var<'t>) {
        assert!(
            std::ptr::eq(self.tape, other.tape),
            "operands recorded on different tapes"
        );
    }

    /// Generic entry point over the supported elementwise operations.
    pub fn elementwise(&self, op: Elementwise, other: Option<Var<'t>>) -> Result<Var<'t>> {
        let need = |o: Option<Var<'t>>| {
            o.ok_or_else(|| TensorError::Contract(format!("{op:?} needs a second operand")))
        };
        match op {
            Elementwise::Add => self.add(need(other)?),
            Elementwise::Sub => self.sub(need(other)?),
            Elementwise::Mul => self.mul(need(other)?),
            Elementwise::Div => self.div(need(other)?),
            Elementwise::Exp => Ok(self.exp()),
            Elementwise::Log => self.log(),
            Elementwise::Tanh => Ok(self.tanh()),
            Elementwise::Sigmoid => Ok(self.sigmoid()),
            Elementwise::Gelu => Ok(self.gelu()),
            Elementwise::LeakyRelu(s) => Ok(self.leaky_relu(s)),
        }
    }

    fn binary(&self, other: Var<'t>, kind: Binary, name: &'static str) -> Result<Var<'t>> {
        self.same_tape(&other);
        let a = self.value();
        let b = other.value();
        let (shape, a_s, b_s) = if a.shape() == b.shape() {
            (a.shape().to_vec(), false, false)
        } else if b.numel() == 1 {
            (a.shape().to_vec(), false, true)
        } else if a.numel() == 1 {
            (b.shape().to_vec(), true, false)
        } else {
            return Err(TensorError::dim(name, a.shape(), b.shape()));
        };
        let n: usize = shape.iter().product();
        let (ad, bd) = (a.data(), b.data());
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            let x = if a_s { ad[0] } else { ad[i] };
            let y = if b_s { bd[0] } else { bd[i] };
            out.push(match kind {
                Binary::Add => x + y,
                Binary::Sub => x - y,
                Binary::Mul => x * y,
                Binary::Div => {
                    if y == 0.0 {
                        return Err(TensorError::Domain {
                            op: "div",
                            detail: format!("zero divisor at index {i}"),
                        });
                    }
                    x / y
                }
            });
        }
        let value = Tensor::new(shape, out)?;
        Ok(self.derived(value, Op::Binary(kind, self.id, other.id), &[self.id, other.id]))
    }

    pub fn add(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Binary::Add, "add")
    }

    pub fn sub(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Binary::Sub, "sub")
    }

    pub fn mul(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Binary::Mul, "mul")
    }

    pub fn div(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Binary::Div, "div")
    }

    fn unary(&self, kind: Unary, f: impl Fn(f64) -> f64) -> Var<'t> {
        let value = self.value().map(f);
        self.derived(value, Op::Unary(kind, self.id), &[self.id])
    }

    pub fn exp(&self) -> Var<'t> {
        self.unary(Unary::Exp, f64::exp)
    }

    pub fn log(&self) -> Result<Var<'t>> {
        let v = self.value();
        if let Some(i) = v.data().iter().position(|&x| x <= 0.0) {
            return Err(TensorError::Domain {
                op: "log",
                detail: format!("non-positive input {} at index {i}", v.data()[i]),
            });
        }
        Ok(self.unary(Unary::Log, f64::ln))
    }

    pub fn sqrt(&self) -> Result<Var<'t>> {
        let v = self.value();
        if let Some(i) = v.data().iter().position(|&x| x <= 0.0) {
            return Err(TensorError::Domain {
                op: "sqrt",
                detail: format!("non-positive input {} at index {i}", v.data()[i]),
            });
        }
        Ok(self.unary(Unary::Sqrt, f64::sqrt))
    }

    pub fn tanh(&self) -> Var<'t> {
        self.unary(Unary::Tanh, f64::tanh)
    }

    pub fn sigmoid(&self) -> Var<'t> {
        self.unary(Unary::Sigmoid, sigmoid)
    }

    /// Tanh approximation: `0.5·x·(1 + tanh(√(2/π)·(x + 0.044715·x³)))`.
    pub fn gelu(&self) -> Var<'t> {
        self.unary(Unary::Gelu, gelu)
    }

    pub fn leaky_relu(&self, slope: f64) -> Var<'t> {
        self.unary(Unary::LeakyRelu(slope), move |x| if x > 0.0 { x } else { slope * x })
    }

    pub fn neg(&self) -> Var<'t> {
        self.unary(Unary::Neg, |x| -x)
    }

    pub fn square(&self) -> Var<'t> {
        self.unary(Unary::Square, |x| x * x)
    }

    pub fn scale(&self, c: f64) -> Var<'t> {
        self.unary(Unary::Scale(c), move |x| c * x)
    }

    pub fn add_scalar(&self, c: f64) -> Var<'t> {
        self.unary(Unary::AddScalar, move |x| x + c)
    }

    pub fn matmul(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&other);
        let value = self.value().matmul(&other.value())?;
        Ok(self.derived(value, Op::MatMul(self.id, other.id), &[self.id, other.id]))
    }

    pub fn transpose(&self) -> Result<Var<'t>> {
        let value = self.value().transpose()?;
        Ok(self.derived(value, Op::Transpose(self.id), &[self.id]))
    }

    fn row_op(&self, row: Var<'t>, name: &'static str) -> Result<(Rc<Tensor>, Rc<Tensor>)> {
        self.same_tape(&row);
        let a = self.value();
        let r = row.value();
        let (_, n) = matrix_dims(&a, name)?;
        if r.numel() != n {
            return Err(TensorError::dim(name, a.shape(), r.shape()));
        }
        Ok((a, r))
    }

    /// `a[m×n] + r` with `r` of length `n` added to every row.
    pub fn add_row(&self, row: Var<'t>) -> Result<Var<'t>> {
        let (a, r) = self.row_op(row, "add_row")?;
        let n = r.numel();
        let data = a
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| x + r.data()[i % n])
            .collect();
        let value = Tensor::new(a.shape().to_vec(), data)?;
        Ok(self.derived(value, Op::AddRow(self.id, row.id), &[self.id, row.id]))
    }

    /// `a[m×n] ⊙ r` with `r` of length `n` multiplied into every row.
    pub fn mul_row(&self, row: Var<'t>) -> Result<Var<'t>> {
        let (a, r) = self.row_op(row, "mul_row")?;
        let n = r.numel();
        let data = a
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| x * r.data()[i % n])
            .collect();
        let value = Tensor::new(a.shape().to_vec(), data)?;
        Ok(self.derived(value, Op::MulRow(self.id, row.id), &[self.id, row.id]))
    }

    pub fn sum(&self) -> Var<'t> {
        let s = self.value().data().iter().sum();
        self.derived(Tensor::scalar(s), Op::Sum(self.id), &[self.id])
    }

    pub fn mean(&self) -> Var<'t> {
        let v = self.value();
        let s = v.data().iter().sum::<f64>() / v.numel() as f64;
        self.derived(Tensor::scalar(s), Op::Mean(self.id), &[self.id])
    }

    fn reduce_rows(&self, mean: bool) -> Result<Var<'t>> {
        let v = self.value();
        let (m, n) = matrix_dims(&v, "reduce_rows")?;
        let mut out = vec![0.0; n];
        for row in v.data().chunks(n) {
            out.iter_mut().zip(row).for_each(|(o, x)| *o += x);
        }
        if mean {
            out.iter_mut().for_each(|o| *o /= m as f64);
        }
        let op = if mean {
            Op::MeanRows(self.id)
        } else {
            Op::SumRows(self.id)
        };
        Ok(self.derived(Tensor::matrix(1, n, out)?, op, &[self.id]))
    }

    /// Column sums, `[m×n] → [1×n]`.
    pub fn sum_rows(&self) -> Result<Var<'t>> {
        self.reduce_rows(false)
    }

    pub fn mean_rows(&self) -> Result<Var<'t>> {
        self.reduce_rows(true)
    }

    /// Gathers rows by index; `None` yields a zero row.
    pub fn select_rows(&self, idx: &[Option<usize>]) -> Result<Var<'t>> {
        let v = self.value();
        let (m, n) = matrix_dims(&v, "select_rows")?;
        let mut out = vec![0.0; idx.len() * n];
        for (o, src) in idx.iter().enumerate() {
            if let Some(s) = *src {
                if s >= m {
                    return Err(TensorError::dim("select_rows", v.shape(), &[s]));
                }
                out[o * n..(o + 1) * n].copy_from_slice(&v.data()[s * n..(s + 1) * n]);
            }
        }
        let value = Tensor::matrix(idx.len(), n, out)?;
        Ok(self.derived(value, Op::SelectRows(self.id, idx.into()), &[self.id]))
    }

    pub fn slice_cols(&self, start: usize, end: usize) -> Result<Var<'t>> {
        let v = self.value();
        let (m, n) = matrix_dims(&v, "slice_cols")?;
        if start >= end || end > n {
            return Err(TensorError::dim("slice_cols", v.shape(), &[start, end]));
        }
        let mut out = Vec::with_capacity(m * (end - start));
        for row in v.data().chunks(n) {
            out.extend_from_slice(&row[start..end]);
        }
        let value = Tensor::matrix(m, end - start, out)?;
        Ok(self.derived(value, Op::SliceCols(self.id, start, end), &[self.id]))
    }

    pub fn softmax_rows(&self) -> Result<Var<'t>> {
        let v = self.value();
        let (_, n) = matrix_dims(&v, "softmax_rows")?;
        let mut out = Vec::with_capacity(v.numel());
        for row in v.data().chunks(n) {
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let start = out.len();
            let mut z = 0.0;
            for &x in row {
                let e = (x - mx).exp();
                z += e;
                out.push(e);
            }
            out[start..].iter_mut().for_each(|e| *e /= z);
        }
        let value = Tensor::new(v.shape().to_vec(), out)?;
        Ok(self.derived(value, Op::SoftmaxRows(self.id), &[self.id]))
    }

    /// Standardizes each row to zero mean and unit variance (no affine part).
    pub fn layer_norm_rows(&self, eps: f64) -> Result<Var<'t>> {
        let v = self.value();
        let (_, n) = matrix_dims(&v, "layer_norm_rows")?;
        let mut out = Vec::with_capacity(v.numel());
        for row in v.data().chunks(n) {
            let (mu, var) = moments(row.iter().copied());
            let inv = 1.0 / (var + eps).sqrt();
            out.extend(row.iter().map(|x| (x - mu) * inv));
        }
        let value = Tensor::new(v.shape().to_vec(), out)?;
        Ok(self.derived(value, Op::LayerNormRows(self.id, eps), &[self.id]))
    }

    /// Standardizes each column with the batch (row) statistics.
    pub fn batch_norm_cols(&self, eps: f64) -> Result<Var<'t>> {
        let v = self.value();
        let (m, n) = matrix_dims(&v, "batch_norm_cols")?;
        let d = v.data();
        let mut out = vec![0.0; m * n];
        for j in 0..n {
            let (mu, var) = moments((0..m).map(|i| d[i * n + j]));
            let inv = 1.0 / (var + eps).sqrt();
            for i in 0..m {
                out[i * n + j] = (d[i * n + j] - mu) * inv;
            }
        }
        let value = Tensor::matrix(m, n, out)?;
        Ok(self.derived(value, Op::BatchNormCols(self.id, eps), &[self.id]))
    }
}

/// Concatenates matrices with equal row counts side by side.
pub fn concat_cols<'t>(parts: &[Var<'t>]) -> Result<Var<'t>> {
    let first = parts
        .first()
        .ok_or_else(|| TensorError::Contract("concat_cols of nothing".into()))?;
    let values: Vec<Rc<Tensor>> = parts.iter().map(|p| p.value()).collect();
    let rows = matrix_dims(&values[0], "concat_cols")?.0;
    for v in &values {
        let (r, _) = matrix_dims(v, "concat_cols")?;
        if r != rows {
            return Err(TensorError::dim("concat_cols", values[0].shape(), v.shape()));
        }
    }
    let total: usize = values.iter().map(|v| v.cols()).sum();
    let mut out = Vec::with_capacity(rows * total);
    for r in 0..rows {
        for v in &values {
            let w = v.cols();
            out.extend_from_slice(&v.data()[r * w..(r + 1) * w]);
        }
    }
    let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
    let value = Tensor::matrix(rows, total, out)?;
    Ok(first.derived(value, Op::ConcatCols(ids.clone()), &ids))
}

/// Stacks matrices with equal column counts vertically.
pub fn concat_rows<'t>(parts: &[Var<'t>]) -> Result<Var<'t>> {
    let first = parts
        .first()
        .ok_or_else(|| TensorError::Contract("concat_rows of nothing".into()))?;
    let values: Vec<Rc<Tensor>> = parts.iter().map(|p| p.value()).collect();
    let cols = matrix_dims(&values[0], "concat_rows")?.1;
    let mut rows = 0;
    let mut out = Vec::new();
    for v in &values {
        let (r, c) = matrix_dims(v, "concat_rows")?;
        if c != cols {
            return Err(TensorError::dim("concat_rows", values[0].shape(), v.shape()));
        }
        rows += r;
        out.extend_from_slice(v.data());
    }
    let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
    let value = Tensor::matrix(rows, cols, out)?;
    Ok(first.derived(value, Op::ConcatRows(ids.clone()), &ids))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn add_vectors() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::vector(vec![1.0, 2.0]));
        let b = tape.constant(Tensor::vector(vec![3.0, 4.0]));
        assert_eq!(a.add(b).unwrap().value().data(), &[4.0, 6.0]);
    }

    #[test]
    fn activation_identities() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::scalar(-1.0));
        assert_eq!(x.leaky_relu(LEAKY_RELU_SLOPE).value().data(), &[-0.01]);
        let z = tape.constant(Tensor::scalar(0.0));
        assert_eq!(z.gelu().value().data(), &[0.0]);
        assert_eq!(z.sigmoid().value().data(), &[0.5]);
    }

    #[test]
    fn shape_mismatch_is_dimension_error() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::vector(vec![1.0, 2.0]));
        let b = tape.constant(Tensor::vector(vec![1.0, 2.0, 3.0]));
        assert!(matches!(a.add(b), Err(TensorError::Dimension { .. })));
    }

    #[test]
    fn log_of_nonpositive_is_domain_error() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::vector(vec![1.0, 0.0]));
        assert!(matches!(a.log(), Err(TensorError::Domain { .. })));
        let b = tape.constant(Tensor::vector(vec![1.0, -2.0]));
        assert!(matches!(b.log(), Err(TensorError::Domain { .. })));
    }

    #[test]
    fn scalar_broadcast() {
        let tape = Tape::new();
        let a = tape.leaf(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let s = tape.leaf(Tensor::scalar(2.0));
        let y = a.mul(s).unwrap().sum();
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(a).unwrap().data(), &[2.0, 2.0, 2.0]);
        assert_eq!(tape.grad(s).unwrap().data(), &[6.0]);
    }

    #[test]
    fn sum_of_squares_gradient() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let loss = x.mul(x).unwrap().sum();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn tanh_at_zero_passes_input_through() {
        let tape = Tape::new();
        let w = tape.leaf(Tensor::matrix(1, 3, vec![0.0; 3]).unwrap());
        let x = tape.constant(Tensor::matrix(3, 1, vec![0.5, -1.0, 2.0]).unwrap());
        let loss = w.matmul(x).unwrap().tanh().sum();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(w).unwrap().data(), &[0.5, -1.0, 2.0]);
    }

    #[test]
    fn repeated_backward_accumulates() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, -1.0]));
        let loss = x.square().sum();
        tape.backward(loss).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[4.0, -4.0]);
        tape.zero_grad();
        assert!(tape.grad(x).is_none());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
        let y = x.square();
        assert!(matches!(tape.backward(y), Err(TensorError::Contract(_))));
    }

    #[test]
    fn constants_get_no_grad() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0]));
        let c = tape.constant(Tensor::vector(vec![3.0]));
        let loss = x.mul(c).unwrap().sum();
        tape.backward(loss).unwrap();
        assert!(tape.grad(c).is_none());
        assert_eq!(tape.grad(x).unwrap().data(), &[3.0]);
    }

    #[test]
    fn softmax_rows_normalize() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, -5.0, 0.0, 5.0]).unwrap());
        let p = x.softmax_rows().unwrap().value();
        for row in p.data().chunks(3) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn select_rows_pads_with_zero() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let y = x.select_rows(&[Some(1), None, Some(0)]).unwrap();
        assert_eq!(y.value().data(), &[3.0, 4.0, 0.0, 0.0, 1.0, 2.0]);
    }
}
