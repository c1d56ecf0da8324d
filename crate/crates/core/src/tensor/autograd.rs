//! Tape-based reverse-mode differentiation.
//!
//! A [`Tape`] records every primitive executed through a [`Var`]. Calling
//! [`Tape::backward`] walks the record in strict reverse execution order and
//! accumulates adjoints into every tracked node. A tape built with
//! [`Tape::inference`] records values only, so the same model code runs
//! without differentiation overhead.

use std::cell::RefCell;
use std::rc::Rc;

use super::kernels::{self, ConvGeometry, ConvSpec, ScanDims, ScanInputs};
use super::{DType, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Unary {
    Silu,
    Gelu,
    Sigmoid,
    Softplus,
    Relu,
    Exp,
    Log,
    Abs,
    Sqrt,
    Recip,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    MulRow(usize, usize),
    AddCol(usize, usize),
    MulCol(usize, usize),
    Scale(usize, f64),
    Offset(usize),
    Unary(usize, Unary),
    Softmax(usize),
    NormalizeRows(usize, Rc<Vec<f64>>),
    Sum(usize),
    MeanRows(usize),
    SumCols(usize),
    Reshape(usize),
    Transpose(usize),
    ConcatRows(Vec<usize>),
    ConcatCols(Vec<usize>),
    SliceRows(usize, usize),
    SliceCols(usize, usize),
    ReverseRows(usize),
    Conv2d {
        x: usize,
        k: usize,
        bias: Option<usize>,
        geo: ConvGeometry,
    },
    Conv1d {
        x: usize,
        k: usize,
        bias: Option<usize>,
    },
    Bilinear {
        grid: usize,
        points: usize,
    },
    Scan {
        inputs: [usize; 6],
        dims: ScanDims,
    },
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    tracked: bool,
}

/// Ordered record of executed primitives. Single-owner; not `Sync`.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    grad_enabled: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            grad_enabled: true,
        }
    }

    /// A tape that evaluates values but never records adjoint information.
    pub fn inference() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            grad_enabled: false,
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Registers a leaf; it is differentiated if `tensor.requires_grad()`.
    pub fn leaf(&self, tensor: Tensor) -> Var<'_> {
        let tracked = self.grad_enabled && tensor.requires_grad();
        self.push_node(tensor, Op::Leaf, tracked)
    }

    /// Registers a leaf that never receives a gradient.
    pub fn constant(&self, tensor: Tensor) -> Var<'_> {
        self.push_node(tensor, Op::Leaf, false)
    }

    fn push_node(&self, value: Tensor, op: Op, tracked: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            value: Rc::new(value),
            op: if tracked { op } else { Op::Leaf },
            tracked,
        });
        Var { tape: self, id }
    }

    fn push(&self, value: Tensor, op: Op, inputs: &[usize]) -> Var<'_> {
        let tracked = self.grad_enabled && {
            let nodes = self.nodes.borrow();
            inputs.iter().any(|&i| nodes[i].tracked)
        };
        self.push_node(value, op, tracked)
    }

    fn value(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        if !std::ptr::eq(loss.tape, self) {
            return Err(Error::ForeignVar);
        }
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.numel() != 1 {
            return Err(Error::NotScalar(root.value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        if root.tracked {
            grads[loss.id] = Some(vec![1.0]);
        }
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.tracked {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            backprop_node(&nodes, id, &g, &mut grads);
            grads[id] = Some(g);
        }
        let shapes = nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients {
            tape: self as *const Tape,
            grads,
            shapes,
        })
    }
}

/// Adjoints produced by [`Tape::backward`].
pub struct Gradients {
    tape: *const Tape,
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of `var`, or `None` if no path connects it to the loss.
    pub fn get(&self, var: Var<'_>) -> Option<Tensor> {
        if !std::ptr::eq(var.tape, self.tape) {
            return None;
        }
        self.grads
            .get(var.id)?
            .as_ref()
            .map(|g| Tensor::from_parts(self.shapes[var.id].clone(), g.clone(), DType::F64))
    }

    /// Gradient of `var`; exactly zero when it does not reach the loss.
    pub fn get_or_zero(&self, var: Var<'_>) -> Tensor {
        self.get(var)
            .unwrap_or_else(|| Tensor::zeros(&var.value().shape().to_vec(), DType::F64))
    }
}

fn accumulate(nodes: &[Node], grads: &mut [Option<Vec<f64>>], id: usize, contrib: Vec<f64>) {
    if !nodes[id].tracked {
        return;
    }
    match &mut grads[id] {
        Some(existing) => {
            for (e, c) in existing.iter_mut().zip(contrib) {
                *e += c;
            }
        }
        slot @ None => *slot = Some(contrib),
    }
}

fn dims2(t: &Tensor) -> (usize, usize) {
    let s = t.shape();
    (s[0], s[1])
}

fn backprop_node(nodes: &[Node], id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let val = |i: usize| nodes[i].value.as_ref();
    let out = val(id);
    match &nodes[id].op {
        Op::Leaf => {}
        &Op::MatMul(a, b) => {
            let (m, k) = dims2(val(a));
            let n = val(b).shape()[1];
            let ga = kernels::matmul_nt(g, val(b).data(), m, n, k);
            let gb = kernels::matmul_tn(val(a).data(), g, m, k, n);
            accumulate(nodes, grads, a, ga);
            accumulate(nodes, grads, b, gb);
        }
        &Op::Add(a, b) => {
            accumulate(nodes, grads, a, g.to_vec());
            accumulate(nodes, grads, b, g.to_vec());
        }
        &Op::Sub(a, b) => {
            accumulate(nodes, grads, a, g.to_vec());
            accumulate(nodes, grads, b, g.iter().map(|v| -v).collect());
        }
        &Op::Mul(a, b) => {
            let (av, bv) = (val(a).data(), val(b).data());
            accumulate(nodes, grads, a, g.iter().zip(bv).map(|(g, b)| g * b).collect());
            accumulate(nodes, grads, b, g.iter().zip(av).map(|(g, a)| g * a).collect());
        }
        &Op::AddRow(a, r) => {
            let c = val(r).numel();
            let mut gr = vec![0.0; c];
            for row in g.chunks(c) {
                gr.iter_mut().zip(row).for_each(|(s, v)| *s += v);
            }
            accumulate(nodes, grads, a, g.to_vec());
            accumulate(nodes, grads, r, gr);
        }
        &Op::MulRow(a, r) => {
            let rv = val(r).data();
            let c = rv.len();
            let av = val(a).data();
            let mut gr = vec![0.0; c];
            let mut ga = vec![0.0; g.len()];
            for (i, (&gv, &x)) in g.iter().zip(av).enumerate() {
                gr[i % c] += gv * x;
                ga[i] = gv * rv[i % c];
            }
            accumulate(nodes, grads, a, ga);
            accumulate(nodes, grads, r, gr);
        }
        &Op::AddCol(a, col) => {
            let n = val(col).numel();
            let c = g.len() / n;
            let gc = g.chunks(c).map(|row| row.iter().sum()).collect();
            accumulate(nodes, grads, a, g.to_vec());
            accumulate(nodes, grads, col, gc);
        }
        &Op::MulCol(a, col) => {
            let cv = val(col).data();
            let n = cv.len();
            let c = g.len() / n;
            let av = val(a).data();
            let mut gc = vec![0.0; n];
            let mut ga = vec![0.0; g.len()];
            for i in 0..g.len() {
                gc[i / c] += g[i] * av[i];
                ga[i] = g[i] * cv[i / c];
            }
            accumulate(nodes, grads, a, ga);
            accumulate(nodes, grads, col, gc);
        }
        &Op::Scale(a, s) => accumulate(nodes, grads, a, g.iter().map(|v| v * s).collect()),
        &Op::Offset(a) => accumulate(nodes, grads, a, g.to_vec()),
        &Op::Unary(a, kind) => {
            let x = val(a).data();
            let y = out.data();
            let ga = g
                .iter()
                .zip(x)
                .zip(y)
                .map(|((&g, &x), &y)| {
                    g * match kind {
                        Unary::Silu => kernels::silu_grad(x),
                        Unary::Gelu => kernels::gelu_grad(x),
                        Unary::Sigmoid => y * (1.0 - y),
                        Unary::Softplus => kernels::sigmoid(x),
                        Unary::Relu => {
                            if x > 0.0 {
                                1.0
                            } else {
                                0.0
                            }
                        }
                        Unary::Exp => y,
                        Unary::Log => 1.0 / x,
                        Unary::Abs => x.signum() * (x != 0.0) as u8 as f64,
                        Unary::Sqrt => 0.5 / y,
                        Unary::Recip => -y * y,
                    }
                })
                .collect();
            accumulate(nodes, grads, a, ga);
        }
        &Op::Softmax(a) => {
            let (n, c) = dims2(out);
            let y = out.data();
            let mut ga = vec![0.0; n * c];
            for r in 0..n {
                let yr = &y[r * c..(r + 1) * c];
                let gr = &g[r * c..(r + 1) * c];
                let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                for j in 0..c {
                    ga[r * c + j] = yr[j] * (gr[j] - dot);
                }
            }
            accumulate(nodes, grads, a, ga);
        }
        Op::NormalizeRows(a, inv_std) => {
            let (n, c) = dims2(out);
            let y = out.data();
            let mut ga = vec![0.0; n * c];
            for r in 0..n {
                let yr = &y[r * c..(r + 1) * c];
                let gr = &g[r * c..(r + 1) * c];
                let mean_g = gr.iter().sum::<f64>() / c as f64;
                let mean_gy = gr.iter().zip(yr).map(|(g, y)| g * y).sum::<f64>() / c as f64;
                for j in 0..c {
                    ga[r * c + j] = inv_std[r] * (gr[j] - mean_g - yr[j] * mean_gy);
                }
            }
            accumulate(nodes, grads, *a, ga);
        }
        &Op::Sum(a) => accumulate(nodes, grads, a, vec![g[0]; val(a).numel()]),
        &Op::MeanRows(a) => {
            let (n, c) = dims2(val(a));
            let mut ga = vec![0.0; n * c];
            for row in ga.chunks_mut(c) {
                row.iter_mut().zip(g).for_each(|(d, &gv)| *d = gv / n as f64);
            }
            accumulate(nodes, grads, a, ga);
        }
        &Op::SumCols(a) => {
            let (_, c) = dims2(val(a));
            let ga = g.iter().flat_map(|&gv| std::iter::repeat_n(gv, c)).collect();
            accumulate(nodes, grads, a, ga);
        }
        &Op::Reshape(a) => accumulate(nodes, grads, a, g.to_vec()),
        &Op::Transpose(a) => {
            let (m, n) = dims2(val(a));
            accumulate(nodes, grads, a, kernels::transpose(g, n, m));
        }
        Op::ConcatRows(parts) => {
            let mut offset = 0;
            for &p in parts {
                let len = val(p).numel();
                accumulate(nodes, grads, p, g[offset..offset + len].to_vec());
                offset += len;
            }
        }
        Op::ConcatCols(parts) => {
            let (n, total) = dims2(out);
            let mut col = 0;
            for &p in parts {
                let w = val(p).shape()[1];
                let mut gp = Vec::with_capacity(n * w);
                for r in 0..n {
                    gp.extend_from_slice(&g[r * total + col..r * total + col + w]);
                }
                accumulate(nodes, grads, p, gp);
                col += w;
            }
        }
        &Op::SliceRows(a, start) => {
            let (_, c) = dims2(val(a));
            let mut ga = vec![0.0; val(a).numel()];
            ga[start * c..start * c + g.len()].copy_from_slice(g);
            accumulate(nodes, grads, a, ga);
        }
        &Op::SliceCols(a, start) => {
            let (n, c) = dims2(val(a));
            let w = out.shape()[1];
            let mut ga = vec![0.0; n * c];
            for r in 0..n {
                ga[r * c + start..r * c + start + w].copy_from_slice(&g[r * w..(r + 1) * w]);
            }
            accumulate(nodes, grads, a, ga);
        }
        &Op::ReverseRows(a) => {
            let (_, c) = dims2(val(a));
            let ga = g.chunks(c).rev().flatten().copied().collect();
            accumulate(nodes, grads, a, ga);
        }
        &Op::Conv2d { x, k, bias, geo } => {
            let (gx, gk, gb) = kernels::conv2d_backward(val(x).data(), val(k).data(), g, &geo);
            accumulate(nodes, grads, x, gx);
            accumulate(nodes, grads, k, gk);
            if let Some(b) = bias {
                accumulate(nodes, grads, b, gb);
            }
        }
        &Op::Conv1d { x, k, bias } => {
            let (l, d) = dims2(val(x));
            let width = val(k).shape()[1];
            let (gx, gk, gb) = kernels::conv1d_causal_backward(val(x).data(), val(k).data(), g, l, d, width);
            accumulate(nodes, grads, x, gx);
            accumulate(nodes, grads, k, gk);
            if let Some(b) = bias {
                accumulate(nodes, grads, b, gb);
            }
        }
        &Op::Bilinear { grid, points } => {
            let f = val(grid);
            let s = f.shape();
            let (gf, gp) = kernels::bilinear_sample_backward(f.data(), s[0], s[1], s[2], val(points).data(), g);
            accumulate(nodes, grads, grid, gf);
            accumulate(nodes, grads, points, gp);
        }
        &Op::Scan { inputs, dims } => {
            let inp = ScanInputs {
                x: val(inputs[0]).data(),
                delta: val(inputs[1]).data(),
                a: val(inputs[2]).data(),
                b: val(inputs[3]).data(),
                c: val(inputs[4]).data(),
                skip: val(inputs[5]).data(),
            };
            let adj = kernels::selective_scan_backward(inp, dims, g);
            for (&i, ga) in inputs.iter().zip(adj) {
                accumulate(nodes, grads, i, ga);
            }
        }
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.value().shape())
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn dtype(&self) -> DType {
        self.value().dtype()
    }

    pub fn dims2(&self) -> Result<(usize, usize)> {
        self.value().dims2()
    }

    fn same_tape(&self, other: &Var<'_>) -> Result<()> {
        if std::ptr::eq(self.tape, other.tape) {
            Ok(())
        } else {
            Err(Error::ForeignVar)
        }
    }

    fn emit(&self, shape: Vec<usize>, data: Vec<f64>, dtype: DType, op: Op, inputs: &[usize]) -> Var<'t> {
        self.tape.push(Tensor::from_parts(shape, data, dtype), op, inputs)
    }

    pub fn matmul(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&other)?;
        let out = self.value().matmul(&other.value())?;
        Ok(self.tape.push(out, Op::MatMul(self.id, other.id), &[self.id, other.id]))
    }

    fn elementwise(&self, other: Var<'t>, name: &'static str, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var<'t>> {
        self.same_tape(&other)?;
        let out = self.value().zip_map(&other.value(), name, f)?;
        Ok(self.tape.push(out, op, &[self.id, other.id]))
    }

    pub fn add(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.elementwise(other, "add", Op::Add(self.id, other.id), |a, b| a + b)
    }

    pub fn sub(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.elementwise(other, "sub", Op::Sub(self.id, other.id), |a, b| a - b)
    }

    pub fn mul(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.elementwise(other, "mul", Op::Mul(self.id, other.id), |a, b| a * b)
    }

    fn row_broadcast(&self, row: Var<'t>, name: &'static str, mul: bool) -> Result<Var<'t>> {
        self.same_tape(&row)?;
        let a = self.value();
        let r = row.value();
        let (_, c) = a.dims2()?;
        if r.numel() != c {
            return Err(Error::shape(name, a.shape(), r.shape()));
        }
        let rv = r.data();
        let data = a
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| if mul { x * rv[i % c] } else { x + rv[i % c] })
            .collect();
        let op = if mul { Op::MulRow(self.id, row.id) } else { Op::AddRow(self.id, row.id) };
        Ok(self.emit(a.shape().to_vec(), data, a.dtype().promote(r.dtype()), op, &[self.id, row.id]))
    }

    /// `[N, C] + [C]`, broadcast over rows.
    pub fn add_row(&self, row: Var<'t>) -> Result<Var<'t>> {
        self.row_broadcast(row, "add_row", false)
    }

    /// `[N, C] * [C]`, broadcast over rows.
    pub fn mul_row(&self, row: Var<'t>) -> Result<Var<'t>> {
        self.row_broadcast(row, "mul_row", true)
    }

    fn col_broadcast(&self, col: Var<'t>, name: &'static str, mul: bool) -> Result<Var<'t>> {
        self.same_tape(&col)?;
        let a = self.value();
        let cv = col.value();
        let (n, c) = a.dims2()?;
        if cv.numel() != n {
            return Err(Error::shape(name, a.shape(), cv.shape()));
        }
        let colv = cv.data();
        let data = a
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| if mul { x * colv[i / c] } else { x + colv[i / c] })
            .collect();
        let op = if mul { Op::MulCol(self.id, col.id) } else { Op::AddCol(self.id, col.id) };
        Ok(self.emit(a.shape().to_vec(), data, a.dtype().promote(cv.dtype()), op, &[self.id, col.id]))
    }

    /// `[N, C] + [N]`, one value per row broadcast across channels.
    pub fn add_col(&self, col: Var<'t>) -> Result<Var<'t>> {
        self.col_broadcast(col, "add_col", false)
    }

    /// `[N, C] * [N]`, one value per row broadcast across channels.
    pub fn mul_col(&self, col: Var<'t>) -> Result<Var<'t>> {
        self.col_broadcast(col, "mul_col", true)
    }

    pub fn scale(&self, s: f64) -> Var<'t> {
        let v = self.value();
        let data = v.data().iter().map(|x| x * s).collect();
        self.emit(v.shape().to_vec(), data, v.dtype(), Op::Scale(self.id, s), &[self.id])
    }

    pub fn add_scalar(&self, s: f64) -> Var<'t> {
        let v = self.value();
        let data = v.data().iter().map(|x| x + s).collect();
        self.emit(v.shape().to_vec(), data, v.dtype(), Op::Offset(self.id), &[self.id])
    }

    pub fn neg(&self) -> Var<'t> {
        self.scale(-1.0)
    }

    fn unary(&self, kind: Unary, f: impl Fn(f64) -> f64) -> Var<'t> {
        let v = self.value();
        let data = v.data().iter().map(|&x| f(x)).collect();
        self.emit(v.shape().to_vec(), data, v.dtype(), Op::Unary(self.id, kind), &[self.id])
    }

    pub fn silu(&self) -> Var<'t> {
        self.unary(Unary::Silu, kernels::silu)
    }

    pub fn gelu(&self) -> Var<'t> {
        self.unary(Unary::Gelu, kernels::gelu)
    }

    pub fn sigmoid(&self) -> Var<'t> {
        self.unary(Unary::Sigmoid, kernels::sigmoid)
    }

    pub fn softplus(&self) -> Var<'t> {
        self.unary(Unary::Softplus, kernels::softplus)
    }

    pub fn relu(&self) -> Var<'t> {
        self.unary(Unary::Relu, |x| if x < 0.0 { 0.0 } else { x })
    }

    pub fn exp(&self) -> Var<'t> {
        self.unary(Unary::Exp, f64::exp)
    }

    pub fn ln(&self) -> Var<'t> {
        self.unary(Unary::Log, f64::ln)
    }

    pub fn abs(&self) -> Var<'t> {
        self.unary(Unary::Abs, f64::abs)
    }

    pub fn sqrt(&self) -> Var<'t> {
        self.unary(Unary::Sqrt, f64::sqrt)
    }

    pub fn recip(&self) -> Var<'t> {
        self.unary(Unary::Recip, f64::recip)
    }

    /// Elementwise `self / other`.
    pub fn div(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.mul(other.recip())
    }

    /// Softmax over the last axis of a matrix.
    pub fn softmax_rows(&self) -> Result<Var<'t>> {
        let v = self.value();
        let (_, c) = v.dims2()?;
        let mut data = v.data().to_vec();
        data.chunks_mut(c).for_each(kernels::softmax_inplace);
        Ok(self.emit(v.shape().to_vec(), data, v.dtype(), Op::Softmax(self.id), &[self.id]))
    }

    /// Zero-mean / unit-variance rows, no affine.
    pub fn normalize_rows(&self) -> Result<Var<'t>> {
        let v = self.value();
        let (n, c) = v.dims2()?;
        let (data, inv) = kernels::normalize_rows(v.data(), n, c, kernels::NORM_EPS);
        Ok(self.emit(
            v.shape().to_vec(),
            data,
            v.dtype(),
            Op::NormalizeRows(self.id, Rc::new(inv)),
            &[self.id],
        ))
    }

    pub fn layer_norm(&self, gain: Var<'t>, bias: Var<'t>) -> Result<Var<'t>> {
        self.normalize_rows()?.mul_row(gain)?.add_row(bias)
    }

    pub fn sum(&self) -> Var<'t> {
        let v = self.value();
        self.emit(vec![1], vec![v.sum()], v.dtype(), Op::Sum(self.id), &[self.id])
    }

    pub fn mean(&self) -> Var<'t> {
        let n = self.value().numel() as f64;
        self.sum().scale(1.0 / n)
    }

    /// Average over rows: `[N, C] -> [1, C]`.
    pub fn mean_rows(&self) -> Result<Var<'t>> {
        let v = self.value();
        let (n, c) = v.dims2()?;
        let mut data = vec![0.0; c];
        for row in v.data().chunks(c) {
            data.iter_mut().zip(row).for_each(|(s, x)| *s += x);
        }
        data.iter_mut().for_each(|s| *s /= n as f64);
        Ok(self.emit(vec![1, c], data, v.dtype(), Op::MeanRows(self.id), &[self.id]))
    }

    /// Sum across each row: `[N, C] -> [N, 1]`.
    pub fn sum_cols(&self) -> Result<Var<'t>> {
        let v = self.value();
        let (n, c) = v.dims2()?;
        let data = v.data().chunks(c).map(|r| r.iter().sum()).collect();
        Ok(self.emit(vec![n, 1], data, v.dtype(), Op::SumCols(self.id), &[self.id]))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t>> {
        let v = self.value();
        if shape.iter().product::<usize>() != v.numel() {
            return Err(Error::shape("reshape", v.shape(), shape));
        }
        Ok(self.emit(shape.to_vec(), v.data().to_vec(), v.dtype(), Op::Reshape(self.id), &[self.id]))
    }

    pub fn transpose(&self) -> Result<Var<'t>> {
        let v = self.value();
        let (m, n) = v.dims2()?;
        Ok(self.emit(vec![n, m], kernels::transpose(v.data(), m, n), v.dtype(), Op::Transpose(self.id), &[self.id]))
    }

    pub fn slice_rows(&self, start: usize, len: usize) -> Result<Var<'t>> {
        let v = self.value();
        let (n, c) = v.dims2()?;
        if len == 0 || start + len > n {
            return Err(Error::invalid("slice_rows", format!("rows {start}..{} of {n}", start + len)));
        }
        let data = v.data()[start * c..(start + len) * c].to_vec();
        Ok(self.emit(vec![len, c], data, v.dtype(), Op::SliceRows(self.id, start), &[self.id]))
    }

    pub fn slice_cols(&self, start: usize, len: usize) -> Result<Var<'t>> {
        let v = self.value();
        let (n, c) = v.dims2()?;
        if len == 0 || start + len > c {
            return Err(Error::invalid("slice_cols", format!("cols {start}..{} of {c}", start + len)));
        }
        let mut data = Vec::with_capacity(n * len);
        for r in 0..n {
            data.extend_from_slice(&v.data()[r * c + start..r * c + start + len]);
        }
        Ok(self.emit(vec![n, len], data, v.dtype(), Op::SliceCols(self.id, start), &[self.id]))
    }

    pub fn reverse_rows(&self) -> Result<Var<'t>> {
        let v = self.value();
        let (_, c) = v.dims2()?;
        let data = v.data().chunks(c).rev().flatten().copied().collect();
        Ok(self.emit(v.shape().to_vec(), data, v.dtype(), Op::ReverseRows(self.id), &[self.id]))
    }

    /// Stacks matrices with equal widths vertically.
    pub fn concat_rows(parts: &[Var<'t>]) -> Result<Var<'t>> {
        let first = parts.first().ok_or_else(|| Error::invalid("concat_rows", "no inputs"))?;
        let (_, c) = first.dims2()?;
        let mut rows = 0;
        let mut data = Vec::new();
        let mut dtype = first.dtype();
        for p in parts {
            first.same_tape(p)?;
            let v = p.value();
            let (n, pc) = v.dims2()?;
            if pc != c {
                return Err(Error::shape("concat_rows", &first.shape(), v.shape()));
            }
            rows += n;
            dtype = dtype.promote(v.dtype());
            data.extend_from_slice(v.data());
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        Ok(first.emit(vec![rows, c], data, dtype, Op::ConcatRows(ids.clone()), &ids))
    }

    /// Joins matrices with equal row counts side by side.
    pub fn concat_cols(parts: &[Var<'t>]) -> Result<Var<'t>> {
        let first = parts.first().ok_or_else(|| Error::invalid("concat_cols", "no inputs"))?;
        let (n, _) = first.dims2()?;
        let values: Vec<Rc<Tensor>> = parts.iter().map(|p| p.value()).collect();
        let mut total = 0;
        let mut dtype = first.dtype();
        for (p, v) in parts.iter().zip(&values) {
            first.same_tape(p)?;
            let (pn, pc) = v.dims2()?;
            if pn != n {
                return Err(Error::shape("concat_cols", &first.shape(), v.shape()));
            }
            total += pc;
            dtype = dtype.promote(v.dtype());
        }
        let mut data = Vec::with_capacity(n * total);
        for r in 0..n {
            for v in &values {
                let c = v.shape()[1];
                data.extend_from_slice(&v.data()[r * c..(r + 1) * c]);
            }
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        Ok(first.emit(vec![n, total], data, dtype, Op::ConcatCols(ids.clone()), &ids))
    }

    /// Cross-correlation of a `[C_in, H, W]` input; see [`Tensor::conv2d`].
    pub fn conv2d(&self, kernel: Var<'t>, bias: Option<Var<'t>>, spec: ConvSpec) -> Result<Var<'t>> {
        self.same_tape(&kernel)?;
        let x = self.value();
        let k = kernel.value();
        let b = bias.map(|b| b.value());
        let out = x.conv2d(&k, b.as_deref(), spec)?;
        let geo = ConvGeometry::new(x.shape(), k.shape(), spec)?;
        let mut inputs = vec![self.id, kernel.id];
        if let Some(b) = bias {
            inputs.push(b.id);
        }
        Ok(self.tape.push(
            out,
            Op::Conv2d {
                x: self.id,
                k: kernel.id,
                bias: bias.map(|b| b.id),
                geo,
            },
            &inputs,
        ))
    }

    /// Causal depthwise convolution over rows; see [`Tensor::conv1d_depthwise`].
    pub fn conv1d_depthwise(&self, kernel: Var<'t>, bias: Option<Var<'t>>) -> Result<Var<'t>> {
        self.same_tape(&kernel)?;
        let b = bias.map(|b| b.value());
        let out = self.value().conv1d_depthwise(&kernel.value(), b.as_deref())?;
        let mut inputs = vec![self.id, kernel.id];
        if let Some(b) = bias {
            inputs.push(b.id);
        }
        Ok(self.tape.push(
            out,
            Op::Conv1d {
                x: self.id,
                k: kernel.id,
                bias: bias.map(|b| b.id),
            },
            &inputs,
        ))
    }

    /// Bilinear lookup of this `[H, W, C]` grid at `[N, 2]` `(x, y)` points.
    pub fn bilinear_sample(&self, points: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&points)?;
        let out = self.value().bilinear_sample(&points.value())?;
        Ok(self.tape.push(
            out,
            Op::Bilinear {
                grid: self.id,
                points: points.id,
            },
            &[self.id, points.id],
        ))
    }

    /// Fused linear-time selective scan. `self` is `x: [L, D]`; `delta` must
    /// already be positive.
    pub fn selective_scan(
        &self,
        delta: Var<'t>,
        a: Var<'t>,
        b: Var<'t>,
        c: Var<'t>,
        skip: Var<'t>,
    ) -> Result<Var<'t>> {
        for v in [&delta, &a, &b, &c, &skip] {
            self.same_tape(v)?;
        }
        let (xv, dv, av, bv, cv, sv) = (self.value(), delta.value(), a.value(), b.value(), c.value(), skip.value());
        let (len, d) = xv.dims2()?;
        let (ad, s) = av.dims2()?;
        let ok = dv.shape() == xv.shape()
            && ad == d
            && bv.shape() == [len, s]
            && cv.shape() == [len, s]
            && sv.numel() == d;
        if !ok {
            return Err(Error::shape("selective_scan", xv.shape(), av.shape()));
        }
        let dims = ScanDims {
            len,
            channels: d,
            state: s,
        };
        let inp = ScanInputs {
            x: xv.data(),
            delta: dv.data(),
            a: av.data(),
            b: bv.data(),
            c: cv.data(),
            skip: sv.data(),
        };
        let (y, _) = kernels::selective_scan(inp, dims, false);
        let dtype = [&dv, &av, &bv, &cv, &sv].iter().fold(xv.dtype(), |t, v| t.promote(v.dtype()));
        let inputs = [self.id, delta.id, a.id, b.id, c.id, skip.id];
        Ok(self.emit(vec![len, d], y, dtype, Op::Scan { inputs, dims }, &inputs))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leaf<'t>(tape: &'t Tape, shape: &[usize], data: Vec<f64>) -> Var<'t> {
        tape.leaf(Tensor::new(shape, data, DType::F64).unwrap().with_requires_grad(true))
    }

    #[test]
    fn sum_gradient_is_all_ones() {
        let tape = Tape::new();
        let x = leaf(&tape, &[2, 3], vec![1.0, -2.0, 3.0, 0.5, 0.0, 9.0]);
        let grads = tape.backward(x.sum()).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[1.0; 6]);
    }

    #[test]
    fn square_gradient_is_twice_input() {
        let tape = Tape::new();
        let data = vec![1.5, -2.0, 0.25, 4.0];
        let x = leaf(&tape, &[4], data.clone());
        let loss = x.mul(x).unwrap().sum();
        let grads = tape.backward(loss).unwrap();
        let expected: Vec<f64> = data.iter().map(|v| 2.0 * v).collect();
        assert_eq!(grads.get(x).unwrap().data(), expected.as_slice());
    }

    #[test]
    fn unreachable_leaf_gets_exact_zero() {
        let tape = Tape::new();
        let x = leaf(&tape, &[3], vec![1.0, 2.0, 3.0]);
        let y = leaf(&tape, &[3], vec![4.0, 5.0, 6.0]);
        let grads = tape.backward(x.sum()).unwrap();
        assert!(grads.get(y).is_none());
        assert_eq!(grads.get_or_zero(y).data(), &[0.0; 3]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let tape = Tape::new();
        let x = leaf(&tape, &[3], vec![1.0, 2.0, 3.0]);
        assert!(matches!(tape.backward(x), Err(Error::NotScalar(_))));
    }

    #[test]
    fn foreign_loss_is_rejected() {
        let tape = Tape::new();
        let other = Tape::new();
        let x = leaf(&other, &[1], vec![1.0]);
        assert!(matches!(tape.backward(x), Err(Error::ForeignVar)));
    }

    #[test]
    fn inference_tape_records_nothing_differentiable() {
        let tape = Tape::inference();
        let x = leaf(&tape, &[2], vec![1.0, 2.0]);
        let loss = x.mul(x).unwrap().sum();
        assert_eq!(loss.value().item().unwrap(), 5.0);
        let grads = tape.backward(loss).unwrap();
        assert!(grads.get(x).is_none());
    }

    #[test]
    fn shared_input_accumulates() {
        // d/dx (x*y + x) = y + 1
        let tape = Tape::new();
        let x = leaf(&tape, &[2], vec![2.0, 3.0]);
        let y = leaf(&tape, &[2], vec![5.0, -1.0]);
        let loss = x.mul(y).unwrap().add(x).unwrap().sum();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[6.0, 0.0]);
        assert_eq!(grads.get(y).unwrap().data(), &[2.0, 3.0]);
    }
}
