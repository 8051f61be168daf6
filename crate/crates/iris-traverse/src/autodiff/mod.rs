//! Reverse-mode automatic differentiation on f64 tensors.
//!
//! The engine is define-by-run: every forward operation appends a node to a
//! [`Context`]'s tape, and [`Tensor::backward`] walks the tape in reverse to
//! accumulate gradients into differentiable leaves. The tape is rebuilt each
//! forward pass; nothing is cached across passes.
//!
//! Everything is f64 — gradient correctness is verified against central
//! finite differences (see [`grad_check`]) and that verification needs the
//! headroom.

mod backward;
mod gradcheck;

pub use gradcheck::{grad_check, grad_check_default_eps, GradCheckReport};

use crate::error::{Error, Result};
use std::cell::RefCell;
use std::rc::Rc;

// ── Plain tensors ────────────────────────────────────────────────────────

/// A plain (untracked) row-major f64 tensor. This is the transferable,
/// thread-safe value type; attach it to a [`Context`] to differentiate
/// through it.
#[derive(Clone, Debug, PartialEq)]
pub struct Array {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Array {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::domain(
                "Array::new",
                format!("shape {:?} implies {} elements, got {}", shape, n, data.len()),
            ));
        }
        Ok(Array { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Array {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Array {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }
}

// ── Tape ─────────────────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinKind {
    Add,
    Sub,
    Mul,
    Div,
    Pow,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UnKind {
    Neg,
    Exp,
    Log,
    Sqrt,
    Abs,
    Sigmoid,
    Tanh,
    Relu,
    Square,
    Sin,
    Cos,
}

/// Padding policy for [`Tensor::conv2d`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PadMode {
    /// Out-of-bounds taps read 0.
    Zero,
    /// Out-of-bounds taps reflect about the edge pixel (no edge repeat).
    Reflect,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum RedKind {
    Sum,
    Mean,
    /// Smooth maximum: log-sum-exp with temperature τ, `τ·ln Σ exp(x/τ)`.
    MaxSmooth { tau: f64 },
}

/// Operation record: inputs by node id plus whatever the backward rule needs.
#[derive(Clone, Debug)]
pub(crate) enum Op {
    Leaf { differentiable: bool },
    Binary { kind: BinKind, a: usize, b: usize },
    Unary { kind: UnKind, a: usize },
    Clamp { a: usize, lo: f64, hi: f64 },
    Select { a: usize, index: usize },
    Reshape { a: usize },
    Upsample2x { a: usize },
    StackPair { a: usize, b: usize },
    Matmul { a: usize, b: usize },
    Conv2d { x: usize, k: usize, stride: usize, pad: usize, mode: PadMode },
    Reduce { kind: RedKind, a: usize, axes: Vec<usize> },
    GridSample { src: usize, coords: usize },
}

#[derive(Debug)]
pub(crate) struct Node {
    pub(crate) shape: Vec<usize>,
    pub(crate) values: Vec<f64>,
    pub(crate) op: Op,
    /// True iff some differentiable leaf can be reached through this node.
    pub(crate) needs_grad: bool,
}

#[derive(Default)]
pub(crate) struct Graph {
    pub(crate) nodes: Vec<Node>,
    pub(crate) grads: Vec<Option<Vec<f64>>>,
}

/// One computation record. Create one per forward pass (they are cheap), run
/// [`Tensor::backward`] on a scalar result, then read leaf gradients with
/// [`Tensor::grad`]. A context is single-threaded; independent contexts can
/// live on different threads, and detached [`Array`] values move freely.
pub struct Context {
    graph: Rc<RefCell<Graph>>,
}

impl Default for Context {
    fn default() -> Self {
        Self::new()
    }
}

impl Context {
    pub fn new() -> Self {
        Context {
            graph: Rc::new(RefCell::new(Graph::default())),
        }
    }

    fn push(&self, shape: Vec<usize>, values: Vec<f64>, op: Op, needs_grad: bool) -> Tensor {
        let mut g = self.graph.borrow_mut();
        g.nodes.push(Node {
            shape,
            values,
            op,
            needs_grad,
        });
        Tensor {
            graph: Rc::clone(&self.graph),
            id: g.nodes.len() - 1,
        }
    }

    /// A differentiable leaf: gradients accumulate here during backward.
    pub fn leaf(&self, arr: &Array) -> Tensor {
        self.push(
            arr.shape.clone(),
            arr.data.clone(),
            Op::Leaf {
                differentiable: true,
            },
            true,
        )
    }

    /// A constant: participates in forward math, receives no gradient.
    pub fn constant(&self, arr: &Array) -> Tensor {
        self.push(
            arr.shape.clone(),
            arr.data.clone(),
            Op::Leaf {
                differentiable: false,
            },
            false,
        )
    }

    /// Constant scalar convenience.
    pub fn scalar(&self, v: f64) -> Tensor {
        self.constant(&Array::scalar(v))
    }

    /// Number of nodes recorded so far.
    pub fn node_count(&self) -> usize {
        self.graph.borrow().nodes.len()
    }
}

// ── Tensor handle ────────────────────────────────────────────────────────

/// Handle to a node on a [`Context`]'s tape. Cloning is cheap (id + Rc).
#[derive(Clone)]
pub struct Tensor {
    graph: Rc<RefCell<Graph>>,
    id: usize,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let g = self.graph.borrow();
        let n = &g.nodes[self.id];
        f.debug_struct("Tensor")
            .field("id", &self.id)
            .field("shape", &n.shape)
            .finish()
    }
}

macro_rules! unary_method {
    ($name:ident, $kind:expr) => {
        pub fn $name(&self) -> Result<Tensor> {
            self.unary($kind)
        }
    };
}

impl Tensor {
    pub fn shape(&self) -> Vec<usize> {
        self.graph.borrow().nodes[self.id].shape.clone()
    }

    pub fn len(&self) -> usize {
        self.graph.borrow().nodes[self.id].values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Copy of the forward values.
    pub fn values(&self) -> Vec<f64> {
        self.graph.borrow().nodes[self.id].values.clone()
    }

    /// The single value of a scalar tensor.
    pub fn value(&self) -> Result<f64> {
        let g = self.graph.borrow();
        let n = &g.nodes[self.id];
        if n.values.len() != 1 {
            return Err(Error::NonScalarLoss(n.shape.clone()));
        }
        Ok(n.values[0])
    }

    /// Detach into a plain [`Array`] (no gradient connection).
    pub fn detach(&self) -> Array {
        let g = self.graph.borrow();
        let n = &g.nodes[self.id];
        Array {
            shape: n.shape.clone(),
            data: n.values.clone(),
        }
    }

    /// Gradient accumulated by the most recent [`Tensor::backward`] on this
    /// context, if any reached this node.
    pub fn grad(&self) -> Option<Vec<f64>> {
        let g = self.graph.borrow();
        g.grads.get(self.id).and_then(|o| o.clone())
    }

    fn same_context(&self, other: &Tensor, op: &'static str) -> Result<()> {
        if Rc::ptr_eq(&self.graph, &other.graph) {
            Ok(())
        } else {
            Err(Error::ContextMismatch(op))
        }
    }

    /// The context this tensor lives on.
    pub fn context(&self) -> Context {
        Context {
            graph: Rc::clone(&self.graph),
        }
    }

    fn ctx(&self) -> Context {
        self.context()
    }

    // ── Elementwise binary ───────────────────────────────────────────────

    /// Elementwise binary op. Shapes must match, or either operand may be a
    /// one-element tensor broadcast against the other.
    pub fn binary(&self, kind: BinKind, other: &Tensor) -> Result<Tensor> {
        let opname = bin_name(kind);
        self.same_context(other, opname)?;
        let (shape, values, needs);
        {
            let g = self.graph.borrow();
            let a = &g.nodes[self.id];
            let b = &g.nodes[other.id];
            if a.shape != b.shape && a.values.len() != 1 && b.values.len() != 1 {
                return Err(Error::ShapeMismatch {
                    op: opname,
                    left: a.shape.clone(),
                    right: b.shape.clone(),
                });
            }
            shape = if a.values.len() == 1 && b.values.len() != 1 {
                b.shape.clone()
            } else {
                a.shape.clone()
            };
            values = binary_forward(kind, &a.values, &b.values)?;
            needs = a.needs_grad || b.needs_grad;
        }
        Ok(self.ctx().push(
            shape,
            values,
            Op::Binary {
                kind,
                a: self.id,
                b: other.id,
            },
            needs,
        ))
    }

    pub fn add(&self, o: &Tensor) -> Result<Tensor> {
        self.binary(BinKind::Add, o)
    }
    pub fn sub(&self, o: &Tensor) -> Result<Tensor> {
        self.binary(BinKind::Sub, o)
    }
    pub fn mul(&self, o: &Tensor) -> Result<Tensor> {
        self.binary(BinKind::Mul, o)
    }
    pub fn div(&self, o: &Tensor) -> Result<Tensor> {
        self.binary(BinKind::Div, o)
    }
    pub fn pow(&self, o: &Tensor) -> Result<Tensor> {
        self.binary(BinKind::Pow, o)
    }

    pub fn add_scalar(&self, c: f64) -> Result<Tensor> {
        self.add(&self.ctx().scalar(c))
    }
    pub fn sub_scalar(&self, c: f64) -> Result<Tensor> {
        self.sub(&self.ctx().scalar(c))
    }
    pub fn mul_scalar(&self, c: f64) -> Result<Tensor> {
        self.mul(&self.ctx().scalar(c))
    }
    pub fn div_scalar(&self, c: f64) -> Result<Tensor> {
        self.div(&self.ctx().scalar(c))
    }
    pub fn powf(&self, c: f64) -> Result<Tensor> {
        self.pow(&self.ctx().scalar(c))
    }
    /// `c − self`, convenience for the common `1 − x` pattern.
    pub fn rsub_scalar(&self, c: f64) -> Result<Tensor> {
        self.ctx().scalar(c).sub(self)
    }

    // ── Elementwise unary ────────────────────────────────────────────────

    pub fn unary(&self, kind: UnKind) -> Result<Tensor> {
        let (shape, values, needs);
        {
            let g = self.graph.borrow();
            let a = &g.nodes[self.id];
            values = unary_forward(kind, &a.values)?;
            shape = a.shape.clone();
            needs = a.needs_grad;
        }
        Ok(self
            .ctx()
            .push(shape, values, Op::Unary { kind, a: self.id }, needs))
    }

    unary_method!(neg, UnKind::Neg);
    unary_method!(exp, UnKind::Exp);
    unary_method!(log, UnKind::Log);
    unary_method!(sqrt, UnKind::Sqrt);
    unary_method!(abs, UnKind::Abs);
    unary_method!(sigmoid, UnKind::Sigmoid);
    unary_method!(tanh, UnKind::Tanh);
    unary_method!(relu, UnKind::Relu);
    unary_method!(square, UnKind::Square);
    unary_method!(sin, UnKind::Sin);
    unary_method!(cos, UnKind::Cos);

    /// Clamp values to `[lo, hi]`; subgradient is 1 inside the interval
    /// (inclusive) and 0 outside.
    pub fn clamp(&self, lo: f64, hi: f64) -> Result<Tensor> {
        if !(lo <= hi) {
            return Err(Error::domain("clamp", format!("invalid interval [{lo}, {hi}]")));
        }
        let (shape, values, needs);
        {
            let g = self.graph.borrow();
            let a = &g.nodes[self.id];
            values = a.values.iter().map(|&v| v.clamp(lo, hi)).collect();
            shape = a.shape.clone();
            needs = a.needs_grad;
        }
        Ok(self
            .ctx()
            .push(shape, values, Op::Clamp { a: self.id, lo, hi }, needs))
    }

    // ── Shape ops ────────────────────────────────────────────────────────

    /// Extract one element by flat index as a scalar tensor.
    pub fn select(&self, index: usize) -> Result<Tensor> {
        let (v, needs);
        {
            let g = self.graph.borrow();
            let a = &g.nodes[self.id];
            if index >= a.values.len() {
                return Err(Error::domain(
                    "select",
                    format!("index {index} out of range for {} elements", a.values.len()),
                ));
            }
            v = a.values[index];
            needs = a.needs_grad;
        }
        Ok(self.ctx().push(
            vec![1],
            vec![v],
            Op::Select {
                a: self.id,
                index,
            },
            needs,
        ))
    }

    /// Reinterpret the value buffer under a new shape of equal length.
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        let (values, needs);
        {
            let g = self.graph.borrow();
            let a = &g.nodes[self.id];
            let n: usize = shape.iter().product();
            if n != a.values.len() {
                return Err(Error::ShapeMismatch {
                    op: "reshape",
                    left: a.shape.clone(),
                    right: shape.to_vec(),
                });
            }
            values = a.values.clone();
            needs = a.needs_grad;
        }
        Ok(self
            .ctx()
            .push(shape.to_vec(), values, Op::Reshape { a: self.id }, needs))
    }

    /// Nearest-neighbor ×2 upsample of a `C×H×W` tensor.
    pub fn upsample2x(&self) -> Result<Tensor> {
        let (shape, values, needs);
        {
            let g = self.graph.borrow();
            let a = &g.nodes[self.id];
            let [c, h, w] = rank3(&a.shape, "upsample2x")?;
            let mut out = vec![0.0; c * 4 * h * w];
            let (oh, ow) = (2 * h, 2 * w);
            for ci in 0..c {
                for y in 0..oh {
                    for x in 0..ow {
                        out[ci * oh * ow + y * ow + x] =
                            a.values[ci * h * w + (y / 2) * w + x / 2];
                    }
                }
            }
            shape = vec![c, oh, ow];
            values = out;
            needs = a.needs_grad;
        }
        Ok(self
            .ctx()
            .push(shape, values, Op::Upsample2x { a: self.id }, needs))
    }

    /// Stack two equal-shape tensors along a new trailing axis of size 2.
    /// Used to build `H×W×2` coordinate grids for [`Tensor::grid_sample`].
    pub fn stack_pair(&self, other: &Tensor) -> Result<Tensor> {
        self.same_context(other, "stack_pair")?;
        let (shape, values, needs);
        {
            let g = self.graph.borrow();
            let a = &g.nodes[self.id];
            let b = &g.nodes[other.id];
            if a.shape != b.shape {
                return Err(Error::ShapeMismatch {
                    op: "stack_pair",
                    left: a.shape.clone(),
                    right: b.shape.clone(),
                });
            }
            let mut out = Vec::with_capacity(a.values.len() * 2);
            for i in 0..a.values.len() {
                out.push(a.values[i]);
                out.push(b.values[i]);
            }
            let mut s = a.shape.clone();
            s.push(2);
            shape = s;
            values = out;
            needs = a.needs_grad || b.needs_grad;
        }
        Ok(self.ctx().push(
            shape,
            values,
            Op::StackPair {
                a: self.id,
                b: other.id,
            },
            needs,
        ))
    }

    // ── Linear algebra ───────────────────────────────────────────────────

    /// Matrix product of `m×k` by `k×n`.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        self.same_context(other, "matmul")?;
        let (shape, values, needs);
        {
            let g = self.graph.borrow();
            let a = &g.nodes[self.id];
            let b = &g.nodes[other.id];
            let [m, k] = rank2(&a.shape, "matmul lhs")?;
            let [k2, n] = rank2(&b.shape, "matmul rhs")?;
            if k != k2 {
                return Err(Error::ShapeMismatch {
                    op: "matmul",
                    left: a.shape.clone(),
                    right: b.shape.clone(),
                });
            }
            values = matmul_forward(&a.values, &b.values, m, k, n);
            shape = vec![m, n];
            needs = a.needs_grad || b.needs_grad;
        }
        Ok(self.ctx().push(
            shape,
            values,
            Op::Matmul {
                a: self.id,
                b: other.id,
            },
            needs,
        ))
    }

    /// 2-D cross-correlation of `C×H×W` with kernels `F×C×kh×kw` (odd kh/kw),
    /// symmetric padding `pad` on both axes, output `F×H'×W'` with
    /// `H' = (H + 2·pad − kh)/stride + 1`.
    pub fn conv2d(&self, kernel: &Tensor, stride: usize, pad: usize, mode: PadMode) -> Result<Tensor> {
        self.same_context(kernel, "conv2d")?;
        let (shape, values, needs);
        {
            let g = self.graph.borrow();
            let x = &g.nodes[self.id];
            let k = &g.nodes[kernel.id];
            let dims = conv_dims(&x.shape, &k.shape, stride, pad)?;
            values = conv2d_forward(&x.values, &k.values, &dims, mode);
            shape = vec![dims.f, dims.oh, dims.ow];
            needs = x.needs_grad || k.needs_grad;
        }
        Ok(self.ctx().push(
            shape,
            values,
            Op::Conv2d {
                x: self.id,
                k: kernel.id,
                stride,
                pad,
                mode,
            },
            needs,
        ))
    }

    /// Bilinear sampling of an `H×W` source at continuous pixel coordinates
    /// `coords[i,j] = (row, col)`, shape `H'×W'×2`. Out-of-bounds coordinates
    /// clamp to the border; differentiable w.r.t. both source and coords.
    pub fn grid_sample(&self, coords: &Tensor) -> Result<Tensor> {
        self.same_context(coords, "grid_sample")?;
        let (shape, values, needs);
        {
            let g = self.graph.borrow();
            let src = &g.nodes[self.id];
            let c = &g.nodes[coords.id];
            let [h, w] = rank2(&src.shape, "grid_sample source")?;
            if c.shape.len() != 3 || c.shape[2] != 2 {
                return Err(Error::domain(
                    "grid_sample",
                    format!("coords must be H'×W'×2, got {:?}", c.shape),
                ));
            }
            let (oh, ow) = (c.shape[0], c.shape[1]);
            let mut out = vec![0.0; oh * ow];
            for i in 0..oh * ow {
                let y = c.values[2 * i];
                let x = c.values[2 * i + 1];
                out[i] = bilinear(&src.values, h, w, y, x).0;
            }
            shape = vec![oh, ow];
            values = out;
            needs = src.needs_grad || c.needs_grad;
        }
        Ok(self.ctx().push(
            shape,
            values,
            Op::GridSample {
                src: self.id,
                coords: coords.id,
            },
            needs,
        ))
    }

    // ── Reductions ───────────────────────────────────────────────────────

    /// Reduce along `axes` (empty slice = all axes, producing a scalar).
    pub fn reduce(&self, kind: RedKind, axes: &[usize]) -> Result<Tensor> {
        let (shape, values, needs, axes_norm);
        {
            let g = self.graph.borrow();
            let a = &g.nodes[self.id];
            axes_norm = normalize_axes(axes, a.shape.len())?;
            if let RedKind::MaxSmooth { tau } = kind {
                if !(tau > 0.0) {
                    return Err(Error::domain(
                        "reduce",
                        format!("max-smooth temperature must be positive, got {tau}"),
                    ));
                }
            }
            values = reduce_forward(kind, &a.values, &a.shape, &axes_norm);
            shape = reduced_shape(&a.shape, &axes_norm);
            needs = a.needs_grad;
        }
        Ok(self.ctx().push(
            shape,
            values,
            Op::Reduce {
                kind,
                a: self.id,
                axes: axes_norm,
            },
            needs,
        ))
    }

    pub fn sum_all(&self) -> Result<Tensor> {
        self.reduce(RedKind::Sum, &[])
    }
    pub fn mean_all(&self) -> Result<Tensor> {
        self.reduce(RedKind::Mean, &[])
    }
    pub fn sum_axes(&self, axes: &[usize]) -> Result<Tensor> {
        self.reduce(RedKind::Sum, axes)
    }
    /// Smooth maximum over all elements (log-sum-exp at temperature `tau`).
    pub fn max_smooth_all(&self, tau: f64) -> Result<Tensor> {
        self.reduce(RedKind::MaxSmooth { tau }, &[])
    }

    // ── Backward ─────────────────────────────────────────────────────────

    /// Reverse pass from this scalar: populates gradients for every
    /// differentiable leaf reachable from it. May be called more than once
    /// per context; each call replaces the stored gradients.
    pub fn backward(&self) -> Result<()> {
        let grads = {
            let g = self.graph.borrow();
            let n = &g.nodes[self.id];
            if n.values.len() != 1 {
                return Err(Error::NonScalarLoss(n.shape.clone()));
            }
            backward::run_backward(&g.nodes, self.id)?
        };
        self.graph.borrow_mut().grads = grads;
        Ok(())
    }
}

// ── Shape helpers ────────────────────────────────────────────────────────

fn rank2(shape: &[usize], what: &'static str) -> Result<[usize; 2]> {
    match shape {
        [a, b] => Ok([*a, *b]),
        _ => Err(Error::domain(
            "shape",
            format!("{what} must be rank 2, got {shape:?}"),
        )),
    }
}

fn rank3(shape: &[usize], what: &'static str) -> Result<[usize; 3]> {
    match shape {
        [a, b, c] => Ok([*a, *b, *c]),
        _ => Err(Error::domain(
            "shape",
            format!("{what} must be rank 3, got {shape:?}"),
        )),
    }
}

fn bin_name(kind: BinKind) -> &'static str {
    match kind {
        BinKind::Add => "add",
        BinKind::Sub => "sub",
        BinKind::Mul => "mul",
        BinKind::Div => "div",
        BinKind::Pow => "pow",
    }
}

// ── Forward kernels ──────────────────────────────────────────────────────

pub(crate) fn binary_forward(kind: BinKind, a: &[f64], b: &[f64]) -> Result<Vec<f64>> {
    let n = a.len().max(b.len());
    let get = |s: &[f64], i: usize| if s.len() == 1 { s[0] } else { s[i] };
    if matches!(kind, BinKind::Div) {
        if b.iter().any(|&v| v == 0.0) {
            return Err(Error::domain("div", "division by exact zero".to_string()));
        }
    }
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let (av, bv) = (get(a, i), get(b, i));
        let v = match kind {
            BinKind::Add => av + bv,
            BinKind::Sub => av - bv,
            BinKind::Mul => av * bv,
            BinKind::Div => av / bv,
            BinKind::Pow => {
                if av < 0.0 && bv.fract() != 0.0 {
                    return Err(Error::domain(
                        "pow",
                        format!("negative base {av} with non-integer exponent {bv}"),
                    ));
                }
                if av == 0.0 && bv < 0.0 {
                    return Err(Error::domain("pow", "zero base with negative exponent".to_string()));
                }
                av.powf(bv)
            }
        };
        out.push(v);
    }
    Ok(out)
}

/// Numerically stable logistic function.
pub(crate) fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn unary_forward(kind: UnKind, a: &[f64]) -> Result<Vec<f64>> {
    match kind {
        UnKind::Log => {
            if a.iter().any(|&v| v <= 0.0) {
                return Err(Error::domain("log", "input must be strictly positive".to_string()));
            }
        }
        UnKind::Sqrt => {
            if a.iter().any(|&v| v < 0.0) {
                return Err(Error::domain("sqrt", "input must be non-negative".to_string()));
            }
        }
        UnKind::Exp => {
            // e^710 overflows f64; treat as a domain violation rather than
            // silently producing Inf.
            if a.iter().any(|&v| v > 709.0) {
                return Err(Error::domain("exp", "input too large (would overflow)".to_string()));
            }
        }
        _ => {}
    }
    Ok(a.iter()
        .map(|&v| match kind {
            UnKind::Neg => -v,
            UnKind::Exp => v.exp(),
            UnKind::Log => v.ln(),
            UnKind::Sqrt => v.sqrt(),
            UnKind::Abs => v.abs(),
            UnKind::Sigmoid => sigmoid_scalar(v),
            UnKind::Tanh => v.tanh(),
            UnKind::Relu => v.max(0.0),
            UnKind::Square => v * v,
            UnKind::Sin => v.sin(),
            UnKind::Cos => v.cos(),
        })
        .collect())
}

pub(crate) fn matmul_forward(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for kk in 0..k {
            let aik = a[i * k + kk];
            if aik == 0.0 {
                continue;
            }
            let brow = &b[kk * n..(kk + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += aik * brow[j];
            }
        }
    }
    out
}

/// Reflect index `i` into `[0, n)` about the edges without repeating them
/// (…2 1 0 | 0' 1' 2'… maps -1 → 1). Period is 2(n−1).
pub(crate) fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    if m < n as isize {
        m as usize
    } else {
        (period - m) as usize
    }
}

pub(crate) struct ConvDims {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub f: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

pub(crate) fn conv_dims(xs: &[usize], ks: &[usize], stride: usize, pad: usize) -> Result<ConvDims> {
    let [c, h, w] = rank3(xs, "conv2d input")?;
    let (f, kc, kh, kw) = match ks {
        [f, kc, kh, kw] => (*f, *kc, *kh, *kw),
        _ => {
            return Err(Error::domain(
                "conv2d",
                format!("kernel must be F×C×kh×kw, got {ks:?}"),
            ))
        }
    };
    if kc != c {
        return Err(Error::ShapeMismatch {
            op: "conv2d",
            left: xs.to_vec(),
            right: ks.to_vec(),
        });
    }
    if kh % 2 == 0 || kw % 2 == 0 {
        return Err(Error::domain("conv2d", format!("kernel sides must be odd, got {kh}×{kw}")));
    }
    if stride == 0 {
        return Err(Error::domain("conv2d", "stride must be ≥ 1".to_string()));
    }
    if h + 2 * pad < kh || w + 2 * pad < kw {
        return Err(Error::domain(
            "conv2d",
            format!("kernel {kh}×{kw} larger than padded input {}×{}", h + 2 * pad, w + 2 * pad),
        ));
    }
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    Ok(ConvDims {
        c,
        h,
        w,
        f,
        kh,
        kw,
        stride,
        pad,
        oh,
        ow,
    })
}

pub(crate) fn conv2d_forward(x: &[f64], k: &[f64], d: &ConvDims, mode: PadMode) -> Vec<f64> {
    let mut out = vec![0.0; d.f * d.oh * d.ow];
    for f in 0..d.f {
        for oy in 0..d.oh {
            for ox in 0..d.ow {
                let mut acc = 0.0;
                for c in 0..d.c {
                    let xplane = &x[c * d.h * d.w..(c + 1) * d.h * d.w];
                    let kplane = &k[(f * d.c + c) * d.kh * d.kw..(f * d.c + c + 1) * d.kh * d.kw];
                    for ky in 0..d.kh {
                        let iy = (oy * d.stride + ky) as isize - d.pad as isize;
                        for kx in 0..d.kw {
                            let ix = (ox * d.stride + kx) as isize - d.pad as isize;
                            let xv = match mode {
                                PadMode::Zero => {
                                    if iy < 0 || iy >= d.h as isize || ix < 0 || ix >= d.w as isize {
                                        0.0
                                    } else {
                                        xplane[iy as usize * d.w + ix as usize]
                                    }
                                }
                                PadMode::Reflect => {
                                    xplane[reflect_index(iy, d.h) * d.w + reflect_index(ix, d.w)]
                                }
                            };
                            acc += xv * kplane[ky * d.kw + kx];
                        }
                    }
                }
                out[f * d.oh * d.ow + oy * d.ow + ox] = acc;
            }
        }
    }
    out
}

/// Bilinear fetch with border clamping. Returns (value, d/dy, d/dx).
pub(crate) fn bilinear(src: &[f64], h: usize, w: usize, y: f64, x: f64) -> (f64, f64, f64) {
    let y0f = y.floor();
    let x0f = x.floor();
    let fy = y - y0f;
    let fx = x - x0f;
    let cl = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let y0 = cl(y0f as isize, h);
    let y1 = cl(y0f as isize + 1, h);
    let x0 = cl(x0f as isize, w);
    let x1 = cl(x0f as isize + 1, w);
    let s00 = src[y0 * w + x0];
    let s01 = src[y0 * w + x1];
    let s10 = src[y1 * w + x0];
    let s11 = src[y1 * w + x1];
    let v = (1.0 - fy) * ((1.0 - fx) * s00 + fx * s01) + fy * ((1.0 - fx) * s10 + fx * s11);
    // Clamped taps coincide, so these derivatives vanish automatically
    // outside the image — matching the flat extension the clamp implies.
    let dy = (1.0 - fx) * (s10 - s00) + fx * (s11 - s01);
    let dx = (1.0 - fy) * (s01 - s00) + fy * (s11 - s10);
    (v, dy, dx)
}

pub(crate) fn normalize_axes(axes: &[usize], rank: usize) -> Result<Vec<usize>> {
    if axes.is_empty() {
        return Ok((0..rank).collect());
    }
    let mut v: Vec<usize> = axes.to_vec();
    v.sort_unstable();
    v.dedup();
    if let Some(&bad) = v.iter().find(|&&a| a >= rank) {
        return Err(Error::domain(
            "reduce",
            format!("axis {bad} out of range for rank {rank}"),
        ));
    }
    Ok(v)
}

pub(crate) fn reduced_shape(shape: &[usize], axes: &[usize]) -> Vec<usize> {
    let out: Vec<usize> = shape
        .iter()
        .enumerate()
        .filter(|(i, _)| !axes.contains(i))
        .map(|(_, &d)| d)
        .collect();
    if out.is_empty() {
        vec![1]
    } else {
        out
    }
}

/// Map each input linear index to its output cell's linear index.
pub(crate) fn reduce_index_map(shape: &[usize], axes: &[usize]) -> Vec<usize> {
    let rank = shape.len();
    let n: usize = shape.iter().product();
    let kept: Vec<usize> = (0..rank).filter(|i| !axes.contains(i)).collect();
    let mut out_strides = vec![0usize; rank];
    let mut stride = 1;
    for &d in kept.iter().rev() {
        out_strides[d] = stride;
        stride *= shape[d];
    }
    let mut map = vec![0usize; n];
    for lin in 0..n {
        let mut rem = lin;
        let mut out_lin = 0;
        for d in (0..rank).rev() {
            let coord = rem % shape[d];
            rem /= shape[d];
            out_lin += coord * out_strides[d];
        }
        map[lin] = out_lin;
    }
    map
}

pub(crate) fn reduce_forward(kind: RedKind, a: &[f64], shape: &[usize], axes: &[usize]) -> Vec<f64> {
    let out_n: usize = reduced_shape(shape, axes).iter().product();
    let map = reduce_index_map(shape, axes);
    let count: usize = axes.iter().map(|&d| shape[d]).product();
    match kind {
        RedKind::Sum | RedKind::Mean => {
            let mut out = vec![0.0; out_n];
            for (i, &v) in a.iter().enumerate() {
                out[map[i]] += v;
            }
            if matches!(kind, RedKind::Mean) {
                let c = count as f64;
                for v in &mut out {
                    *v /= c;
                }
            }
            out
        }
        RedKind::MaxSmooth { tau } => {
            let mut maxes = vec![f64::NEG_INFINITY; out_n];
            for (i, &v) in a.iter().enumerate() {
                if v > maxes[map[i]] {
                    maxes[map[i]] = v;
                }
            }
            let mut sums = vec![0.0; out_n];
            for (i, &v) in a.iter().enumerate() {
                sums[map[i]] += ((v - maxes[map[i]]) / tau).exp();
            }
            (0..out_n).map(|i| maxes[i] + tau * sums[i].ln()).collect()
        }
    }
}
