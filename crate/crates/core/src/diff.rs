//! Reverse-mode automatic differentiation on a tape of rank-2 tensors.
//!
//! Nodes are appended in creation order and a node's parents always have a
//! smaller index, so walking the tape backwards is a reverse topological
//! order. Gradients are accumulated in exactly that order, which makes a
//! backward pass deterministic for a fixed graph construction.
//!
//! Binary elementwise ops accept equal shapes, or a `1×1` scalar on either
//! side. The only other broadcasts are [`Tape::add_row`] (bias over rows) and
//! [`Tape::scale_rows`] (per-row weights).
//!
//! Non-differentiable pieces such as spike firing go through
//! [`Tape::register_custom_op`], which pairs a forward function with a
//! hand-written backward rule.

use alloc::format;
use alloc::rc::Rc;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::tensor::Tensor;
use crate::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Handle to a custom op registered on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CustomOpId(usize);

/// Forward rule of a custom op.
pub type CustomForward = dyn Fn(&[&Tensor]) -> Result<Tensor>;

/// Backward rule of a custom op: `(inputs, output, upstream) -> partials`,
/// one tensor per input shaped like that input, already multiplied by the
/// upstream gradient.
pub type CustomBackward = dyn Fn(&[&Tensor], &Tensor, &Tensor) -> Vec<Tensor>;

struct CustomOp {
    name: String,
    arity: usize,
    forward: Rc<CustomForward>,
    backward: Rc<CustomBackward>,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Neg(Var),
    Abs(Var),
    Exp(Var),
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    MaxConst(Var, f64),
    AddConst(Var),
    ScaleConst(Var, f64),
    Dot(Var, Var),
    MatMul(Var, Var),
    AddRow(Var, Var),
    ScaleRows(Var, Var),
    Sum(Var),
    Mean(Var),
    RowSum(Var),
    SegmentSum(Var, usize),
    ExclusiveCumsum(Var, usize),
    ConcatCols(Var, Var),
    SliceCols(Var, usize, usize),
    SliceRows(Var, usize, usize),
    Reshape(Var),
    Custom(usize, Vec<Var>),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Neg(..) => "neg",
            Op::Abs(..) => "abs",
            Op::Exp(..) => "exp",
            Op::Tanh(..) => "tanh",
            Op::Sigmoid(..) => "sigmoid",
            Op::Relu(..) => "relu",
            Op::MaxConst(..) => "max_const",
            Op::AddConst(..) => "add_const",
            Op::ScaleConst(..) => "scale_const",
            Op::Dot(..) => "dot",
            Op::MatMul(..) => "matmul",
            Op::AddRow(..) => "add_row",
            Op::ScaleRows(..) => "scale_rows",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::RowSum(..) => "row_sum",
            Op::SegmentSum(..) => "segment_sum",
            Op::ExclusiveCumsum(..) => "exclusive_cumsum",
            Op::ConcatCols(..) => "concat_cols",
            Op::SliceCols(..) => "slice_cols",
            Op::SliceRows(..) => "slice_rows",
            Op::Reshape(..) => "reshape",
            Op::Custom(..) => "custom",
        }
    }

    fn parents(&self) -> Vec<Var> {
        match self {
            Op::Leaf => Vec::new(),
            Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::Div(a, b)
            | Op::Dot(a, b)
            | Op::MatMul(a, b)
            | Op::AddRow(a, b)
            | Op::ScaleRows(a, b)
            | Op::ConcatCols(a, b) => vec![*a, *b],
            Op::Neg(a)
            | Op::Abs(a)
            | Op::Exp(a)
            | Op::Tanh(a)
            | Op::Sigmoid(a)
            | Op::Relu(a)
            | Op::MaxConst(a, _)
            | Op::AddConst(a)
            | Op::ScaleConst(a, _)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::RowSum(a)
            | Op::SegmentSum(a, _)
            | Op::ExclusiveCumsum(a, _)
            | Op::SliceCols(a, ..)
            | Op::SliceRows(a, ..)
            | Op::Reshape(a) => vec![*a],
            Op::Custom(_, inputs) => inputs.clone(),
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// A computation graph under construction.
///
/// One tape is single-threaded. Independent tapes can be built concurrently
/// from shared read-only parameter values and their gradients summed.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    custom_ops: Vec<CustomOp>,
}

/// Gradients from one backward pass, indexed by node.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the root with respect to `var`; `None` if `var` does not
    /// require gradients.
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }

    /// Scalar gradient of a `1×1` node (0 if absent).
    pub fn scalar(&self, var: Var) -> f64 {
        self.get(var).map(|g| g.item()).unwrap_or(0.0)
    }
}

fn shape_err(op: &'static str, a: (usize, usize), b: (usize, usize)) -> Error {
    Error::contract(op, format!("incompatible shapes {a:?} and {b:?}"))
}

/// Elementwise binary op with scalar broadcast on either side.
fn broadcast(
    op: &'static str,
    a: &Tensor,
    b: &Tensor,
    f: impl Fn(f64, f64) -> f64,
) -> Result<Tensor> {
    if a.shape() == b.shape() {
        Ok(a.zip_map(b, f))
    } else if b.is_scalar() {
        let s = b.item();
        Ok(a.map(|x| f(x, s)))
    } else if a.is_scalar() {
        let s = a.item();
        Ok(b.map(|x| f(s, x)))
    } else {
        Err(shape_err(op, a.shape(), b.shape()))
    }
}

/// Reduce a gradient to the shape of an operand that may have been broadcast
/// from a scalar.
fn unbroadcast(g: Tensor, shape: (usize, usize)) -> Tensor {
    if g.shape() == shape {
        g
    } else {
        Tensor::scalar(g.sum())
    }
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

    /// Learnable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, true)
    }

    /// Constant leaf; never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, false)
    }

    pub fn param_scalar(&mut self, value: f64) -> Var {
        self.param(Tensor::scalar(value))
    }

    pub fn constant_scalar(&mut self, value: f64) -> Var {
        self.constant(Tensor::scalar(value))
    }

    fn push_leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    /// Value of a `1×1` node.
    pub fn scalar(&self, var: Var) -> f64 {
        self.nodes[var.0].value.item()
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    pub fn parents(&self, var: Var) -> Vec<Var> {
        self.nodes[var.0].op.parents()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Result<Var> {
        if !value.all_finite() {
            let name = match &op {
                Op::Custom(id, _) => self.custom_ops[*id].name.clone(),
                other => String::from(other.name()),
            };
            return Err(Error::non_finite(name));
        }
        let requires_grad = op
            .parents()
            .iter()
            .any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = broadcast("add", self.value(a), self.value(b), |x, y| x + y)?;
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = broadcast("sub", self.value(a), self.value(b), |x, y| x - y)?;
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = broadcast("mul", self.value(a), self.value(b), |x, y| x * y)?;
        self.push(v, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(b).data().iter().any(|&d| d == 0.0) {
            return Err(Error::contract("div", "zero denominator"));
        }
        let v = broadcast("div", self.value(a), self.value(b), |x, y| x / y)?;
        self.push(v, Op::Div(a, b))
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(|x| -x);
        self.push(v, Op::Neg(a))
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(f64::abs);
        self.push(v, Op::Abs(a))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(crate::math::exp);
        self.push(v, Op::Exp(a))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(crate::math::tanh);
        self.push(v, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(crate::math::sigmoid);
        self.push(v, Op::Sigmoid(a))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(|x| x.max(0.0));
        self.push(v, Op::Relu(a))
    }

    /// `max(a, c)` elementwise; ties pass no gradient.
    pub fn max_const(&mut self, a: Var, c: f64) -> Result<Var> {
        let v = self.value(a).map(|x| x.max(c));
        self.push(v, Op::MaxConst(a, c))
    }

    pub fn add_const(&mut self, a: Var, c: f64) -> Result<Var> {
        let v = self.value(a).map(|x| x + c);
        self.push(v, Op::AddConst(a))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let v = self.value(a).map(|x| x * c);
        self.push(v, Op::ScaleConst(a, c))
    }

    /// Inner product of two equally shaped tensors, giving a scalar.
    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err("dot", ta.shape(), tb.shape()));
        }
        let s = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).sum();
        self.push(Tensor::scalar(s), Op::Dot(a, b))
    }

    /// Matrix product; with an `n×1` right operand this is a matrix-vector
    /// product.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.cols() != tb.rows() {
            return Err(shape_err("matmul", ta.shape(), tb.shape()));
        }
        let v = ta.matmul(tb);
        self.push(v, Op::MatMul(a, b))
    }

    /// Adds a `1×C` row to every row of an `R×C` tensor.
    pub fn add_row(&mut self, m: Var, row: Var) -> Result<Var> {
        let (tm, tr) = (self.value(m), self.value(row));
        if tr.rows() != 1 || tr.cols() != tm.cols() {
            return Err(shape_err("add_row", tm.shape(), tr.shape()));
        }
        let mut v = tm.clone();
        let cols = tm.cols();
        let bias = tr.data();
        for chunk in v.data_mut().chunks_exact_mut(cols) {
            for (x, b) in chunk.iter_mut().zip(bias) {
                *x += b;
            }
        }
        self.push(v, Op::AddRow(m, row))
    }

    /// Multiplies row `i` of an `R×C` tensor by entry `i` of an `R×1` column.
    pub fn scale_rows(&mut self, m: Var, col: Var) -> Result<Var> {
        let (tm, tc) = (self.value(m), self.value(col));
        if tc.cols() != 1 || tc.rows() != tm.rows() {
            return Err(shape_err("scale_rows", tm.shape(), tc.shape()));
        }
        let mut v = tm.clone();
        let cols = tm.cols();
        for (chunk, s) in v.data_mut().chunks_exact_mut(cols).zip(tc.data()) {
            for x in chunk.iter_mut() {
                *x *= s;
            }
        }
        self.push(v, Op::ScaleRows(m, col))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.is_empty() {
            return Err(Error::contract("mean", "empty tensor"));
        }
        let s = t.sum() / t.len() as f64;
        self.push(Tensor::scalar(s), Op::Mean(a))
    }

    /// Sums each row, `R×C → R×1`.
    pub fn row_sum(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let cols = t.cols().max(1);
        let sums: Vec<f64> = t.data().chunks_exact(cols).map(|r| r.iter().sum()).collect();
        let v = Tensor::column(&sums);
        self.push(v, Op::RowSum(a))
    }

    /// Sums consecutive blocks of `segment` rows, `(S·n)×C → n×C`.
    pub fn segment_sum(&mut self, a: Var, segment: usize) -> Result<Var> {
        let t = self.value(a);
        if segment == 0 || t.rows() % segment != 0 {
            return Err(Error::contract(
                "segment_sum",
                format!("{} rows not divisible into segments of {segment}", t.rows()),
            ));
        }
        let (rows, cols) = t.shape();
        let mut out = Tensor::zeros(rows / segment, cols);
        for r in 0..rows {
            let o = r / segment;
            for c in 0..cols {
                let v = out.get(o, c) + t.get(r, c);
                out.set(o, c, v);
            }
        }
        self.push(out, Op::SegmentSum(a, segment))
    }

    /// Exclusive prefix sum down each column, restarting every `segment`
    /// rows: `out[i] = Σ_{j<i} a[j]` within the segment.
    pub fn exclusive_cumsum(&mut self, a: Var, segment: usize) -> Result<Var> {
        let t = self.value(a);
        if segment == 0 || t.rows() % segment != 0 {
            return Err(Error::contract(
                "exclusive_cumsum",
                format!("{} rows not divisible into segments of {segment}", t.rows()),
            ));
        }
        let (rows, cols) = t.shape();
        let mut out = Tensor::zeros(rows, cols);
        for start in (0..rows).step_by(segment) {
            for c in 0..cols {
                let mut acc = 0.0;
                for r in start..start + segment {
                    out.set(r, c, acc);
                    acc += t.get(r, c);
                }
            }
        }
        self.push(out, Op::ExclusiveCumsum(a, segment))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rows() != tb.rows() {
            return Err(shape_err("concat_cols", ta.shape(), tb.shape()));
        }
        let (rows, ca, cb) = (ta.rows(), ta.cols(), tb.cols());
        let mut data = Vec::with_capacity(rows * (ca + cb));
        for r in 0..rows {
            data.extend_from_slice(ta.row(r));
            data.extend_from_slice(tb.row(r));
        }
        let v = Tensor::from_vec(rows, ca + cb, data)?;
        self.push(v, Op::ConcatCols(a, b))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(a);
        if start + len > t.cols() {
            return Err(Error::contract(
                "slice_cols",
                format!("columns {start}..{} of {}", start + len, t.cols()),
            ));
        }
        let mut data = Vec::with_capacity(t.rows() * len);
        for r in 0..t.rows() {
            data.extend_from_slice(&t.row(r)[start..start + len]);
        }
        let v = Tensor::from_vec(t.rows(), len, data)?;
        self.push(v, Op::SliceCols(a, start, len))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(a);
        if start + len > t.rows() {
            return Err(Error::contract(
                "slice_rows",
                format!("rows {start}..{} of {}", start + len, t.rows()),
            ));
        }
        let cols = t.cols();
        let data = t.data()[start * cols..(start + len) * cols].to_vec();
        let v = Tensor::from_vec(len, cols, data)?;
        self.push(v, Op::SliceRows(a, start, len))
    }

    /// Reinterprets the row-major data with a new shape of equal size.
    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var> {
        let t = self.value(a);
        if t.len() != rows * cols {
            return Err(Error::contract(
                "reshape",
                format!("{:?} into {rows}x{cols}", t.shape()),
            ));
        }
        let v = Tensor::from_vec(rows, cols, t.data().to_vec())?;
        self.push(v, Op::Reshape(a))
    }

    /// Registers an op with a hand-written backward rule. `arity` is the
    /// number of inputs; the backward rule must return that many partials.
    pub fn register_custom_op(
        &mut self,
        name: impl Into<String>,
        arity: usize,
        forward: Rc<CustomForward>,
        backward: Rc<CustomBackward>,
    ) -> CustomOpId {
        self.custom_ops.push(CustomOp {
            name: name.into(),
            arity,
            forward,
            backward,
        });
        CustomOpId(self.custom_ops.len() - 1)
    }

    pub fn custom(&mut self, id: CustomOpId, inputs: &[Var]) -> Result<Var> {
        let op = &self.custom_ops[id.0];
        if inputs.len() != op.arity {
            return Err(Error::Arity {
                name: op.name.clone(),
                expected: op.arity,
                got: inputs.len(),
            });
        }
        let forward = Rc::clone(&op.forward);
        let values: Vec<&Tensor> = inputs.iter().map(|v| self.value(*v)).collect();
        let out = forward(&values)?;
        self.push(out, Op::Custom(id.0, inputs.to_vec()))
    }

    /// Backpropagates from a scalar root.
    ///
    /// Every `requires_grad` leaf gets an entry, zero if the root does not
    /// depend on it.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let root_value = self.value(root);
        if !root_value.is_scalar() {
            return Err(Error::contract(
                "backward",
                format!("root has shape {:?}, expected 1x1", root_value.shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; root.0 + 1];
        if self.nodes[root.0].requires_grad {
            grads[root.0] = Some(Tensor::scalar(1.0));
        }
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            self.propagate(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        for (i, node) in self.nodes.iter().enumerate().take(root.0 + 1) {
            if node.requires_grad && matches!(node.op, Op::Leaf) {
                match &grads[i] {
                    None => grads[i] = Some(Tensor::zeros(node.value.rows(), node.value.cols())),
                    Some(g) if !g.all_finite() => {
                        return Err(Error::non_finite(format!("backward (leaf {i})")))
                    }
                    Some(_) => {}
                }
            }
        }
        grads.resize(self.nodes.len(), None);
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], var: Var, g: Tensor) {
        if !self.nodes[var.0].requires_grad {
            return;
        }
        match &mut grads[var.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[i];
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                let (sa, sb) = (self.value(*a).shape(), self.value(*b).shape());
                self.accumulate(grads, *a, unbroadcast(g.clone(), sa));
                self.accumulate(grads, *b, unbroadcast(g.clone(), sb));
            }
            Op::Sub(a, b) => {
                let (sa, sb) = (self.value(*a).shape(), self.value(*b).shape());
                self.accumulate(grads, *a, unbroadcast(g.clone(), sa));
                self.accumulate(grads, *b, unbroadcast(g.map(|x| -x), sb));
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let ga = broadcast("mul", g, tb, |x, y| x * y)?;
                let gb = broadcast("mul", g, ta, |x, y| x * y)?;
                self.accumulate(grads, *a, unbroadcast(ga, ta.shape()));
                self.accumulate(grads, *b, unbroadcast(gb, tb.shape()));
            }
            Op::Div(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let ga = broadcast("div", g, tb, |x, y| x / y)?;
                // d(a/b)/db = -out/b
                let ob = broadcast("div", out, tb, |x, y| -x / y)?;
                let gb = g.zip_map(&ob, |x, y| x * y);
                self.accumulate(grads, *a, unbroadcast(ga, ta.shape()));
                self.accumulate(grads, *b, unbroadcast(gb, tb.shape()));
            }
            Op::Neg(a) => self.accumulate(grads, *a, g.map(|x| -x)),
            Op::Abs(a) => {
                let ga = g.zip_map(self.value(*a), |x, v| if v > 0.0 { x } else if v < 0.0 { -x } else { 0.0 });
                self.accumulate(grads, *a, ga);
            }
            Op::Exp(a) => self.accumulate(grads, *a, g.zip_map(out, |x, y| x * y)),
            Op::Tanh(a) => self.accumulate(grads, *a, g.zip_map(out, |x, y| x * (1.0 - y * y))),
            Op::Sigmoid(a) => {
                self.accumulate(grads, *a, g.zip_map(out, |x, y| x * y * (1.0 - y)))
            }
            Op::Relu(a) => {
                let ga = g.zip_map(self.value(*a), |x, v| if v > 0.0 { x } else { 0.0 });
                self.accumulate(grads, *a, ga);
            }
            Op::MaxConst(a, c) => {
                let c = *c;
                let ga = g.zip_map(self.value(*a), |x, v| if v > c { x } else { 0.0 });
                self.accumulate(grads, *a, ga);
            }
            Op::AddConst(a) => self.accumulate(grads, *a, g.clone()),
            Op::ScaleConst(a, c) => self.accumulate(grads, *a, g.scale(*c)),
            Op::Dot(a, b) => {
                let s = g.item();
                self.accumulate(grads, *a, self.value(*b).scale(s));
                self.accumulate(grads, *b, self.value(*a).scale(s));
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if self.requires_grad(*a) {
                    self.accumulate(grads, *a, Tensor::matmul_t(g, false, tb, true));
                }
                if self.requires_grad(*b) {
                    self.accumulate(grads, *b, Tensor::matmul_t(ta, true, g, false));
                }
            }
            Op::AddRow(m, row) => {
                self.accumulate(grads, *m, g.clone());
                if self.requires_grad(*row) {
                    let cols = g.cols();
                    let mut sums = Tensor::zeros(1, cols);
                    for r in g.data().chunks_exact(cols) {
                        for (s, x) in sums.data_mut().iter_mut().zip(r) {
                            *s += x;
                        }
                    }
                    self.accumulate(grads, *row, sums);
                }
            }
            Op::ScaleRows(m, col) => {
                let (tm, tc) = (self.value(*m), self.value(*col));
                let cols = tm.cols();
                if self.requires_grad(*m) {
                    let mut gm = g.clone();
                    for (chunk, s) in gm.data_mut().chunks_exact_mut(cols).zip(tc.data()) {
                        for x in chunk.iter_mut() {
                            *x *= s;
                        }
                    }
                    self.accumulate(grads, *m, gm);
                }
                if self.requires_grad(*col) {
                    let gc: Vec<f64> = g
                        .data()
                        .chunks_exact(cols)
                        .zip(tm.data().chunks_exact(cols))
                        .map(|(gr, mr)| gr.iter().zip(mr).map(|(x, y)| x * y).sum())
                        .collect();
                    self.accumulate(grads, *col, Tensor::column(&gc));
                }
            }
            Op::Sum(a) => {
                let (r, c) = self.value(*a).shape();
                self.accumulate(grads, *a, Tensor::full(r, c, g.item()));
            }
            Op::Mean(a) => {
                let (r, c) = self.value(*a).shape();
                let n = (r * c) as f64;
                self.accumulate(grads, *a, Tensor::full(r, c, g.item() / n));
            }
            Op::RowSum(a) => {
                let (r, c) = self.value(*a).shape();
                let mut ga = Tensor::zeros(r, c);
                for row in 0..r {
                    let v = g.get(row, 0);
                    for col in 0..c {
                        ga.set(row, col, v);
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::SegmentSum(a, seg) => {
                let (r, c) = self.value(*a).shape();
                let mut ga = Tensor::zeros(r, c);
                for row in 0..r {
                    for col in 0..c {
                        ga.set(row, col, g.get(row / seg, col));
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::ExclusiveCumsum(a, seg) => {
                // out[i] = Σ_{j<i} a[j]  =>  ga[j] = Σ_{i>j} g[i]
                let (r, c) = self.value(*a).shape();
                let mut ga = Tensor::zeros(r, c);
                for start in (0..r).step_by(*seg) {
                    for col in 0..c {
                        let mut acc = 0.0;
                        for row in (start..start + seg).rev() {
                            ga.set(row, col, acc);
                            acc += g.get(row, col);
                        }
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::ConcatCols(a, b) => {
                let ca = self.value(*a).cols();
                let cb = self.value(*b).cols();
                let rows = g.rows();
                let mut ga = Vec::with_capacity(rows * ca);
                let mut gb = Vec::with_capacity(rows * cb);
                for r in 0..rows {
                    let row = g.row(r);
                    ga.extend_from_slice(&row[..ca]);
                    gb.extend_from_slice(&row[ca..]);
                }
                self.accumulate(grads, *a, Tensor::from_vec(rows, ca, ga)?);
                self.accumulate(grads, *b, Tensor::from_vec(rows, cb, gb)?);
            }
            Op::SliceCols(a, start, len) => {
                let (r, c) = self.value(*a).shape();
                let mut ga = Tensor::zeros(r, c);
                for row in 0..r {
                    for k in 0..*len {
                        ga.set(row, start + k, g.get(row, k));
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::SliceRows(a, start, len) => {
                let (r, c) = self.value(*a).shape();
                let mut ga = Tensor::zeros(r, c);
                ga.data_mut()[start * c..(start + len) * c].copy_from_slice(g.data());
                self.accumulate(grads, *a, ga);
            }
            Op::Reshape(a) => {
                let (r, c) = self.value(*a).shape();
                self.accumulate(grads, *a, Tensor::from_vec(r, c, g.data().to_vec())?);
            }
            Op::Custom(id, inputs) => {
                let op = &self.custom_ops[*id];
                let values: Vec<&Tensor> = inputs.iter().map(|v| self.value(*v)).collect();
                let partials = (op.backward)(&values, out, g);
                if partials.len() != op.arity {
                    return Err(Error::Arity {
                        name: op.name.clone(),
                        expected: op.arity,
                        got: partials.len(),
                    });
                }
                for ((input, partial), value) in inputs.iter().zip(partials).zip(&values) {
                    if partial.shape() != value.shape() {
                        return Err(Error::contract(
                            "custom backward",
                            format!(
                                "{}: partial shape {:?} for input of shape {:?}",
                                op.name,
                                partial.shape(),
                                value.shape()
                            ),
                        ));
                    }
                    self.accumulate(grads, *input, partial);
                }
            }
        }
        Ok(())
    }
}

/// Outcome of comparing reverse-mode gradients with central differences.
#[derive(Debug, Clone, PartialEq)]
pub struct GradReport {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    /// Coordinate with the largest relative error.
    pub worst_input_index: usize,
    pub passed: bool,
    /// Coordinates skipped by the exclusion predicate.
    pub excluded: Vec<usize>,
    pub checked: usize,
}

/// Settings for [`grad_check`].
#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub h: f64,
    /// Relative tolerance.
    pub tol: f64,
    /// Absolute agreement floor; the check also passes when every absolute
    /// error is below it.
    pub abs_floor: f64,
    /// Relative errors are taken against `max(|analytic|, |numeric|, denom_floor)`.
    pub denom_floor: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            h: 1e-5,
            tol: 1e-6,
            abs_floor: 1e-10,
            denom_floor: 1e-6,
        }
    }
}

/// Compares the reverse-mode gradient of a scalar function against central
/// differences.
///
/// `build` receives a fresh tape and the input as an `n×1` parameter and
/// returns the scalar output. `exclude(i, x)` marks coordinates where finite
/// differences are meaningless, e.g. inputs that sit next to a firing
/// threshold.
pub fn grad_check<F, X>(
    build: F,
    x: &[f64],
    opts: GradCheckOptions,
    exclude: X,
) -> Result<GradReport>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
    X: Fn(usize, &[f64]) -> bool,
{
    if opts.h <= 0.0 {
        return Err(Error::contract("grad_check", "step must be positive"));
    }
    let eval = |xs: &[f64]| -> Result<f64> {
        let mut tape = Tape::new();
        let input = tape.param(Tensor::column(xs));
        let out = build(&mut tape, input)?;
        Ok(tape.scalar(out))
    };

    let mut tape = Tape::new();
    let input = tape.param(Tensor::column(x));
    let out = build(&mut tape, input)?;
    let grads = tape.backward(out)?;
    let analytic = grads.get(input).cloned().unwrap_or_else(|| Tensor::zeros(x.len(), 1));

    let mut report = GradReport {
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        worst_input_index: 0,
        passed: true,
        excluded: Vec::new(),
        checked: 0,
    };
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        if exclude(i, x) {
            report.excluded.push(i);
            continue;
        }
        probe[i] = x[i] + opts.h;
        let fp = eval(&probe)?;
        probe[i] = x[i] - opts.h;
        let fm = eval(&probe)?;
        probe[i] = x[i];
        let numeric = (fp - fm) / (2.0 * opts.h);
        let a = analytic.data()[i];
        let abs_err = (a - numeric).abs();
        let rel_err = abs_err / a.abs().max(numeric.abs()).max(opts.denom_floor);
        report.max_abs_err = report.max_abs_err.max(abs_err);
        if rel_err > report.max_rel_err {
            report.max_rel_err = rel_err;
            report.worst_input_index = i;
        }
        report.checked += 1;
    }
    if report.checked == 0 {
        return Err(Error::Inconclusive(x.len()));
    }
    report.passed = report.max_rel_err <= opts.tol || report.max_abs_err <= opts.abs_floor;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use core::cell::Cell;

    fn scalar_fd(f: impl Fn(f64) -> f64, x: f64, h: f64) -> f64 {
        (f(x + h) - f(x - h)) / (2.0 * h)
    }

    #[test]
    fn tanh_and_exp_at_zero() {
        let mut t = Tape::new();
        let x = t.param_scalar(0.0);
        let y = t.tanh(x).unwrap();
        assert_eq!(t.scalar(y), 0.0);
        let g = t.backward(y).unwrap();
        assert_eq!(g.scalar(x), 1.0);

        let mut t = Tape::new();
        let x = t.param_scalar(0.0);
        let y = t.exp(x).unwrap();
        assert_eq!(t.scalar(y), 1.0);
        assert_eq!(t.backward(y).unwrap().scalar(x), 1.0);
    }

    #[test]
    fn square_matches_central_difference() {
        let mut t = Tape::new();
        let x = t.param_scalar(3.0);
        let y = t.mul(x, x).unwrap();
        let g = t.backward(y).unwrap().scalar(x);
        let fd = scalar_fd(|v| v * v, 3.0, 1e-5);
        assert_eq!(g, 6.0);
        assert!((g - fd).abs() < 1e-8);
    }

    #[test]
    fn product_rule() {
        let mut t = Tape::new();
        let x = t.param_scalar(2.0);
        let y = t.param_scalar(3.0);
        let f = t.mul(x, y).unwrap();
        let g = t.backward(f).unwrap();
        assert_eq!((g.scalar(x), g.scalar(y)), (3.0, 2.0));
    }

    #[test]
    fn constant_root_gives_zero_gradients() {
        let mut t = Tape::new();
        let x = t.param(Tensor::column(&[1.0, 2.0]));
        let c = t.constant_scalar(4.0);
        let g = t.backward(c).unwrap();
        assert_eq!(g.get(x).unwrap(), &Tensor::zeros(2, 1));
    }

    #[test]
    fn non_scalar_root_is_rejected() {
        let mut t = Tape::new();
        let x = t.param(Tensor::column(&[1.0, 2.0]));
        assert!(matches!(t.backward(x), Err(Error::Contract { .. })));
    }

    #[test]
    fn shape_mismatch_and_zero_division() {
        let mut t = Tape::new();
        let a = t.param(Tensor::zeros(2, 3));
        let b = t.param(Tensor::zeros(3, 2));
        assert!(matches!(t.add(a, b), Err(Error::Contract { op: "add", .. })));
        assert!(t.matmul(a, b).is_ok());
        assert!(matches!(t.matmul(a, a), Err(Error::Contract { .. })));
        let one = t.constant_scalar(1.0);
        let zero = t.constant_scalar(0.0);
        assert!(matches!(t.div(one, zero), Err(Error::Contract { op: "div", .. })));
    }

    #[test]
    fn non_finite_names_the_op() {
        let mut t = Tape::new();
        let x = t.param_scalar(1000.0);
        match t.exp(x) {
            Err(Error::NonFinite { op }) => assert_eq!(op, "exp"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn scalar_broadcast_reduces_gradient() {
        let mut t = Tape::new();
        let s = t.param_scalar(2.0);
        let v = t.param(Tensor::column(&[1.0, 2.0, 3.0]));
        let p = t.mul(s, v).unwrap();
        let y = t.sum(p).unwrap();
        let g = t.backward(y).unwrap();
        assert_eq!(g.scalar(s), 6.0);
        assert_eq!(g.get(v).unwrap().data(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn exclusive_cumsum_segments() {
        let mut t = Tape::new();
        let x = t.param(Tensor::column(&[1.0, 2.0, 3.0, 4.0]));
        let c = t.exclusive_cumsum(x, 2).unwrap();
        assert_eq!(t.value(c).data(), &[0.0, 1.0, 0.0, 3.0]);
        let w = t.constant(Tensor::column(&[1.0, 10.0, 100.0, 1000.0]));
        let p = t.dot(c, w).unwrap();
        let g = t.backward(p).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[10.0, 0.0, 1000.0, 0.0]);
    }

    #[test]
    fn custom_identity_matches_pass_through() {
        let mut t = Tape::new();
        let id = t.register_custom_op(
            "identity",
            1,
            Rc::new(|xs: &[&Tensor]| Ok(xs[0].clone())),
            Rc::new(|_: &[&Tensor], _: &Tensor, g: &Tensor| vec![g.clone()]),
        );
        let x = t.param(Tensor::column(&[0.5, -1.5]));
        let y = t.custom(id, &[x]).unwrap();
        let y2 = t.tanh(y).unwrap();
        let s = t.sum(y2).unwrap();
        let g = t.backward(s).unwrap().get(x).unwrap().clone();

        let mut t2 = Tape::new();
        let x2 = t2.param(Tensor::column(&[0.5, -1.5]));
        let z = t2.tanh(x2).unwrap();
        let s2 = t2.sum(z).unwrap();
        assert_eq!(&g, t2.backward(s2).unwrap().get(x2).unwrap());
    }

    #[test]
    fn custom_zero_backward_blocks_gradient() {
        let mut t = Tape::new();
        let id = t.register_custom_op(
            "stop",
            1,
            Rc::new(|xs: &[&Tensor]| Ok(xs[0].clone())),
            Rc::new(|xs: &[&Tensor], _: &Tensor, _: &Tensor| {
                vec![Tensor::zeros(xs[0].rows(), xs[0].cols())]
            }),
        );
        let x = t.param_scalar(1.3);
        let e = t.exp(x).unwrap();
        let y = t.custom(id, &[e]).unwrap();
        let z = t.mul(y, y).unwrap();
        assert_eq!(t.backward(z).unwrap().scalar(x), 0.0);
    }

    #[test]
    fn custom_backward_called_once_per_node() {
        let calls = Rc::new(Cell::new(0usize));
        let counter = Rc::clone(&calls);
        let mut t = Tape::new();
        let id = t.register_custom_op(
            "counted",
            1,
            Rc::new(|xs: &[&Tensor]| Ok(xs[0].clone())),
            Rc::new(move |_: &[&Tensor], _: &Tensor, g: &Tensor| {
                counter.set(counter.get() + 1);
                vec![g.clone()]
            }),
        );
        let x = t.param_scalar(2.0);
        let y = t.custom(id, &[x]).unwrap();
        // y feeds three consumers; its backward still runs once.
        let a = t.mul(y, y).unwrap();
        let b = t.add(a, y).unwrap();
        t.backward(b).unwrap();
        assert_eq!(calls.get(), 1);
    }

    #[test]
    fn custom_arity_mismatch() {
        let mut t = Tape::new();
        let id = t.register_custom_op(
            "bad",
            2,
            Rc::new(|xs: &[&Tensor]| Ok(xs[0].clone())),
            Rc::new(|_: &[&Tensor], _: &Tensor, g: &Tensor| vec![g.clone()]),
        );
        let x = t.param_scalar(1.0);
        assert!(matches!(t.custom(id, &[x]), Err(Error::Arity { expected: 2, got: 1, .. })));
        let y = t.param_scalar(1.0);
        let z = t.custom(id, &[x, y]).unwrap();
        assert!(matches!(t.backward(z), Err(Error::Arity { expected: 2, got: 1, .. })));
    }

    #[test]
    fn grad_check_sum_of_squares() {
        let report = grad_check(
            |t, x| {
                let sq = t.mul(x, x)?;
                t.sum(sq)
            },
            &[1.0, 2.0, 3.0],
            GradCheckOptions::default(),
            |_, _| false,
        )
        .unwrap();
        assert!(report.passed);
        assert!(report.max_rel_err < 1e-7, "{report:?}");
    }

    #[test]
    fn grad_check_constant() {
        let report = grad_check(
            |t, _| Ok(t.constant_scalar(5.0)),
            &[1.0, 2.0],
            GradCheckOptions::default(),
            |_, _| false,
        )
        .unwrap();
        assert!(report.passed);
        assert_eq!(report.max_abs_err, 0.0);
    }

    #[test]
    fn grad_check_all_excluded_is_inconclusive() {
        let r = grad_check(
            |t, x| t.sum(x),
            &[1.0],
            GradCheckOptions::default(),
            |_, _| true,
        );
        assert_eq!(r, Err(Error::Inconclusive(1)));
    }
}
