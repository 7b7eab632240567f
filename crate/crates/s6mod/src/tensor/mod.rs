//! Dense f64 tensors with reverse-mode automatic differentiation.
//!
//! [`Tensor`] is the plain value type used for parameters and data.
//! Computations run on a [`Tape`]: leaves are inserted with
//! [`Tape::leaf`], ops build new [`Var`] handles, and
//! [`Tape::backward`] sweeps the recorded graph once in reverse
//! topological order, accumulating gradients (`+=`) into each node.
//! The tape is rebuilt from scratch every step.

mod backward;
pub mod gradcheck;
pub(crate) mod kernels;

use std::cell::RefCell;

use crate::error::{Error, Result};
use kernels::numel;

/// Dense real array in row-major order, double precision.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if numel(&shape) != data.len() {
            return Err(Error::dim(
                "tensor",
                format!("shape {:?} does not match {} elements", shape, data.len()),
            ));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("tensor constructed with non-finite values".into()));
        }
        Ok(Tensor { shape, data, requires_grad: false, grad: None })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = numel(&shape);
        Tensor { shape, data: vec![0.0; n], requires_grad: false, grad: None }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor { shape: vec![1], data: vec![v], requires_grad: false, grad: None }
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    /// Accumulates `g` into the stored gradient, allocating it on first use.
    pub fn accumulate_grad(&mut self, g: &[f64]) -> Result<()> {
        if g.len() != self.data.len() {
            return Err(Error::dim("accumulate_grad", "gradient length mismatch"));
        }
        let grad = self.grad.get_or_insert_with(|| vec![0.0; self.data.len()]);
        for (dst, &src) in grad.iter_mut().zip(g.iter()) {
            *dst += src;
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }
}

/// One recorded operation. Parent ids always precede the node's own id,
/// so node order is a topological order of the graph.
#[derive(Debug)]
pub(crate) enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Neg(usize),
    Exp(usize),
    Log(usize),
    Sqrt(usize),
    Silu(usize),
    Softplus(usize),
    AddScalar(usize),
    MulScalar(usize, f64),
    ClampMin(usize, f64),
    Matmul { a: usize, b: usize, m: usize, k: usize, n: usize },
    Softmax { a: usize, axis: usize },
    Sum(usize),
    SumAxis { a: usize, axis: usize },
    MeanAxis { a: usize, axis: usize },
    Reshape(usize),
    Transpose2d { a: usize, rows: usize, cols: usize },
    PermuteRows { a: usize, perm: Vec<usize> },
    Get { a: usize, index: usize },
    AddN(Vec<usize>),
    /// Rows of the output are the flattened parents, in order.
    StackRows(Vec<usize>),
    /// Concatenation along axis 0; parents share trailing dims.
    ConcatRows { parents: Vec<usize>, rows: Vec<usize> },
    Conv2d { x: usize, k: usize, bias: Option<usize>, h: usize, w: usize, cin: usize, cout: usize, ks: usize },
    DwConv2d { x: usize, k: usize, h: usize, w: usize, c: usize, ks: usize },
    AvgPool2 { x: usize, h: usize, w: usize, c: usize },
    /// Selective recurrence over `l` steps; the hidden state resets
    /// every `block` steps (independent sequences laid out back to
    /// back).
    Scan { x: usize, abar: usize, bbar: usize, c_seq: usize, l: usize, d: usize, n: usize, block: usize, hidden: Vec<f64> },
}

#[derive(Debug)]
pub(crate) struct Node {
    pub(crate) shape: Vec<usize>,
    pub(crate) data: Vec<f64>,
    pub(crate) grad: Option<Vec<f64>>,
    pub(crate) requires_grad: bool,
    pub(crate) op: Op,
}

/// Dynamic computation graph, rebuilt per training step.
#[derive(Default)]
pub struct Tape {
    pub(crate) nodes: RefCell<Vec<Node>>,
}

/// Cheap copyable handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub(crate) fn push(&self, shape: Vec<usize>, data: Vec<f64>, op: Op, requires_grad: bool) -> Var<'_> {
        debug_assert_eq!(numel(&shape), data.len());
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node { shape, data, grad: None, requires_grad, op });
        Var { tape: self, id }
    }

    /// Inserts a tensor as a graph leaf, copying its values.
    pub fn leaf(&self, t: &Tensor) -> Var<'_> {
        self.push(t.shape.clone(), t.data.clone(), Op::Leaf, t.requires_grad)
    }

    /// Leaf that never receives gradient (inputs, fixed matrices).
    pub fn constant(&self, shape: Vec<usize>, data: Vec<f64>) -> Result<Var<'_>> {
        if numel(&shape) != data.len() {
            return Err(Error::dim("constant", "shape/data length mismatch"));
        }
        Ok(self.push(shape, data, Op::Leaf, false))
    }

    pub fn scalar(&self, v: f64) -> Var<'_> {
        self.push(vec![1], vec![v], Op::Leaf, false)
    }

    /// Differentiable leaf with explicit values (used by tests and the
    /// gradient checker).
    pub fn variable(&self, shape: Vec<usize>, data: Vec<f64>) -> Result<Var<'_>> {
        if numel(&shape) != data.len() {
            return Err(Error::dim("variable", "shape/data length mismatch"));
        }
        Ok(self.push(shape, data, Op::Leaf, true))
    }

    /// Elementwise sum of same-shaped vars.
    pub fn add_n<'t>(&'t self, parts: &[Var<'t>]) -> Result<Var<'t>> {
        if parts.is_empty() {
            return Err(Error::Contract("add_n needs at least one operand".into()));
        }
        let shape = parts[0].shape();
        let mut data = vec![0.0; numel(&shape)];
        let mut requires = false;
        {
            let nodes = self.nodes.borrow();
            for v in parts {
                let node = &nodes[v.id];
                if node.shape != shape {
                    return Err(Error::dim("add_n", "operands must share a shape"));
                }
                requires |= node.requires_grad;
                for (dst, &src) in data.iter_mut().zip(node.data.iter()) {
                    *dst += src;
                }
            }
        }
        let ids = parts.iter().map(|v| v.id).collect();
        Ok(self.push(shape, data, Op::AddN(ids), requires))
    }

    /// Mean of same-shaped vars.
    pub fn mean_of<'t>(&'t self, parts: &[Var<'t>]) -> Result<Var<'t>> {
        let s = self.add_n(parts)?;
        Ok(s.mul_scalar(1.0 / parts.len() as f64))
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].shape.clone()
    }

    pub fn numel(&self) -> usize {
        self.tape.nodes.borrow()[self.id].data.len()
    }

    /// Copy of the node's values.
    pub fn value(&self) -> Vec<f64> {
        self.tape.nodes.borrow()[self.id].data.clone()
    }

    /// Scalar value of a one-element node.
    pub fn item(&self) -> f64 {
        let nodes = self.tape.nodes.borrow();
        debug_assert_eq!(nodes[self.id].data.len(), 1);
        nodes[self.id].data[0]
    }

    /// Gradient accumulated by the last backward sweep, if any.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.tape.nodes.borrow()[self.id].grad.clone()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    /// Re-enters the value as a constant leaf, cutting the graph.
    pub fn detach(self) -> Var<'t> {
        let (shape, data) = {
            let nodes = self.tape.nodes.borrow();
            (nodes[self.id].shape.clone(), nodes[self.id].data.clone())
        };
        self.tape.push(shape, data, Op::Leaf, false)
    }

    fn unary(self, op: impl Fn(usize) -> Op, f: impl Fn(f64) -> f64) -> Var<'t> {
        let (shape, data, req) = {
            let nodes = self.tape.nodes.borrow();
            let node = &nodes[self.id];
            (node.shape.clone(), node.data.iter().map(|&v| f(v)).collect(), node.requires_grad)
        };
        self.tape.push(shape, data, op(self.id), req)
    }

    fn binary(self, other: Var<'t>, name: &'static str, op: impl Fn(usize, usize) -> Op, f: impl Fn(f64, f64) -> f64) -> Result<Var<'t>> {
        let (out_shape, data, req) = {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.id];
            let b = &nodes[other.id];
            let out_shape = kernels::broadcast_shape(&a.shape, &b.shape).ok_or_else(|| {
                Error::dim(name, format!("incompatible shapes {:?} and {:?}", a.shape, b.shape))
            })?;
            let data = kernels::binary_bcast(&a.data, &a.shape, &b.data, &b.shape, &out_shape, f);
            (out_shape, data, a.requires_grad || b.requires_grad)
        };
        Ok(self.tape.push(out_shape, data, op(self.id, other.id), req))
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "add", Op::Add, |a, b| a + b)
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "sub", Op::Sub, |a, b| a - b)
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "mul", Op::Mul, |a, b| a * b)
    }

    pub fn div(self, other: Var<'t>) -> Result<Var<'t>> {
        {
            let nodes = self.tape.nodes.borrow();
            if nodes[other.id].data.iter().any(|&v| v == 0.0) {
                return Err(Error::domain("div", "division by zero"));
            }
        }
        self.binary(other, "div", Op::Div, |a, b| a / b)
    }

    pub fn neg(self) -> Var<'t> {
        self.unary(Op::Neg, |v| -v)
    }

    pub fn exp(self) -> Var<'t> {
        self.unary(Op::Exp, f64::exp)
    }

    pub fn log(self) -> Result<Var<'t>> {
        {
            let nodes = self.tape.nodes.borrow();
            if nodes[self.id].data.iter().any(|&v| v <= 0.0) {
                return Err(Error::domain("log", "input must be strictly positive"));
            }
        }
        Ok(self.unary(Op::Log, f64::ln))
    }

    pub fn sqrt(self) -> Result<Var<'t>> {
        {
            let nodes = self.tape.nodes.borrow();
            if nodes[self.id].data.iter().any(|&v| v < 0.0) {
                return Err(Error::domain("sqrt", "input must be non-negative"));
            }
        }
        Ok(self.unary(Op::Sqrt, f64::sqrt))
    }

    pub fn silu(self) -> Var<'t> {
        self.unary(Op::Silu, kernels::silu)
    }

    pub fn softplus(self) -> Var<'t> {
        self.unary(Op::Softplus, kernels::softplus)
    }

    pub fn add_scalar(self, c: f64) -> Var<'t> {
        self.unary(Op::AddScalar, |v| v + c)
    }

    pub fn mul_scalar(self, c: f64) -> Var<'t> {
        self.unary(|a| Op::MulScalar(a, c), |v| v * c)
    }

    /// max(x, c) elementwise; gradient passes where x ≥ c.
    pub fn clamp_min(self, c: f64) -> Var<'t> {
        self.unary(|a| Op::ClampMin(a, c), |v| v.max(c))
    }

    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        let (m, k, n, data, req) = {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.id];
            let b = &nodes[other.id];
            if a.shape.len() != 2 || b.shape.len() != 2 {
                return Err(Error::dim("matmul", "operands must be rank-2"));
            }
            let (m, k) = (a.shape[0], a.shape[1]);
            let (k2, n) = (b.shape[0], b.shape[1]);
            if k != k2 {
                return Err(Error::dim(
                    "matmul",
                    format!("inner dimensions disagree: {:?} x {:?}", a.shape, b.shape),
                ));
            }
            let data = kernels::matmul(&a.data, &b.data, m, k, n);
            (m, k, n, data, a.requires_grad || b.requires_grad)
        };
        Ok(self.tape.push(vec![m, n], data, Op::Matmul { a: self.id, b: other.id, m, k, n }, req))
    }

    pub fn softmax(self, axis: usize) -> Result<Var<'t>> {
        let (shape, data, req) = {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.id];
            if axis >= a.shape.len() {
                return Err(Error::dim("softmax", format!("axis {axis} out of range for {:?}", a.shape)));
            }
            (a.shape.clone(), kernels::softmax(&a.data, &a.shape, axis), a.requires_grad)
        };
        Ok(self.tape.push(shape, data, Op::Softmax { a: self.id, axis }, req))
    }

    pub fn sum(self) -> Var<'t> {
        let (total, req) = {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.id];
            (a.data.iter().sum::<f64>(), a.requires_grad)
        };
        self.tape.push(vec![1], vec![total], Op::Sum(self.id), req)
    }

    pub fn mean(self) -> Var<'t> {
        let n = self.numel() as f64;
        self.sum().mul_scalar(1.0 / n)
    }

    pub fn sum_axis(self, axis: usize) -> Result<Var<'t>> {
        self.reduce_axis(axis, false)
    }

    pub fn mean_axis(self, axis: usize) -> Result<Var<'t>> {
        self.reduce_axis(axis, true)
    }

    fn reduce_axis(self, axis: usize, mean: bool) -> Result<Var<'t>> {
        let (out_shape, data, req) = {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.id];
            if axis >= a.shape.len() {
                return Err(Error::dim("reduce_axis", format!("axis {axis} out of range for {:?}", a.shape)));
            }
            let (outer, axn, inner) = kernels::lane_dims(&a.shape, axis);
            let mut out = vec![0.0; outer * inner];
            for o in 0..outer {
                for t in 0..axn {
                    let base = (o * axn + t) * inner;
                    for i in 0..inner {
                        out[o * inner + i] += a.data[base + i];
                    }
                }
            }
            if mean {
                for v in &mut out {
                    *v /= axn as f64;
                }
            }
            let mut out_shape: Vec<usize> = a.shape.clone();
            out_shape.remove(axis);
            if out_shape.is_empty() {
                out_shape.push(1);
            }
            (out_shape, out, a.requires_grad)
        };
        let op = if mean { Op::MeanAxis { a: self.id, axis } } else { Op::SumAxis { a: self.id, axis } };
        Ok(self.tape.push(out_shape, data, op, req))
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Var<'t>> {
        let (data, req) = {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.id];
            if numel(&shape) != a.data.len() {
                return Err(Error::dim(
                    "reshape",
                    format!("cannot view {:?} as {:?}", a.shape, shape),
                ));
            }
            (a.data.clone(), a.requires_grad)
        };
        Ok(self.tape.push(shape, data, Op::Reshape(self.id), req))
    }

    /// Reorders slabs along axis 0: row `t` of the result is row
    /// `perm[t]` of the input. `perm` must be a bijection.
    pub fn permute_rows(self, perm: &[usize]) -> Result<Var<'t>> {
        let (shape, data, req) = {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.id];
            let rows = *a.shape.first().ok_or_else(|| Error::dim("permute_rows", "rank-0 input"))?;
            if perm.len() != rows {
                return Err(Error::dim("permute_rows", "permutation length mismatch"));
            }
            let mut hit = vec![false; rows];
            for &p in perm {
                if p >= rows || hit[p] {
                    return Err(Error::Contract("permute_rows: not a permutation".into()));
                }
                hit[p] = true;
            }
            let row_len = a.data.len() / rows.max(1);
            let mut out = vec![0.0; a.data.len()];
            for (t, &src) in perm.iter().enumerate() {
                out[t * row_len..(t + 1) * row_len]
                    .copy_from_slice(&a.data[src * row_len..(src + 1) * row_len]);
            }
            (a.shape.clone(), out, a.requires_grad)
        };
        Ok(self.tape.push(shape, data, Op::PermuteRows { a: self.id, perm: perm.to_vec() }, req))
    }

    /// Extracts one element as a scalar node.
    pub fn get(self, index: usize) -> Result<Var<'t>> {
        let (v, req) = {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.id];
            if index >= a.data.len() {
                return Err(Error::dim("get", format!("index {index} out of bounds")));
            }
            (a.data[index], a.requires_grad)
        };
        Ok(self.tape.push(vec![1], vec![v], Op::Get { a: self.id, index }, req))
    }

    /// Same-padded stride-1 convolution; self is [h,w,cin], kernel is
    /// [ks,ks,cin,cout], bias (optional) [cout].
    pub fn conv2d(self, kernel: Var<'t>, bias: Option<Var<'t>>) -> Result<Var<'t>> {
        let (h, w, cin, cout, ks, data, req) = {
            let nodes = self.tape.nodes.borrow();
            let x = &nodes[self.id];
            let k = &nodes[kernel.id];
            if x.shape.len() != 3 || k.shape.len() != 4 {
                return Err(Error::dim("conv2d", "expected x [h,w,cin], k [ks,ks,cin,cout]"));
            }
            let (h, w, cin) = (x.shape[0], x.shape[1], x.shape[2]);
            let (ks, ks2, kcin, cout) = (k.shape[0], k.shape[1], k.shape[2], k.shape[3]);
            if ks != ks2 || kcin != cin {
                return Err(Error::dim("conv2d", "kernel shape does not match input"));
            }
            if ks % 2 == 0 {
                return Err(Error::Config("conv2d kernel size must be odd".into()));
            }
            let bias_data = match bias {
                Some(b) => {
                    let bn = &nodes[b.id];
                    if bn.shape != vec![cout] {
                        return Err(Error::dim("conv2d", "bias must be [cout]"));
                    }
                    Some(bn.data.clone())
                }
                None => None,
            };
            let data = kernels::conv2d(&x.data, &k.data, bias_data.as_deref(), h, w, cin, cout, ks);
            let mut req = x.requires_grad || k.requires_grad;
            if let Some(b) = bias {
                req |= nodes[b.id].requires_grad;
            }
            (h, w, cin, cout, ks, data, req)
        };
        Ok(self.tape.push(
            vec![h, w, cout],
            data,
            Op::Conv2d { x: self.id, k: kernel.id, bias: bias.map(|b| b.id), h, w, cin, cout, ks },
            req,
        ))
    }

    /// Depthwise same-padded convolution; self is [h,w,c], kernel [ks,ks,c].
    pub fn dwconv2d(self, kernel: Var<'t>) -> Result<Var<'t>> {
        let (h, w, c, ks, data, req) = {
            let nodes = self.tape.nodes.borrow();
            let x = &nodes[self.id];
            let k = &nodes[kernel.id];
            if x.shape.len() != 3 || k.shape.len() != 3 {
                return Err(Error::dim("dwconv2d", "expected x [h,w,c], k [ks,ks,c]"));
            }
            let (h, w, c) = (x.shape[0], x.shape[1], x.shape[2]);
            let (ks, ks2, kc) = (k.shape[0], k.shape[1], k.shape[2]);
            if ks != ks2 || kc != c {
                return Err(Error::dim("dwconv2d", "kernel shape does not match input"));
            }
            if ks % 2 == 0 {
                return Err(Error::Config("dwconv2d kernel size must be odd".into()));
            }
            let data = kernels::dwconv2d(&x.data, &k.data, h, w, c, ks);
            (h, w, c, ks, data, x.requires_grad || k.requires_grad)
        };
        Ok(self.tape.push(
            vec![h, w, c],
            data,
            Op::DwConv2d { x: self.id, k: kernel.id, h, w, c, ks },
            req,
        ))
    }

    /// 2x2 average pooling; spatial dims must be even.
    pub fn avg_pool2(self) -> Result<Var<'t>> {
        let (h, w, c, data, req) = {
            let nodes = self.tape.nodes.borrow();
            let x = &nodes[self.id];
            if x.shape.len() != 3 {
                return Err(Error::dim("avg_pool2", "expected [h,w,c]"));
            }
            let (h, w, c) = (x.shape[0], x.shape[1], x.shape[2]);
            if h % 2 != 0 || w % 2 != 0 {
                return Err(Error::dim("avg_pool2", "spatial dims must be even"));
            }
            let (oh, ow) = (h / 2, w / 2);
            let mut out = vec![0.0; oh * ow * c];
            for y in 0..oh {
                for xx in 0..ow {
                    for ci in 0..c {
                        let mut s = 0.0;
                        for dy in 0..2 {
                            for dx in 0..2 {
                                s += x.data[((2 * y + dy) * w + 2 * xx + dx) * c + ci];
                            }
                        }
                        out[(y * ow + xx) * c + ci] = s * 0.25;
                    }
                }
            }
            (h, w, c, out, x.requires_grad)
        };
        Ok(self.tape.push(vec![h / 2, w / 2, c], data, Op::AvgPool2 { x: self.id, h, w, c }, req))
    }
}
