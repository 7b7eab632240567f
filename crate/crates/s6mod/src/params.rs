//! Trainable parameter registry and the linear layer built on it.
//!
//! Components register their tensors once at construction and keep
//! [`ParamId`] handles. Each training step binds the whole store onto a
//! fresh tape ([`ParamStore::bind`]), and after backward the gradients
//! are pulled back into the tensors for the optimizer.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Handle to one named tensor in a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(usize);

#[derive(Debug)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore { names: Vec::new(), tensors: Vec::new() }
    }

    pub fn register(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            !self.names.contains(&name),
            "duplicate parameter name {name:?}"
        );
        self.names.push(name);
        self.tensors.push(tensor.with_grad());
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn tensor_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(|s| s.as_str()).zip(self.tensors.iter())
    }

    /// Looks a parameter up by name (checkpoint loading).
    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        let idx = self.names.iter().position(|n| n == name)?;
        Some(&mut self.tensors[idx])
    }

    /// Inserts every parameter as a differentiable leaf on `tape`.
    pub fn bind<'t>(&self, tape: &'t Tape) -> BoundParams<'t> {
        BoundParams { vars: self.tensors.iter().map(|t| tape.leaf(t)).collect() }
    }

    /// Pulls gradients from a bound tape back into the tensors (`+=`).
    pub fn absorb_grads(&mut self, bound: &BoundParams<'_>) -> Result<()> {
        for (tensor, var) in self.tensors.iter_mut().zip(bound.vars.iter()) {
            if let Some(g) = var.grad() {
                tensor.accumulate_grad(&g)?;
            }
        }
        Ok(())
    }

    /// Plain SGD: p ← p − lr · grad, for parameters with a gradient.
    pub fn sgd_step(&mut self, lr: f64) {
        for tensor in &mut self.tensors {
            if let Some(g) = tensor.grad() {
                let g = g.to_vec();
                for (p, gv) in tensor.data_mut().iter_mut().zip(g) {
                    *p -= lr * gv;
                }
            }
        }
    }

    pub fn zero_grad(&mut self) {
        for tensor in &mut self.tensors {
            tensor.zero_grad();
        }
    }
}

/// Per-step tape handles of every registered parameter, in
/// registration order.
pub struct BoundParams<'t> {
    vars: Vec<Var<'t>>,
}

impl<'t> BoundParams<'t> {
    /// Wraps externally created leaves (the gradient checker binds
    /// parameters itself). Order must match registration order.
    pub fn from_vars(vars: Vec<Var<'t>>) -> Self {
        BoundParams { vars }
    }

    pub fn var(&self, id: ParamId) -> Var<'t> {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var<'t>] {
        &self.vars
    }
}

/// Gaussian init with std 1/sqrt(fan_in).
pub fn kaiming(shape: Vec<usize>, fan_in: usize, rng: &mut impl Rng) -> Tensor {
    let std = 1.0 / (fan_in as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("valid std");
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| normal.sample(rng)).collect();
    Tensor::new(shape, data).expect("finite init")
}

/// Linear map `x · W + b` applied to the rows of `x`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let w = store.register(format!("{name}.w"), kaiming(vec![in_dim, out_dim], in_dim, rng));
        let b = store.register(format!("{name}.b"), Tensor::zeros(vec![out_dim]));
        Linear { w, b, in_dim, out_dim }
    }

    /// `x` is [rows,in] (or [in], treated as one row and squeezed back).
    pub fn forward<'t>(&self, p: &BoundParams<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let shape = x.shape();
        let (x2, squeeze) = match shape.len() {
            1 => (x.reshape(vec![1, shape[0]])?, true),
            2 => (x, false),
            _ => return Err(Error::dim("linear", "input must be rank 1 or 2")),
        };
        let rows = x2.shape()[0];
        let y = x2
            .matmul(p.var(self.w))?
            .add(p.var(self.b).reshape(vec![1, self.out_dim])?)?;
        if squeeze {
            y.reshape(vec![self.out_dim])
        } else {
            y.reshape(vec![rows, self.out_dim])
        }
    }
}
