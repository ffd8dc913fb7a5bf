//! Flat named parameter storage.
//!
//! All learned tensors of a model live in one [`ParamStore`]; typed parameter
//! structs hold [`ParamId`] handles into it. The flat layout gives the
//! optimizer, checkpointing, and the finite-difference harness one uniform
//! view of every parameter.

use rand::Rng;

use crate::error::{MuseError, Result};
use crate::tensor::{Elem, Tape, Tensor, Var};

/// Handle of one named parameter inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

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

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(
            !self.names.contains(&name),
            "duplicate parameter name {name}"
        );
        self.names.push(name);
        self.tensors.push(tensor.with_grad());
        ParamId(self.tensors.len() - 1)
    }

    /// Matrix with entries drawn uniformly from the Xavier/Glorot range.
    pub fn insert_xavier(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        rng: &mut impl Rng,
    ) -> ParamId {
        let bound = (6.0 / (rows + cols) as Elem).sqrt();
        let data: Vec<Elem> = (0..rows * cols).map(|_| rng.gen_range(-bound..bound)).collect();
        self.insert(name, Tensor { shape: vec![rows, cols], data, requires_grad: true, grad: None })
    }

    /// Tensor with entries drawn uniformly from `(-bound, bound)`.
    pub fn insert_uniform(
        &mut self,
        name: impl Into<String>,
        shape: Vec<usize>,
        bound: Elem,
        rng: &mut impl Rng,
    ) -> ParamId {
        let n: usize = shape.iter().product();
        let data: Vec<Elem> = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
        self.insert(name, Tensor { shape, data, requires_grad: true, grad: None })
    }

    pub fn insert_zeros(&mut self, name: impl Into<String>, shape: Vec<usize>) -> ParamId {
        self.insert(name, Tensor::zeros(shape))
    }

    pub fn insert_ones(&mut self, name: impl Into<String>, shape: Vec<usize>) -> ParamId {
        let n: usize = shape.iter().product();
        self.insert(
            name,
            Tensor { shape, data: vec![1.0; n], requires_grad: true, grad: None },
        )
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn total_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.numel()).sum()
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

    pub fn data(&self, id: ParamId) -> &[Elem] {
        &self.tensors[id.0].data
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(|n| n.as_str()).zip(self.tensors.iter())
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    /// Register every parameter as a leaf on `tape`. The returned binding maps
    /// [`ParamId`]s to tape [`Var`]s for this pass.
    pub fn bind(&self, tape: &mut Tape) -> Binding {
        let vars = self.tensors.iter().map(|t| tape.leaf(t)).collect();
        Binding { vars }
    }

    /// Move gradients from a backward pass into each tensor's `grad` field,
    /// accumulating with anything already there.
    pub fn absorb_grads(&mut self, binding: &Binding, grads: &crate::tensor::Grads) {
        for (i, tensor) in self.tensors.iter_mut().enumerate() {
            let g = grads.of(binding.vars[i]);
            match &mut tensor.grad {
                Some(acc) => {
                    for (a, b) in acc.iter_mut().zip(&g) {
                        *a += b;
                    }
                }
                None => tensor.grad = Some(g),
            }
        }
    }

    pub fn zero_grads(&mut self) {
        for t in &mut self.tensors {
            t.grad = None;
        }
    }

    /// Fail with the offending parameter's name if any gradient is non-finite.
    pub fn check_finite_grads(&self) -> Result<()> {
        for (name, t) in self.iter() {
            if let Some(g) = &t.grad {
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(MuseError::Numeric(format!(
                        "non-finite gradient in parameter {name}"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Per-pass map from [`ParamId`] to tape [`Var`].
pub struct Binding {
    vars: Vec<Var>,
}

impl Binding {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }
}
