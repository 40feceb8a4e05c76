//! Named parameter storage and its binding onto a tape.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Index of a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered, named collection of learnable tensors. Insertion order defines
/// [`ParamId`]s, so two stores built by the same constructor line up.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<E = f32> {
    names: Vec<String>,
    values: Vec<Tensor<E>>,
}

impl<E: Element> Default for ParamStore<E> {
    fn default() -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
        }
    }
}

impl<E: Element> ParamStore<E> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<E>) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<E> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<E> {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<E>)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    /// Total number of learnable scalars.
    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    pub fn cast<F: Element>(&self) -> ParamStore<F> {
        ParamStore {
            names: self.names.clone(),
            values: self.values.iter().map(Tensor::cast).collect(),
        }
    }

    /// Replaces a value, keeping its shape.
    pub fn set(&mut self, id: ParamId, value: Tensor<E>) -> Result<()> {
        if value.shape() != self.values[id.0].shape() {
            return Err(Error::Dimension(format!(
                "parameter {} has shape {:?}, got {:?}",
                self.names[id.0],
                self.values[id.0].shape(),
                value.shape()
            )));
        }
        self.values[id.0] = value;
        Ok(())
    }

    /// Records every parameter as a leaf on `tape`.
    pub fn bind(&self, tape: &mut Tape<E>, requires_grad: bool) -> Bound {
        Bound {
            vars: self
                .values
                .iter()
                .map(|v| tape.leaf(v.clone(), requires_grad))
                .collect(),
        }
    }
}

/// Tape handles for each parameter of a store.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    /// Extracts per-parameter gradients in store order; parameters that did
    /// not influence the loss get zeros.
    pub fn collect_grads<E: Element>(
        &self,
        grads: &mut Gradients<E>,
        store: &ParamStore<E>,
    ) -> Vec<Tensor<E>> {
        self.vars
            .iter()
            .zip(&store.values)
            .map(|(&v, p)| grads.take(v).unwrap_or_else(|| Tensor::zeros(p.shape())))
            .collect()
    }
}

/// Weight initialiser: normal with the given std truncated at ±2σ; biases
/// and norms are set explicitly by the caller.
pub struct Init<'r, R: Rng> {
    pub rng: &'r mut R,
    pub std: f64,
}

impl<R: Rng> Init<'_, R> {
    pub fn truncated_normal(&mut self, shape: &[usize]) -> Tensor<f32> {
        let normal = Normal::new(0.0, self.std).expect("std must be finite and non-negative");
        let bound = 2.0 * self.std;
        let rng = &mut *self.rng;
        Tensor::from_fn(shape, |_| loop {
            let v: f64 = normal.sample(rng);
            if v.abs() <= bound {
                break v as f32;
            }
        })
    }
}
