//! Named trainable parameters.
//!
//! Layers declare their weights through a [`ParamBuilder`], which yields a
//! manifest of [`ParamSpec`]s. Counting parameters only needs the manifest;
//! [`ParamStore::init`] materializes it. Only what is declared here is ever
//! handed to the optimizer.

use alloc::string::String;
use alloc::vec::Vec;
use core::ops::Index;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use crate::autograd::{Tape, Var};
use crate::element::Element;
use crate::error::{Error, Result};
use crate::tensor::{numel, Tensor};
use crate::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Uniform in `[-bound, bound]`.
    Uniform { bound: f64 },
    Normal { std: f64 },
    Zeros,
}

impl Init {
    /// Uniform in `+-1/sqrt(fan_in)`, the usual default for conv/linear layers.
    pub fn fan_in(fan_in: usize) -> Self {
        Init::Uniform {
            bound: 1.0 / num_traits::Float::sqrt(fan_in as f64),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    pub fn numel(&self) -> usize {
        numel(&self.shape)
    }
}

#[derive(Debug, Default, Clone)]
pub struct ParamBuilder {
    specs: Vec<ParamSpec>,
}

impl ParamBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, shape: &[usize], init: Init) -> ParamId {
        self.specs.push(ParamSpec {
            name: name.into(),
            shape: shape.to_vec(),
            init,
        });
        ParamId(self.specs.len() - 1)
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn into_specs(self) -> Vec<ParamSpec> {
        self.specs
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Element> ParamStore<T> {
    /// Draws initial values for every spec, in manifest order.
    pub fn init(specs: &[ParamSpec], rng: &mut Rng) -> Self {
        let mut names = Vec::with_capacity(specs.len());
        let mut tensors = Vec::with_capacity(specs.len());
        for spec in specs {
            let n = spec.numel();
            let data: Vec<T> = match spec.init {
                Init::Uniform { bound } => (0..n)
                    .map(|_| T::from_f64(rng.random_range(-bound..=bound)))
                    .collect(),
                Init::Normal { std } => {
                    let normal = Normal::new(0.0, std).expect("finite std");
                    (0..n).map(|_| T::from_f64(normal.sample(rng))).collect()
                }
                Init::Zeros => alloc::vec![T::zero(); n],
            };
            names.push(spec.name.clone());
            tensors.push(Tensor::new(&spec.shape, data).expect("spec extents are positive"));
        }
        Self { names, tensors }
    }

    pub fn from_parts(names: Vec<String>, tensors: Vec<Tensor<T>>) -> Result<Self> {
        if names.len() != tensors.len() {
            return Err(Error::InvalidArgument("one name per tensor required".into()));
        }
        Ok(Self { names, tensors })
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total element count over all parameters.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    /// Copies every parameter onto `tape` as a differentiable leaf.
    pub fn bind(&self, tape: &mut Tape<T>) -> Bound {
        Bound(
            self.tensors
                .iter()
                .map(|t| tape.leaf(t.clone().with_grad()))
                .collect(),
        )
    }

    /// Copies every parameter onto `tape` as a constant (inference only).
    pub fn bind_frozen(&self, tape: &mut Tape<T>) -> Bound {
        Bound(self.tensors.iter().map(|t| tape.constant(t.clone())).collect())
    }

    /// Gradients of every parameter after `tape.backward`.
    pub fn grads(&self, tape: &Tape<T>, bound: &Bound) -> Result<Vec<Vec<T>>> {
        bound
            .0
            .iter()
            .zip(&self.names)
            .map(|(&v, name)| {
                tape.grad(v).map(<[T]>::to_vec).ok_or_else(|| {
                    Error::InvalidArgument(alloc::format!("no gradient recorded for {name}"))
                })
            })
            .collect()
    }

    pub fn cast<U: Element>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }
}

/// Tape handles of a bound [`ParamStore`], indexed by [`ParamId`].
#[derive(Debug, Clone)]
pub struct Bound(Vec<Var>);

impl Bound {
    /// Handles in manifest order, e.g. for binding parameters by hand.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self(vars)
    }

    pub fn vars(&self) -> &[Var] {
        &self.0
    }
}

impl Index<ParamId> for Bound {
    type Output = Var;

    fn index(&self, id: ParamId) -> &Var {
        &self.0[id.0]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_respects_manifest() {
        let mut b = ParamBuilder::new();
        let w = b.add("w", &[3, 4], Init::fan_in(4));
        let z = b.add("z", &[2], Init::Zeros);
        let store = ParamStore::<f32>::init(b.specs(), &mut crate::seeded_rng(1));
        assert_eq!(store.numel(), 14);
        assert_eq!(store.get(z).data(), &[0.0, 0.0]);
        assert!(store.get(w).data().iter().all(|x| x.abs() <= 0.5));
        assert_eq!(store.find("z"), Some(z));
    }

    #[test]
    fn init_is_seed_deterministic() {
        let mut b = ParamBuilder::new();
        b.add("w", &[5, 5], Init::Normal { std: 0.04 });
        let s1 = ParamStore::<f32>::init(b.specs(), &mut crate::seeded_rng(9));
        let s2 = ParamStore::<f32>::init(b.specs(), &mut crate::seeded_rng(9));
        assert_eq!(s1, s2);
    }
}
