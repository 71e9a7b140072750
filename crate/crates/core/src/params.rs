//! Named parameter storage and per-tape binding.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::tensor::{Element, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    /// Position in the owning store.
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor<f32>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, t: Tensor<f32>) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.tensors.push(t);
        ParamId(self.tensors.len() - 1)
    }

    /// Gaussian init with standard deviation `std`.
    pub fn add_normal(&mut self, name: impl Into<String>, shape: &[usize], std: f32, rng: &mut impl Rng) -> ParamId {
        let dist = Normal::new(0.0f32, std).unwrap();
        let t = Tensor::from_fn(shape.to_vec(), |_| dist.sample(rng));
        self.add(name, t)
    }

    /// `[fan_in, fan_out]` matrix with `1/sqrt(fan_in)` scale.
    pub fn add_linear(&mut self, name: impl Into<String>, fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> ParamId {
        self.add_normal(name, &[fan_in, fan_out], 1.0 / (fan_in as f32).sqrt(), rng)
    }

    pub fn add_const(&mut self, name: impl Into<String>, shape: &[usize], v: f32) -> ParamId {
        self.add(name, Tensor::full(shape.to_vec(), v))
    }

    pub fn get(&self, id: ParamId) -> &Tensor<f32> {
        &self.tensors[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<f32>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<f32>] {
        &mut self.tensors
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<f32>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Put every parameter on `tape` as a leaf.
    pub fn bind<'t, E: Element>(&self, tape: &'t Tape<E>, requires_grad: bool) -> Bound<'t, E> {
        Bound {
            vars: self
                .tensors
                .iter()
                .map(|t| tape.leaf(t.cast(), requires_grad))
                .collect(),
        }
    }
}

/// Parameters placed on one tape, indexed by [`ParamId`].
#[derive(Debug, Clone)]
pub struct Bound<'t, E: Element = f32> {
    vars: Vec<Var<'t, E>>,
}

impl<'t, E: Element> Bound<'t, E> {
    pub fn get(&self, id: ParamId) -> Var<'t, E> {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var<'t, E>] {
        &self.vars
    }
}
