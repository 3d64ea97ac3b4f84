//! Named parameter tensors and their binding onto a [`Graph`].

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::graph::{Gradients, Graph, Var};
use crate::tensor::{Real, Tensor};

/// Parameters keyed by dotted path, iterated in lexicographic order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T: Real> {
    tensors: BTreeMap<String, Tensor<T>>,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            tensors: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.tensors.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_elements(&self) -> usize {
        self.tensors.values().map(|t| t.len()).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    /// Zero tensors with the same names and shapes.
    pub fn zeros_like(&self) -> ParamStore<T> {
        ParamStore {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), Tensor::zeros(v.shape())))
                .collect(),
        }
    }

    /// Every tensor as a trainable leaf of `g`.
    pub fn bind<'g>(&self, g: &'g Graph<T>) -> Bound<'g, T> {
        self.bind_with(g, true)
    }

    /// Every tensor as a constant leaf of `g`.
    pub fn bind_frozen<'g>(&self, g: &'g Graph<T>) -> Bound<'g, T> {
        self.bind_with(g, false)
    }

    fn bind_with<'g>(&self, g: &'g Graph<T>, trainable: bool) -> Bound<'g, T> {
        Bound {
            graph: g,
            vars: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), g.input(v.clone(), trainable)))
                .collect(),
        }
    }
}

/// Parameters living on one graph.
pub struct Bound<'g, T: Real> {
    graph: &'g Graph<T>,
    vars: BTreeMap<String, Var<'g, T>>,
}

impl<'g, T: Real> Bound<'g, T> {
    pub fn get(&self, name: &str) -> Var<'g, T> {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("parameter `{name}` is not bound"))
    }

    pub fn graph(&self) -> &'g Graph<T> {
        self.graph
    }

    /// A constant leaf on the same graph.
    pub fn constant(&self, t: Tensor<T>) -> Var<'g, T> {
        self.graph.constant(t)
    }

    pub fn try_get(&self, name: &str) -> Option<Var<'g, T>> {
        self.vars.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var<'g, T>)> {
        self.vars.iter()
    }

    /// Gradient for every bound name (zeros where unreachable).
    pub fn gradients(&self, grads: &Gradients<T>) -> ParamStore<T> {
        ParamStore {
            tensors: self
                .vars
                .iter()
                .map(|(k, v)| (k.clone(), grads.get_or_zeros(*v)))
                .collect(),
        }
    }
}

/// Seeded weight initializer.
pub struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn normal<T: Real>(&mut self, shape: &[usize], std: f64) -> Tensor<T> {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut self.rng);
                T::lit(z * std)
            })
            .collect();
        Tensor::from_vec(shape, data)
    }

    /// He-normal for layers followed by ReLU: std = √(2 / fan_in).
    pub fn he<T: Real>(&mut self, shape: &[usize], fan_in: usize) -> Tensor<T> {
        self.normal(shape, (2.0 / fan_in as f64).sqrt())
    }

    /// Variance-preserving: std = √(1 / fan_in).
    pub fn lecun<T: Real>(&mut self, shape: &[usize], fan_in: usize) -> Tensor<T> {
        self.normal(shape, (1.0 / fan_in as f64).sqrt())
    }
}
