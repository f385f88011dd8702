use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::numeric::{Gradients, Graph, NodeId, Real, Tensor};

/// Handle into a [`ParamStore`]. Shared sub-modules hold the same id.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Owns every trainable tensor of a model, in registration order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T: Real> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { names: Vec::new(), tensors: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(tensor.with_grad(true));
        ParamId(self.tensors.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    /// Replaces all values, checking names and shapes against `self`.
    pub fn load(&mut self, named: Vec<(String, Tensor<T>)>) -> Result<()> {
        if named.len() != self.tensors.len() {
            return Err(Error::Format(format!(
                "expected {} parameter tensors, found {}",
                self.tensors.len(),
                named.len()
            )));
        }
        for (i, (name, t)) in named.into_iter().enumerate() {
            if name != self.names[i] || t.shape() != self.tensors[i].shape() {
                return Err(Error::Format(format!(
                    "parameter {i}: expected {} {:?}, found {name} {:?}",
                    self.names[i],
                    self.tensors[i].shape(),
                    t.shape()
                )));
            }
            self.tensors[i] = t.with_grad(true);
        }
        Ok(())
    }

    /// Inserts every parameter into `g` as a differentiable leaf.
    pub fn bind(&self, g: &mut Graph<T>) -> Bound {
        let nodes: Vec<NodeId> = self.tensors.iter().map(|t| g.leaf(t.clone().with_grad(true))).collect();
        Bound { detached: vec![None; nodes.len()], nodes }
    }

    /// Like [`bind`](Self::bind), but detached reads of the listed parameters
    /// see the given values instead of the live ones.
    pub fn bind_with_detached(&self, g: &mut Graph<T>, detached: Vec<(ParamId, Tensor<T>)>) -> Bound {
        let mut b = self.bind(g);
        for (id, t) in detached {
            b.detached[id.0] = Some(g.constant(t));
        }
        b
    }

    /// Inserts every parameter as a constant (inference only).
    pub fn bind_frozen(&self, g: &mut Graph<T>) -> Bound {
        let nodes: Vec<NodeId> = self.tensors.iter().map(|t| g.constant(t.clone())).collect();
        Bound { detached: vec![None; nodes.len()], nodes }
    }

    /// Per-parameter gradients in registration order.
    pub fn gradients(&self, grads: &mut Gradients<T>, bound: &Bound) -> Vec<Tensor<T>> {
        bound.nodes.iter().map(|&n| grads.take(n)).collect()
    }
}

/// Graph nodes for the parameters of one forward pass.
#[derive(Clone, Debug)]
pub struct Bound {
    nodes: Vec<NodeId>,
    detached: Vec<Option<NodeId>>,
}

impl Bound {
    pub fn node(&self, id: ParamId) -> NodeId {
        self.nodes[id.0]
    }

    /// Node used where the parameter enters without gradient.
    pub fn detached_node(&self, id: ParamId) -> NodeId {
        self.detached[id.0].unwrap_or(self.nodes[id.0])
    }
}

/// Seeded initializer for model parameters.
pub struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Init { rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn normal<T: Real>(&mut self, shape: &[usize], std: f64) -> Tensor<T> {
        let rng = &mut self.rng;
        Tensor::from_fn(shape, |_| {
            let z: f64 = StandardNormal.sample(rng);
            T::lit(z * std)
        })
    }
}
