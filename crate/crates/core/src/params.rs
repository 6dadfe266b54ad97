//! Named parameter storage with stable insertion order.

use std::collections::HashMap;
use std::hash::{Hash, Hasher};

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered collection of named tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts a tensor; panics on duplicate names.
    pub fn insert(&mut self, name: &str, tensor: Tensor) -> ParamId {
        assert!(
            !self.index.contains_key(name),
            "duplicate parameter name {name}"
        );
        self.index.insert(name.to_string(), self.names.len());
        self.names.push(name.to_string());
        self.tensors.push(tensor);
        ParamId(self.names.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.names.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    pub fn ids_with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = ParamId> + 'a {
        self.iter()
            .filter(move |(_, n, _)| n.starts_with(prefix))
            .map(|(id, _, _)| id)
    }

    pub fn num_values(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Hash of the names and exact bit patterns of every tensor whose name
    /// starts with `prefix`.
    pub fn checksum(&self, prefix: &str) -> u64 {
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for (_, name, t) in self.iter().filter(|(_, n, _)| n.starts_with(prefix)) {
            name.hash(&mut h);
            t.shape().hash(&mut h);
            for v in t.data() {
                v.to_bits().hash(&mut h);
            }
        }
        h.finish()
    }
}

/// Seeded initializer: weights uniform in `±1/sqrt(fan_in)`.
pub struct Initializer {
    rng: ChaCha8Rng,
}

impl Initializer {
    pub fn new(rng: ChaCha8Rng) -> Self {
        Self { rng }
    }

    pub fn uniform(&mut self, shape: Vec<usize>, bound: f64) -> Tensor {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| self.rng.gen_range(-bound..=bound)).collect();
        Tensor::new(shape, data)
    }

    /// `[fan_in, fan_out]` weight and `[1, fan_out]` bias.
    pub fn linear(&mut self, fan_in: usize, fan_out: usize) -> (Tensor, Tensor) {
        let bound = 1.0 / (fan_in as f64).sqrt();
        (
            self.uniform(vec![fan_in, fan_out], bound),
            self.uniform(vec![1, fan_out], bound),
        )
    }

    /// Adds `<name>.weight` and `<name>.bias` to the store.
    pub fn add_linear(
        &mut self,
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
    ) -> Linear {
        let (w, b) = self.linear(fan_in, fan_out);
        Linear {
            weight: store.insert(&format!("{name}.weight"), w),
            bias: store.insert(&format!("{name}.bias"), b),
        }
    }

    /// Adds `<name>.gain` (ones) and `<name>.bias` (zeros).
    pub fn add_layer_norm(&mut self, store: &mut ParamStore, name: &str, dim: usize) -> LayerNormParams {
        LayerNormParams {
            gain: store.insert(&format!("{name}.gain"), Tensor::filled(vec![1, dim], 1.0)),
            bias: store.insert(&format!("{name}.bias"), Tensor::zeros(vec![1, dim])),
        }
    }
}

/// Handles of an affine map `x W + b`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn forward(
        &self,
        g: &mut crate::autograd::Graph,
        store: &ParamStore,
        x: crate::autograd::NodeId,
    ) -> crate::autograd::NodeId {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        let xw = g.matmul(x, w);
        g.add_row(xw, b)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerNormParams {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNormParams {
    pub fn forward(
        &self,
        g: &mut crate::autograd::Graph,
        store: &ParamStore,
        x: crate::autograd::NodeId,
    ) -> crate::autograd::NodeId {
        let gain = g.param(store, self.gain);
        let bias = g.param(store, self.bias);
        g.layer_norm(x, gain, bias)
    }
}
