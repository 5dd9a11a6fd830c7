//! Named trainable parameter storage shared across episode tapes.

use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tensor::Tensor;

/// Handle into a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    #[serde(skip)]
    pub grad: Vec<f64>,
}

/// Owns every trainable tensor of the model, keyed by registration order.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ParamStore {
    params: Vec<Param>,
    #[serde(skip)]
    by_name: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            !self.by_name.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let grad = vec![0.0; value.len()];
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        self.params.push(Param { name, value, grad });
        id
    }

    /// Uniform(-a, a) initialized matrix.
    pub fn register_uniform<R: Rng>(
        &mut self,
        name: impl Into<String>,
        shape: Vec<usize>,
        bound: f64,
        rng: &mut R,
    ) -> ParamId {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
        self.register(name, Tensor::new(shape, data))
    }

    pub fn register_zeros(&mut self, name: impl Into<String>, shape: Vec<usize>) -> ParamId {
        let t = Tensor::zeros(shape);
        self.register(name, t)
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn lookup(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            if p.grad.len() != p.value.len() {
                p.grad = vec![0.0; p.value.len()];
            } else {
                p.grad.iter_mut().for_each(|g| *g = 0.0);
            }
        }
    }

    /// Rebuild the name index and grad buffers after deserialization.
    pub fn rebuild_index(&mut self) {
        self.by_name = self
            .params
            .iter()
            .enumerate()
            .map(|(i, p)| (p.name.clone(), ParamId(i)))
            .collect();
        for p in &mut self.params {
            p.grad = vec![0.0; p.value.len()];
        }
    }
}
