use std::collections::BTreeMap;

use rand::Rng;

use super::tensor::Tensor;
use crate::error::{DgrError, Result};

/// Index of a parameter inside its [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub tensor: Tensor,
    pub trainable: bool,
    pub grad: Tensor,
}

/// Named parameters of one model instance. Names are unique.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Parameter>,
    by_name: BTreeMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor, trainable: bool) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(DgrError::contract(format!("duplicate parameter id `{name}`")));
        }
        let idx = self.params.len();
        let grad = Tensor::zeros(tensor.shape());
        self.by_name.insert(name.clone(), idx);
        self.params.push(Parameter {
            name,
            tensor,
            trainable,
            grad,
        });
        Ok(ParamId(idx))
    }

    /// Adds a parameter initialised from `uniform(-scale, scale)`.
    pub fn add_uniform<R: Rng>(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        scale: f64,
        rng: &mut R,
    ) -> Result<ParamId> {
        let len = shape.iter().product();
        let data = (0..len).map(|_| rng.gen_range(-scale..=scale)).collect();
        self.add(name, Tensor::new(shape.to_vec(), data)?, true)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].tensor
    }

    pub fn tensor_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].tensor
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.iter().filter(|(_, p)| p.trainable).map(|(id, _)| id).collect()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// Adds `grads` into the stored gradients. Frozen parameters are skipped.
    pub fn accumulate(&mut self, grads: &Gradients) {
        for (idx, g) in grads.grads.iter().enumerate() {
            if let Some(g) = g {
                let p = &mut self.params[idx];
                if p.trainable {
                    p.grad.add_assign(g);
                }
            }
        }
    }

    pub fn num_scalars(&self, trainable_only: bool) -> usize {
        self.params
            .iter()
            .filter(|p| !trainable_only || p.trainable)
            .map(|p| p.tensor.len())
            .sum()
    }

    /// `name=norm` pairs, used for numerical-failure diagnostics.
    pub fn norms(&self) -> Vec<(String, f64)> {
        self.params.iter().map(|p| (p.name.clone(), p.tensor.norm())).collect()
    }
}

/// Gradients from one backward pass, indexed by parameter.
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    pub(crate) grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub(crate) fn with_capacity(n: usize) -> Self {
        Gradients { grads: vec![None; n] }
    }

    /// Gradient for `id`, zero-filled when the loss did not reach it.
    pub fn get(&self, store: &ParamStore, id: ParamId) -> Tensor {
        match self.grads.get(id.0) {
            Some(Some(g)) => g.clone(),
            _ => Tensor::zeros(store.tensor(id).shape()),
        }
    }

    pub fn get_ref(&self, id: ParamId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    pub(crate) fn add(&mut self, id: ParamId, g: &Tensor) {
        if self.grads.len() <= id.0 {
            self.grads.resize(id.0 + 1, None);
        }
        match &mut self.grads[id.0] {
            Some(acc) => acc.add_assign(g),
            slot @ None => *slot = Some(g.clone()),
        }
    }

    /// Adds every gradient of `other` into `self`.
    pub fn merge(&mut self, other: &Gradients) {
        for (i, g) in other.grads.iter().enumerate() {
            if let Some(g) = g {
                self.add(ParamId(i), g);
            }
        }
    }

    pub fn scale(&mut self, k: f64) {
        for g in self.grads.iter_mut().flatten() {
            g.data_mut().iter_mut().for_each(|v| *v *= k);
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.grads
            .iter()
            .flatten()
            .map(|g| g.data().iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }
}
