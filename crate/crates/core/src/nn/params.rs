use std::collections::HashMap;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::engine::{Gradients, Scalar, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct BufferId(pub(crate) usize);

/// What a parameter is for; weight decay applies to `Weight` only.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
    NormScale,
    NormShift,
}

#[derive(Clone, Debug)]
pub struct Parameter<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    pub trainable: bool,
    pub kind: ParamKind,
}

/// Non-trainable state (normalization running statistics).
#[derive(Clone, Debug)]
pub struct Buffer<T> {
    pub name: String,
    pub value: Tensor<T>,
}

/// Owns every parameter and buffer of a model, in creation order.
///
/// Initialization draws from a ChaCha8 stream seeded at construction, so the
/// same seed and the same construction sequence give identical values in
/// either precision.
#[derive(Clone, Debug)]
pub struct ParamStore<T> {
    params: Vec<Parameter<T>>,
    buffers: Vec<Buffer<T>>,
    index: HashMap<String, usize>,
    buffer_index: HashMap<String, usize>,
    rng: ChaCha8Rng,
    grads_pending: bool,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new(seed: u64) -> Self {
        Self {
            params: Vec::new(),
            buffers: Vec::new(),
            index: HashMap::new(),
            buffer_index: HashMap::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            grads_pending: false,
        }
    }

    fn insert(&mut self, name: String, value: Tensor<T>, kind: ParamKind) -> Result<ParamId> {
        if self.index.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name {name:?}")));
        }
        let id = self.params.len();
        self.index.insert(name.clone(), id);
        let grad = Tensor::zeros(value.shape());
        self.params.push(Parameter {
            name,
            value,
            grad,
            trainable: true,
            kind,
        });
        Ok(ParamId(id))
    }

    /// Weight drawn from U(−b, b) with b = √(1/fan_in).
    pub fn weight(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        fan_in: usize,
    ) -> Result<ParamId> {
        let bound = (1.0 / fan_in.max(1) as f64).sqrt();
        let value = Tensor::from_fn(shape, |_| T::of(self.rng.gen_range(-bound..bound)));
        self.insert(name.into(), value, ParamKind::Weight)
    }

    pub fn constant(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        value: f64,
        kind: ParamKind,
    ) -> Result<ParamId> {
        self.insert(name.into(), Tensor::full(shape, T::of(value)), kind)
    }

    pub fn buffer(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<BufferId> {
        let name = name.into();
        if self.buffer_index.contains_key(&name) {
            return Err(Error::Config(format!("duplicate buffer name {name:?}")));
        }
        let id = self.buffers.len();
        self.buffer_index.insert(name.clone(), id);
        self.buffers.push(Buffer { name, value });
        Ok(BufferId(id))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn params(&self) -> &[Parameter<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Parameter<T>] {
        &mut self.params
    }

    pub fn buffers(&self) -> &[Buffer<T>] {
        &self.buffers
    }

    pub fn buffers_mut(&mut self) -> &mut [Buffer<T>] {
        &mut self.buffers
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn buffer_value(&self, id: BufferId) -> &Tensor<T> {
        &self.buffers[id.0].value
    }

    pub fn buffer_value_mut(&mut self, id: BufferId) -> &mut Tensor<T> {
        &mut self.buffers[id.0].value
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn find_buffer(&self, name: &str) -> Option<BufferId> {
        self.buffer_index.get(name).copied().map(BufferId)
    }

    /// Number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.value.numel())
            .sum()
    }

    pub fn buffer_count(&self) -> usize {
        self.buffers.iter().map(|b| b.value.numel()).sum()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().iter_mut().for_each(|g| *g = T::zero());
        }
        self.grads_pending = false;
    }

    /// Adds the tape gradients of the bound parameters (`bindings[id]`) into
    /// their `grad` buffers.
    pub fn accumulate_grads(&mut self, bindings: &[Option<Var>], grads: &Gradients<T>) {
        for (p, b) in self.params.iter_mut().zip(bindings) {
            if let (Some(v), true) = (b, p.trainable) {
                if let Some(g) = grads.get_ref(*v) {
                    p.grad.add_assign(g);
                }
            }
        }
        self.grads_pending = true;
    }

    /// True between [`ParamStore::accumulate_grads`] and the next zeroing.
    pub fn grads_pending(&self) -> bool {
        self.grads_pending
    }

    /// Same names and values in another precision.
    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Parameter {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    grad: p.grad.cast(),
                    trainable: p.trainable,
                    kind: p.kind,
                })
                .collect(),
            buffers: self
                .buffers
                .iter()
                .map(|b| Buffer {
                    name: b.name.clone(),
                    value: b.value.cast(),
                })
                .collect(),
            index: self.index.clone(),
            buffer_index: self.buffer_index.clone(),
            rng: self.rng.clone(),
            grads_pending: self.grads_pending,
        }
    }
}
