use std::collections::HashMap;

use rand::Rng;

use super::Tensor;
use crate::scalar::Scalar;

/// Index of a parameter tensor inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Coarse grouping used by optimizers, ablations and per-group gradient checks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamGroup {
    TokenEmbedding,
    ImageProjection,
    BaseEncoder,
    QueryHead,
    KeyHead,
    Gate,
    Perceiver,
    Fusion,
    Decoder,
    /// Ad-hoc parameters created by tests and tools.
    Other,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 10] = [
        ParamGroup::TokenEmbedding,
        ParamGroup::ImageProjection,
        ParamGroup::BaseEncoder,
        ParamGroup::QueryHead,
        ParamGroup::KeyHead,
        ParamGroup::Gate,
        ParamGroup::Perceiver,
        ParamGroup::Fusion,
        ParamGroup::Decoder,
        ParamGroup::Other,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ParamGroup::TokenEmbedding => "token_embedding",
            ParamGroup::ImageProjection => "image_projection",
            ParamGroup::BaseEncoder => "base_encoder",
            ParamGroup::QueryHead => "query_head",
            ParamGroup::KeyHead => "key_head",
            ParamGroup::Gate => "gate",
            ParamGroup::Perceiver => "perceiver",
            ParamGroup::Fusion => "fusion",
            ParamGroup::Decoder => "decoder",
            ParamGroup::Other => "other",
        }
    }
}

#[derive(Clone, Debug)]
struct Slot<T> {
    name: String,
    group: ParamGroup,
    tensor: Tensor<T>,
}

/// Owns every learnable tensor of a model.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    slots: Vec<Slot<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { slots: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, group: ParamGroup, tensor: Tensor<T>) -> ParamId {
        let id = ParamId(self.slots.len());
        self.slots.push(Slot {
            name: name.into(),
            group,
            tensor: tensor.with_requires_grad(true),
        });
        id
    }

    /// Registers a tensor drawn from `uniform(-bound, bound)`.
    pub fn add_uniform<R: Rng>(
        &mut self,
        name: impl Into<String>,
        group: ParamGroup,
        shape: &[usize],
        bound: f64,
        rng: &mut R,
    ) -> ParamId {
        self.add(name, group, Tensor::uniform(shape.to_vec(), bound, rng))
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.slots[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.slots[id.0].tensor
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.slots[id.0].name
    }

    pub fn group(&self, id: ParamId) -> ParamGroup {
        self.slots[id.0].group
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.slots.len()).map(ParamId)
    }

    pub fn ids_in(&self, group: ParamGroup) -> Vec<ParamId> {
        self.ids().filter(|id| self.group(*id) == group).collect()
    }

    pub fn num_scalars(&self) -> usize {
        self.slots.iter().map(|s| s.tensor.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.slots.iter().all(|s| s.tensor.all_finite())
    }

    /// Adds `grads` into each tensor's `grad` buffer.
    pub fn accumulate(&mut self, grads: &Gradients<T>) {
        for (id, g) in grads.iter() {
            let slot = &mut self.slots[id.0];
            let buf = slot
                .tensor
                .grad
                .get_or_insert_with(|| vec![T::zero(); g.len()]);
            for (b, v) in buf.iter_mut().zip(g.data()) {
                *b += *v;
            }
        }
    }

    pub fn zero_grad(&mut self) {
        for slot in &mut self.slots {
            slot.tensor.grad = None;
        }
    }
}

/// Gradient map produced by [`Graph::backward`](super::Graph::backward).
///
/// Parameters that were used in the graph but sit on no path to the loss
/// map to an all-zero tensor. Parameters never touched by the graph are absent.
#[derive(Clone, Debug, Default)]
pub struct Gradients<T> {
    params: HashMap<ParamId, Tensor<T>>,
    leaves: HashMap<usize, Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub(crate) fn new() -> Self {
        Self {
            params: HashMap::new(),
            leaves: HashMap::new(),
        }
    }

    pub(crate) fn insert_param(&mut self, id: ParamId, g: Tensor<T>) {
        self.params.insert(id, g);
    }

    pub(crate) fn insert_leaf(&mut self, node: usize, g: Tensor<T>) {
        self.leaves.insert(node, g);
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.params.get(&id)
    }

    /// Gradient for a leaf created with [`Graph::leaf`](super::Graph::leaf).
    pub fn var(&self, v: super::Var) -> Option<&Tensor<T>> {
        self.leaves.get(&v.index())
    }

    /// Parameter gradient, or zeros shaped like the parameter when absent.
    pub fn param_or_zeros(&self, store: &ParamStore<T>, id: ParamId) -> Tensor<T> {
        self.params
            .get(&id)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(store.get(id).shape().to_vec()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor<T>)> {
        self.params.iter().map(|(k, v)| (*k, v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Largest absolute gradient entry over all parameters in `group`.
    pub fn group_max_abs(&self, store: &ParamStore<T>, group: ParamGroup) -> T {
        self.params
            .iter()
            .filter(|(id, _)| store.group(**id) == group)
            .flat_map(|(_, g)| g.data().iter().map(|v| v.abs()))
            .fold(T::zero(), T::max)
    }

    /// In-place `self += scale * other`.
    pub fn add_scaled(&mut self, other: &Gradients<T>, scale: T) {
        for (id, g) in &other.params {
            match self.params.get_mut(id) {
                Some(mine) => {
                    for (a, b) in mine.data_mut().iter_mut().zip(g.data()) {
                        *a += scale * *b;
                    }
                }
                None => {
                    let mut t = g.clone();
                    t.data_mut().iter_mut().for_each(|v| *v *= scale);
                    self.params.insert(*id, t);
                }
            }
        }
    }
}
