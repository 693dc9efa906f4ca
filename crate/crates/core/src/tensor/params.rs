use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

use super::{Real, Result, Tensor, TensorError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Parameter<T> {
    pub name: String,
    pub value: Tensor<T>,
    /// Frozen parameters take part in the forward pass but never receive updates.
    pub frozen: bool,
}

/// Named learnable tensors of one model.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    params: Vec<Parameter<T>>,
    by_name: BTreeMap<String, ParamId>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            params: Vec::new(),
            by_name: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(TensorError::DuplicateParameter(name));
        }
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        self.params.push(Parameter {
            name,
            value,
            frozen: false,
        });
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn by_name(&self, name: &str) -> Result<&Parameter<T>> {
        self.id(name)
            .map(|id| self.get(id))
            .ok_or_else(|| TensorError::UnknownParameter(name.to_string()))
    }

    pub fn freeze(&mut self, id: ParamId) {
        self.params[id.0].frozen = true;
    }

    /// Parameters in lexicographic name order.
    pub fn iter_sorted(&self) -> impl Iterator<Item = (ParamId, &Parameter<T>)> {
        self.by_name.values().map(|&id| (id, &self.params[id.0]))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.by_name.keys().map(String::as_str)
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Copies of all parameter values, indexed by id.
    pub fn snapshot(&self) -> Vec<Tensor<T>> {
        self.params.iter().map(|p| p.value.clone()).collect()
    }

    pub fn restore(&mut self, snapshot: &[Tensor<T>]) {
        for (p, v) in self.params.iter_mut().zip(snapshot) {
            p.value = v.clone();
        }
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Parameter {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    frozen: p.frozen,
                })
                .collect(),
            by_name: self.by_name.clone(),
        }
    }
}

/// Per-parameter gradient buffers, indexed by [`ParamId`].
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients<T> {
    slots: Vec<Option<Vec<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn zeros_like(store: &ParamStore<T>) -> Self {
        Gradients {
            slots: vec![None; store.len()],
        }
    }

    pub(crate) fn with_len(n: usize) -> Self {
        Gradients { slots: vec![None; n] }
    }

    pub fn get(&self, id: ParamId) -> Option<&[T]> {
        self.slots.get(id.0).and_then(|s| s.as_deref())
    }

    pub(crate) fn accumulate(&mut self, id: ParamId, grad: &[T]) {
        if self.slots.len() <= id.0 {
            self.slots.resize(id.0 + 1, None);
        }
        match &mut self.slots[id.0] {
            Some(acc) => acc.iter_mut().zip(grad).for_each(|(a, g)| *a = *a + *g),
            slot @ None => *slot = Some(grad.to_vec()),
        }
    }

    /// Adds another gradient set in place.
    pub fn add(&mut self, other: &Gradients<T>) {
        for (i, slot) in other.slots.iter().enumerate() {
            if let Some(g) = slot {
                self.accumulate(ParamId(i), g);
            }
        }
    }

    pub fn scale(&mut self, factor: T) {
        for g in self.slots.iter_mut().flatten() {
            g.iter_mut().for_each(|x| *x = *x * factor);
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.slots
            .iter()
            .flatten()
            .flat_map(|g| g.iter())
            .map(|x| x.abs().f64())
            .fold(0.0, f64::max)
    }
}

/// Deterministic initializer: every parameter draws from its own RNG seeded by
/// the model seed and the parameter name, so values do not depend on
/// construction order.
#[derive(Clone, Copy, Debug)]
pub struct ParamInit {
    pub seed: u64,
}

impl ParamInit {
    pub fn new(seed: u64) -> Self {
        ParamInit { seed }
    }

    fn rng(&self, name: &str) -> ChaCha8Rng {
        // FNV-1a
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in name.bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        ChaCha8Rng::seed_from_u64(h ^ self.seed.rotate_left(17))
    }

    /// Glorot-uniform matrix `fan_in x fan_out`.
    pub fn xavier<T: Real>(&self, name: &str, fan_in: usize, fan_out: usize) -> Tensor<T> {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        self.uniform(name, &[fan_in, fan_out], bound)
    }

    pub fn uniform<T: Real>(&self, name: &str, shape: &[usize], bound: f64) -> Tensor<T> {
        let mut rng = self.rng(name);
        let dist = Uniform::new_inclusive(-bound, bound).expect("valid bound");
        let n = shape.iter().product();
        let data = (0..n).map(|_| T::of(dist.sample(&mut rng))).collect();
        Tensor::new(shape.to_vec(), data).expect("shape matches")
    }

    pub fn normal<T: Real>(&self, name: &str, shape: &[usize], std: f64) -> Tensor<T> {
        let mut rng = self.rng(name);
        let dist = Normal::new(0.0, std).expect("valid std");
        let n = shape.iter().product();
        let data = (0..n).map(|_| T::of(dist.sample(&mut rng))).collect();
        Tensor::new(shape.to_vec(), data).expect("shape matches")
    }
}

/// Stochastic gradient descent with optional momentum.
#[derive(Clone, Debug)]
pub struct Sgd<T> {
    pub lr: f64,
    pub momentum: f64,
    velocity: Vec<Option<Vec<T>>>,
}

impl<T: Real> Sgd<T> {
    pub fn new(lr: f64, momentum: f64) -> Self {
        Sgd {
            lr,
            momentum,
            velocity: Vec::new(),
        }
    }

    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &Gradients<T>) {
        if self.velocity.len() < store.len() {
            self.velocity.resize(store.len(), None);
        }
        let lr = T::of(self.lr);
        let mu = T::of(self.momentum);
        for (i, param) in store.params.iter_mut().enumerate() {
            if param.frozen {
                continue;
            }
            let Some(g) = grads.get(ParamId(i)) else {
                continue;
            };
            let data = param.value.data_mut();
            if self.momentum == 0.0 {
                data.iter_mut().zip(g).for_each(|(w, g)| *w = *w - lr * *g);
            } else {
                let v = self.velocity[i].get_or_insert_with(|| vec![T::zero(); g.len()]);
                for ((w, v), g) in data.iter_mut().zip(v.iter_mut()).zip(g) {
                    *v = mu * *v + *g;
                    *w = *w - lr * *v;
                }
            }
        }
    }
}
