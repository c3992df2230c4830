//! Parameter storage, layers shared by both branches, checkpoints and the optimizer.

pub mod checkpoint;
pub mod gradcheck;
mod layers;
pub mod optim;

pub use layers::{BatchNorm2d, Conv2d, ConvTranspose2x2, DepthwiseConv3x3, LayerNorm, Linear};

use std::sync::atomic::{AtomicUsize, Ordering};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{BatchStats, Gradients, Graph, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Trainable,
    /// Non-trainable state such as normalization running statistics.
    Buffer,
}

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub kind: ParamKind,
}

/// Ordered, named tensors of one network.
#[derive(Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    binds: AtomicUsize,
}

impl Clone for ParamStore {
    fn clone(&self) -> Self {
        Self {
            params: self.params.clone(),
            binds: AtomicUsize::new(0),
        }
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.push(name.into(), value, ParamKind::Trainable)
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.push(name.into(), value, ParamKind::Buffer)
    }

    fn push(&mut self, name: String, value: Tensor, kind: ParamKind) -> ParamId {
        debug_assert!(self.params.iter().all(|p| p.name != name), "duplicate parameter {name}");
        self.params.push(Param { name, value, kind });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.params.len()).map(ParamId)
    }

    pub fn param(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn param_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    /// Number of trainable scalars.
    pub fn num_trainable(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.kind == ParamKind::Trainable)
            .map(|p| p.value.len())
            .sum()
    }

    /// How many times this store has been bound into a graph.
    pub fn bind_count(&self) -> usize {
        self.binds.load(Ordering::Relaxed)
    }

    /// Enters every tensor into `g`: trainable ones as gradient leaves, buffers as constants.
    pub fn bind(&self, g: &mut Graph) -> Bound {
        self.binds.fetch_add(1, Ordering::Relaxed);
        let vars = self
            .params
            .iter()
            .map(|p| match p.kind {
                ParamKind::Trainable => g.leaf(p.value.clone()),
                ParamKind::Buffer => g.constant(p.value.clone()),
            })
            .collect();
        Bound { vars }
    }

    /// Like [`ParamStore::bind`], but everything enters as a constant.
    pub fn bind_frozen(&self, g: &mut Graph) -> Bound {
        self.binds.fetch_add(1, Ordering::Relaxed);
        let vars = self.params.iter().map(|p| g.constant(p.value.clone())).collect();
        Bound { vars }
    }
}

/// Graph handles of a bound [`ParamStore`], indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    /// Gradients for every parameter in store order (`None` where the loss does not depend on it).
    pub fn grads(&self, grads: &mut Gradients) -> Vec<Option<Tensor>> {
        self.vars.iter().map(|&v| grads.take(v)).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Debug)]
pub struct BnUpdate {
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub stats: BatchStats,
}

/// State threaded through a network forward pass.
pub struct Ctx<'a> {
    pub g: &'a mut Graph,
    pub params: &'a Bound,
    pub mode: Mode,
    pub bn_updates: Vec<BnUpdate>,
}

impl<'a> Ctx<'a> {
    pub fn new(g: &'a mut Graph, params: &'a Bound, mode: Mode) -> Self {
        Self {
            g,
            params,
            mode,
            bn_updates: Vec::new(),
        }
    }

    pub fn p(&self, id: ParamId) -> Var {
        self.params.var(id)
    }
}

/// Folds batch statistics into running statistics (unbiased variance, as in common frameworks).
pub fn apply_bn_updates(store: &mut ParamStore, updates: &[BnUpdate], momentum: f64) {
    for u in updates {
        let n = u.stats.count as f64;
        let correction = if n > 1.0 { n / (n - 1.0) } else { 1.0 };
        for (r, &m) in store.get_mut(u.running_mean).data_mut().iter_mut().zip(&u.stats.mean) {
            *r = (1.0 - momentum) * *r + momentum * m;
        }
        for (r, &v) in store.get_mut(u.running_var).data_mut().iter_mut().zip(&u.stats.var) {
            *r = (1.0 - momentum) * *r + momentum * v * correction;
        }
    }
}

/// Weight initializers.
pub mod init {
    use super::*;

    pub fn normal(rng: &mut impl Rng, shape: &[usize], std: f64) -> Tensor {
        let n = shape.iter().product();
        Tensor::from_vec(
            shape,
            (0..n)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(rng);
                    std * z
                })
                .collect::<Vec<f64>>(),
        )
    }

    pub fn uniform(rng: &mut impl Rng, shape: &[usize], bound: f64) -> Tensor {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-bound..=bound)).collect())
    }

    /// He-normal for layers followed by a rectifier.
    pub fn kaiming(rng: &mut impl Rng, shape: &[usize], fan_in: usize) -> Tensor {
        normal(rng, shape, (2.0 / fan_in as f64).sqrt())
    }
}
