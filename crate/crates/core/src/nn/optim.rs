use super::{ParamKind, ParamStore};
use crate::tensor::Tensor;

/// SGD with heavy-ball momentum and L2 weight decay folded into the gradient.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Option<Tensor>>,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            velocity: Vec::new(),
        }
    }

    /// Applies one update. `grads` is in store order; `None` entries are left untouched.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Option<Tensor>], lr: f64) {
        if self.velocity.len() != store.len() {
            self.velocity = vec![None; store.len()];
        }
        let ids: Vec<_> = store.ids().collect();
        for (k, id) in ids.into_iter().enumerate() {
            let Some(grad) = grads.get(k).and_then(|g| g.as_ref()) else {
                continue;
            };
            let param = store.param_mut(id);
            if param.kind != ParamKind::Trainable {
                continue;
            }
            let mut d = grad.clone();
            for (dv, &p) in d.data_mut().iter_mut().zip(param.value.data()) {
                *dv += self.weight_decay * p;
            }
            let buf = match &mut self.velocity[k] {
                Some(buf) => {
                    for (b, &dv) in buf.data_mut().iter_mut().zip(d.data()) {
                        *b = self.momentum * *b + dv;
                    }
                    buf
                }
                slot @ None => slot.insert(d),
            };
            for (p, &b) in param.value.data_mut().iter_mut().zip(buf.data()) {
                *p -= lr * b;
            }
        }
    }
}
