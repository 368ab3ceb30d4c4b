//! First-order optimizers over a subset of a parameter store.

use crate::config::OptimizerKind;
use crate::error::{Error, Result};
use crate::numerics::{Gradients, ParamId, ParamStore, Tensor};

pub trait Optimizer {
    /// Applies one update to `params` using `grads`.
    fn step(&mut self, store: &mut ParamStore, params: &[ParamId], grads: &Gradients) -> Result<()>;
}

/// Plain gradient descent without momentum.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub lr: f64,
}

impl Optimizer for Sgd {
    fn step(&mut self, store: &mut ParamStore, params: &[ParamId], grads: &Gradients) -> Result<()> {
        for &id in params {
            let g = grads.get(id).data();
            for (p, d) in store.get_mut(id).data_mut().iter_mut().zip(g) {
                apply(p, self.lr * d);
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Option<Tensor>>,
    v: Vec<Option<Tensor>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }
}

impl Optimizer for Adam {
    fn step(&mut self, store: &mut ParamStore, params: &[ParamId], grads: &Gradients) -> Result<()> {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        if self.m.len() < store.len() {
            self.m.resize(store.len(), None);
            self.v.resize(store.len(), None);
        }
        for &id in params {
            let g = grads.get(id);
            let m = self.m[id.0].get_or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self.v[id.0].get_or_insert_with(|| Tensor::zeros(g.shape()));
            let p = store.get_mut(id).data_mut();
            for (((p, &g), m), v) in p.iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                apply(p, self.lr * (*m / bc1) / ((*v / bc2).sqrt() + self.eps));
            }
        }
        Ok(())
    }
}

// Skipping zero updates keeps the sign bit of -0.0 parameters intact.
fn apply(p: &mut f64, update: f64) {
    if update != 0.0 {
        *p -= update;
    }
}

pub fn make_optimizer(kind: OptimizerKind, lr: f64) -> Result<Box<dyn Optimizer>> {
    if !(lr >= 0.0 && lr.is_finite()) {
        return Err(Error::InvalidArgument(format!("learning rate must be finite and non-negative, got {lr}")));
    }
    Ok(match kind {
        OptimizerKind::Sgd => Box::new(Sgd { lr }),
        OptimizerKind::Adam => Box::new(Adam::new(lr)),
    })
}

/// Rescales `grads` so their global norm is at most `max_norm`.
pub fn clip_global_norm(grads: &mut Gradients, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if norm > max_norm && norm > 0.0 {
        grads.scale(max_norm / norm);
    }
    norm
}
