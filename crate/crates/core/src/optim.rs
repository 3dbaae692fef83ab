//! SGD with classical momentum and L2 weight decay folded into the velocity.

use crate::error::{Error, Result};
use crate::param::ParamStore;
use crate::tensor::Float;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SgdConfig {
    pub momentum: f64,
    pub weight_decay: f64,
}

/// Velocity buffers, one per parameter in store order.
#[derive(Debug, Clone, PartialEq)]
pub struct SgdState<F> {
    pub velocity: Vec<Vec<F>>,
}

impl<F: Float> SgdState<F> {
    pub fn new(store: &ParamStore<F>) -> Self {
        Self {
            velocity: store.zeros_like(),
        }
    }
}

/// `v ← μ·v + g + λ·θ; θ ← θ − η·v`
pub fn sgd_momentum_step<F: Float>(
    store: &mut ParamStore<F>,
    grads: &[Vec<F>],
    lr: f64,
    cfg: SgdConfig,
    state: &mut SgdState<F>,
) -> Result<()> {
    if grads.len() != store.len() || state.velocity.len() != store.len() {
        return Err(Error::Invalid(format!(
            "optimizer got {} grads / {} velocities for {} parameters",
            grads.len(),
            state.velocity.len(),
            store.len()
        )));
    }
    let mu = F::from_f64(cfg.momentum);
    let wd = F::from_f64(cfg.weight_decay);
    let lr = F::from_f64(lr);
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let i = id.index();
        let theta = store.get_mut(id).data_mut();
        let v = &mut state.velocity[i];
        let g = &grads[i];
        if v.len() != theta.len() || g.len() != theta.len() {
            return Err(Error::Invalid(format!("optimizer buffer size mismatch for parameter {i}")));
        }
        for j in 0..theta.len() {
            v[j] = mu * v[j] + g[j] + wd * theta[j];
            theta[j] -= lr * v[j];
        }
    }
    Ok(())
}
