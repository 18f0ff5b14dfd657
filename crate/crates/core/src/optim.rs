//! AdamW: adaptive moments with decoupled weight decay.

use crate::error::{Error, Result};
use crate::params::ParamStore;

#[derive(Clone, Copy, Debug)]
pub struct AdamW {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
}

impl AdamW {
    pub fn new(lr: f32) -> Self {
        AdamW {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }

    pub fn with_weight_decay(mut self, wd: f32) -> Self {
        self.weight_decay = wd;
        self
    }
}

/// First/second moment buffers plus the step counter.
pub struct OptimizerState {
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    step: u64,
}

impl OptimizerState {
    pub fn new(store: &ParamStore) -> Self {
        let m = store.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        let v = store.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        OptimizerState { m, v, step: 0 }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One decoupled-weight-decay adaptive moment update over every parameter.
/// `grads` must hold one populated slot per parameter, in store order.
pub fn optimizer_step(
    opt: &AdamW,
    store: &mut ParamStore,
    grads: &[Option<Vec<f32>>],
    state: &mut OptimizerState,
) -> Result<()> {
    assert_eq!(grads.len(), store.len(), "grads/params length mismatch");
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - opt.beta1.powi(t);
    let bc2 = 1.0 - opt.beta2.powi(t);

    for idx in 0..store.len() {
        let g = grads[idx].as_ref().ok_or_else(|| Error::MissingGrad {
            name: store.name(idx).to_string(),
        })?;
        let p = store.at(idx);
        assert_eq!(g.len(), p.numel(), "grad size mismatch for {}", store.name(idx));

        let m = &mut state.m[idx];
        let v = &mut state.v[idx];
        let mut new_data = p.to_vec();
        for i in 0..new_data.len() {
            m[i] = opt.beta1 * m[i] + (1.0 - opt.beta1) * g[i];
            v[i] = opt.beta2 * v[i] + (1.0 - opt.beta2) * g[i] * g[i];
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            new_data[i] -= opt.lr * (mhat / (vhat.sqrt() + opt.eps));
            new_data[i] -= opt.lr * opt.weight_decay * new_data[i];
        }
        store.replace(idx, new_data);
    }
    Ok(())
}
