use super::params::ParameterStore;
use super::Tensor;
use crate::error::{Error, Result};

/// Adam with decoupled weight decay.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new(store: &ParameterStore, lr: f64, weight_decay: f64) -> Self {
        let zeros: Vec<Vec<f64>> = store
            .iter()
            .map(|(_, p)| if p.trainable { vec![0.0; p.value.len()] } else { Vec::new() })
            .collect();
        Self {
            lr,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }
}

/// One bias-corrected Adam update. `grads` is aligned with the store's registry
/// order; every trainable entry needs a gradient.
pub fn adam_step(store: &mut ParameterStore, grads: &[Option<Tensor>], state: &mut OptimizerState) -> Result<()> {
    if grads.len() != store.len() || state.first.len() != store.len() {
        return Err(Error::shape("adam_step: gradient list does not match parameter store"));
    }
    for (i, g) in grads.iter().enumerate() {
        if store.is_trainable(i) {
            match g {
                None => return Err(Error::MissingGradient(store.name(i).to_string())),
                Some(g) if g.shape() != store.value(i).shape() => {
                    return Err(Error::shape(format!(
                        "adam_step: gradient for `{}` has shape {:?}",
                        store.name(i),
                        g.shape()
                    )))
                }
                _ => {}
            }
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    for (i, g) in grads.iter().enumerate() {
        let Some(g) = g else { continue };
        if !store.is_trainable(i) {
            continue;
        }
        let m = &mut state.first[i];
        let v = &mut state.second[i];
        let w = store.value_mut(i).data_mut();
        for j in 0..w.len() {
            let gj = g.data()[j];
            m[j] = state.beta1 * m[j] + (1.0 - state.beta1) * gj;
            v[j] = state.beta2 * v[j] + (1.0 - state.beta2) * gj * gj;
            let mhat = m[j] / bc1;
            let vhat = v[j] / bc2;
            w[j] -= state.lr * (mhat / (vhat.sqrt() + state.eps) + state.weight_decay * w[j]);
        }
    }
    Ok(())
}
