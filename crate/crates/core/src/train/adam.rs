use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{ParamStore, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment estimates and step count of Adam.
#[derive(Debug, Clone)]
pub struct OptimizerState<T> {
    pub config: AdamConfig,
    /// Learning rate of the next step; set by the trainer's schedule.
    pub lr: f64,
    pub step: u64,
    first: Vec<Vec<T>>,
    second: Vec<Vec<T>>,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(store: &ParamStore<T>, config: AdamConfig) -> Self {
        let zeros = || store.iter().map(|p| vec![T::zero(); p.tensor.len()]).collect::<Vec<_>>();
        OptimizerState {
            config,
            lr: config.lr,
            step: 0,
            first: zeros(),
            second: zeros(),
        }
    }

    /// Multiplies the learning rate by `factor`.
    pub fn first_moment(&self, index: usize) -> &[T] {
        &self.first[index]
    }
}

/// One bias-corrected Adam update from the accumulated gradients.
pub fn adam_step<T: Scalar>(store: &mut ParamStore<T>, state: &mut OptimizerState<T>) -> Result<()> {
    if state.first.len() != store.len() {
        return Err(Error::Param(format!(
            "optimizer tracks {} parameters, store has {}",
            state.first.len(),
            store.len()
        )));
    }
    if let Some(p) = store.iter().find(|p| p.tensor.grad().is_none()) {
        return Err(Error::MissingGrad(p.name.clone()));
    }
    state.step += 1;
    let c = state.config;
    let t = state.step as i32;
    let (b1, b2) = (T::c(c.beta1), T::c(c.beta2));
    let (one_b1, one_b2) = (T::c(1.0 - c.beta1), T::c(1.0 - c.beta2));
    let bc1 = T::c(1.0 - c.beta1.powi(t));
    let bc2 = T::c(1.0 - c.beta2.powi(t));
    let (lr, eps) = (T::c(state.lr), T::c(c.eps));
    for (i, p) in store.iter_mut().enumerate() {
        let g = p.tensor.grad().expect("checked above").to_vec();
        let (m, v) = (&mut state.first[i], &mut state.second[i]);
        for (k, w) in p.tensor.data_mut().iter_mut().enumerate() {
            m[k] = b1 * m[k] + one_b1 * g[k];
            v[k] = b2 * v[k] + one_b2 * g[k] * g[k];
            let mhat = m[k] / bc1;
            let vhat = v[k] / bc2;
            *w = *w - lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Scales all gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm<T: Scalar>(store: &mut ParamStore<T>, max_norm: f64) -> f64 {
    let norm = store
        .iter()
        .filter_map(|p| p.tensor.grad())
        .flat_map(|g| g.iter().map(|v| v.f64() * v.f64()))
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for p in store.iter_mut() {
            if let Some(g) = p.tensor.grad() {
                let scaled: Vec<T> = g.iter().map(|&v| v * T::c(s)).collect();
                p.tensor.zero_grad();
                p.tensor.accumulate_grad(&scaled).expect("same length");
            }
        }
    }
    norm
}
