//! AdamW with decoupled weight decay.
//!
//! The decay term `lr * wd * p` is subtracted from each parameter
//! separately from the bias-corrected moment update, so decay strength does
//! not pass through the adaptive denominator.

use crate::params::ParamStore;

use super::TrainError;

#[derive(Debug, Clone, PartialEq)]
pub struct OptimConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig { lr: 1e-3, weight_decay: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First and second moment estimates per parameter, plus the step count
/// driving bias correction.
#[derive(Debug)]
pub struct OptimState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    pub step: u64,
}

impl OptimState {
    pub fn new(store: &ParamStore) -> Self {
        let m = store.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        let v = store.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        OptimState { m, v, step: 0 }
    }
}

/// Apply one update to every parameter carrying a gradient. Parameters
/// without a gradient this step are left untouched (moments included).
pub fn adamw_step(
    store: &mut ParamStore,
    state: &mut OptimState,
    cfg: &OptimConfig,
) -> Result<(), TrainError> {
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);

    let ids: Vec<_> = store.ids().collect();
    for (idx, id) in ids.into_iter().enumerate() {
        let tensor = store.get(id);
        let Some(grad) = tensor.grad.as_ref() else { continue };
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(TrainError::NonFiniteGradient { name: store.name(id).to_string() });
        }
        let grad = grad.clone();
        let (m, v) = (&mut state.m[idx], &mut state.v[idx]);
        let tensor = store.get_mut(id);
        let p = tensor.data_mut();
        for i in 0..p.len() {
            let g = grad[i];
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            p[i] -= cfg.lr * cfg.weight_decay * p[i];
            p[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

/// Drop all accumulated gradients.
pub fn clear_grads(store: &mut ParamStore) {
    for id in store.ids().collect::<Vec<_>>() {
        store.get_mut(id).grad = None;
    }
}
