use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use super::tape::TensorError;
use super::Result;

/// Adam moments plus hyperparameters, with weight decay decoupled from the
/// moment update (applied directly to the parameters).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OptimState {
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    first_moment: BTreeMap<String, Vec<f64>>,
    second_moment: BTreeMap<String, Vec<f64>>,
}

impl OptimState {
    pub fn new(beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        OptimState {
            step: 0,
            beta1,
            beta2,
            eps,
            weight_decay,
            first_moment: BTreeMap::new(),
            second_moment: BTreeMap::new(),
        }
    }

    /// Paper-standard constants; the paper names the optimizer but not them.
    pub fn with_defaults(weight_decay: f64) -> Self {
        Self::new(0.9, 0.999, 1e-8, weight_decay)
    }
}

/// One bias-corrected update over every parameter present in `grads`.
/// Parameters not touched by this step's graph are left alone entirely
/// (no decay), which keeps rarely-used query embeddings stable.
pub fn adam_step(
    store: &mut ParamStore,
    grads: &BTreeMap<String, Vec<f64>>,
    state: &mut OptimState,
    lr: f64,
) -> Result<()> {
    if lr <= 0.0 {
        return Err(TensorError::Optimizer(format!("learning rate {lr} must be > 0")));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);

    for (name, g) in grads {
        let p = store
            .values_mut(name)
            .ok_or_else(|| TensorError::Optimizer(format!("gradient for unknown parameter {name}")))?;
        if p.len() != g.len() {
            return Err(TensorError::Optimizer(format!(
                "parameter {name}: {} values vs {} gradient entries",
                p.len(),
                g.len()
            )));
        }
        let m = state
            .first_moment
            .entry(name.clone())
            .or_insert_with(|| vec![0.0; g.len()]);
        let v = state
            .second_moment
            .entry(name.clone())
            .or_insert_with(|| vec![0.0; g.len()]);
        for i in 0..g.len() {
            m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * g[i];
            v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * g[i] * g[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            p[i] -= lr * m_hat / (v_hat.sqrt() + state.eps);
            p[i] *= 1.0 - lr * state.weight_decay;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(name: &str, data: Vec<f64>) -> ParamStore {
        let mut s = ParamStore::new();
        let n = data.len();
        s.insert(name, vec![n], data);
        s
    }

    #[test]
    fn first_step_moves_by_roughly_lr() {
        // bias correction makes m_hat/sqrt(v_hat) = sign(g) on step one,
        // so |delta| = lr * |g| / (|g| + eps) ~= lr
        let mut store = store_with("p", vec![1.0, -2.0]);
        let mut state = OptimState::with_defaults(0.0);
        let mut grads = BTreeMap::new();
        grads.insert("p".to_string(), vec![0.3, -0.7]);
        adam_step(&mut store, &grads, &mut state, 0.01).unwrap();
        let p = store.values("p").unwrap();
        assert!((p[0] - (1.0 - 0.01)).abs() < 1e-6);
        assert!((p[1] - (-2.0 + 0.01)).abs() < 1e-6);
        assert_eq!(state.step, 1);
    }

    #[test]
    fn zero_grad_zero_decay_leaves_params() {
        let mut store = store_with("p", vec![0.5, -0.5]);
        let mut state = OptimState::with_defaults(0.0);
        let mut grads = BTreeMap::new();
        grads.insert("p".to_string(), vec![0.0, 0.0]);
        adam_step(&mut store, &grads, &mut state, 0.01).unwrap();
        assert_eq!(store.values("p").unwrap(), &[0.5, -0.5]);
    }

    #[test]
    fn pure_decay_scales_params() {
        let mut store = store_with("p", vec![2.0]);
        let mut state = OptimState::with_defaults(0.1);
        let mut grads = BTreeMap::new();
        grads.insert("p".to_string(), vec![0.0]);
        adam_step(&mut store, &grads, &mut state, 0.5).unwrap();
        let expect = 2.0 * (1.0 - 0.5 * 0.1);
        assert!((store.values("p").unwrap()[0] - expect).abs() < 1e-15);
    }

    #[test]
    fn shape_mismatch_errors() {
        let mut store = store_with("p", vec![1.0, 2.0]);
        let mut state = OptimState::with_defaults(0.0);
        let mut grads = BTreeMap::new();
        grads.insert("p".to_string(), vec![0.0]);
        assert!(adam_step(&mut store, &grads, &mut state, 0.01).is_err());
    }

    #[test]
    fn untouched_params_are_left_alone() {
        let mut store = store_with("p", vec![1.0]);
        store.insert("q", vec![1], vec![3.0]);
        let mut state = OptimState::with_defaults(0.5);
        let mut grads = BTreeMap::new();
        grads.insert("p".to_string(), vec![1.0]);
        adam_step(&mut store, &grads, &mut state, 0.1).unwrap();
        assert_eq!(store.values("q").unwrap(), &[3.0]);
    }
}
