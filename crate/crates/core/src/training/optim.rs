use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};
use crate::nn::ParamStore;
use crate::tensor::{Element, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-5,
        }
    }
}

/// First and second moment estimates, one pair per parameter.
#[derive(Clone, Debug)]
pub struct OptimizerState<T> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub step: u64,
}

impl<T: Element> OptimizerState<T> {
    pub fn new(params: &ParamStore<T>) -> Self {
        let zeros = || {
            params
                .iter()
                .map(|p| Tensor::zeros(p.value.shape().to_vec()))
                .collect()
        };
        Self {
            m: zeros(),
            v: zeros(),
            step: 0,
        }
    }
}

/// One AdamW update with decoupled weight decay. Parameters without a
/// gradient are treated as having a zero gradient.
pub fn adamw_step<T: Element>(
    params: &mut ParamStore<T>,
    state: &mut OptimizerState<T>,
    cfg: &AdamWConfig,
    lr: f64,
) -> Result<()> {
    if !(lr > 0.0) {
        return Err(config_err!("learning rate must be positive, got {lr}"));
    }
    if state.m.len() != params.len() {
        return Err(config_err!(
            "optimizer state tracks {} parameters, model has {}",
            state.m.len(),
            params.len()
        ));
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (T::lit(cfg.beta1), T::lit(cfg.beta2));
    let (one_b1, one_b2) = (T::lit(1.0 - cfg.beta1), T::lit(1.0 - cfg.beta2));
    let c1 = T::lit(1.0 - cfg.beta1.powi(t));
    let c2 = T::lit(1.0 - cfg.beta2.powi(t));
    let lr_t = T::lit(lr);
    let decay = T::lit(lr * cfg.weight_decay);
    let eps = T::lit(cfg.eps);
    for ((p, m), v) in params.iter_mut().zip(&mut state.m).zip(&mut state.v) {
        if m.shape() != p.value.shape() {
            return Err(config_err!("moment shape mismatch for {}", p.name));
        }
        let grad = p.grad.as_ref();
        let theta = p.value.data_mut();
        let (md, vd) = (m.data_mut(), v.data_mut());
        for i in 0..theta.len() {
            let g = grad.map_or(T::zero(), |g| g.data()[i]);
            md[i] = b1 * md[i] + one_b1 * g;
            vd[i] = b2 * vd[i] + one_b2 * g * g;
            let m_hat = md[i] / c1;
            let v_hat = vd[i] / c2;
            theta[i] = theta[i] - lr_t * m_hat / (v_hat.sqrt() + eps) - decay * theta[i];
        }
    }
    Ok(())
}
