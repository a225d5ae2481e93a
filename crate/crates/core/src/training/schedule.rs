use serde::{Deserialize, Serialize};

/// Exponentially decaying triangular cyclic learning rate.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CyclicLr {
    pub lr_min: f64,
    pub lr_max: f64,
    pub gamma: f64,
    /// Iterations per half cycle.
    pub step_size: u64,
}

impl Default for CyclicLr {
    fn default() -> Self {
        Self {
            lr_min: 1e-4,
            lr_max: 1e-2,
            gamma: 0.995,
            step_size: 15,
        }
    }
}

/// Triangular wave between `lr_min` and `lr_min + (lr_max - lr_min) * gamma^iter`
/// with a half period of `step_size` iterations.
pub fn cyclic_lr(iter: u64, cfg: &CyclicLr) -> f64 {
    let step = cfg.step_size.max(1) as f64;
    let it = iter as f64;
    let cycle = (1.0 + it / (2.0 * step)).floor();
    let x = (it / step - 2.0 * cycle + 1.0).abs();
    let amplitude = (cfg.lr_max - cfg.lr_min) * cfg.gamma.powf(it);
    cfg.lr_min + amplitude * (1.0 - x).max(0.0)
}
