use serde::{Deserialize, Serialize};

use crate::runtime::kernels::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { beta1: 0.9, beta2: 0.999, epsilon: 1e-7 }
    }
}

/// One bias-corrected Adam update of `params` in place. `step` is the
/// 1-based index of this update. Arithmetic runs in `f64`.
pub fn adam_step<F: Scalar>(
    params: &mut [F],
    grads: &[F],
    m: &mut [F],
    v: &mut [F],
    step: u64,
    lr: f64,
    cfg: &AdamConfig,
) {
    let c1 = 1.0 - cfg.beta1.powi(step as i32);
    let c2 = 1.0 - cfg.beta2.powi(step as i32);
    for i in 0..params.len() {
        let g = grads[i].widen();
        let mi = cfg.beta1 * m[i].widen() + (1.0 - cfg.beta1) * g;
        let vi = cfg.beta2 * v[i].widen() + (1.0 - cfg.beta2) * g * g;
        m[i] = F::narrow(mi);
        v[i] = F::narrow(vi);
        let update = lr * (mi / c1) / ((vi / c2).sqrt() + cfg.epsilon);
        params[i] = F::narrow(params[i].widen() - update);
    }
}
