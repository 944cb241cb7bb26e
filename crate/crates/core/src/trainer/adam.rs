//! Adam optimizer with per-parameter first and second moments.

use crate::diffcore::Tensor;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Optimizer state; moment tensors align with the model's parameter list.
#[derive(Clone, Debug)]
pub struct Adam {
    pub learning_rate: f64,
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl Adam {
    pub fn new(learning_rate: f64, shapes: &[Vec<usize>]) -> Self {
        Adam {
            learning_rate,
            step: 0,
            m: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            v: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
        }
    }

    /// One update over loss gradients (descent direction).
    pub fn update(&mut self, params: &mut [&mut Tensor], grads: &[Tensor]) {
        debug_assert_eq!(params.len(), grads.len());
        self.step += 1;
        let bias1 = 1.0 - ADAM_BETA1.powi(self.step as i32);
        let bias2 = 1.0 - ADAM_BETA2.powi(self.step as i32);
        for ((param, grad), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            let p = param.data_mut();
            let g = grad.data();
            let md = m.data_mut();
            let vd = v.data_mut();
            for i in 0..p.len() {
                md[i] = ADAM_BETA1 * md[i] + (1.0 - ADAM_BETA1) * g[i];
                vd[i] = ADAM_BETA2 * vd[i] + (1.0 - ADAM_BETA2) * g[i] * g[i];
                let m_hat = md[i] / bias1;
                let v_hat = vd[i] / bias2;
                p[i] -= self.learning_rate * m_hat / (v_hat.sqrt() + ADAM_EPS);
            }
        }
    }
}

/// Scales gradients in place so their global L2 norm is at most `max_norm`.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) {
    let norm_sq: f64 = grads
        .iter()
        .flat_map(|g| g.data())
        .map(|v| v * v)
        .sum();
    let norm = norm_sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = max_norm / norm;
        for g in grads {
            for v in g.data_mut() {
                *v *= scale;
            }
        }
    }
}
