//! Adam with decoupled weight decay, plus global-norm gradient clipping.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::tensor::Tensor;

/// Adam with decoupled weight decay; β = (0.9, 0.999), eps = 1e-8.
/// Moment buffers are keyed by parameter name so the optimizer survives
/// serialization and parameter-set changes (fresh task heads).
#[derive(Debug, Clone)]
pub struct Adam {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step_count: u64,
    pub m: BTreeMap<String, Vec<f64>>,
    pub v: BTreeMap<String, Vec<f64>>,
}

impl Adam {
    pub fn new(learning_rate: f64, weight_decay: f64) -> Self {
        Adam {
            learning_rate,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step_count: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// Advance the shared step counter; call once per optimization step,
    /// before the per-parameter updates.
    pub fn begin_step(&mut self) {
        self.step_count += 1;
    }

    /// Apply one update to a single parameter. Parameters without a
    /// gradient this step are simply not passed here (no decay either).
    pub fn update(&mut self, name: &str, param: &mut Tensor, grad: &[f64]) {
        let n = param.numel();
        debug_assert_eq!(n, grad.len());
        let m = self
            .m
            .entry(String::from(name))
            .or_insert_with(|| vec![0.0; n]);
        let v = self
            .v
            .entry(String::from(name))
            .or_insert_with(|| vec![0.0; n]);
        let t = self.step_count as i32;
        let bc1 = 1.0 - libm::pow(self.beta1, t as f64);
        let bc2 = 1.0 - libm::pow(self.beta2, t as f64);
        let mut data = param.data().to_vec();
        for i in 0..n {
            m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * grad[i];
            v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            data[i] -= self.learning_rate * (m_hat / (libm::sqrt(v_hat) + self.eps)
                + self.weight_decay * data[i]);
        }
        param.set_data(data).expect("shape unchanged");
    }
}

/// Scale all gradients so their joint L2 norm does not exceed `max_norm`.
/// Returns the pre-clip norm. A non-positive `max_norm` disables clipping.
pub fn clip_global_norm(grads: &mut BTreeMap<String, Vec<f64>>, max_norm: f64) -> f64 {
    let sq: f64 = grads
        .values()
        .map(|g| g.iter().map(|v| v * v).sum::<f64>())
        .sum();
    let norm = libm::sqrt(sq);
    if max_norm > 0.0 && norm > max_norm {
        let scale = max_norm / norm;
        for g in grads.values_mut() {
            for v in g.iter_mut() {
                *v *= scale;
            }
        }
    }
    norm
}
