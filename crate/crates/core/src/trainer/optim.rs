//! Adam with decoupled weight decay.

use serde::{Deserialize, Serialize};

use crate::nn::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
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
            weight_decay: 1e-4,
        }
    }
}

/// Optimizer state. Weight decay applies to matrices (rank >= 2) only;
/// biases, norm gains and other vectors are not decayed.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub config: AdamWConfig,
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamW {
    pub fn new(config: AdamWConfig, store: &ParamStore) -> Self {
        let zeros = || store.ids().map(|id| Tensor::zeros(store.get(id).shape().to_vec())).collect();
        Self {
            config,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn update(&mut self, store: &mut ParamStore, grads: &[Tensor], lr: f64) {
        assert_eq!(grads.len(), self.m.len(), "one gradient per parameter");
        self.step += 1;
        let c = &self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let ids: Vec<_> = store.ids().collect();
        for (k, id) in ids.into_iter().enumerate() {
            let p = store.get_mut(id);
            let decay = if p.rank() >= 2 { c.weight_decay } else { 0.0 };
            let (m, v) = (self.m[k].data_mut(), self.v[k].data_mut());
            for (((x, g), mi), vi) in p.data_mut().iter_mut().zip(grads[k].data()).zip(m).zip(v) {
                *mi = c.beta1 * *mi + (1.0 - c.beta1) * g;
                *vi = c.beta2 * *vi + (1.0 - c.beta2) * g * g;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *x -= lr * (m_hat / (v_hat.sqrt() + c.eps) + decay * *x);
            }
        }
    }
}

/// Global L2 norm of a gradient set.
pub fn global_norm(grads: &[Tensor]) -> f64 {
    grads.iter().flat_map(|g| g.data()).map(|x| x * x).sum::<f64>().sqrt()
}

/// Scales gradients so their global norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm && norm > 0.0 {
        let k = max_norm / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|x| *x *= k);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::from_vec([1, 2], vec![1.0, -1.0]));
        store.insert("b", Tensor::from_vec([1], vec![0.5]));
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..AdamWConfig::default()
        };
        let mut opt = AdamW::new(cfg, &store);
        let grads = vec![Tensor::from_vec([1, 2], vec![2.0, -3.0]), Tensor::from_vec([1], vec![0.1])];
        opt.update(&mut store, &grads, 0.01);
        let w = store.by_name("w").unwrap().data().to_vec();
        assert!((w[0] - 0.99).abs() < 1e-9 && (w[1] + 0.99).abs() < 1e-9);
        assert!((store.by_name("b").unwrap().item() - 0.49).abs() < 1e-8);
    }

    #[test]
    fn decay_skips_vectors() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::from_vec([1, 1], vec![2.0]));
        store.insert("b", Tensor::from_vec([1], vec![2.0]));
        let cfg = AdamWConfig {
            weight_decay: 0.5,
            ..AdamWConfig::default()
        };
        let mut opt = AdamW::new(cfg, &store);
        opt.update(&mut store, &[Tensor::zeros([1, 1]), Tensor::zeros([1])], 0.1);
        assert!((store.by_name("w").unwrap().item() - 1.9).abs() < 1e-12);
        assert_eq!(store.by_name("b").unwrap().item(), 2.0);
    }

    #[test]
    fn clipping() {
        let mut g = vec![Tensor::from_vec([2], vec![3.0, 4.0])];
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        assert!((global_norm(&g) - 1.0).abs() < 1e-15);
    }
}
