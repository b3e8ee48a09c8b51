//! Adam with global-norm gradient clipping.

use serde::{Deserialize, Serialize};

use crate::params::{ParamId, ParameterStore};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global L2 norm above which the gradient is rescaled; `None` disables.
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { learning_rate: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, clip_norm: Some(5.0) }
    }
}

#[derive(Clone, Debug)]
pub struct Adam {
    pub cfg: AdamConfig,
    pub step: u64,
    /// First and second moments, indexed like the store.
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(cfg: AdamConfig, store: &ParameterStore) -> Self {
        let m = store.iter().map(|(_, p)| vec![0.0; p.value.len()]).collect::<Vec<_>>();
        let v = m.clone();
        Self { cfg, step: 0, m, v }
    }

    /// Applies one update to every trainable tensor using the accumulated
    /// gradients, then clears them. Returns the pre-clip gradient norm.
    pub fn step(&mut self, store: &mut ParameterStore) -> f64 {
        let norm = store.grad_norm();
        let clip = match self.cfg.clip_norm {
            Some(max) if norm > max && norm.is_finite() => max / norm,
            _ => 1.0,
        };
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let bc1 = 1.0 - b1.powi(t);
        let bc2 = 1.0 - b2.powi(t);
        let lr = self.cfg.learning_rate;
        let precision = store.precision();
        let ids: Vec<ParamId> = store.ids().collect();
        for id in ids {
            let p = store.get_mut(id);
            if !p.trainable {
                p.grad.iter_mut().for_each(|g| *g = 0.0);
                continue;
            }
            let (m, v) = (&mut self.m[id.0], &mut self.v[id.0]);
            for i in 0..p.value.len() {
                let g = p.grad[i] * clip;
                m[i] = b1 * m[i] + (1.0 - b1) * g;
                v[i] = b2 * v[i] + (1.0 - b2) * g * g;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                if lr != 0.0 {
                    p.value[i] = precision.round(p.value[i] - lr * mhat / (vhat.sqrt() + self.cfg.eps));
                }
                p.grad[i] = 0.0;
            }
        }
        norm
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{Init, Precision};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn first_step_moves_each_coordinate_by_learning_rate() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParameterStore::new(Precision::F64);
        let id = store.add("w", &[3], Init::Values(vec![1.0, 2.0, 3.0]), &mut rng).unwrap();
        store.get_mut(id).grad = vec![0.5, -2.0, 0.0];
        let mut adam = Adam::new(AdamConfig { clip_norm: None, ..Default::default() }, &store);
        adam.step(&mut store);
        let v = &store.get(id).value;
        assert!((v[0] - (1.0 - 1e-3)).abs() < 1e-9);
        assert!((v[1] - (2.0 + 1e-3)).abs() < 1e-9);
        assert_eq!(v[2], 3.0);
        assert!(store.get(id).grad.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn frozen_tensors_are_untouched() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParameterStore::new(Precision::F64);
        let id = store.add("item_enc.w", &[2], Init::Values(vec![1.0, 2.0]), &mut rng).unwrap();
        store.set_trainable_prefix("item_enc.", false);
        store.get_mut(id).grad = vec![1.0, 1.0];
        let mut adam = Adam::new(AdamConfig::default(), &store);
        adam.step(&mut store);
        assert_eq!(store.get(id).value, vec![1.0, 2.0]);
    }

    #[test]
    fn clipping_bounds_the_effective_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParameterStore::new(Precision::F64);
        let id = store.add("w", &[2], Init::Zeros, &mut rng).unwrap();
        store.get_mut(id).grad = vec![30.0, 40.0];
        let mut adam = Adam::new(AdamConfig { clip_norm: Some(5.0), ..Default::default() }, &store);
        let norm = adam.step(&mut store);
        assert!((norm - 50.0).abs() < 1e-12);
        // first moment holds (1-β1)·clipped gradient
        assert!((adam.m[0][0] - 0.1 * 3.0).abs() < 1e-12);
        assert!((adam.m[0][1] - 0.1 * 4.0).abs() < 1e-12);
    }
}
