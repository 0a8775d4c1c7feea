//! Adam, gradient clipping and learning-rate schedules.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use super::{ParamStore, TensorError};

/// Cosine decay from `lr_init` to `lr_final` over `decay_steps`, constant afterwards.
///
/// Written as a convex combination so both endpoints are reproduced exactly.
pub fn cosine_lr(step: u64, decay_steps: u64, lr_init: f64, lr_final: f64) -> f64 {
    let s = decay_steps.max(1);
    let progress = step.min(s) as f64 / s as f64;
    let w = 0.5 * (1.0 + (PI * progress).cos());
    lr_init * w + lr_final * (1.0 - w)
}

#[derive(Clone, Debug, PartialEq)]
pub enum LrSchedule {
    Cosine {
        lr_init: f64,
        lr_final: f64,
        decay_steps: u64,
    },
    Constant(f64),
}

impl LrSchedule {
    pub fn at(&self, step: u64) -> f64 {
        match *self {
            LrSchedule::Cosine {
                lr_init,
                lr_final,
                decay_steps,
            } => cosine_lr(step, decay_steps, lr_init, lr_final),
            LrSchedule::Constant(lr) => lr,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam optimizer state. Moment buffers are created lazily, and only for
/// trainable parameters.
#[derive(Clone, Debug, Default)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    first: BTreeMap<String, Vec<f32>>,
    second: BTreeMap<String, Vec<f32>>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            ..Default::default()
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn has_moments(&self, name: &str) -> bool {
        self.first.contains_key(name)
    }

    /// One bias-corrected Adam update over every trainable entry of `store`,
    /// then clears all gradients. Frozen entries are never written.
    pub fn step(&mut self, store: &mut ParamStore, lr: f64) -> Result<(), TensorError> {
        if let Some(name) = store
            .iter()
            .find(|(_, p)| p.trainable && p.tensor.grad().is_none())
            .map(|(n, _)| n.to_string())
        {
            return Err(TensorError::MissingGradient { name });
        }
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        for (name, p) in store.iter_mut() {
            if !p.trainable {
                p.tensor.clear_grad();
                continue;
            }
            let grad = p.tensor.grad().expect("checked above").to_vec();
            let n = grad.len();
            let m = self.first.entry(name.to_string()).or_insert_with(|| vec![0.0; n]);
            let v = self.second.entry(name.to_string()).or_insert_with(|| vec![0.0; n]);
            let data = p.tensor.data_mut();
            for i in 0..n {
                let gi = grad[i] as f64;
                let mi = beta1 * m[i] as f64 + (1.0 - beta1) * gi;
                let vi = beta2 * v[i] as f64 + (1.0 - beta2) * gi * gi;
                m[i] = mi as f32;
                v[i] = vi as f32;
                let update = lr * (mi / c1) / ((vi / c2).sqrt() + eps);
                data[i] = (data[i] as f64 - update) as f32;
            }
            p.tensor.clear_grad();
        }
        Ok(())
    }
}

/// Free-function form of [`Adam::step`].
pub fn adam_step(store: &mut ParamStore, state: &mut Adam, lr: f64) -> Result<(), TensorError> {
    state.step(store, lr)
}

/// Rescales gradient maps so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [&mut BTreeMap<String, Vec<f32>>], max_norm: f64) -> f64 {
    let sq: f64 = grads
        .iter()
        .flat_map(|m| m.values())
        .flat_map(|g| g.iter())
        .map(|&v| (v as f64) * (v as f64))
        .sum();
    let norm = sq.sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = (max_norm / norm) as f32;
        for m in grads.iter_mut() {
            for g in m.values_mut() {
                g.iter_mut().for_each(|v| *v *= s);
            }
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensorcore::Tensor;

    fn store_with(value: f32, grad: f32, trainable: bool) -> ParamStore {
        let mut s = ParamStore::new();
        let mut t = Tensor::scalar(value);
        t.set_grad(vec![grad]).unwrap();
        s.insert("p", t, trainable).unwrap();
        s
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut s = store_with(0.5, 1.0, true);
        let mut adam = Adam::new(AdamConfig::default());
        adam.step(&mut s, 0.1).unwrap();
        let delta = s.tensor("p").unwrap().data()[0] as f64 - 0.5;
        assert!((delta + 0.1).abs() < 1e-6, "delta {delta}");
        assert!(s.tensor("p").unwrap().grad().is_none());
        assert_eq!(adam.steps_taken(), 1);
    }

    #[test]
    fn zero_gradient_leaves_bits() {
        let mut s = store_with(0.123, 0.0, true);
        let before = s.tensor("p").unwrap().clone();
        Adam::default().step(&mut s, 0.1).unwrap();
        assert!(s.tensor("p").unwrap().bits_eq(&before));
    }

    #[test]
    fn frozen_params_untouched_and_have_no_moments() {
        let mut s = store_with(0.7, 5.0, false);
        let before = s.tensor("p").unwrap().clone();
        let mut adam = Adam::default();
        adam.step(&mut s, 0.1).unwrap();
        assert!(s.tensor("p").unwrap().bits_eq(&before));
        assert!(!adam.has_moments("p"));
    }

    #[test]
    fn missing_gradient_is_named() {
        let mut s = ParamStore::new();
        s.insert("enc.w", Tensor::scalar(1.0), true).unwrap();
        let err = Adam::default().step(&mut s, 0.1).unwrap_err();
        assert_eq!(
            err,
            TensorError::MissingGradient {
                name: "enc.w".into()
            }
        );
    }

    #[test]
    fn cosine_endpoints() {
        assert_eq!(cosine_lr(0, 40_000, 1e-3, 1e-5), 1e-3);
        assert_eq!(cosine_lr(40_000, 40_000, 1e-3, 1e-5), 1e-5);
        assert_eq!(cosine_lr(41_000, 40_000, 1e-3, 1e-5), 1e-5);
        assert_eq!(cosine_lr(20_000, 40_000, 1e-3, 1e-5), 5.05e-4);
    }

    #[test]
    fn clipping_bounds_norm() {
        let mut a = BTreeMap::from([("x".to_string(), vec![3.0f32, 4.0])]);
        let norm = clip_global_norm(&mut [&mut a], 1.0);
        assert!((norm - 5.0).abs() < 1e-12);
        assert!((a["x"][0] - 0.6).abs() < 1e-6 && (a["x"][1] - 0.8).abs() < 1e-6);
    }
}
