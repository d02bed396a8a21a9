use serde::{Deserialize, Serialize};

use super::nn::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { learning_rate: 1e-3, weight_decay: 0.0, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

/// Adaptive-moment optimizer with decoupled weight decay: the decay shrinks
/// parameters directly and never enters the moment estimates.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub config: AdamWConfig,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
    step: u64,
}

impl AdamW {
    pub fn new(config: AdamWConfig, params: &ParamStore) -> Self {
        let zeros = |t: &Tensor| Tensor::zeros(t.rows(), t.cols());
        Self {
            config,
            first: params.tensors().iter().map(zeros).collect(),
            second: params.tensors().iter().map(zeros).collect(),
            step: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update. `grads[i]` is the gradient of parameter `i`, `None` for zero.
    pub fn step(&mut self, params: &mut ParamStore, grads: &[Option<Tensor>]) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::ShapeMismatch(format!("{} gradients for {} parameters", grads.len(), params.len())));
        }
        for (i, (p, g)) in params.tensors().iter().zip(grads).enumerate() {
            if let Some(g) = g {
                if g.shape() != p.shape() {
                    return Err(Error::ShapeMismatch(format!(
                        "gradient {i} has shape {:?}, parameter has {:?}",
                        g.shape(),
                        p.shape()
                    )));
                }
            }
        }
        self.step += 1;
        let AdamWConfig { learning_rate: lr, weight_decay: wd, beta1: b1, beta2: b2, epsilon: eps } = self.config;
        let bc1 = 1.0 - b1.powi(self.step as i32);
        let bc2 = 1.0 - b2.powi(self.step as i32);
        let decay = 1.0 - lr * wd;
        for (i, p) in params.tensors_mut().iter_mut().enumerate() {
            let (m, v) = (&mut self.first[i], &mut self.second[i]);
            let pd = p.data_mut();
            match &grads[i] {
                Some(g) => {
                    for (((x, mi), vi), gi) in pd.iter_mut().zip(m.data_mut()).zip(v.data_mut()).zip(g.data()) {
                        *x *= decay;
                        *mi = b1 * *mi + (1.0 - b1) * gi;
                        *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                        *x -= lr * (*mi / bc1) / ((*vi / bc2).sqrt() + eps);
                    }
                }
                None => {
                    for ((x, mi), vi) in pd.iter_mut().zip(m.data_mut()).zip(v.data_mut()) {
                        *x *= decay;
                        *mi *= b1;
                        *vi *= b2;
                        *x -= lr * (*mi / bc1) / ((*vi / bc2).sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(x: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.add("x", Tensor::scalar(x));
        s
    }

    #[test]
    fn zero_gradient_without_decay_is_a_fixed_point() {
        let mut store = scalar_store(1.7);
        let mut opt = AdamW::new(AdamWConfig { learning_rate: 0.1, ..Default::default() }, &store);
        for _ in 0..5 {
            opt.step(&mut store, &[Some(Tensor::scalar(0.0))]).unwrap();
        }
        assert_eq!(store.tensors()[0].item(), 1.7);
    }

    #[test]
    fn zero_gradient_applies_decoupled_decay() {
        let mut store = scalar_store(2.0);
        let cfg = AdamWConfig { learning_rate: 0.01, weight_decay: 0.5, ..Default::default() };
        let mut opt = AdamW::new(cfg, &store);
        opt.step(&mut store, &[Some(Tensor::scalar(0.0))]).unwrap();
        assert!((store.tensors()[0].item() - 2.0 * (1.0 - 0.01 * 0.5)).abs() < 1e-15);
    }

    #[test]
    fn constant_gradient_matches_hand_recursion() {
        // Hand recursion for g = 1: m_t = 1 - b1^t, v_t = 1 - b2^t, so the
        // bias-corrected ratio is 1/(1 + eps) at every step.
        let (lr, wd, eps) = (0.1, 0.01, 1e-8);
        let cfg = AdamWConfig { learning_rate: lr, weight_decay: wd, beta1: 0.9, beta2: 0.999, epsilon: eps };
        let mut store = scalar_store(1.0);
        let mut opt = AdamW::new(cfg, &store);
        let mut x: f64 = 1.0;
        let (mut m, mut v) = (0.0f64, 0.0f64);
        for t in 1..=3 {
            opt.step(&mut store, &[Some(Tensor::scalar(1.0))]).unwrap();
            x *= 1.0 - lr * wd;
            m = 0.9 * m + 0.1;
            v = 0.999 * v + 0.001;
            let mhat = m / (1.0 - 0.9f64.powi(t));
            let vhat = v / (1.0 - 0.999f64.powi(t));
            x -= lr * mhat / (vhat.sqrt() + eps);
            assert!((store.tensors()[0].item() - x).abs() < 1e-14, "step {t}");
        }
        // closed form: 1 -> 0.999*1 - 0.1/(1+eps) ... three times
        let mut closed = 1.0;
        for _ in 0..3 {
            closed = closed * 0.999 - 0.1 / (1.0 + eps);
        }
        assert!((store.tensors()[0].item() - closed).abs() < 1e-12);
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let mut store = scalar_store(0.0);
        let mut opt = AdamW::new(AdamWConfig::default(), &store);
        assert!(matches!(opt.step(&mut store, &[Some(Tensor::zeros(2, 1))]), Err(Error::ShapeMismatch(_))));
        assert!(opt.step(&mut store, &[]).is_err());
    }
}
