//! Adam over the head's learnable tensors.

use crate::error::{Error, Result};
use crate::head::{HeadGrads, HeadParams};

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config("adam needs lr > 0, betas in [0, 1), eps > 0".into()))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    cfg: AdamConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(cfg: AdamConfig, params: &HeadParams) -> Self {
        let zeros: Vec<Vec<f64>> = params.learnable().iter().map(|s| vec![0.0; s.len()]).collect();
        Self {
            cfg,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One bias-corrected update. Tensors are matched positionally, so
    /// `grads` must come from the same head configuration.
    pub fn step(&mut self, params: &mut HeadParams, grads: &HeadGrads) -> Result<()> {
        let g = grads.slices();
        let mut p = params.learnable_mut();
        if g.len() != p.len() || g.iter().zip(&p).any(|(a, b)| a.len() != b.len()) {
            return Err(Error::Shape("gradients do not match head parameters".into()));
        }
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.cfg;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        for (((param, grad), m), v) in p.iter_mut().zip(&g).zip(&mut self.m).zip(&mut self.v) {
            for i in 0..param.len() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * grad[i];
                v[i] = beta2 * v[i] + (1.0 - beta2) * grad[i] * grad[i];
                param[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::head::HeadConfig;

    #[test]
    fn first_step_moves_each_parameter_by_lr() {
        let cfg = HeadConfig {
            feature_dim: 3,
            hidden: 4,
            blocks: 1,
            ..HeadConfig::default()
        };
        let mut params = HeadParams::init(&cfg, 1).unwrap();
        let before: Vec<Vec<f64>> = params.learnable().iter().map(|s| s.to_vec()).collect();
        let x = crate::tensor::Tensor::new(vec![3, 1, 5], (0..15).map(|i| (i as f64).sin()).collect()).unwrap();
        let (logits, cache, _) = params.forward_batch(&x).unwrap();
        let ones = crate::tensor::Tensor::filled(logits.shape().to_vec(), 1.0);
        let grads = params.backward(&cache, &ones).unwrap();
        let mut adam = Adam::new(AdamConfig::default(), &params);
        adam.step(&mut params, &grads).unwrap();
        for ((b, a), g) in before.iter().zip(params.learnable()).zip(grads.slices()) {
            for i in 0..b.len() {
                let expected = if g[i] == 0.0 { 0.0 } else { -1e-3 * g[i].signum() };
                let delta = a[i] - b[i];
                // |g| / (|g| + eps) differs from 1 for tiny gradients
                assert!((delta - expected).abs() <= 1e-3 * 1e-8 / g[i].abs().max(1e-300) + 1e-15, "{delta} {expected}");
            }
        }
        assert_eq!(adam.steps(), 1);
    }

    #[test]
    fn rejects_bad_config() {
        assert!(AdamConfig { lr: 0.0, ..AdamConfig::default() }.validate().is_err());
        assert!(AdamConfig { beta2: 1.0, ..AdamConfig::default() }.validate().is_err());
    }
}
