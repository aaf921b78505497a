use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::tensor::ParamSet;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Rescales the whole gradient to this global L2 norm when it is larger.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clip_norm: Option<f64>,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }

    pub fn with_clip_norm(self, max_norm: f64) -> Self {
        Self {
            clip_norm: Some(max_norm),
            ..self
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: None,
        }
    }
}

/// Adam with bias-corrected moment estimates.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    first: BTreeMap<String, Vec<f64>>,
    second: BTreeMap<String, Vec<f64>>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update to every parameter that has an entry in `grads`.
    /// Parameters without a gradient are left untouched, moments included.
    pub fn step(&mut self, params: &mut ParamSet, grads: &ParamSet) -> Result<()> {
        for (name, g) in grads.iter() {
            let p = params.get(name).ok_or_else(|| {
                Error::shape(
                    "adam_step",
                    format!("gradient for unknown parameter `{name}`"),
                )
            })?;
            if p.shape() != g.shape() {
                return Err(Error::shape(
                    "adam_step",
                    format!(
                        "`{name}`: parameter {:?} vs gradient {:?}",
                        p.shape(),
                        g.shape()
                    ),
                ));
            }
            if !g.is_finite() {
                return Err(Error::NonFinite("adam_step"));
            }
        }

        let scale = match self.config.clip_norm {
            Some(max) => {
                let norm = global_norm(grads);
                if norm > max {
                    max / norm
                } else {
                    1.0
                }
            }
            None => 1.0,
        };

        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
            ..
        } = self.config;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);

        for (name, g) in grads.iter() {
            let p = params.get_mut(name).expect("validated above");
            let m = self
                .first
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; g.len()]);
            let v = self
                .second
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; g.len()]);
            for (i, (w, &gi)) in p.values_mut().iter_mut().zip(g.values()).enumerate() {
                let gi = gi * scale;
                m[i] = beta1 * m[i] + (1.0 - beta1) * gi;
                v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi;
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                *w -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// L2 norm over every gradient entry.
pub fn global_norm(grads: &ParamSet) -> f64 {
    grads
        .iter()
        .flat_map(|(_, g)| g.values().iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensorcore::Tensor;

    fn single(v: Vec<f64>) -> ParamSet {
        let mut p = ParamSet::new();
        p.insert("w", Tensor::vector(v).unwrap());
        p
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut params = single(vec![0.3, -1.2, 4.0]);
        let before = params.clone();
        let mut opt = Adam::new(AdamConfig::default());
        opt.step(&mut params, &single(vec![0.0; 3])).unwrap();
        assert_eq!(params, before);
        assert_eq!(opt.steps_taken(), 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // m_hat = 1, v_hat = 1 at t = 1, so the step is lr / (1 + eps).
        let mut params = single(vec![0.5]);
        let mut opt = Adam::new(AdamConfig::with_lr(0.01));
        opt.step(&mut params, &single(vec![1.0])).unwrap();
        let moved = 0.5 - params.get("w").unwrap().values()[0];
        assert!((moved - 0.01 / (1.0 + 1e-8)).abs() < 1e-15);
    }

    #[test]
    fn two_steps_match_scripted_updates() {
        let (lr, b1, b2, eps) = (0.05, 0.9, 0.999, 1e-8);
        let g = 0.7;
        let mut w = 1.25_f64;
        let (mut m, mut v) = (0.0_f64, 0.0_f64);
        for t in 1..=2 {
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t));
            let vh = v / (1.0 - b2.powi(t));
            w -= lr * mh / (vh.sqrt() + eps);
        }

        let mut params = single(vec![1.25]);
        let mut opt = Adam::new(AdamConfig::with_lr(lr));
        for _ in 0..2 {
            opt.step(&mut params, &single(vec![g])).unwrap();
        }
        assert!((params.get("w").unwrap().values()[0] - w).abs() <= 1e-12);
    }

    #[test]
    fn clipping_rescales_large_gradients_only() {
        let mut g = ParamSet::new();
        g.insert("a", Tensor::vector(vec![3.0]).unwrap());
        g.insert("b", Tensor::vector(vec![4.0]).unwrap());
        assert_eq!(global_norm(&g), 5.0);

        // Clipping to 1 is the same as feeding the unclipped optimizer
        // gradients divided by max(1, norm).
        let cfg = AdamConfig::with_lr(0.1);
        let mut clipped = Adam::new(cfg.with_clip_norm(1.0));
        let mut plain = Adam::new(cfg);
        let (mut pc, mut pp) = (single(vec![0.0]), single(vec![0.0]));
        for g in [0.5, -3.0, 50.0, 0.25] {
            clipped.step(&mut pc, &single(vec![g])).unwrap();
            plain
                .step(&mut pp, &single(vec![g / f64::max(1.0, g.abs())]))
                .unwrap();
        }
        assert_eq!(pc, pp);
        let mut small = single(vec![0.0]);
        let mut a = Adam::new(cfg.with_clip_norm(1.0));
        let mut b = Adam::new(cfg);
        let mut small_b = small.clone();
        a.step(&mut small, &single(vec![0.5])).unwrap();
        b.step(&mut small_b, &single(vec![0.5])).unwrap();
        assert_eq!(small, small_b);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut params = single(vec![1.0, 2.0]);
        let mut opt = Adam::new(AdamConfig::default());
        let err = opt.step(&mut params, &single(vec![1.0])).unwrap_err();
        assert_eq!(err.category(), "dimension");
        assert_eq!(opt.steps_taken(), 0);
    }
}
