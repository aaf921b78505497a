//! Sigmoid classification layer over the fused representation.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::INIT_STD;
use crate::error::{Error, Result};
use crate::tensorcore::{sigmoid, ParamSet, Tape, Tensor, Var};

pub const DEFAULT_THRESHOLD: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub probability: f64,
    /// 1 = parody. Probabilities exactly at the threshold count as parody.
    pub label: u8,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadParams {
    pub weight: Vec<f64>,
    pub bias: f64,
    pub threshold: f64,
}

impl HeadParams {
    /// Reads `{prefix}w` / `{prefix}b` out of a model parameter set.
    pub fn from_params(params: &ParamSet, prefix: &str, threshold: f64) -> Result<Self> {
        Ok(Self {
            weight: params.require(&format!("{prefix}w"))?.values().to_vec(),
            bias: params.require(&format!("{prefix}b"))?.item(),
            threshold,
        })
    }

    pub fn logit(&self, fused: &[f64]) -> Result<f64> {
        if fused.len() != self.weight.len() {
            return Err(Error::shape(
                "predict",
                format!(
                    "fused length {} vs head weight {}",
                    fused.len(),
                    self.weight.len()
                ),
            ));
        }
        Ok(self
            .weight
            .iter()
            .zip(fused)
            .map(|(w, f)| w * f)
            .sum::<f64>()
            + self.bias)
    }

    pub fn predict(&self, fused: &[f64]) -> Result<Prediction> {
        Ok(prediction(self.logit(fused)?, self.threshold))
    }
}

pub fn prediction(logit: f64, threshold: f64) -> Prediction {
    let probability = sigmoid(logit);
    Prediction {
        probability,
        label: u8::from(probability >= threshold),
    }
}

/// `{prefix}w: [fused_dim, 1]`, `{prefix}b: [1]`.
pub fn init_head_params<R: Rng + ?Sized>(fused_dim: usize, rng: &mut R) -> ParamSet {
    let mut p = ParamSet::new();
    p.insert("w", Tensor::randn(&[fused_dim, 1], INIT_STD, rng));
    p.insert("b", Tensor::zeros(&[1]));
    p
}

/// Logits `[batch, 1]` for fused `[batch, fused_dim]`.
pub fn head_logits(tape: &mut Tape, params: &ParamSet, prefix: &str, fused: Var) -> Result<Var> {
    let w = tape.param(params, &format!("{prefix}w"))?;
    let b = tape.param(params, &format!("{prefix}b"))?;
    let z = tape.matmul(fused, w)?;
    tape.add_bias(z, b)
}
