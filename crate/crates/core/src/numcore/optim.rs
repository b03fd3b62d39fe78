use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

/// Plain SGD with L2 weight decay and optional global-norm clipping.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SgdConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    #[serde(default)]
    pub clip_norm: Option<f64>,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self { learning_rate: 0.05, weight_decay: 5e-4, clip_norm: None }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config(format!("learning_rate must be a positive number, got {}", self.learning_rate)));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config(format!("weight_decay must be >= 0, got {}", self.weight_decay)));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return Err(Error::Config(format!("clip_norm must be > 0, got {c}")));
            }
        }
        Ok(())
    }
}

/// Applies `p <- p - lr * (scale * grad + weight_decay * p)` to every parameter,
/// where `scale` shrinks the joint gradient to `clip_norm` when it is exceeded.
/// Gradients are cleared afterwards. Returns the pre-clipping global norm.
pub fn sgd_step(params: &mut [&mut Tensor], cfg: &SgdConfig) -> Result<f64> {
    let mut sq = 0.0;
    for (i, p) in params.iter().enumerate() {
        let g = p
            .grad()
            .ok_or_else(|| Error::contract(format!("parameter {i} (shape {:?}) has no gradient", p.shape())))?;
        sq += g.iter().map(|v| v * v).sum::<f64>();
    }
    let norm = sq.sqrt();
    let scale = match cfg.clip_norm {
        Some(c) if norm > c => c / norm,
        _ => 1.0,
    };
    for p in params.iter_mut() {
        let g = p.grad().expect("checked above").to_vec();
        let lr = cfg.learning_rate;
        let wd = cfg.weight_decay;
        for (v, gv) in p.data_mut().iter_mut().zip(&g) {
            *v -= lr * (scale * gv + wd * *v);
        }
        p.clear_grad();
    }
    Ok(norm)
}
