use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::LossConfig;
use crate::model::ModelConfig;
use crate::prototype::PrototypeConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    #[default]
    Fedsaas,
    Fedavg,
}

/// Synthetic validation drop subtracted from the stability metric of one round.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ValDrop {
    pub round: usize,
    pub amount: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FederationConfig {
    /// Number of domains generated; one of them may be held out.
    pub num_clients: usize,
    pub rounds: usize,
    pub local_iters: usize,
    pub batch_size: usize,
    pub client_fraction: f64,
    pub upload_ratio: f64,
    pub warmup_rounds: usize,
    pub rollback_drop_threshold: f64,
    /// Gradient-norm clip on discriminator and server steps.
    pub clip_norm: f64,
    pub use_proto: bool,
    pub use_multicon: bool,
    pub use_adv: bool,
    pub algorithm: Algorithm,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub server_learning_rate: f64,
    /// Exemplars per distillation step.
    pub distill_batch: usize,
    /// Anchors per contrastive term.
    pub contrastive_anchors: usize,
    pub include_background: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub inject_val_drop: Option<ValDrop>,
}

impl Default for FederationConfig {
    fn default() -> Self {
        Self {
            num_clients: 4,
            rounds: 50,
            local_iters: 10,
            batch_size: 16,
            client_fraction: 1.0,
            upload_ratio: 1.0,
            warmup_rounds: 5,
            rollback_drop_threshold: 0.05,
            clip_norm: 1.0,
            use_proto: true,
            use_multicon: true,
            use_adv: true,
            algorithm: Algorithm::Fedsaas,
            learning_rate: 0.05,
            weight_decay: 5e-4,
            server_learning_rate: 0.05,
            distill_batch: 64,
            contrastive_anchors: 1,
            include_background: true,
            inject_val_drop: None,
        }
    }
}

impl FederationConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.num_clients < 2 {
            return bad(format!("federation.num_clients must be >= 2, got {}", self.num_clients));
        }
        if self.rounds < 1 {
            return bad("federation.rounds must be >= 1".into());
        }
        if self.local_iters < 1 || self.batch_size < 1 {
            return bad("federation.local_iters and batch_size must be >= 1".into());
        }
        if !(self.client_fraction > 0.0 && self.client_fraction <= 1.0) {
            return bad(format!("federation.client_fraction must be in (0, 1], got {}", self.client_fraction));
        }
        if !(self.upload_ratio > 0.0 && self.upload_ratio <= 1.0) {
            return bad(format!("federation.upload_ratio must be in (0, 1], got {}", self.upload_ratio));
        }
        if !(self.rollback_drop_threshold >= 0.0) {
            return bad("federation.rollback_drop_threshold must be >= 0".into());
        }
        if !(self.clip_norm > 0.0) {
            return bad("federation.clip_norm must be > 0".into());
        }
        for (k, v) in [
            ("learning_rate", self.learning_rate),
            ("server_learning_rate", self.server_learning_rate),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("federation.{k} must be > 0, got {v}"));
            }
        }
        if !(self.weight_decay >= 0.0) {
            return bad("federation.weight_decay must be >= 0".into());
        }
        if self.distill_batch < 1 || self.contrastive_anchors < 1 {
            return bad("federation.distill_batch and contrastive_anchors must be >= 1".into());
        }
        if let Some(d) = self.inject_val_drop {
            if d.round < 1 || !d.amount.is_finite() {
                return bad("federation.inject_val_drop needs round >= 1 and a finite amount".into());
            }
        }
        Ok(())
    }

    /// Exemplars are extracted and uploaded only when some component consumes them.
    pub fn needs_exemplars(&self) -> bool {
        self.algorithm == Algorithm::Fedsaas && (self.use_proto || self.use_multicon)
    }

    pub fn prototypes_on(&self) -> bool {
        self.algorithm == Algorithm::Fedsaas && self.use_proto
    }

    pub fn multicon_on(&self) -> bool {
        self.algorithm == Algorithm::Fedsaas && self.use_multicon
    }

    pub fn adv_on(&self) -> bool {
        self.algorithm == Algorithm::Fedsaas && self.use_adv
    }
}

/// Everything a simulation needs besides data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub federation: FederationConfig,
    pub losses: LossConfig,
    pub model: ModelConfig,
    pub prototype: PrototypeConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.federation.validate()?;
        self.losses.validate()?;
        self.model.validate()?;
        if self.prototype.radius == 0 {
            return Err(Error::Config("prototype.radius must be >= 1".into()));
        }
        if let Some(s) = self.prototype.sigma {
            if !(s > 0.0) {
                return Err(Error::Config(format!("prototype.sigma must be > 0, got {s}")));
            }
        }
        Ok(())
    }
}

/// `λ_t = λ_target · min(1, t / warmup)`.
pub fn lambda_schedule(t: usize, warmup_rounds: usize, lambda_target: f64) -> f64 {
    if warmup_rounds == 0 {
        return if t == 0 { 0.0 } else { lambda_target };
    }
    lambda_target * (t as f64 / warmup_rounds as f64).min(1.0)
}
