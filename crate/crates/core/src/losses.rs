//! Training objectives: contrastive, distillation, adversarial and branch losses.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{cosine, Var};

/// Additive floor on the similarity score so the weights always form a simplex.
pub const SIM_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SimWeighting {
    #[default]
    Cosine,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SimDistill {
    #[default]
    Kl,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub tau: f64,
    pub lambda_adv: f64,
    pub sim_weighting: SimWeighting,
    pub sim_distill: SimDistill,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { tau: 0.05, lambda_adv: 0.1, sim_weighting: SimWeighting::Cosine, sim_distill: SimDistill::Kl }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(Error::Config(format!("losses.tau must be > 0, got {}", self.tau)));
        }
        if !(self.lambda_adv >= 0.0) {
            return Err(Error::Config(format!("losses.lambda_adv must be >= 0, got {}", self.lambda_adv)));
        }
        Ok(())
    }
}

/// InfoNCE of one unit anchor `[P]` or `[1, P]` against positive rows `[n+, P]`
/// and negative rows `[n-, P]` (which may have zero rows).
pub fn info_nce<'t>(anchor: Var<'t>, positives: Var<'t>, negatives: Option<Var<'t>>, tau: f64) -> Result<Var<'t>> {
    let p = anchor.numel();
    let a = anchor.reshape(&[p, 1])?;
    let ps = positives.shape();
    if ps.len() != 2 || ps[1] != p || ps[0] == 0 {
        return Err(Error::contract(format!("info_nce needs >= 1 positive row of width {p}, got {ps:?}")));
    }
    let pos = positives.matmul(a)?.reshape(&[ps[0]])?;
    let neg = match negatives {
        Some(n) if n.shape()[0] > 0 => {
            let ns = n.shape();
            if ns.len() != 2 || ns[1] != p {
                return Err(Error::shape(format!("negatives {ns:?} for anchor width {p}")));
            }
            n.matmul(a)?.reshape(&[ns[0]])?
        }
        _ => anchor.tape().constant_from(vec![0], vec![])?,
    };
    pos.info_nce_scores(neg, tau)
}

/// `α_i ∝ max(cos(z_i, z), 0) + ε`.
pub fn similarity_weights(client_logits: &[&[f64]], server_logits: &[f64]) -> Result<Vec<f64>> {
    if client_logits.is_empty() {
        return Err(Error::contract("similarity_weights needs at least one client"));
    }
    let s: Vec<f64> = client_logits
        .iter()
        .map(|z| {
            if z.len() != server_logits.len() {
                return Err(Error::shape(format!("client logits {} vs server {}", z.len(), server_logits.len())));
            }
            Ok(cosine(z, server_logits).unwrap_or(0.0).max(0.0) + SIM_EPS)
        })
        .collect::<Result<_>>()?;
    let total: f64 = s.iter().sum();
    Ok(s.iter().map(|v| v / total).collect())
}

/// `ẑ = Σ α_i z_i`.
pub fn aggregate_logits(alpha: &[f64], client_logits: &[&[f64]]) -> Result<Vec<f64>> {
    if alpha.len() != client_logits.len() || alpha.is_empty() {
        return Err(Error::contract(format!("{} weights for {} logit maps", alpha.len(), client_logits.len())));
    }
    let n = client_logits[0].len();
    if client_logits.iter().any(|z| z.len() != n) {
        return Err(Error::contract("aggregate_logits over maps of different sizes"));
    }
    let mut out = vec![0.0; n];
    for (a, z) in alpha.iter().zip(client_logits) {
        for (o, v) in out.iter_mut().zip(z.iter()) {
            *o += a * v;
        }
    }
    Ok(out)
}

/// `KL(softmax(ẑ) || softmax(z))` averaged over positions; `z_hat` must be a constant.
pub fn distill_loss<'t>(z: Var<'t>, z_hat: Var<'t>) -> Result<Var<'t>> {
    if z_hat.requires_grad() {
        return Err(Error::contract("distillation teacher must be detached"));
    }
    z_hat.kl_divergence(z)
}

/// `L_g = L_distill + L_inter`.
pub fn server_loss<'t>(distill: Var<'t>, inter: Var<'t>) -> Result<Var<'t>> {
    distill.add(inter)
}

/// Standard BCE of discriminator outputs against true branch labels
/// (1 = global, 0 = local).
pub fn discriminator_loss<'t>(p_hat: Var<'t>, labels: &[f64]) -> Result<Var<'t>> {
    p_hat.binary_cross_entropy(labels)
}

/// Confusion form for a branch: BCE against the flipped label.
pub fn confusion_loss<'t>(p_hat: Var<'t>, true_label: f64) -> Result<Var<'t>> {
    let flipped = vec![1.0 - true_label; p_hat.numel()];
    p_hat.binary_cross_entropy(&flipped)
}

/// Scalar parts of the two branch objectives.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct BranchParts {
    pub seg_global: f64,
    pub seg_local: f64,
    pub adv_global: f64,
    pub adv_local: f64,
    pub intra: f64,
    pub lambda: f64,
}

impl BranchParts {
    pub fn global_total(&self) -> f64 {
        self.seg_global + self.lambda * self.adv_global
    }

    pub fn local_total(&self) -> f64 {
        self.seg_local + self.lambda * self.adv_local + self.intra
    }
}

/// `L_global = seg_g + λ adv_g`, `L_local = seg_l + λ adv_l + intra`.
/// Missing adversarial or intra terms count as zero.
pub fn branch_losses<'t>(
    seg_global: Var<'t>,
    seg_local: Var<'t>,
    adv_global: Option<Var<'t>>,
    adv_local: Option<Var<'t>>,
    intra: Option<Var<'t>>,
    lambda_t: f64,
) -> Result<(Var<'t>, Var<'t>, BranchParts)> {
    if !(lambda_t >= 0.0) {
        return Err(Error::contract(format!("lambda must be >= 0, got {lambda_t}")));
    }
    let mut parts = BranchParts { seg_global: seg_global.item()?, seg_local: seg_local.item()?, lambda: lambda_t, ..Default::default() };
    let mut lg = seg_global;
    let mut ll = seg_local;
    if let Some(a) = adv_global {
        parts.adv_global = a.item()?;
        if lambda_t > 0.0 {
            lg = lg.add(a.scale(lambda_t)?)?;
        }
    }
    if let Some(a) = adv_local {
        parts.adv_local = a.item()?;
        if lambda_t > 0.0 {
            ll = ll.add(a.scale(lambda_t)?)?;
        }
    }
    if let Some(i) = intra {
        parts.intra = i.item()?;
        ll = ll.add(i)?;
    }
    Ok((lg, ll, parts))
}
