use rand::seq::index;
use serde::{Deserialize, Serialize};

use super::client::apply_step;
use super::contrastive::{contrastive_loss, sample_triplets};
use crate::error::{Error, Result};
use crate::exemplar::{ClassExemplar, ExemplarStore};
use crate::losses::{aggregate_logits, distill_loss, server_loss, similarity_weights};
use crate::model::{Branch, ParamBlob, ParamSet, WeightGenerator};
use crate::numcore::{GradTape, SgdConfig, Tensor};
use crate::prototype::PrototypeSet;
use crate::seed;

#[derive(Debug, Clone)]
pub struct ServerState {
    pub global: Branch,
    pub generator: WeightGenerator,
    pub store: ExemplarStore,
    pub prototypes: Option<PrototypeSet>,
    pub round: usize,
}

/// Element-wise mean of uploaded parameter blobs, in the order given.
/// The running-mean form keeps identical uploads bit-exact.
pub fn aggregate_global(uploads: &[&ParamBlob]) -> Result<ParamBlob> {
    let first = uploads.first().ok_or_else(|| Error::contract("aggregate_global needs at least one upload"))?;
    let mut mean = first.values()?;
    for (k, u) in uploads.iter().enumerate().skip(1) {
        if u.manifest != first.manifest || u.payload.len() != first.payload.len() {
            return Err(Error::contract(format!("upload {k} has a different parameter layout")));
        }
        let n = (k + 1) as f64;
        for (m, v) in mean.iter_mut().zip(u.values()?) {
            *m += (v - *m) / n;
        }
    }
    let mut payload = Vec::with_capacity(first.payload.len());
    for v in mean {
        payload.extend_from_slice(&v.to_le_bytes());
    }
    Ok(ParamBlob { manifest: first.manifest.clone(), payload })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ServerStats {
    pub distill: f64,
    pub inter: f64,
    pub total: f64,
    /// Exemplars dropped from the batch because no other client uploaded.
    pub skipped: usize,
    pub batch: usize,
    pub stepped: bool,
}

pub struct DistillPlan<'a> {
    pub seed: u64,
    pub round: usize,
    pub distill: bool,
    pub inter: bool,
    pub batch: usize,
    pub anchors: usize,
    pub tau: f64,
    pub sgd: SgdConfig,
    /// Prototype kernel broadcast this round, `[C, K, 1, 1]`.
    pub broadcast_kernel: Option<&'a Tensor>,
}

/// Feature-resolution logits of `branch` on a batch of exemplars, no gradient.
/// Nearest upsampling replicates every cell equally, so cosine weights and
/// position-averaged KL are unchanged at this resolution.
fn branch_logits(branch: &Branch, x: &Tensor, kernel: Option<&Tensor>) -> Result<Vec<f64>> {
    let tape = GradTape::no_grad();
    let k = kernel.map(|k| tape.constant(k));
    Ok(branch.forward(&tape, tape.constant(x), k)?.low_logits.to_vec())
}

fn stack_exemplars(batch: &[&ClassExemplar]) -> Result<Tensor> {
    let s = batch[0].feature.shape().to_vec();
    let mut data = Vec::with_capacity(batch.len() * batch[0].feature.numel());
    for e in batch {
        if e.feature.shape() != s.as_slice() {
            return Err(Error::shape(format!("exemplar {:?} in a batch of {s:?}", e.feature.shape())));
        }
        data.extend_from_slice(e.feature.data());
    }
    Tensor::new(vec![batch.len(), s[0], s[1], s[2]], data)
}

impl ServerState {
    /// One optimizer step on `L_g = L_distill + L_inter` over W^G, Θ^G and f_w.
    /// `uploads` are the aggregated-over clients' global branches, sorted by id.
    pub fn distill_step(&mut self, uploads: &[(u32, Branch)], plan: &DistillPlan<'_>) -> Result<ServerStats> {
        let mut stats = ServerStats::default();
        if self.store.is_empty() {
            return Ok(stats);
        }
        let mut rng = seed::rng(&[plan.seed, seed::SERVER, plan.round as u64]);
        let pool = self.store.as_vec();
        let tape = GradTape::new();
        let mut distill = None;
        if plan.distill {
            let prototypes = self.prototypes.as_ref().ok_or_else(|| Error::contract("distillation before prototypes exist"))?;
            let picks = index::sample(&mut rng, pool.len(), plan.batch.min(pool.len())).into_vec();
            let batch: Vec<&ClassExemplar> = picks
                .iter()
                .map(|&i| pool[i])
                .filter(|e| uploads.iter().any(|(id, _)| *id != e.client_id))
                .collect();
            stats.skipped = picks.len() - batch.len();
            stats.batch = batch.len();
            if !batch.is_empty() {
                let x = stack_exemplars(&batch)?;
                let kernel = self.generator.kernel(&tape, &prototypes.vectors())?;
                let z = self.global.forward(&tape, tape.constant(&x), Some(kernel))?.low_logits;
                let z_server = z.to_vec();
                let client_z: Vec<(u32, Vec<f64>)> = uploads
                    .iter()
                    .map(|(id, b)| Ok((*id, branch_logits(b, &x, plan.broadcast_kernel)?)))
                    .collect::<Result<_>>()?;
                let per = z_server.len() / batch.len();
                let mut teacher = Vec::with_capacity(z_server.len());
                for (j, e) in batch.iter().enumerate() {
                    let span = j * per..(j + 1) * per;
                    let others: Vec<&[f64]> =
                        client_z.iter().filter(|(id, _)| *id != e.client_id).map(|(_, z)| &z[span.clone()]).collect();
                    let alpha = similarity_weights(&others, &z_server[span])?;
                    teacher.extend(aggregate_logits(&alpha, &others)?);
                }
                let z_hat = tape.constant_from(z.shape(), teacher)?;
                let l = distill_loss(z, z_hat)?;
                stats.distill = l.item()?;
                distill = Some(l);
            }
        }
        let mut inter = None;
        if plan.inter {
            let triplets = sample_triplets(&pool, plan.anchors, true, &mut rng);
            match contrastive_loss(&tape, &self.global.extractor, &pool, &triplets, plan.tau) {
                Ok(v) => inter = v,
                Err(Error::DegenerateExemplar(_)) => {}
                Err(e) => return Err(e),
            }
            if let Some(v) = inter {
                stats.inter = v.item()?;
            }
        }
        let loss = match (distill, inter) {
            (Some(d), Some(i)) => server_loss(d, i)?,
            (Some(d), None) => d,
            (None, Some(i)) => i,
            (None, None) => return Ok(stats),
        };
        stats.total = loss.item()?;
        tape.backward(loss)?;
        let mut params = self.global.params_mut();
        params.extend(self.generator.params_mut());
        apply_step(&tape, params, &plan.sgd)?;
        stats.stepped = true;
        Ok(stats)
    }
}
