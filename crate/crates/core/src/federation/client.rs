use rand::seq::index;
use serde::{Deserialize, Serialize};

use super::config::Algorithm;
use super::contrastive::{contrastive_loss, sample_triplets};
use crate::error::{Error, Result};
use crate::exemplar::ClassExemplar;
use crate::losses::{branch_losses, confusion_loss, discriminator_loss};
use crate::metrics::stack_images;
use crate::model::{deserialize_params, serialize_params, Discriminator, ParamBlob, ParamSet, TwoBranchModel, WeightGenerator, FEATURE_STRIDE};
use crate::numcore::{sgd_step, GradTape, SgdConfig, Tensor};
use crate::prototype::ClassPrototype;
use crate::seed;
use crate::synthdata::LabeledImage;

/// Label value that no mask uses; nothing is ignored in practice.
pub const IGNORE_LABEL: u8 = 255;

#[derive(Debug, Clone)]
pub struct ClientState {
    pub client_id: u32,
    pub model: TwoBranchModel,
    pub disc: Discriminator,
    /// Frozen copy of the server's weight generator, refreshed every round.
    pub generator: WeightGenerator,
    pub train: Vec<LabeledImage>,
    pub val: Vec<LabeledImage>,
    /// Every local exemplar (uploaded or not), used for the intra-client term.
    pub exemplars: Vec<ClassExemplar>,
}

/// What the server sends a selected client at the start of a round.
#[derive(Debug, Clone)]
pub enum Broadcast {
    /// Segmentation head, prototypes and weight generator; the extractor stays local.
    Head { head: ParamBlob, prototypes: Vec<ClassPrototype>, generator: ParamBlob },
    /// Whole global branch (extractor and head).
    Branch(ParamBlob),
}

impl Broadcast {
    pub fn byte_len(&self) -> usize {
        match self {
            Broadcast::Head { head, prototypes, generator } => {
                head.byte_len() + crate::prototype::prototype_payload_bytes(prototypes) + generator.byte_len()
            }
            Broadcast::Branch(b) => b.byte_len(),
        }
    }
}

/// Per-round settings shared by all clients.
#[derive(Debug, Clone)]
pub struct RoundPlan {
    pub seed: u64,
    pub round: usize,
    pub algorithm: Algorithm,
    pub lambda: f64,
    pub use_adv: bool,
    pub use_multicon: bool,
    pub local_iters: usize,
    pub batch_size: usize,
    pub sgd: SgdConfig,
    pub disc_sgd: SgdConfig,
    pub tau: f64,
    pub anchors: usize,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ClientStats {
    pub seg_global: f64,
    pub seg_local: f64,
    pub adv_global: f64,
    pub adv_local: f64,
    pub intra: f64,
    pub discriminator: f64,
}

impl ClientStats {
    fn add(&mut self, o: &ClientStats) {
        self.seg_global += o.seg_global;
        self.seg_local += o.seg_local;
        self.adv_global += o.adv_global;
        self.adv_local += o.adv_local;
        self.intra += o.intra;
        self.discriminator += o.discriminator;
    }

    pub(crate) fn scaled(mut self, f: f64) -> Self {
        self.seg_global *= f;
        self.seg_local *= f;
        self.adv_global *= f;
        self.adv_local *= f;
        self.intra *= f;
        self.discriminator *= f;
        self
    }
}

#[derive(Debug, Clone)]
pub struct ClientOutcome {
    pub client_id: u32,
    pub upload: Option<ParamBlob>,
    pub stats: ClientStats,
    pub fault: Option<String>,
}

/// Adds the tape's gradients to `params` and steps every tensor that received one.
pub(crate) fn apply_step(tape: &GradTape, mut params: Vec<&mut Tensor>, cfg: &SgdConfig) -> Result<f64> {
    tape.accumulate_into(&mut params)?;
    let mut touched: Vec<&mut Tensor> = params.into_iter().filter(|p| p.grad().is_some()).collect();
    if touched.is_empty() {
        return Ok(0.0);
    }
    sgd_step(&mut touched, cfg)
}

impl ClientState {
    pub fn apply_broadcast(&mut self, bc: &Broadcast) -> Result<()> {
        match bc {
            Broadcast::Head { head, prototypes, generator } => {
                deserialize_params(&mut self.model.global.head, head)?;
                self.model.global.head.set_trainable(false);
                deserialize_params(&mut self.generator, generator)?;
                self.generator.set_trainable(false);
                let vectors: Vec<Vec<f64>> = prototypes.iter().map(|p| p.g.clone()).collect();
                self.model.install_prototype_conv(&vectors, &self.generator)
            }
            Broadcast::Branch(b) => {
                deserialize_params(&mut self.model.global, b)?;
                self.model.global.set_trainable(true);
                self.model.prototype_conv = None;
                Ok(())
            }
        }
    }

    fn local_step(&mut self, plan: &RoundPlan, rng: &mut rand_chacha::ChaCha8Rng) -> Result<ClientStats> {
        let n = self.train.len();
        let picks = index::sample(rng, n, plan.batch_size.min(n)).into_vec();
        let imgs: Vec<&LabeledImage> = picks.iter().map(|&i| &self.train[i]).collect();
        let x = stack_images(&imgs)?;
        let targets: Vec<u8> = imgs.iter().flat_map(|im| im.mask.data.iter().copied()).collect();
        let tape = GradTape::new();
        let xv = tape.constant(&x);
        let g = self.model.forward_global(&tape, xv)?;
        let seg_g = g.low_logits.upsampled_cross_entropy(&targets, FEATURE_STRIDE, IGNORE_LABEL)?;
        let mut stats = ClientStats { seg_global: seg_g.item()?, ..Default::default() };
        if plan.algorithm == Algorithm::Fedavg {
            tape.backward(seg_g)?;
            apply_step(&tape, self.model.global.params_mut(), &plan.sgd)?;
            return Ok(stats);
        }
        let l = self.model.forward_local(&tape, xv)?;
        let seg_l = l.low_logits.upsampled_cross_entropy(&targets, FEATURE_STRIDE, IGNORE_LABEL)?;

        let (mut adv_g, mut adv_l) = (None, None);
        if plan.use_adv {
            let pg = g.low_logits.global_avg_pool()?;
            let pl = l.low_logits.global_avg_pool()?;
            let b = pg.shape()[0];
            let c = pg.shape()[1];
            let dtape = GradTape::new();
            let mut pooled = pg.to_vec();
            pooled.extend(pl.to_vec());
            let inp = dtape.constant_from(vec![2 * b, c], pooled)?;
            let p_hat = self.disc.forward_pooled(&dtape, inp)?;
            let mut labels = vec![1.0; b];
            labels.extend(std::iter::repeat_n(0.0, b));
            let ld = discriminator_loss(p_hat, &labels)?;
            stats.discriminator = ld.item()?;
            dtape.backward(ld)?;
            apply_step(&dtape, self.disc.params_mut(), &plan.disc_sgd)?;

            self.disc.set_trainable(false);
            let res = (|| {
                let ag = confusion_loss(self.disc.forward_pooled(&tape, pg)?, 1.0)?;
                let al = confusion_loss(self.disc.forward_pooled(&tape, pl)?, 0.0)?;
                Ok::<_, Error>((ag, al))
            })();
            self.disc.set_trainable(true);
            let (ag, al) = res?;
            adv_g = Some(ag);
            adv_l = Some(al);
        }

        let mut intra = None;
        if plan.use_multicon && !self.exemplars.is_empty() {
            let pool: Vec<&ClassExemplar> = self.exemplars.iter().collect();
            let triplets = sample_triplets(&pool, plan.anchors, false, rng);
            match contrastive_loss(&tape, &self.model.local.extractor, &pool, &triplets, plan.tau) {
                Ok(v) => intra = v,
                // an exemplar collapsed to a zero embedding; skip the term this step
                Err(Error::DegenerateExemplar(_)) => {}
                Err(e) => return Err(e),
            }
        }

        let (lg, ll, parts) = branch_losses(seg_g, seg_l, adv_g, adv_l, intra, plan.lambda)?;
        stats.seg_local = parts.seg_local;
        stats.adv_global = parts.adv_global;
        stats.adv_local = parts.adv_local;
        stats.intra = parts.intra;
        tape.backward(lg.add(ll)?)?;
        let mut params = self.model.global.params_mut();
        params.extend(self.model.local.params_mut());
        apply_step(&tape, params, &plan.sgd)?;
        Ok(stats)
    }
}

/// One client's share of a round: apply the broadcast, train locally, upload
/// the global branch. A numeric fault restores the pre-round state.
pub fn client_round(client: &mut ClientState, bc: &Broadcast, plan: &RoundPlan) -> ClientOutcome {
    let backup = client.clone_models();
    let mut rng = seed::rng(&[plan.seed, seed::CLIENT, u64::from(client.client_id), plan.round as u64]);
    let run = |c: &mut ClientState, rng: &mut rand_chacha::ChaCha8Rng| -> Result<ClientStats> {
        c.apply_broadcast(bc)?;
        let mut acc = ClientStats::default();
        for _ in 0..plan.local_iters {
            acc.add(&c.local_step(plan, rng)?);
        }
        Ok(acc.scaled(1.0 / plan.local_iters as f64))
    };
    match run(client, &mut rng) {
        Ok(stats) => ClientOutcome {
            client_id: client.client_id,
            upload: Some(serialize_params(&client.model.global)),
            stats,
            fault: None,
        },
        Err(e) => {
            client.restore_models(backup);
            ClientOutcome { client_id: client.client_id, upload: None, stats: ClientStats::default(), fault: Some(e.to_string()) }
        }
    }
}

impl ClientState {
    pub(crate) fn clone_models(&self) -> (TwoBranchModel, Discriminator, WeightGenerator) {
        (self.model.clone(), self.disc.clone(), self.generator.clone())
    }

    pub(crate) fn restore_models(&mut self, m: (TwoBranchModel, Discriminator, WeightGenerator)) {
        self.model = m.0;
        self.disc = m.1;
        self.generator = m.2;
    }
}
