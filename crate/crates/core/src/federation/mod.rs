//! Round orchestration: broadcast, local training, upload, aggregation,
//! server distillation, prototype refresh, evaluation and rollback.

mod checkpoint;
mod client;
mod config;
mod contrastive;
mod ledger;
mod server;

use std::collections::BTreeSet;

use rand::seq::index;
use rayon::prelude::*;

pub use checkpoint::{read_checkpoint, Checkpoint, CheckpointManifest};
pub use client::{client_round, Broadcast, ClientOutcome, ClientState, ClientStats, RoundPlan, IGNORE_LABEL};
pub use config::{lambda_schedule, Algorithm, FederationConfig, RunConfig, ValDrop};
pub use contrastive::{contrastive_loss, sample_triplets, Triplet, MAX_NEGATIVES, MAX_POSITIVES};
pub use ledger::{write_ledger_jsonl, write_summary_csv, LossMeans, RoundRecord, SummaryRow};
pub use server::{aggregate_global, DistillPlan, ServerState, ServerStats};

use crate::error::{Error, Result};
use crate::exemplar::{deserialize_exemplar, extract_exemplars, select_upload, serialize_exemplar, ExemplarStore};
use crate::metrics::{evaluate_client, ClientScore, EvalMode, EvalReport};
use crate::model::{
    deserialize_params, serialize_params, Branch, Discriminator, ExemplarFcn, ParamSet, TwoBranchModel,
    WeightGenerator,
};
use crate::numcore::{GradTape, SgdConfig, Tensor};
use crate::prototype::build_prototypes;
use crate::seed;
use crate::synthdata::{FederatedData, LabeledImage};

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ProbeReport {
    pub train_accuracy: f64,
    pub heldout_accuracy: f64,
    pub train_samples: usize,
    pub heldout_samples: usize,
}

pub struct Simulation {
    pub cfg: RunConfig,
    pub num_classes: usize,
    pub fcn: ExemplarFcn,
    pub server: ServerState,
    pub clients: Vec<ClientState>,
    pub unseen: Option<Vec<LabeledImage>>,
    pub ledger: Vec<RoundRecord>,
    pub best: Option<Checkpoint>,
    pub rollbacks: usize,
    pool: rayon::ThreadPool,
}

impl Simulation {
    /// Seeded initialization, exemplar extraction and the one-time upload.
    pub fn setup(cfg: RunConfig, data: FederatedData, workers: usize) -> Result<Self> {
        cfg.validate()?;
        if data.clients.is_empty() {
            return Err(Error::Setup("no participating clients".into()));
        }
        if let Some(c) = data.clients.iter().find(|c| c.train.is_empty() || c.val.is_empty()) {
            return Err(Error::Setup(format!("client {} has an empty train or val split", c.client_id)));
        }
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers.max(1))
            .build()
            .map_err(|e| Error::Setup(format!("worker pool: {e}")))?;
        let k = cfg.model.channels;
        let c = data.num_classes;
        let s = cfg.seed;
        let template = TwoBranchModel::new(k, c, &mut seed::rng(&[s, seed::INIT, 1]));
        let disc = Discriminator::new(c, &mut seed::rng(&[s, seed::INIT, 2]));
        let fcn = ExemplarFcn::new(&mut seed::rng(&[s, seed::INIT, 3]));
        let generator = WeightGenerator::new(k, &mut seed::rng(&[s, seed::INIT, 4]));
        let fed = &cfg.federation;

        let mut clients: Vec<ClientState> = data
            .clients
            .into_iter()
            .map(|d| ClientState {
                client_id: d.client_id,
                model: template.clone(),
                disc: disc.clone(),
                generator: generator.clone(),
                train: d.train,
                val: d.val,
                exemplars: Vec::new(),
            })
            .collect();
        clients.sort_by_key(|c| c.client_id);

        let mut store = ExemplarStore::new();
        let mut exemplar_bytes = 0usize;
        let mut exemplar_count = 0usize;
        if fed.needs_exemplars() {
            let include_bg = fed.include_background;
            let extracted: Vec<Result<Vec<crate::exemplar::ClassExemplar>>> = pool.install(|| {
                clients
                    .par_iter()
                    .map(|cl| {
                        let mut all = Vec::new();
                        for im in &cl.train {
                            all.extend(extract_exemplars(&fcn, im, include_bg)?);
                        }
                        Ok(all)
                    })
                    .collect()
            });
            for (cl, ex) in clients.iter_mut().zip(extracted) {
                cl.exemplars = ex?;
                if cl.exemplars.is_empty() {
                    return Err(Error::Setup(format!("client {} produced no exemplars", cl.client_id)));
                }
                let mut rng = seed::rng(&[s, seed::UPLOAD, u64::from(cl.client_id)]);
                for i in select_upload(&cl.exemplars, fed.upload_ratio, &mut rng)? {
                    let bytes = serialize_exemplar(&cl.exemplars[i])?;
                    exemplar_bytes += bytes.len();
                    exemplar_count += 1;
                    store.insert(deserialize_exemplar(&bytes)?)?;
                }
            }
        }

        let mut server =
            ServerState { global: template.global.clone(), generator, store, prototypes: None, round: 0 };
        if fed.prototypes_on() {
            server.prototypes = Some(build_prototypes(&server.global.extractor, server.store.iter(), c, &cfg.prototype)?);
        }

        let mut sim = Self {
            num_classes: c,
            fcn,
            server,
            clients,
            unseen: data.unseen,
            ledger: Vec::new(),
            best: None,
            rollbacks: 0,
            pool,
            cfg,
        };
        let mut rec = RoundRecord::empty(0);
        rec.bytes_up = exemplar_bytes as u64;
        rec.exemplars_uploaded = exemplar_count;
        rec.selected = sim.clients.iter().map(|c| c.client_id).collect();
        rec.params_hash = sim.params_hash();
        sim.ledger.push(rec);
        Ok(sim)
    }

    pub fn round(&self) -> usize {
        self.server.round
    }

    pub fn eval_mode(&self) -> EvalMode {
        match self.cfg.federation.algorithm {
            Algorithm::Fedsaas => EvalMode::Fused,
            Algorithm::Fedavg => EvalMode::GlobalOnly,
        }
    }

    /// Hash over the server branch, weight generator and every client's
    /// branches and discriminator.
    pub fn params_hash(&self) -> String {
        checkpoint::federation_hash(&self.server.global, &self.server.generator, self.clients.iter().map(|c| (&c.model, &c.disc)))
    }

    /// Current state of the whole federation.
    pub fn snapshot(&self, metric: f64) -> Checkpoint {
        Checkpoint {
            round: self.server.round,
            metric,
            server_global: self.server.global.clone(),
            generator: self.server.generator.clone(),
            prototypes: self.server.prototypes.clone(),
            client_ids: self.clients.iter().map(|c| c.client_id).collect(),
            clients: self.clients.iter().map(|c| c.clone_models()).collect(),
            hash: self.params_hash(),
        }
    }

    fn select_clients(&self, round: usize) -> Vec<u32> {
        let n = self.clients.len();
        let frac = self.cfg.federation.client_fraction;
        if frac >= 1.0 {
            return self.clients.iter().map(|c| c.client_id).collect();
        }
        let m = ((frac * n as f64).ceil() as usize).clamp(1, n);
        let mut rng = seed::rng(&[self.cfg.seed, seed::SELECT, round as u64]);
        let mut picked: Vec<u32> =
            index::sample(&mut rng, n, m).into_iter().map(|i| self.clients[i].client_id).collect();
        picked.sort_unstable();
        picked
    }

    fn broadcast(&self) -> Broadcast {
        if self.cfg.federation.prototypes_on() {
            let prototypes = self.server.prototypes.as_ref().map(|p| p.prototypes.clone()).unwrap_or_default();
            Broadcast::Head {
                head: serialize_params(&self.server.global.head),
                prototypes,
                generator: serialize_params(&self.server.generator),
            }
        } else {
            Broadcast::Branch(serialize_params(&self.server.global))
        }
    }

    /// Mean validation report over all participating clients.
    pub fn evaluate_val(&self) -> Result<EvalReport> {
        self.evaluate_on(|c| &c.val)
    }

    fn evaluate_on<'a>(&'a self, set: impl Fn(&'a ClientState) -> &'a [LabeledImage] + Sync) -> Result<EvalReport> {
        let jobs: Vec<(u32, &TwoBranchModel, &[LabeledImage])> =
            self.clients.iter().map(|c| (c.client_id, &c.model, set(c))).collect();
        self.pool.install(|| evaluate_models(&jobs, self.eval_mode()))
    }

    /// Every client's model on the held-out domain, averaged.
    pub fn evaluate_unseen(&self) -> Result<Option<EvalReport>> {
        match &self.unseen {
            None => Ok(None),
            Some(u) => self.evaluate_on(|_| u.as_slice()).map(Some),
        }
    }

    /// Validation report with the unseen-domain sub-report attached.
    pub fn final_report(&self) -> Result<EvalReport> {
        let mut r = self.evaluate_val()?;
        r.unseen_domain = self.evaluate_unseen()?.map(Box::new);
        Ok(r)
    }

    pub fn run(&mut self) -> Result<()> {
        while self.server.round < self.cfg.federation.rounds {
            self.run_round()?;
        }
        Ok(())
    }

    pub fn run_round(&mut self) -> Result<&RoundRecord> {
        let t = self.server.round + 1;
        let fed = self.cfg.federation.clone();
        let lambda = if fed.adv_on() { lambda_schedule(t, fed.warmup_rounds, self.cfg.losses.lambda_adv) } else { 0.0 };
        let mut rec = RoundRecord::empty(t);
        rec.lambda = lambda;
        rec.selected = self.select_clients(t);

        let bc = self.broadcast();
        rec.bytes_down = (bc.byte_len() * rec.selected.len()) as u64;
        let broadcast_kernel = match &bc {
            Broadcast::Head { prototypes, .. } if !prototypes.is_empty() => {
                let vectors: Vec<Vec<f64>> = prototypes.iter().map(|p| p.g.clone()).collect();
                let k = self.server.generator.channels();
                Some(Tensor::new(vec![vectors.len(), k, 1, 1], self.server.generator.generate(&vectors)?)?)
            }
            _ => None,
        };

        let plan = RoundPlan {
            seed: self.cfg.seed,
            round: t,
            algorithm: fed.algorithm,
            lambda,
            use_adv: fed.adv_on(),
            use_multicon: fed.multicon_on(),
            local_iters: fed.local_iters,
            batch_size: fed.batch_size,
            sgd: SgdConfig { learning_rate: fed.learning_rate, weight_decay: fed.weight_decay, clip_norm: None },
            disc_sgd: SgdConfig {
                learning_rate: fed.learning_rate,
                weight_decay: fed.weight_decay,
                clip_norm: Some(fed.clip_norm),
            },
            tau: self.cfg.losses.tau,
            anchors: fed.contrastive_anchors,
        };
        let selected: BTreeSet<u32> = rec.selected.iter().copied().collect();
        let clients = &mut self.clients;
        let mut outcomes: Vec<ClientOutcome> = self.pool.install(|| {
            clients
                .par_iter_mut()
                .filter(|c| selected.contains(&c.client_id))
                .map(|c| client_round(c, &bc, &plan))
                .collect()
        });
        outcomes.sort_by_key(|o| o.client_id);

        let mut uploads = Vec::new();
        let mut stats = Vec::new();
        for o in &outcomes {
            match (&o.upload, &o.fault) {
                (Some(u), None) => {
                    rec.bytes_up += u.byte_len() as u64;
                    rec.succeeded.push(o.client_id);
                    uploads.push((o.client_id, u));
                    stats.push(o.stats);
                }
                _ => rec.faults.push(ledger::ClientFault {
                    client_id: o.client_id,
                    message: o.fault.clone().unwrap_or_default(),
                }),
            }
        }
        rec.losses.add_clients(&stats);

        if uploads.is_empty() {
            rec.note = Some("no client completed the round; server state unchanged".into());
        } else {
            let blobs: Vec<_> = uploads.iter().map(|(_, b)| *b).collect();
            let mean = aggregate_global(&blobs)?;
            deserialize_params(&mut self.server.global, &mean)?;

            if fed.needs_exemplars() {
                let branches: Vec<(u32, Branch)> = uploads
                    .iter()
                    .map(|(id, b)| {
                        let mut br = self.server.global.clone();
                        deserialize_params(&mut br, b)?;
                        Ok((*id, br))
                    })
                    .collect::<Result<_>>()?;
                let dplan = DistillPlan {
                    seed: self.cfg.seed,
                    round: t,
                    distill: fed.prototypes_on(),
                    inter: fed.multicon_on(),
                    batch: fed.distill_batch,
                    anchors: fed.contrastive_anchors,
                    tau: self.cfg.losses.tau,
                    sgd: SgdConfig {
                        learning_rate: fed.server_learning_rate,
                        weight_decay: fed.weight_decay,
                        // the contrastive term at small tau has unbounded gradients
                        clip_norm: Some(fed.clip_norm),
                    },
                    broadcast_kernel: broadcast_kernel.as_ref(),
                };
                let s = self.server.distill_step(&branches, &dplan)?;
                rec.losses.distill = s.distill;
                rec.losses.inter = s.inter;
                rec.losses.server = s.total;
                rec.distill_skipped = s.skipped;
            }
            if fed.prototypes_on() {
                self.server.prototypes = Some(build_prototypes(
                    &self.server.global.extractor,
                    self.server.store.iter(),
                    self.num_classes,
                    &self.cfg.prototype,
                )?);
            }
        }
        self.server.round = t;

        let report = self.evaluate_val()?;
        rec.val = report.per_client.clone();
        rec.miou = report.miou;
        rec.acc = report.pixel_acc;
        rec.injected_drop = fed.inject_val_drop.filter(|d| d.round == t).map_or(0.0, |d| d.amount);
        rec.metric = report.miou - rec.injected_drop;
        self.stability_check(&mut rec)?;
        rec.rollbacks = self.rollbacks;
        rec.params_hash = self.params_hash();
        self.ledger.push(rec);
        Ok(self.ledger.last().expect("just pushed"))
    }

    /// Captures a checkpoint on strict improvement; rolls back when the metric
    /// falls more than the threshold below the best.
    fn stability_check(&mut self, rec: &mut RoundRecord) -> Result<()> {
        let delta = self.cfg.federation.rollback_drop_threshold;
        match &self.best {
            Some(b) if rec.metric < b.metric - delta => {
                let b = b.clone();
                self.server.global = b.server_global.clone();
                self.server.generator = b.generator.clone();
                self.server.prototypes = b.prototypes.clone();
                for (c, m) in self.clients.iter_mut().zip(b.clients.iter().cloned()) {
                    c.restore_models(m);
                }
                self.rollbacks += 1;
                rec.rollback = true;
                let restored = self.params_hash();
                if restored != b.hash {
                    return Err(Error::contract("restored parameters do not match the checkpoint"));
                }
            }
            Some(b) if rec.metric <= b.metric => {}
            _ => {
                self.best = Some(self.snapshot(rec.metric));
            }
        }
        if let Some(b) = &self.best {
            rec.best_round = Some(b.round);
            rec.best_metric = Some(b.metric);
            rec.best_hash = Some(b.hash.clone());
        }
        Ok(())
    }

    pub fn summary(&self) -> Vec<SummaryRow> {
        self.ledger.iter().filter(|r| r.round >= 1).map(SummaryRow::from).collect()
    }

    /// Fits a fresh discriminator on pooled train-split branch logits
    /// (global = 1, local = 0) across clients and scores it on the val split.
    pub fn probe_discriminator(&self, epochs: usize) -> Result<ProbeReport> {
        let collect = |pick: &dyn Fn(&ClientState) -> &[LabeledImage]| -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
            let mut xs = Vec::new();
            let mut ys = Vec::new();
            for c in &self.clients {
                let (g, l) = pooled_branch_logits(&c.model, pick(c))?;
                ys.extend(std::iter::repeat_n(1.0, g.len()));
                xs.extend(g);
                ys.extend(std::iter::repeat_n(0.0, l.len()));
                xs.extend(l);
            }
            Ok((xs, ys))
        };
        let (train_x, train_y) = collect(&|c| &c.train)?;
        let (test_x, test_y) = collect(&|c| &c.val)?;
        let c = self.num_classes;
        let n = train_x.len() as f64;
        let mean: Vec<f64> = (0..c).map(|j| train_x.iter().map(|x| x[j]).sum::<f64>() / n).collect();
        let std: Vec<f64> = (0..c)
            .map(|j| (train_x.iter().map(|x| (x[j] - mean[j]).powi(2)).sum::<f64>() / n).sqrt().max(1e-8))
            .collect();
        let norm = |x: &[f64]| -> Vec<f64> { x.iter().enumerate().map(|(j, v)| (v - mean[j]) / std[j]).collect() };
        let tx: Vec<Vec<f64>> = train_x.iter().map(|x| norm(x)).collect();
        let vx: Vec<Vec<f64>> = test_x.iter().map(|x| norm(x)).collect();

        let mut rng = seed::rng(&[self.cfg.seed, seed::PROBE]);
        let mut d = Discriminator::new(c, &mut rng);
        let sgd = SgdConfig { learning_rate: 0.1, weight_decay: 0.0, clip_norm: Some(self.cfg.federation.clip_norm) };
        const PROBE_BATCH: usize = 64;
        for _ in 0..epochs {
            let mut order: Vec<usize> = (0..tx.len()).collect();
            rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
            for chunk in order.chunks(PROBE_BATCH) {
                let tape = GradTape::new();
                let x = tape.constant_from(vec![chunk.len(), c], chunk.iter().flat_map(|&i| tx[i].clone()).collect())?;
                let y: Vec<f64> = chunk.iter().map(|&i| train_y[i]).collect();
                let loss = crate::losses::discriminator_loss(d.forward_pooled(&tape, x)?, &y)?;
                tape.backward(loss)?;
                client::apply_step(&tape, d.params_mut(), &sgd)?;
            }
        }
        let accuracy = |xs: &[Vec<f64>], ys: &[f64]| -> Result<f64> {
            let tape = GradTape::no_grad();
            let x = tape.constant_from(vec![xs.len(), c], xs.iter().flatten().copied().collect())?;
            let p = d.forward_pooled(&tape, x)?.to_vec();
            let hits = p.iter().zip(ys).filter(|(p, y)| (**p >= 0.5) == (**y == 1.0)).count();
            Ok(hits as f64 / ys.len() as f64)
        };
        Ok(ProbeReport {
            train_accuracy: accuracy(&tx, &train_y)?,
            heldout_accuracy: accuracy(&vx, &test_y)?,
            train_samples: tx.len(),
            heldout_samples: vx.len(),
        })
    }

    /// Per-client validation scores of the latest round.
    pub fn last_scores(&self) -> Vec<ClientScore> {
        self.ledger.last().map(|r| r.val.clone()).unwrap_or_default()
    }
}

/// Per-client reports averaged in client order. Runs on the current rayon pool.
pub fn evaluate_models(jobs: &[(u32, &TwoBranchModel, &[LabeledImage])], mode: EvalMode) -> Result<EvalReport> {
    let reports: Vec<Result<(u32, EvalReport)>> =
        jobs.par_iter().map(|(id, m, imgs)| Ok((*id, evaluate_client(m, imgs, mode)?))).collect();
    let reports: Vec<(u32, EvalReport)> = reports.into_iter().collect::<Result<_>>()?;
    EvalReport::average(&reports)
}

/// Globally pooled logits `[C]` of each branch for every image.
pub fn pooled_branch_logits(model: &TwoBranchModel, images: &[LabeledImage]) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    let mut g_out = Vec::new();
    let mut l_out = Vec::new();
    let refs: Vec<&LabeledImage> = images.iter().collect();
    for chunk in refs.chunks(16) {
        let x = crate::metrics::stack_images(chunk)?;
        let tape = GradTape::no_grad();
        let xv = tape.constant(&x);
        let c = model.classes();
        let g = model.forward_global(&tape, xv)?.low_logits.global_avg_pool()?.to_vec();
        let l = model.forward_local(&tape, xv)?.low_logits.global_avg_pool()?.to_vec();
        g_out.extend(g.chunks_exact(c).map(|r| r.to_vec()));
        l_out.extend(l.chunks_exact(c).map(|r| r.to_vec()));
    }
    Ok((g_out, l_out))
}
