use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use clap::ValueEnum;
use serde::{Deserialize, Serialize};

use super::config::{load_config, ExperimentConfig};
use super::{Command, ConfigArgs};
use crate::error::{Error, Result};
use crate::federation::{evaluate_models, read_checkpoint, write_ledger_jsonl, write_summary_csv, Simulation};
use crate::metrics::{export_embeddings, write_embeddings_csv, EvalReport};
use crate::seed;
use crate::synthdata::{read_dataset_dir, write_dataset_dir, LabeledImage, Preset};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Split {
    Train,
    Val,
    Unseen,
}

/// One row of the module ablation ladder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Backbone,
    Proto,
    ProtoMulticon,
    Full,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Backbone => "backbone",
            Method::Proto => "proto",
            Method::ProtoMulticon => "proto_multicon",
            Method::Full => "full",
        }
    }

    /// `(use_proto, use_multicon, use_adv)`
    pub fn flags(self) -> (bool, bool, bool) {
        match self {
            Method::Backbone => (false, false, false),
            Method::Proto => (true, false, false),
            Method::ProtoMulticon => (true, true, false),
            Method::Full => (true, true, true),
        }
    }

    pub fn apply(self, cfg: &mut ExperimentConfig) {
        let (p, m, a) = self.flags();
        cfg.federation.use_proto = p;
        cfg.federation.use_multicon = m;
        cfg.federation.use_adv = a;
    }
}

pub fn ablation_methods() -> [Method; 4] {
    [Method::Backbone, Method::Proto, Method::ProtoMulticon, Method::Full]
}

pub const UPLOAD_RATIOS: [f64; 4] = [0.25, 0.5, 0.75, 1.0];

pub const ABLATION_HEADER: [&str; 12] = [
    "scenario",
    "method",
    "use_proto",
    "use_multicon",
    "use_adv",
    "n_seeds",
    "acc_mean",
    "acc_std",
    "miou_mean",
    "miou_std",
    "unseen_miou_mean",
    "unseen_miou_std",
];

pub const SWEEP_HEADER: [&str; 6] = ["ratio", "n_seeds", "acc_mean", "acc_std", "miou_mean", "miou_std"];

/// What a finished run leaves behind.
#[derive(Debug, Clone)]
pub struct RunArtifacts {
    pub dir: PathBuf,
    pub report: EvalReport,
    pub rollbacks: usize,
    pub best_round: Option<usize>,
}

/// Runs one experiment and writes its artifacts into `dir`. `source` is the
/// config text archived verbatim as `config.toml`, when there is one.
pub fn execute_run(cfg: &ExperimentConfig, source: Option<&str>, dir: &Path, workers: usize, quiet: bool) -> Result<RunArtifacts> {
    cfg.validate()?;
    fs::create_dir_all(dir)?;
    if let Some(src) = source {
        fs::write(dir.join("config.toml"), src)?;
    }
    fs::write(dir.join("config.resolved.toml"), cfg.to_toml()?)?;

    let (data, _) = cfg.build_data()?;
    let mut sim = Simulation::setup(cfg.run_config(), data, workers.max(1))?;
    let rounds = cfg.federation.rounds;
    while sim.round() < rounds {
        let r = sim.run_round()?;
        if !quiet {
            eprintln!(
                "round {:>3}/{rounds} miou {:.4} acc {:.4} rollbacks {}{}",
                r.round,
                r.miou,
                r.acc,
                r.rollbacks,
                r.note.as_deref().map(|n| format!(" ({n})")).unwrap_or_default()
            );
        }
    }

    write_ledger_jsonl(&sim.ledger, BufWriter::new(fs::File::create(dir.join("ledger.jsonl"))?))?;
    write_summary_csv(&sim.summary(), BufWriter::new(fs::File::create(dir.join("summary.csv"))?))?;
    let report = sim.final_report()?;
    fs::write(dir.join("report.json"), serde_json::to_string_pretty(&report)?)?;

    let ckpt = dir.join("checkpoints");
    if let Some(best) = &sim.best {
        best.save(&ckpt.join("best"), sim.eval_mode())?;
    }
    let last_metric = sim.ledger.last().map_or(0.0, |r| r.metric);
    sim.snapshot(last_metric).save(&ckpt.join("final"), sim.eval_mode())?;

    Ok(RunArtifacts {
        dir: dir.to_path_buf(),
        report,
        rollbacks: sim.rollbacks,
        best_round: sim.best.as_ref().map(|b| b.round),
    })
}

fn load(common: &ConfigArgs) -> Result<(ExperimentConfig, String, PathBuf)> {
    let (mut cfg, source) = load_config(&common.config, &common.overrides)?;
    if let Some(out) = &common.out {
        cfg.output_dir = out.clone();
    }
    let dir = cfg.resolved_output_dir();
    Ok((cfg, source, dir))
}

/// Mean and sample standard deviation (0 for a single value).
fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn fmt(v: f64) -> String {
    format!("{v:.6}")
}

fn cmd_ablate(common: &ConfigArgs, n_seeds: usize, scenarios: &[Preset]) -> Result<()> {
    let (base, source, dir) = load(common)?;
    if n_seeds == 0 {
        return Err(Error::Config("--n-seeds must be >= 1".into()));
    }
    fs::create_dir_all(&dir)?;
    fs::write(dir.join("config.toml"), &source)?;
    let scenarios = if scenarios.is_empty() { vec![base.data.preset] } else { scenarios.to_vec() };

    let mut w = csv::Writer::from_path(dir.join("ablation.csv"))?;
    w.write_record(ABLATION_HEADER)?;
    for scenario in &scenarios {
        for method in ablation_methods() {
            let mut acc = Vec::new();
            let mut miou = Vec::new();
            let mut unseen = Vec::new();
            for s in 0..n_seeds as u64 {
                let mut cfg = base.clone();
                cfg.seed = base.seed + s;
                cfg.data.preset = *scenario;
                method.apply(&mut cfg);
                let sub = dir.join("runs").join(scenario.to_string()).join(method.name()).join(format!("seed{}", cfg.seed));
                if !common.quiet {
                    eprintln!("== {scenario} / {} / seed {}", method.name(), cfg.seed);
                }
                let out = execute_run(&cfg, None, &sub, common.workers, common.quiet)?;
                acc.push(out.report.pixel_acc);
                miou.push(out.report.miou);
                if let Some(u) = &out.report.unseen_domain {
                    unseen.push(u.miou);
                }
            }
            let (am, asd) = mean_std(&acc);
            let (mm, msd) = mean_std(&miou);
            let (um, usd) = if unseen.is_empty() { (String::new(), String::new()) } else {
                let (a, b) = mean_std(&unseen);
                (fmt(a), fmt(b))
            };
            let (p, m, a) = method.flags();
            w.write_record([
                scenario.to_string(),
                method.name().to_string(),
                p.to_string(),
                m.to_string(),
                a.to_string(),
                n_seeds.to_string(),
                fmt(am),
                fmt(asd),
                fmt(mm),
                fmt(msd),
                um,
                usd,
            ])?;
            w.flush()?;
        }
    }
    Ok(())
}

fn cmd_upload_sweep(common: &ConfigArgs, n_seeds: usize) -> Result<()> {
    let (base, source, dir) = load(common)?;
    if n_seeds == 0 {
        return Err(Error::Config("--n-seeds must be >= 1".into()));
    }
    fs::create_dir_all(&dir)?;
    fs::write(dir.join("config.toml"), &source)?;
    let mut w = csv::Writer::from_path(dir.join("upload_sweep.csv"))?;
    w.write_record(SWEEP_HEADER)?;
    for ratio in UPLOAD_RATIOS {
        let mut acc = Vec::new();
        let mut miou = Vec::new();
        for s in 0..n_seeds as u64 {
            let mut cfg = base.clone();
            cfg.seed = base.seed + s;
            cfg.federation.upload_ratio = ratio;
            let sub = dir.join("runs").join(format!("ratio{ratio}")).join(format!("seed{}", cfg.seed));
            if !common.quiet {
                eprintln!("== ratio {ratio} / seed {}", cfg.seed);
            }
            let out = execute_run(&cfg, None, &sub, common.workers, common.quiet)?;
            acc.push(out.report.pixel_acc);
            miou.push(out.report.miou);
        }
        let (am, asd) = mean_std(&acc);
        let (mm, msd) = mean_std(&miou);
        w.write_record([format!("{ratio:.2}"), n_seeds.to_string(), fmt(am), fmt(asd), fmt(mm), fmt(msd)])?;
        w.flush()?;
    }
    Ok(())
}

/// Evaluates every checkpointed client on its own val split (and all of them
/// on the unseen split, if present), exactly as the in-run final report does.
pub fn evaluate_checkpoint(checkpoint: &Path, data_dir: &Path, workers: usize) -> Result<EvalReport> {
    let (ck, manifest) = read_checkpoint(checkpoint)?;
    let data = read_dataset_dir(data_dir)?;
    if data.num_classes != manifest.num_classes {
        return Err(Error::Format(format!(
            "checkpoint has {} classes, dataset has {}",
            manifest.num_classes, data.num_classes
        )));
    }
    let mut val = Vec::new();
    for (id, (model, _, _)) in ck.client_ids.iter().zip(&ck.clients) {
        let c = data
            .clients
            .iter()
            .find(|c| c.client_id == *id)
            .ok_or_else(|| Error::Format(format!("dataset has no client {id}")))?;
        val.push((*id, model, c.val.as_slice()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::Setup(e.to_string()))?;
    pool.install(|| {
        let mut report = evaluate_models(&val, manifest.eval_mode)?;
        if let Some(u) = &data.unseen {
            let jobs: Vec<_> = val.iter().map(|(id, m, _)| (*id, *m, u.as_slice())).collect();
            report.unseen_domain = Some(Box::new(evaluate_models(&jobs, manifest.eval_mode)?));
        }
        Ok(report)
    })
}

fn cmd_export_embeddings(
    checkpoint: &Path,
    data_dir: &Path,
    client: u32,
    per_class: usize,
    split: Split,
    seed_value: u64,
    out: &Path,
) -> Result<()> {
    let (ck, _) = read_checkpoint(checkpoint)?;
    let data = read_dataset_dir(data_dir)?;
    let idx = ck
        .client_ids
        .iter()
        .position(|&c| c == client)
        .ok_or_else(|| Error::Config(format!("checkpoint has no client {client}")))?;
    let model = &ck.clients[idx].0;
    let images: &[LabeledImage] = match split {
        Split::Unseen => data.unseen.as_deref().ok_or_else(|| Error::Config("dataset has no unseen split".into()))?,
        _ => {
            let c = data
                .clients
                .iter()
                .find(|c| c.client_id == client)
                .ok_or_else(|| Error::Config(format!("dataset has no client {client}")))?;
            if split == Split::Train { &c.train } else { &c.val }
        }
    };
    let mut rng = seed::rng(&[seed_value, seed::EXPORT, client as u64]);
    let (records, skipped) = export_embeddings(model, images, per_class, &mut rng)?;
    if !skipped.is_empty() {
        eprintln!("classes without pixels (skipped): {skipped:?}");
    }
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    write_embeddings_csv(&records, BufWriter::new(fs::File::create(out)?))
}

pub(super) fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Run(common) => {
            let (cfg, source, dir) = load(&common)?;
            let out = execute_run(&cfg, Some(&source), &dir, common.workers, common.quiet)?;
            println!("{}", serde_json::to_string(&serde_json::json!({
                "output_dir": out.dir,
                "miou": out.report.miou,
                "pixel_acc": out.report.pixel_acc,
                "rollbacks": out.rollbacks,
                "best_round": out.best_round,
            }))?);
            Ok(())
        }
        Command::Ablate { common, n_seeds, scenarios } => cmd_ablate(&common, n_seeds, &scenarios),
        Command::UploadSweep { common, n_seeds } => cmd_upload_sweep(&common, n_seeds),
        Command::Eval { checkpoint, data, out, workers } => {
            let report = evaluate_checkpoint(&checkpoint, &data, workers)?;
            let text = serde_json::to_string_pretty(&report)?;
            match out {
                Some(p) => fs::write(p, text)?,
                None => println!("{text}"),
            }
            Ok(())
        }
        Command::GenData { common } => {
            let (cfg, _, dir) = load(&common)?;
            let (data, specs) = cfg.build_data()?;
            write_dataset_dir(&dir, &data, &specs)
        }
        Command::ExportEmbeddings { checkpoint, data, client, per_class, split, seed, out } => {
            cmd_export_embeddings(&checkpoint, &data, client, per_class, split, seed, &out)
        }
    }
}
