//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs the full protocol by default (roughly two hours on one core).
//! `SEGFED_ACCEPT_QUICK=1` shrinks the training grid to a smoke run whose
//! verdicts are not meaningful, and `SEGFED_ACCEPT_STRICT=1` turns any FAIL
//! into a non-zero exit status.

mod support;

use std::time::Instant;

use mimalloc::MiMalloc;
use segfed::federation::{Algorithm, RoundRecord, RunConfig, Simulation, ValDrop};
use segfed::synthdata::{preset_shifts, preset_specs, split_federation, FederatedData, Preset};
use support::comm;

#[global_allocator]
static GLOBAL: MiMalloc = MiMalloc;

const SEEDS: [u64; 3] = [1, 2, 3];
const CLIENTS: usize = 4;
const HOLDOUT: usize = 3;

struct Scale {
    side: usize,
    classes: usize,
    train: usize,
    val: usize,
    rounds: usize,
    channels: Option<usize>,
    quick: bool,
}

impl Scale {
    fn from_env() -> Self {
        if std::env::var("SEGFED_ACCEPT_QUICK").is_ok_and(|v| v == "1") {
            Scale { side: 32, classes: 6, train: 12, val: 4, rounds: 3, channels: Some(8), quick: true }
        } else {
            // 200 images per client, split 160 train and 40 validation
            Scale { side: 64, classes: 6, train: 160, val: 40, rounds: 50, channels: None, quick: false }
        }
    }

    fn data(&self, seed: u64, holdout: Option<usize>) -> FederatedData {
        let specs = preset_specs(self.side, self.side, self.classes, seed, CLIENTS);
        let shifts = preset_shifts(Preset::Severe, CLIENTS, self.classes);
        split_federation(&specs, &shifts, CLIENTS, holdout, self.train, self.val).unwrap()
    }

    fn config(&self, seed: u64) -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.seed = seed;
        cfg.federation.num_clients = CLIENTS;
        cfg.federation.rounds = self.rounds;
        if let Some(k) = self.channels {
            cfg.model.channels = k;
            cfg.federation.batch_size = 4;
            cfg.federation.distill_batch = 8;
            cfg.federation.local_iters = 2;
        }
        cfg
    }
}

#[derive(Clone, Copy, PartialEq, Debug)]
enum Variant {
    Fedavg,
    Backbone,
    Proto,
    ProtoMulticon,
    Full,
    Ratio(f64),
}

impl Variant {
    fn apply(self, cfg: &mut RunConfig) {
        let f = &mut cfg.federation;
        let (p, m, a) = match self {
            Variant::Fedavg => {
                f.algorithm = Algorithm::Fedavg;
                (false, false, false)
            }
            Variant::Backbone => (false, false, false),
            Variant::Proto => (true, false, false),
            Variant::ProtoMulticon => (true, true, false),
            Variant::Full => (true, true, true),
            Variant::Ratio(r) => {
                f.upload_ratio = r;
                (true, true, true)
            }
        };
        f.use_proto = p;
        f.use_multicon = m;
        f.use_adv = a;
    }

    fn name(self) -> String {
        match self {
            Variant::Fedavg => "fedavg".into(),
            Variant::Backbone => "backbone".into(),
            Variant::Proto => "proto".into(),
            Variant::ProtoMulticon => "proto_multicon".into(),
            Variant::Full => "full".into(),
            Variant::Ratio(r) => format!("full_r{r:.2}"),
        }
    }
}

struct Outcome {
    miou: f64,
    unseen: Option<f64>,
    probe: Option<f64>,
    ledger_check: Result<(), String>,
    lambda_check: Result<(), String>,
}

fn lambda_errors(cfg: &RunConfig, ledger: &[RoundRecord]) -> Result<(), String> {
    let f = &cfg.federation;
    for r in &ledger[1..] {
        let want = if f.adv_on() {
            cfg.losses.lambda_adv * (r.round as f64 / f.warmup_rounds as f64).min(1.0)
        } else {
            0.0
        };
        if r.lambda != want {
            return Err(format!("round {}: lambda {} != {want}", r.round, r.lambda));
        }
    }
    Ok(())
}

fn train(scale: &Scale, seed: u64, v: Variant, holdout: Option<usize>, probe: bool) -> Outcome {
    let t0 = Instant::now();
    let mut cfg = scale.config(seed);
    v.apply(&mut cfg);
    let data = scale.data(seed, holdout);
    let f = &cfg.federation;
    let exemplars = if f.prototypes_on() || f.multicon_on() {
        comm::expected_exemplars(&data, f.include_background, f.upload_ratio)
    } else {
        0
    };
    let classes: Vec<u8> = (0..scale.classes as u8).collect();
    let proto_classes = f.prototypes_on().then_some(classes.as_slice());
    let mut sim = Simulation::setup(cfg.clone(), data, 1).unwrap();
    sim.run().unwrap();
    let rep = sim.final_report().unwrap();
    let probe = probe.then(|| sim.probe_discriminator(20).unwrap().heldout_accuracy);
    let out = Outcome {
        miou: rep.miou,
        unseen: rep.unseen_domain.as_ref().map(|u| u.miou),
        probe,
        ledger_check: comm::check_ledger(&sim, exemplars, scale.side * scale.side, proto_classes),
        lambda_check: lambda_errors(&cfg, &sim.ledger),
    };
    let tag = if holdout.is_some() { " holdout" } else { "" };
    eprintln!(
        "  seed {seed} {}{tag}: miou {:.4}{}{} ({:.0}s)",
        v.name(),
        rep.miou,
        out.unseen.map(|u| format!(" unseen {u:.4}")).unwrap_or_default(),
        out.probe.map(|p| format!(" probe {p:.3}")).unwrap_or_default(),
        t0.elapsed().as_secs_f64()
    );
    out
}

struct Report {
    failures: usize,
}

impl Report {
    fn line(&mut self, n: usize, pass: bool, detail: String) {
        if !pass {
            self.failures += 1;
        }
        println!("criterion {n}: {} {detail}", if pass { "PASS" } else { "FAIL" });
    }
}

fn fmt(xs: &[f64]) -> String {
    let parts: Vec<String> = xs.iter().map(|x| format!("{x:.4}")).collect();
    format!("[{}]", parts.join(", "))
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn criterion_1(rep: &mut Report) {
    use support::gradcheck::{op_cases, run_full_graph, run_op, SEEDS, TOL};
    let t0 = Instant::now();
    let mut worst = 0.0f64;
    let mut bad = Vec::new();
    for case in op_cases() {
        let e = run_op(&case).unwrap();
        worst = worst.max(e);
        if !(e <= TOL) {
            bad.push(case.0.to_string());
        }
    }
    for s in 0..SEEDS {
        let e = run_full_graph(s).unwrap();
        worst = worst.max(e);
        if !(e <= TOL) {
            bad.push(format!("full graph seed {s}"));
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    let pass = bad.is_empty() && secs <= 60.0;
    rep.line(1, pass, format!("worst relative error {worst:.2e} (tol {TOL:e}), {secs:.1}s, failing {bad:?}"));
}

fn criterion_2(rep: &mut Report) {
    use support::oracles::{suite, TOL};
    let t0 = Instant::now();
    let results = suite(200);
    let secs = t0.elapsed().as_secs_f64();
    let bad: Vec<String> = results.iter().filter(|(_, e)| !(*e <= TOL)).map(|(n, e)| format!("{n}={e:e}")).collect();
    let worst = results.iter().map(|r| r.1).fold(0.0, f64::max);
    let pass = bad.is_empty() && secs <= 60.0;
    rep.line(2, pass, format!("{} checks, worst {worst:.2e} (tol {TOL:e}), {secs:.1}s, failing {bad:?}", results.len()));
}

struct SeedGrid {
    fedavg: Outcome,
    ladder: [Outcome; 4],
    r25: Outcome,
    r75: Outcome,
    unseen_full: Outcome,
    unseen_fedavg: Outcome,
}

impl SeedGrid {
    fn all(&self) -> impl Iterator<Item = (&'static str, &Outcome)> {
        let names = ["backbone", "proto", "proto_multicon", "full"];
        std::iter::once(("fedavg", &self.fedavg))
            .chain(names.into_iter().zip(&self.ladder))
            .chain([
                ("full_r0.25", &self.r25),
                ("full_r0.75", &self.r75),
                ("full holdout", &self.unseen_full),
                ("fedavg holdout", &self.unseen_fedavg),
            ])
    }
}

fn grid(scale: &Scale, seed: u64) -> SeedGrid {
    SeedGrid {
        fedavg: train(scale, seed, Variant::Fedavg, None, false),
        ladder: [
            train(scale, seed, Variant::Backbone, None, false),
            train(scale, seed, Variant::Proto, None, false),
            train(scale, seed, Variant::ProtoMulticon, None, true),
            train(scale, seed, Variant::Full, None, true),
        ],
        r25: train(scale, seed, Variant::Ratio(0.25), None, false),
        r75: train(scale, seed, Variant::Ratio(0.75), None, false),
        unseen_full: train(scale, seed, Variant::Full, Some(HOLDOUT), false),
        unseen_fedavg: train(scale, seed, Variant::Fedavg, Some(HOLDOUT), false),
    }
}

fn training_criteria(rep: &mut Report, grids: &[SeedGrid]) -> Vec<String> {
    let n = grids.len();
    // two of three seeds
    let majority = (2 * n).div_ceil(3);

    let adv: Vec<f64> = grids.iter().map(|g| g.ladder[3].probe.unwrap()).collect();
    let no_adv: Vec<f64> = grids.iter().map(|g| g.ladder[2].probe.unwrap()).collect();
    let pass = adv.iter().all(|a| (0.40..=0.60).contains(a)) && no_adv.iter().all(|a| *a >= 0.75);
    rep.line(
        3,
        pass,
        format!("probe accuracy with adversary {} (want [0.40, 0.60]), without {} (want >= 0.75)", fmt(&adv), fmt(&no_adv)),
    );

    let full: Vec<f64> = grids.iter().map(|g| g.ladder[3].miou).collect();
    let fedavg: Vec<f64> = grids.iter().map(|g| g.fedavg.miou).collect();
    let monotone: Vec<bool> = grids.iter().map(|g| g.ladder.windows(2).all(|w| w[0].miou <= w[1].miou)).collect();
    let ladders: Vec<String> =
        grids.iter().map(|g| fmt(&g.ladder.iter().map(|o| o.miou).collect::<Vec<_>>())).collect();
    let gap = mean(&full) - mean(&fedavg);
    let ordered = monotone.iter().filter(|m| **m).count();
    rep.line(
        4,
        gap >= 0.02 && ordered >= majority,
        format!(
            "mean mIoU full {:.4} vs fedavg {:.4} (gap {gap:+.4}, want >= +0.02); ladder non-decreasing in {ordered}/{n} seeds (want >= {majority}): {}",
            mean(&full),
            mean(&fedavg),
            ladders.join(" ")
        ),
    );

    let r25: Vec<f64> = grids.iter().map(|g| g.r25.miou).collect();
    let r75: Vec<f64> = grids.iter().map(|g| g.r75.miou).collect();
    rep.line(
        5,
        r25.iter().zip(&r75).all(|(a, b)| b >= a),
        format!("mIoU at ratio 0.75 {} vs 0.25 {}", fmt(&r75), fmt(&r25)),
    );

    let uf: Vec<f64> = grids.iter().map(|g| g.unseen_full.unseen.unwrap()).collect();
    let ua: Vec<f64> = grids.iter().map(|g| g.unseen_fedavg.unseen.unwrap()).collect();
    let wins = uf.iter().zip(&ua).filter(|(f, a)| f >= a).count();
    rep.line(
        6,
        wins >= majority,
        format!("unseen-client mIoU full {} vs fedavg {}, full ahead in {wins}/{n} seeds (want >= {majority})", fmt(&uf), fmt(&ua)),
    );

    let mut ledger_bad = Vec::new();
    let mut runs = 0;
    for (g, seed) in grids.iter().zip(SEEDS) {
        for (name, o) in g.all() {
            runs += 1;
            if let Err(e) = &o.ledger_check {
                ledger_bad.push(format!("seed {seed} {name}: {e}"));
            }
        }
    }
    rep.line(7, ledger_bad.is_empty(), format!("{runs} training runs checked against the closed form, mismatches {ledger_bad:?}"));

    grids
        .iter()
        .zip(SEEDS)
        .flat_map(|(g, seed)| g.all().filter_map(move |(name, o)| o.lambda_check.as_ref().err().map(|e| format!("seed {seed} {name}: {e}"))))
        .collect()
}

fn criterion_8(rep: &mut Report, scale: &Scale) {
    let mut cfg = scale.config(7);
    cfg.federation.rounds = 4;
    let bytes = |workers: usize| {
        let mut sim = Simulation::setup(cfg.clone(), scale.data(7, None), workers).unwrap();
        sim.run().unwrap();
        let mut out = Vec::new();
        segfed::federation::write_summary_csv(&sim.summary(), &mut out).unwrap();
        out
    };
    let a = bytes(1);
    let b = bytes(4);
    rep.line(8, a == b, format!("summary CSV at 1 and 4 workers: {} vs {} bytes, identical {}", a.len(), b.len(), a == b));
}

/// `grid_lambda` holds schedule mismatches already found in the training grid.
fn criterion_9(rep: &mut Report, scale: &Scale, grid_lambda: &[String]) {
    let mut cfg = scale.config(5);
    cfg.federation.rounds = 8;
    cfg.federation.inject_val_drop = Some(ValDrop { round: 7, amount: 0.2 });
    let mut sim = Simulation::setup(cfg.clone(), scale.data(5, None), 1).unwrap();
    sim.run().unwrap();
    let r = &sim.ledger[7];
    let prior = &sim.ledger[6];
    let restored = r.rollback && Some(&r.params_hash) == prior.best_hash.as_ref() && r.best_hash == prior.best_hash;
    let lambda = lambda_errors(&cfg, &sim.ledger).and_then(|_| match grid_lambda {
        [] => Ok(()),
        bad => Err(bad.join("; ")),
    });
    rep.line(
        9,
        restored && lambda.is_ok(),
        format!(
            "drop at round 7: rollback {}, restored hash {} best {}; lambda {}",
            r.rollback,
            &r.params_hash[..12.min(r.params_hash.len())],
            prior.best_hash.as_deref().map(|h| &h[..12.min(h.len())]).unwrap_or("none"),
            lambda.map(|_| "exact in every round of every run".to_string()).unwrap_or_else(|e| e)
        ),
    );
}

fn main() {
    let scale = Scale::from_env();
    if scale.quick {
        println!("quick mode: reduced training grid, verdicts for criteria 3 to 6 are not meaningful");
    }
    let mut rep = Report { failures: 0 };
    criterion_1(&mut rep);
    criterion_2(&mut rep);

    let t0 = Instant::now();
    let grids: Vec<SeedGrid> = SEEDS
        .iter()
        .map(|&s| {
            eprintln!("training grid, seed {s}");
            grid(&scale, s)
        })
        .collect();
    eprintln!("training grid took {:.1} min", t0.elapsed().as_secs_f64() / 60.0);
    let grid_lambda = training_criteria(&mut rep, &grids);
    criterion_8(&mut rep, &scale);
    criterion_9(&mut rep, &scale, &grid_lambda);

    println!("acceptance: {} of 9 criteria failed", rep.failures);
    let strict = std::env::var("SEGFED_ACCEPT_STRICT").is_ok_and(|v| v == "1");
    if strict && rep.failures > 0 {
        std::process::exit(1);
    }
}
