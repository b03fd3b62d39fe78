//! Brute-force reference implementations, written from the formulas with
//! plain nested loops and no shared helpers from the library.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use segfed::exemplar::{extract_exemplars, to_vector, ClassExemplar};
use segfed::losses::{aggregate_logits, discriminator_loss, distill_loss, info_nce, similarity_weights};
use segfed::metrics::{confusion, miou, pixel_accuracy};
use segfed::model::ExemplarFcn;
use segfed::numcore::{GradTape, Tensor};
use segfed::prototype::{
    compose_prototypes, cooccurrence, correlation, distribution_vector, rarity_weights, DeepExemplar,
};
use segfed::synthdata::{LabeledImage, Mask};
use segfed::seed;

pub const TOL: f64 = 1e-10;

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn random_labels(h: usize, w: usize, c: usize, rng: &mut ChaCha8Rng) -> Vec<u8> {
    // blocky layouts give classes real neighbourhoods, plus some salt
    let by = rng.random_range(1..=h);
    let bx = rng.random_range(1..=w);
    let base: Vec<u8> = (0..c).map(|_| rng.random_range(0..c as u8)).collect();
    (0..h * w)
        .map(|i| {
            if rng.random_bool(0.15) {
                rng.random_range(0..c as u8)
            } else {
                base[((i / w) / by + (i % w) / bx) % c]
            }
        })
        .collect()
}

// ---------------------------------------------------------------- prototypes

/// Nonnegative embeddings, as produced by a ReLU extractor.
pub fn random_store(rng: &mut ChaCha8Rng, c: usize, k: usize) -> (Vec<DeepExemplar>, usize, usize) {
    let h = rng.random_range(2..=8);
    let w = rng.random_range(2..=8);
    let mut store = Vec::new();
    for client in 0..2u32 {
        for image in 0..rng.random_range(1..=4u32) {
            let labels = random_labels(h, w, c, rng);
            for class in 0..c as u8 {
                let active: Vec<bool> = labels.iter().map(|&l| l == class).collect();
                if !active.iter().any(|&a| a) {
                    continue;
                }
                let mut data = vec![0.0; k * h * w];
                for ch in 0..k {
                    for p in 0..h * w {
                        if active[p] {
                            data[ch * h * w + p] = rng.random::<f64>();
                        }
                    }
                }
                store.push(DeepExemplar {
                    h: Tensor::new(vec![k, h, w], data).unwrap(),
                    active,
                    class_id: class,
                    client_id: client,
                    image_id: image,
                });
            }
        }
    }
    (store, h, w)
}

pub fn oracle_beta(counts: &[usize]) -> Vec<f64> {
    let present: Vec<f64> = counts.iter().filter(|&&k| k > 0).map(|&k| k as f64).collect();
    let max = present.iter().cloned().fold(f64::MIN, f64::max);
    let min = present.iter().cloned().fold(f64::MAX, f64::min);
    counts
        .iter()
        .map(|&k| match k {
            0 => 0.0,
            _ if max == min => 1.0,
            _ => 0.1 + 0.9 * (max - k as f64) / (max - min),
        })
        .collect()
}

fn value(d: &DeepExemplar, ch: usize, y: usize, x: usize) -> f64 {
    let (h, w) = (d.h.shape()[1], d.h.shape()[2]);
    d.h.data()[ch * h * w + y * w + x]
}

fn is_active(d: &DeepExemplar, y: usize, x: usize) -> bool {
    d.active[y * d.h.shape()[2] + x]
}

pub fn oracle_v(store: &[DeepExemplar], class: u8, beta: f64) -> Vec<f64> {
    let k = store[0].h.shape()[0];
    let members: Vec<&DeepExemplar> = store.iter().filter(|d| d.class_id == class).collect();
    let mut v = vec![0.0; k];
    for d in &members {
        let (h, w) = (d.h.shape()[1], d.h.shape()[2]);
        for ch in 0..k {
            let mut s = 0.0;
            let mut n = 0.0;
            for y in 0..h {
                for x in 0..w {
                    if is_active(d, y, x) {
                        s += value(d, ch, y, x);
                        n += 1.0;
                    }
                }
            }
            v[ch] += beta * s / n;
        }
    }
    v.iter().map(|x| x / members.len() as f64).collect()
}

fn same_image<'a>(store: &'a [DeepExemplar], d: &DeepExemplar, class: u8) -> Option<&'a DeepExemplar> {
    store.iter().find(|e| e.client_id == d.client_id && e.image_id == d.image_id && e.class_id == class)
}

fn cheb(y: usize, x: usize, y2: usize, x2: usize) -> usize {
    y.abs_diff(y2).max(x.abs_diff(x2))
}

pub fn oracle_phi(store: &[DeepExemplar], c_n: usize, r: usize) -> Vec<Vec<f64>> {
    let mut phi = vec![vec![0.0; c_n]; c_n];
    for c in 0..c_n as u8 {
        let holders: Vec<&DeepExemplar> = store.iter().filter(|d| d.class_id == c).collect();
        for c2 in 0..c_n as u8 {
            if c2 == c || holders.is_empty() {
                continue;
            }
            let mut total = 0.0;
            for d in &holders {
                let Some(e) = same_image(store, d, c2) else { continue };
                let (h, w) = (d.h.shape()[1], d.h.shape()[2]);
                let (mut hit, mut n) = (0.0, 0.0);
                for y in 0..h {
                    for x in 0..w {
                        if !is_active(d, y, x) {
                            continue;
                        }
                        n += 1.0;
                        let mut near = false;
                        for y2 in 0..h {
                            for x2 in 0..w {
                                if is_active(e, y2, x2) && cheb(y, x, y2, x2) <= r {
                                    near = true;
                                }
                            }
                        }
                        if near {
                            hit += 1.0;
                        }
                    }
                }
                total += hit / n;
            }
            phi[c as usize][c2 as usize] = total / holders.len() as f64;
        }
    }
    phi
}

pub fn oracle_r(store: &[DeepExemplar], phi: &[Vec<f64>], r: usize, sigma: f64) -> Vec<Vec<f64>> {
    let c_n = phi.len();
    let k = store[0].h.shape()[0];
    let mut out = vec![vec![0.0; c_n]; c_n];
    for c in 0..c_n as u8 {
        let holders: Vec<&DeepExemplar> = store.iter().filter(|d| d.class_id == c).collect();
        if holders.is_empty() {
            continue;
        }
        for c2 in 0..c_n as u8 {
            if c2 == c {
                continue;
            }
            let mut total = 0.0;
            for d in &holders {
                let Some(e) = same_image(store, d, c2) else { continue };
                let (h, w) = (d.h.shape()[1], d.h.shape()[2]);
                let (mut s, mut pairs, mut n) = (0.0, 0.0, 0.0);
                for y in 0..h {
                    for x in 0..w {
                        if !is_active(d, y, x) {
                            continue;
                        }
                        n += 1.0;
                        for y2 in 0..h {
                            for x2 in 0..w {
                                if !is_active(e, y2, x2) || cheb(y, x, y2, x2) > r {
                                    continue;
                                }
                                let mut dot = 0.0;
                                for ch in 0..k {
                                    dot += value(d, ch, y, x) * value(e, ch, y2, x2);
                                }
                                let dist2 = ((y as f64 - y2 as f64).powi(2) + (x as f64 - x2 as f64).powi(2)) as f64;
                                s += dot * (-dist2 / (2.0 * sigma * sigma)).exp();
                                pairs += 1.0;
                            }
                        }
                    }
                }
                if pairs > 0.0 {
                    total += s / (n * pairs);
                }
            }
            out[c as usize][c2 as usize] = phi[c as usize][c2 as usize] * total / holders.len() as f64;
        }
        let row: f64 = out[c as usize].iter().sum();
        for v in out[c as usize].iter_mut() {
            *v = if row > 0.0 { *v / row } else { 0.0 };
        }
    }
    out
}

pub fn oracle_g(v: &[Option<Vec<f64>>], r: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let c_n = v.len();
    let p = v.iter().flatten().next().unwrap().len();
    (0..c_n)
        .map(|c| match &v[c] {
            None => vec![0.0; p],
            Some(vc) => (0..p)
                .map(|j| {
                    let mut mix = 0.0;
                    for c2 in 0..c_n {
                        if c2 != c {
                            if let Some(v2) = &v[c2] {
                                mix += r[c][c2] * v2[j];
                            }
                        }
                    }
                    vc[j] + mix / c_n as f64
                })
                .collect(),
        })
        .collect()
}

// ------------------------------------------------------------------- losses

pub fn oracle_alpha(clients: &[Vec<f64>], server: &[f64]) -> Vec<f64> {
    let s: Vec<f64> = clients
        .iter()
        .map(|z| {
            let dot: f64 = z.iter().zip(server).map(|(a, b)| a * b).sum();
            let na = z.iter().map(|a| a * a).sum::<f64>().sqrt();
            let nb = server.iter().map(|a| a * a).sum::<f64>().sqrt();
            (dot / (na * nb)).max(0.0) + 1e-6
        })
        .collect();
    let t: f64 = s.iter().sum();
    s.iter().map(|x| x / t).collect()
}

pub fn oracle_zhat(alpha: &[f64], clients: &[Vec<f64>]) -> Vec<f64> {
    (0..clients[0].len()).map(|j| (0..alpha.len()).map(|i| alpha[i] * clients[i][j]).sum()).collect()
}

/// `KL(softmax(teacher) || softmax(student))` over dim 1, mean over the rest.
pub fn oracle_kl(student: &[f64], teacher: &[f64], n: usize, c: usize, hw: usize) -> f64 {
    let mut total = 0.0;
    for i in 0..n {
        for s in 0..hw {
            let at = |k: usize| i * c * hw + k * hw + s;
            let zt: f64 = (0..c).map(|k| teacher[at(k)].exp()).sum();
            let zs: f64 = (0..c).map(|k| student[at(k)].exp()).sum();
            for k in 0..c {
                let p = teacher[at(k)].exp() / zt;
                let q = student[at(k)].exp() / zs;
                total += p * (p / q).ln();
            }
        }
    }
    total / (n * hw) as f64
}

pub fn oracle_info_nce(anchor: &[f64], pos: &[Vec<f64>], neg: &[Vec<f64>], tau: f64) -> f64 {
    let sim = |v: &Vec<f64>| anchor.iter().zip(v).map(|(a, b)| a * b).sum::<f64>() / tau;
    let negs: f64 = neg.iter().map(|v| sim(v).exp()).sum();
    pos.iter().map(|p| -(sim(p).exp() / (sim(p).exp() + negs)).ln()).sum::<f64>() / pos.len() as f64
}

pub fn oracle_bce(p: &[f64], y: &[f64]) -> f64 {
    -p.iter().zip(y).map(|(p, y)| y * p.ln() + (1.0 - y) * (1.0 - p).ln()).sum::<f64>() / p.len() as f64
}

fn unit(rng: &mut ChaCha8Rng, k: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..k).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| x / n).collect()
}

fn rows(v: &[Vec<f64>]) -> Tensor {
    Tensor::new(vec![v.len(), v.first().map_or(0, |r| r.len())], v.concat()).unwrap()
}

// ------------------------------------------------------------------- suite

/// Worst discrepancy per quantity over `seeds` random instances.
pub fn suite(seeds: u64) -> Vec<(&'static str, f64)> {
    let mut worst: Vec<(&'static str, f64)> = [
        "exemplar_extraction",
        "to_vector",
        "beta",
        "v_c",
        "phi",
        "R",
        "g_c",
        "alpha",
        "z_hat",
        "distill_kl",
        "info_nce",
        "bce",
        "confusion_counts",
        "miou",
        "pixel_accuracy",
    ]
    .into_iter()
    .map(|n| (n, 0.0))
    .collect();
    let mut bump = |name: &str, e: f64| {
        let slot = worst.iter_mut().find(|(n, _)| *n == name).expect("known quantity");
        slot.1 = slot.1.max(if e.is_nan() { f64::INFINITY } else { e });
    };
    for s in 0..seeds {
        let mut rng = seed::rng(&[s, 201]);
        let c = rng.random_range(2..=4usize);

        // exemplars
        let (h, w) = (rng.random_range(2..=8), rng.random_range(2..=8));
        let labels = random_labels(h, w, c, &mut rng);
        let img = LabeledImage {
            image: Tensor::new(vec![3, h, w], (0..3 * h * w).map(|_| rng.random::<f64>()).collect()).unwrap(),
            mask: Mask::new(h, w, labels.clone()).unwrap(),
            image_id: 7,
            client_id: 2,
        };
        let fcn = ExemplarFcn::new(&mut rng);
        let fcn_out = fcn.apply(&img.image).unwrap();
        let got = extract_exemplars(&fcn, &img, true).unwrap();
        let mut expected_classes = Vec::new();
        for class in 0..c as u8 {
            if labels.contains(&class) {
                expected_classes.push(class);
            }
        }
        let mut bad = got.len() != expected_classes.len();
        for (ex, &class) in got.iter().zip(&expected_classes) {
            bad |= ex.class_id != class || ex.client_id != 2 || ex.image_id != 7;
            bad |= ex.active_pixels != labels.iter().filter(|&&l| l == class).count();
            for ch in 0..3 {
                for p in 0..h * w {
                    let want = if labels[p] == class { fcn_out.data()[ch * h * w + p] } else { 0.0 };
                    bad |= ex.feature.data()[ch * h * w + p] != want;
                }
            }
        }
        bump("exemplar_extraction", f64::from(u8::from(bad)));

        for ex in &got {
            let v = to_vector(ex).unwrap().v;
            let mut mean = [0.0; 3];
            for (ch, m) in mean.iter_mut().enumerate() {
                let mut n = 0.0;
                for p in 0..h * w {
                    if labels[p] == ex.class_id {
                        *m += ex.feature.data()[ch * h * w + p];
                        n += 1.0;
                    }
                }
                *m /= n;
            }
            let norm = mean.iter().map(|x| x * x).sum::<f64>().sqrt();
            let want: Vec<f64> = mean.iter().map(|x| x / norm).collect();
            bump("to_vector", max_diff(&v, &want));
        }

        // prototypes
        let k = rng.random_range(1..=4);
        let (store, _, _) = random_store(&mut rng, c, k);
        let refs: Vec<&DeepExemplar> = store.iter().collect();
        let mut counts = vec![0usize; c];
        for d in &store {
            counts[d.class_id as usize] += 1;
        }
        let beta = rarity_weights(&counts).unwrap();
        bump("beta", max_diff(&beta, &oracle_beta(&counts)));
        let mut v = Vec::new();
        for class in 0..c {
            if counts[class] == 0 {
                v.push(None);
                continue;
            }
            let members: Vec<&DeepExemplar> = refs.iter().copied().filter(|d| d.class_id as usize == class).collect();
            let got = distribution_vector(&members, beta[class]).unwrap();
            bump("v_c", max_diff(&got, &oracle_v(&store, class as u8, beta[class])));
            v.push(Some(got));
        }
        let r = rng.random_range(1..=3);
        let sigma = 0.5 + rng.random::<f64>() * 1.5;
        let phi = cooccurrence(&refs, c, r);
        let phi_o = oracle_phi(&store, c, r);
        bump("phi", max_diff(&phi.concat(), &phi_o.concat()));
        let rr = correlation(&refs, &phi, r, sigma).unwrap();
        bump("R", max_diff(&rr.concat(), &oracle_r(&store, &phi_o, r, sigma).concat()));
        let g: Vec<Vec<f64>> = compose_prototypes(&v, &rr).unwrap().into_iter().map(|p| p.g).collect();
        bump("g_c", max_diff(&g.concat(), &oracle_g(&v, &rr).concat()));

        // distillation
        let (n, hw) = (rng.random_range(1..=2), rng.random_range(1..=16));
        let len = n * c * hw;
        let clients: Vec<Vec<f64>> =
            (0..rng.random_range(1..=4)).map(|_| (0..len).map(|_| rng.random::<f64>() * 4.0 - 2.0).collect()).collect();
        let server: Vec<f64> = (0..len).map(|_| rng.random::<f64>() * 4.0 - 2.0).collect();
        let cref: Vec<&[f64]> = clients.iter().map(|z| z.as_slice()).collect();
        let alpha = similarity_weights(&cref, &server).unwrap();
        bump("alpha", max_diff(&alpha, &oracle_alpha(&clients, &server)));
        let zhat = aggregate_logits(&alpha, &cref).unwrap();
        bump("z_hat", max_diff(&zhat, &oracle_zhat(&alpha, &clients)));
        let tape = GradTape::no_grad();
        let shape = vec![n, c, hw];
        let l = distill_loss(
            tape.constant_from(shape.clone(), server.clone()).unwrap(),
            tape.constant_from(shape, zhat.clone()).unwrap(),
        )
        .unwrap()
        .item()
        .unwrap();
        bump("distill_kl", (l - oracle_kl(&server, &zhat, n, c, hw)).abs());

        // contrastive
        let dim = rng.random_range(2..=6);
        let anchor = unit(&mut rng, dim);
        let pos: Vec<Vec<f64>> = (0..rng.random_range(1..=4)).map(|_| unit(&mut rng, dim)).collect();
        let neg: Vec<Vec<f64>> = (0..rng.random_range(0..=6)).map(|_| unit(&mut rng, dim)).collect();
        let tau = 0.05 + rng.random::<f64>() * 0.5;
        let a = tape.constant_from(vec![dim], anchor.clone()).unwrap();
        let negv = if neg.is_empty() { None } else { Some(tape.constant(&rows(&neg))) };
        let got = info_nce(a, tape.constant(&rows(&pos)), negv, tau).unwrap().item().unwrap();
        bump("info_nce", (got - oracle_info_nce(&anchor, &pos, &neg, tau)).abs());

        // discriminator
        let m = rng.random_range(1..=8);
        let p: Vec<f64> = (0..m).map(|_| 0.01 + 0.98 * rng.random::<f64>()).collect();
        let y: Vec<f64> = (0..m).map(|_| f64::from(u8::from(rng.random_bool(0.5)))).collect();
        let got = discriminator_loss(tape.constant_from(vec![m, 1], p.clone()).unwrap(), &y).unwrap().item().unwrap();
        bump("bce", (got - oracle_bce(&p, &y)).abs());

        // metrics
        let gt = random_labels(h, w, c, &mut rng);
        let pred = random_labels(h, w, c, &mut rng);
        let cm = confusion(&Mask::new(h, w, pred.clone()).unwrap(), &Mask::new(h, w, gt.clone()).unwrap(), c).unwrap();
        let mut counts = vec![vec![0u64; c]; c];
        for i in 0..h * w {
            counts[gt[i] as usize][pred[i] as usize] += 1;
        }
        let exact = (0..c).all(|g| (0..c).all(|q| cm.get(g, q) == counts[g][q]));
        bump("confusion_counts", f64::from(u8::from(!exact)));
        let mut ious = Vec::new();
        for cl in 0..c {
            let tp = counts[cl][cl] as f64;
            let fp: f64 = (0..c).filter(|&g| g != cl).map(|g| counts[g][cl] as f64).sum();
            let fn_: f64 = (0..c).filter(|&q| q != cl).map(|q| counts[cl][q] as f64).sum();
            if tp + fp + fn_ > 0.0 {
                ious.push(tp / (tp + fp + fn_));
            }
        }
        let want = ious.iter().sum::<f64>() / ious.len() as f64;
        bump("miou", (miou(&cm).unwrap() - want).abs());
        let correct = (0..h * w).filter(|&i| gt[i] == pred[i]).count() as f64;
        bump("pixel_accuracy", (pixel_accuracy(&cm).unwrap() - correct / (h * w) as f64).abs());
    }
    worst
}

pub fn exemplar_pool(rng: &mut ChaCha8Rng, n: usize, hw: usize) -> Vec<ClassExemplar> {
    (0..n as u32)
        .map(|i| {
            let active: Vec<bool> = (0..hw * hw).map(|_| rng.random_bool(0.5)).collect();
            let mut active = active;
            active[0] = true;
            let data = (0..3 * hw * hw).map(|j| if active[j % (hw * hw)] { rng.random::<f64>() } else { 0.0 }).collect();
            ClassExemplar {
                feature: Tensor::new(vec![3, hw, hw], data).unwrap(),
                class_id: (i % 3) as u8,
                client_id: i % 2,
                image_id: i,
                active_pixels: active.iter().filter(|&&a| a).count(),
                active,
            }
        })
        .collect()
}
