//! Central finite differences against the tape's analytic gradients.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use segfed::exemplar::ClassExemplar;
use segfed::federation::{contrastive_loss, Triplet, IGNORE_LABEL};
use segfed::losses::{confusion_loss, discriminator_loss, distill_loss};
use segfed::model::{Discriminator, ParamSet, TwoBranchModel, WeightGenerator, FEATURE_STRIDE};
use segfed::numcore::{GradTape, Tensor, Var};
use segfed::{seed, Result};

pub const EPS: f64 = 1e-5;
pub const TOL: f64 = 1e-4;
pub const SEEDS: u64 = 20;

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Below this gradient norm the comparison is absolute: a structurally zero
/// gradient shows up numerically as ~1e-11 of cancellation noise.
pub const ZERO_GRAD: f64 = 1e-7;

/// `||a - n|| / max(||a||, ||n||)` over one parameter tensor; the plain
/// difference norm when both gradients vanish.
pub fn rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, n)| a - n).collect();
    let scale = norm(analytic).max(norm(numeric));
    if scale < ZERO_GRAD {
        norm(&diff)
    } else {
        norm(&diff) / scale
    }
}

/// Worst relative error over every tensor returned by `params`.
pub fn check<M>(
    state: &mut M,
    params: impl Fn(&mut M) -> Vec<&mut Tensor>,
    loss: impl for<'t> Fn(&M, &'t GradTape) -> Result<Var<'t>>,
) -> Result<f64> {
    let tape = GradTape::new();
    let l = loss(state, &tape)?;
    tape.backward(l)?;
    let analytic: Vec<Vec<f64>> = params(state)
        .into_iter()
        .map(|t| tape.grad_of(t).unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect();
    drop(tape);

    let eval = |s: &M| -> Result<f64> {
        let t = GradTape::no_grad();
        loss(s, &t)?.item()
    };
    let mut worst = 0.0f64;
    for (i, a) in analytic.iter().enumerate() {
        let mut numeric = vec![0.0; a.len()];
        for (j, slot) in numeric.iter_mut().enumerate() {
            let orig = params(state)[i].data()[j];
            params(state)[i].data_mut()[j] = orig + EPS;
            let up = eval(state)?;
            params(state)[i].data_mut()[j] = orig - EPS;
            let down = eval(state)?;
            params(state)[i].data_mut()[j] = orig;
            *slot = (up - down) / (2.0 * EPS);
        }
        worst = worst.max(rel_err(a, &numeric));
    }
    Ok(worst)
}

pub fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::randn(shape, 1.0, rng).into_param()
}

/// Random linear functional so every output element gets a distinct weight.
fn project<'t>(v: Var<'t>, weights: &Tensor) -> Result<Var<'t>> {
    v.mul(v.tape().constant(weights))?.sum()
}

type OpCase = (&'static str, Box<dyn Fn(u64) -> Result<f64>>);

fn unary(
    shape: &'static [usize],
    out_shape: impl Fn(&[usize]) -> Vec<usize> + 'static,
    op: impl for<'t> Fn(Var<'t>) -> Result<Var<'t>> + Clone + 'static,
) -> Box<dyn Fn(u64) -> Result<f64>> {
    Box::new(move |s| {
        let mut rng = seed::rng(&[s, 101]);
        let mut xs = vec![randn(shape, &mut rng)];
        let w = Tensor::randn(&out_shape(shape), 1.0, &mut rng);
        let op = op.clone();
        check(&mut xs, |v| v.iter_mut().collect(), move |v, t| project(op(t.param(&v[0]))?, &w))
    })
}

fn binary(
    a: &'static [usize],
    b: &'static [usize],
    out: &'static [usize],
    op: impl for<'t> Fn(Var<'t>, Var<'t>) -> Result<Var<'t>> + Clone + 'static,
) -> Box<dyn Fn(u64) -> Result<f64>> {
    Box::new(move |s| {
        let mut rng = seed::rng(&[s, 102]);
        let mut xs = vec![randn(a, &mut rng), randn(b, &mut rng)];
        let w = Tensor::randn(out, 1.0, &mut rng);
        let op = op.clone();
        check(&mut xs, |v| v.iter_mut().collect(), move |v, t| project(op(t.param(&v[0]), t.param(&v[1]))?, &w))
    })
}

fn scalar_loss(
    shapes: &'static [&'static [usize]],
    op: impl for<'t> Fn(&[Var<'t>], &mut ChaCha8Rng) -> Result<Var<'t>> + Clone + 'static,
) -> Box<dyn Fn(u64) -> Result<f64>> {
    Box::new(move |s| {
        let mut rng = seed::rng(&[s, 103]);
        let mut xs: Vec<Tensor> = shapes.iter().map(|sh| randn(sh, &mut rng)).collect();
        let aux_seed: u64 = rng.random();
        let op = op.clone();
        check(&mut xs, |v| v.iter_mut().collect(), move |v, t| {
            let vars: Vec<Var<'_>> = v.iter().map(|x| t.param(x)).collect();
            op(&vars, &mut seed::rng(&[aux_seed]))
        })
    })
}

fn mask(len: usize, groups: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let per = len / groups;
    let mut m: Vec<f64> = (0..len).map(|_| f64::from(u8::from(rng.random_bool(0.5)))).collect();
    for g in 0..groups {
        m[g * per] = 1.0;
    }
    m
}

/// Every differentiable tape operation with its own small case.
pub fn op_cases() -> Vec<OpCase> {
    vec![
        ("conv2d_stride1_pad1", binary(&[2, 3, 5, 5], &[4, 3, 3, 3], &[2, 4, 5, 5], |x, k| x.conv2d(k, 1, 1))),
        ("conv2d_stride2_pad1", binary(&[2, 2, 8, 8], &[3, 2, 3, 3], &[2, 3, 4, 4], |x, k| x.conv2d(k, 2, 1))),
        ("conv2d_1x1", binary(&[1, 4, 3, 3], &[2, 4, 1, 1], &[1, 2, 3, 3], |x, k| x.conv2d(k, 1, 0))),
        ("add_bias", binary(&[2, 3, 2, 2], &[3], &[2, 3, 2, 2], |x, b| x.add_bias(b))),
        ("add_bias_rows", binary(&[4, 3], &[3], &[4, 3], |x, b| x.add_bias(b))),
        ("relu", unary(&[3, 7], |s| s.to_vec(), |x| x.relu())),
        ("sigmoid", unary(&[3, 7], |s| s.to_vec(), |x| x.sigmoid())),
        ("upsample_nearest", unary(&[2, 2, 2, 3], |_| vec![2, 2, 8, 12], |x| x.upsample_nearest(4))),
        ("matmul", binary(&[3, 4], &[4, 5], &[3, 5], |a, b| a.matmul(b))),
        ("add", binary(&[2, 5], &[2, 5], &[2, 5], |a, b| a.add(b))),
        ("sub", binary(&[2, 5], &[2, 5], &[2, 5], |a, b| a.sub(b))),
        ("mul", binary(&[2, 5], &[2, 5], &[2, 5], |a, b| a.mul(b))),
        ("scale", unary(&[6], |s| s.to_vec(), |x| x.scale(-1.7))),
        ("sum", unary(&[2, 3], |_| vec![], |x| x.sum())),
        ("mean", unary(&[2, 3], |_| vec![], |x| x.mean())),
        ("reshape", unary(&[2, 6], |_| vec![3, 4], |x| x.reshape(&[3, 4]))),
        ("select_rows", unary(&[4, 3], |_| vec![5, 3], |x| x.select_rows(&[2, 0, 2, 3, 1]))),
        ("global_avg_pool", unary(&[2, 3, 3, 2], |_| vec![2, 3], |x| x.global_avg_pool())),
        ("l2_normalize", unary(&[3, 5], |s| s.to_vec(), |x| x.l2_normalize())),
        ("softmax", unary(&[2, 4, 3], |s| s.to_vec(), |x| x.softmax())),
        ("masked_avg_pool", scalar_loss(&[&[2, 3, 3, 3]], |v, r| {
            let m = mask(18, 2, r);
            project(v[0].masked_avg_pool(&m)?, &Tensor::randn(&[2, 3], 1.0, r))
        })),
        ("spatial_mask", scalar_loss(&[&[2, 3, 2, 2]], |v, r| {
            let m = mask(8, 2, r);
            project(v[0].spatial_mask(&m)?, &Tensor::randn(&[2, 3, 2, 2], 1.0, r))
        })),
        ("concat", scalar_loss(&[&[1, 3], &[2, 3], &[3, 3]], |v, r| {
            project(v[0].tape().concat(v)?, &Tensor::randn(&[6, 3], 1.0, r))
        })),
        ("softmax_cross_entropy", scalar_loss(&[&[2, 4, 3, 3]], |v, r| {
            let t: Vec<u8> = (0..18).map(|i| if i % 7 == 3 { IGNORE_LABEL } else { r.random_range(0..4) }).collect();
            v[0].softmax_cross_entropy(&t, IGNORE_LABEL)
        })),
        ("upsampled_cross_entropy", scalar_loss(&[&[2, 3, 2, 2]], |v, r| {
            let t: Vec<u8> = (0..128).map(|i| if i % 11 == 5 { IGNORE_LABEL } else { r.random_range(0..3) }).collect();
            v[0].upsampled_cross_entropy(&t, FEATURE_STRIDE, IGNORE_LABEL)
        })),
        ("kl_divergence", scalar_loss(&[&[2, 4, 2, 2], &[2, 4, 2, 2]], |v, _| v[0].kl_divergence(v[1]))),
        ("cosine_similarity", scalar_loss(&[&[2, 3], &[2, 3]], |v, _| v[0].cosine_similarity(v[1]))),
        ("binary_cross_entropy", scalar_loss(&[&[6, 1]], |v, r| {
            let t: Vec<f64> = (0..6).map(|_| f64::from(u8::from(r.random_bool(0.5)))).collect();
            v[0].sigmoid()?.binary_cross_entropy(&t)
        })),
        ("info_nce_scores", scalar_loss(&[&[3], &[5]], |v, _| v[0].scale(0.2)?.info_nce_scores(v[1].scale(0.2)?, 0.5))),
        ("info_nce_scores_no_negatives", scalar_loss(&[&[3]], |v, _| {
            let none = v[0].tape().constant_from(vec![0], vec![])?;
            v[0].info_nce_scores(none, 0.5)
        })),
    ]
}

/// Worst error of one op over all seeds.
pub fn run_op(case: &OpCase) -> Result<f64> {
    let mut worst = 0.0f64;
    for s in 0..SEEDS {
        worst = worst.max((case.1)(s)?);
    }
    Ok(worst)
}

/// Client model, discriminator and weight generator in one differentiable graph.
pub struct FullGraph {
    pub model: TwoBranchModel,
    pub disc: Discriminator,
    pub generator: WeightGenerator,
    images: Tensor,
    targets: Vec<u8>,
    prototypes: Vec<Vec<f64>>,
    exemplars: Vec<ClassExemplar>,
    teacher: Tensor,
}

const K: usize = 4;
const C: usize = 3;
const HW: usize = 8;

fn exemplar(rng: &mut ChaCha8Rng, class_id: u8, image_id: u32, client_id: u32) -> ClassExemplar {
    let active: Vec<bool> = (0..HW * HW).map(|i| (i / HW < 5 && i % HW < 5) || rng.random_bool(0.3)).collect();
    let raw = Tensor::randn(&[3, HW, HW], 1.0, rng);
    let data = raw.data().iter().enumerate().map(|(i, v)| if active[i % (HW * HW)] { *v } else { 0.0 }).collect();
    let active_pixels = active.iter().filter(|a| **a).count();
    ClassExemplar {
        feature: Tensor::new(vec![3, HW, HW], data).unwrap(),
        class_id,
        client_id,
        image_id,
        active,
        active_pixels,
    }
}

impl FullGraph {
    pub fn new(s: u64) -> Self {
        let mut rng = seed::rng(&[s, 104]);
        let model = TwoBranchModel::new(K, C, &mut rng);
        let disc = Discriminator::new(C, &mut rng);
        let generator = WeightGenerator::new(K, &mut rng);
        let images = Tensor::randn(&[2, 3, HW, HW], 1.0, &mut rng);
        let targets = (0..2 * HW * HW).map(|_| rng.random_range(0..C as u8)).collect();
        let prototypes = (0..C).map(|_| Tensor::randn(&[K], 1.0, &mut rng).into_data()).collect();
        let exemplars = vec![
            exemplar(&mut rng, 1, 0, 0),
            exemplar(&mut rng, 1, 1, 1),
            exemplar(&mut rng, 2, 2, 0),
            exemplar(&mut rng, 0, 3, 1),
        ];
        let f = HW / FEATURE_STRIDE;
        let teacher = Tensor::randn(&[2, C, f, f], 1.0, &mut rng);
        let mut g = Self { model, disc, generator, images, targets, prototypes, exemplars, teacher };
        // Zero-initialised biases put every masked-out position exactly on a
        // ReLU kink; move off it.
        for p in g.params() {
            p.data_mut().iter_mut().for_each(|v| *v += 0.05 * rng.random::<f64>() + 0.01);
        }
        g
    }

    pub fn params(&mut self) -> Vec<&mut Tensor> {
        let mut p = self.model.global.params_mut();
        p.extend(self.model.local.params_mut());
        p.extend(self.disc.params_mut());
        p.extend(self.generator.params_mut());
        p
    }

    /// Segmentation, discriminator, confusion, contrastive and distillation
    /// terms summed into one scalar.
    pub fn loss<'t>(&self, tape: &'t GradTape) -> Result<Var<'t>> {
        let x = tape.constant(&self.images);
        let kernel = self.generator.kernel(tape, &self.prototypes)?;
        let g = self.model.global.forward(tape, x, Some(kernel))?;
        let l = self.model.local.forward(tape, x, None)?;
        let seg_g = g.low_logits.upsampled_cross_entropy(&self.targets, FEATURE_STRIDE, IGNORE_LABEL)?;
        let seg_l = l.logits()?.softmax_cross_entropy(&self.targets, IGNORE_LABEL)?;
        let pg = g.low_logits.global_avg_pool()?;
        let pl = l.low_logits.global_avg_pool()?;
        let pooled = tape.concat(&[pg, pl])?;
        let d = discriminator_loss(self.disc.forward_pooled(tape, pooled)?, &[1.0, 1.0, 0.0, 0.0])?;
        let conf = confusion_loss(self.disc.forward(tape, g.low_logits)?, 1.0)?;
        let pool: Vec<&ClassExemplar> = self.exemplars.iter().collect();
        let trip = [Triplet { anchor: 0, positives: vec![1], negatives: vec![2, 3] }];
        let intra = contrastive_loss(tape, &self.model.local.extractor, &pool, &trip, 0.5)?.expect("one triplet");
        let distill = distill_loss(g.low_logits, tape.constant(&self.teacher))?;
        seg_g.add(seg_l)?.add(d)?.add(conf.scale(0.1)?)?.add(intra)?.add(distill)
    }
}

pub fn run_full_graph(s: u64) -> Result<f64> {
    let mut g = FullGraph::new(s);
    check(&mut g, |g| g.params(), |g, t| g.loss(t))
}
