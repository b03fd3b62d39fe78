//! Server-side class prototypes built from deep exemplar embeddings.
//!
//! Pipeline: embed every stored exemplar with the server extractor, weight
//! classes by rarity, pool a distribution vector per class, measure spatial
//! co-occurrence and feature correlation between classes, then mix.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exemplar::ClassExemplar;
use crate::model::{Extractor, FEATURE_STRIDE};
use crate::numcore::{GradTape, Tensor, Var};

/// Floor of the rarity weight.
pub const RARITY_FLOOR: f64 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub struct DeepExemplar {
    /// `[K, h, w]` at feature resolution, zero outside `active`.
    pub h: Tensor,
    pub active: Vec<bool>,
    pub class_id: u8,
    pub client_id: u32,
    pub image_id: u32,
}

impl DeepExemplar {
    pub fn channels(&self) -> usize {
        self.h.shape()[0]
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.h.shape()[1], self.h.shape()[2])
    }

    /// `(y, x)` of active cells in row-major order.
    pub fn cells(&self) -> Vec<(usize, usize)> {
        let w = self.grid().1;
        self.active.iter().enumerate().filter(|(_, &a)| a).map(|(i, _)| (i / w, i % w)).collect()
    }

    fn at(&self, y: usize, x: usize) -> Vec<f64> {
        let (hh, w) = self.grid();
        (0..self.channels()).map(|k| self.h.data()[k * hh * w + y * w + x]).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassPrototype {
    pub class_id: u8,
    pub g: Vec<f64>,
    pub v: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CooccurrenceStats {
    pub phi: Vec<Vec<f64>>,
    pub r: Vec<Vec<f64>>,
    pub counts: Vec<usize>,
}

/// Any-pool of a full-resolution support down to the feature grid.
pub fn downsample_active(active: &[bool], height: usize, width: usize) -> Vec<bool> {
    let (hf, wf) = (height / FEATURE_STRIDE, width / FEATURE_STRIDE);
    let mut out = vec![false; hf * wf];
    for y in 0..height {
        for x in 0..width {
            if active[y * width + x] {
                let (fy, fx) = (y / FEATURE_STRIDE, x / FEATURE_STRIDE);
                if fy < hf && fx < wf {
                    out[fy * wf + fx] = true;
                }
            }
        }
    }
    out
}

/// Input window `[start, end)` along one axis that reproduces the full-image
/// extractor output on active cells `lo..=hi`. The extractor's receptive field
/// plus the stride-2 padding asymmetry needs two feature cells of margin.
fn crop_span(lo: usize, hi: usize, extent: usize) -> (usize, usize) {
    let start = lo.saturating_sub(2) * FEATURE_STRIDE;
    let end = ((hi + 2) * FEATURE_STRIDE).min(extent);
    (start, end)
}

/// Crop of an exemplar covering its support with exact-embedding margin.
struct Crop {
    input: Tensor,
    /// feature-grid offset and size of the crop
    fy: usize,
    fx: usize,
    fh: usize,
    fw: usize,
    /// active cells inside the crop grid
    active: Vec<bool>,
}

fn crop_exemplar(ex: &ClassExemplar, active_f: &[bool]) -> Result<Crop> {
    let (h, w) = (ex.height(), ex.width());
    if h % FEATURE_STRIDE != 0 || w % FEATURE_STRIDE != 0 {
        return Err(Error::shape(format!("exemplar {h}x{w} not divisible by {FEATURE_STRIDE}")));
    }
    let wf = w / FEATURE_STRIDE;
    let cells: Vec<(usize, usize)> =
        active_f.iter().enumerate().filter(|(_, &a)| a).map(|(i, _)| (i / wf, i % wf)).collect();
    if cells.is_empty() {
        return Err(Error::DegenerateExemplar(format!("exemplar {:?} has no active feature cell", ex.key())));
    }
    let (y0, y1) = (cells.iter().map(|c| c.0).min().unwrap(), cells.iter().map(|c| c.0).max().unwrap());
    let (x0, x1) = (cells.iter().map(|c| c.1).min().unwrap(), cells.iter().map(|c| c.1).max().unwrap());
    let (sy, ey) = crop_span(y0, y1, h);
    let (sx, ex_) = crop_span(x0, x1, w);
    let (ch, cw) = (ey - sy, ex_ - sx);
    let d = ex.feature.data();
    let mut data = Vec::with_capacity(3 * ch * cw);
    for c in 0..3 {
        for y in sy..ey {
            let row = c * h * w + y * w;
            data.extend_from_slice(&d[row + sx..row + ex_]);
        }
    }
    let (fy, fx, fh, fw) = (sy / FEATURE_STRIDE, sx / FEATURE_STRIDE, ch / FEATURE_STRIDE, cw / FEATURE_STRIDE);
    let mut active = vec![false; fh * fw];
    for &(y, x) in &cells {
        active[(y - fy) * fw + (x - fx)] = true;
    }
    Ok(Crop { input: Tensor::new(vec![1, 3, ch, cw], data)?, fy, fx, fh, fw, active })
}

/// Server-extractor embedding of one exemplar, re-masked to its active cells.
pub fn embed_exemplar(extractor: &Extractor, ex: &ClassExemplar) -> Result<DeepExemplar> {
    let (h, w) = (ex.height(), ex.width());
    let active_full = downsample_active(&ex.active, h, w);
    let crop = crop_exemplar(ex, &active_full)?;
    let tape = GradTape::no_grad();
    let feat = extractor.forward(&tape, tape.constant(&crop.input))?;
    let k = extractor.channels();
    let (hf, wf) = (h / FEATURE_STRIDE, w / FEATURE_STRIDE);
    let mut out = vec![0.0; k * hf * wf];
    feat.with_data(|f| {
        for c in 0..k {
            for y in 0..crop.fh {
                for x in 0..crop.fw {
                    if crop.active[y * crop.fw + x] {
                        out[c * hf * wf + (y + crop.fy) * wf + (x + crop.fx)] = f[c * crop.fh * crop.fw + y * crop.fw + x];
                    }
                }
            }
        }
    });
    Ok(DeepExemplar {
        h: Tensor::new(vec![k, hf, wf], out)?,
        active: active_full,
        class_id: ex.class_id,
        client_id: ex.client_id,
        image_id: ex.image_id,
    })
}

/// Differentiable contrastive vectors `[n, K]`: extractor embedding, masked
/// average over active feature cells, L2 normalization.
pub fn embed_vectors<'t>(tape: &'t GradTape, extractor: &Extractor, exemplars: &[&ClassExemplar]) -> Result<Var<'t>> {
    let mut rows = Vec::with_capacity(exemplars.len());
    for ex in exemplars {
        let active_full = downsample_active(&ex.active, ex.height(), ex.width());
        let crop = crop_exemplar(ex, &active_full)?;
        let feat = extractor.forward(tape, tape.constant(&crop.input))?;
        let mask: Vec<f64> = crop.active.iter().map(|&a| f64::from(u8::from(a))).collect();
        rows.push(feat.masked_avg_pool(&mask)?);
    }
    tape.concat(&rows)?.l2_normalize()
}

/// Rarity weights. Classes with zero exemplars get weight 0 and are excluded
/// from the min/max.
pub fn rarity_weights(counts: &[usize]) -> Result<Vec<f64>> {
    let present: Vec<usize> = counts.iter().copied().filter(|&k| k > 0).collect();
    if present.is_empty() {
        return Err(Error::EmptyPrototype);
    }
    let max = *present.iter().max().unwrap() as f64;
    let min = *present.iter().min().unwrap() as f64;
    Ok(counts
        .iter()
        .map(|&k| {
            if k == 0 {
                0.0
            } else if max == min {
                1.0
            } else {
                RARITY_FLOOR + (1.0 - RARITY_FLOOR) * (max - k as f64) / (max - min)
            }
        })
        .collect())
}

/// Mean over active cells of each channel.
pub fn masked_gap(d: &DeepExemplar) -> Vec<f64> {
    let (hh, w) = d.grid();
    let n = d.active.iter().filter(|&&a| a).count().max(1) as f64;
    (0..d.channels())
        .map(|k| {
            d.h.data()[k * hh * w..(k + 1) * hh * w].iter().zip(&d.active).filter(|(_, &a)| a).map(|(v, _)| v).sum::<f64>()
                / n
        })
        .collect()
}

/// `v_c = (1/K_c) Σ β_c · GAP_active(h_k)`.
pub fn distribution_vector(exemplars: &[&DeepExemplar], beta: f64) -> Result<Vec<f64>> {
    let first = exemplars.first().ok_or_else(|| Error::contract("distribution_vector needs >= 1 exemplar"))?;
    let mut v = vec![0.0; first.channels()];
    for d in exemplars {
        for (acc, g) in v.iter_mut().zip(masked_gap(d)) {
            *acc += beta * g;
        }
    }
    let n = exemplars.len() as f64;
    v.iter_mut().for_each(|x| *x /= n);
    Ok(v)
}

/// Exemplars of one image, indexed by class.
fn group_by_image<'a>(store: &[&'a DeepExemplar]) -> BTreeMap<(u32, u32), BTreeMap<u8, &'a DeepExemplar>> {
    let mut m: BTreeMap<(u32, u32), BTreeMap<u8, &DeepExemplar>> = BTreeMap::new();
    for d in store {
        m.entry((d.client_id, d.image_id)).or_default().insert(d.class_id, d);
    }
    m
}

/// Cells of `d` within Chebyshev distance `r` of `p`, in row-major order.
fn window(d: &DeepExemplar, p: (usize, usize), r: usize) -> impl Iterator<Item = (usize, usize)> + '_ {
    let (h, w) = d.grid();
    let (y0, y1) = (p.0.saturating_sub(r), (p.0 + r).min(h - 1));
    let (x0, x1) = (p.1.saturating_sub(r), (p.1 + r).min(w - 1));
    (y0..=y1).flat_map(move |y| (x0..=x1).map(move |x| (y, x))).filter(move |&(y, x)| d.active[y * w + x])
}

/// Per-image fraction of class-`c` cells with a class-`c'` cell within
/// Chebyshev radius `r`, averaged over the images that contain `c`.
pub fn cooccurrence(store: &[&DeepExemplar], num_classes: usize, r: usize) -> Vec<Vec<f64>> {
    let mut sum = vec![vec![0.0; num_classes]; num_classes];
    let mut images_with = vec![0usize; num_classes];
    for (_, classes) in group_by_image(store) {
        for (&c, dc) in &classes {
            let pc = dc.cells();
            if (c as usize) >= num_classes || pc.is_empty() {
                continue;
            }
            images_with[c as usize] += 1;
            for (&c2, dc2) in &classes {
                if c2 == c || (c2 as usize) >= num_classes || dc2.grid() != dc.grid() {
                    continue;
                }
                let hit = pc.iter().filter(|&&p| window(dc2, p, r).next().is_some()).count();
                sum[c as usize][c2 as usize] += hit as f64 / pc.len() as f64;
            }
        }
    }
    for c in 0..num_classes {
        if images_with[c] > 0 {
            sum[c].iter_mut().for_each(|v| *v /= images_with[c] as f64);
        }
    }
    sum
}

/// Gaussian-weighted channel correlation between neighbouring cells of two
/// classes, scaled by `phi`, then row-normalized.
pub fn correlation(store: &[&DeepExemplar], phi: &[Vec<f64>], r: usize, sigma: f64) -> Result<Vec<Vec<f64>>> {
    if !(sigma > 0.0) {
        return Err(Error::contract(format!("sigma must be > 0, got {sigma}")));
    }
    let c_n = phi.len();
    let mut sum = vec![vec![0.0; c_n]; c_n];
    let mut images_with = vec![0usize; c_n];
    for (_, classes) in group_by_image(store) {
        for (&c, dc) in &classes {
            if (c as usize) >= c_n {
                continue;
            }
            let pc = dc.cells();
            if pc.is_empty() {
                continue;
            }
            images_with[c as usize] += 1;
            for (&c2, dc2) in &classes {
                if c2 == c || (c2 as usize) >= c_n || dc2.grid() != dc.grid() {
                    continue;
                }
                let mut s = 0.0;
                let mut pairs = 0usize;
                for &p in &pc {
                    let hp = dc.at(p.0, p.1);
                    for q in window(dc2, p, r) {
                        let hq = dc2.at(q.0, q.1);
                        let dot: f64 = hp.iter().zip(&hq).map(|(a, b)| a * b).sum();
                        let dy = p.0 as f64 - q.0 as f64;
                        let dx = p.1 as f64 - q.1 as f64;
                        s += dot * (-(dy * dy + dx * dx) / (2.0 * sigma * sigma)).exp();
                        pairs += 1;
                    }
                }
                if pairs > 0 {
                    sum[c as usize][c2 as usize] += s / (pc.len() * pairs) as f64;
                }
            }
        }
    }
    let mut out = vec![vec![0.0; c_n]; c_n];
    for c in 0..c_n {
        if images_with[c] == 0 {
            continue;
        }
        for c2 in 0..c_n {
            if c2 != c {
                out[c][c2] = phi[c][c2] * sum[c][c2] / images_with[c] as f64;
            }
        }
        let row: f64 = out[c].iter().sum();
        if row > 0.0 && row.is_finite() {
            out[c].iter_mut().for_each(|v| *v /= row);
        } else {
            out[c].iter_mut().for_each(|v| *v = 0.0);
        }
    }
    Ok(out)
}

/// `g_c = v_c + (1/|C|) Σ_{c'≠c} R[c][c'] v_{c'}`; empty classes get zeros.
pub fn compose_prototypes(v: &[Option<Vec<f64>>], r: &[Vec<f64>]) -> Result<Vec<ClassPrototype>> {
    if v.len() != r.len() {
        return Err(Error::contract(format!("{} distribution vectors for a {}-class R", v.len(), r.len())));
    }
    let p = v
        .iter()
        .flatten()
        .map(|x| x.len())
        .next()
        .ok_or(Error::EmptyPrototype)?;
    let c_n = v.len() as f64;
    Ok((0..v.len())
        .map(|c| {
            let Some(vc) = &v[c] else {
                return ClassPrototype { class_id: c as u8, g: vec![0.0; p], v: vec![0.0; p] };
            };
            let mut g = vc.clone();
            for (c2, vc2) in v.iter().enumerate() {
                if c2 == c {
                    continue;
                }
                if let Some(vc2) = vc2 {
                    for (acc, x) in g.iter_mut().zip(vc2) {
                        *acc += r[c][c2] * x / c_n;
                    }
                }
            }
            ClassPrototype { class_id: c as u8, g, v: vc.clone() }
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PrototypeConfig {
    /// Chebyshev neighbourhood radius at feature resolution.
    pub radius: usize,
    /// Gaussian width; `None` means `radius / 2`.
    #[serde(default)]
    pub sigma: Option<f64>,
}

impl Default for PrototypeConfig {
    fn default() -> Self {
        Self { radius: 2, sigma: None }
    }
}

impl PrototypeConfig {
    pub fn sigma(&self) -> f64 {
        self.sigma.unwrap_or(self.radius.max(1) as f64 / 2.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrototypeSet {
    pub prototypes: Vec<ClassPrototype>,
    pub stats: CooccurrenceStats,
    pub beta: Vec<f64>,
    pub empty_classes: Vec<u8>,
    pub skipped: usize,
}

impl PrototypeSet {
    pub fn vectors(&self) -> Vec<Vec<f64>> {
        self.prototypes.iter().map(|p| p.g.clone()).collect()
    }
}

/// Full pipeline over deep exemplars.
pub fn build_from_deep(deep: &[DeepExemplar], num_classes: usize, cfg: &PrototypeConfig) -> Result<PrototypeSet> {
    let refs: Vec<&DeepExemplar> = deep.iter().filter(|d| (d.class_id as usize) < num_classes).collect();
    let mut counts = vec![0usize; num_classes];
    for d in &refs {
        counts[d.class_id as usize] += 1;
    }
    let beta = rarity_weights(&counts)?;
    let v: Vec<Option<Vec<f64>>> = (0..num_classes)
        .map(|c| {
            let members: Vec<&DeepExemplar> = refs.iter().copied().filter(|d| d.class_id as usize == c).collect();
            if members.is_empty() {
                Ok(None)
            } else {
                distribution_vector(&members, beta[c]).map(Some)
            }
        })
        .collect::<Result<_>>()?;
    let phi = cooccurrence(&refs, num_classes, cfg.radius);
    let r = correlation(&refs, &phi, cfg.radius, cfg.sigma())?;
    let prototypes = compose_prototypes(&v, &r)?;
    let empty_classes = (0..num_classes).filter(|&c| counts[c] == 0).map(|c| c as u8).collect();
    Ok(PrototypeSet { prototypes, stats: CooccurrenceStats { phi, r, counts }, beta, empty_classes, skipped: 0 })
}

/// Embeds the whole store with `extractor` and builds prototypes. Exemplars
/// whose support vanishes on the feature grid are skipped and counted.
pub fn build_prototypes<'a>(
    extractor: &Extractor,
    exemplars: impl IntoIterator<Item = &'a ClassExemplar>,
    num_classes: usize,
    cfg: &PrototypeConfig,
) -> Result<PrototypeSet> {
    let mut deep = Vec::new();
    let mut skipped = 0;
    for ex in exemplars {
        match embed_exemplar(extractor, ex) {
            Ok(d) => deep.push(d),
            Err(Error::DegenerateExemplar(_)) => skipped += 1,
            Err(e) => return Err(e),
        }
    }
    let mut set = build_from_deep(&deep, num_classes, cfg)?;
    set.skipped = skipped;
    Ok(set)
}

#[derive(Serialize)]
struct PrototypeManifestEntry {
    class_id: u8,
    #[serde(rename = "P")]
    p: usize,
}

/// Broadcast bytes: compact JSON manifest plus `8 * C * P` payload.
pub fn prototype_payload_bytes(prototypes: &[ClassPrototype]) -> usize {
    let manifest: Vec<PrototypeManifestEntry> =
        prototypes.iter().map(|p| PrototypeManifestEntry { class_id: p.class_id, p: p.g.len() }).collect();
    serde_json::to_string(&manifest).expect("manifest serializes").len() + prototypes.iter().map(|p| 8 * p.g.len()).sum::<usize>()
}
