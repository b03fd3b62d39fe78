//! Segmentation evaluation and embedding export.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{TwoBranchModel, FEATURE_STRIDE};
use crate::numcore::{GradTape, Tensor, Var};
use crate::synthdata::{LabeledImage, Mask};

/// Images per evaluation forward pass.
const EVAL_BATCH: usize = 16;

/// Row = ground truth, column = prediction.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub num_classes: usize,
    pub counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        Self { num_classes, counts: vec![0; num_classes * num_classes] }
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.num_classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Adds one labeled map.
    pub fn accumulate(&mut self, pred: &[u8], gt: &[u8]) -> Result<()> {
        if pred.len() != gt.len() {
            return Err(Error::contract(format!("prediction has {} pixels, ground truth {}", pred.len(), gt.len())));
        }
        let c = self.num_classes;
        for (&p, &g) in pred.iter().zip(gt) {
            if p as usize >= c || g as usize >= c {
                return Err(Error::contract(format!("label {} out of range for {c} classes", p.max(g))));
            }
            self.counts[g as usize * c + p as usize] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.num_classes != self.num_classes {
            return Err(Error::contract("merging confusion matrices of different class counts"));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    /// `TP / (TP + FP + FN)` per class; `None` where the denominator is zero.
    pub fn per_class_iou(&self) -> Vec<Option<f64>> {
        let c = self.num_classes;
        (0..c)
            .map(|k| {
                let tp = self.get(k, k);
                let fn_: u64 = (0..c).map(|p| self.get(k, p)).sum::<u64>() - tp;
                let fp: u64 = (0..c).map(|g| self.get(g, k)).sum::<u64>() - tp;
                let den = tp + fp + fn_;
                (den > 0).then(|| tp as f64 / den as f64)
            })
            .collect()
    }
}

pub fn confusion(pred: &Mask, gt: &Mask, num_classes: usize) -> Result<ConfusionMatrix> {
    if pred.height != gt.height || pred.width != gt.width {
        return Err(Error::contract(format!(
            "prediction {}x{} vs ground truth {}x{}",
            pred.height, pred.width, gt.height, gt.width
        )));
    }
    let mut cm = ConfusionMatrix::new(num_classes);
    cm.accumulate(&pred.data, &gt.data)?;
    Ok(cm)
}

pub fn miou(cm: &ConfusionMatrix) -> Result<f64> {
    let defined: Vec<f64> = cm.per_class_iou().into_iter().flatten().collect();
    if defined.is_empty() {
        return Err(Error::UndefinedMetric("no class has a nonzero IoU denominator".into()));
    }
    Ok(defined.iter().sum::<f64>() / defined.len() as f64)
}

pub fn pixel_accuracy(cm: &ConfusionMatrix) -> Result<f64> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::UndefinedMetric("empty confusion matrix".into()));
    }
    let trace: u64 = (0..cm.num_classes).map(|k| cm.get(k, k)).sum();
    Ok(trace as f64 / total as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    Fused,
    GlobalOnly,
    LocalOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientScore {
    pub client_id: u32,
    pub miou: f64,
    pub pixel_acc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mode: EvalMode,
    /// `None` for classes absent from both prediction and ground truth.
    pub per_class_iou: Vec<Option<f64>>,
    pub miou: f64,
    pub pixel_acc: f64,
    pub per_client: Vec<ClientScore>,
    pub unseen_domain: Option<Box<EvalReport>>,
}

impl EvalReport {
    pub fn from_confusion(cm: &ConfusionMatrix, mode: EvalMode) -> Result<Self> {
        Ok(Self {
            mode,
            per_class_iou: cm.per_class_iou(),
            miou: miou(cm)?,
            pixel_acc: pixel_accuracy(cm)?,
            per_client: Vec::new(),
            unseen_domain: None,
        })
    }

    /// Unweighted mean of per-client reports. Class IoUs average over the
    /// clients where they are defined.
    pub fn average(reports: &[(u32, EvalReport)]) -> Result<Self> {
        let Some((_, first)) = reports.first() else {
            return Err(Error::UndefinedMetric("averaging zero reports".into()));
        };
        let c = first.per_class_iou.len();
        let n = reports.len() as f64;
        let per_class_iou = (0..c)
            .map(|k| {
                let vals: Vec<f64> = reports.iter().filter_map(|(_, r)| r.per_class_iou[k]).collect();
                (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
            })
            .collect();
        Ok(Self {
            mode: first.mode,
            per_class_iou,
            miou: reports.iter().map(|(_, r)| r.miou).sum::<f64>() / n,
            pixel_acc: reports.iter().map(|(_, r)| r.pixel_acc).sum::<f64>() / n,
            per_client: reports
                .iter()
                .map(|(id, r)| ClientScore { client_id: *id, miou: r.miou, pixel_acc: r.pixel_acc })
                .collect(),
            unseen_domain: None,
        })
    }
}

/// Stacks images into a `[N, 3, H, W]` batch.
pub fn stack_images(images: &[&LabeledImage]) -> Result<Tensor> {
    let first = images.first().ok_or_else(|| Error::contract("empty image batch"))?;
    let s = first.image.shape().to_vec();
    let mut data = Vec::with_capacity(images.len() * first.image.numel());
    for im in images {
        if im.image.shape() != s.as_slice() {
            return Err(Error::shape(format!("image {:?} in a batch of {s:?}", im.image.shape())));
        }
        data.extend_from_slice(im.image.data());
    }
    Tensor::new(vec![images.len(), s[0], s[1], s[2]], data)
}

/// Per-image feature-resolution logits `[C, H/4, W/4]` for the chosen mode.
pub fn predict_low_logits(model: &TwoBranchModel, images: &[&LabeledImage], mode: EvalMode) -> Result<Vec<Vec<f64>>> {
    predict_with(model, images, mode, |v| Ok(v.to_vec()))
}

/// Per-image logits `[C, H, W]` for the chosen mode.
pub fn predict_logits(model: &TwoBranchModel, images: &[&LabeledImage], mode: EvalMode) -> Result<Vec<Vec<f64>>> {
    predict_with(model, images, mode, |v| Ok(v.upsample_nearest(FEATURE_STRIDE)?.to_vec()))
}

fn predict_with(
    model: &TwoBranchModel,
    images: &[&LabeledImage],
    mode: EvalMode,
    read: impl for<'t> Fn(Var<'t>) -> Result<Vec<f64>>,
) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(EVAL_BATCH) {
        let x = stack_images(chunk)?;
        let tape = GradTape::no_grad();
        let xv = tape.constant(&x);
        let logits = match mode {
            EvalMode::GlobalOnly => read(model.forward_global(&tape, xv)?.low_logits)?,
            EvalMode::LocalOnly => read(model.forward_local(&tape, xv)?.low_logits)?,
            EvalMode::Fused => {
                let g = read(model.forward_global(&tape, xv)?.low_logits)?;
                let l = read(model.forward_local(&tape, xv)?.low_logits)?;
                crate::model::fuse_outputs(&l, &g)?
            }
        };
        let per = logits.len() / chunk.len();
        out.extend(logits.chunks_exact(per).map(|c| c.to_vec()));
    }
    Ok(out)
}

/// Channel argmax of a `[C, H, W]` map; ties go to the lowest class.
pub fn argmax_map(logits: &[f64], classes: usize) -> Vec<u8> {
    let hw = logits.len() / classes;
    (0..hw)
        .map(|p| {
            let mut best = 0;
            for c in 1..classes {
                if logits[c * hw + p] > logits[best * hw + p] {
                    best = c;
                }
            }
            best as u8
        })
        .collect()
}

/// Nearest upsampling of a feature-resolution label map to `height x width`.
pub fn upsample_labels(low: &[u8], height: usize, width: usize) -> Vec<u8> {
    let wl = width / FEATURE_STRIDE;
    let mut out = Vec::with_capacity(height * width);
    for y in 0..height {
        let row = (y / FEATURE_STRIDE) * wl;
        out.extend((0..width).map(|x| low[row + x / FEATURE_STRIDE]));
    }
    out
}

pub fn evaluate_client(model: &TwoBranchModel, val: &[LabeledImage], mode: EvalMode) -> Result<EvalReport> {
    if val.is_empty() {
        return Err(Error::contract("evaluation set is empty"));
    }
    let c = model.classes();
    let refs: Vec<&LabeledImage> = val.iter().collect();
    let mut cm = ConfusionMatrix::new(c);
    // argmax commutes with nearest upsampling, so labels are computed per cell
    for (im, z) in refs.iter().zip(predict_low_logits(model, &refs, mode)?) {
        let low = argmax_map(&z, c);
        cm.accumulate(&upsample_labels(&low, im.mask.height, im.mask.width), &im.mask.data)?;
    }
    EvalReport::from_confusion(&cm, mode)
}

/// One sampled pixel embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingRecord {
    pub feature: Vec<f64>,
    pub class_id: u8,
    pub image_id: u32,
    pub y: usize,
    pub x: usize,
}

/// Samples up to `sample_per_class` pixels per class from `images` and reads
/// the global-branch extractor feature at each. Returns the records and the
/// classes that had no pixels.
pub fn export_embeddings<R: Rng + ?Sized>(
    model: &TwoBranchModel,
    images: &[LabeledImage],
    sample_per_class: usize,
    rng: &mut R,
) -> Result<(Vec<EmbeddingRecord>, Vec<u8>)> {
    if sample_per_class == 0 {
        return Err(Error::contract("sample_per_class must be >= 1"));
    }
    let c = model.classes();
    let mut pool: Vec<Vec<(usize, usize)>> = vec![Vec::new(); c];
    for (i, im) in images.iter().enumerate() {
        for (p, &g) in im.mask.data.iter().enumerate() {
            if (g as usize) < c {
                pool[g as usize].push((i, p));
            }
        }
    }
    let mut picks = Vec::new();
    let mut skipped = Vec::new();
    for (k, cands) in pool.iter_mut().enumerate() {
        if cands.is_empty() {
            skipped.push(k as u8);
            continue;
        }
        let (chosen, _) = cands.partial_shuffle(rng, sample_per_class);
        picks.extend(chosen.iter().map(|&(i, p)| (k as u8, i, p)));
    }
    let mut features = std::collections::BTreeMap::new();
    let mut out = Vec::with_capacity(picks.len());
    for (k, i, p) in picks {
        let im = &images[i];
        let feat = match features.get(&i) {
            Some(f) => f,
            None => {
                let tape = GradTape::no_grad();
                let s = im.image.shape();
                let x = tape.constant(&im.image.reshape(&[1, s[0], s[1], s[2]])?);
                let f = model.global.extractor.forward(&tape, x)?.to_tensor();
                features.entry(i).or_insert(f)
            }
        };
        let (w, fs) = (im.mask.width, feat.shape().to_vec());
        let (y, x) = (p / w, p % w);
        let (fy, fx) = (y / FEATURE_STRIDE, x / FEATURE_STRIDE);
        let plane = fs[2] * fs[3];
        let feature = (0..fs[1]).map(|ch| feat.data()[ch * plane + fy * fs[3] + fx]).collect();
        out.push(EmbeddingRecord { feature, class_id: k, image_id: im.image_id, y, x });
    }
    Ok((out, skipped))
}

/// CSV with header `f0..f{K-1},class_id`.
pub fn write_embeddings_csv<W: Write>(records: &[EmbeddingRecord], out: W) -> Result<()> {
    let k = records.first().map_or(0, |r| r.feature.len());
    let mut w = csv::Writer::from_writer(out);
    let mut header: Vec<String> = (0..k).map(|i| format!("f{i}")).collect();
    header.push("class_id".into());
    w.write_record(&header)?;
    for r in records {
        let mut row: Vec<String> = r.feature.iter().map(|v| v.to_string()).collect();
        row.push(r.class_id.to_string());
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}
