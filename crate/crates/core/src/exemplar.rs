//! Class exemplars: FCN features masked to one class of one image.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::model::ExemplarFcn;
use crate::numcore::Tensor;
use crate::synthdata::LabeledImage;

/// Bytes of the wire header: client u32, image u32, class u16, H u16, W u16.
pub const HEADER_BYTES: usize = 14;

#[derive(Debug, Clone, PartialEq)]
pub struct ClassExemplar {
    /// `[3, H, W]`, exactly zero wherever `active` is false.
    pub feature: Tensor,
    pub class_id: u8,
    pub client_id: u32,
    pub image_id: u32,
    /// Row-major support of the class mask.
    pub active: Vec<bool>,
    pub active_pixels: usize,
}

impl ClassExemplar {
    pub fn height(&self) -> usize {
        self.feature.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.feature.shape()[2]
    }

    pub fn key(&self) -> ExemplarKey {
        (self.client_id, self.image_id, self.class_id)
    }

    /// Wire size of this exemplar.
    pub fn byte_len(&self) -> usize {
        HEADER_BYTES + 8 * self.feature.numel()
    }
}

pub type ExemplarKey = (u32, u32, u8);

/// Unit-norm pooled exemplar vector.
#[derive(Debug, Clone, PartialEq)]
pub struct ExemplarVector {
    pub v: Vec<f64>,
    pub class_id: u8,
    pub client_id: u32,
}

/// Builds `fcn_out ⊙ mask` for one class.
pub fn mask_feature(fcn_out: &Tensor, mask: &[bool]) -> Result<Tensor> {
    let s = fcn_out.shape();
    let hw = s[1] * s[2];
    if mask.len() != hw {
        return Err(Error::shape(format!("mask of {} cells for feature {s:?}", mask.len())));
    }
    let mut data = fcn_out.data().to_vec();
    for ch in 0..s[0] {
        for (v, &m) in data[ch * hw..(ch + 1) * hw].iter_mut().zip(mask) {
            if !m {
                *v = 0.0;
            }
        }
    }
    Tensor::new(s.to_vec(), data)
}

/// One exemplar per class present in the image mask, in class order.
pub fn extract_exemplars(fcn: &ExemplarFcn, img: &LabeledImage, include_background: bool) -> Result<Vec<ClassExemplar>> {
    let out = fcn.apply(&img.image)?;
    let mut present = [false; 256];
    for &v in &img.mask.data {
        present[v as usize] = true;
    }
    let mut list = Vec::new();
    for c in 0..256usize {
        if !present[c] || (c == 0 && !include_background) {
            continue;
        }
        let active: Vec<bool> = img.mask.data.iter().map(|&v| v as usize == c).collect();
        let active_pixels = active.iter().filter(|&&a| a).count();
        list.push(ClassExemplar {
            feature: mask_feature(&out, &active)?,
            class_id: c as u8,
            client_id: img.client_id,
            image_id: img.image_id,
            active,
            active_pixels,
        });
    }
    Ok(list)
}

/// L2-normalized per-channel mean over active positions.
pub fn to_vector(ex: &ClassExemplar) -> Result<ExemplarVector> {
    if ex.active_pixels == 0 {
        return Err(Error::DegenerateExemplar(format!("exemplar {:?} has no active pixels", ex.key())));
    }
    let s = ex.feature.shape();
    let hw = s[1] * s[2];
    let d = ex.feature.data();
    let mut v: Vec<f64> = (0..s[0])
        .map(|ch| {
            d[ch * hw..(ch + 1) * hw].iter().zip(&ex.active).filter(|(_, &a)| a).map(|(x, _)| x).sum::<f64>()
                / ex.active_pixels as f64
        })
        .collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n == 0.0 || !n.is_finite() {
        return Err(Error::DegenerateExemplar(format!("exemplar {:?} pools to a zero vector", ex.key())));
    }
    v.iter_mut().for_each(|x| *x /= n);
    Ok(ExemplarVector { v, class_id: ex.class_id, client_id: ex.client_id })
}

/// Stratified subset: `ceil(ratio * n_c)` exemplars drawn uniformly from each
/// class. Returns indices into `exemplars` in ascending order.
pub fn select_upload<R: Rng + ?Sized>(exemplars: &[ClassExemplar], ratio: f64, rng: &mut R) -> Result<Vec<usize>> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::contract(format!("upload ratio must be in (0, 1], got {ratio}")));
    }
    let mut by_class: BTreeMap<u8, Vec<usize>> = BTreeMap::new();
    for (i, e) in exemplars.iter().enumerate() {
        by_class.entry(e.class_id).or_default().push(i);
    }
    let mut keep = Vec::new();
    for (_, mut idx) in by_class {
        let take = stratum_size(idx.len(), ratio);
        if take < idx.len() {
            idx.shuffle(rng);
        }
        keep.extend_from_slice(&idx[..take]);
    }
    keep.sort_unstable();
    Ok(keep)
}

/// `ceil(ratio * n)`, guarding against representation error in the product.
pub fn stratum_size(n: usize, ratio: f64) -> usize {
    let x = ratio * n as f64;
    let r = x.round();
    let k = if (x - r).abs() < 1e-9 { r } else { x.ceil() };
    (k as usize).min(n)
}

pub fn serialize_exemplar(ex: &ClassExemplar) -> Result<Vec<u8>> {
    let (h, w) = (ex.height(), ex.width());
    if h > u16::MAX as usize || w > u16::MAX as usize {
        return Err(Error::Format(format!("exemplar {h}x{w} exceeds the u16 header range")));
    }
    let mut out = Vec::with_capacity(ex.byte_len());
    out.extend_from_slice(&ex.client_id.to_le_bytes());
    out.extend_from_slice(&ex.image_id.to_le_bytes());
    out.extend_from_slice(&u16::from(ex.class_id).to_le_bytes());
    out.extend_from_slice(&(h as u16).to_le_bytes());
    out.extend_from_slice(&(w as u16).to_le_bytes());
    for v in ex.feature.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

/// Inverse of [`serialize_exemplar`]. The support is recovered as the set of
/// positions with any nonzero channel.
pub fn deserialize_exemplar(bytes: &[u8]) -> Result<ClassExemplar> {
    if bytes.len() < HEADER_BYTES {
        return Err(Error::Format(format!("exemplar record of {} bytes is shorter than its header", bytes.len())));
    }
    let u32_at = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes"));
    let u16_at = |i: usize| u16::from_le_bytes(bytes[i..i + 2].try_into().expect("2 bytes"));
    let (client_id, image_id, class) = (u32_at(0), u32_at(4), u16_at(8));
    let (h, w) = (u16_at(10) as usize, u16_at(12) as usize);
    if class > u8::MAX as u16 {
        return Err(Error::Format(format!("class id {class} out of range")));
    }
    if h == 0 || w == 0 {
        return Err(Error::Format("exemplar header declares an empty map".into()));
    }
    let expect = HEADER_BYTES + 8 * 3 * h * w;
    if bytes.len() != expect {
        return Err(Error::Format(format!("exemplar record has {} bytes, header implies {expect}", bytes.len())));
    }
    let data: Vec<f64> = bytes[HEADER_BYTES..]
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
        .collect();
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::Format("exemplar payload holds non-finite values".into()));
    }
    let hw = h * w;
    let active: Vec<bool> = (0..hw).map(|p| (0..3).any(|ch| data[ch * hw + p] != 0.0)).collect();
    let active_pixels = active.iter().filter(|&&a| a).count();
    if active_pixels == 0 {
        return Err(Error::DegenerateExemplar("exemplar payload is all zeros".into()));
    }
    Ok(ClassExemplar {
        feature: Tensor::new(vec![3, h, w], data)?,
        class_id: class as u8,
        client_id,
        image_id,
        active,
        active_pixels,
    })
}

/// Server-side exemplar store, keyed `(client, image, class)`.
#[derive(Debug, Clone, Default)]
pub struct ExemplarStore {
    items: BTreeMap<ExemplarKey, ClassExemplar>,
}

impl ExemplarStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, ex: ClassExemplar) -> Result<()> {
        let key = ex.key();
        if self.items.contains_key(&key) {
            return Err(Error::contract(format!("duplicate exemplar key {key:?}")));
        }
        self.items.insert(key, ex);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn get(&self, key: &ExemplarKey) -> Option<&ClassExemplar> {
        self.items.get(key)
    }

    /// Exemplars in key order.
    pub fn iter(&self) -> impl Iterator<Item = &ClassExemplar> {
        self.items.values()
    }

    pub fn as_vec(&self) -> Vec<&ClassExemplar> {
        self.items.values().collect()
    }

    pub fn class_counts(&self, num_classes: usize) -> Vec<usize> {
        let mut k = vec![0; num_classes];
        for e in self.items.values() {
            if (e.class_id as usize) < num_classes {
                k[e.class_id as usize] += 1;
            }
        }
        k
    }
}
