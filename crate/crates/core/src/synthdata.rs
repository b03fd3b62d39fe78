//! Procedural segmentation scenes with per-client appearance shift and label skew.
//!
//! A scene is a textured background (class 0) with a few flat-colored
//! primitives stamped on top. Geometry and appearance draw from separate
//! random streams, so changing a [`DomainShift`]'s color knobs never moves a
//! mask pixel.

use std::f64::consts::{FRAC_PI_2, PI};
use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::Tensor;
use crate::seed;

/// Geometric primitive used to render one object class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    RoadBand,
    Disc,
    Rectangle,
    Triangle,
    Diamond,
}

const SHAPE_CYCLE: [ShapeKind; 5] =
    [ShapeKind::RoadBand, ShapeKind::Disc, ShapeKind::Rectangle, ShapeKind::Triangle, ShapeKind::Diamond];

/// Objects drawn per image. Draws that land on class 0 leave the canvas untouched.
pub const OBJECTS_PER_IMAGE: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    /// Primitive for classes `1..num_classes`, in order.
    pub shapes: Vec<ShapeKind>,
    pub rng_seed: u64,
}

impl SceneSpec {
    /// Spec with the default primitive cycle.
    pub fn new(height: usize, width: usize, num_classes: usize, rng_seed: u64) -> Self {
        let shapes = (1..num_classes.max(1)).map(|c| SHAPE_CYCLE[(c - 1) % SHAPE_CYCLE.len()]).collect();
        Self { height, width, num_classes, shapes, rng_seed }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 || self.num_classes > 255 {
            return Err(Error::contract(format!("num_classes must be in [2, 255], got {}", self.num_classes)));
        }
        if self.height < 16 || self.width < 16 {
            return Err(Error::contract(format!("scene must be at least 16x16, got {}x{}", self.height, self.width)));
        }
        if self.shapes.len() != self.num_classes - 1 {
            return Err(Error::contract(format!(
                "{} shapes for {} object classes",
                self.shapes.len(),
                self.num_classes - 1
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainShift {
    pub hue_rotation: f64,
    pub brightness_scale: f64,
    pub noise_sigma: f64,
    /// Spatial frequency (radians per pixel) of the background texture; 0 disables it.
    pub texture_freq: f64,
    pub class_prior: Vec<f64>,
}

impl DomainShift {
    pub fn identity(num_classes: usize) -> Self {
        Self {
            hue_rotation: 0.0,
            brightness_scale: 1.0,
            noise_sigma: 0.0,
            texture_freq: 0.0,
            class_prior: vec![1.0 / num_classes as f64; num_classes],
        }
    }

    pub fn validate(&self, num_classes: usize) -> Result<()> {
        if !(self.brightness_scale > 0.0) {
            return Err(Error::contract("brightness_scale must be > 0"));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::contract("noise_sigma must be >= 0"));
        }
        if !self.hue_rotation.is_finite() || !self.texture_freq.is_finite() {
            return Err(Error::contract("hue_rotation and texture_freq must be finite"));
        }
        if self.class_prior.len() != num_classes {
            return Err(Error::contract(format!(
                "class_prior has {} entries for {num_classes} classes",
                self.class_prior.len()
            )));
        }
        if self.class_prior.iter().any(|&p| !(p >= 0.0)) {
            return Err(Error::contract("class_prior entries must be >= 0"));
        }
        let s: f64 = self.class_prior.iter().sum();
        if (s - 1.0).abs() > 1e-9 {
            return Err(Error::contract(format!("class_prior sums to {s}, expected 1")));
        }
        Ok(())
    }
}

/// Integer label map.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mask {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl Mask {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::shape(format!("{} labels for a {height}x{width} mask", data.len())));
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, label: u8) -> Self {
        Self { height, width, data: vec![label; height * width] }
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.width + x]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImage {
    /// `[3, H, W]`, values in `[0, 1]`.
    pub image: Tensor,
    pub mask: Mask,
    pub image_id: u32,
    pub client_id: u32,
}

/// One object placement, before rendering.
#[derive(Debug, Clone, PartialEq)]
pub struct Placement {
    pub class_id: u8,
    pub kind: ShapeKind,
    pub cx: f64,
    pub cy: f64,
    pub a: f64,
    pub b: f64,
}

impl Placement {
    fn covers(&self, x: f64, y: f64, width: usize) -> bool {
        let dx = x - self.cx;
        let dy = y - self.cy;
        match self.kind {
            // a = half thickness; spans the full width
            ShapeKind::RoadBand => dy.abs() <= self.a && x >= 0.0 && x < width as f64,
            ShapeKind::Disc => dx * dx + dy * dy <= self.a * self.a,
            ShapeKind::Rectangle => dx.abs() <= self.a && dy.abs() <= self.b,
            ShapeKind::Triangle => {
                // apex at (cx, cy - a), base at cy + a with half-width a
                if dy < -self.a || dy > self.a {
                    return false;
                }
                dx.abs() <= (dy + self.a) / 2.0
            }
            ShapeKind::Diamond => dx.abs() + dy.abs() <= self.a,
        }
    }
}

/// Object classes drawn for image `index`, in draw order, including class-0
/// draws (which render nothing). Exposed so the label-skew knob can be audited.
pub fn sample_classes(spec: &SceneSpec, shift: &DomainShift, index: usize) -> Vec<u8> {
    let mut rng = seed::rng(&[spec.rng_seed, seed::GEOMETRY, index as u64]);
    (0..OBJECTS_PER_IMAGE).map(|_| sample_prior(&shift.class_prior, &mut rng)).collect()
}

fn sample_prior<R: Rng>(prior: &[f64], rng: &mut R) -> u8 {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (c, &p) in prior.iter().enumerate() {
        acc += p;
        if u < acc {
            return c as u8;
        }
    }
    // rounding slack: fall back to the last class with positive weight
    prior.iter().rposition(|&p| p > 0.0).unwrap_or(0) as u8
}

/// Object placements for image `index`; road bands first, then the rest in draw order.
pub fn sample_layout(spec: &SceneSpec, shift: &DomainShift, index: usize) -> Vec<Placement> {
    let mut rng = seed::rng(&[spec.rng_seed, seed::GEOMETRY, index as u64]);
    let (h, w) = (spec.height as f64, spec.width as f64);
    let classes: Vec<u8> = (0..OBJECTS_PER_IMAGE).map(|_| sample_prior(&shift.class_prior, &mut rng)).collect();
    let mut out = Vec::new();
    for c in classes {
        // geometry is always drawn so the stream position does not depend on the class
        let cx = rng.random_range(0.0..w);
        let cy = rng.random_range(0.0..h);
        let a = rng.random_range(h / 12.0..h / 5.0);
        let b = rng.random_range(h / 12.0..h / 5.0);
        let band_y = rng.random_range(h / 2.0..h - h / 8.0);
        let band_half = rng.random_range(h / 16.0..h / 8.0);
        if c == 0 {
            continue;
        }
        let kind = spec.shapes[c as usize - 1];
        let p = match kind {
            ShapeKind::RoadBand => Placement { class_id: c, kind, cx: w / 2.0, cy: band_y, a: band_half, b: 0.0 },
            _ => Placement { class_id: c, kind, cx, cy, a, b },
        };
        out.push(p);
    }
    out.sort_by_key(|p| p.kind != ShapeKind::RoadBand);
    out
}

fn class_color(c: u8, num_classes: usize) -> [f64; 3] {
    if c == 0 {
        return [0.42, 0.50, 0.36];
    }
    let hue = 2.0 * PI * (c as f64 - 1.0) / (num_classes as f64 - 1.0);
    let (s, v) = (0.75, 0.85);
    hsv_to_rgb(hue, s, v)
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = (h / (2.0 * PI)).rem_euclid(1.0) * 6.0;
    let i = h6.floor();
    let f = h6 - i;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match i as i32 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Rotation by `theta` about the gray axis (1,1,1)/sqrt(3).
fn hue_matrix(theta: f64) -> [[f64; 3]; 3] {
    let (c, s) = (theta.cos(), theta.sin());
    let k = 1.0 / 3.0f64.sqrt();
    let t = 1.0 - c;
    let kk = k * k * t;
    [
        [c + kk, kk - k * s, kk + k * s],
        [kk + k * s, c + kk, kk - k * s],
        [kk - k * s, kk + k * s, c + kk],
    ]
}

fn render(spec: &SceneSpec, shift: &DomainShift, index: usize) -> (Vec<f64>, Vec<u8>) {
    let (h, w) = (spec.height, spec.width);
    let layout = sample_layout(spec, shift, index);
    let mut mask = vec![0u8; h * w];
    for p in &layout {
        for y in 0..h {
            for x in 0..w {
                if p.covers(x as f64 + 0.5, y as f64 + 0.5, w) {
                    mask[y * w + x] = p.class_id;
                }
            }
        }
    }
    let mut rng = seed::rng(&[spec.rng_seed, seed::APPEARANCE, index as u64]);
    let phase: f64 = rng.random_range(0.0..2.0 * PI);
    let noise = Normal::new(0.0, shift.noise_sigma.max(0.0)).expect("sigma validated");
    let rot = hue_matrix(shift.hue_rotation);
    let mut img = vec![0.0; 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            let c = mask[y * w + x];
            let mut rgb = class_color(c, spec.num_classes);
            if c == 0 && shift.texture_freq != 0.0 {
                let f = shift.texture_freq;
                let t = 1.0 + 0.25 * (f * x as f64 + phase).sin() * (0.7 * f * y as f64).cos();
                rgb.iter_mut().for_each(|v| *v *= t);
            }
            for ch in 0..3 {
                let rotated: f64 = (0..3).map(|k| rot[ch][k] * rgb[k]).sum();
                let mut v = rotated * shift.brightness_scale;
                if shift.noise_sigma > 0.0 {
                    v += noise.sample(&mut rng);
                }
                img[ch * h * w + y * w + x] = v.clamp(0.0, 1.0);
            }
        }
    }
    (img, mask)
}

/// Renders `n` scenes. Image ids are `0..n`, client id 0; [`split_federation`]
/// renumbers both.
pub fn generate_dataset(spec: &SceneSpec, shift: &DomainShift, n: usize) -> Result<Vec<LabeledImage>> {
    spec.validate()?;
    shift.validate(spec.num_classes)?;
    if n == 0 {
        return Err(Error::contract("generate_dataset needs n >= 1"));
    }
    (0..n)
        .map(|i| {
            let (img, mask) = render(spec, shift, i);
            Ok(LabeledImage {
                image: Tensor::new(vec![3, spec.height, spec.width], img)?,
                mask: Mask::new(spec.height, spec.width, mask)?,
                image_id: i as u32,
                client_id: 0,
            })
        })
        .collect()
}

pub fn binary_mask(img: &LabeledImage, c: usize, num_classes: usize) -> Result<Mask> {
    if c >= num_classes {
        return Err(Error::contract(format!("class {c} outside [0, {num_classes})")));
    }
    let data = img.mask.data.iter().map(|&v| u8::from(v as usize == c)).collect();
    Mask::new(img.mask.height, img.mask.width, data)
}

#[derive(Debug, Clone)]
pub struct ClientData {
    pub client_id: u32,
    pub train: Vec<LabeledImage>,
    pub val: Vec<LabeledImage>,
}

#[derive(Debug, Clone)]
pub struct FederatedData {
    pub num_classes: usize,
    pub clients: Vec<ClientData>,
    /// All data of the held-out client, if any.
    pub unseen: Option<Vec<LabeledImage>>,
}

/// Generates one dataset per client and splits it. Image ids are unique across
/// the whole federation; the held-out client contributes only to `unseen`.
pub fn split_federation(
    specs: &[SceneSpec],
    shifts: &[DomainShift],
    clients: usize,
    holdout_client: Option<usize>,
    train_per_client: usize,
    val_per_client: usize,
) -> Result<FederatedData> {
    if clients < 2 {
        return Err(Error::contract(format!("a federation needs at least 2 clients, got {clients}")));
    }
    if specs.len() != clients || shifts.len() != clients {
        return Err(Error::contract(format!(
            "{} specs and {} shifts for {clients} clients",
            specs.len(),
            shifts.len()
        )));
    }
    if let Some(h) = holdout_client {
        if h >= clients {
            return Err(Error::contract(format!("holdout client {h} >= client count {clients}")));
        }
    }
    if train_per_client == 0 || val_per_client == 0 {
        return Err(Error::contract("train and val splits must be non-empty"));
    }
    let num_classes = specs[0].num_classes;
    if specs.iter().any(|s| s.num_classes != num_classes || s.height != specs[0].height || s.width != specs[0].width)
    {
        return Err(Error::contract("all clients must share image size and class count"));
    }
    let per = train_per_client + val_per_client;
    let mut out = Vec::new();
    let mut unseen = None;
    for (i, (spec, shift)) in specs.iter().zip(shifts).enumerate() {
        let mut imgs = generate_dataset(spec, shift, per)?;
        for (j, im) in imgs.iter_mut().enumerate() {
            im.client_id = i as u32;
            im.image_id = (i * per + j) as u32;
        }
        if Some(i) == holdout_client {
            unseen = Some(imgs);
            continue;
        }
        let val = imgs.split_off(train_per_client);
        out.push(ClientData { client_id: i as u32, train: imgs, val });
    }
    Ok(FederatedData { num_classes, clients: out, unseen })
}

/// Heterogeneity scenario.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    Slight,
    Severe,
    Custom,
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "slight" => Ok(Preset::Slight),
            "severe" => Ok(Preset::Severe),
            "custom" => Ok(Preset::Custom),
            other => Err(Error::Config(format!("unknown preset {other:?} (slight, severe, custom)"))),
        }
    }
}

impl std::fmt::Display for Preset {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Preset::Slight => "slight",
            Preset::Severe => "severe",
            Preset::Custom => "custom",
        })
    }
}

/// Per-client shifts for a preset. `Custom` starts from identity shifts.
pub fn preset_shifts(preset: Preset, clients: usize, num_classes: usize) -> Vec<DomainShift> {
    (0..clients)
        .map(|i| {
            let frac = if clients > 1 { i as f64 / (clients - 1) as f64 } else { 0.0 };
            match preset {
                Preset::Severe => DomainShift {
                    hue_rotation: FRAC_PI_2 * (i % 4) as f64,
                    brightness_scale: 0.7 + 0.6 * frac,
                    noise_sigma: 0.05,
                    texture_freq: 0.3 + 0.25 * (i % 4) as f64,
                    class_prior: skewed_prior(num_classes, i),
                },
                Preset::Slight => DomainShift {
                    hue_rotation: 0.1 * (frac - 0.5),
                    brightness_scale: 0.95 + 0.1 * frac,
                    noise_sigma: 0.02,
                    texture_freq: 0.5,
                    class_prior: flat_prior(num_classes),
                },
                Preset::Custom => DomainShift::identity(num_classes),
            }
        })
        .collect()
}

const BACKGROUND_PRIOR: f64 = 0.1;

fn flat_prior(c: usize) -> Vec<f64> {
    let mut p = vec![(1.0 - BACKGROUND_PRIOR) / (c - 1) as f64; c];
    p[0] = BACKGROUND_PRIOR;
    p
}

/// Object classes weighted by `exp(-0.7 * rank)` with a client-specific rank rotation.
fn skewed_prior(c: usize, client: usize) -> Vec<f64> {
    let objects = c - 1;
    let raw: Vec<f64> = (0..objects).map(|k| (-0.7 * ((k + client) % objects) as f64).exp()).collect();
    let z: f64 = raw.iter().sum();
    let mut p = vec![BACKGROUND_PRIOR];
    p.extend(raw.iter().map(|r| (1.0 - BACKGROUND_PRIOR) * r / z));
    p
}

/// Per-client specs with seeds derived from the master seed.
pub fn preset_specs(height: usize, width: usize, num_classes: usize, master_seed: u64, clients: usize) -> Vec<SceneSpec> {
    (0..clients)
        .map(|i| SceneSpec::new(height, width, num_classes, seed::derive(&[master_seed, seed::DATA, i as u64])))
        .collect()
}

#[derive(Serialize, Deserialize)]
struct ManifestRecord {
    client_id: u32,
    image_id: u32,
    split: String,
    shape: [usize; 3],
    seed: u64,
    image_file: String,
    mask_file: String,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    num_classes: usize,
    records: Vec<ManifestRecord>,
}

/// Writes every image as a little-endian f64 blob and every mask as raw bytes,
/// plus `manifest.json`.
pub fn write_dataset_dir(dir: &Path, data: &FederatedData, specs: &[SceneSpec]) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut records = Vec::new();
    let mut emit = |split: &str, im: &LabeledImage| -> Result<()> {
        let stem = format!("c{}_{}_{}", im.client_id, split, im.image_id);
        let bytes: Vec<u8> = im.image.data().iter().flat_map(|v| v.to_le_bytes()).collect();
        fs::write(dir.join(format!("{stem}.img.bin")), bytes)?;
        fs::write(dir.join(format!("{stem}.mask.bin")), &im.mask.data)?;
        let s = im.image.shape();
        records.push(ManifestRecord {
            client_id: im.client_id,
            image_id: im.image_id,
            split: split.to_string(),
            shape: [s[0], s[1], s[2]],
            seed: specs.get(im.client_id as usize).map_or(0, |sp| sp.rng_seed),
            image_file: format!("{stem}.img.bin"),
            mask_file: format!("{stem}.mask.bin"),
        });
        Ok(())
    };
    for c in &data.clients {
        c.train.iter().try_for_each(|im| emit("train", im))?;
        c.val.iter().try_for_each(|im| emit("val", im))?;
    }
    if let Some(u) = &data.unseen {
        u.iter().try_for_each(|im| emit("unseen", im))?;
    }
    let manifest = Manifest { num_classes: data.num_classes, records };
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

/// Inverse of [`write_dataset_dir`].
pub fn read_dataset_dir(dir: &Path) -> Result<FederatedData> {
    let manifest: Manifest = serde_json::from_str(&fs::read_to_string(dir.join("manifest.json"))?)?;
    let mut clients: Vec<ClientData> = Vec::new();
    let mut unseen: Option<Vec<LabeledImage>> = None;
    for r in manifest.records {
        let [ch, h, w] = r.shape;
        let raw = fs::read(dir.join(&r.image_file))?;
        if raw.len() != 8 * ch * h * w {
            return Err(Error::Format(format!("{} has {} bytes, expected {}", r.image_file, raw.len(), 8 * ch * h * w)));
        }
        let data = raw.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes"))).collect();
        let mask = Mask::new(h, w, fs::read(dir.join(&r.mask_file))?)
            .map_err(|e| Error::Format(format!("{}: {e}", r.mask_file)))?;
        if mask.data.iter().any(|&v| v as usize >= manifest.num_classes) {
            return Err(Error::Format(format!("{} has labels >= {}", r.mask_file, manifest.num_classes)));
        }
        let im = LabeledImage { image: Tensor::new(vec![ch, h, w], data)?, mask, image_id: r.image_id, client_id: r.client_id };
        if r.split == "unseen" {
            unseen.get_or_insert_with(Vec::new).push(im);
            continue;
        }
        let slot = match clients.iter().position(|c| c.client_id == r.client_id) {
            Some(i) => i,
            None => {
                clients.push(ClientData { client_id: r.client_id, train: Vec::new(), val: Vec::new() });
                clients.len() - 1
            }
        };
        match r.split.as_str() {
            "train" => clients[slot].train.push(im),
            "val" => clients[slot].val.push(im),
            other => return Err(Error::Format(format!("unknown split {other:?}"))),
        }
    }
    clients.sort_by_key(|c| c.client_id);
    Ok(FederatedData { num_classes: manifest.num_classes, clients, unseen })
}
