//! Two-branch segmentation model, exemplar FCN, discriminator and prototype
//! weight generator, plus the flat parameter image used on the wire and on disk.

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numcore::{GradTape, Tensor, Var};

/// Spatial reduction of the extractor; the head upsamples by the same factor.
pub const FEATURE_STRIDE: usize = 4;

/// Anything that owns an ordered, named list of parameter tensors.
pub trait ParamSet {
    fn named_params(&self) -> Vec<(String, &Tensor)>;
    fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)>;

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.named_params_mut().into_iter().map(|(_, t)| t).collect()
    }

    fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.numel()).sum()
    }

    fn set_trainable(&mut self, flag: bool) {
        for (_, t) in self.named_params_mut() {
            t.set_requires_grad(flag);
            t.clear_grad();
        }
    }
}

#[derive(Debug, Clone)]
pub struct Conv {
    pub weight: Tensor,
    pub bias: Tensor,
    pub stride: usize,
    pub pad: usize,
}

impl Conv {
    /// He-initialized kernel, zero bias.
    pub fn new<R: Rng + ?Sized>(cin: usize, cout: usize, k: usize, stride: usize, pad: usize, rng: &mut R) -> Self {
        let std = (2.0 / (cin * k * k) as f64).sqrt();
        Self {
            weight: Tensor::randn(&[cout, cin, k, k], std, rng).into_param(),
            bias: Tensor::zeros(&[cout]).into_param(),
            stride,
            pad,
        }
    }

    pub fn forward<'t>(&self, tape: &'t GradTape, x: Var<'t>) -> Result<Var<'t>> {
        x.conv2d(tape.param(&self.weight), self.stride, self.pad)?.add_bias(tape.param(&self.bias))
    }

    fn named<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        out.push((format!("{prefix}.weight"), &self.weight));
        out.push((format!("{prefix}.bias"), &self.bias));
    }

    fn named_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>) {
        out.push((format!("{prefix}.weight"), &mut self.weight));
        out.push((format!("{prefix}.bias"), &mut self.bias));
    }
}

/// Fully connected layer, `weight` is `[in, out]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, std: f64, rng: &mut R) -> Self {
        Self {
            weight: Tensor::randn(&[fan_in, fan_out], std, rng).into_param(),
            bias: Tensor::zeros(&[fan_out]).into_param(),
        }
    }

    pub fn forward<'t>(&self, tape: &'t GradTape, x: Var<'t>) -> Result<Var<'t>> {
        x.matmul(tape.param(&self.weight))?.add_bias(tape.param(&self.bias))
    }

    fn named<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        out.push((format!("{prefix}.weight"), &self.weight));
        out.push((format!("{prefix}.bias"), &self.bias));
    }

    fn named_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>) {
        out.push((format!("{prefix}.weight"), &mut self.weight));
        out.push((format!("{prefix}.bias"), &mut self.bias));
    }

    fn eval(&self, x: &[f64]) -> Vec<f64> {
        let (fi, fo) = (self.weight.shape()[0], self.weight.shape()[1]);
        let w = self.weight.data();
        (0..fo).map(|j| self.bias.data()[j] + (0..fi).map(|i| x[i] * w[i * fo + j]).sum::<f64>()).collect()
    }
}

/// Three 3x3 conv layers (stride 2, 2, 1) with ReLU; output at 1/4 resolution.
#[derive(Debug, Clone)]
pub struct Extractor {
    pub layers: [Conv; 3],
}

impl Extractor {
    pub fn new<R: Rng + ?Sized>(channels: usize, rng: &mut R) -> Self {
        Self {
            layers: [
                Conv::new(3, channels, 3, 2, 1, rng),
                Conv::new(channels, channels, 3, 2, 1, rng),
                Conv::new(channels, channels, 3, 1, 1, rng),
            ],
        }
    }

    pub fn channels(&self) -> usize {
        self.layers[2].weight.shape()[0]
    }

    /// `[N, 3, H, W] -> [N, K, H/4, W/4]`.
    pub fn forward<'t>(&self, tape: &'t GradTape, x: Var<'t>) -> Result<Var<'t>> {
        let s = x.shape();
        if s.len() != 4 || s[1] != 3 {
            return Err(Error::shape(format!("extractor expects [N, 3, H, W], got {s:?}")));
        }
        if s[2] % FEATURE_STRIDE != 0 || s[3] % FEATURE_STRIDE != 0 {
            return Err(Error::shape(format!("spatial size {}x{} not divisible by {FEATURE_STRIDE}", s[2], s[3])));
        }
        let mut h = x;
        for l in &self.layers {
            h = l.forward(tape, h)?.relu()?;
        }
        Ok(h)
    }
}

impl ParamSet for Extractor {
    fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            l.named(&format!("conv{i}"), &mut out);
        }
        out
    }

    fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.named_mut(&format!("conv{i}"), &mut out);
        }
        out
    }
}

/// 1x1 conv from features to class logits (at feature resolution).
#[derive(Debug, Clone)]
pub struct SegHead {
    pub conv: Conv,
}

impl SegHead {
    pub fn new<R: Rng + ?Sized>(channels: usize, classes: usize, rng: &mut R) -> Self {
        Self { conv: Conv::new(channels, classes, 1, 1, 0, rng) }
    }

    pub fn classes(&self) -> usize {
        self.conv.weight.shape()[0]
    }
}

impl ParamSet for SegHead {
    fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        self.conv.named("head", &mut out);
        out
    }

    fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        self.conv.named_mut("head", &mut out);
        out
    }
}

#[derive(Debug, Clone)]
pub struct Branch {
    pub extractor: Extractor,
    pub head: SegHead,
}

/// Features and logits of one branch pass. Logits are kept at feature
/// resolution; the full-size map is their nearest upsampling.
pub struct BranchOut<'t> {
    pub features: Var<'t>,
    /// `[N, C, H/4, W/4]`.
    pub low_logits: Var<'t>,
}

impl<'t> BranchOut<'t> {
    /// Full-resolution logits `[N, C, H, W]`.
    pub fn logits(&self) -> Result<Var<'t>> {
        self.low_logits.upsample_nearest(FEATURE_STRIDE)
    }
}

impl Branch {
    pub fn new<R: Rng + ?Sized>(channels: usize, classes: usize, rng: &mut R) -> Self {
        Self { extractor: Extractor::new(channels, rng), head: SegHead::new(channels, classes, rng) }
    }

    /// With a prototype kernel `[C, K, 1, 1]` the low-resolution logits are the
    /// mean of the head and the prototype conv.
    pub fn forward<'t>(&self, tape: &'t GradTape, x: Var<'t>, proto: Option<Var<'t>>) -> Result<BranchOut<'t>> {
        let features = self.extractor.forward(tape, x)?;
        let mut low = self.head.conv.forward(tape, features)?;
        if let Some(k) = proto {
            let p = features.conv2d(k, 1, 0)?;
            low = low.add(p)?.scale(0.5)?;
        }
        Ok(BranchOut { features, low_logits: low })
    }
}

impl ParamSet for Branch {
    fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<_> =
            self.extractor.named_params().into_iter().map(|(n, t)| (format!("extractor.{n}"), t)).collect();
        out.extend(self.head.named_params());
        out
    }

    fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<_> =
            self.extractor.named_params_mut().into_iter().map(|(n, t)| (format!("extractor.{n}"), t)).collect();
        out.extend(self.head.named_params_mut());
        out
    }
}

/// Client model: global and local branch, plus the installed prototype kernel.
#[derive(Debug, Clone)]
pub struct TwoBranchModel {
    pub global: Branch,
    pub local: Branch,
    /// `[C, K, 1, 1]`, never trainable on the client.
    pub prototype_conv: Option<Tensor>,
}

impl TwoBranchModel {
    pub fn new<R: Rng + ?Sized>(channels: usize, classes: usize, rng: &mut R) -> Self {
        Self { global: Branch::new(channels, classes, rng), local: Branch::new(channels, classes, rng), prototype_conv: None }
    }

    pub fn classes(&self) -> usize {
        self.global.head.classes()
    }

    pub fn forward_global<'t>(&self, tape: &'t GradTape, x: Var<'t>) -> Result<BranchOut<'t>> {
        let proto = self.prototype_conv.as_ref().map(|k| tape.constant(k));
        self.global.forward(tape, x, proto)
    }

    pub fn forward_local<'t>(&self, tape: &'t GradTape, x: Var<'t>) -> Result<BranchOut<'t>> {
        self.local.forward(tape, x, None)
    }

    /// Writes `f_w(g_c)` into prototype-conv row `c`.
    pub fn install_prototype_conv(&mut self, prototypes: &[Vec<f64>], gen: &WeightGenerator) -> Result<()> {
        let c = self.classes();
        if prototypes.len() != c {
            return Err(Error::contract(format!("{} prototypes for {c} classes", prototypes.len())));
        }
        let k = self.global.extractor.channels();
        let mut w = Tensor::new(vec![c, k, 1, 1], gen.generate(prototypes)?)?;
        w.set_requires_grad(false);
        self.prototype_conv = Some(w);
        Ok(())
    }
}

/// `(z_local + z_global) / 2`.
pub fn fuse_outputs(z_local: &[f64], z_global: &[f64]) -> Result<Vec<f64>> {
    if z_local.len() != z_global.len() {
        return Err(Error::contract(format!("fuse_outputs lengths {} vs {}", z_local.len(), z_global.len())));
    }
    Ok(z_local.iter().zip(z_global).map(|(a, b)| (a + b) / 2.0).collect())
}

/// Frozen 3 -> 8 -> 3 image-to-image FCN producing exemplar features.
#[derive(Debug, Clone)]
pub struct ExemplarFcn {
    layers: [Conv; 2],
}

/// Hidden width of the exemplar FCN.
pub const FCN_HIDDEN: usize = 8;

impl ExemplarFcn {
    /// Near-identity init: hidden channels `j` and `j+3` carry input channel
    /// `j mod 3` through the center tap, plus seeded Gaussian jitter, so
    /// exemplars stay close to the image distribution the branches see.
    pub fn new<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let jitter = 0.05;
        let mut l1 = Conv::new(3, FCN_HIDDEN, 3, 1, 1, rng);
        let mut l2 = Conv::new(FCN_HIDDEN, 3, 3, 1, 1, rng);
        let w1 = Tensor::randn(&[FCN_HIDDEN, 3, 3, 3], jitter, rng);
        let w2 = Tensor::randn(&[3, FCN_HIDDEN, 3, 3], jitter, rng);
        l1.weight.data_mut().copy_from_slice(w1.data());
        l2.weight.data_mut().copy_from_slice(w2.data());
        let center = 4;
        for j in 0..FCN_HIDDEN {
            let ci = j % 3;
            l1.weight.data_mut()[(j * 3 + ci) * 9 + center] += 1.0;
        }
        // each input channel reaches the output through all hidden copies
        for j in 0..FCN_HIDDEN {
            let co = j % 3;
            let copies = (0..FCN_HIDDEN).filter(|h| h % 3 == co).count() as f64;
            l2.weight.data_mut()[(co * FCN_HIDDEN + j) * 9 + center] += 1.0 / copies;
        }
        for l in [&mut l1, &mut l2] {
            l.weight.set_requires_grad(false);
            l.bias.set_requires_grad(false);
        }
        Self { layers: [l1, l2] }
    }

    pub fn forward<'t>(&self, tape: &'t GradTape, x: Var<'t>) -> Result<Var<'t>> {
        let h = self.layers[0].forward(tape, x)?.relu()?;
        self.layers[1].forward(tape, h)
    }

    /// `[3, H, W] -> [3, H, W]`.
    pub fn apply(&self, image: &Tensor) -> Result<Tensor> {
        let s = image.shape();
        if s.len() != 3 || s[0] != 3 {
            return Err(Error::shape(format!("exemplar FCN expects [3, H, W], got {s:?}")));
        }
        let tape = GradTape::no_grad();
        let x = tape.constant(&image.reshape(&[1, 3, s[1], s[2]])?);
        self.forward(&tape, x)?.to_tensor().reshape(s)
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        self.layers[0].named("fcn0", &mut out);
        self.layers[1].named("fcn1", &mut out);
        out
    }
}

/// MLP over globally pooled logits, `C -> 64 -> 32 -> 1`, sigmoid output.
#[derive(Debug, Clone)]
pub struct Discriminator {
    pub layers: [Linear; 3],
}

impl Discriminator {
    pub fn new<R: Rng + ?Sized>(classes: usize, rng: &mut R) -> Self {
        let he = |n: usize| (2.0 / n as f64).sqrt();
        Self {
            layers: [
                Linear::new(classes, 64, he(classes), rng),
                Linear::new(64, 32, he(64), rng),
                Linear::new(32, 1, (1.0 / 32.0f64).sqrt(), rng),
            ],
        }
    }

    /// `[N, C, ...]` logits -> `[N, 1]` probabilities of "global branch".
    pub fn forward<'t>(&self, tape: &'t GradTape, logits: Var<'t>) -> Result<Var<'t>> {
        let pooled = if logits.shape().len() > 2 { logits.global_avg_pool()? } else { logits };
        self.forward_pooled(tape, pooled)
    }

    pub fn forward_pooled<'t>(&self, tape: &'t GradTape, pooled: Var<'t>) -> Result<Var<'t>> {
        let h = self.layers[0].forward(tape, pooled)?.relu()?;
        let h = self.layers[1].forward(tape, h)?.relu()?;
        self.layers[2].forward(tape, h)?.sigmoid()
    }

    /// p-hat for one `[C, H, W]` logit map.
    pub fn discriminate(&self, logits: &Tensor) -> Result<f64> {
        let s = logits.shape();
        let tape = GradTape::no_grad();
        let mut shape = vec![1];
        shape.extend_from_slice(s);
        let x = tape.constant(&logits.reshape(&shape)?);
        self.forward(&tape, x)?.item()
    }
}

impl ParamSet for Discriminator {
    fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            l.named(&format!("fc{i}"), &mut out);
        }
        out
    }

    fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.named_mut(&format!("fc{i}"), &mut out);
        }
        out
    }
}

/// `f_w`: prototype (P = K) -> kernel row (K), one hidden layer of width 2K.
#[derive(Debug, Clone)]
pub struct WeightGenerator {
    pub layers: [Linear; 2],
}

impl WeightGenerator {
    /// The output layer starts small so freshly installed prototype logits are near zero.
    pub fn new<R: Rng + ?Sized>(channels: usize, rng: &mut R) -> Self {
        Self {
            layers: [
                Linear::new(channels, 2 * channels, (2.0 / channels as f64).sqrt(), rng),
                Linear::new(2 * channels, channels, 0.01, rng),
            ],
        }
    }

    pub fn channels(&self) -> usize {
        self.layers[1].weight.shape()[1]
    }

    /// `[C, P] -> [C, K]` on a tape.
    pub fn forward<'t>(&self, tape: &'t GradTape, g: Var<'t>) -> Result<Var<'t>> {
        let h = self.layers[0].forward(tape, g)?.relu()?;
        self.layers[1].forward(tape, h)
    }

    /// Kernel rows for every prototype, row-major `[C, K]`.
    pub fn generate(&self, prototypes: &[Vec<f64>]) -> Result<Vec<f64>> {
        let p = self.layers[0].weight.shape()[0];
        let mut out = Vec::with_capacity(prototypes.len() * self.channels());
        for (c, g) in prototypes.iter().enumerate() {
            if g.len() != p {
                return Err(Error::shape(format!("prototype {c} has length {}, expected {p}", g.len())));
            }
            let h: Vec<f64> = self.layers[0].eval(g).into_iter().map(|v| v.max(0.0)).collect();
            out.extend(self.layers[1].eval(&h));
        }
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::NumericFault("weight generator produced a non-finite kernel".into()));
        }
        Ok(out)
    }

    /// Prototype-conv kernel `[C, K, 1, 1]` as a differentiable value.
    pub fn kernel<'t>(&self, tape: &'t GradTape, prototypes: &[Vec<f64>]) -> Result<Var<'t>> {
        let c = prototypes.len();
        let flat: Vec<f64> = prototypes.iter().flatten().copied().collect();
        let p = flat.len() / c.max(1);
        let g = tape.constant_from(vec![c, p], flat)?;
        let k = self.channels();
        self.forward(tape, g)?.reshape(&[c, k, 1, 1])
    }
}

impl ParamSet for WeightGenerator {
    fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            l.named(&format!("fw{i}"), &mut out);
        }
        out
    }

    fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.named_mut(&format!("fw{i}"), &mut out);
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

/// Serialized parameters: compact JSON manifest plus little-endian f64 payload.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamBlob {
    pub manifest: String,
    pub payload: Vec<u8>,
}

impl ParamBlob {
    /// Bytes on the wire: manifest text plus payload.
    pub fn byte_len(&self) -> usize {
        self.manifest.len() + self.payload.len()
    }

    /// Hex SHA-256 of the payload.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(&self.payload))
    }

    pub fn entries(&self) -> Result<Vec<ParamEntry>> {
        serde_json::from_str(&self.manifest).map_err(|e| Error::Format(format!("bad parameter manifest: {e}")))
    }

    /// Values as f64, in manifest order.
    pub fn values(&self) -> Result<Vec<f64>> {
        if self.payload.len() % 8 != 0 {
            return Err(Error::Format(format!("payload of {} bytes is not a whole number of f64", self.payload.len())));
        }
        Ok(self.payload.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes"))).collect())
    }
}

pub fn manifest_of<P: ParamSet + ?Sized>(set: &P) -> Vec<ParamEntry> {
    set.named_params().into_iter().map(|(name, t)| ParamEntry { name, shape: t.shape().to_vec() }).collect()
}

pub fn serialize_params<P: ParamSet + ?Sized>(set: &P) -> ParamBlob {
    let named = set.named_params();
    let manifest = serde_json::to_string(&manifest_of(set)).expect("manifest serializes");
    let mut payload = Vec::with_capacity(8 * set.param_count());
    for (_, t) in named {
        for v in t.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    ParamBlob { manifest, payload }
}

/// Loads `blob` into `set` in place. Names and shapes must match exactly.
pub fn deserialize_params<P: ParamSet + ?Sized>(set: &mut P, blob: &ParamBlob) -> Result<()> {
    let entries = blob.entries()?;
    let expected = manifest_of(set);
    if entries != expected {
        return Err(Error::Format(format!(
            "parameter manifest mismatch: got {} entries, expected {}",
            entries.len(),
            expected.len()
        )));
    }
    let values = blob.values()?;
    let total: usize = expected.iter().map(|e| e.shape.iter().product::<usize>()).sum();
    if values.len() != total {
        return Err(Error::Format(format!("payload holds {} values, manifest needs {total}", values.len())));
    }
    let mut at = 0;
    for (_, t) in set.named_params_mut() {
        let n = t.numel();
        t.data_mut().copy_from_slice(&values[at..at + n]);
        at += n;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Extractor width `K`; also the prototype dimension.
    pub channels: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { channels: 32 }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 {
            return Err(Error::Config("model.channels must be >= 1".into()));
        }
        Ok(())
    }
}

/// Hex SHA-256 over several parameter sets, in order.
pub fn hash_params(sets: &[&dyn ParamSet]) -> String {
    let mut h = Sha256::new();
    for s in sets {
        for (name, t) in s.named_params() {
            h.update(name.as_bytes());
            for v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
    }
    hex::encode(h.finalize())
}

/// Copies values between two structurally identical parameter sets.
pub fn copy_params<P: ParamSet + ?Sized, Q: ParamSet + ?Sized>(dst: &mut P, src: &Q) -> Result<()> {
    let src = src.named_params();
    let mut dst = dst.named_params_mut();
    if src.len() != dst.len() {
        return Err(Error::contract("copy_params between different architectures"));
    }
    for ((dn, d), (sn, s)) in dst.iter_mut().zip(&src) {
        if dn != sn {
            return Err(Error::contract(format!("copy_params name mismatch {dn} vs {sn}")));
        }
        d.assign(s)?;
    }
    Ok(())
}
