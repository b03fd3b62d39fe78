//! Define-by-run reverse-mode differentiation.
//!
//! A [`GradTape`] records every operation applied to [`Var`]s in append order.
//! [`GradTape::backward`] walks the record once, newest to oldest, and leaves
//! gradients on every leaf that was bound as a trainable parameter. A tape is
//! single-use: build a new one for every forward pass.

use std::cell::{Ref, RefCell};
use std::collections::HashMap;

use super::kernels::{col2im_add, gemm, im2col};
use super::Tensor;
use crate::error::{Error, Result};

/// Probability clamp used by binary cross-entropy.
pub const BCE_CLAMP: f64 = 1e-7;

pub struct GradTape {
    inner: RefCell<Inner>,
    recording: bool,
}

struct Inner {
    nodes: Vec<Node>,
    bound: HashMap<u64, usize>,
    grads: Option<Vec<Option<Vec<f64>>>>,
}

struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    op: Op,
}

enum Op {
    Leaf,
    Conv2d { input: usize, kernel: usize, stride: usize, pad: usize },
    AddBias { input: usize, bias: usize },
    Relu { input: usize },
    Sigmoid { input: usize },
    Upsample { input: usize, factor: usize },
    MatMul { a: usize, b: usize },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Scale { input: usize, factor: f64 },
    Sum { input: usize },
    Mean { input: usize },
    Reshape { input: usize },
    SelectRows { input: usize, rows: Vec<usize> },
    GlobalAvgPool { input: usize },
    MaskedAvgPool { input: usize, mask: Vec<f64>, counts: Vec<f64> },
    SpatialMask { input: usize, mask: Vec<f64> },
    L2Normalize { input: usize, norms: Vec<f64> },
    Softmax { input: usize },
    SoftmaxCrossEntropy { logits: usize, probs: Vec<f64>, targets: Vec<Option<usize>>, valid: usize },
    CountCrossEntropy { logits: usize, probs: Vec<f64>, counts: Vec<f64>, cell_valid: Vec<f64>, valid: f64 },
    KlDiv { p: usize, q: usize, p_probs: Vec<f64>, q_probs: Vec<f64>, positions: usize },
    Cosine { a: usize, b: usize, dot: f64, na: f64, nb: f64 },
    Bce { input: usize, targets: Vec<f64> },
    InfoNce { pos: usize, neg: usize, pos_w: Vec<f64>, neg_w: Vec<f64>, tau: f64 },
    Concat { parts: Vec<(usize, usize)> },
}

/// Handle to a value recorded on a [`GradTape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t GradTape,
    id: usize,
}

/// Splits a rank >= 2 shape into (outer, channels, inner) around dimension 1.
fn channel_layout(shape: &[usize]) -> Result<(usize, usize, usize)> {
    if shape.len() < 2 {
        return Err(Error::shape(format!("expected rank >= 2, got {shape:?}")));
    }
    Ok((shape[0], shape[1], shape[2..].iter().product()))
}

fn log_softmax_into(logits: &[f64], outer: usize, c: usize, inner: usize, out: &mut [f64]) {
    for o in 0..outer {
        for s in 0..inner {
            let at = |k: usize| o * c * inner + k * inner + s;
            let mut m = f64::NEG_INFINITY;
            for k in 0..c {
                m = m.max(logits[at(k)]);
            }
            let mut z = 0.0;
            for k in 0..c {
                z += (logits[at(k)] - m).exp();
            }
            let lz = m + z.ln();
            for k in 0..c {
                out[at(k)] = logits[at(k)] - lz;
            }
        }
    }
}

impl Default for GradTape {
    fn default() -> Self {
        Self::new()
    }
}

impl GradTape {
    /// A tape that records gradients.
    pub fn new() -> Self {
        Self { inner: RefCell::new(Inner { nodes: Vec::new(), bound: HashMap::new(), grads: None }), recording: true }
    }

    /// A tape for inference: nothing requires grad and no backward state is kept.
    pub fn no_grad() -> Self {
        Self { recording: false, ..Self::new() }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Binds a tensor as a leaf. Trainable tensors are deduplicated by identity so
    /// repeated use of one parameter accumulates into a single gradient.
    pub fn param(&self, t: &Tensor) -> Var<'_> {
        let trainable = self.recording && t.requires_grad();
        if trainable {
            if let Some(&id) = self.inner.borrow().bound.get(&t.id()) {
                return Var { tape: self, id };
            }
        }
        let id = self.push_raw(t.shape().to_vec(), t.data().to_vec(), trainable, Op::Leaf);
        if trainable {
            self.inner.borrow_mut().bound.insert(t.id(), id);
        }
        Var { tape: self, id }
    }

    /// Binds a tensor as a constant leaf (never receives a gradient).
    pub fn constant(&self, t: &Tensor) -> Var<'_> {
        let id = self.push_raw(t.shape().to_vec(), t.data().to_vec(), false, Op::Leaf);
        Var { tape: self, id }
    }

    pub fn constant_from(&self, shape: Vec<usize>, data: Vec<f64>) -> Result<Var<'_>> {
        let t = Tensor::new(shape, data)?;
        Ok(self.constant(&t))
    }

    fn push_raw(&self, shape: Vec<usize>, data: Vec<f64>, requires_grad: bool, op: Op) -> usize {
        let mut inner = self.inner.borrow_mut();
        inner.nodes.push(Node { shape, data, requires_grad, op });
        inner.nodes.len() - 1
    }

    fn push(&self, name: &str, shape: Vec<usize>, data: Vec<f64>, parents: &[usize], op: Op) -> Result<Var<'_>> {
        if let Some(bad) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::NumericFault(format!("{name} produced non-finite value {bad}")));
        }
        let requires_grad = {
            let inner = self.inner.borrow();
            parents.iter().any(|&p| inner.nodes[p].requires_grad)
        };
        let op = if requires_grad { op } else { Op::Leaf };
        let id = self.push_raw(shape, data, requires_grad, op);
        Ok(Var { tape: self, id })
    }

    /// Stacks values along dimension 0. Trailing dimensions must agree.
    pub fn concat<'t>(&'t self, parts: &[Var<'t>]) -> Result<Var<'t>> {
        let first = parts.first().ok_or_else(|| Error::contract("concat of zero values"))?;
        let tail = first.shape();
        if tail.is_empty() {
            return Err(Error::shape("concat of scalars"));
        }
        let mut rows = 0;
        let mut data = Vec::new();
        let mut ids = Vec::with_capacity(parts.len());
        for v in parts {
            let n = self.node(v.id);
            if n.shape.len() != tail.len() || n.shape[1..] != tail[1..] {
                return Err(Error::shape(format!("concat {:?} onto {:?}", n.shape, tail)));
            }
            rows += n.shape[0];
            data.extend_from_slice(&n.data);
            ids.push((v.id, n.data.len()));
        }
        let mut shape = tail.clone();
        shape[0] = rows;
        let parents: Vec<usize> = ids.iter().map(|p| p.0).collect();
        self.push("concat", shape, data, &parents, Op::Concat { parts: ids })
    }

    fn node(&self, id: usize) -> Ref<'_, Node> {
        Ref::map(self.inner.borrow(), |i| &i.nodes[id])
    }

    /// Reverse sweep from a scalar loss.
    pub fn backward(&self, loss: Var<'_>) -> Result<()> {
        let mut inner = self.inner.borrow_mut();
        if inner.grads.is_some() {
            return Err(Error::contract("backward already ran on this tape; record a new forward pass"));
        }
        let root = &inner.nodes[loss.id];
        if root.data.len() != 1 {
            return Err(Error::contract(format!("backward needs a scalar loss, got shape {:?}", root.shape)));
        }
        if !root.requires_grad {
            return Err(Error::contract("loss is not connected to any trainable parameter"));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..inner.nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(vec![1.0]);
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            if matches!(inner.nodes[id].op, Op::Leaf) {
                grads[id] = Some(g);
                continue;
            }
            for (parent, pg) in backward_op(&inner.nodes, id, &g)? {
                if !inner.nodes[parent].requires_grad {
                    continue;
                }
                match &mut grads[parent] {
                    Some(acc) => acc.iter_mut().zip(&pg).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(pg),
                }
            }
        }
        inner.grads = Some(grads);
        Ok(())
    }

    /// Gradient on a leaf after [`backward`](Self::backward). Trainable leaves that
    /// the loss does not reach get zeros.
    pub fn grad(&self, v: Var<'_>) -> Option<Vec<f64>> {
        let inner = self.inner.borrow();
        let grads = inner.grads.as_ref()?;
        let node = &inner.nodes[v.id];
        if !node.requires_grad {
            return None;
        }
        Some(grads[v.id].clone().unwrap_or_else(|| vec![0.0; node.data.len()]))
    }

    /// Gradient for a tensor previously bound with [`param`](Self::param).
    pub fn grad_of(&self, t: &Tensor) -> Option<Vec<f64>> {
        let id = *self.inner.borrow().bound.get(&t.id())?;
        self.grad(Var { tape: self, id })
    }

    /// Adds this tape's gradients into every bound tensor in `params`.
    /// Tensors never bound on this tape are left untouched.
    pub fn accumulate_into(&self, params: &mut [&mut Tensor]) -> Result<()> {
        if self.inner.borrow().grads.is_none() {
            return Err(Error::contract("accumulate_into before backward"));
        }
        for p in params.iter_mut() {
            if let Some(g) = self.grad_of(p) {
                p.accumulate_grad(&g)?;
            }
        }
        Ok(())
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t GradTape {
        self.tape
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.node(self.id).shape.clone()
    }

    pub fn numel(&self) -> usize {
        self.tape.node(self.id).data.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.node(self.id).requires_grad
    }

    pub fn with_data<R>(&self, f: impl FnOnce(&[f64]) -> R) -> R {
        f(&self.tape.node(self.id).data)
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.tape.node(self.id).data.clone()
    }

    pub fn to_tensor(&self) -> Tensor {
        let n = self.tape.node(self.id);
        Tensor::new(n.shape.clone(), n.data.clone()).expect("node shape is consistent")
    }

    pub fn item(&self) -> Result<f64> {
        let n = self.tape.node(self.id);
        if n.data.len() != 1 {
            return Err(Error::contract(format!("item() on shape {:?}", n.shape)));
        }
        Ok(n.data[0])
    }

    /// Copy of this value as a constant on the same tape.
    pub fn detach(&self) -> Var<'t> {
        let (shape, data) = {
            let n = self.tape.node(self.id);
            (n.shape.clone(), n.data.clone())
        };
        let id = self.tape.push_raw(shape, data, false, Op::Leaf);
        Var { tape: self.tape, id }
    }

    fn same_shape(&self, other: &Var<'t>, what: &str) -> Result<Vec<usize>> {
        let a = self.shape();
        let b = other.shape();
        if a != b {
            return Err(Error::shape(format!("{what}: {a:?} vs {b:?}")));
        }
        Ok(a)
    }

    /// 2-D convolution, `self` is `[N, Cin, H, W]`, `kernel` is `[Cout, Cin, kh, kw]`.
    pub fn conv2d(&self, kernel: Var<'t>, stride: usize, pad: usize) -> Result<Var<'t>> {
        let xs = self.shape();
        let ks = kernel.shape();
        if xs.len() != 4 || ks.len() != 4 {
            return Err(Error::shape(format!("conv2d expects rank 4 input/kernel, got {xs:?} / {ks:?}")));
        }
        let (n, cin, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (cout, kcin, kh, kw) = (ks[0], ks[1], ks[2], ks[3]);
        if kcin != cin {
            return Err(Error::shape(format!("conv2d channel mismatch: input {cin}, kernel {kcin}")));
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::contract(format!("conv2d kernel must be odd-sized, got {kh}x{kw}")));
        }
        if stride == 0 {
            return Err(Error::contract("conv2d stride must be positive"));
        }
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(Error::shape(format!("conv2d kernel {kh}x{kw} larger than padded input {h}x{w}")));
        }
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (w + 2 * pad - kw) / stride + 1;
        let ck = cin * kh * kw;
        let hw = ho * wo;
        let mut out = vec![0.0; n * cout * hw];
        {
            let xn = self.tape.node(self.id);
            let kn = kernel.tape.node(kernel.id);
            let mut cols = vec![0.0; ck * hw];
            let plane = cin * h * w;
            for b in 0..n {
                let img = &xn.data[b * plane..(b + 1) * plane];
                im2col(img, cin, h, w, kh, kw, stride, pad, ho, wo, &mut cols);
                gemm(cout, ck, hw, &kn.data, ck, 1, &cols, hw, 1, &mut out[b * cout * hw..(b + 1) * cout * hw], hw, 1, 0.0);
            }
        }
        self.tape.push(
            "conv2d",
            vec![n, cout, ho, wo],
            out,
            &[self.id, kernel.id],
            Op::Conv2d { input: self.id, kernel: kernel.id, stride, pad },
        )
    }

    /// Adds `bias[c]` along dimension 1.
    pub fn add_bias(&self, bias: Var<'t>) -> Result<Var<'t>> {
        let shape = self.shape();
        let (outer, c, inner) = channel_layout(&shape)?;
        if bias.shape() != [c] {
            return Err(Error::shape(format!("bias {:?} for channel dim {c}", bias.shape())));
        }
        let mut out = self.to_vec();
        bias.with_data(|b| {
            for o in 0..outer {
                for k in 0..c {
                    let base = o * c * inner + k * inner;
                    out[base..base + inner].iter_mut().for_each(|v| *v += b[k]);
                }
            }
        });
        self.tape.push("add_bias", shape, out, &[self.id, bias.id], Op::AddBias { input: self.id, bias: bias.id })
    }

    pub fn relu(&self) -> Result<Var<'t>> {
        let out = self.with_data(|d| d.iter().map(|v| v.max(0.0)).collect());
        self.tape.push("relu", self.shape(), out, &[self.id], Op::Relu { input: self.id })
    }

    pub fn sigmoid(&self) -> Result<Var<'t>> {
        let out = self.with_data(|d| d.iter().map(|v| 1.0 / (1.0 + (-v).exp())).collect());
        self.tape.push("sigmoid", self.shape(), out, &[self.id], Op::Sigmoid { input: self.id })
    }

    /// Nearest-neighbour upsampling of the last two dimensions by `factor`.
    pub fn upsample_nearest(&self, factor: usize) -> Result<Var<'t>> {
        let s = self.shape();
        if s.len() != 4 || factor == 0 {
            return Err(Error::shape(format!("upsample expects [N,C,H,W] and factor>0, got {s:?}")));
        }
        let (nc, h, w) = (s[0] * s[1], s[2], s[3]);
        let (ho, wo) = (h * factor, w * factor);
        let mut out = vec![0.0; nc * ho * wo];
        self.with_data(|d| {
            for p in 0..nc {
                for y in 0..ho {
                    let src = &d[p * h * w + (y / factor) * w..];
                    let dst = &mut out[p * ho * wo + y * wo..p * ho * wo + (y + 1) * wo];
                    for (x, v) in dst.iter_mut().enumerate() {
                        *v = src[x / factor];
                    }
                }
            }
        });
        self.tape.push(
            "upsample",
            vec![s[0], s[1], ho, wo],
            out,
            &[self.id],
            Op::Upsample { input: self.id, factor },
        )
    }

    pub fn nearest_upsample2x(&self) -> Result<Var<'t>> {
        self.upsample_nearest(2)
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&self, other: Var<'t>) -> Result<Var<'t>> {
        let a = self.shape();
        let b = other.shape();
        if a.len() != 2 || b.len() != 2 || a[1] != b[0] {
            return Err(Error::shape(format!("matmul {a:?} x {b:?}")));
        }
        let (m, k, n) = (a[0], a[1], b[1]);
        let mut out = vec![0.0; m * n];
        {
            let an = self.tape.node(self.id);
            let bn = other.tape.node(other.id);
            gemm(m, k, n, &an.data, k, 1, &bn.data, n, 1, &mut out, n, 1, 0.0);
        }
        self.tape.push("matmul", vec![m, n], out, &[self.id, other.id], Op::MatMul { a: self.id, b: other.id })
    }

    fn zip_with(&self, other: Var<'t>, name: &str, f: impl Fn(f64, f64) -> f64) -> Result<(Vec<usize>, Vec<f64>)> {
        let shape = self.same_shape(&other, name)?;
        let out = {
            let a = self.tape.node(self.id);
            let b = other.tape.node(other.id);
            a.data.iter().zip(&b.data).map(|(x, y)| f(*x, *y)).collect()
        };
        Ok((shape, out))
    }

    pub fn add(&self, other: Var<'t>) -> Result<Var<'t>> {
        let (shape, out) = self.zip_with(other, "add", |a, b| a + b)?;
        self.tape.push("add", shape, out, &[self.id, other.id], Op::Add { a: self.id, b: other.id })
    }

    pub fn sub(&self, other: Var<'t>) -> Result<Var<'t>> {
        let (shape, out) = self.zip_with(other, "sub", |a, b| a - b)?;
        self.tape.push("sub", shape, out, &[self.id, other.id], Op::Sub { a: self.id, b: other.id })
    }

    pub fn mul(&self, other: Var<'t>) -> Result<Var<'t>> {
        let (shape, out) = self.zip_with(other, "mul", |a, b| a * b)?;
        self.tape.push("mul", shape, out, &[self.id, other.id], Op::Mul { a: self.id, b: other.id })
    }

    pub fn scale(&self, factor: f64) -> Result<Var<'t>> {
        let out = self.with_data(|d| d.iter().map(|v| v * factor).collect());
        self.tape.push("scale", self.shape(), out, &[self.id], Op::Scale { input: self.id, factor })
    }

    pub fn sum(&self) -> Result<Var<'t>> {
        let s = self.with_data(|d| d.iter().sum::<f64>());
        self.tape.push("sum", vec![], vec![s], &[self.id], Op::Sum { input: self.id })
    }

    pub fn mean(&self) -> Result<Var<'t>> {
        let n = self.numel();
        if n == 0 {
            return Err(Error::contract("mean of empty tensor"));
        }
        let s = self.with_data(|d| d.iter().sum::<f64>()) / n as f64;
        self.tape.push("mean", vec![], vec![s], &[self.id], Op::Mean { input: self.id })
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t>> {
        let n: usize = shape.iter().product();
        if n != self.numel() {
            return Err(Error::shape(format!("reshape {:?} -> {shape:?}", self.shape())));
        }
        self.tape.push("reshape", shape.to_vec(), self.to_vec(), &[self.id], Op::Reshape { input: self.id })
    }

    /// Gathers rows (slices along dimension 0).
    pub fn select_rows(&self, rows: &[usize]) -> Result<Var<'t>> {
        let s = self.shape();
        if s.is_empty() {
            return Err(Error::shape("select_rows on a scalar"));
        }
        let row: usize = s[1..].iter().product();
        if let Some(&bad) = rows.iter().find(|&&r| r >= s[0]) {
            return Err(Error::shape(format!("row {bad} out of range for {s:?}")));
        }
        let out = self.with_data(|d| {
            let mut out = Vec::with_capacity(rows.len() * row);
            for &r in rows {
                out.extend_from_slice(&d[r * row..(r + 1) * row]);
            }
            out
        });
        let mut shape = s.clone();
        shape[0] = rows.len();
        self.tape.push("select_rows", shape, out, &[self.id], Op::SelectRows { input: self.id, rows: rows.to_vec() })
    }

    /// `[N, C, ...] -> [N, C]` mean over trailing dimensions.
    pub fn global_avg_pool(&self) -> Result<Var<'t>> {
        let s = self.shape();
        let (outer, c, inner) = channel_layout(&s)?;
        if inner == 0 {
            return Err(Error::shape("global_avg_pool over empty spatial extent"));
        }
        let out = self.with_data(|d| {
            (0..outer * c)
                .map(|p| d[p * inner..(p + 1) * inner].iter().sum::<f64>() / inner as f64)
                .collect()
        });
        self.tape.push("global_avg_pool", vec![outer, c], out, &[self.id], Op::GlobalAvgPool { input: self.id })
    }

    /// `[N, C, H, W] -> [N, C]` mean over positions where `mask[n, h, w]` is set.
    pub fn masked_avg_pool(&self, mask: &[f64]) -> Result<Var<'t>> {
        let s = self.shape();
        let (outer, c, inner) = channel_layout(&s)?;
        if mask.len() != outer * inner {
            return Err(Error::shape(format!("mask of length {} for {s:?}", mask.len())));
        }
        let counts: Vec<f64> = (0..outer).map(|o| mask[o * inner..(o + 1) * inner].iter().sum()).collect();
        if let Some(o) = counts.iter().position(|&k| k <= 0.0) {
            return Err(Error::DegenerateExemplar(format!("item {o} has an empty pooling mask")));
        }
        let out = self.with_data(|d| {
            let mut out = vec![0.0; outer * c];
            for o in 0..outer {
                let m = &mask[o * inner..(o + 1) * inner];
                for k in 0..c {
                    let base = o * c * inner + k * inner;
                    let acc: f64 = d[base..base + inner].iter().zip(m).map(|(v, w)| v * w).sum();
                    out[o * c + k] = acc / counts[o];
                }
            }
            out
        });
        self.tape.push(
            "masked_avg_pool",
            vec![outer, c],
            out,
            &[self.id],
            Op::MaskedAvgPool { input: self.id, mask: mask.to_vec(), counts },
        )
    }

    /// Multiplies every channel by a per-position mask of length `N*H*W`.
    pub fn spatial_mask(&self, mask: &[f64]) -> Result<Var<'t>> {
        let s = self.shape();
        let (outer, c, inner) = channel_layout(&s)?;
        if mask.len() != outer * inner {
            return Err(Error::shape(format!("mask of length {} for {s:?}", mask.len())));
        }
        let out = self.with_data(|d| {
            let mut out = d.to_vec();
            for o in 0..outer {
                let m = &mask[o * inner..(o + 1) * inner];
                for k in 0..c {
                    let base = o * c * inner + k * inner;
                    out[base..base + inner].iter_mut().zip(m).for_each(|(v, w)| *v *= w);
                }
            }
            out
        });
        self.tape.push("spatial_mask", s, out, &[self.id], Op::SpatialMask { input: self.id, mask: mask.to_vec() })
    }

    /// Scales each row of a `[m, n]` matrix to unit L2 norm.
    pub fn l2_normalize(&self) -> Result<Var<'t>> {
        let s = self.shape();
        if s.len() != 2 {
            return Err(Error::shape(format!("l2_normalize expects [m, n], got {s:?}")));
        }
        let (m, n) = (s[0], s[1]);
        let (out, norms) = self.with_data(|d| {
            let norms: Vec<f64> = (0..m).map(|r| d[r * n..(r + 1) * n].iter().map(|v| v * v).sum::<f64>().sqrt()).collect();
            let out: Vec<f64> = d.iter().enumerate().map(|(i, v)| v / norms[i / n]).collect();
            (out, norms)
        });
        if let Some(r) = norms.iter().position(|&v| v == 0.0) {
            return Err(Error::DegenerateExemplar(format!("row {r} has zero norm")));
        }
        self.tape.push("l2_normalize", s, out, &[self.id], Op::L2Normalize { input: self.id, norms })
    }

    /// Softmax along dimension 1.
    pub fn softmax(&self) -> Result<Var<'t>> {
        let s = self.shape();
        let (outer, c, inner) = channel_layout(&s)?;
        let mut out = vec![0.0; outer * c * inner];
        self.with_data(|d| log_softmax_into(d, outer, c, inner, &mut out));
        out.iter_mut().for_each(|v| *v = v.exp());
        self.tape.push("softmax", s, out, &[self.id], Op::Softmax { input: self.id })
    }

    /// Mean pixel-wise cross-entropy of `[N, C, ...]` logits against integer labels.
    /// Pixels equal to `ignore_label` are skipped; if all are skipped the loss is 0.
    pub fn softmax_cross_entropy(&self, targets: &[u8], ignore_label: u8) -> Result<Var<'t>> {
        let s = self.shape();
        let (outer, c, inner) = channel_layout(&s)?;
        if targets.len() != outer * inner {
            return Err(Error::shape(format!("{} targets for logits {s:?}", targets.len())));
        }
        let mut targets_idx = Vec::with_capacity(targets.len());
        for &t in targets {
            if t == ignore_label {
                targets_idx.push(None);
            } else if (t as usize) < c {
                targets_idx.push(Some(t as usize));
            } else {
                return Err(Error::contract(format!("target label {t} outside [0, {c})")));
            }
        }
        let mut logp = vec![0.0; outer * c * inner];
        self.with_data(|d| log_softmax_into(d, outer, c, inner, &mut logp));
        let valid = targets_idx.iter().filter(|t| t.is_some()).count();
        let mut loss = 0.0;
        for o in 0..outer {
            for sp in 0..inner {
                if let Some(t) = targets_idx[o * inner + sp] {
                    loss -= logp[o * c * inner + t * inner + sp];
                }
            }
        }
        if valid > 0 {
            loss /= valid as f64;
        }
        let probs = logp.into_iter().map(f64::exp).collect();
        self.tape.push(
            "softmax_cross_entropy",
            vec![],
            vec![loss],
            &[self.id],
            Op::SoftmaxCrossEntropy { logits: self.id, probs, targets: targets_idx, valid },
        )
    }

    /// Cross-entropy of the nearest-upsampled logits without materializing them.
    /// `self` is `[N, C, h, w]`; `targets` are labels of the `[N, h*f, w*f]` map.
    /// Equals `upsample_nearest(f).softmax_cross_entropy(..)` up to summation order.
    pub fn upsampled_cross_entropy(&self, targets: &[u8], factor: usize, ignore_label: u8) -> Result<Var<'t>> {
        let s = self.shape();
        if s.len() != 4 || factor == 0 {
            return Err(Error::shape(format!("upsampled_cross_entropy needs [N, C, h, w] and factor >= 1, got {s:?}")));
        }
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let (hf, wf) = (h * factor, w * factor);
        if targets.len() != n * hf * wf {
            return Err(Error::shape(format!("{} targets for {n} maps of {hf}x{wf}", targets.len())));
        }
        let inner = h * w;
        let mut counts = vec![0.0; n * c * inner];
        let mut cell_valid = vec![0.0; n * inner];
        for b in 0..n {
            for y in 0..hf {
                for x in 0..wf {
                    let t = targets[b * hf * wf + y * wf + x];
                    if t == ignore_label {
                        continue;
                    }
                    if t as usize >= c {
                        return Err(Error::contract(format!("target label {t} outside [0, {c})")));
                    }
                    let cell = (y / factor) * w + x / factor;
                    counts[b * c * inner + t as usize * inner + cell] += 1.0;
                    cell_valid[b * inner + cell] += 1.0;
                }
            }
        }
        let valid: f64 = cell_valid.iter().sum();
        let mut logp = vec![0.0; n * c * inner];
        self.with_data(|d| log_softmax_into(d, n, c, inner, &mut logp));
        let mut loss = 0.0;
        for (lp, k) in logp.iter().zip(&counts) {
            if *k > 0.0 {
                loss -= k * lp;
            }
        }
        if valid > 0.0 {
            loss /= valid;
        }
        let probs = logp.into_iter().map(f64::exp).collect();
        self.tape.push(
            "upsampled_cross_entropy",
            vec![],
            vec![loss],
            &[self.id],
            Op::CountCrossEntropy { logits: self.id, probs, counts, cell_valid, valid },
        )
    }

    /// `KL(softmax(self) || softmax(q))` along dimension 1, averaged over all other positions.
    pub fn kl_divergence(&self, q: Var<'t>) -> Result<Var<'t>> {
        let s = self.same_shape(&q, "kl_divergence")?;
        let (outer, c, inner) = channel_layout(&s)?;
        let mut lp = vec![0.0; outer * c * inner];
        let mut lq = vec![0.0; outer * c * inner];
        self.with_data(|d| log_softmax_into(d, outer, c, inner, &mut lp));
        q.with_data(|d| log_softmax_into(d, outer, c, inner, &mut lq));
        let positions = outer * inner;
        let total: f64 = lp.iter().zip(&lq).map(|(a, b)| a.exp() * (a - b)).sum();
        let loss = total / positions as f64;
        let p_probs = lp.iter().map(|v| v.exp()).collect::<Vec<_>>();
        let q_probs = lq.iter().map(|v| v.exp()).collect::<Vec<_>>();
        self.tape.push(
            "kl_divergence",
            vec![],
            vec![loss],
            &[self.id, q.id],
            Op::KlDiv { p: self.id, q: q.id, p_probs, q_probs, positions },
        )
    }

    /// Cosine similarity of the two flattened tensors.
    pub fn cosine_similarity(&self, other: Var<'t>) -> Result<Var<'t>> {
        let (dot, na, nb) = {
            let a = self.tape.node(self.id);
            let b = other.tape.node(other.id);
            if a.data.len() != b.data.len() {
                return Err(Error::shape(format!("cosine_similarity {:?} vs {:?}", a.shape, b.shape)));
            }
            let dot: f64 = a.data.iter().zip(&b.data).map(|(x, y)| x * y).sum();
            let na = a.data.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nb = b.data.iter().map(|x| x * x).sum::<f64>().sqrt();
            (dot, na, nb)
        };
        if na == 0.0 || nb == 0.0 {
            return Err(Error::contract("cosine similarity of a zero vector"));
        }
        self.tape.push(
            "cosine_similarity",
            vec![],
            vec![dot / (na * nb)],
            &[self.id, other.id],
            Op::Cosine { a: self.id, b: other.id, dot, na, nb },
        )
    }

    /// Mean binary cross-entropy of probabilities against 0/1 targets, with the
    /// probabilities clamped to `[BCE_CLAMP, 1 - BCE_CLAMP]`.
    pub fn binary_cross_entropy(&self, targets: &[f64]) -> Result<Var<'t>> {
        let n = self.numel();
        if targets.len() != n || n == 0 {
            return Err(Error::shape(format!("{} targets for {n} predictions", targets.len())));
        }
        let loss = self.with_data(|d| {
            d.iter()
                .zip(targets)
                .map(|(&p, &t)| {
                    let p = p.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
                    -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
                })
                .sum::<f64>()
                / n as f64
        });
        self.tape.push(
            "binary_cross_entropy",
            vec![],
            vec![loss],
            &[self.id],
            Op::Bce { input: self.id, targets: targets.to_vec() },
        )
    }

    /// InfoNCE from precomputed similarity scores: `self` holds the positive
    /// scores `[P]`, `negatives` the negative scores `[M]` (M may be 0).
    pub fn info_nce_scores(&self, negatives: Var<'t>, tau: f64) -> Result<Var<'t>> {
        if tau <= 0.0 {
            return Err(Error::contract("temperature must be positive"));
        }
        let pos = self.to_vec();
        let neg = negatives.to_vec();
        if pos.is_empty() {
            return Err(Error::contract("InfoNCE needs at least one positive"));
        }
        let mut loss = 0.0;
        let mut pos_w = Vec::with_capacity(pos.len());
        let mut neg_w = vec![0.0; neg.len()];
        for &sp in &pos {
            let m = neg.iter().fold(sp / tau, |m, &v| m.max(v / tau));
            let z: f64 = (sp / tau - m).exp() + neg.iter().map(|&v| (v / tau - m).exp()).sum::<f64>();
            let lse = m + z.ln();
            loss += lse - sp / tau;
            pos_w.push((sp / tau - lse).exp());
            for (w, &v) in neg_w.iter_mut().zip(&neg) {
                *w += (v / tau - lse).exp();
            }
        }
        let np = pos.len() as f64;
        self.tape.push(
            "info_nce",
            vec![],
            vec![loss / np],
            &[self.id, negatives.id],
            Op::InfoNce { pos: self.id, neg: negatives.id, pos_w, neg_w, tau },
        )
    }
}

fn backward_op(nodes: &[Node], id: usize, g: &[f64]) -> Result<Vec<(usize, Vec<f64>)>> {
    let node = &nodes[id];
    let wants = |p: usize| nodes[p].requires_grad;
    let mut out = Vec::with_capacity(2);
    match &node.op {
        Op::Leaf => {}
        Op::Conv2d { input, kernel, stride, pad } => {
            let xs = &nodes[*input].shape;
            let ks = &nodes[*kernel].shape;
            let (n, cin, h, w) = (xs[0], xs[1], xs[2], xs[3]);
            let (cout, kh, kw) = (ks[0], ks[2], ks[3]);
            let (ho, wo) = (node.shape[2], node.shape[3]);
            let ck = cin * kh * kw;
            let hw = ho * wo;
            let plane = cin * h * w;
            let xdata = &nodes[*input].data;
            let kdata = &nodes[*kernel].data;
            let mut cols = vec![0.0; ck * hw];
            let mut dk = if wants(*kernel) { Some(vec![0.0; cout * ck]) } else { None };
            let mut dx = if wants(*input) { Some(vec![0.0; n * plane]) } else { None };
            for b in 0..n {
                let gb = &g[b * cout * hw..(b + 1) * cout * hw];
                if let Some(dk) = dk.as_mut() {
                    im2col(&xdata[b * plane..(b + 1) * plane], cin, h, w, kh, kw, *stride, *pad, ho, wo, &mut cols);
                    gemm(cout, hw, ck, gb, hw, 1, &cols, 1, hw, dk, ck, 1, 1.0);
                }
                if let Some(dx) = dx.as_mut() {
                    gemm(ck, cout, hw, kdata, 1, ck, gb, hw, 1, &mut cols, hw, 1, 0.0);
                    col2im_add(&cols, cin, h, w, kh, kw, *stride, *pad, ho, wo, &mut dx[b * plane..(b + 1) * plane]);
                }
            }
            if let Some(dk) = dk {
                out.push((*kernel, dk));
            }
            if let Some(dx) = dx {
                out.push((*input, dx));
            }
        }
        Op::AddBias { input, bias } => {
            let (outer, c, inner) = channel_layout(&node.shape)?;
            if wants(*bias) {
                let mut db = vec![0.0; c];
                for o in 0..outer {
                    for (k, acc) in db.iter_mut().enumerate() {
                        let base = o * c * inner + k * inner;
                        *acc += g[base..base + inner].iter().sum::<f64>();
                    }
                }
                out.push((*bias, db));
            }
            out.push((*input, g.to_vec()));
        }
        Op::Relu { input } => {
            let x = &nodes[*input].data;
            out.push((*input, g.iter().zip(x).map(|(gv, xv)| if *xv > 0.0 { *gv } else { 0.0 }).collect()));
        }
        Op::Sigmoid { input } => {
            let y = &node.data;
            out.push((*input, g.iter().zip(y).map(|(gv, yv)| gv * yv * (1.0 - yv)).collect()));
        }
        Op::Upsample { input, factor } => {
            let s = &nodes[*input].shape;
            let (nc, h, w) = (s[0] * s[1], s[2], s[3]);
            let (ho, wo) = (h * factor, w * factor);
            let mut dx = vec![0.0; nc * h * w];
            for p in 0..nc {
                for y in 0..ho {
                    for x in 0..wo {
                        dx[p * h * w + (y / factor) * w + x / factor] += g[p * ho * wo + y * wo + x];
                    }
                }
            }
            out.push((*input, dx));
        }
        Op::MatMul { a, b } => {
            let (m, k) = (nodes[*a].shape[0], nodes[*a].shape[1]);
            let n = nodes[*b].shape[1];
            if wants(*a) {
                let mut da = vec![0.0; m * k];
                gemm(m, n, k, g, n, 1, &nodes[*b].data, 1, n, &mut da, k, 1, 0.0);
                out.push((*a, da));
            }
            if wants(*b) {
                let mut db = vec![0.0; k * n];
                gemm(k, m, n, &nodes[*a].data, 1, k, g, n, 1, &mut db, n, 1, 0.0);
                out.push((*b, db));
            }
        }
        Op::Add { a, b } => {
            out.push((*a, g.to_vec()));
            out.push((*b, g.to_vec()));
        }
        Op::Sub { a, b } => {
            out.push((*a, g.to_vec()));
            out.push((*b, g.iter().map(|v| -v).collect()));
        }
        Op::Mul { a, b } => {
            let (da, db) = (&nodes[*a].data, &nodes[*b].data);
            if wants(*a) {
                out.push((*a, g.iter().zip(db).map(|(x, y)| x * y).collect()));
            }
            if wants(*b) {
                out.push((*b, g.iter().zip(da).map(|(x, y)| x * y).collect()));
            }
        }
        Op::Scale { input, factor } => out.push((*input, g.iter().map(|v| v * factor).collect())),
        Op::Sum { input } => out.push((*input, vec![g[0]; nodes[*input].data.len()])),
        Op::Mean { input } => {
            let n = nodes[*input].data.len();
            out.push((*input, vec![g[0] / n as f64; n]));
        }
        Op::Reshape { input } => out.push((*input, g.to_vec())),
        Op::SelectRows { input, rows } => {
            let src = &nodes[*input];
            let row: usize = src.shape[1..].iter().product();
            let mut dx = vec![0.0; src.data.len()];
            for (i, &r) in rows.iter().enumerate() {
                dx[r * row..(r + 1) * row].iter_mut().zip(&g[i * row..(i + 1) * row]).for_each(|(a, b)| *a += b);
            }
            out.push((*input, dx));
        }
        Op::GlobalAvgPool { input } => {
            let (outer, c, inner) = channel_layout(&nodes[*input].shape)?;
            let mut dx = vec![0.0; outer * c * inner];
            for p in 0..outer * c {
                let v = g[p] / inner as f64;
                dx[p * inner..(p + 1) * inner].iter_mut().for_each(|d| *d = v);
            }
            out.push((*input, dx));
        }
        Op::MaskedAvgPool { input, mask, counts } => {
            let (outer, c, inner) = channel_layout(&nodes[*input].shape)?;
            let mut dx = vec![0.0; outer * c * inner];
            for o in 0..outer {
                let m = &mask[o * inner..(o + 1) * inner];
                for k in 0..c {
                    let v = g[o * c + k] / counts[o];
                    let base = o * c * inner + k * inner;
                    dx[base..base + inner].iter_mut().zip(m).for_each(|(d, w)| *d = v * w);
                }
            }
            out.push((*input, dx));
        }
        Op::SpatialMask { input, mask } => {
            let (outer, c, inner) = channel_layout(&node.shape)?;
            let mut dx = g.to_vec();
            for o in 0..outer {
                let m = &mask[o * inner..(o + 1) * inner];
                for k in 0..c {
                    let base = o * c * inner + k * inner;
                    dx[base..base + inner].iter_mut().zip(m).for_each(|(d, w)| *d *= w);
                }
            }
            out.push((*input, dx));
        }
        Op::L2Normalize { input, norms } => {
            let n = node.shape[1];
            let y = &node.data;
            let mut dx = vec![0.0; y.len()];
            for (r, &norm) in norms.iter().enumerate() {
                let yr = &y[r * n..(r + 1) * n];
                let gr = &g[r * n..(r + 1) * n];
                let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                for j in 0..n {
                    dx[r * n + j] = (gr[j] - yr[j] * dot) / norm;
                }
            }
            out.push((*input, dx));
        }
        Op::Softmax { input } => {
            let (outer, c, inner) = channel_layout(&node.shape)?;
            let y = &node.data;
            let mut dx = vec![0.0; y.len()];
            for o in 0..outer {
                for s in 0..inner {
                    let at = |k: usize| o * c * inner + k * inner + s;
                    let dot: f64 = (0..c).map(|k| y[at(k)] * g[at(k)]).sum();
                    for k in 0..c {
                        dx[at(k)] = y[at(k)] * (g[at(k)] - dot);
                    }
                }
            }
            out.push((*input, dx));
        }
        Op::SoftmaxCrossEntropy { logits, probs, targets, valid } => {
            let (outer, c, inner) = channel_layout(&nodes[*logits].shape)?;
            let mut dx = vec![0.0; probs.len()];
            if *valid > 0 {
                let scale = g[0] / *valid as f64;
                for o in 0..outer {
                    for s in 0..inner {
                        if let Some(t) = targets[o * inner + s] {
                            for k in 0..c {
                                let at = o * c * inner + k * inner + s;
                                let onehot = if k == t { 1.0 } else { 0.0 };
                                dx[at] = (probs[at] - onehot) * scale;
                            }
                        }
                    }
                }
            }
            out.push((*logits, dx));
        }
        Op::CountCrossEntropy { logits, probs, counts, cell_valid, valid } => {
            let (outer, c, inner) = channel_layout(&nodes[*logits].shape)?;
            let mut dx = vec![0.0; probs.len()];
            if *valid > 0.0 {
                let scale = g[0] / valid;
                for o in 0..outer {
                    for k in 0..c {
                        for sp in 0..inner {
                            let at = o * c * inner + k * inner + sp;
                            dx[at] = (cell_valid[o * inner + sp] * probs[at] - counts[at]) * scale;
                        }
                    }
                }
            }
            out.push((*logits, dx));
        }
        Op::KlDiv { p, q, p_probs, q_probs, positions } => {
            let scale = g[0] / *positions as f64;
            if wants(*q) {
                out.push((*q, q_probs.iter().zip(p_probs).map(|(qv, pv)| (qv - pv) * scale).collect()));
            }
            if wants(*p) {
                let (outer, c, inner) = channel_layout(&nodes[*p].shape)?;
                let mut dp = vec![0.0; p_probs.len()];
                for o in 0..outer {
                    for s in 0..inner {
                        let at = |k: usize| o * c * inner + k * inner + s;
                        let terms: Vec<f64> = (0..c).map(|k| p_probs[at(k)].ln() - q_probs[at(k)].ln()).collect();
                        let kl: f64 = (0..c).map(|k| p_probs[at(k)] * terms[k]).sum();
                        for k in 0..c {
                            dp[at(k)] = p_probs[at(k)] * (terms[k] - kl) * scale;
                        }
                    }
                }
                out.push((*p, dp));
            }
        }
        Op::Cosine { a, b, dot, na, nb } => {
            let cos = dot / (na * nb);
            let (ad, bd) = (&nodes[*a].data, &nodes[*b].data);
            if wants(*a) {
                out.push((*a, ad.iter().zip(bd).map(|(x, y)| g[0] * (y / (na * nb) - cos * x / (na * na))).collect()));
            }
            if wants(*b) {
                out.push((*b, bd.iter().zip(ad).map(|(y, x)| g[0] * (x / (na * nb) - cos * y / (nb * nb))).collect()));
            }
        }
        Op::Bce { input, targets } => {
            let x = &nodes[*input].data;
            let n = x.len() as f64;
            let dx = x
                .iter()
                .zip(targets)
                .map(|(&p, &t)| {
                    if p <= BCE_CLAMP || p >= 1.0 - BCE_CLAMP {
                        0.0
                    } else {
                        g[0] * (-t / p + (1.0 - t) / (1.0 - p)) / n
                    }
                })
                .collect();
            out.push((*input, dx));
        }
        Op::Concat { parts } => {
            let mut at = 0;
            for &(p, len) in parts {
                if wants(p) {
                    out.push((p, g[at..at + len].to_vec()));
                }
                at += len;
            }
        }
        Op::InfoNce { pos, neg, pos_w, neg_w, tau } => {
            let np = pos_w.len() as f64;
            out.push((*pos, pos_w.iter().map(|w| g[0] * (w - 1.0) / (tau * np)).collect()));
            if wants(*neg) {
                out.push((*neg, neg_w.iter().map(|w| g[0] * w / (tau * np)).collect()));
            }
        }
    }
    Ok(out)
}
