use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

fn fresh_id() -> u64 {
    NEXT_ID.fetch_add(1, Ordering::Relaxed)
}

/// Dense row-major array of `f64` values.
///
/// Every tensor carries a process-unique identity used by [`GradTape`](super::GradTape)
/// to bind parameters. Cloning produces a new identity, so a copied model never
/// aliases its source on a tape.
pub struct Tensor {
    id: u64,
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} holds {n} values but buffer has {}",
                data.len()
            )));
        }
        Ok(Self { id: fresh_id(), shape, data, requires_grad: false, grad: None })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self { id: fresh_id(), shape: shape.to_vec(), data: vec![value; n], requires_grad: false, grad: None }
    }

    pub fn scalar(value: f64) -> Self {
        Self { id: fresh_id(), shape: vec![], data: vec![value], requires_grad: false, grad: None }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        Self { id: fresh_id(), shape: vec![data.len()], data, requires_grad: false, grad: None }
    }

    /// Gaussian tensor with the given standard deviation.
    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                z * std
            })
            .collect();
        Self { id: fresh_id(), shape: shape.to_vec(), data, requires_grad: false, grad: None }
    }

    /// Marks the tensor as a trainable parameter.
    pub fn into_param(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, flag: bool) {
        self.requires_grad = flag;
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn set_grad(&mut self, grad: Option<Vec<f64>>) -> Result<()> {
        if let Some(g) = &grad {
            if g.len() != self.data.len() {
                return Err(Error::shape(format!(
                    "gradient of length {} for tensor of shape {:?}",
                    g.len(),
                    self.shape
                )));
            }
        }
        self.grad = grad;
        Ok(())
    }

    /// Adds `g` into the stored gradient, creating it if absent.
    pub fn accumulate_grad(&mut self, g: &[f64]) -> Result<()> {
        if g.len() != self.data.len() {
            return Err(Error::shape(format!(
                "gradient of length {} for tensor of shape {:?}",
                g.len(),
                self.shape
            )));
        }
        match &mut self.grad {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            None => self.grad = Some(g.to_vec()),
        }
        Ok(())
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        Tensor::new(shape.to_vec(), self.data.clone())
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() != 1 {
            return Err(Error::contract(format!("item() on tensor of shape {:?}", self.shape)));
        }
        Ok(self.data[0])
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Copies the values of `other` in place, keeping identity and flags.
    pub fn assign(&mut self, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(format!(
                "cannot assign {:?} into {:?}",
                other.shape, self.shape
            )));
        }
        self.data.copy_from_slice(&other.data);
        Ok(())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

impl Clone for Tensor {
    fn clone(&self) -> Self {
        Self {
            id: fresh_id(),
            shape: self.shape.clone(),
            data: self.data.clone(),
            requires_grad: self.requires_grad,
            grad: self.grad.clone(),
        }
    }
}

impl PartialEq for Tensor {
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape && self.data == other.data
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let preview: Vec<f64> = self.data.iter().take(8).copied().collect();
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &preview)
            .field("requires_grad", &self.requires_grad)
            .finish()
    }
}
