//! Dense `f64` tensors, a define-by-run gradient tape and SGD.

mod kernels;
mod optim;
mod tape;
mod tensor;

pub use optim::{sgd_step, SgdConfig};
pub use tape::{GradTape, Var, BCE_CLAMP};
pub use tensor::Tensor;

/// Softmax along dimension 1 of a `[N, C, ...]` buffer, outside any tape.
pub fn softmax_dim1(data: &[f64], shape: &[usize]) -> Vec<f64> {
    let outer = shape[0];
    let c = shape[1];
    let inner: usize = shape[2..].iter().product();
    let mut out = vec![0.0; data.len()];
    for o in 0..outer {
        for s in 0..inner {
            let at = |k: usize| o * c * inner + k * inner + s;
            let m = (0..c).map(|k| data[at(k)]).fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = (0..c).map(|k| (data[at(k)] - m).exp()).sum();
            for k in 0..c {
                out[at(k)] = (data[at(k)] - m).exp() / z;
            }
        }
    }
    out
}

/// Cosine similarity of two flat buffers; `None` if either is the zero vector.
pub fn cosine(a: &[f64], b: &[f64]) -> Option<f64> {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        None
    } else {
        Some(dot / (na * nb))
    }
}
