//! Dense matrices, seeded randomness, and small MLPs with exact gradients.

mod matrix;
mod mlp;
mod optim;
mod rng;

pub use matrix::{dot, l2_norm, matmul, Matrix};
pub use mlp::{Activation, ForwardCache, Gradients, Mlp};
pub use optim::Adam;
pub use rng::{gaussian_sample, RngStream};

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|z| (z - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Numerically stable log-softmax.
pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|z| (z - m).exp()).sum::<f64>().ln();
    logits.iter().map(|z| z - lse).collect()
}

/// `log Σ exp(v)`.
pub fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|z| (z - m).exp()).sum::<f64>().ln()
}
