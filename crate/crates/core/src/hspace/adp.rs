//! Attribute distribution predictor: the batch-mean softmax of an h-space
//! classifier, and the exact gradient of a distribution-matching loss with
//! respect to every h-vector in the batch.

use serde::{Deserialize, Serialize};

use super::bank::{classify_h, HClassifierBank};
use crate::error::{check_dim, Error, Result};
use crate::numkit::Matrix;
use crate::synthdata::ReferenceDistribution;

/// Maps one h-vector at level `t` to a class distribution and supports
/// vector-Jacobian products through that map.
pub trait AttributePredictor: Send + Sync {
    fn attributes(&self) -> Vec<String>;

    fn num_classes(&self) -> usize;

    fn h_width(&self) -> usize;

    fn probs(&self, h: &[f64], t: usize) -> Result<Vec<f64>>;

    /// `(∂p/∂h)ᵀ v`, where `p = probs(h, t)` is passed back in.
    fn vjp(&self, h: &[f64], t: usize, p: &[f64], v: &[f64]) -> Result<Vec<f64>>;
}

impl AttributePredictor for HClassifierBank {
    fn attributes(&self) -> Vec<String> {
        vec![self.attribute().to_string()]
    }

    fn num_classes(&self) -> usize {
        2
    }

    fn h_width(&self) -> usize {
        HClassifierBank::h_width(self)
    }

    fn probs(&self, h: &[f64], t: usize) -> Result<Vec<f64>> {
        classify_h(self, h, t)
    }

    fn vjp(&self, _h: &[f64], t: usize, p: &[f64], v: &[f64]) -> Result<Vec<f64>> {
        // ∂p/∂z = diag(p) − ppᵀ, ∂z/∂h = W_t
        let (w0, w1) = self.head(t)?;
        let pv = p[0] * v[0] + p[1] * v[1];
        let g0 = p[0] * (v[0] - pv);
        let g1 = p[1] * (v[1] - pv);
        Ok(w0.iter().zip(w1).map(|(a, b)| g0 * a + g1 * b).collect())
    }
}

/// Four-class subgroup predictor built from two binary banks as the
/// product of their softmaxes; class index `2·c_first + c_second`.
#[derive(Debug, Clone)]
pub struct JointPredictor {
    pub first: HClassifierBank,
    pub second: HClassifierBank,
}

impl JointPredictor {
    pub fn new(first: HClassifierBank, second: HClassifierBank) -> Result<Self> {
        check_dim("joint predictor width", first.h_width(), second.h_width())?;
        check_dim("joint predictor steps", first.steps(), second.steps())?;
        Ok(Self { first, second })
    }
}

impl AttributePredictor for JointPredictor {
    fn attributes(&self) -> Vec<String> {
        vec![self.first.attribute().into(), self.second.attribute().into()]
    }

    fn num_classes(&self) -> usize {
        4
    }

    fn h_width(&self) -> usize {
        self.first.h_width()
    }

    fn probs(&self, h: &[f64], t: usize) -> Result<Vec<f64>> {
        let a = classify_h(&self.first, h, t)?;
        let b = classify_h(&self.second, h, t)?;
        Ok(vec![a[0] * b[0], a[0] * b[1], a[1] * b[0], a[1] * b[1]])
    }

    fn vjp(&self, h: &[f64], t: usize, _p: &[f64], v: &[f64]) -> Result<Vec<f64>> {
        let a = classify_h(&self.first, h, t)?;
        let b = classify_h(&self.second, h, t)?;
        // p(i, j) = a_i b_j: route v through each factor
        let va = [v[0] * b[0] + v[1] * b[1], v[2] * b[0] + v[3] * b[1]];
        let vb = [v[0] * a[0] + v[2] * a[1], v[1] * a[0] + v[3] * a[1]];
        let ga = self.first.vjp(h, t, &a, &va)?;
        let gb = self.second.vjp(h, t, &b, &vb)?;
        Ok(ga.iter().zip(&gb).map(|(x, y)| x + y).collect())
    }
}

/// Distance between an estimated and a reference distribution.
pub trait DistributionLoss: Send + Sync {
    fn value(&self, p: &[f64], r: &[f64]) -> f64;
    fn grad(&self, p: &[f64], r: &[f64]) -> Vec<f64>;
}

/// `Σ_c (p_c − r_c)² / (p_c + r_c + ε)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChiSquare {
    pub eps: f64,
}

impl Default for ChiSquare {
    fn default() -> Self {
        Self { eps: 1e-12 }
    }
}

impl DistributionLoss for ChiSquare {
    fn value(&self, p: &[f64], r: &[f64]) -> f64 {
        p.iter().zip(r).map(|(a, b)| (a - b).powi(2) / (a + b + self.eps)).sum()
    }

    fn grad(&self, p: &[f64], r: &[f64]) -> Vec<f64> {
        p.iter()
            .zip(r)
            .map(|(a, b)| {
                let d = a - b;
                let s = a + b + self.eps;
                (2.0 * d * s - d * d) / (s * s)
            })
            .collect()
    }
}

/// `Σ_c (p_c − r_c)²`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct SquaredEuclidean;

impl DistributionLoss for SquaredEuclidean {
    fn value(&self, p: &[f64], r: &[f64]) -> f64 {
        p.iter().zip(r).map(|(a, b)| (a - b).powi(2)).sum()
    }

    fn grad(&self, p: &[f64], r: &[f64]) -> Vec<f64> {
        p.iter().zip(r).map(|(a, b)| 2.0 * (a - b)).collect()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    #[default]
    ChiSquare,
    SquaredEuclidean,
}

impl LossKind {
    pub fn build(self) -> Box<dyn DistributionLoss> {
        match self {
            LossKind::ChiSquare => Box::new(ChiSquare::default()),
            LossKind::SquaredEuclidean => Box::new(SquaredEuclidean),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttributeDistributionEstimate {
    pub attributes: Vec<String>,
    pub probs: Vec<f64>,
    pub batch_size: usize,
}

fn per_sample_probs(pred: &dyn AttributePredictor, h_batch: &Matrix, t: usize) -> Result<Vec<Vec<f64>>> {
    if h_batch.rows() == 0 {
        return Err(Error::Empty("ADP batch"));
    }
    check_dim("ADP h width", pred.h_width(), h_batch.cols())?;
    h_batch.row_iter().map(|h| pred.probs(h, t)).collect()
}

fn mean_probs(per: &[Vec<f64>], k: usize) -> Vec<f64> {
    let mut p = vec![0.0; k];
    for row in per {
        for (acc, v) in p.iter_mut().zip(row) {
            *acc += v;
        }
    }
    let n = per.len() as f64;
    p.iter_mut().for_each(|v| *v /= n);
    p
}

/// Sum of per-sample softmaxes divided by the batch size.
pub fn adp_estimate(
    pred: &dyn AttributePredictor,
    h_batch: &Matrix,
    t: usize,
) -> Result<AttributeDistributionEstimate> {
    let per = per_sample_probs(pred, h_batch, t)?;
    Ok(AttributeDistributionEstimate {
        attributes: pred.attributes(),
        probs: mean_probs(&per, pred.num_classes()),
        batch_size: h_batch.rows(),
    })
}

/// Result of one distribution-loss evaluation over a batch.
#[derive(Debug, Clone)]
pub struct AdpGradient {
    /// `∂L/∂h_i`, one row per batch member.
    pub grads: Matrix,
    pub loss: f64,
    pub estimate: Vec<f64>,
}

/// Exact gradient of `L(p̂, p_ref)` with respect to every h-vector, where
/// `p̂` is the batch-mean prediction.
pub fn adp_gradient(
    pred: &dyn AttributePredictor,
    h_batch: &Matrix,
    t: usize,
    reference: &ReferenceDistribution,
    loss: &dyn DistributionLoss,
) -> Result<AdpGradient> {
    check_dim("ADP reference classes", pred.num_classes(), reference.num_classes())?;
    let per = per_sample_probs(pred, h_batch, t)?;
    let p_hat = mean_probs(&per, pred.num_classes());
    let value = loss.value(&p_hat, &reference.probs);
    // ∂L/∂p_i = (1/N) ∂L/∂p̂
    let n = h_batch.rows() as f64;
    let v: Vec<f64> = loss.grad(&p_hat, &reference.probs).iter().map(|g| g / n).collect();
    let mut data = Vec::with_capacity(h_batch.rows() * h_batch.cols());
    for (h, p) in h_batch.row_iter().zip(&per) {
        data.extend(pred.vjp(h, t, p, &v)?);
    }
    Ok(AdpGradient {
        grads: Matrix::from_raw(h_batch.rows(), h_batch.cols(), data),
        loss: value,
        estimate: p_hat,
    })
}
