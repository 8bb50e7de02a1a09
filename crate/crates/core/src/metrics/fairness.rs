use serde::{Deserialize, Serialize};

use super::classifier::EvalClassifier;
use crate::error::{check_dim, Error, Result};
use crate::numkit::{l2_norm, Matrix};
use crate::synthdata::ReferenceDistribution;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FairnessReport {
    pub attributes: Vec<String>,
    /// `‖p_ref − p̄‖₂` with `p̄` the mean classifier softmax.
    pub fd: f64,
    pub soft_fractions: Vec<f64>,
    /// Fractions of argmax labels.
    pub hard_fractions: Vec<f64>,
    pub n: usize,
}

/// Fairness discrepancy of `samples` against `reference`.
///
/// One classifier per reference attribute, in the reference's order. With
/// several attributes the class distribution is the product of the
/// classifiers' softmaxes, indexed with the first attribute as the most
/// significant bit.
pub fn fairness_discrepancy(
    classifiers: &[&EvalClassifier],
    samples: &Matrix,
    reference: &ReferenceDistribution,
) -> Result<FairnessReport> {
    if samples.rows() == 0 {
        return Err(Error::Empty("fairness samples"));
    }
    check_dim("fairness classifiers", reference.attributes.len(), classifiers.len())?;
    for (clf, attr) in classifiers.iter().zip(&reference.attributes) {
        if &clf.attribute != attr {
            return Err(Error::InvalidArgument(format!(
                "classifier for `{}` given where `{attr}` is expected",
                clf.attribute
            )));
        }
    }
    let k = reference.num_classes();
    let per: Vec<Matrix> = classifiers
        .iter()
        .map(|c| c.probs_batch(samples))
        .collect::<Result<_>>()?;
    let mut soft = vec![0.0; k];
    let mut hard = vec![0.0; k];
    let mut joint = vec![0.0; k];
    for r in 0..samples.rows() {
        joint.iter_mut().for_each(|v| *v = 1.0);
        let mut hard_idx = 0;
        for p in &per {
            let (p0, p1) = (p.get(r, 0), p.get(r, 1));
            hard_idx = 2 * hard_idx + (p1 > p0) as usize;
        }
        for (idx, v) in joint.iter_mut().enumerate() {
            for (a, p) in per.iter().enumerate() {
                let bit = (idx >> (per.len() - 1 - a)) & 1;
                *v *= p.get(r, bit);
            }
        }
        for (s, j) in soft.iter_mut().zip(&joint) {
            *s += j;
        }
        hard[hard_idx] += 1.0;
    }
    let n = samples.rows() as f64;
    soft.iter_mut().for_each(|v| *v /= n);
    hard.iter_mut().for_each(|v| *v /= n);
    Ok(FairnessReport {
        attributes: reference.attributes.clone(),
        fd: fd_between(&reference.probs, &soft),
        soft_fractions: soft,
        hard_fractions: hard,
        n: samples.rows(),
    })
}

/// `‖a − b‖₂`.
pub fn fd_between(a: &[f64], b: &[f64]) -> f64 {
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    l2_norm(&diff)
}
