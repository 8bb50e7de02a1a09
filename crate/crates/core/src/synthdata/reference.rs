use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Target histogram over the classes of one attribute, or over the joint
/// subgroups of several (class index = labels read as a binary number,
/// first attribute most significant).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReferenceDistribution {
    pub attributes: Vec<String>,
    pub probs: Vec<f64>,
}

impl ReferenceDistribution {
    pub fn new(attributes: Vec<String>, probs: Vec<f64>) -> Result<Self> {
        if attributes.is_empty() {
            return Err(Error::InvalidArgument("reference needs an attribute".into()));
        }
        let classes = 1usize << attributes.len();
        if probs.len() != classes {
            return Err(Error::DimensionMismatch {
                context: "reference distribution classes",
                expected: classes,
                actual: probs.len(),
            });
        }
        let s: f64 = probs.iter().sum();
        if probs.iter().any(|p| !(*p >= 0.0)) || (s - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidArgument(format!(
                "reference must be non-negative and sum to 1, got {probs:?}"
            )));
        }
        Ok(Self { attributes, probs })
    }

    pub fn single(attribute: &str, probs: &[f64]) -> Result<Self> {
        Self::new(vec![attribute.to_string()], probs.to_vec())
    }

    pub fn uniform(attributes: &[&str]) -> Self {
        let k = 1usize << attributes.len();
        Self::new(
            attributes.iter().map(|s| s.to_string()).collect(),
            vec![1.0 / k as f64; k],
        )
        .expect("uniform reference is valid")
    }

    pub fn num_classes(&self) -> usize {
        self.probs.len()
    }
}
