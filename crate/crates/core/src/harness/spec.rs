use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::diffcore::{DenoiserConfig, ScheduleConfig};
use crate::error::{Error, Result};
use crate::guidance::{Strategy, DEFAULT_BATCH, DEFAULT_GAMMA};
use crate::hspace::{BankConfig, LossKind};
use crate::metrics::ClassifierConfig;

pub const SPEC_VERSION: u32 = 1;

/// Everything an experiment run depends on. Model stages (denoiser,
/// h-space banks, evaluators) are trained once from their own seeds; the
/// `seeds` list drives generation and evaluation draws.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentSpec {
    pub version: u32,
    /// World file; the built-in default world when absent.
    pub world: Option<PathBuf>,
    pub output: PathBuf,
    pub seeds: Vec<u64>,
    /// Generated points per (configuration, seed) cell.
    pub eval_samples: usize,
    pub schedule: ScheduleConfig,
    pub denoiser: DenoiserConfig,
    pub hspace: HSpaceSpec,
    pub evaluator: EvaluatorSpec,
    pub guidance: GuidanceSpec,
    pub ablation: AblationSpec,
    pub multi: MultiSpec,
    pub downstream: DownstreamSpec,
    pub metrics: MetricSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HSpaceSpec {
    /// Attributes that get a bank, each from its own class-balanced set.
    pub attributes: Vec<String>,
    pub samples: usize,
    pub refinements: usize,
    pub seed: u64,
    pub bank: BankConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluatorSpec {
    pub train_samples: usize,
    pub seed: u64,
    pub classifier: ClassifierConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GuidanceSpec {
    pub strategies: Vec<Strategy>,
    pub attribute: String,
    pub reference: Vec<f64>,
    pub gamma: f64,
    /// Strength of data-space guidance, whose gradients live on a
    /// different scale from the h-space ones.
    pub universal_gamma: f64,
    pub edit_scale: f64,
    pub batch_size: usize,
    pub loss: LossKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationSpec {
    pub gammas: Vec<f64>,
    pub gamma_strategies: Vec<Strategy>,
    pub batch_sizes: Vec<usize>,
    pub data_sizes: Vec<usize>,
    /// Held-out samples for the data-efficiency curves.
    pub data_test_samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MultiSpec {
    pub attributes: Vec<String>,
    /// Per-attribute references for marginal mode.
    pub references: Vec<Vec<f64>>,
    /// Joint reference over the four subgroups, first attribute as the
    /// high bit.
    pub subgroup_reference: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DownstreamSpec {
    pub attribute: String,
    pub majority_class: u8,
    pub majority: usize,
    pub minority: usize,
    /// Std of the Gaussian measurement noise on classifier inputs.
    pub observation_noise: f64,
    pub test_per_class: usize,
    pub classifier: ClassifierConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricSpec {
    pub mmd: bool,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        Self {
            version: SPEC_VERSION,
            world: None,
            output: PathBuf::from("runs"),
            seeds: (0..5).collect(),
            eval_samples: 5000,
            schedule: ScheduleConfig::default(),
            denoiser: DenoiserConfig::default(),
            hspace: HSpaceSpec::default(),
            evaluator: EvaluatorSpec::default(),
            guidance: GuidanceSpec::default(),
            ablation: AblationSpec::default(),
            multi: MultiSpec::default(),
            downstream: DownstreamSpec::default(),
            metrics: MetricSpec::default(),
        }
    }
}

impl Default for HSpaceSpec {
    fn default() -> Self {
        Self {
            attributes: vec!["a1".into(), "a2".into()],
            samples: 2000,
            refinements: 1,
            seed: 100,
            bank: BankConfig::default(),
        }
    }
}

impl Default for EvaluatorSpec {
    fn default() -> Self {
        Self {
            train_samples: 4000,
            seed: 200,
            classifier: ClassifierConfig::default(),
        }
    }
}

impl Default for GuidanceSpec {
    fn default() -> Self {
        Self {
            strategies: vec![Strategy::Random, Strategy::Sample, Strategy::Distribution],
            attribute: "a1".into(),
            reference: vec![0.5, 0.5],
            gamma: DEFAULT_GAMMA,
            universal_gamma: 0.5,
            edit_scale: 1.0,
            batch_size: DEFAULT_BATCH,
            loss: LossKind::default(),
        }
    }
}

impl GuidanceSpec {
    /// Row label for the configured reference, e.g. `ref=0.5:0.5`.
    pub fn reference_setting(&self) -> String {
        let parts: Vec<String> = self.reference.iter().map(|p| format!("{p}")).collect();
        format!("ref={}", parts.join(":"))
    }
}

impl Default for AblationSpec {
    fn default() -> Self {
        Self {
            gammas: vec![0.0, 250.0, 500.0, 1000.0, 1500.0],
            gamma_strategies: vec![Strategy::Distribution, Strategy::Sample],
            batch_sizes: vec![10, 25, 50, 75, 100],
            data_sizes: vec![200, 500, 1000, 2000],
            data_test_samples: 500,
        }
    }
}

impl Default for MultiSpec {
    fn default() -> Self {
        Self {
            attributes: vec!["a1".into(), "a2".into()],
            references: vec![vec![0.5, 0.5], vec![0.5, 0.5]],
            subgroup_reference: vec![0.25; 4],
        }
    }
}

impl Default for DownstreamSpec {
    fn default() -> Self {
        Self {
            attribute: "a1".into(),
            majority_class: 0,
            majority: 5000,
            minority: 500,
            observation_noise: 1.15,
            test_per_class: 5000,
            classifier: ClassifierConfig {
                min_accuracy: 0.0,
                holdout: 0.0,
                epochs: 20,
                seed: 300,
                ..ClassifierConfig::default()
            },
        }
    }
}

impl Default for MetricSpec {
    fn default() -> Self {
        Self { mmd: true }
    }
}

/// Lowercase hex SHA-256 of `bytes`.
pub fn content_hash(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Hash of the JSON form of `value`; field order is fixed by the types.
pub fn hash_of<T: Serialize>(value: &T) -> String {
    content_hash(serde_json::to_string(value).expect("serializable").as_bytes())
}

impl ExperimentSpec {
    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: Self = toml::from_str(text).map_err(|e| Error::format("<spec>", e))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut spec = Self::from_toml(&text).map_err(|e| match e {
            Error::Format { msg, .. } => Error::format(path, msg),
            other => other,
        })?;
        // relative world paths are relative to the spec file
        if let (Some(w), Some(dir)) = (&spec.world, path.parent()) {
            if w.is_relative() {
                spec.world = Some(dir.join(w));
            }
        }
        Ok(spec)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("spec serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.version != SPEC_VERSION {
            return bad(format!(
                "unsupported spec version {} (expected {SPEC_VERSION})",
                self.version
            ));
        }
        if self.seeds.is_empty() {
            return bad("seed list is empty".into());
        }
        if self.eval_samples < 2 {
            return bad("eval_samples must be at least 2".into());
        }
        if self.guidance.strategies.is_empty() {
            return bad("no guidance strategies".into());
        }
        if self.guidance.batch_size == 0 || self.ablation.batch_sizes.contains(&0) {
            return bad("batch sizes must be positive".into());
        }
        let gammas = std::iter::once(self.guidance.gamma)
            .chain(std::iter::once(self.guidance.universal_gamma))
            .chain(self.ablation.gammas.iter().copied());
        for g in gammas {
            if !g.is_finite() || g < 0.0 {
                return bad(format!("guidance strengths must be finite and non-negative, got {g}"));
            }
        }
        if self.hspace.samples < 2 {
            return bad("h-space dataset needs at least two samples".into());
        }
        if self.multi.attributes.len() != 2 || self.multi.references.len() != 2 {
            return bad("multi-attribute runs need exactly two attributes and references".into());
        }
        if self.downstream.majority_class > 1
            || self.downstream.minority == 0
            || self.downstream.majority <= self.downstream.minority
        {
            return bad("downstream needs a binary majority class and majority > minority > 0".into());
        }
        if !(self.downstream.observation_noise >= 0.0) {
            return bad("observation noise must be non-negative".into());
        }
        Ok(())
    }

    /// Content hash of the whole spec.
    pub fn hash(&self) -> String {
        hash_of(self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let spec = ExperimentSpec::default();
        assert!(spec.ablation.gammas.contains(&1500.0));
        assert_eq!(spec.ablation.batch_sizes, vec![10, 25, 50, 75, 100]);
        assert!(spec.ablation.data_sizes.contains(&200) && spec.ablation.data_sizes.contains(&500));
        let back = ExperimentSpec::from_toml(&spec.to_toml()).unwrap();
        assert_eq!(back, spec);
        assert_eq!(back.hash(), spec.hash());
    }

    #[test]
    fn partial_spec_fills_defaults() {
        let spec = ExperimentSpec::from_toml("version = 1\nseeds = [3]\n[guidance]\ngamma = 250.0\n").unwrap();
        assert_eq!(spec.seeds, vec![3]);
        assert_eq!(spec.guidance.gamma, 250.0);
        assert_eq!(spec.guidance.batch_size, 100);
    }

    #[test]
    fn typos_and_bad_values_are_errors() {
        assert!(ExperimentSpec::from_toml("version = 1\n[guidance]\ngama = 1.0\n").is_err());
        assert!(ExperimentSpec::from_toml("version = 2\n").is_err());
        assert!(ExperimentSpec::from_toml("version = 1\nseeds = []\n").is_err());
        assert!(ExperimentSpec::from_toml("version = 1\n[guidance]\ngamma = -1.0\n").is_err());
    }

    #[test]
    fn hash_changes_with_content() {
        let a = ExperimentSpec::default();
        let mut b = a.clone();
        b.guidance.gamma = 1000.0;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(content_hash(b"abc").len(), 64);
    }
}
