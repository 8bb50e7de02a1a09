//! Evaluation: an independent clean-space attribute classifier, the
//! fairness discrepancy it induces, and analytic sample-quality scores.

mod classifier;
mod fairness;
mod quality;

use serde::{Deserialize, Serialize};

pub use classifier::{accuracy_on, train_eval_classifier, ClassifierConfig, ClassifierMeta, EvalClassifier};
pub use fairness::{fairness_discrepancy, fd_between, FairnessReport};
pub use quality::{
    mean_log_density, median_heuristic, mmd2_unbiased, mmd_permutation_test, quality_score, MmdReference,
    PermutationTest, QualityScore, MMD_REFERENCE_SIZE,
};

/// One emitted metric value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub run_id: String,
    pub metric: String,
    pub value: f64,
    pub n: usize,
    pub seed: u64,
}

impl MetricRecord {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("record serializes")
    }
}

/// Flattens a fairness report and quality score into records.
pub fn report_records(
    run_id: &str,
    seed: u64,
    fairness: &FairnessReport,
    quality: Option<&QualityScore>,
) -> Vec<MetricRecord> {
    let rec = |metric: String, value: f64, n: usize| MetricRecord {
        run_id: run_id.into(),
        metric,
        value,
        n,
        seed,
    };
    let tag = fairness.attributes.join("+");
    let mut out = vec![rec(format!("fd[{tag}]"), fairness.fd, fairness.n)];
    for (c, v) in fairness.soft_fractions.iter().enumerate() {
        out.push(rec(format!("fraction[{tag}={c}]"), *v, fairness.n));
    }
    if let Some(q) = quality {
        out.push(rec("mean_log_density".into(), q.mean_log_density, q.n));
        out.push(rec("mmd2".into(), q.mmd2, q.n));
    }
    out
}
