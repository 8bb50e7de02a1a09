//! h-space datasets, per-level linear attribute classifiers, and the
//! attribute distribution predictor used by distribution guidance.

mod adp;
mod bank;
mod dataset;

pub use adp::{
    adp_estimate, adp_gradient, AdpGradient, AttributeDistributionEstimate, AttributePredictor, ChiSquare,
    DistributionLoss, JointPredictor, LossKind, SquaredEuclidean,
};
pub use bank::{
    accuracy_table_csv, bank_accuracy, classify_h, stratified_split, train_hbank, BankConfig, BankMeta, HClassifierBank,
};
pub use dataset::{build_hdataset, HDataset, HEntry};
