//! Validation folds, ranking/thresholded metrics, paired significance
//! testing, and the evaluation report emitted by pipeline runs.

pub mod folds;
pub mod metrics;
pub mod wilcoxon;

use serde::{Deserialize, Serialize};

pub use folds::{make_folds, Fold, FoldElectrode, FoldPlan, ValidationMode, CV_FOLDS};
pub use metrics::{
    compute_metrics, pr_auc, pr_curve, roc_auc, roc_curve, select_threshold_max_f1,
    thresholded_metrics, Metrics, ThresholdedMetrics,
};
pub use wilcoxon::{wilcoxon_signed_rank, WilcoxonResult, EXACT_LIMIT};

/// Metrics of one held-out fold. `metrics` is absent when the fold's test
/// set lacks a class, which leaves the ranking metrics undefined.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FoldReport {
    pub fold: usize,
    pub n_test: usize,
    pub n_test_critical: usize,
    pub threshold: f64,
    pub metrics: Option<Metrics>,
}

/// Mean over the folds where the ranking metrics were defined. Reported
/// alongside the pooled numbers since the two conventions differ.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FoldMeanMetrics {
    pub roc_auc: f64,
    pub pr_auc: f64,
    pub n_folds_used: usize,
}

/// Full evaluation output of one pipeline run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub version: String,
    pub config: serde_json::Value,
    pub mode: ValidationMode,
    pub n_electrodes: usize,
    pub n_critical: usize,
    pub folds: Vec<FoldReport>,
    /// Metrics over the concatenated held-out verdicts of all folds.
    pub pooled: Metrics,
    pub fold_mean: Option<FoldMeanMetrics>,
}
