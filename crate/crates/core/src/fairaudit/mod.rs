//! Group-fairness audit: subgroup AUROC / balanced accuracy / F1, decision
//! curves, risk histograms, disparity summaries, bootstrap intervals and
//! linear leakage probes.

mod io;
mod probe;
mod report;
mod svg;

use serde::{Deserialize, Serialize};

use crate::synthgen::Sa;

pub use io::{
    fmt_num, read_predictions, read_report_json, write_audit_files, write_compare_files, write_predictions,
    write_report_json, PREDICTIONS_HEADER,
};
pub use probe::{probe_leakage, ProbeOptions};
pub use report::{
    audit, bootstrap_auroc_ci, compare_reports, decision_curve, default_thresholds, overall_metrics, risk_distribution,
    subgroup_report, AuditOptions, AuditReport, Comparison, ComparisonRow, ConfidenceInterval, DecisionCurve,
    GroupValue, OverallMetrics, RiskHistogram, SaReport, SubgroupMetrics,
};
pub use svg::{dca_svg, disparity_svg, risk_svg};

#[derive(Debug, thiserror::Error)]
pub enum AuditError {
    #[error("{0} is undefined: both classes must be present")]
    Undefined(&'static str),
    #[error("empty input")]
    Empty,
    #[error("length mismatch: {0} vs {1}")]
    Length(usize, usize),
    #[error("unknown sensitive attribute `{0}`")]
    UnknownSa(String),
    #[error("threshold {0} is outside (0, 1)")]
    Threshold(f64),
    #[error("histogram needs at least 2 bins, got {0}")]
    Bins(usize),
    #[error("probe needs at least {need} samples per class, class {class} has {have}")]
    ClassTooSmall { class: u8, have: usize, need: usize },
    #[error("reports are not comparable: {0}")]
    Mismatch(String),
    #[error("{file} row {row}, column `{column}`: {msg}")]
    Schema {
        file: String,
        row: usize,
        column: String,
        msg: String,
    },
    #[error("report file: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One scored sample. `sa` is indexed by [`Sa::index`]; `None` marks missing metadata.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub image_id: String,
    pub patient_id: String,
    pub y_true: u8,
    pub score: f64,
    pub y_hat: u8,
    pub sa: [Option<u8>; 5],
}

impl PredictionRecord {
    pub fn group(&self, sa: Sa) -> Option<u8> {
        self.sa[sa.index()]
    }
}

/// Mann-Whitney AUROC: the fraction of (positive, negative) pairs ranked
/// correctly, ties counting one half.
pub fn auroc(scores: &[f64], labels: &[u8]) -> Result<f64, AuditError> {
    if scores.len() != labels.len() {
        return Err(AuditError::Length(scores.len(), labels.len()));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let n_pos = labels.iter().filter(|&&y| y == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(AuditError::Undefined("AUROC"));
    }
    // Sweep tie blocks in ascending score order; counts stay integral so the
    // sum is exact before the final division.
    let mut neg_below = 0u64;
    let mut twice_u = 0u64;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        let (mut p, mut n) = (0u64, 0u64);
        while j < idx.len() && scores[idx[j]] == scores[idx[i]] {
            if labels[idx[j]] == 1 {
                p += 1;
            } else {
                n += 1;
            }
            j += 1;
        }
        twice_u += 2 * p * neg_below + p * n;
        neg_below += n;
        i = j;
    }
    Ok(twice_u as f64 / (2.0 * n_pos as f64 * n_neg as f64))
}

/// Confusion counts of hard predictions against labels.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

impl Confusion {
    pub fn from_labels(y_hat: &[u8], y_true: &[u8]) -> Result<Self, AuditError> {
        if y_hat.len() != y_true.len() {
            return Err(AuditError::Length(y_hat.len(), y_true.len()));
        }
        if y_hat.is_empty() {
            return Err(AuditError::Empty);
        }
        let mut c = Confusion::default();
        for (&p, &t) in y_hat.iter().zip(y_true) {
            match (p == 1, t == 1) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, false) => c.tn += 1,
                (false, true) => c.fn_ += 1,
            }
        }
        Ok(c)
    }

    pub fn balanced_accuracy(&self) -> Result<f64, AuditError> {
        let pos = self.tp + self.fn_;
        let neg = self.tn + self.fp;
        if pos == 0 || neg == 0 {
            return Err(AuditError::Undefined("balanced accuracy"));
        }
        Ok((self.tp as f64 / pos as f64 + self.tn as f64 / neg as f64) / 2.0)
    }

    /// `2TP / (2TP + FP + FN)`; undefined when there are no positives and no positive predictions.
    pub fn f1(&self) -> Result<f64, AuditError> {
        let den = 2 * self.tp + self.fp + self.fn_;
        if den == 0 {
            return Err(AuditError::Undefined("F1"));
        }
        Ok(2.0 * self.tp as f64 / den as f64)
    }
}

pub fn balanced_accuracy(y_hat: &[u8], y_true: &[u8]) -> Result<f64, AuditError> {
    Confusion::from_labels(y_hat, y_true)?.balanced_accuracy()
}

pub fn f1(y_hat: &[u8], y_true: &[u8]) -> Result<f64, AuditError> {
    Confusion::from_labels(y_hat, y_true)?.f1()
}

/// Hard label at `threshold`: positive only when the score is strictly above it.
pub fn hard_label(score: f64, threshold: f64) -> u8 {
    u8::from(score > threshold)
}
