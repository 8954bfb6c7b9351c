//! Report assembly: per-subgroup tables, decision curves, risk histograms,
//! bootstrap intervals and baseline-vs-disentangled comparison.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{auroc, AuditError, Confusion, PredictionRecord};
use crate::seeds;
use crate::synthgen::Sa;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubgroupMetrics {
    pub group: u8,
    pub label: String,
    pub n: usize,
    pub n_pos: usize,
    pub auroc: Option<f64>,
    pub balanced_accuracy: Option<f64>,
    pub f1: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SaReport {
    pub sa: Sa,
    pub groups: Vec<SubgroupMetrics>,
    /// Largest minus smallest defined subgroup AUROC; `None` unless at least two are defined.
    pub disparity: Option<f64>,
    /// Records without a value for this attribute.
    pub missing: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OverallMetrics {
    pub n: usize,
    pub n_pos: usize,
    pub auroc: Option<f64>,
    pub balanced_accuracy: Option<f64>,
    pub f1: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecisionCurve {
    pub thresholds: Vec<f64>,
    pub net_benefit_model: Vec<f64>,
    pub net_benefit_treat_all: Vec<f64>,
    pub net_benefit_treat_none: Vec<f64>,
}

/// Per-class score histograms over `[0, 1]`, uniform bins, right-open except the last.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RiskHistogram {
    pub bins: usize,
    pub neg: Vec<usize>,
    pub pos: Vec<usize>,
}

/// A curve or histogram for one subgroup of one attribute.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupValue<T> {
    pub sa: Sa,
    pub group: u8,
    pub value: T,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceInterval {
    /// `None` for the whole record set.
    pub sa: Option<Sa>,
    pub group: Option<u8>,
    pub lower: Option<f64>,
    pub upper: Option<f64>,
    /// Resamples in which AUROC was defined.
    pub valid: usize,
    pub resamples: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub overall: OverallMetrics,
    pub per_sa: Vec<SaReport>,
    pub overall_dca: Option<DecisionCurve>,
    pub dca: Vec<GroupValue<DecisionCurve>>,
    pub risk: Vec<GroupValue<RiskHistogram>>,
    pub ci: Vec<ConfidenceInterval>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AuditOptions {
    pub thresholds: Vec<f64>,
    pub bins: usize,
    /// Zero disables the bootstrap.
    pub bootstrap_resamples: usize,
    pub bootstrap_seed: u64,
}

impl Default for AuditOptions {
    fn default() -> Self {
        Self {
            thresholds: default_thresholds(),
            bins: 20,
            bootstrap_resamples: 1000,
            bootstrap_seed: 0,
        }
    }
}

/// `0.01, 0.02, ..., 0.99`.
pub fn default_thresholds() -> Vec<f64> {
    (1..=99).map(|i| i as f64 / 100.0).collect()
}

fn metrics_of(records: &[&PredictionRecord]) -> (usize, usize, Option<f64>, Option<f64>, Option<f64>) {
    let n = records.len();
    let n_pos = records.iter().filter(|r| r.y_true == 1).count();
    if n == 0 {
        return (0, 0, None, None, None);
    }
    let scores: Vec<f64> = records.iter().map(|r| r.score).collect();
    let y: Vec<u8> = records.iter().map(|r| r.y_true).collect();
    let y_hat: Vec<u8> = records.iter().map(|r| r.y_hat).collect();
    let conf = Confusion::from_labels(&y_hat, &y).ok();
    (
        n,
        n_pos,
        auroc(&scores, &y).ok(),
        conf.and_then(|c| c.balanced_accuracy().ok()),
        conf.and_then(|c| c.f1().ok()),
    )
}

pub fn overall_metrics(records: &[PredictionRecord]) -> OverallMetrics {
    let refs: Vec<&PredictionRecord> = records.iter().collect();
    let (n, n_pos, auroc, balanced_accuracy, f1) = metrics_of(&refs);
    OverallMetrics {
        n,
        n_pos,
        auroc,
        balanced_accuracy,
        f1,
    }
}

/// Metrics for both subgroups of `sa_name` and their AUROC disparity.
pub fn subgroup_report(records: &[PredictionRecord], sa_name: &str) -> Result<SaReport, AuditError> {
    let sa: Sa = sa_name
        .parse()
        .map_err(|_| AuditError::UnknownSa(sa_name.to_string()))?;
    let missing = records.iter().filter(|r| r.group(sa).is_none()).count();
    let groups: Vec<SubgroupMetrics> = (0..2u8)
        .map(|g| {
            let sub: Vec<&PredictionRecord> = records.iter().filter(|r| r.group(sa) == Some(g)).collect();
            let (n, n_pos, auroc, balanced_accuracy, f1) = metrics_of(&sub);
            SubgroupMetrics {
                group: g,
                label: sa.group_labels()[g as usize].to_string(),
                n,
                n_pos,
                auroc,
                balanced_accuracy,
                f1,
            }
        })
        .collect();
    let defined: Vec<f64> = groups.iter().filter_map(|g| g.auroc).collect();
    let disparity = if defined.len() >= 2 {
        let max = defined.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let min = defined.iter().copied().fold(f64::INFINITY, f64::min);
        Some(max - min)
    } else {
        None
    };
    Ok(SaReport {
        sa,
        groups,
        disparity,
        missing,
    })
}

/// Net benefit `TP/N - FP/N * t/(1-t)` with positives at `score > t`.
pub fn decision_curve(records: &[PredictionRecord], thresholds: &[f64]) -> Result<DecisionCurve, AuditError> {
    if records.is_empty() {
        return Err(AuditError::Empty);
    }
    if let Some(&t) = thresholds.iter().find(|&&t| !(t > 0.0 && t < 1.0)) {
        return Err(AuditError::Threshold(t));
    }
    let n = records.len() as f64;
    let pos = records.iter().filter(|r| r.y_true == 1).count() as f64;
    let neg = n - pos;
    let mut model = Vec::with_capacity(thresholds.len());
    let mut all = Vec::with_capacity(thresholds.len());
    for &t in thresholds {
        let odds = t / (1.0 - t);
        let (mut tp, mut fp) = (0usize, 0usize);
        for r in records.iter().filter(|r| r.score > t) {
            if r.y_true == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
        }
        model.push(tp as f64 / n - fp as f64 / n * odds);
        all.push(pos / n - neg / n * odds);
    }
    Ok(DecisionCurve {
        thresholds: thresholds.to_vec(),
        net_benefit_model: model,
        net_benefit_treat_all: all,
        net_benefit_treat_none: vec![0.0; thresholds.len()],
    })
}

pub fn risk_distribution(records: &[PredictionRecord], bins: usize) -> Result<RiskHistogram, AuditError> {
    if bins < 2 {
        return Err(AuditError::Bins(bins));
    }
    let mut h = RiskHistogram {
        bins,
        neg: vec![0; bins],
        pos: vec![0; bins],
    };
    for r in records {
        let b = ((r.score * bins as f64).floor().max(0.0) as usize).min(bins - 1);
        if r.y_true == 1 {
            h.pos[b] += 1;
        } else {
            h.neg[b] += 1;
        }
    }
    Ok(h)
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Patient-level percentile bootstrap (2.5%, 97.5%) of AUROC over `records`.
///
/// Each resample draws patients with replacement and keeps all of their
/// records. Resample `r` uses its own derived seed, so the result does not
/// depend on scheduling.
pub fn bootstrap_auroc_ci(
    records: &[&PredictionRecord],
    resamples: usize,
    seed: u64,
    stream: &[u64],
) -> (Option<f64>, Option<f64>, usize) {
    let mut by_patient: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, r) in records.iter().enumerate() {
        by_patient.entry(&r.patient_id).or_default().push(i);
    }
    let patients: Vec<&Vec<usize>> = by_patient.values().collect();
    if patients.is_empty() || resamples == 0 {
        return (None, None, 0);
    }
    let mut values: Vec<f64> = (0..resamples)
        .into_par_iter()
        .filter_map(|r| {
            let mut path = vec![seeds::tag::BOOTSTRAP];
            path.extend_from_slice(stream);
            path.push(r as u64);
            let mut rng = ChaCha8Rng::seed_from_u64(seeds::derive(seed, &path));
            let mut scores = Vec::new();
            let mut labels = Vec::new();
            for _ in 0..patients.len() {
                for &i in patients[rng.random_range(0..patients.len())] {
                    scores.push(records[i].score);
                    labels.push(records[i].y_true);
                }
            }
            auroc(&scores, &labels).ok()
        })
        .collect();
    if values.is_empty() {
        return (None, None, 0);
    }
    values.sort_by(f64::total_cmp);
    (
        Some(percentile(&values, 0.025)),
        Some(percentile(&values, 0.975)),
        values.len(),
    )
}

/// Full audit over every attribute.
pub fn audit(records: &[PredictionRecord], opts: &AuditOptions) -> Result<AuditReport, AuditError> {
    if records.is_empty() {
        return Err(AuditError::Empty);
    }
    let per_sa = Sa::ALL
        .par_iter()
        .map(|sa| subgroup_report(records, sa.name()))
        .collect::<Result<Vec<_>, _>>()?;
    let overall_dca = Some(decision_curve(records, &opts.thresholds)?);
    let mut dca = Vec::new();
    let mut risk = Vec::new();
    let mut ci = Vec::new();
    if opts.bootstrap_resamples > 0 {
        let all: Vec<&PredictionRecord> = records.iter().collect();
        let (lower, upper, valid) = bootstrap_auroc_ci(&all, opts.bootstrap_resamples, opts.bootstrap_seed, &[]);
        ci.push(ConfidenceInterval {
            sa: None,
            group: None,
            lower,
            upper,
            valid,
            resamples: opts.bootstrap_resamples,
        });
    }
    for sa in Sa::ALL {
        for g in 0..2u8 {
            let sub: Vec<PredictionRecord> = records.iter().filter(|r| r.group(sa) == Some(g)).cloned().collect();
            risk.push(GroupValue {
                sa,
                group: g,
                value: risk_distribution(&sub, opts.bins)?,
            });
            if !sub.is_empty() {
                dca.push(GroupValue {
                    sa,
                    group: g,
                    value: decision_curve(&sub, &opts.thresholds)?,
                });
            }
            if opts.bootstrap_resamples > 0 {
                let refs: Vec<&PredictionRecord> = sub.iter().collect();
                let stream = [1 + sa.index() as u64, g as u64];
                let (lower, upper, valid) =
                    bootstrap_auroc_ci(&refs, opts.bootstrap_resamples, opts.bootstrap_seed, &stream);
                ci.push(ConfidenceInterval {
                    sa: Some(sa),
                    group: Some(g),
                    lower,
                    upper,
                    valid,
                    resamples: opts.bootstrap_resamples,
                });
            }
        }
    }
    Ok(AuditReport {
        overall: overall_metrics(records),
        per_sa,
        overall_dca,
        dca,
        risk,
        ci,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub metric: String,
    /// `overall` or an attribute name.
    pub scope: String,
    /// Subgroup label, empty for whole-scope metrics.
    pub group: String,
    pub baseline: Option<f64>,
    pub disentangled: Option<f64>,
    /// `disentangled - baseline`.
    pub delta: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub rows: Vec<ComparisonRow>,
}

fn row(metric: &str, scope: &str, group: &str, a: Option<f64>, b: Option<f64>) -> ComparisonRow {
    ComparisonRow {
        metric: metric.into(),
        scope: scope.into(),
        group: group.into(),
        baseline: a,
        disentangled: b,
        delta: a.zip(b).map(|(a, b)| b - a),
    }
}

/// Per-metric deltas `disentangled - baseline`.
pub fn compare_reports(baseline: &AuditReport, disentangled: &AuditReport) -> Result<Comparison, AuditError> {
    let names = |r: &AuditReport| -> Vec<(Sa, Vec<String>)> {
        r.per_sa
            .iter()
            .map(|s| (s.sa, s.groups.iter().map(|g| g.label.clone()).collect()))
            .collect()
    };
    if names(baseline) != names(disentangled) {
        return Err(AuditError::Mismatch("attribute or subgroup definitions differ".into()));
    }
    let (a, b) = (&baseline.overall, &disentangled.overall);
    let mut rows = vec![
        row("auroc", "overall", "", a.auroc, b.auroc),
        row(
            "balanced_accuracy",
            "overall",
            "",
            a.balanced_accuracy,
            b.balanced_accuracy,
        ),
        row("f1", "overall", "", a.f1, b.f1),
    ];
    for (sa, sb) in baseline.per_sa.iter().zip(&disentangled.per_sa) {
        let scope = sa.sa.name();
        rows.push(row("disparity", scope, "", sa.disparity, sb.disparity));
        for (ga, gb) in sa.groups.iter().zip(&sb.groups) {
            rows.push(row("auroc", scope, &ga.label, ga.auroc, gb.auroc));
            rows.push(row(
                "balanced_accuracy",
                scope,
                &ga.label,
                ga.balanced_accuracy,
                gb.balanced_accuracy,
            ));
        }
    }
    Ok(Comparison { rows })
}

fn pct(v: Option<f64>) -> String {
    v.map_or("N/A".into(), |x| format!("{:.1}%", 100.0 * x))
}

fn points(v: Option<f64>) -> String {
    v.map_or("N/A".into(), |x| format!("{:+.1} points", 100.0 * x))
}

impl Comparison {
    /// One line per overall metric and per attribute disparity.
    pub fn summary(&self) -> String {
        let mut out = String::new();
        for r in &self.rows {
            let what = match (r.metric.as_str(), r.scope.as_str(), r.group.is_empty()) {
                ("auroc", "overall", _) => "Overall AUROC".to_string(),
                ("balanced_accuracy", "overall", _) => "Overall balanced accuracy".to_string(),
                ("f1", "overall", _) => "Overall F1".to_string(),
                ("disparity", sa, true) => format!("{sa} AUROC disparity"),
                _ => continue,
            };
            out.push_str(&format!(
                "{what} from {} to {} ({})\n",
                pct(r.baseline),
                pct(r.disentangled),
                points(r.delta)
            ));
        }
        out
    }
}
