//! Detection metrics: ROC curve, AUC, and HTER at an equal-error threshold.
//!
//! Scores are recapture probabilities; label 1 (recapture) is the positive
//! class and an image is flagged when `score >= threshold`. FAR is the share
//! of recaptures that slip through, FRR the share of single captures that get
//! flagged.

use serde::{Deserialize, Serialize};
use std::cmp::Ordering;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("{0} scores but {1} labels")]
    Length(usize, usize),
    #[error("both classes must be present ({positives} positives, {negatives} negatives)")]
    SingleClass { positives: usize, negatives: usize },
    #[error("labels must be 0 or 1, found {0}")]
    Label(usize),
    #[error("scores must be finite")]
    NonFinite,
}

pub type Result<T> = std::result::Result<T, MetricsError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub fpr: f64,
    pub tpr: f64,
    pub threshold: f64,
}

fn class_counts(scores: &[f64], labels: &[usize]) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(MetricsError::Length(scores.len(), labels.len()));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(MetricsError::NonFinite);
    }
    if let Some(&bad) = labels.iter().find(|&&l| l > 1) {
        return Err(MetricsError::Label(bad));
    }
    let positives = labels.iter().filter(|&&l| l == 1).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(MetricsError::SingleClass {
            positives,
            negatives,
        });
    }
    Ok((positives, negatives))
}

fn sorted_by_score(scores: &[f64], descending: bool) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        let o = scores[a].total_cmp(&scores[b]);
        if descending {
            o.reverse()
        } else {
            o
        }
    });
    order
}

/// One point per distinct score (used as threshold), preceded by `(0, 0)`
/// at an infinite threshold. The last point is always `(1, 1)`.
pub fn roc_curve(scores: &[f64], labels: &[usize]) -> Result<Vec<RocPoint>> {
    let (pos, neg) = class_counts(scores, labels)?;
    let order = sorted_by_score(scores, true);
    let mut points = vec![RocPoint {
        fpr: 0.0,
        tpr: 0.0,
        threshold: f64::INFINITY,
    }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push(RocPoint {
            fpr: fp as f64 / neg as f64,
            tpr: tp as f64 / pos as f64,
            threshold: s,
        });
    }
    Ok(points)
}

/// Twice the Mann–Whitney U statistic (ties count one half), as an integer.
fn doubled_wins(scores: &[f64], labels: &[usize]) -> u128 {
    let order = sorted_by_score(scores, false);
    let mut neg_below = 0u128;
    let mut wins2 = 0u128;
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        let (mut p, mut n) = (0u128, 0u128);
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] == 1 {
                p += 1;
            } else {
                n += 1;
            }
            i += 1;
        }
        wins2 += 2 * p * neg_below + p * n;
        neg_below += n;
    }
    wins2
}

/// Converts a doubled pair-win count to an AUC percentage.
pub fn auc_from_doubled_wins(wins2: u128, positives: usize, negatives: usize) -> f64 {
    100.0 * wins2 as f64 / (2.0 * positives as f64 * negatives as f64)
}

/// Probability (in percent) that a random recapture outscores a random
/// single capture, ties counting one half.
pub fn auc(scores: &[f64], labels: &[usize]) -> Result<f64> {
    let (pos, neg) = class_counts(scores, labels)?;
    Ok(auc_from_doubled_wins(doubled_wins(scores, labels), pos, neg))
}

/// `(FAR, FRR)` at `threshold`.
pub fn error_rates(scores: &[f64], labels: &[usize], threshold: f64) -> Result<(f64, f64)> {
    let (pos, neg) = class_counts(scores, labels)?;
    let missed = scores
        .iter()
        .zip(labels)
        .filter(|(s, &l)| l == 1 && **s < threshold)
        .count();
    let flagged = scores
        .iter()
        .zip(labels)
        .filter(|(s, &l)| l == 0 && **s >= threshold)
        .count();
    Ok((missed as f64 / pos as f64, flagged as f64 / neg as f64))
}

/// Candidate thresholds in ascending order: the lowest score, every midpoint
/// between consecutive distinct scores, and one past the highest score.
pub fn candidate_thresholds(scores: &[f64]) -> Vec<f64> {
    let mut distinct: Vec<f64> = scores.to_vec();
    distinct.sort_by(|a, b| a.total_cmp(b));
    distinct.dedup();
    let mut out = Vec::with_capacity(distinct.len() + 1);
    if let Some(&first) = distinct.first() {
        out.push(first);
    }
    out.extend(distinct.windows(2).map(|w| 0.5 * (w[0] + w[1])));
    if let Some(&last) = distinct.last() {
        out.push(last + 1.0);
    }
    out
}

/// Threshold on `(scores, labels)` minimising `|FAR - FRR|`, ties going to
/// the lower threshold.
pub fn eer_threshold(scores: &[f64], labels: &[usize]) -> Result<f64> {
    let (pos, neg) = class_counts(scores, labels)?;
    let order = sorted_by_score(scores, false);
    let candidates = candidate_thresholds(scores);
    // sweep upwards: everything strictly below the threshold is "passed"
    let (mut missed, mut passed_neg) = (0usize, 0usize);
    let mut k = 0;
    let mut best = (f64::INFINITY, candidates[0]);
    for &t in &candidates {
        while k < order.len() && scores[order[k]] < t {
            if labels[order[k]] == 1 {
                missed += 1;
            } else {
                passed_neg += 1;
            }
            k += 1;
        }
        let far = missed as f64 / pos as f64;
        let frr = (neg - passed_neg) as f64 / neg as f64;
        let gap = (far - frr).abs();
        if gap < best.0 {
            best = (gap, t);
        }
    }
    Ok(best.1)
}

/// HTER (percent) on `(scores, labels)` at the EER threshold chosen on the
/// threshold source set. Returns `(hter, threshold)`.
pub fn hter_at_eer(
    scores: &[f64],
    labels: &[usize],
    threshold_scores: &[f64],
    threshold_labels: &[usize],
) -> Result<(f64, f64)> {
    class_counts(scores, labels)?;
    let t = eer_threshold(threshold_scores, threshold_labels)?;
    let (far, frr) = error_rates(scores, labels, t)?;
    Ok((hter_percent(far, frr), t))
}

pub fn hter_percent(far: f64, frr: f64) -> f64 {
    100.0 * (far + frr) / 2.0
}

/// Where the HTER threshold comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdPolicy {
    /// EER threshold of the held-out source validation split.
    #[default]
    SourceValidation,
    /// EER threshold of the target set itself (uses target labels).
    TargetEer,
}

impl std::str::FromStr for ThresholdPolicy {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "source" | "source_validation" => Ok(ThresholdPolicy::SourceValidation),
            "target" | "target_eer" => Ok(ThresholdPolicy::TargetEer),
            other => Err(format!("unknown threshold policy '{other}'")),
        }
    }
}

/// Result of evaluating one trained model on one target domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub hter: f64,
    pub auc: f64,
    pub eer_threshold: f64,
    pub run_id: String,
    pub target: String,
    pub threshold_policy: ThresholdPolicy,
    #[serde(skip)]
    pub roc: Vec<RocPoint>,
}

impl MetricsReport {
    pub fn compute(
        scores: &[f64],
        labels: &[usize],
        source_scores: &[f64],
        source_labels: &[usize],
        policy: ThresholdPolicy,
        run_id: &str,
        target: &str,
    ) -> Result<Self> {
        let (hter, eer_threshold) = match policy {
            ThresholdPolicy::SourceValidation => hter_at_eer(scores, labels, source_scores, source_labels)?,
            ThresholdPolicy::TargetEer => hter_at_eer(scores, labels, scores, labels)?,
        };
        Ok(MetricsReport {
            hter,
            auc: auc(scores, labels)?,
            eer_threshold,
            run_id: run_id.to_string(),
            target: target.to_string(),
            threshold_policy: policy,
            roc: roc_curve(scores, labels)?,
        })
    }

    /// Single-line JSON record.
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("report serialises")
    }

    pub fn from_json_line(line: &str) -> std::result::Result<Self, serde_json::Error> {
        serde_json::from_str(line)
    }

    /// `fpr,tpr,threshold` rows.
    pub fn roc_csv(&self) -> String {
        let mut out = String::from("fpr,tpr,threshold\n");
        for p in &self.roc {
            out.push_str(&format!("{},{},{}\n", p.fpr, p.tpr, p.threshold));
        }
        out
    }
}

/// Total order helper for callers sorting scores.
pub fn cmp_scores(a: &f64, b: &f64) -> Ordering {
    a.total_cmp(b)
}
