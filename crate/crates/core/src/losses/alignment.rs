//! Scale alignment: symmetric KL divergence between task-network score
//! distributions of the same content seen at two scales.
//!
//! Three strategies are provided:
//! - [`scale_alignment_loss`]: per pair, then averaged within each class;
//! - [`feature_alignment_loss`]: average embeddings per (class, scale) first;
//! - [`avg_score_alignment_loss`]: average softmax scores per (class, scale) first.
//!
//! In every strategy the outer average runs over the classes present in the
//! batch; absent classes are skipped rather than counted as zero.

use super::{LossError, Result};
use crate::models::TaskNetwork;
use crate::tensor::{Tape, Var};
use std::collections::BTreeMap;

/// Probabilities are floored at this value before taking logs.
pub const CLAMP_EPS: f64 = 1e-12;

/// A clamped probability vector.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreDistribution {
    probs: Vec<f64>,
}

impl ScoreDistribution {
    pub fn new(probs: &[f64]) -> Result<Self> {
        if probs.is_empty() || probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(LossError::Batch(format!("not a distribution: {probs:?}")));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(LossError::Batch(format!(
                "probabilities sum to {total}, expected 1"
            )));
        }
        Ok(ScoreDistribution {
            probs: probs.iter().map(|p| p.max(CLAMP_EPS)).collect(),
        })
    }

    /// Softmax of `logits`, clamped.
    pub fn from_logits(logits: &[f64]) -> Self {
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        ScoreDistribution {
            probs: exps.iter().map(|e| (e / total).max(CLAMP_EPS)).collect(),
        }
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }
}

fn kl(p: &[f64], q: &[f64]) -> f64 {
    p.iter().zip(q).map(|(a, b)| a * (a.ln() - b.ln())).sum()
}

/// `½[KL(p‖q) + KL(q‖p)]`
pub fn symmetric_kl(p: &ScoreDistribution, q: &ScoreDistribution) -> f64 {
    assert_eq!(p.probs.len(), q.probs.len(), "distribution lengths differ");
    0.5 * (kl(&p.probs, &q.probs) + kl(&q.probs, &p.probs))
}

/// Row-wise symmetric KL between probability tensors `[m, K]`, giving `[m]`.
pub fn symmetric_kl_rows(tape: &mut Tape, p: Var, q: Var) -> Result<Var> {
    let p = tape.clamp_min(p, CLAMP_EPS);
    let q = tape.clamp_min(q, CLAMP_EPS);
    let lp = tape.log(p);
    let lq = tape.log(q);
    let d_pq = tape.sub(lp, lq)?;
    let d_qp = tape.sub(lq, lp)?;
    let t_pq = tape.mul(p, d_pq)?;
    let t_qp = tape.mul(q, d_qp)?;
    let kl_pq = tape.sum_rows(t_pq)?;
    let kl_qp = tape.sum_rows(t_qp)?;
    let both = tape.add(kl_pq, kl_qp)?;
    Ok(tape.scale(both, 0.5))
}

/// Row indices per class, in ascending class order.
pub(crate) fn class_groups(classes: &[usize]) -> Vec<Vec<usize>> {
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &c) in classes.iter().enumerate() {
        groups.entry(c).or_default().push(i);
    }
    groups.into_values().collect()
}

fn check_pairs(tape: &Tape, a: Var, b: Var, classes: &[usize], what: &str) -> Result<()> {
    let (sa, sb) = (tape.shape(a), tape.shape(b));
    if sa != sb || sa.len() != 2 || sa[0] != classes.len() {
        return Err(LossError::Batch(format!(
            "{what}: large {sa:?} and small {sb:?} must both be [{}, _]",
            classes.len()
        )));
    }
    Ok(())
}

fn average_over_classes(tape: &mut Tape, terms: Vec<Var>) -> Result<Var> {
    let n = terms.len();
    let mut iter = terms.into_iter();
    let first = iter
        .next()
        .ok_or_else(|| LossError::Batch("no classes present".into()))?;
    let mut total = first;
    for t in iter {
        total = tape.add(total, t)?;
    }
    Ok(tape.scale(total, 1.0 / n as f64))
}

/// Pairwise strategy. Row `j` of `large_logits` and `small_logits` are the
/// task outputs for the two scales of pair `j`, whose class is `classes[j]`.
pub fn scale_alignment_loss(
    tape: &mut Tape,
    large_logits: Var,
    small_logits: Var,
    classes: &[usize],
) -> Result<Var> {
    check_pairs(tape, large_logits, small_logits, classes, "scale_alignment_loss")?;
    let pl = tape.softmax(large_logits)?;
    let ps = tape.softmax(small_logits)?;
    let per_pair = symmetric_kl_rows(tape, pl, ps)?;
    let mut terms = Vec::new();
    for idx in class_groups(classes) {
        let picked = tape.gather(per_pair, &idx)?;
        terms.push(tape.mean(picked));
    }
    average_over_classes(tape, terms)
}

/// Feature-level strategy: class means of the embeddings at each scale are
/// pushed through `T`, then compared.
pub fn feature_alignment_loss(
    tape: &mut Tape,
    task: &TaskNetwork,
    task_vars: &[Var],
    large_feats: Var,
    small_feats: Var,
    classes: &[usize],
) -> Result<Var> {
    check_pairs(tape, large_feats, small_feats, classes, "feature_alignment_loss")?;
    let mut terms = Vec::new();
    for idx in class_groups(classes) {
        let gl = tape.gather_rows(large_feats, &idx)?;
        let gs = tape.gather_rows(small_feats, &idx)?;
        let zl = tape.mean_axis0(gl)?;
        let zs = tape.mean_axis0(gs)?;
        let sl = task.classify(tape, task_vars, zl)?;
        let ss = task.classify(tape, task_vars, zs)?;
        let pl = tape.softmax(sl)?;
        let ps = tape.softmax(ss)?;
        let d = symmetric_kl_rows(tape, pl, ps)?;
        terms.push(tape.sum(d));
    }
    average_over_classes(tape, terms)
}

/// Score-averaging strategy: mean softmax scores per (class, scale) are compared.
pub fn avg_score_alignment_loss(
    tape: &mut Tape,
    large_logits: Var,
    small_logits: Var,
    classes: &[usize],
) -> Result<Var> {
    check_pairs(tape, large_logits, small_logits, classes, "avg_score_alignment_loss")?;
    let pl = tape.softmax(large_logits)?;
    let ps = tape.softmax(small_logits)?;
    let mut terms = Vec::new();
    for idx in class_groups(classes) {
        let gl = tape.gather_rows(pl, &idx)?;
        let gs = tape.gather_rows(ps, &idx)?;
        let ml = tape.mean_axis0(gl)?;
        let ms = tape.mean_axis0(gs)?;
        let d = symmetric_kl_rows(tape, ml, ms)?;
        terms.push(tape.sum(d));
    }
    average_over_classes(tape, terms)
}
