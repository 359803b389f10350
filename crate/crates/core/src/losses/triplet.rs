//! Domain-agnostic triplet loss on squared Euclidean distances.
//!
//! Triplets are built from class labels alone: anchor and positive share a
//! class, the negative comes from the other class, and neither domain nor
//! scale restricts the choice. Same-domain and cross-domain triplets therefore
//! land in one pool.

use super::{LossError, Result};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TripletMining {
    /// Every valid `(a, p, n)`; mean over all of them.
    #[default]
    BatchAll,
    /// Per anchor, the farthest positive and the closest negative.
    BatchHard,
}

impl std::str::FromStr for TripletMining {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "all" | "batch_all" => Ok(TripletMining::BatchAll),
            "hard" | "batch_hard" => Ok(TripletMining::BatchHard),
            other => Err(format!("unknown triplet mining '{other}'")),
        }
    }
}

/// Mean of `max(0, ‖f_a − f_p‖² − ‖f_a − f_n‖² + margin)` over mined triplets.
/// A batch without any valid triplet yields 0 and a warning.
pub fn triplet_loss(
    tape: &mut Tape,
    embeddings: Var,
    labels: &[usize],
    margin: f64,
    mining: TripletMining,
) -> Result<Var> {
    let m = match tape.shape(embeddings) {
        [m, _] => *m,
        s => {
            return Err(LossError::Batch(format!(
                "triplet_loss expects [batch, dim] embeddings, got {s:?}"
            )))
        }
    };
    if labels.len() != m {
        return Err(LossError::Batch(format!(
            "{} labels for {m} embeddings",
            labels.len()
        )));
    }
    let dist = tape.pairwise_sq_dist(embeddings)?;
    let (pos, neg) = match mining {
        TripletMining::BatchAll => all_triplets(labels),
        TripletMining::BatchHard => hardest_triplets(tape.value(dist), labels),
    };
    if pos.is_empty() {
        log::warn!("triplet_loss: batch of {m} has no valid triplet; contributing 0");
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    let d_ap = tape.gather(dist, &pos)?;
    let d_an = tape.gather(dist, &neg)?;
    let gap = tape.sub(d_ap, d_an)?;
    let shifted = tape.add_scalar(gap, margin);
    let hinge = tape.relu(shifted);
    Ok(tape.mean(hinge))
}

/// Flat distance-matrix indices `(a·m + p, a·m + n)` for every valid triplet.
fn all_triplets(labels: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let m = labels.len();
    let (mut pos, mut neg) = (Vec::new(), Vec::new());
    for a in 0..m {
        for p in 0..m {
            if p == a || labels[p] != labels[a] {
                continue;
            }
            for n in 0..m {
                if labels[n] != labels[a] {
                    pos.push(a * m + p);
                    neg.push(a * m + n);
                }
            }
        }
    }
    (pos, neg)
}

fn hardest_triplets(dist: &Tensor, labels: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let m = labels.len();
    let d = dist.data();
    let (mut pos, mut neg) = (Vec::new(), Vec::new());
    for a in 0..m {
        let hardest_pos = (0..m)
            .filter(|&p| p != a && labels[p] == labels[a])
            .max_by(|&x, &y| d[a * m + x].total_cmp(&d[a * m + y]));
        let hardest_neg = (0..m)
            .filter(|&n| labels[n] != labels[a])
            .min_by(|&x, &y| d[a * m + x].total_cmp(&d[a * m + y]));
        if let (Some(p), Some(n)) = (hardest_pos, hardest_neg) {
            pos.push(a * m + p);
            neg.push(a * m + n);
        }
    }
    (pos, neg)
}
