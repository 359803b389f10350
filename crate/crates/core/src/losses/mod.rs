//! Training objective: classification cross-entropy, the adversarial domain
//! loss, the domain-agnostic triplet loss, scale alignment (three strategies)
//! and their weighted composition.

mod alignment;
mod triplet;

pub use alignment::{
    avg_score_alignment_loss, feature_alignment_loss, scale_alignment_loss, symmetric_kl,
    symmetric_kl_rows, ScoreDistribution, CLAMP_EPS,
};
pub use triplet::{triplet_loss, TripletMining};

use crate::models::{DomainDiscriminator, FeatureGenerator, ModelError};
use crate::tensor::{Tape, TensorError, Var};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum LossError {
    #[error("label {label} out of range for {classes} classes")]
    Label { label: usize, classes: usize },
    #[error("{0}")]
    Batch(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub type Result<T> = std::result::Result<T, LossError>;

/// Weights of the composite objective and the triplet margin.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    /// adversarial domain loss
    pub lambda1: f64,
    /// triplet loss
    pub lambda2: f64,
    /// scale alignment loss
    pub lambda3: f64,
    pub margin: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda1: 0.1,
            lambda2: 0.2,
            lambda3: 0.1,
            margin: 0.3,
        }
    }
}

impl LossWeights {
    pub fn zero() -> Self {
        LossWeights {
            lambda1: 0.0,
            lambda2: 0.0,
            lambda3: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> std::result::Result<(), String> {
        let all = [self.lambda1, self.lambda2, self.lambda3, self.margin];
        if all.iter().any(|v| !v.is_finite()) {
            return Err("loss weights must be finite".into());
        }
        if self.lambda1 < 0.0 || self.lambda2 < 0.0 || self.lambda3 < 0.0 {
            return Err("loss weights must be non-negative".into());
        }
        if self.margin <= 0.0 {
            return Err("triplet margin must be positive".into());
        }
        Ok(())
    }
}

/// Mean negative log-likelihood of `labels` under row-wise softmax of
/// `logits [batch, K]`.
pub fn cross_entropy(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    let (batch, classes) = match tape.shape(logits) {
        [b, k] => (*b, *k),
        s => {
            return Err(LossError::Batch(format!(
                "cross_entropy expects [batch, classes] logits, got {s:?}"
            )))
        }
    };
    if labels.len() != batch {
        return Err(LossError::Batch(format!(
            "{} labels for a batch of {batch}",
            labels.len()
        )));
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
        return Err(LossError::Label { label, classes });
    }
    let log_probs = tape.log_softmax(logits)?;
    let idx: Vec<usize> = labels
        .iter()
        .enumerate()
        .map(|(i, &y)| i * classes + y)
        .collect();
    let picked = tape.gather(log_probs, &idx)?;
    let mean = tape.mean(picked);
    Ok(tape.scale(mean, -1.0))
}

/// Domain cross-entropy of `D(GRL(feats))`. One backward pass trains `D` to
/// minimise it while `G` (upstream of the reversal) is pushed to maximise it.
pub fn adversarial_loss(
    tape: &mut Tape,
    disc: &DomainDiscriminator,
    disc_vars: &[Var],
    feats: Var,
    domain_labels: &[usize],
    lambda_grl: f64,
) -> Result<Var> {
    let logits = disc.discriminate(tape, disc_vars, feats, lambda_grl)?;
    cross_entropy(tape, logits, domain_labels)
}

/// [`adversarial_loss`] starting from raw images.
#[allow(clippy::too_many_arguments)]
pub fn adversarial_domain_loss(
    tape: &mut Tape,
    gen: &FeatureGenerator,
    gen_vars: &[Var],
    disc: &DomainDiscriminator,
    disc_vars: &[Var],
    images: Var,
    domain_labels: &[usize],
    lambda_grl: f64,
) -> Result<Var> {
    let feats = gen.embed(tape, gen_vars, images)?;
    adversarial_loss(tape, disc, disc_vars, feats, domain_labels, lambda_grl)
}

/// `l_cls + λ1·l_ada + λ2·l_trip + λ3·l_sa`
pub fn composite_loss(
    tape: &mut Tape,
    weights: &LossWeights,
    l_cls: Var,
    l_ada: Var,
    l_trip: Var,
    l_sa: Var,
) -> Result<Var> {
    for v in [l_cls, l_ada, l_trip, l_sa] {
        if tape.value(v).numel() != 1 {
            return Err(LossError::Batch(format!(
                "composite_loss expects scalar terms, got {:?}",
                tape.shape(v)
            )));
        }
    }
    let mut total = l_cls;
    for (w, term) in [
        (weights.lambda1, l_ada),
        (weights.lambda2, l_trip),
        (weights.lambda3, l_sa),
    ] {
        let scaled = tape.scale(term, w);
        total = tape.add(total, scaled)?;
    }
    Ok(total)
}
