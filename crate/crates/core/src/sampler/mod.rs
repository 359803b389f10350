//! Balanced multi-domain batching.
//!
//! Each batch takes the same number of scale pairs from every source domain,
//! split evenly between the two classes. Within a (domain, class) pool samples
//! are drawn without replacement; an exhausted pool is reshuffled and starts a
//! new epoch.

use crate::synth::{batch_tensor, make_scale_pair, DomainCorpus, ScalePair, SynthError};
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use rand::Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SamplerError {
    #[error("domain {domain} has no samples of class {class}")]
    EmptyPool { domain: String, class: usize },
    #[error("need at least one source domain and a positive batch size")]
    Config,
    #[error(transparent)]
    Synth(#[from] SynthError),
}

pub type Result<T> = std::result::Result<T, SamplerError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SamplerConfig {
    /// Batch size per source domain.
    pub per_domain: usize,
    /// When set, `per_domain` counts scale images (two per pair) instead of pairs.
    pub count_images: bool,
    pub crop: usize,
    pub scale_factor: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            per_domain: 8,
            count_images: false,
            crop: 32,
            scale_factor: 2,
        }
    }
}

impl SamplerConfig {
    pub fn pairs_per_domain(&self) -> usize {
        if self.count_images {
            (self.per_domain / 2).max(1)
        } else {
            self.per_domain
        }
    }
}

/// The part of one domain a sampler may draw from.
#[derive(Debug, Clone, Copy)]
pub struct SourceView<'a> {
    pub corpus: &'a DomainCorpus,
    /// Indices into `corpus` usable for training.
    pub indices: &'a [usize],
}

#[derive(Debug, Clone)]
struct ClassCursor {
    order: Vec<usize>,
    pos: usize,
    epoch: usize,
}

impl ClassCursor {
    fn next(&mut self, rng: &mut impl Rng) -> usize {
        if self.pos == self.order.len() {
            self.order.shuffle(rng);
            self.pos = 0;
            self.epoch += 1;
        }
        self.pos += 1;
        self.order[self.pos - 1]
    }
}

/// Scale pairs of one batch, grouped by source domain (domain-major order).
#[derive(Debug, Clone)]
pub struct DomainBatch {
    pub pairs: Vec<ScalePair>,
    /// `(domain position, corpus index)` the pair was cut from.
    pub sources: Vec<(usize, usize)>,
    pub domains: usize,
}

/// Which loss term a [`LossView`] feeds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossId {
    Classification,
    Adversarial,
    Triplet,
    ScaleAlignment,
}

/// Row indices into the batch image tensor plus the labels a loss needs.
/// For scale alignment `rows` are the large members and `partners` the
/// matching small members; otherwise `partners` is empty.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LossView {
    pub rows: Vec<usize>,
    pub partners: Vec<usize>,
    pub labels: Vec<usize>,
}

impl DomainBatch {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// `[2P, 3, H, W]`: every large member, then every small member.
    pub fn images(&self) -> Tensor {
        batch_tensor(
            self.pairs
                .iter()
                .map(|p| &p.large)
                .chain(self.pairs.iter().map(|p| &p.small)),
        )
    }

    pub fn pair_classes(&self) -> Vec<usize> {
        self.pairs.iter().map(|p| p.y).collect()
    }

    /// Class label for every image row of [`DomainBatch::images`].
    pub fn class_labels(&self) -> Vec<usize> {
        let mut ys = self.pair_classes();
        ys.extend_from_within(..);
        ys
    }

    /// Domain label for every image row of [`DomainBatch::images`].
    pub fn domain_labels(&self) -> Vec<usize> {
        let mut ds: Vec<usize> = self.pairs.iter().map(|p| p.domain).collect();
        ds.extend_from_within(..);
        ds
    }

    pub fn flatten_for_loss(&self, which: LossId) -> LossView {
        let n = self.pairs.len();
        let all: Vec<usize> = (0..2 * n).collect();
        match which {
            LossId::Classification | LossId::Triplet => LossView {
                rows: all,
                partners: Vec::new(),
                labels: self.class_labels(),
            },
            LossId::Adversarial => LossView {
                rows: all,
                partners: Vec::new(),
                labels: self.domain_labels(),
            },
            LossId::ScaleAlignment => LossView {
                rows: (0..n).collect(),
                partners: (n..2 * n).collect(),
                labels: self.pair_classes(),
            },
        }
    }
}

#[derive(Debug, Clone)]
pub struct BalancedSampler<'a> {
    sources: Vec<SourceView<'a>>,
    cursors: Vec<[ClassCursor; 2]>,
    config: SamplerConfig,
    draws: usize,
}

impl<'a> BalancedSampler<'a> {
    pub fn new(sources: Vec<SourceView<'a>>, config: SamplerConfig, rng: &mut impl Rng) -> Result<Self> {
        if sources.is_empty() || config.pairs_per_domain() == 0 {
            return Err(SamplerError::Config);
        }
        let mut cursors = Vec::with_capacity(sources.len());
        for src in &sources {
            let classes: [ClassCursor; 2] = std::array::from_fn(|class| {
                let mut order: Vec<usize> = src
                    .indices
                    .iter()
                    .copied()
                    .filter(|&i| src.corpus.labels[i] == class)
                    .collect();
                order.shuffle(rng);
                ClassCursor {
                    order,
                    pos: 0,
                    epoch: 0,
                }
            });
            for (class, c) in classes.iter().enumerate() {
                if c.order.is_empty() {
                    return Err(SamplerError::EmptyPool {
                        domain: src.corpus.id.clone(),
                        class,
                    });
                }
            }
            cursors.push(classes);
        }
        Ok(BalancedSampler {
            sources,
            cursors,
            config,
            draws: 0,
        })
    }

    pub fn config(&self) -> &SamplerConfig {
        &self.config
    }

    /// Completed passes over the smallest (domain, class) pool.
    pub fn epochs_completed(&self) -> usize {
        self.cursors
            .iter()
            .flat_map(|c| c.iter().map(|k| k.epoch))
            .min()
            .unwrap_or(0)
    }

    pub fn next_batch(&mut self, rng: &mut impl Rng) -> Result<DomainBatch> {
        let per = self.config.pairs_per_domain();
        let mut pairs = Vec::with_capacity(per * self.sources.len());
        let mut sources = Vec::with_capacity(per * self.sources.len());
        for (d, src) in self.sources.iter().enumerate() {
            // odd batch sizes alternate which class gets the extra pair
            let extra = (self.draws + d) % 2;
            for k in 0..per {
                let class = if k < per / 2 {
                    0
                } else if k < 2 * (per / 2) {
                    1
                } else {
                    extra
                };
                let idx = self.cursors[d][class].next(rng);
                let pair = make_scale_pair(
                    &src.corpus.images[idx],
                    self.config.crop,
                    self.config.scale_factor,
                    class,
                    d,
                    rng,
                )?;
                pairs.push(pair);
                sources.push((d, idx));
            }
        }
        self.draws += 1;
        Ok(DomainBatch {
            pairs,
            sources,
            domains: self.sources.len(),
        })
    }
}
