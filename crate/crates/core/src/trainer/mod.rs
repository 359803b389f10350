//! End-to-end optimisation of the composite objective over all source
//! domains: one backward pass and one Adam update per step for `G`, `D` and
//! `T` together.

mod adam;

pub use adam::{adam_update, OptimizerState, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};

use crate::eval::{auc, hter_at_eer, MetricsError};
use crate::losses::{
    adversarial_loss, avg_score_alignment_loss, composite_loss, cross_entropy,
    feature_alignment_loss, scale_alignment_loss, symmetric_kl, triplet_loss, LossError,
    ScoreDistribution, LossWeights,
    TripletMining,
};
use crate::models::{BackboneSpec, ModelError, NetworkSpec, Networks};
use crate::sampler::{BalancedSampler, DomainBatch, LossId, SamplerConfig, SamplerError, SourceView};
use crate::synth::{batch_tensor, stream_rng, DomainCorpus, Image};
use crate::tensor::{Tape, Tensor, TensorError};
use rand::seq::SliceRandom;
use std::fmt::Write as _;
use std::path::PathBuf;
use thiserror::Error;

const STREAM_INIT: u64 = 0;
const STREAM_SAMPLER: u64 = 1;
const STREAM_SPLIT: u64 = 2;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("step {step}: non-finite {term} ({value})")]
    NonFinite {
        step: usize,
        term: &'static str,
        value: f64,
    },
    #[error("optimizer: {0}")]
    Optimizer(String),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Sampler(#[from] SamplerError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

pub type Result<T> = std::result::Result<T, TrainError>;

/// How the two scales of a pair are aligned.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SaStrategy {
    /// Per-pair symmetric KL between task outputs.
    #[default]
    Pairwise,
    /// Task outputs of class-mean embeddings.
    Feature,
    /// Class-mean task outputs.
    AvgScore,
}

impl SaStrategy {
    pub fn name(self) -> &'static str {
        match self {
            SaStrategy::Pairwise => "pairwise",
            SaStrategy::Feature => "feature",
            SaStrategy::AvgScore => "avg_score",
        }
    }
}

impl std::str::FromStr for SaStrategy {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "pairwise" => Ok(SaStrategy::Pairwise),
            "feature" => Ok(SaStrategy::Feature),
            "avg_score" | "task" => Ok(SaStrategy::AvgScore),
            other => Err(format!("unknown scale alignment strategy '{other}'")),
        }
    }
}

/// Gradient reversal coefficient over training.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum GrlSchedule {
    #[default]
    Constant,
    /// `2 / (1 + exp(-10 p)) - 1` for training progress `p` in `[0, 1]`.
    Ramp,
}

impl GrlSchedule {
    pub fn lambda(self, step: usize, steps: usize) -> f64 {
        match self {
            GrlSchedule::Constant => 1.0,
            GrlSchedule::Ramp => {
                let p = step as f64 / steps.max(1) as f64;
                2.0 / (1.0 + (-10.0 * p).exp()) - 1.0
            }
        }
    }
}

impl std::str::FromStr for GrlSchedule {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "constant" => Ok(GrlSchedule::Constant),
            "ramp" => Ok(GrlSchedule::Ramp),
            other => Err(format!("unknown GRL schedule '{other}'")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub steps: usize,
    pub weights: LossWeights,
    pub sa_strategy: SaStrategy,
    pub no_ad: bool,
    pub no_trip: bool,
    pub no_sa: bool,
    pub grl: GrlSchedule,
    pub seed: u64,
    pub sampler: SamplerConfig,
    pub mining: TripletMining,
    pub backbone: BackboneSpec,
    pub disc_hidden: usize,
    /// Share of each (domain, class) pool held out for validation.
    pub val_fraction: f64,
    /// Validate every this many steps (and after the last step).
    pub val_every: usize,
    /// Where to write the best checkpoint, if anywhere.
    pub checkpoint: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let sampler = SamplerConfig::default();
        TrainConfig {
            lr: 1e-3,
            steps: 600,
            weights: LossWeights::default(),
            sa_strategy: SaStrategy::Pairwise,
            no_ad: false,
            no_trip: false,
            no_sa: false,
            grl: GrlSchedule::Constant,
            seed: 1,
            sampler,
            mining: TripletMining::BatchAll,
            backbone: BackboneSpec {
                input_size: sampler.crop,
                in_channels: 3,
                channels: vec![8, 16, 32],
                embed_dim: 64,
            },
            disc_hidden: 64,
            val_fraction: 0.1,
            val_every: 100,
            checkpoint: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return bad("learning rate must be positive");
        }
        if self.steps == 0 {
            return bad("steps must be positive");
        }
        if self.val_every == 0 {
            return bad("val_every must be positive");
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return bad("val_fraction must lie in (0, 1)");
        }
        if self.sampler.per_domain == 0 {
            return bad("batch size must be positive");
        }
        if self.backbone.input_size != self.sampler.crop {
            return bad("backbone input size must equal the crop size");
        }
        self.weights.validate().map_err(TrainError::Config)?;
        self.backbone.validate()?;
        Ok(())
    }

    /// Loss weights after the ablation switches.
    pub fn effective_weights(&self) -> LossWeights {
        let mut w = self.weights;
        if self.no_ad {
            w.lambda1 = 0.0;
        }
        if self.no_trip {
            w.lambda2 = 0.0;
        }
        if self.no_sa {
            w.lambda3 = 0.0;
        }
        w
    }

    pub fn network_spec(&self, domains: usize) -> NetworkSpec {
        NetworkSpec {
            backbone: self.backbone.clone(),
            disc_hidden: self.disc_hidden,
            domains,
        }
    }
}

/// Loss terms of one step, before weighting, and their composite.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepMetrics {
    pub l_cls: f64,
    pub l_ada: f64,
    pub l_trip: f64,
    pub l_sa: f64,
    pub l_total: f64,
}

/// One forward and backward pass through the composite objective followed by
/// one Adam update of every parameter.
pub fn train_step(
    nets: &mut Networks,
    batch: &DomainBatch,
    config: &TrainConfig,
    opt: &mut OptimizerState,
    step: usize,
) -> Result<StepMetrics> {
    nets.discriminator.expect_domains(batch.domains)?;
    let weights = config.effective_weights();
    let mut tape = Tape::new();
    let bound = nets.bind(&mut tape);
    let images = tape.constant(batch.images());
    let feats = nets.generator.embed(&mut tape, &bound.generator, images)?;
    let logits = nets.task.classify(&mut tape, &bound.task, feats)?;

    let cls = batch.flatten_for_loss(LossId::Classification);
    let l_cls = cross_entropy(&mut tape, logits, &cls.labels)?;

    let ada = batch.flatten_for_loss(LossId::Adversarial);
    let lambda_grl = config.grl.lambda(step, config.steps);
    let l_ada = adversarial_loss(
        &mut tape,
        &nets.discriminator,
        &bound.discriminator,
        feats,
        &ada.labels,
        lambda_grl,
    )?;

    let trip = batch.flatten_for_loss(LossId::Triplet);
    let unit = tape.normalize_rows(feats, 1e-12)?;
    let l_trip = triplet_loss(&mut tape, unit, &trip.labels, weights.margin, config.mining)?;

    let sa = batch.flatten_for_loss(LossId::ScaleAlignment);
    let l_sa = match config.sa_strategy {
        SaStrategy::Pairwise => {
            let large = tape.gather_rows(logits, &sa.rows)?;
            let small = tape.gather_rows(logits, &sa.partners)?;
            scale_alignment_loss(&mut tape, large, small, &sa.labels)?
        }
        SaStrategy::AvgScore => {
            let large = tape.gather_rows(logits, &sa.rows)?;
            let small = tape.gather_rows(logits, &sa.partners)?;
            avg_score_alignment_loss(&mut tape, large, small, &sa.labels)?
        }
        SaStrategy::Feature => {
            let large = tape.gather_rows(feats, &sa.rows)?;
            let small = tape.gather_rows(feats, &sa.partners)?;
            feature_alignment_loss(&mut tape, &nets.task, &bound.task, large, small, &sa.labels)?
        }
    };

    let total = composite_loss(&mut tape, &weights, l_cls, l_ada, l_trip, l_sa)?;
    let metrics = StepMetrics {
        l_cls: tape.value(l_cls).item(),
        l_ada: tape.value(l_ada).item(),
        l_trip: tape.value(l_trip).item(),
        l_sa: tape.value(l_sa).item(),
        l_total: tape.value(total).item(),
    };
    for (term, value) in [
        ("l_cls", metrics.l_cls),
        ("l_ada", metrics.l_ada),
        ("l_trip", metrics.l_trip),
        ("l_sa", metrics.l_sa),
        ("l_total", metrics.l_total),
    ] {
        if !value.is_finite() {
            return Err(TrainError::NonFinite { step, term, value });
        }
    }

    tape.backward(total)?;
    let grads: Vec<Tensor> = bound.all().map(|v| tape.grad_tensor(v)).collect();
    let mut params: Vec<&mut Tensor> = nets.params_mut().map(|p| &mut p.value).collect();
    adam_update(&mut params, &grads, opt, config.lr)?;
    Ok(metrics)
}

/// Top-left corners of the evaluation crops: the four canvas corners
/// (deduplicated when the crop spans a whole side).
pub fn eval_crop_origins(height: usize, width: usize, crop: usize) -> Vec<(usize, usize)> {
    let mut ys = vec![0, height - crop];
    let mut xs = vec![0, width - crop];
    ys.dedup();
    xs.dedup();
    ys.iter()
        .flat_map(|&y| xs.iter().map(move |&x| (y, x)))
        .collect()
}

const SCORE_CHUNK: usize = 64;

/// Recapture score of each canvas: the mean class-1 probability over its
/// evaluation crops.
pub fn score_canvases(nets: &Networks, canvases: &[&Image], crop: usize) -> Result<Vec<f64>> {
    let mut crops = Vec::new();
    let mut owners = Vec::new();
    for (i, img) in canvases.iter().enumerate() {
        for (y, x) in eval_crop_origins(img.height(), img.width(), crop) {
            crops.push(img.crop(y, x, crop, crop));
            owners.push(i);
        }
    }
    let mut crop_scores = Vec::with_capacity(crops.len());
    for chunk in crops.chunks(SCORE_CHUNK) {
        crop_scores.extend(nets.recapture_scores(batch_tensor(chunk))?);
    }
    let mut sums = vec![0.0; canvases.len()];
    let mut counts = vec![0usize; canvases.len()];
    for (s, &o) in crop_scores.iter().zip(&owners) {
        sums[o] += s;
        counts[o] += 1;
    }
    Ok(sums.iter().zip(&counts).map(|(s, &c)| s / c as f64).collect())
}

/// Mean symmetric KL between the class distributions the networks assign to
/// each evaluation crop and to its `factor`-times degraded copy.
pub fn scale_divergence(nets: &Networks, canvases: &[&Image], crop: usize, factor: usize) -> Result<f64> {
    let mut large = Vec::new();
    let mut small = Vec::new();
    for img in canvases {
        for (y, x) in eval_crop_origins(img.height(), img.width(), crop) {
            let c = img.crop(y, x, crop, crop);
            small.push(c.downsample(factor).resize_bilinear(crop, crop));
            large.push(c);
        }
    }
    if large.is_empty() {
        return Err(TrainError::Config("no canvases to compare".into()));
    }
    let mut total = 0.0;
    for (a, b) in large.chunks(SCORE_CHUNK).zip(small.chunks(SCORE_CHUNK)) {
        let pa = nets.recapture_scores(batch_tensor(a))?;
        let pb = nets.recapture_scores(batch_tensor(b))?;
        for (p, q) in pa.iter().zip(&pb) {
            let p = ScoreDistribution::new(&[1.0 - p, *p])?;
            let q = ScoreDistribution::new(&[1.0 - q, *q])?;
            total += symmetric_kl(&p, &q);
        }
    }
    Ok(total / large.len() as f64)
}

/// Training and validation indices of one source domain.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DomainSplit {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
}

/// Holds out `fraction` of every class (at least one sample, never all).
pub fn stratified_split(corpus: &DomainCorpus, fraction: f64, seed: u64, domain: usize) -> DomainSplit {
    let mut rng = stream_rng(seed ^ (domain as u64).wrapping_mul(0x9E37_79B9), STREAM_SPLIT);
    let mut split = DomainSplit {
        train: Vec::new(),
        val: Vec::new(),
    };
    for class in 0..2 {
        let mut idx: Vec<usize> = (0..corpus.len()).filter(|&i| corpus.labels[i] == class).collect();
        idx.shuffle(&mut rng);
        let k = ((idx.len() as f64 * fraction).round() as usize)
            .max(1)
            .min(idx.len().saturating_sub(1));
        split.val.extend_from_slice(&idx[..k]);
        split.train.extend_from_slice(&idx[k..]);
    }
    split.train.sort_unstable();
    split.val.sort_unstable();
    split
}

/// One row per step; validation columns only on validation steps.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub step: usize,
    pub metrics: StepMetrics,
    pub val_auc: Option<f64>,
    pub val_hter: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricTrace {
    /// Weights actually used, after ablation switches.
    pub weights: LossWeights,
    pub rows: Vec<TraceRow>,
}

pub const TRACE_HEADER: &str = "step,l_cls,l_ada,l_trip,l_sa,l_total,val_auc,val_hter";

impl MetricTrace {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(TRACE_HEADER);
        out.push('\n');
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for r in &self.rows {
            let m = r.metrics;
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                r.step,
                m.l_cls,
                m.l_ada,
                m.l_trip,
                m.l_sa,
                m.l_total,
                opt(r.val_auc),
                opt(r.val_hter)
            );
        }
        out
    }
}

/// Scores and labels of the pooled source validation split.
#[derive(Debug, Clone, PartialEq)]
pub struct ValidationScores {
    pub scores: Vec<f64>,
    pub labels: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct TrainingOutcome {
    /// Networks at the best validation AUC.
    pub networks: Networks,
    pub trace: MetricTrace,
    pub best_step: usize,
    pub best_val_auc: f64,
    pub splits: Vec<DomainSplit>,
    /// Validation scores of the returned networks.
    pub validation: ValidationScores,
}

/// Scores every held-out source canvas with `nets`.
pub fn validation_scores(
    nets: &Networks,
    sources: &[&DomainCorpus],
    splits: &[DomainSplit],
    crop: usize,
) -> Result<ValidationScores> {
    let mut canvases = Vec::new();
    let mut labels = Vec::new();
    for (corpus, split) in sources.iter().zip(splits) {
        for &i in &split.val {
            canvases.push(&corpus.images[i]);
            labels.push(corpus.labels[i]);
        }
    }
    Ok(ValidationScores {
        scores: score_canvases(nets, &canvases, crop)?,
        labels,
    })
}

/// Trains fresh networks on `sources` (each one a domain; its position is the
/// domain label) and keeps the parameters with the best validation AUC
/// (the latest such step on ties).
pub fn run_training(sources: &[&DomainCorpus], config: &TrainConfig) -> Result<TrainingOutcome> {
    config.validate()?;
    if sources.is_empty() {
        return Err(TrainError::Config("no source domains".into()));
    }
    let mut init_rng = stream_rng(config.seed, STREAM_INIT);
    let mut nets = Networks::new(&config.network_spec(sources.len()), &mut init_rng)?;
    let mut opt = OptimizerState::for_params(nets.params().map(|p| p.value.shape()));

    let splits: Vec<DomainSplit> = sources
        .iter()
        .enumerate()
        .map(|(d, c)| stratified_split(c, config.val_fraction, config.seed, d))
        .collect();
    let views: Vec<SourceView> = sources
        .iter()
        .zip(&splits)
        .map(|(c, s)| SourceView {
            corpus: c,
            indices: &s.train,
        })
        .collect();
    let mut rng = stream_rng(config.seed, STREAM_SAMPLER);
    let mut sampler = BalancedSampler::new(views, config.sampler, &mut rng)?;

    let mut rows = Vec::with_capacity(config.steps);
    let mut best: Option<(f64, usize, Networks, ValidationScores)> = None;
    for step in 0..config.steps {
        let batch = sampler.next_batch(&mut rng)?;
        let metrics = train_step(&mut nets, &batch, config, &mut opt, step)?;
        let mut row = TraceRow {
            step,
            metrics,
            val_auc: None,
            val_hter: None,
        };
        if (step + 1) % config.val_every == 0 || step + 1 == config.steps {
            let val = validation_scores(&nets, sources, &splits, config.sampler.crop)?;
            let a = auc(&val.scores, &val.labels)?;
            let (h, _) = hter_at_eer(&val.scores, &val.labels, &val.scores, &val.labels)?;
            row.val_auc = Some(a);
            row.val_hter = Some(h);
            log::debug!("step {step}: loss {:.4} val auc {a:.2}", metrics.l_total);
            if best.as_ref().is_none_or(|(b, ..)| a >= *b) {
                best = Some((a, step, nets.clone(), val));
            }
        }
        rows.push(row);
    }
    let (best_val_auc, best_step, networks, validation) = best.expect("at least one validation");
    if let Some(path) = &config.checkpoint {
        networks.save(path)?;
    }
    Ok(TrainingOutcome {
        networks,
        trace: MetricTrace {
            weights: config.effective_weights(),
            rows,
        },
        best_step,
        best_val_auc,
        splits,
        validation,
    })
}
