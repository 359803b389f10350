//! The three networks: feature generator `G`, domain discriminator `D`
//! (reached through a gradient reversal layer) and task network `T`.

mod checkpoint;

pub use checkpoint::{read_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

use crate::tensor::{Tape, Tensor, TensorError, Var};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("expected images of shape [batch, {channels}, {size}, {size}], got {got:?}")]
    InputShape {
        channels: usize,
        size: usize,
        got: Vec<usize>,
    },
    #[error("discriminator has {have} outputs but the experiment has {want} source domains")]
    DomainCount { have: usize, want: usize },
    #[error("invalid architecture: {0}")]
    Architecture(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, ModelError>;

/// A named trainable tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
}

pub trait Module {
    fn params(&self) -> &[Param];
    fn params_mut(&mut self) -> &mut [Param];

    /// Records every parameter as a gradient-tracking leaf on `tape`.
    fn bind(&self, tape: &mut Tape) -> Vec<Var> {
        self.params()
            .iter()
            .map(|p| tape.param(p.value.clone()))
            .collect()
    }

    fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.value.numel()).sum()
    }
}

fn kaiming(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor {
    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| normal.sample(rng)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape product")
}

fn param(name: String, value: Tensor) -> Param {
    Param { name, value }
}

/// Backbone layout: conv(3x3) + relu + 2x2 max-pool per block, then global
/// average pooling and a dense projection to the embedding.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BackboneSpec {
    pub input_size: usize,
    pub in_channels: usize,
    pub channels: Vec<usize>,
    pub embed_dim: usize,
}

impl Default for BackboneSpec {
    fn default() -> Self {
        BackboneSpec {
            input_size: 32,
            in_channels: 3,
            channels: vec![16, 32, 64, 128],
            embed_dim: 128,
        }
    }
}

impl BackboneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() || self.channels.contains(&0) {
            return Err(ModelError::Architecture(
                "need at least one block with a positive width".into(),
            ));
        }
        if self.embed_dim == 0 || self.in_channels == 0 {
            return Err(ModelError::Architecture("zero-sized embedding or input".into()));
        }
        let shrink = 1usize << self.channels.len();
        if self.input_size < shrink {
            return Err(ModelError::Architecture(format!(
                "input {} too small for {} pooling blocks",
                self.input_size,
                self.channels.len()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureGenerator {
    spec: BackboneSpec,
    params: Vec<Param>,
}

impl FeatureGenerator {
    pub fn new(spec: BackboneSpec, rng: &mut impl Rng) -> Result<Self> {
        spec.validate()?;
        let mut params = Vec::new();
        let mut c_in = spec.in_channels;
        for (i, &c_out) in spec.channels.iter().enumerate() {
            params.push(param(
                format!("g.block{i}.w"),
                kaiming(&[c_out, c_in, 3, 3], c_in * 9, rng),
            ));
            params.push(param(format!("g.block{i}.b"), Tensor::zeros(&[c_out])));
            c_in = c_out;
        }
        params.push(param(
            "g.proj.w".into(),
            kaiming(&[c_in, spec.embed_dim], c_in, rng),
        ));
        params.push(param("g.proj.b".into(), Tensor::zeros(&[spec.embed_dim])));
        Ok(FeatureGenerator { spec, params })
    }

    pub fn spec(&self) -> &BackboneSpec {
        &self.spec
    }

    pub fn embed_dim(&self) -> usize {
        self.spec.embed_dim
    }

    /// Maps `[batch, 3, H, W]` images to `[batch, embed_dim]` features.
    pub fn embed(&self, tape: &mut Tape, vars: &[Var], images: Var) -> Result<Var> {
        let s = tape.shape(images);
        let size = self.spec.input_size;
        if s.len() != 4 || s[1] != self.spec.in_channels || s[2] != size || s[3] != size {
            return Err(ModelError::InputShape {
                channels: self.spec.in_channels,
                size,
                got: s.to_vec(),
            });
        }
        let mut x = images;
        for block in 0..self.spec.channels.len() {
            let (w, b) = (vars[2 * block], vars[2 * block + 1]);
            x = tape.conv2d(x, w, b, 1, 1)?;
            x = tape.relu(x);
            x = tape.max_pool2d(x, 2, 2)?;
        }
        let pooled = tape.global_avg_pool(x)?;
        let n = vars.len();
        Ok(tape.dense(pooled, vars[n - 2], vars[n - 1])?)
    }
}

impl Module for FeatureGenerator {
    fn params(&self) -> &[Param] {
        &self.params
    }
    fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }
}

/// Two dense layers with a relu in between, one logit per source domain.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainDiscriminator {
    domains: usize,
    params: Vec<Param>,
}

impl DomainDiscriminator {
    pub fn new(embed_dim: usize, hidden: usize, domains: usize, rng: &mut impl Rng) -> Result<Self> {
        if domains < 2 || hidden == 0 {
            return Err(ModelError::Architecture(format!(
                "discriminator needs >= 2 domains and a hidden layer (got {domains}, {hidden})"
            )));
        }
        let params = vec![
            param("d.fc1.w".into(), kaiming(&[embed_dim, hidden], embed_dim, rng)),
            param("d.fc1.b".into(), Tensor::zeros(&[hidden])),
            param("d.fc2.w".into(), kaiming(&[hidden, domains], hidden, rng)),
            param("d.fc2.b".into(), Tensor::zeros(&[domains])),
        ];
        Ok(DomainDiscriminator { domains, params })
    }

    pub fn domains(&self) -> usize {
        self.domains
    }

    pub fn expect_domains(&self, want: usize) -> Result<()> {
        if self.domains != want {
            return Err(ModelError::DomainCount {
                have: self.domains,
                want,
            });
        }
        Ok(())
    }

    /// Domain logits for `feats`, with the gradient reversal layer in front:
    /// gradients flowing back into `feats` are scaled by `-lambda_grl`.
    pub fn discriminate(&self, tape: &mut Tape, vars: &[Var], feats: Var, lambda_grl: f64) -> Result<Var> {
        let reversed = tape.grad_reverse(feats, lambda_grl);
        self.logits(tape, vars, reversed)
    }

    /// Domain logits without the reversal layer.
    pub fn logits(&self, tape: &mut Tape, vars: &[Var], feats: Var) -> Result<Var> {
        let h = tape.dense(feats, vars[0], vars[1])?;
        let h = tape.relu(h);
        Ok(tape.dense(h, vars[2], vars[3])?)
    }
}

impl Module for DomainDiscriminator {
    fn params(&self) -> &[Param] {
        &self.params
    }
    fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }
}

/// Number of classes: single capture (0) and recapture (1).
pub const NUM_CLASSES: usize = 2;

/// Single dense layer from the embedding to the two class logits.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskNetwork {
    params: Vec<Param>,
}

impl TaskNetwork {
    pub fn new(embed_dim: usize, rng: &mut impl Rng) -> Self {
        TaskNetwork {
            params: vec![
                param("t.fc.w".into(), kaiming(&[embed_dim, NUM_CLASSES], embed_dim, rng)),
                param("t.fc.b".into(), Tensor::zeros(&[NUM_CLASSES])),
            ],
        }
    }

    pub fn classify(&self, tape: &mut Tape, vars: &[Var], feats: Var) -> Result<Var> {
        Ok(tape.dense(feats, vars[0], vars[1])?)
    }
}

impl Module for TaskNetwork {
    fn params(&self) -> &[Param] {
        &self.params
    }
    fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NetworkSpec {
    pub backbone: BackboneSpec,
    pub disc_hidden: usize,
    pub domains: usize,
}

impl NetworkSpec {
    pub fn with_domains(domains: usize) -> Self {
        NetworkSpec {
            backbone: BackboneSpec::default(),
            disc_hidden: 64,
            domains,
        }
    }
}

/// `G`, `D` and `T` together, as trained and checkpointed.
#[derive(Debug, Clone, PartialEq)]
pub struct Networks {
    pub generator: FeatureGenerator,
    pub discriminator: DomainDiscriminator,
    pub task: TaskNetwork,
}

/// Per-network parameter handles on one tape.
#[derive(Debug, Clone)]
pub struct BoundNetworks {
    pub generator: Vec<Var>,
    pub discriminator: Vec<Var>,
    pub task: Vec<Var>,
}

impl BoundNetworks {
    pub fn all(&self) -> impl Iterator<Item = Var> + '_ {
        self.generator
            .iter()
            .chain(&self.discriminator)
            .chain(&self.task)
            .copied()
    }
}

impl Networks {
    pub fn new(spec: &NetworkSpec, rng: &mut impl Rng) -> Result<Self> {
        let generator = FeatureGenerator::new(spec.backbone.clone(), rng)?;
        let dim = spec.backbone.embed_dim;
        let discriminator = DomainDiscriminator::new(dim, spec.disc_hidden, spec.domains, rng)?;
        let task = TaskNetwork::new(dim, rng);
        Ok(Networks {
            generator,
            discriminator,
            task,
        })
    }

    pub fn bind(&self, tape: &mut Tape) -> BoundNetworks {
        BoundNetworks {
            generator: self.generator.bind(tape),
            discriminator: self.discriminator.bind(tape),
            task: self.task.bind(tape),
        }
    }

    pub fn param_count(&self) -> usize {
        self.generator.param_count() + self.discriminator.param_count() + self.task.param_count()
    }

    pub fn params(&self) -> impl Iterator<Item = &Param> {
        self.generator
            .params()
            .iter()
            .chain(self.discriminator.params())
            .chain(self.task.params())
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.generator
            .params
            .iter_mut()
            .chain(self.discriminator.params.iter_mut())
            .chain(self.task.params.iter_mut())
    }

    /// Probability of class 1 (recapture) for each image in `[batch, 3, H, W]`.
    pub fn recapture_scores(&self, images: Tensor) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let g = self.generator.params().iter().map(|p| tape.constant(p.value.clone())).collect::<Vec<_>>();
        let t = self.task.params().iter().map(|p| tape.constant(p.value.clone())).collect::<Vec<_>>();
        let x = tape.constant(images);
        let f = self.generator.embed(&mut tape, &g, x)?;
        let logits = self.task.classify(&mut tape, &t, f)?;
        let probs = tape.softmax(logits)?;
        Ok(tape.value(probs).data().chunks(NUM_CLASSES).map(|p| p[1]).collect())
    }

    /// Replaces parameter values from `(name, tensor)` records; every
    /// parameter must be present with a matching shape.
    pub fn load_params(&mut self, records: &[(String, Tensor)]) -> Result<()> {
        for p in self.params_mut() {
            let (_, t) = records
                .iter()
                .find(|(n, _)| *n == p.name)
                .ok_or_else(|| ModelError::Checkpoint(format!("missing tensor {}", p.name)))?;
            if t.shape() != p.value.shape() {
                return Err(ModelError::Checkpoint(format!(
                    "tensor {} has shape {:?}, expected {:?}",
                    p.name,
                    t.shape(),
                    p.value.shape()
                )));
            }
            p.value = t.clone();
        }
        Ok(())
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        let records: Vec<(&str, &Tensor)> = self.params().map(|p| (p.name.as_str(), &p.value)).collect();
        write_checkpoint(&mut f, &records)?;
        Ok(())
    }

    pub fn load(&mut self, path: &std::path::Path) -> Result<()> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        let records = read_checkpoint(&mut f)?;
        self.load_params(&records)
    }
}
