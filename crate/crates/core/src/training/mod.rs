//! Batching, the training and fine-tuning loops, and checkpoints.
//!
//! Each batch item gets its own tape; gradients are averaged over the batch
//! before a single Adam step. Sequence losses are already per valid frame,
//! so the batch loss is a mean of per-frame means.

mod checkpoint;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::dataset::{normalize_pose, Pose, Tag, VideoRecord, NUM_JOINTS};
use crate::embedding::{fixed_embedding_provider, EmbeddingKind, FixedEmbeddingTable};
use crate::error::{Error, Result};
use crate::model::{
    is_backbone, Features, Head, HeadConfig, Model, ModelConfig, ModelInput, Target,
};
use crate::numerics::rng::{rng_at, rng_for, streams};
use crate::numerics::{AdamConfig, AdamState, Gradients, Graph, ParamStore, Parameter, Tensor};

pub use checkpoint::{Checkpoint, CheckpointMeta, MAGIC, VERSION};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub epochs: usize,
    pub seed: u64,
    /// Longest accepted sequence; longer records must be trimmed first.
    pub max_len: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelConfig::default(),
            batch_size: 16,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            epochs: 60,
            seed: 0,
            max_len: 512,
        }
    }
}

impl TrainConfig {
    /// Batch size 128, learning rate 1e-4, 200 epochs.
    pub fn full_scale() -> Self {
        TrainConfig {
            batch_size: 128,
            lr: 1e-4,
            epochs: 200,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.batch_size == 0 || self.max_len == 0 {
            return Err(Error::Config(
                "batch size and max length must be positive".into(),
            ));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate {} must be finite and non-negative",
                self.lr
            )));
        }
        if !(0.0..1.0).contains(&self.beta1)
            || !(0.0..1.0).contains(&self.beta2)
            || self.adam_eps <= 0.0
        {
            return Err(Error::Config(
                "Adam betas must lie in [0, 1) and eps must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ExampleFeatures {
    /// Normalized poses.
    Poses(Vec<Pose>),
    Fixed(Tensor),
}

#[derive(Debug, Clone, PartialEq)]
pub enum ExampleTarget {
    Tags(Vec<Tag>),
    Class(usize),
}

/// A model-ready sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub video_id: String,
    pub category: String,
    pub fps: f64,
    pub features: ExampleFeatures,
    pub target: ExampleTarget,
}

impl Example {
    pub fn len(&self) -> usize {
        match &self.features {
            ExampleFeatures::Poses(p) => p.len(),
            ExampleFeatures::Fixed(t) => t.rows(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn input(&self) -> ModelInput<'_> {
        match &self.features {
            ExampleFeatures::Poses(p) => ModelInput::poses(p),
            ExampleFeatures::Fixed(t) => ModelInput::fixed(t),
        }
    }

    pub fn target(&self) -> Target<'_> {
        match &self.target {
            ExampleTarget::Tags(t) => Target::Tags(t),
            ExampleTarget::Class(c) => Target::Class(*c),
        }
    }

    pub fn gold_tags(&self) -> Option<&[Tag]> {
        match &self.target {
            ExampleTarget::Tags(t) => Some(t),
            ExampleTarget::Class(_) => None,
        }
    }
}

/// Normalizes poses (or looks up fixed embeddings) and derives targets for
/// the configured head. Classification classes are matched by category name.
pub fn prepare_examples(
    records: &[VideoRecord],
    cfg: &ModelConfig,
    fixed: Option<&FixedEmbeddingTable>,
) -> Result<Vec<Example>> {
    records
        .iter()
        .map(|r| {
            let features = match cfg.embedding.kind {
                EmbeddingKind::Gcn => ExampleFeatures::Poses(normalize_pose(&r.pose)?.frames),
                EmbeddingKind::Fixed => {
                    let table = fixed.ok_or_else(|| {
                        Error::Usage("fixed embeddings need an embedding table".into())
                    })?;
                    ExampleFeatures::Fixed(fixed_embedding_provider(
                        &r.pose,
                        table,
                        cfg.embedding.fixed_width,
                    )?)
                }
            };
            let target = match &cfg.head {
                HeadConfig::Crf => ExampleTarget::Tags(r.tags().into_inner()),
                HeadConfig::Classification { classes } => {
                    ExampleTarget::Class(classes.iter().position(|c| *c == r.category).ok_or_else(
                        || Error::Data(format!("{}: unknown class {:?}", r.video_id, r.category)),
                    )?)
                }
            };
            Ok(Example {
                video_id: r.video_id.clone(),
                category: r.category.clone(),
                fps: r.fps(),
                features,
                target,
            })
        })
        .collect()
}

/// One right-padded sequence of a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchItem {
    pub example: usize,
    pub features: ExampleFeatures,
    pub mask: Vec<bool>,
    pub target: ExampleTarget,
}

impl BatchItem {
    pub fn valid(&self) -> usize {
        self.mask.iter().filter(|m| **m).count()
    }

    pub fn input(&self) -> ModelInput<'_> {
        let features = match &self.features {
            ExampleFeatures::Poses(p) => Features::Poses(p),
            ExampleFeatures::Fixed(t) => Features::Fixed(t),
        };
        ModelInput {
            features,
            valid: self.valid(),
        }
    }

    pub fn target(&self) -> Target<'_> {
        match &self.target {
            ExampleTarget::Tags(t) => Target::Tags(t),
            ExampleTarget::Class(c) => Target::Class(*c),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub items: Vec<BatchItem>,
    pub len: usize,
}

/// Shuffles example indices with the epoch's stream and right-pads each
/// batch to its longest member: zero poses (or zero rows), `mask = false`,
/// gold tags padded with `O`.
pub fn make_batches(
    examples: &[Example],
    batch_size: usize,
    max_len: usize,
    seed: u64,
    epoch: u64,
) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    if let Some(e) = examples.iter().find(|e| e.len() > max_len) {
        return Err(Error::Data(format!(
            "{} has {} frames, more than the maximum {max_len}; trim or augment it first",
            e.video_id,
            e.len()
        )));
    }
    let mut order: Vec<usize> = (0..examples.len()).collect();
    order.shuffle(&mut rng_at(seed, streams::SHUFFLE, epoch));
    Ok(order
        .chunks(batch_size)
        .map(|chunk| {
            let len = chunk.iter().map(|&i| examples[i].len()).max().unwrap_or(0);
            let items = chunk.iter().map(|&i| pad(&examples[i], i, len)).collect();
            Batch { items, len }
        })
        .collect())
}

fn pad(e: &Example, index: usize, len: usize) -> BatchItem {
    let n = e.len();
    let features = match &e.features {
        ExampleFeatures::Poses(p) => {
            let mut p = p.clone();
            p.resize(len, [[0.0; 2]; NUM_JOINTS]);
            ExampleFeatures::Poses(p)
        }
        ExampleFeatures::Fixed(t) => {
            let mut data = t.data().to_vec();
            data.resize(len * t.cols(), 0.0);
            ExampleFeatures::Fixed(Tensor::matrix(len, t.cols(), data).expect("padded shape"))
        }
    };
    let target = match &e.target {
        ExampleTarget::Tags(t) => {
            let mut t = t.clone();
            t.resize(len, Tag::O);
            ExampleTarget::Tags(t)
        }
        ExampleTarget::Class(c) => ExampleTarget::Class(*c),
    };
    BatchItem {
        example: index,
        features,
        mask: (0..len).map(|t| t < n).collect(),
        target,
    }
}

/// Mean loss and averaged gradients of one batch.
pub fn batch_gradients(
    model: &Model,
    store: &ParamStore,
    batch: &Batch,
    mut dropout: Option<&mut crate::numerics::rng::SeededRng>,
) -> Result<(f64, Gradients)> {
    let mut grads = Gradients::zeros_like(store);
    let mut total = 0.0;
    let scale = 1.0 / batch.items.len() as f64;
    for item in &batch.items {
        let mut g = Graph::new();
        let loss = model.loss(
            &mut g,
            store,
            &item.input(),
            item.target(),
            dropout.as_deref_mut(),
        )?;
        total += g.value(loss).data()[0];
        grads.accumulate(&g.backward(loss)?, scale);
    }
    Ok((total * scale, grads))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    /// 1-based epoch number.
    pub epoch: usize,
    pub loss: f64,
}

/// Returned by the per-epoch callback.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Control {
    Continue,
    Stop,
}

pub type EpochCallback<'a> = dyn FnMut(&EpochReport, &Model, &ParamStore) -> Result<Control> + 'a;

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    pub checkpoint: Checkpoint,
}

/// Trains a freshly initialized model.
pub fn train(
    examples: &[Example],
    cfg: &TrainConfig,
    on_epoch: &mut EpochCallback,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut store = ParamStore::new();
    let model = Model::init(&mut store, &cfg.model, cfg.seed)?;
    run(examples, cfg, store, model, on_epoch)
}

/// Copies the embedding and encoder parameters of `base`, initializes a new
/// head from `cfg.model.head`, and trains from epoch 0 with every parameter
/// trainable.
pub fn fine_tune(
    base: &Checkpoint,
    examples: &[Example],
    cfg: &TrainConfig,
    on_epoch: &mut EpochCallback,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let store = transfer_backbone(base, &cfg.model)?;
    let model = Model::bind(&store, &cfg.model)?;
    run(examples, cfg, store, model, on_epoch)
}

/// Backbone parameters from `base` plus a freshly initialized head.
pub fn transfer_backbone(base: &Checkpoint, cfg: &ModelConfig) -> Result<ParamStore> {
    cfg.validate()?;
    let mut store = ParamStore::new();
    for (_, p) in base.store.iter().filter(|(_, p)| is_backbone(&p.name)) {
        store.insert(Parameter {
            name: p.name.clone(),
            tensor: p.tensor.clone(),
            trainable: true,
            frozen_entries: None,
        })?;
    }
    // Validates backbone shapes against the new configuration before the head
    // is added, so mismatches surface as compatibility errors.
    let mut probe = store.clone();
    let mut rng = rng_for(base.meta.seed, streams::HEAD_REINIT);
    Head::init(&mut probe, cfg, &mut rng)?;
    Model::bind(&probe, cfg)?;
    let extra = probe.len() - store.len();
    let expected = base
        .store
        .iter()
        .filter(|(_, p)| is_backbone(&p.name))
        .count();
    if store.len() != expected || extra == 0 {
        return Err(Error::Incompatible(
            "checkpoint backbone is incomplete".into(),
        ));
    }
    Ok(probe)
}

fn run(
    examples: &[Example],
    cfg: &TrainConfig,
    mut store: ParamStore,
    model: Model,
    on_epoch: &mut EpochCallback,
) -> Result<TrainOutcome> {
    if examples.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    let mut adam = AdamState::new(&store, cfg.adam());
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let batches = make_batches(
            examples,
            cfg.batch_size,
            cfg.max_len,
            cfg.seed,
            epoch as u64,
        )?;
        let mut dropout = rng_at(cfg.seed, streams::DROPOUT, epoch as u64);
        let mut sum = 0.0;
        for (b, batch) in batches.iter().enumerate() {
            let (loss, grads) = batch_gradients(&model, &store, batch, Some(&mut dropout))?;
            if !loss.is_finite() || !grads.all_finite() {
                return Err(Error::Diverged {
                    epoch: epoch + 1,
                    batch: b,
                    loss,
                });
            }
            adam.step(&mut store, &grads)?;
            sum += loss;
        }
        let report = EpochReport {
            epoch: epoch + 1,
            loss: sum / batches.len() as f64,
        };
        history.push(report.loss);
        if on_epoch(&report, &model, &store)? == Control::Stop {
            break;
        }
    }
    let checkpoint = Checkpoint {
        meta: CheckpointMeta {
            config: cfg.clone(),
            seed: cfg.seed,
            epoch: history.len(),
            loss_history: history,
        },
        store,
    };
    Ok(TrainOutcome { model, checkpoint })
}

/// Callback that never stops early.
pub fn no_callback(_: &EpochReport, _: &Model, _: &ParamStore) -> Result<Control> {
    Ok(Control::Continue)
}

/// Predicted tags for each example, in order.
pub fn predict_tags(
    model: &Model,
    store: &ParamStore,
    examples: &[Example],
) -> Result<Vec<Vec<Tag>>> {
    examples
        .iter()
        .map(|e| model.predict_tags(store, &e.input()))
        .collect()
}

/// Percentage of examples whose predicted class equals the target.
pub fn classification_accuracy(
    model: &Model,
    store: &ParamStore,
    examples: &[Example],
) -> Result<f64> {
    if examples.is_empty() {
        return Ok(0.0);
    }
    let mut hits = 0;
    for e in examples {
        let ExampleTarget::Class(y) = e.target else {
            return Err(Error::Usage(
                "classification accuracy needs class targets".into(),
            ));
        };
        if model.classify(store, &e.input())?.1 == y {
            hits += 1;
        }
    }
    Ok(100.0 * hits as f64 / examples.len() as f64)
}

/// Seeded split into (train, validation) index lists; the validation share
/// is `round(n × fraction)`.
pub fn split_indices(n: usize, fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng_for(seed, streams::SPLIT));
    let n_val = ((n as f64) * fraction).round() as usize;
    let val = order[..n_val.min(n)].to_vec();
    let train = order[n_val.min(n)..].to_vec();
    (train, val)
}
