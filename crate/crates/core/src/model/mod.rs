//! Encoder-CRF sequence labeller and the classification variant.

mod crf;
mod encoder;

use serde::{Deserialize, Serialize};

use crate::dataset::{Pose, Tag};
use crate::embedding::{positional_encoding, EmbeddingConfig, EmbeddingKind, Gcn};
use crate::error::{Error, Result};
use crate::numerics::rng::{rng_for, streams, SeededRng};
use crate::numerics::{Graph, ParamId, ParamStore, Tensor, Var};

pub use crf::{
    crf_log_partition, crf_nll, crf_nll_node, crf_score, viterbi_decode, LabelPath,
    TransitionMatrix, FORBIDDEN, NUM_LABELS,
};
pub use encoder::{multi_head_attention, Encoder, EncoderConfig, Linear, MASK_BIAS};

pub const TRANSITIONS: &str = "crf.transitions";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum HeadConfig {
    Crf,
    Classification { classes: Vec<String> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub embedding: EmbeddingConfig,
    pub encoder: EncoderConfig,
    pub head: HeadConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            embedding: EmbeddingConfig::default(),
            encoder: EncoderConfig::default(),
            head: HeadConfig::Crf,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.embedding.validate()?;
        self.encoder.validate()?;
        let h = self.embedding.output_width();
        if h != self.encoder.width {
            return Err(Error::Config(format!(
                "embedding width {h} does not match encoder width {}",
                self.encoder.width
            )));
        }
        if h % 2 == 1 {
            return Err(Error::Config(format!(
                "width {h} must be even for the positional encoding"
            )));
        }
        if let HeadConfig::Classification { classes } = &self.head {
            if classes.len() < 2 {
                return Err(Error::Config(
                    "classification needs at least two classes".into(),
                ));
            }
        }
        Ok(())
    }

    pub fn class_names(&self) -> Option<&[String]> {
        match &self.head {
            HeadConfig::Classification { classes } => Some(classes),
            HeadConfig::Crf => None,
        }
    }
}

/// Per-frame inputs: normalized poses for the graph-convolution path or
/// externally supplied vectors for the fixed path. Rows at and after `valid`
/// are padding.
#[derive(Debug, Clone, Copy)]
pub enum Features<'a> {
    Poses(&'a [Pose]),
    Fixed(&'a Tensor),
}

#[derive(Debug, Clone, Copy)]
pub struct ModelInput<'a> {
    pub features: Features<'a>,
    pub valid: usize,
}

impl<'a> ModelInput<'a> {
    pub fn poses(frames: &'a [Pose]) -> Self {
        ModelInput {
            features: Features::Poses(frames),
            valid: frames.len(),
        }
    }

    pub fn fixed(table: &'a Tensor) -> Self {
        ModelInput {
            features: Features::Fixed(table),
            valid: table.rows(),
        }
    }

    pub fn len(&self) -> usize {
        match self.features {
            Features::Poses(p) => p.len(),
            Features::Fixed(t) => t.rows(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn mask(&self) -> Vec<bool> {
        (0..self.len()).map(|t| t < self.valid).collect()
    }
}

#[derive(Debug, Clone)]
pub enum Head {
    Crf {
        emission: Linear,
        transitions: ParamId,
    },
    Classification {
        out: Linear,
        classes: usize,
    },
}

impl Head {
    pub fn init(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut SeededRng) -> Result<Self> {
        let h = cfg.encoder.width;
        Ok(match &cfg.head {
            HeadConfig::Crf => Head::Crf {
                emission: Linear::init(store, "emission", h, NUM_LABELS, rng)?,
                transitions: store.insert(TransitionMatrix::grammar().to_parameter(TRANSITIONS))?,
            },
            HeadConfig::Classification { classes } => Head::Classification {
                out: Linear::init(store, "classifier", h, classes.len(), rng)?,
                classes: classes.len(),
            },
        })
    }

    pub fn bind(store: &ParamStore, cfg: &ModelConfig) -> Result<Self> {
        let h = cfg.encoder.width;
        Ok(match &cfg.head {
            HeadConfig::Crf => Head::Crf {
                emission: Linear::bind(store, "emission", h, NUM_LABELS)?,
                transitions: store.lookup(TRANSITIONS, &[NUM_LABELS + 2, NUM_LABELS + 2])?,
            },
            HeadConfig::Classification { classes } => Head::Classification {
                out: Linear::bind(store, "classifier", h, classes.len())?,
                classes: classes.len(),
            },
        })
    }
}

/// Parameter name prefixes shared by both heads and carried over when
/// fine-tuning.
pub const BACKBONE_PREFIXES: [&str; 2] = ["gcn.", "encoder."];

pub fn is_backbone(name: &str) -> bool {
    BACKBONE_PREFIXES.iter().any(|p| name.starts_with(p))
}

/// Supervision for one sequence.
#[derive(Debug, Clone, Copy)]
pub enum Target<'a> {
    Tags(&'a [Tag]),
    Class(usize),
}

#[derive(Debug, Clone)]
pub struct Model {
    cfg: ModelConfig,
    gcn: Option<Gcn>,
    encoder: Encoder,
    head: Head,
}

impl Model {
    /// Fresh parameters drawn from the initialization stream of `seed`.
    pub fn init(store: &mut ParamStore, cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = rng_for(seed, streams::INIT);
        let gcn = match cfg.embedding.kind {
            EmbeddingKind::Gcn => Some(Gcn::init(store, &cfg.embedding, &mut rng)?),
            EmbeddingKind::Fixed => None,
        };
        let encoder = Encoder::init(store, &cfg.encoder, &mut rng)?;
        let head = Head::init(store, cfg, &mut rng)?;
        Ok(Model {
            cfg: cfg.clone(),
            gcn,
            encoder,
            head,
        })
    }

    pub fn bind(store: &ParamStore, cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let gcn = match cfg.embedding.kind {
            EmbeddingKind::Gcn => Some(Gcn::bind(store, &cfg.embedding)?),
            EmbeddingKind::Fixed => None,
        };
        Ok(Model {
            cfg: cfg.clone(),
            gcn,
            encoder: Encoder::bind(store, &cfg.encoder)?,
            head: Head::bind(store, cfg)?,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn head(&self) -> &Head {
        &self.head
    }

    /// Frame embeddings plus positional encoding (`T × H`).
    pub fn embed(&self, g: &mut Graph, store: &ParamStore, input: &ModelInput) -> Result<Var> {
        if input.valid == 0 || input.valid > input.len() {
            return Err(Error::Data(format!(
                "{} valid frames of {}",
                input.valid,
                input.len()
            )));
        }
        let x = match (input.features, &self.gcn) {
            (Features::Poses(frames), Some(gcn)) => gcn.forward(g, store, frames)?,
            (Features::Fixed(t), None) => {
                if t.cols() != self.cfg.embedding.fixed_width {
                    return Err(Error::Data(format!(
                        "fixed embeddings have width {}, expected {}",
                        t.cols(),
                        self.cfg.embedding.fixed_width
                    )));
                }
                g.constant(t.clone())
            }
            (Features::Poses(_), None) => {
                return Err(Error::Usage(
                    "model expects fixed embeddings, got poses".into(),
                ));
            }
            (Features::Fixed(_), Some(_)) => {
                return Err(Error::Usage(
                    "model expects poses, got fixed embeddings".into(),
                ));
            }
        };
        let pe = g.constant(positional_encoding(input.len(), self.cfg.encoder.width)?);
        g.add(x, pe)
    }

    /// Encoder output for every frame.
    pub fn represent(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        input: &ModelInput,
        dropout: Option<&mut SeededRng>,
    ) -> Result<Var> {
        let x = self.embed(g, store, input)?;
        self.encoder.forward(g, store, x, &input.mask(), dropout)
    }

    /// Emission scores (`T × 4`) for the CRF head.
    pub fn emissions(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        input: &ModelInput,
        dropout: Option<&mut SeededRng>,
    ) -> Result<Var> {
        let Head::Crf { emission, .. } = &self.head else {
            return Err(Error::Usage("emissions need a CRF head".into()));
        };
        let r = self.represent(g, store, input, dropout)?;
        emit(g, store, emission, r)
    }

    /// Class logits (`1 × classes`) for the classification head.
    pub fn class_logits(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        input: &ModelInput,
        dropout: Option<&mut SeededRng>,
    ) -> Result<Var> {
        let Head::Classification { out, .. } = &self.head else {
            return Err(Error::Usage(
                "class logits need a classification head".into(),
            ));
        };
        let r = self.represent(g, store, input, dropout)?;
        classify_forward(g, store, out, r, &input.mask())
    }

    /// CRF negative log-likelihood per valid frame, or cross-entropy for the
    /// classification head.
    pub fn loss(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        input: &ModelInput,
        target: Target,
        dropout: Option<&mut SeededRng>,
    ) -> Result<Var> {
        match (&self.head, target) {
            (Head::Crf { transitions, .. }, Target::Tags(tags)) => {
                if tags.len() < input.valid {
                    return Err(Error::Data(format!(
                        "{} gold tags for {} valid frames",
                        tags.len(),
                        input.valid
                    )));
                }
                let c = self.emissions(g, store, input, dropout)?;
                let c = if input.valid < input.len() {
                    g.slice_rows(c, 0, input.valid)?
                } else {
                    c
                };
                let a = g.param(store, *transitions);
                let gold: Vec<usize> = tags[..input.valid].iter().map(|t| t.index()).collect();
                let forbidden = store.get(*transitions).frozen_entries.as_deref();
                let nll = crf_nll_node(g, c, a, &gold, forbidden)?;
                Ok(g.scale(nll, 1.0 / input.valid as f64))
            }
            (Head::Classification { classes, .. }, Target::Class(y)) => {
                if y >= *classes {
                    return Err(Error::Data(format!("class {y} outside 0..{classes}")));
                }
                let logits = self.class_logits(g, store, input, dropout)?;
                cross_entropy(g, logits, y)
            }
            _ => Err(Error::Usage("target does not match the model head".into())),
        }
    }

    /// Viterbi path over the valid frames.
    pub fn decode(&self, store: &ParamStore, input: &ModelInput) -> Result<LabelPath> {
        let Head::Crf { transitions, .. } = &self.head else {
            return Err(Error::Usage("decoding needs a CRF head".into()));
        };
        let mut g = Graph::new();
        let c = self.emissions(&mut g, store, input, None)?;
        let c = g.slice_rows(c, 0, input.valid)?;
        Ok(viterbi_decode(g.value(c), &store.get(*transitions).tensor))
    }

    pub fn predict_tags(&self, store: &ParamStore, input: &ModelInput) -> Result<Vec<Tag>> {
        Ok(self.decode(store, input)?.tags())
    }

    /// Logits and the predicted class (ties go to the lowest index).
    pub fn classify(&self, store: &ParamStore, input: &ModelInput) -> Result<(Vec<f64>, usize)> {
        let mut g = Graph::new();
        let l = self.class_logits(&mut g, store, input, None)?;
        let logits = g.value(l).data().to_vec();
        Ok((logits.clone(), argmax(&logits)))
    }
}

/// Index of the largest value; the first one wins ties.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in xs.iter().enumerate() {
        if *x > xs[best] {
            best = i;
        }
    }
    best
}

/// Affine projection of representations onto label scores.
pub fn emit(g: &mut Graph, store: &ParamStore, emission: &Linear, reps: Var) -> Result<Var> {
    emission.forward(g, store, reps)
}

/// Mean of the valid rows of `reps` followed by an affine map to logits.
pub fn classify_forward(
    g: &mut Graph,
    store: &ParamStore,
    out: &Linear,
    reps: Var,
    mask: &[bool],
) -> Result<Var> {
    let valid = mask.iter().filter(|m| **m).count();
    if valid == 0 {
        return Err(Error::Data(
            "classification needs at least one valid frame".into(),
        ));
    }
    if mask.len() != g.value(reps).rows() {
        return Err(Error::shape(
            "classify_forward",
            "mask length differs from representation rows",
        ));
    }
    let weights: Vec<f64> = mask
        .iter()
        .map(|m| if *m { 1.0 / valid as f64 } else { 0.0 })
        .collect();
    let pool = g.constant(Tensor::matrix(1, mask.len(), weights)?);
    let pooled = g.matmul(pool, reps)?;
    out.forward(g, store, pooled)
}

/// `logsumexp(logits) − logits[y]` for a `1 × C` row.
pub fn cross_entropy(g: &mut Graph, logits: Var, y: usize) -> Result<Var> {
    let c = g.value(logits).cols();
    let mut onehot = Tensor::zeros(&[c, 1]);
    onehot.data_mut()[y] = 1.0;
    let pick = g.constant(onehot);
    let picked = g.matmul(logits, pick)?;
    let lse = g.logsumexp_rows(logits);
    let neg = g.scale(picked, -1.0);
    let loss = g.add(lse, neg)?;
    let flat = g.sum(loss);
    Ok(flat)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{synth::standing_pose, NUM_JOINTS};
    use crate::numerics::gradcheck::{central_difference, relative_error};
    use crate::numerics::softmax;
    use rand::Rng;

    fn small(head: HeadConfig) -> ModelConfig {
        ModelConfig {
            embedding: EmbeddingConfig {
                width: 8,
                gcn_hidden: 6,
                ..EmbeddingConfig::default()
            },
            encoder: EncoderConfig {
                layers: 2,
                width: 8,
                heads: 2,
                ffn: 12,
                dropout: 0.1,
            },
            head,
        }
    }

    fn poses(seed: u64, t: usize) -> Vec<Pose> {
        let mut rng = rng_for(seed, 0);
        let base = standing_pose();
        (0..t)
            .map(|_| {
                let mut p = base;
                p.iter_mut()
                    .flatten()
                    .for_each(|v| *v += rng.gen_range(-0.3..0.3));
                p
            })
            .collect()
    }

    fn padded(frames: &[Pose], extra: usize) -> Vec<Pose> {
        let mut out = frames.to_vec();
        out.extend(std::iter::repeat([[0.0; 2]; NUM_JOINTS]).take(extra));
        out
    }

    #[test]
    fn config_validation() {
        let mut cfg = small(HeadConfig::Crf);
        assert!(cfg.validate().is_ok());
        cfg.encoder.width = 10;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        let cfg = small(HeadConfig::Classification {
            classes: vec!["a".into()],
        });
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn emit_with_zero_weights_returns_bias() {
        let mut store = ParamStore::new();
        let lin = Linear::init(&mut store, "emission", 3, 4, &mut rng_for(0, 1)).unwrap();
        store.get_mut(lin.w).tensor.data_mut().fill(0.0);
        store
            .get_mut(lin.b)
            .tensor
            .data_mut()
            .copy_from_slice(&[1.0, -2.0, 0.5, 3.0]);
        let mut g = Graph::new();
        let r = g.constant(Tensor::full(&[5, 3], 7.0));
        let c = emit(&mut g, &store, &lin, r).unwrap();
        assert_eq!(g.value(c).shape(), &[5, 4]);
        for row in g.value(c).data().chunks(4) {
            assert_eq!(row, &[1.0, -2.0, 0.5, 3.0]);
        }
    }

    #[test]
    fn emit_gradient_matches_finite_differences() {
        let mut store = ParamStore::new();
        let lin = Linear::init(&mut store, "emission", 3, 4, &mut rng_for(0, 1)).unwrap();
        let mut rng = rng_for(1, 0);
        let reps =
            Tensor::matrix(5, 3, (0..15).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let readout =
            Tensor::matrix(5, 4, (0..20).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let eval = |s: &ParamStore, grads: bool| {
            let mut g = Graph::new();
            let r = g.constant(reps.clone());
            let c = emit(&mut g, s, &lin, r).unwrap();
            let ro = g.constant(readout.clone());
            let p = g.mul(c, ro).unwrap();
            let l = g.sum(p);
            (g.value(l).data()[0], grads.then(|| g.backward(l).unwrap()))
        };
        let grads = eval(&store, true).1.unwrap();
        for (id, p) in store.iter() {
            for i in 0..p.tensor.len() {
                let num = central_difference(&store, id, i, 1e-6, &mut |s| eval(s, false).0);
                assert!(relative_error(grads.get(id).unwrap()[i], num, 1e-6) <= 1e-6);
            }
        }
    }

    #[test]
    fn classification_logits() {
        let cfg = small(HeadConfig::Classification {
            classes: vec!["a".into(), "b".into(), "c".into()],
        });
        let mut store = ParamStore::new();
        let model = Model::init(&mut store, &cfg, 3).unwrap();
        let frames = poses(4, 9);
        let (logits, _) = model.classify(&store, &ModelInput::poses(&frames)).unwrap();
        assert!((softmax(&logits).iter().sum::<f64>() - 1.0).abs() < 1e-12);

        let long = padded(&frames, 5);
        let input = ModelInput {
            features: Features::Poses(&long),
            valid: 9,
        };
        let (pl, _) = model.classify(&store, &input).unwrap();
        for (a, b) in logits.iter().zip(&pl) {
            assert!((a - b).abs() <= 1e-9);
        }

        let Head::Classification { out, .. } = model.head().clone() else {
            unreachable!()
        };
        store.get_mut(out.w).tensor.data_mut().fill(0.0);
        store
            .get_mut(out.b)
            .tensor
            .data_mut()
            .copy_from_slice(&[0.5, 0.5, 0.25]);
        let (l, pred) = model.classify(&store, &ModelInput::poses(&frames)).unwrap();
        assert_eq!(l, vec![0.5, 0.5, 0.25]);
        assert_eq!(pred, 0);

        let input = ModelInput {
            features: Features::Poses(&long),
            valid: 0,
        };
        assert!(matches!(
            model.classify(&store, &input),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn crf_loss_ignores_padding() {
        let cfg = small(HeadConfig::Crf);
        let mut store = ParamStore::new();
        let model = Model::init(&mut store, &cfg, 5).unwrap();
        let frames = poses(6, 10);
        let tags = crate::dataset::parse_tags("OOBIIEOOOO").unwrap();
        let mut g = Graph::new();
        let l = model
            .loss(
                &mut g,
                &store,
                &ModelInput::poses(&frames),
                Target::Tags(&tags),
                None,
            )
            .unwrap();
        let base = g.value(l).data()[0];
        let base_grads = g.backward(l).unwrap();

        let long = padded(&frames, 6);
        let mut long_tags = tags.to_vec();
        long_tags.extend([Tag::O; 6]);
        let input = ModelInput {
            features: Features::Poses(&long),
            valid: 10,
        };
        let mut g = Graph::new();
        let l = model
            .loss(&mut g, &store, &input, Target::Tags(&long_tags), None)
            .unwrap();
        assert!((g.value(l).data()[0] - base).abs() <= 1e-9);
        let grads = g.backward(l).unwrap();
        for (id, _) in store.iter() {
            for (a, b) in grads
                .get(id)
                .unwrap()
                .iter()
                .zip(base_grads.get(id).unwrap())
            {
                assert!((a - b).abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn decode_is_grammatical_and_fixed_path_works() {
        let mut cfg = small(HeadConfig::Crf);
        cfg.embedding.kind = EmbeddingKind::Fixed;
        cfg.embedding.fixed_width = 8;
        let mut store = ParamStore::new();
        let model = Model::init(&mut store, &cfg, 5).unwrap();
        assert!(store.iter().all(|(_, p)| !p.name.starts_with("gcn.")));
        let table = Tensor::full(&[12, 8], 0.3);
        let tags = model
            .predict_tags(&store, &ModelInput::fixed(&table))
            .unwrap();
        assert_eq!(tags.len(), 12);
        assert!(crate::dataset::is_grammatical(&tags));
        let frames = poses(1, 12);
        assert!(matches!(
            model.predict_tags(&store, &ModelInput::poses(&frames)),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn transition_mask_is_frozen_in_store() {
        let mut store = ParamStore::new();
        Model::init(&mut store, &small(HeadConfig::Crf), 1).unwrap();
        let id = store.id(TRANSITIONS).unwrap();
        let p = store.get(id);
        assert_eq!(
            p.frozen_entries
                .as_ref()
                .unwrap()
                .iter()
                .filter(|f| **f)
                .count(),
            26
        );
        let total: usize = store.iter().map(|(_, p)| p.tensor.len()).sum();
        assert_eq!(store.trainable_count(), total - 26);
    }
}
