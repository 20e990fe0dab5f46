use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::rng::{fan_in_uniform, SeededRng};
use crate::numerics::{Graph, ParamId, ParamStore, Tensor, Var};

/// Additive score for attention to padded keys.
pub const MASK_BIAS: f64 = -1e9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub layers: usize,
    pub width: usize,
    pub heads: usize,
    pub ffn: usize,
    pub dropout: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            layers: 2,
            width: 64,
            heads: 4,
            ffn: 256,
            dropout: 0.1,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.width == 0 || self.heads == 0 || self.ffn == 0 {
            return Err(Error::Config("encoder sizes must be positive".into()));
        }
        if self.width % self.heads != 0 {
            return Err(Error::Config(format!(
                "encoder width {} is not divisible by {} heads",
                self.width, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        Ok(())
    }
}

/// Affine map `x W + b` over rows.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn init(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        out: usize,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        let w = store.add(
            format!("{name}.w"),
            fan_in_uniform(rng, fan_in, &[fan_in, out]),
        )?;
        let b = store.add(format!("{name}.b"), Tensor::zeros(&[1, out]))?;
        Ok(Linear { w, b })
    }

    pub fn bind(store: &ParamStore, name: &str, fan_in: usize, out: usize) -> Result<Self> {
        Ok(Linear {
            w: store.lookup(&format!("{name}.w"), &[fan_in, out])?,
            b: store.lookup(&format!("{name}.b"), &[1, out])?,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let (w, b) = (g.param(store, self.w), g.param(store, self.b));
        let y = g.matmul(x, w)?;
        g.add_row(y, b)
    }
}

#[derive(Debug, Clone, Copy)]
struct Norm {
    gain: ParamId,
    bias: ParamId,
}

impl Norm {
    fn init(store: &mut ParamStore, name: &str, width: usize) -> Result<Self> {
        Ok(Norm {
            gain: store.add(format!("{name}.gain"), Tensor::full(&[1, width], 1.0))?,
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[1, width]))?,
        })
    }

    fn bind(store: &ParamStore, name: &str, width: usize) -> Result<Self> {
        Ok(Norm {
            gain: store.lookup(&format!("{name}.gain"), &[1, width])?,
            bias: store.lookup(&format!("{name}.bias"), &[1, width])?,
        })
    }

    fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let (gain, bias) = (g.param(store, self.gain), g.param(store, self.bias));
        g.layer_norm(x, gain, bias)
    }
}

#[derive(Debug, Clone)]
struct Layer {
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
    norm1: Norm,
    ff1: Linear,
    ff2: Linear,
    norm2: Norm,
}

/// Post-norm Transformer encoder stack.
#[derive(Debug, Clone)]
pub struct Encoder {
    cfg: EncoderConfig,
    layers: Vec<Layer>,
}

impl Encoder {
    pub fn init(store: &mut ParamStore, cfg: &EncoderConfig, rng: &mut SeededRng) -> Result<Self> {
        cfg.validate()?;
        let h = cfg.width;
        let layers = (0..cfg.layers)
            .map(|l| {
                let p = format!("encoder.{l}");
                Ok(Layer {
                    q: Linear::init(store, &format!("{p}.query"), h, h, rng)?,
                    k: Linear::init(store, &format!("{p}.key"), h, h, rng)?,
                    v: Linear::init(store, &format!("{p}.value"), h, h, rng)?,
                    out: Linear::init(store, &format!("{p}.attn_out"), h, h, rng)?,
                    norm1: Norm::init(store, &format!("{p}.norm1"), h)?,
                    ff1: Linear::init(store, &format!("{p}.ff1"), h, cfg.ffn, rng)?,
                    ff2: Linear::init(store, &format!("{p}.ff2"), cfg.ffn, h, rng)?,
                    norm2: Norm::init(store, &format!("{p}.norm2"), h)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Encoder {
            cfg: cfg.clone(),
            layers,
        })
    }

    pub fn bind(store: &ParamStore, cfg: &EncoderConfig) -> Result<Self> {
        cfg.validate()?;
        let h = cfg.width;
        let layers = (0..cfg.layers)
            .map(|l| {
                let p = format!("encoder.{l}");
                Ok(Layer {
                    q: Linear::bind(store, &format!("{p}.query"), h, h)?,
                    k: Linear::bind(store, &format!("{p}.key"), h, h)?,
                    v: Linear::bind(store, &format!("{p}.value"), h, h)?,
                    out: Linear::bind(store, &format!("{p}.attn_out"), h, h)?,
                    norm1: Norm::bind(store, &format!("{p}.norm1"), h)?,
                    ff1: Linear::bind(store, &format!("{p}.ff1"), h, cfg.ffn)?,
                    ff2: Linear::bind(store, &format!("{p}.ff2"), cfg.ffn, h)?,
                    norm2: Norm::bind(store, &format!("{p}.norm2"), h)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Encoder {
            cfg: cfg.clone(),
            layers,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    /// Contextual representations of `x` (`T × H`). `mask[t]` marks valid
    /// frames; padded frames are excluded as attention keys. Dropout on the
    /// sublayer outputs is applied only when `dropout` supplies a generator.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        mask: &[bool],
        mut dropout: Option<&mut SeededRng>,
    ) -> Result<Var> {
        let t = g.value(x).rows();
        if g.value(x).cols() != self.cfg.width || mask.len() != t {
            return Err(Error::shape(
                "encoder_forward",
                format!(
                    "input {:?} with mask of length {}",
                    g.value(x).shape(),
                    mask.len()
                ),
            ));
        }
        let bias = g.constant(key_mask_bias(mask));
        let mut h = x;
        for layer in &self.layers {
            let q = layer.q.forward(g, store, h)?;
            let k = layer.k.forward(g, store, h)?;
            let v = layer.v.forward(g, store, h)?;
            let (ctx, _) = multi_head_attention(g, q, k, v, bias, self.cfg.heads)?;
            let a = layer.out.forward(g, store, ctx)?;
            let a = self.dropout(g, a, dropout.as_deref_mut())?;
            let r = g.add(h, a)?;
            h = layer.norm1.forward(g, store, r)?;

            let f = layer.ff1.forward(g, store, h)?;
            let f = g.relu(f);
            let f = layer.ff2.forward(g, store, f)?;
            let f = self.dropout(g, f, dropout.as_deref_mut())?;
            let r = g.add(h, f)?;
            h = layer.norm2.forward(g, store, r)?;
        }
        Ok(h)
    }

    fn dropout(&self, g: &mut Graph, x: Var, rng: Option<&mut SeededRng>) -> Result<Var> {
        let p = self.cfg.dropout;
        let Some(rng) = rng.filter(|_| p > 0.0) else {
            return Ok(x);
        };
        let shape = g.value(x).shape().to_vec();
        let mut keep = Tensor::zeros(&shape);
        let scale = 1.0 / (1.0 - p);
        keep.data_mut()
            .iter_mut()
            .for_each(|v| *v = if rng.gen::<f64>() < p { 0.0 } else { scale });
        let m = g.constant(keep);
        g.mul(x, m)
    }
}

fn key_mask_bias(mask: &[bool]) -> Tensor {
    let t = mask.len();
    let mut bias = Tensor::zeros(&[t, t]);
    for row in bias.data_mut().chunks_mut(t) {
        for (b, valid) in row.iter_mut().zip(mask) {
            if !valid {
                *b = MASK_BIAS;
            }
        }
    }
    bias
}

/// Scaled dot-product attention split across `heads` column groups. Returns
/// the concatenated context and the per-head attention weight nodes.
pub fn multi_head_attention(
    g: &mut Graph,
    q: Var,
    k: Var,
    v: Var,
    bias: Var,
    heads: usize,
) -> Result<(Var, Vec<Var>)> {
    let width = g.value(q).cols();
    let dh = width / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut contexts = Vec::with_capacity(heads);
    let mut weights = Vec::with_capacity(heads);
    for head in 0..heads {
        let (lo, hi) = (head * dh, (head + 1) * dh);
        let qh = g.slice_cols(q, lo, hi)?;
        let kh = g.slice_cols(k, lo, hi)?;
        let vh = g.slice_cols(v, lo, hi)?;
        let s = g.matmul_nt(qh, kh)?;
        let s = g.scale(s, scale);
        let s = g.add(s, bias)?;
        let w = g.softmax_rows(s);
        contexts.push(g.matmul(w, vh)?);
        weights.push(w);
    }
    let ctx = if heads == 1 {
        contexts[0]
    } else {
        g.concat_cols(&contexts)?
    };
    Ok((ctx, weights))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::gradcheck::{central_difference, relative_error};
    use crate::numerics::rng::rng_for;

    fn small() -> EncoderConfig {
        EncoderConfig {
            layers: 2,
            width: 8,
            heads: 2,
            ffn: 12,
            dropout: 0.1,
        }
    }

    fn input(t: usize, w: usize, seed: u64) -> Tensor {
        let mut rng = rng_for(seed, 0);
        let mut x = Tensor::zeros(&[t, w]);
        x.data_mut()
            .iter_mut()
            .for_each(|v| *v = rng.gen_range(-1.0..1.0));
        x
    }

    fn run(enc: &Encoder, store: &ParamStore, x: &Tensor, mask: &[bool]) -> Tensor {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let y = enc.forward(&mut g, store, xv, mask, None).unwrap();
        g.value(y).clone()
    }

    #[test]
    fn rejects_indivisible_width() {
        let cfg = EncoderConfig {
            width: 10,
            heads: 4,
            ..small()
        };
        let mut store = ParamStore::new();
        assert!(matches!(
            Encoder::init(&mut store, &cfg, &mut rng_for(0, 1)),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn output_shape_and_padding_invariance() {
        let mut store = ParamStore::new();
        let enc = Encoder::init(&mut store, &small(), &mut rng_for(1, 1)).unwrap();
        let x = input(7, 8, 2);
        let base = run(&enc, &store, &x, &[true; 7]);
        assert_eq!(base.shape(), &[7, 8]);
        let mut padded = x.data().to_vec();
        padded.extend(input(4, 8, 3).into_data());
        let mut mask = vec![true; 7];
        mask.extend([false; 4]);
        let out = run(&enc, &store, &Tensor::matrix(11, 8, padded).unwrap(), &mask);
        for i in 0..7 * 8 {
            assert!((out.data()[i] - base.data()[i]).abs() <= 1e-9);
        }
    }

    #[test]
    fn attention_rows_sum_to_one_and_skip_padding() {
        let mut g = Graph::new();
        let q = g.constant(input(5, 4, 4));
        let k = g.constant(input(5, 4, 5));
        let v = g.constant(input(5, 4, 6));
        let bias = g.constant(key_mask_bias(&[true, true, true, false, false]));
        let (_, weights) = multi_head_attention(&mut g, q, k, v, bias, 2).unwrap();
        for w in weights {
            for row in g.value(w).data().chunks(5) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
                assert_eq!(&row[3..], &[0.0, 0.0]);
            }
        }
    }

    #[test]
    fn dropout_only_when_training() {
        let mut store = ParamStore::new();
        let enc = Encoder::init(&mut store, &small(), &mut rng_for(1, 1)).unwrap();
        let x = input(6, 8, 2);
        let eval = run(&enc, &store, &x, &[true; 6]);
        assert_eq!(eval, run(&enc, &store, &x, &[true; 6]));
        let mut g = Graph::new();
        let xv = g.constant(x);
        let y = enc
            .forward(&mut g, &store, xv, &[true; 6], Some(&mut rng_for(9, 3)))
            .unwrap();
        assert_ne!(g.value(y), &eval);
    }

    #[test]
    fn parameter_gradients_match_finite_differences() {
        let mut store = ParamStore::new();
        let cfg = EncoderConfig {
            layers: 1,
            ..small()
        };
        let enc = Encoder::init(&mut store, &cfg, &mut rng_for(3, 1)).unwrap();
        let x = input(5, 8, 7);
        let mask = [true, true, true, true, false];
        let readout = input(5, 8, 8);
        let mut loss = |s: &ParamStore| -> f64 {
            let y = run(&enc, s, &x, &mask);
            y.data()
                .iter()
                .zip(readout.data())
                .map(|(a, b)| a * b)
                .sum()
        };
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let y = enc.forward(&mut g, &store, xv, &mask, None).unwrap();
        let r = g.constant(readout.clone());
        let p = g.mul(y, r).unwrap();
        let l = g.sum(p);
        let grads = g.backward(l).unwrap();
        for (id, p) in store.iter() {
            for i in (0..p.tensor.len()).step_by(3) {
                let num = central_difference(&store, id, i, 1e-5, &mut loss);
                let ana = grads.get(id).unwrap()[i];
                assert!(
                    relative_error(ana, num, 1e-6) <= 1e-5,
                    "{} [{i}]: {ana} vs {num}",
                    p.name
                );
            }
        }
    }
}
