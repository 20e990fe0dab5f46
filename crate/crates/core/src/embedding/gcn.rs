use crate::dataset::{Pose, NUM_JOINTS};
use crate::embedding::{
    build_partitions, EmbeddingConfig, PartitionedAdjacency, SkeletonGraph, PARTITIONS,
};
use crate::error::{Error, Result};
use crate::numerics::rng::{fan_in_uniform, SeededRng};
use crate::numerics::{CustomOp, Graph, ParamId, ParamStore, Tensor, Var};

/// Per-frame neighbourhood aggregation with pose-dependent adjacency.
///
/// Input rows are `frame * joints + joint`; output rows are
/// `frame * roots + root` and output column `p * C + c` holds channel `c`
/// aggregated through subset `p`.
#[derive(Debug, Clone)]
pub struct GraphAggregate {
    frames: usize,
    roots: usize,
    joints: usize,
    channels: usize,
    /// `(frame, part, root, joint, weight)` for every non-zero weight.
    entries: Vec<(usize, usize, usize, usize, f64)>,
}

impl GraphAggregate {
    /// Aggregation into every joint.
    pub fn full(parts: &[PartitionedAdjacency], channels: usize) -> Self {
        let joints = parts.first().map_or(NUM_JOINTS, |p| p.nodes);
        let mut entries = Vec::new();
        for (f, pa) in parts.iter().enumerate() {
            for (p, m) in pa.subsets.iter().enumerate() {
                for r in 0..joints {
                    for j in 0..joints {
                        let w = m[r * joints + j];
                        if w != 0.0 {
                            entries.push((f, p, r, j, w));
                        }
                    }
                }
            }
        }
        GraphAggregate {
            frames: parts.len(),
            roots: joints,
            joints,
            channels,
            entries,
        }
    }

    /// Aggregation followed by the mean over roots, collapsed into a single
    /// weight row per subset.
    pub fn pooled(parts: &[PartitionedAdjacency], channels: usize) -> Self {
        let joints = parts.first().map_or(NUM_JOINTS, |p| p.nodes);
        let mut entries = Vec::new();
        for (f, pa) in parts.iter().enumerate() {
            for (p, m) in pa.subsets.iter().enumerate() {
                for j in 0..joints {
                    let w: f64 =
                        (0..joints).map(|r| m[r * joints + j]).sum::<f64>() / joints as f64;
                    if w != 0.0 {
                        entries.push((f, p, 0, j, w));
                    }
                }
            }
        }
        GraphAggregate {
            frames: parts.len(),
            roots: 1,
            joints,
            channels,
            entries,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let c = self.channels;
        if x.shape() != [self.frames * self.joints, c] {
            return Err(Error::shape(
                "graph_aggregate",
                format!(
                    "expected [{}, {c}], got {:?}",
                    self.frames * self.joints,
                    x.shape()
                ),
            ));
        }
        let width = PARTITIONS * c;
        let mut out = vec![0.0; self.frames * self.roots * width];
        let xd = x.data();
        for &(f, p, r, j, w) in &self.entries {
            let src = &xd[(f * self.joints + j) * c..][..c];
            let dst = &mut out[(f * self.roots + r) * width + p * c..][..c];
            dst.iter_mut().zip(src).for_each(|(d, s)| *d += w * s);
        }
        Tensor::matrix(self.frames * self.roots, width, out)
    }

    pub fn apply(self, g: &mut Graph, x: Var) -> Result<Var> {
        let out = self.forward(g.value(x))?;
        Ok(g.custom(&[x], out, Box::new(self)))
    }
}

impl CustomOp for GraphAggregate {
    fn name(&self) -> &'static str {
        "graph_aggregate"
    }

    fn backward(
        &self,
        _inputs: &[&Tensor],
        _output: &Tensor,
        grad_out: &[f64],
    ) -> Vec<Option<Vec<f64>>> {
        let c = self.channels;
        let width = PARTITIONS * c;
        let mut dx = vec![0.0; self.frames * self.joints * c];
        for &(f, p, r, j, w) in &self.entries {
            let src = &grad_out[(f * self.roots + r) * width + p * c..][..c];
            let dst = &mut dx[(f * self.joints + j) * c..][..c];
            dst.iter_mut().zip(src).for_each(|(d, s)| *d += w * s);
        }
        vec![Some(dx)]
    }
}

/// Spatial graph convolution producing one vector per frame.
///
/// Hidden layers are `ReLU(Σ_p A_p X W_p + b)`; the last layer is affine and
/// followed by the mean over joints. Because the last layer is affine, the
/// mean is taken over the aggregation weights before projecting.
#[derive(Debug, Clone)]
pub struct Gcn {
    graph: SkeletonGraph,
    layers: Vec<(ParamId, ParamId)>,
    width: usize,
}

impl Gcn {
    fn dims(cfg: &EmbeddingConfig) -> Vec<(usize, usize)> {
        (0..cfg.gcn_layers)
            .map(|l| {
                let cin = if l == 0 { 2 } else { cfg.gcn_hidden };
                let cout = if l + 1 == cfg.gcn_layers {
                    cfg.width
                } else {
                    cfg.gcn_hidden
                };
                (cin, cout)
            })
            .collect()
    }

    /// Adds freshly initialized `gcn.w{l}` / `gcn.b{l}` parameters.
    pub fn init(
        store: &mut ParamStore,
        cfg: &EmbeddingConfig,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        cfg.validate()?;
        let mut layers = Vec::new();
        for (l, (cin, cout)) in Self::dims(cfg).into_iter().enumerate() {
            let fan_in = PARTITIONS * cin;
            let w = store.add(
                format!("gcn.w{l}"),
                fan_in_uniform(rng, fan_in, &[fan_in, cout]),
            )?;
            let b = store.add(format!("gcn.b{l}"), Tensor::zeros(&[1, cout]))?;
            layers.push((w, b));
        }
        Ok(Gcn {
            graph: SkeletonGraph::coco(),
            layers,
            width: cfg.width,
        })
    }

    /// Looks up existing parameters, checking their shapes.
    pub fn bind(store: &ParamStore, cfg: &EmbeddingConfig) -> Result<Self> {
        cfg.validate()?;
        let mut layers = Vec::new();
        for (l, (cin, cout)) in Self::dims(cfg).into_iter().enumerate() {
            let w = store.lookup(&format!("gcn.w{l}"), &[PARTITIONS * cin, cout])?;
            let b = store.lookup(&format!("gcn.b{l}"), &[1, cout])?;
            layers.push((w, b));
        }
        Ok(Gcn {
            graph: SkeletonGraph::coco(),
            layers,
            width: cfg.width,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// `T × H` embeddings of normalized poses.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, frames: &[Pose]) -> Result<Var> {
        if frames.is_empty() {
            return Err(Error::shape("gcn_forward", "no frames"));
        }
        let parts = frames
            .iter()
            .map(|p| build_partitions(&self.graph, p))
            .collect::<Result<Vec<_>>>()?;
        let coords: Vec<f64> = frames.iter().flatten().flatten().copied().collect();
        let mut h = g.constant(Tensor::matrix(frames.len() * NUM_JOINTS, 2, coords)?);
        let last = self.layers.len() - 1;
        for (l, &(w, b)) in self.layers.iter().enumerate() {
            let channels = g.value(h).cols();
            let agg = if l == last {
                GraphAggregate::pooled(&parts, channels)
            } else {
                GraphAggregate::full(&parts, channels)
            };
            let a = agg.apply(g, h)?;
            let (wv, bv) = (g.param(store, w), g.param(store, b));
            let z = g.matmul(a, wv)?;
            let z = g.add_row(z, bv)?;
            h = if l == last { z } else { g.relu(z) };
        }
        Ok(h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::synth::standing_pose;
    use crate::numerics::gradcheck::{central_difference, central_difference_vec, relative_error};
    use crate::numerics::rng::rng_for;
    use rand::Rng;

    fn cfg(width: usize, layers: usize, hidden: usize) -> EmbeddingConfig {
        EmbeddingConfig {
            width,
            gcn_layers: layers,
            gcn_hidden: hidden,
            ..EmbeddingConfig::default()
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
                    .for_each(|v| *v += rng.gen_range(-0.2..0.2));
                p
            })
            .collect()
    }

    fn run(gcn: &Gcn, store: &ParamStore, frames: &[Pose]) -> Tensor {
        let mut g = Graph::new();
        let v = gcn.forward(&mut g, store, frames).unwrap();
        g.value(v).clone()
    }

    /// Dense per-frame evaluation: every layer aggregates into every joint and
    /// the last layer's output is averaged over joints explicitly.
    fn dense_oracle(gcn: &Gcn, store: &ParamStore, frames: &[Pose]) -> Vec<Vec<f64>> {
        let n = NUM_JOINTS;
        frames
            .iter()
            .map(|pose| {
                let parts = build_partitions(&gcn.graph, pose).unwrap();
                let mut h: Vec<Vec<f64>> = pose.iter().map(|j| j.to_vec()).collect();
                for (l, &(w, b)) in gcn.layers.iter().enumerate() {
                    let w = &store.get(w).tensor;
                    let b = store.get(b).tensor.data();
                    let cin = h[0].len();
                    let cout = w.cols();
                    let mut next = vec![b.to_vec(); n];
                    for (p, a) in parts.subsets.iter().enumerate() {
                        for r in 0..n {
                            for m in 0..n {
                                for ci in 0..cin {
                                    for co in 0..cout {
                                        next[r][co] +=
                                            a[r * n + m] * h[m][ci] * w.get(p * cin + ci, co);
                                    }
                                }
                            }
                        }
                    }
                    if l + 1 < gcn.layers.len() {
                        next.iter_mut().flatten().for_each(|v| *v = v.max(0.0));
                    }
                    h = next;
                }
                (0..h[0].len())
                    .map(|c| h.iter().map(|row| row[c]).sum::<f64>() / n as f64)
                    .collect()
            })
            .collect()
    }

    #[test]
    fn matches_dense_oracle() {
        for layers in [1, 2, 3] {
            let mut store = ParamStore::new();
            let gcn = Gcn::init(&mut store, &cfg(6, layers, 5), &mut rng_for(1, 1)).unwrap();
            for (_, p) in store.iter() {
                assert!(p.tensor.data().iter().all(|v| v.is_finite()));
            }
            // non-zero biases so their path is exercised
            let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
            let mut rng = rng_for(2, 0);
            for id in ids {
                store
                    .get_mut(id)
                    .tensor
                    .data_mut()
                    .iter_mut()
                    .for_each(|v| *v += rng.gen_range(-0.1..0.1));
            }
            let frames = poses(layers as u64, 4);
            let got = run(&gcn, &store, &frames);
            let want = dense_oracle(&gcn, &store, &frames);
            assert_eq!(got.shape(), &[4, 6]);
            for (t, row) in want.iter().enumerate() {
                for (c, v) in row.iter().enumerate() {
                    assert!(
                        (got.get(t, c) - v).abs() < 1e-12,
                        "layers {layers} t {t} c {c}"
                    );
                }
            }
        }
    }

    #[test]
    fn zero_input_and_zero_bias_give_zero() {
        let mut store = ParamStore::new();
        let gcn = Gcn::init(&mut store, &cfg(8, 2, 8), &mut rng_for(3, 1)).unwrap();
        let out = run(&gcn, &store, &vec![[[0.0; 2]; NUM_JOINTS]; 3]);
        assert!(out.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn output_shape_follows_length() {
        let mut store = ParamStore::new();
        let gcn = Gcn::init(&mut store, &cfg(8, 2, 4), &mut rng_for(3, 1)).unwrap();
        for t in [1, 5, 13] {
            assert_eq!(run(&gcn, &store, &poses(t as u64, t)).shape(), &[t, 8]);
        }
    }

    /// Relabelling joints feeds coordinates to the wrong graph nodes, so the
    /// embedding is only meaningful in the documented COCO order.
    #[test]
    fn joint_order_matters() {
        let mut store = ParamStore::new();
        let gcn = Gcn::init(&mut store, &cfg(8, 2, 8), &mut rng_for(4, 1)).unwrap();
        let frames = poses(9, 3);
        let permuted: Vec<Pose> = frames
            .iter()
            .map(|p| {
                let mut q = *p;
                q.rotate_left(3);
                q
            })
            .collect();
        let a = run(&gcn, &store, &frames);
        let b = run(&gcn, &store, &permuted);
        let diff = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max);
        assert!(diff > 1e-6);
    }

    #[test]
    fn weight_gradients_match_finite_differences() {
        let mut store = ParamStore::new();
        let gcn = Gcn::init(&mut store, &cfg(5, 2, 4), &mut rng_for(5, 1)).unwrap();
        let frames = poses(6, 3);
        let mut rng = rng_for(7, 0);
        let readout: Vec<f64> = (0..15).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut loss = |s: &ParamStore| -> f64 {
            run(&gcn, s, &frames)
                .data()
                .iter()
                .zip(&readout)
                .map(|(a, b)| a * b)
                .sum()
        };
        let mut g = Graph::new();
        let out = gcn.forward(&mut g, &store, &frames).unwrap();
        let r = g.constant(Tensor::matrix(3, 5, readout.clone()).unwrap());
        let prod = g.mul(out, r).unwrap();
        let l = g.sum(prod);
        let grads = g.backward(l).unwrap();
        for (id, p) in store.iter() {
            for i in 0..p.tensor.len() {
                let num = central_difference(&store, id, i, 1e-6, &mut loss);
                let ana = grads.get(id).unwrap()[i];
                assert!(
                    relative_error(ana, num, 1e-6) <= 1e-5,
                    "{} [{i}]: {ana} vs {num}",
                    p.name
                );
            }
        }
    }

    #[test]
    fn aggregate_input_gradient() {
        let frames = poses(11, 2);
        let graph = SkeletonGraph::coco();
        let parts: Vec<_> = frames
            .iter()
            .map(|p| build_partitions(&graph, p).unwrap())
            .collect();
        let mut rng = rng_for(12, 0);
        let x: Vec<f64> = (0..2 * 17 * 3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        for pooled in [false, true] {
            let make = || {
                if pooled {
                    GraphAggregate::pooled(&parts, 3)
                } else {
                    GraphAggregate::full(&parts, 3)
                }
            };
            let rows = if pooled { 2 } else { 34 };
            let readout: Vec<f64> = (0..rows * 9).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let mut g = Graph::new();
            let xv = g.input(Tensor::matrix(34, 3, x.clone()).unwrap());
            let a = make().apply(&mut g, xv).unwrap();
            let r = g.constant(Tensor::matrix(rows, 9, readout.clone()).unwrap());
            let prod = g.mul(a, r).unwrap();
            let l = g.sum(prod);
            let dx = g.gradient_of(l, xv).unwrap();
            for i in 0..x.len() {
                let num = central_difference_vec(&x, i, 1e-6, &mut |v| {
                    let out = make()
                        .forward(&Tensor::matrix(34, 3, v.to_vec()).unwrap())
                        .unwrap();
                    out.data().iter().zip(&readout).map(|(a, b)| a * b).sum()
                });
                assert!(relative_error(dx.data()[i], num, 1e-6) <= 1e-6);
            }
        }
    }

    #[test]
    fn bind_checks_shapes() {
        let mut store = ParamStore::new();
        Gcn::init(&mut store, &cfg(8, 2, 4), &mut rng_for(1, 1)).unwrap();
        assert!(Gcn::bind(&store, &cfg(8, 2, 4)).is_ok());
        assert!(matches!(
            Gcn::bind(&store, &cfg(16, 2, 4)),
            Err(Error::Incompatible(_))
        ));
        assert!(matches!(
            Gcn::bind(&store, &cfg(8, 3, 4)),
            Err(Error::Incompatible(_))
        ));
    }
}
