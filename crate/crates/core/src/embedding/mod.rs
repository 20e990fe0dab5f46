//! Per-frame skeleton embeddings.
//!
//! The trainable path is a graph convolution over the COCO skeleton using
//! spatial-configuration partitioning; the alternative path plugs in frozen,
//! externally computed vectors. Either result gets a sinusoidal positional
//! encoding added before the encoder.

mod fixed;
mod gcn;
mod positional;

use serde::{Deserialize, Serialize};

use crate::dataset::{Pose, NUM_JOINTS};
use crate::error::{Error, Result};

pub use fixed::{fixed_embedding_provider, FixedEmbeddingTable, FIXED_EMBEDDING_WIDTH};
pub use gcn::{Gcn, GraphAggregate};
pub use positional::positional_encoding;

/// Number of neighbour subsets: root, centripetal, centrifugal.
pub const PARTITIONS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingKind {
    Gcn,
    Fixed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmbeddingConfig {
    pub kind: EmbeddingKind,
    /// Output width H of the GCN path.
    pub width: usize,
    pub gcn_layers: usize,
    pub gcn_hidden: usize,
    /// Width of externally supplied vectors on the fixed path.
    pub fixed_width: usize,
}

impl Default for EmbeddingConfig {
    fn default() -> Self {
        EmbeddingConfig {
            kind: EmbeddingKind::Gcn,
            width: 64,
            gcn_layers: 2,
            gcn_hidden: 64,
            fixed_width: FIXED_EMBEDDING_WIDTH,
        }
    }
}

impl EmbeddingConfig {
    /// Width of the vectors handed to the encoder.
    pub fn output_width(&self) -> usize {
        match self.kind {
            EmbeddingKind::Gcn => self.width,
            EmbeddingKind::Fixed => self.fixed_width,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.output_width() == 0 {
            return Err(Error::Config("embedding width must be positive".into()));
        }
        if self.kind == EmbeddingKind::Gcn && (self.gcn_layers == 0 || self.gcn_hidden == 0) {
            return Err(Error::Config(
                "gcn needs at least one layer and a positive hidden width".into(),
            ));
        }
        Ok(())
    }
}

/// Undirected skeleton graph.
#[derive(Debug, Clone, PartialEq)]
pub struct SkeletonGraph {
    nodes: usize,
    edges: Vec<(usize, usize)>,
}

/// COCO skeleton bones (0-based joint indices), as distributed with the COCO
/// keypoint annotations.
pub const COCO_EDGES: [(usize, usize); 19] = [
    (15, 13),
    (13, 11),
    (16, 14),
    (14, 12),
    (11, 12),
    (5, 11),
    (6, 12),
    (5, 6),
    (5, 7),
    (6, 8),
    (7, 9),
    (8, 10),
    (1, 2),
    (0, 1),
    (0, 2),
    (1, 3),
    (2, 4),
    (3, 5),
    (4, 6),
];

impl SkeletonGraph {
    pub(crate) fn new(nodes: usize, edges: Vec<(usize, usize)>) -> Result<Self> {
        if edges
            .iter()
            .any(|(a, b)| *a >= nodes || *b >= nodes || a == b)
        {
            return Err(Error::Config(
                "edge endpoint out of range or self-loop".into(),
            ));
        }
        let g = SkeletonGraph { nodes, edges };
        if !g.is_connected() {
            return Err(Error::Config("skeleton graph is not connected".into()));
        }
        Ok(g)
    }

    pub fn coco() -> Self {
        SkeletonGraph::new(NUM_JOINTS, COCO_EDGES.to_vec()).expect("COCO skeleton is connected")
    }

    pub fn nodes(&self) -> usize {
        self.nodes
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    fn is_connected(&self) -> bool {
        if self.nodes == 0 {
            return false;
        }
        let mut seen = vec![false; self.nodes];
        let mut stack = vec![0];
        seen[0] = true;
        while let Some(n) = stack.pop() {
            for &(a, b) in &self.edges {
                for (x, y) in [(a, b), (b, a)] {
                    if x == n && !seen[y] {
                        seen[y] = true;
                        stack.push(y);
                    }
                }
            }
        }
        seen.into_iter().all(|s| s)
    }

    /// `A + I` as a dense row-major matrix.
    pub fn augmented_adjacency(&self) -> Vec<f64> {
        let n = self.nodes;
        let mut a = vec![0.0; n * n];
        for i in 0..n {
            a[i * n + i] = 1.0;
        }
        for &(x, y) in &self.edges {
            a[x * n + y] = 1.0;
            a[y * n + x] = 1.0;
        }
        a
    }

    /// `D⁻¹ (A + I)`: row `r` averages over `r` and its neighbours.
    pub fn normalized_adjacency(&self) -> Vec<f64> {
        let n = self.nodes;
        let mut a = self.augmented_adjacency();
        for row in a.chunks_mut(n) {
            let deg: f64 = row.iter().sum();
            row.iter_mut().for_each(|v| *v /= deg);
        }
        a
    }
}

/// Root / centripetal / centrifugal subsets of the normalized adjacency for
/// one pose. Entry `[r * n + m]` of a subset weights neighbour `m` when
/// aggregating into root `r`.
#[derive(Debug, Clone, PartialEq)]
pub struct PartitionedAdjacency {
    pub nodes: usize,
    pub subsets: [Vec<f64>; PARTITIONS],
}

impl PartitionedAdjacency {
    pub fn root(&self) -> &[f64] {
        &self.subsets[0]
    }

    pub fn centripetal(&self) -> &[f64] {
        &self.subsets[1]
    }

    pub fn centrifugal(&self) -> &[f64] {
        &self.subsets[2]
    }
}

/// Splits `D⁻¹(A + I)` by each neighbour's distance to the pose's gravity
/// center (mean of all joints) relative to the root's distance: equal → root,
/// nearer → centripetal, farther → centrifugal.
pub(crate) fn build_partitions_for(
    graph: &SkeletonGraph,
    coords: &[[f64; 2]],
) -> Result<PartitionedAdjacency> {
    let n = graph.nodes();
    if coords.len() != n {
        return Err(Error::shape(
            "build_partitions",
            format!("{} coordinates for {n} nodes", coords.len()),
        ));
    }
    let cx = coords.iter().map(|c| c[0]).sum::<f64>() / n as f64;
    let cy = coords.iter().map(|c| c[1]).sum::<f64>() / n as f64;
    let dist: Vec<f64> = coords
        .iter()
        .map(|c| ((c[0] - cx).powi(2) + (c[1] - cy).powi(2)).sqrt())
        .collect();
    let norm = graph.normalized_adjacency();
    let mut subsets = [vec![0.0; n * n], vec![0.0; n * n], vec![0.0; n * n]];
    for r in 0..n {
        for m in 0..n {
            let w = norm[r * n + m];
            if w == 0.0 {
                continue;
            }
            let k = if m == r || dist[m] == dist[r] {
                0
            } else if dist[m] < dist[r] {
                1
            } else {
                2
            };
            subsets[k][r * n + m] = w;
        }
    }
    Ok(PartitionedAdjacency { nodes: n, subsets })
}

pub fn build_partitions(graph: &SkeletonGraph, pose: &Pose) -> Result<PartitionedAdjacency> {
    build_partitions_for(graph, pose)
}
