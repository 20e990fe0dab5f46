use std::collections::HashMap;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::PoseSequence;
use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Width of the pretrained pose embeddings this interface stands in for.
pub const FIXED_EMBEDDING_WIDTH: usize = 16;

#[derive(Serialize, Deserialize)]
struct TableLine {
    video_id: String,
    embeddings: Vec<Vec<f64>>,
}

/// Externally computed per-frame vectors keyed by video id.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FixedEmbeddingTable {
    entries: HashMap<String, Vec<Vec<f64>>>,
}

impl FixedEmbeddingTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, video_id: impl Into<String>, embeddings: Vec<Vec<f64>>) {
        self.entries.insert(video_id.into(), embeddings);
    }

    pub fn get(&self, video_id: &str) -> Option<&[Vec<f64>]> {
        self.entries.get(video_id).map(Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// One `{"video_id": …, "embeddings": [[…], …]}` object per line.
    pub fn read(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut table = Self::new();
        for (n, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let parsed: TableLine = serde_json::from_str(&line).map_err(|e| Error::Parse {
                frame: n,
                message: format!("embedding table line {}: {e}", n + 1),
            })?;
            table.insert(parsed.video_id, parsed.embeddings);
        }
        Ok(table)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut ids: Vec<&String> = self.entries.keys().collect();
        ids.sort();
        let mut out = String::new();
        for id in ids {
            let line = TableLine {
                video_id: id.clone(),
                embeddings: self.entries[id].clone(),
            };
            out.push_str(&serde_json::to_string(&line)?);
            out.push('\n');
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}

/// Looks up the supplied vectors for `seq` and returns them unchanged as a
/// `T × width` tensor. The result is meant to enter a graph as a constant.
pub fn fixed_embedding_provider(
    seq: &PoseSequence,
    table: &FixedEmbeddingTable,
    width: usize,
) -> Result<Tensor> {
    let rows = table
        .get(&seq.video_id)
        .ok_or_else(|| Error::Data(format!("{}: no fixed embeddings supplied", seq.video_id)))?;
    if rows.len() != seq.len() {
        return Err(Error::Data(format!(
            "{}: {} embedding rows for {} frames",
            seq.video_id,
            rows.len(),
            seq.len()
        )));
    }
    if let Some(bad) = rows.iter().position(|r| r.len() != width) {
        return Err(Error::Data(format!(
            "{}: frame {bad} has width {}, expected {width}",
            seq.video_id,
            rows[bad].len()
        )));
    }
    Tensor::new(vec![rows.len(), width], rows.concat())
}
