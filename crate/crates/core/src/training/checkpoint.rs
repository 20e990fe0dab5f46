//! Single-file checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes  "AIRTCKPT"
//! version    u32
//! meta_len   u64, followed by that many bytes of JSON (CheckpointMeta)
//! n_params   u32
//! per parameter:
//!   name_len u32, name (UTF-8)
//!   flags    u8   bit 0 = trainable, bit 1 = has frozen mask
//!   ndim     u32, then ndim × u64 dimensions
//!   mask     one byte per element when bit 1 is set (1 = frozen)
//! payload    every parameter's elements as f64, in table order
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{ParamStore, Parameter, Tensor};
use crate::training::TrainConfig;

pub const MAGIC: &[u8; 8] = b"AIRTCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config: TrainConfig,
    pub seed: u64,
    /// Epochs completed.
    pub epoch: usize,
    /// Mean training loss per completed epoch.
    pub loss_history: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub store: ParamStore,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let meta = serde_json::to_vec(&self.meta)?;
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&(self.store.len() as u32).to_le_bytes());
        for (_, p) in self.store.iter() {
            out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
            out.extend_from_slice(p.name.as_bytes());
            let flags = u8::from(p.trainable) | (u8::from(p.frozen_entries.is_some()) << 1);
            out.push(flags);
            out.extend_from_slice(&(p.tensor.shape().len() as u32).to_le_bytes());
            for d in p.tensor.shape() {
                out.extend_from_slice(&(*d as u64).to_le_bytes());
            }
            if let Some(mask) = &p.frozen_entries {
                out.extend(mask.iter().map(|f| u8::from(*f)));
            }
        }
        for (_, p) in self.store.iter() {
            for v in p.tensor.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Corrupt("not a checkpoint file (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Version {
                found: version,
                expected: VERSION,
            });
        }
        let meta_len = r.u64()? as usize;
        let meta: CheckpointMeta = serde_json::from_slice(r.take(meta_len)?)
            .map_err(|e| Error::Corrupt(format!("checkpoint metadata: {e}")))?;
        let n = r.u32()? as usize;
        let mut table = Vec::with_capacity(n.min(4096));
        for _ in 0..n {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::Corrupt("parameter name is not UTF-8".into()))?
                .to_string();
            let flags = r.take(1)?[0];
            let ndim = r.u32()? as usize;
            let mut shape = Vec::with_capacity(ndim.min(8));
            for _ in 0..ndim {
                shape.push(r.u64()? as usize);
            }
            let len = shape
                .iter()
                .try_fold(1usize, |a, d| a.checked_mul(*d))
                .ok_or_else(|| Error::Corrupt(format!("{name}: shape overflows")))?;
            let mask = if flags & 2 != 0 {
                Some(r.take(len)?.iter().map(|b| *b != 0).collect::<Vec<_>>())
            } else {
                None
            };
            table.push((name, flags & 1 != 0, shape, len, mask));
        }
        let mut store = ParamStore::new();
        for (name, trainable, shape, len, mask) in table {
            let raw = r.take(
                len.checked_mul(8)
                    .ok_or_else(|| Error::Corrupt("payload overflows".into()))?,
            )?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let tensor = Tensor::new(shape, data).map_err(|e| Error::Corrupt(e.to_string()))?;
            store
                .insert(Parameter {
                    name,
                    tensor,
                    trainable,
                    frozen_entries: mask,
                })
                .map_err(|e| Error::Corrupt(e.to_string()))?;
        }
        if r.pos != bytes.len() {
            return Err(Error::Corrupt(format!(
                "{} trailing bytes",
                bytes.len() - r.pos
            )));
        }
        Ok(Checkpoint { meta, store })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|e| *e <= self.bytes.len())
            .ok_or_else(|| Error::Corrupt(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }
}
