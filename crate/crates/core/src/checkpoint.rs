//! Binary checkpoints: `LDH-CKPT-1\n`, a little-endian `u64` header length,
//! a JSON header, then every tensor as little-endian `f64`.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{LdhError, Result};
use crate::networks::{Models, NetworkConfig};
use crate::tensor::{Real, Tensor};

pub const MAGIC: &[u8] = b"LDH-CKPT-1\n";

/// Position of a ChaCha stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub stream: u64,
    pub word_pos: u128,
}

/// How far training got when the checkpoint was written.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Progress {
    /// Completed epochs across both phases.
    pub epoch: usize,
    /// Completed optimizer steps.
    pub step: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: [usize; 4],
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    network: NetworkConfig,
    training: Option<serde_json::Value>,
    progress: Progress,
    rng: Option<RngState>,
    tensors: Vec<Entry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub network: NetworkConfig,
    /// Echo of the training configuration, if written by the trainer.
    pub training: Option<serde_json::Value>,
    pub progress: Progress,
    pub rng: Option<RngState>,
    pub tensors: Vec<(String, Tensor<f64>)>,
}

impl Checkpoint {
    /// Snapshot of the network parameters only.
    pub fn from_models<T: Real>(models: &Models<T>) -> Self {
        let tensors = models
            .params
            .ids()
            .map(|id| {
                (
                    models.params.name(id).to_string(),
                    models.params.get(id).cast(),
                )
            })
            .collect();
        Self {
            network: models.config,
            training: None,
            progress: Progress::default(),
            rng: None,
            tensors,
        }
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor<f64>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Rebuilds the networks and loads every parameter by name.
    pub fn models<T: Real>(&self) -> Result<Models<T>> {
        let mut models = Models::<T>::init(self.network, 0)?;
        let ids: Vec<_> = models.params.ids().collect();
        for id in ids {
            let name = models.params.name(id).to_string();
            let t = self
                .tensor(&name)
                .ok_or_else(|| LdhError::Checkpoint(format!("missing parameter {name}")))?;
            let slot = models.params.get_mut(id);
            if slot.shape() != t.shape() {
                return Err(LdhError::Checkpoint(format!(
                    "parameter {name} has shape {:?}, expected {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = t.cast();
        }
        Ok(models)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            network: self.network,
            training: self.training.clone(),
            progress: self.progress,
            rng: self.rng,
            tensors: self
                .tensors
                .iter()
                .map(|(n, t)| Entry {
                    name: n.clone(),
                    shape: t.shape(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header).map_err(|e| LdhError::Checkpoint(e.to_string()))?;
        let total: usize = self.tensors.iter().map(|(_, t)| t.len()).sum();
        let mut out = Vec::with_capacity(MAGIC.len() + 8 + json.len() + 8 * total);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| LdhError::Checkpoint(m.to_string());
        let rest = bytes
            .strip_prefix(MAGIC)
            .ok_or_else(|| bad("missing magic"))?;
        if rest.len() < 8 {
            return Err(bad("truncated header length"));
        }
        let hlen = u64::from_le_bytes(rest[..8].try_into().unwrap()) as usize;
        let rest = &rest[8..];
        if rest.len() < hlen {
            return Err(bad("truncated header"));
        }
        let header: Header = serde_json::from_slice(&rest[..hlen])
            .map_err(|e| LdhError::Checkpoint(e.to_string()))?;
        let mut data = &rest[hlen..];
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for e in header.tensors {
            let n: usize = e.shape.iter().product();
            if data.len() < 8 * n {
                return Err(LdhError::Checkpoint(format!(
                    "truncated data for {}",
                    e.name
                )));
            }
            let values = data[..8 * n]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            data = &data[8 * n..];
            tensors.push((e.name, Tensor::from_vec(e.shape, values)));
        }
        if !data.is_empty() {
            return Err(bad("trailing bytes after tensor data"));
        }
        Ok(Self {
            network: header.network,
            training: header.training,
            progress: header.progress,
            rng: header.rng,
            tensors,
        })
    }

    /// Writes to a sibling temporary file first so a crash never leaves a
    /// half-written checkpoint behind.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        let mut f = fs::File::create(&tmp).map_err(|e| LdhError::io(&tmp, e))?;
        f.write_all(&bytes).map_err(|e| LdhError::io(&tmp, e))?;
        f.sync_all().map_err(|e| LdhError::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| LdhError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| LdhError::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
