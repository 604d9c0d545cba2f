//! Binary checkpoint files.
//!
//! Layout: the 8-byte magic `COFICKPT`, a little-endian `u32` format version,
//! a little-endian `u64` header length, the JSON header, then every tensor
//! listed in the header as row-major little-endian `f32`, in header order.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{CompactModel, PrunedStructure};
use crate::error::{Error, Result};
use crate::model::{MaskValues, MaskableEncoder, ModelConfig};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"COFICKPT";
pub const FORMAT_VERSION: u32 = 1;

const LOG_ALPHA_PREFIX: &str = "masks.log_alpha.";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointKind {
    /// Full-size encoder, optionally with learned `log_alpha` tensors.
    Masked,
    /// Physically pruned model; `structure` says which units survive.
    Compact,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub version: u32,
    pub kind: CheckpointKind,
    pub config: ModelConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub structure: Option<PrunedStructure>,
    #[serde(default)]
    pub metadata: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub kind: CheckpointKind,
    pub config: ModelConfig,
    pub structure: Option<PrunedStructure>,
    pub metadata: serde_json::Value,
    /// Payload in file order.
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn from_masked(
        model: &MaskableEncoder,
        log_alpha: Option<&MaskValues>,
        structure: Option<&PrunedStructure>,
        metadata: serde_json::Value,
    ) -> Self {
        let mut tensors: Vec<(String, Tensor)> = model
            .named_tensors()
            .into_iter()
            .map(|(n, t)| (n, t.clone()))
            .collect();
        if let Some(la) = log_alpha {
            for (fam, t) in la.families() {
                tensors.push((format!("{LOG_ALPHA_PREFIX}{fam}"), t.clone()));
            }
        }
        Self {
            kind: CheckpointKind::Masked,
            config: model.config,
            structure: structure.cloned(),
            metadata,
            tensors,
        }
    }

    pub fn from_compact(model: &CompactModel, structure: &PrunedStructure, metadata: serde_json::Value) -> Self {
        Self {
            kind: CheckpointKind::Compact,
            config: model.source,
            structure: Some(structure.clone()),
            metadata,
            tensors: model
                .named_tensors()
                .into_iter()
                .map(|(n, t)| (n, t.clone()))
                .collect(),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn masked_model(&self) -> Result<MaskableEncoder> {
        if self.kind != CheckpointKind::Masked {
            return Err(Error::Checkpoint("not a masked checkpoint".into()));
        }
        MaskableEncoder::from_tensors(self.config, |n| self.get(n).cloned())
    }

    /// Stored `log_alpha`, if the checkpoint has one.
    pub fn log_alpha(&self) -> Result<Option<MaskValues>> {
        let fetch = |fam: &str| self.get(&format!("{LOG_ALPHA_PREFIX}{fam}")).cloned();
        let Some(mha) = fetch("mha") else {
            return Ok(None);
        };
        let missing = |fam: &str| Error::Checkpoint(format!("missing tensor {LOG_ALPHA_PREFIX}{fam}"));
        let m = MaskValues {
            mha,
            ffn: fetch("ffn").ok_or_else(|| missing("ffn"))?,
            head: fetch("head").ok_or_else(|| missing("head"))?,
            int: fetch("int").ok_or_else(|| missing("int"))?,
            hidden: fetch("hidden").ok_or_else(|| missing("hidden"))?,
        };
        let z = MaskValues::full(&self.config, 0.0);
        for ((_, a), (_, b)) in m.families().into_iter().zip(z.families()) {
            if a.shape() != b.shape() {
                return Err(Error::Checkpoint(format!(
                    "log_alpha shape {:?}, expected {:?}",
                    a.shape(),
                    b.shape()
                )));
            }
        }
        Ok(Some(m))
    }

    pub fn compact_model(&self) -> Result<CompactModel> {
        if self.kind != CheckpointKind::Compact {
            return Err(Error::Checkpoint("not a compact checkpoint".into()));
        }
        let s = self
            .structure
            .as_ref()
            .ok_or_else(|| Error::Checkpoint("compact checkpoint without structure".into()))?;
        CompactModel::from_tensors(self.config, s, |n| self.get(n).cloned())
    }

    pub fn header(&self) -> CheckpointHeader {
        CheckpointHeader {
            version: FORMAT_VERSION,
            kind: self.kind,
            config: self.config,
            structure: self.structure.clone(),
            metadata: self.metadata.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|(n, t)| TensorEntry {
                    name: n.clone(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.header())?;
        let payload: usize = self.tensors.iter().map(|(_, t)| t.numel() * 4).sum();
        let mut out = Vec::with_capacity(20 + header.len() + payload);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for (_, t) in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: String| Error::Checkpoint(m);
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file (bad magic)".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(bad(format!(
                "unsupported checkpoint version {version} (this build reads version {FORMAT_VERSION})"
            )));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body = &bytes[20..];
        if body.len() < hlen {
            return Err(bad(format!("header truncated: {hlen} bytes declared, {} present", body.len())));
        }
        let header: CheckpointHeader = serde_json::from_slice(&body[..hlen])?;
        if header.version != version {
            return Err(bad(format!(
                "header version {} disagrees with file version {version}",
                header.version
            )));
        }
        let mut payload = &body[hlen..];
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for e in &header.tensors {
            let n: usize = e.shape.iter().product();
            let need = n * 4;
            if payload.len() < need {
                return Err(bad(format!(
                    "payload truncated in tensor {}: needs {need} bytes, {} remain",
                    e.name,
                    payload.len()
                )));
            }
            let data = payload[..need]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            payload = &payload[need..];
            tensors.push((e.name.clone(), Tensor::new(e.shape.clone(), data)?));
        }
        if !payload.is_empty() {
            return Err(bad(format!("{} trailing bytes after the last tensor", payload.len())));
        }
        Ok(Self {
            kind: header.kind,
            config: header.config,
            structure: header.structure,
            metadata: header.metadata,
            tensors,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
