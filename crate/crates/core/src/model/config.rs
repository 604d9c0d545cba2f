use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Architecture dimensions of the encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub hidden: usize,
    pub n_heads: usize,
    pub ffn_dim: usize,
    pub vocab: usize,
    pub max_seq: usize,
    pub n_classes: usize,
}

impl ModelConfig {
    /// The two-layer configuration used for gradient and enumeration checks.
    pub fn tiny() -> Self {
        Self {
            n_layers: 2,
            hidden: 8,
            n_heads: 2,
            ffn_dim: 16,
            vocab: 12,
            max_seq: 8,
            n_classes: 3,
        }
    }

    /// BERT-base dimensions.
    pub fn bert_base() -> Self {
        Self {
            n_layers: 12,
            hidden: 768,
            n_heads: 12,
            ffn_dim: 3072,
            vocab: 30522,
            max_seq: 512,
            n_classes: 2,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("n_layers", self.n_layers),
            ("hidden", self.hidden),
            ("n_heads", self.n_heads),
            ("ffn_dim", self.ffn_dim),
            ("vocab", self.vocab),
            ("max_seq", self.max_seq),
            ("n_classes", self.n_classes),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be at least 1")));
        }
        if self.hidden % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "hidden ({}) must be divisible by n_heads ({})",
                self.hidden, self.n_heads
            )));
        }
        Ok(())
    }

    /// Prunable model size: attention and FFN matrices, embeddings and
    /// classifier excluded.
    pub fn full_size(&self) -> u64 {
        let (l, d, f) = (self.n_layers as u64, self.hidden as u64, self.ffn_dim as u64);
        4 * d * d * l + 2 * d * f * l
    }
}
