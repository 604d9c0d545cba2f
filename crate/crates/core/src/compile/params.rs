use serde::{Deserialize, Serialize};

use super::{CompactModel, PrunedStructure};
use crate::model::{MaskableEncoder, ModelConfig};

/// Exact parameter counts by component. The headline count `prunable()` is
/// MHA plus FFN projection weights only.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ParamCount {
    pub mha: u64,
    pub ffn: u64,
    pub embeddings: u64,
    pub layer_norm: u64,
    pub classifier: u64,
}

impl ParamCount {
    pub fn prunable(&self) -> u64 {
        self.mha + self.ffn
    }

    pub fn total(&self) -> u64 {
        self.mha + self.ffn + self.embeddings + self.layer_norm + self.classifier
    }

    /// Fraction of the full model's prunable weights removed.
    pub fn sparsity(&self, cfg: &ModelConfig) -> f64 {
        1.0 - self.prunable() as f64 / cfg.full_size() as f64
    }
}

/// Counts every tensor of a compact model.
pub fn count_params(m: &CompactModel) -> ParamCount {
    let n = |t: &crate::tensor::Tensor| t.numel() as u64;
    let mut c = ParamCount {
        embeddings: n(&m.tok_emb) + n(&m.pos_emb),
        layer_norm: n(&m.emb_ln_gamma) + n(&m.emb_ln_beta),
        classifier: n(&m.classifier),
        ..Default::default()
    };
    for b in &m.blocks {
        if let Some(a) = &b.attn {
            c.mha += n(&a.wq) + n(&a.wk) + n(&a.wv) + n(&a.wo);
            c.layer_norm += n(&a.ln_gamma) + n(&a.ln_beta);
        }
        if let Some(f) = &b.ffn {
            c.ffn += n(&f.wu) + n(&f.wd);
            c.layer_norm += n(&f.ln_gamma) + n(&f.ln_beta);
        }
    }
    c
}

/// Counts what `extract` would keep, without building the model.
pub fn count_structure(s: &PrunedStructure, cfg: &ModelConfig) -> ParamCount {
    let d = s.kept_hidden_dims.len() as u64;
    let dh = cfg.head_dim() as u64;
    let mut c = ParamCount {
        embeddings: (cfg.vocab + cfg.max_seq) as u64 * d,
        layer_norm: 2 * d,
        classifier: d * cfg.n_classes as u64,
        ..Default::default()
    };
    for i in 0..s.n_layers() {
        if s.keep_mha[i] {
            c.mha += 4 * d * dh * s.kept_heads[i].len() as u64;
            c.layer_norm += 2 * d;
        }
        if s.keep_ffn[i] {
            c.ffn += 2 * d * s.kept_int_dims[i].len() as u64;
            c.layer_norm += 2 * d;
        }
    }
    c
}

/// Counts of the unpruned encoder.
pub fn count_dense(m: &MaskableEncoder) -> ParamCount {
    count_structure(&PrunedStructure::identity(&m.config), &m.config)
}
