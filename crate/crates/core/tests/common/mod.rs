#![allow(dead_code)]

pub mod oracles;

use cofi::task::{SyntheticTask, TaskKind};
use cofi::train::{Architecture, PipelineConfig};

/// A pipeline that finishes in well under a second.
pub fn small() -> PipelineConfig {
    let mut c = PipelineConfig::default();
    c.model = Architecture {
        n_layers: 2,
        hidden: 16,
        n_heads: 2,
        ffn_dim: 32,
    };
    c.task = SyntheticTask {
        kind: TaskKind::ParityOfMarkedTokens,
        vocab: 16,
        seq_len: 8,
        n_classes: 2,
        train_size: 320,
        dev_size: 100,
        seed: 3,
    };
    let t = &mut c.training;
    t.epochs_teacher = 2;
    t.epochs_prewarm = 1;
    t.epochs_prune = 3;
    t.sparsity_warmup_epochs = 1;
    t.epochs_finetune = 1;
    t.target_sparsity = 0.5;
    c
}
