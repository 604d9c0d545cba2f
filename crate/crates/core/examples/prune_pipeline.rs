//! Trains a teacher on the parity task, prunes it to a target sparsity and
//! prints the resulting report.
//!
//!     cargo run --release --example prune_pipeline -- 0.8

use cofi::report::RunReport;
use cofi::task::{SyntheticTask, TaskKind};
use cofi::train::{Architecture, PipelineConfig, Trainer};

fn main() -> cofi::Result<()> {
    let target = std::env::args().nth(1).map_or(Ok(0.8), |s| s.parse()).map_err(|e| {
        cofi::Error::InvalidArgument(format!("target sparsity: {e}"))
    })?;
    let mut cfg = PipelineConfig::default();
    cfg.model = Architecture {
        n_layers: 4,
        hidden: 32,
        n_heads: 4,
        ffn_dim: 64,
    };
    cfg.task = SyntheticTask {
        kind: TaskKind::ParityOfMarkedTokens,
        vocab: 16,
        seq_len: 16,
        n_classes: 2,
        train_size: 1000,
        dev_size: 300,
        seed: 1,
    };
    cfg.training.target_sparsity = target;
    cfg.training.epochs_prune = 12;
    cfg.training.epochs_finetune = 4;

    let mut tr = Trainer::new(cfg.clone())?;
    let baseline = tr.dev.majority_baseline(cfg.task.n_classes);
    let mut seen = 0;
    while !tr.is_done() {
        tr.advance()?;
        for e in &tr.state.epochs[seen..] {
            println!(
                "{:?} epoch {:>2}: loss {:.4}  dev {:.3}  sparsity {:.3}",
                e.phase, e.epoch, e.train_loss, e.dev_accuracy, e.sparsity
            );
        }
        seen = tr.state.epochs.len();
    }
    let out = tr.finish(None)?;
    println!("\n{}", RunReport::new(&cfg, &out, baseline).to_text());
    Ok(())
}
