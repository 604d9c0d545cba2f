//! Writes one run's report as JSON, CSV and text.
//!
//!     cargo run --example report_formats -- /tmp/cofi-report

use cofi::report::{Format, RunReport};
use cofi::task::{SyntheticTask, TaskKind};
use cofi::train::{Architecture, PipelineConfig, Trainer};

fn main() -> cofi::Result<()> {
    let dir = std::env::args().nth(1).unwrap_or_else(|| "cofi-report".into());
    let mut cfg = PipelineConfig::default();
    cfg.model = Architecture {
        n_layers: 2,
        hidden: 16,
        n_heads: 2,
        ffn_dim: 32,
    };
    cfg.task = SyntheticTask {
        kind: TaskKind::MajorityClass,
        vocab: 12,
        seq_len: 9,
        n_classes: 3,
        train_size: 480,
        dev_size: 150,
        seed: 0,
    };
    cfg.training.epochs_teacher = 4;
    cfg.training.epochs_prune = 4;
    cfg.training.sparsity_warmup_epochs = 2;
    cfg.training.epochs_finetune = 2;
    cfg.training.target_sparsity = 0.5;

    let tr = Trainer::new(cfg.clone())?;
    let baseline = tr.dev.majority_baseline(cfg.task.n_classes);
    let report = RunReport::new(&cfg, &tr.finish(None)?, baseline);
    for f in [Format::Json, Format::Csv, Format::Text] {
        for p in report.emit(&dir, f)? {
            println!("wrote {}", p.display());
        }
    }
    print!("{}", report.to_text());
    Ok(())
}
