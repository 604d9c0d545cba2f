use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::json;

use cofi::bench::{bench, BenchSpec};
use cofi::compile::{binarize, count_params, extract, Checkpoint, CheckpointKind, PrunedStructure};
use cofi::l0::{HardConcrete, MaskFamilies, MaskSet};
use cofi::report::{Format, RunReport};
use cofi::train::{Phase, PipelineConfig, RunState, Trainer, EQUIVALENCE_TOLERANCE};
use cofi::Error;

#[derive(Parser)]
#[command(name = "cofi", version, about = "Structured pruning of a small Transformer encoder")]
struct Cli {
    /// Pipeline config (TOML). Built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    target_sparsity: Option<f64>,
    #[arg(long, global = true, default_value = "runs")]
    out_dir: PathBuf,
    #[arg(long, global = true, default_value = "json")]
    format: Format,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the dense teacher and write teacher.ckpt.
    Train,
    /// Run the pruning pipeline and write student.ckpt, compact.ckpt and a report.
    Prune {
        /// Start from this teacher instead of training one.
        #[arg(long)]
        teacher: Option<PathBuf>,
        /// Continue from run_state.json in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Build compact.ckpt from a masked checkpoint.
    Extract {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Time the dense model against its compact form.
    Bench {
        /// Masked checkpoint with a structure, as written by `prune`.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Compact checkpoint; extracted on the fly when omitted.
        #[arg(long)]
        compact: Option<PathBuf>,
        #[arg(long, default_value_t = 32)]
        batch_size: usize,
        #[arg(long)]
        seq_len: Option<usize>,
        #[arg(long, default_value_t = cofi::bench::MIN_WARMUP)]
        warmup: usize,
        #[arg(long, default_value_t = cofi::bench::MIN_ITERS)]
        iters: usize,
    },
    /// Re-emit the report of a finished run in the chosen format.
    Report {
        #[arg(long)]
        run_dir: PathBuf,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Numerical(_) | Error::NonFinite(_) => 2,
        Error::EquivalenceGate { .. } => 3,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            return ExitCode::from(if usage { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn load_config(cli: &Cli) -> cofi::Result<PipelineConfig> {
    let mut cfg = match &cli.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.training.seed = s;
    }
    if let Some(t) = cli.target_sparsity {
        cfg.training.target_sparsity = t;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> cofi::Result<()> {
    let out = cli.out_dir.clone();
    match &cli.command {
        Command::Train => {
            let cfg = load_config(&cli)?;
            std::fs::create_dir_all(&out)?;
            let mut tr = Trainer::new(cfg.clone())?;
            while tr.state.phase == Phase::Teacher {
                tr.advance()?;
            }
            let meta = json!({ "teacher_accuracy": tr.state.teacher_accuracy });
            Checkpoint::from_masked(&tr.state.teacher, None, None, meta).save(out.join("teacher.ckpt"))?;
            std::fs::write(out.join("config.toml"), cfg.to_toml_string()?)?;
            println!(
                "teacher accuracy {:.4}",
                tr.state.teacher_accuracy.unwrap_or(f64::NAN)
            );
        }
        Command::Prune { teacher, resume } => {
            let cfg = load_config(&cli)?;
            std::fs::create_dir_all(&out)?;
            std::fs::write(out.join("config.toml"), cfg.to_toml_string()?)?;
            let state_path = out.join("run_state.json");
            let tr = if *resume {
                Trainer::resume(cfg.clone(), RunState::load(&state_path)?)?
            } else if let Some(t) = teacher {
                Trainer::with_teacher(cfg.clone(), &Checkpoint::load(t)?.masked_model()?)?
            } else {
                Trainer::new(cfg.clone())?
            };
            let baseline = tr.dev.majority_baseline(cfg.task.n_classes);
            let result = tr.finish(Some(&out))?;
            let families = result.state.masks.families;
            let meta = json!({ "mask_families": families, "gates": cfg.gates });
            Checkpoint::from_masked(
                &result.state.student,
                Some(&result.state.masks.log_alpha),
                Some(&result.structure),
                meta.clone(),
            )
            .save(out.join("student.ckpt"))?;
            Checkpoint::from_compact(&result.compact, &result.structure, meta).save(out.join("compact.ckpt"))?;
            let report = RunReport::new(&cfg, &result, baseline);
            report.emit(&out, Format::Json)?;
            if cli.format != Format::Json {
                report.emit(&out, cli.format)?;
            }
            print!("{}", report.to_text());
        }
        Command::Extract { checkpoint } => {
            let ck = Checkpoint::load(checkpoint)?;
            let (model, structure) = masked_with_structure(&ck)?;
            let compact = extract(&model, &structure)?;
            check_gate(&model, &structure, &compact)?;
            std::fs::create_dir_all(&out)?;
            Checkpoint::from_compact(&compact, &structure, ck.metadata.clone()).save(out.join("compact.ckpt"))?;
            let pc = count_params(&compact);
            println!(
                "compact model: {} prunable params, sparsity {:.4}",
                pc.prunable(),
                pc.sparsity(&model.config)
            );
        }
        Command::Bench {
            checkpoint,
            compact,
            batch_size,
            seq_len,
            warmup,
            iters,
        } => {
            let ck = Checkpoint::load(checkpoint)?;
            let (model, structure) = masked_with_structure(&ck)?;
            let compact = match compact {
                Some(p) => {
                    let c = Checkpoint::load(p)?;
                    if c.structure.as_ref() != Some(&structure) {
                        return Err(Error::StructureMismatch(
                            "compact checkpoint was built from a different structure".into(),
                        ));
                    }
                    c.compact_model()?
                }
                None => extract(&model, &structure)?,
            };
            let spec = BenchSpec {
                batch_size: *batch_size,
                seq_len: seq_len.unwrap_or(model.config.max_seq),
                warmup: *warmup,
                iters: *iters,
                seed: cli.seed.unwrap_or(0),
            };
            let lat = bench(&model, &structure, &compact, &spec)?;
            std::fs::create_dir_all(&out)?;
            let body = serde_json::to_string_pretty(&lat)? + "\n";
            std::fs::write(out.join("latency.json"), &body)?;
            print!("{body}");
        }
        Command::Report { run_dir } => {
            let mut report = RunReport::from_json(&std::fs::read_to_string(run_dir.join("report.json"))?)?;
            let lat = run_dir.join("latency.json");
            if lat.exists() {
                report.latency = Some(serde_json::from_str(&std::fs::read_to_string(lat)?)?);
            }
            let compact = run_dir.join("compact.ckpt");
            if compact.exists() {
                let counted = count_params(&Checkpoint::load(&compact)?.compact_model()?);
                if counted != report.params {
                    return Err(Error::Checkpoint(
                        "compact.ckpt parameter count disagrees with report.json".into(),
                    ));
                }
            }
            for p in report.emit(&out, cli.format)? {
                println!("{}", p.display());
            }
        }
    }
    Ok(())
}

/// The full-size model and the structure it was pruned to. A checkpoint
/// without a stored structure is binarized from its `log_alpha`.
fn masked_with_structure(ck: &Checkpoint) -> cofi::Result<(cofi::model::MaskableEncoder, PrunedStructure)> {
    if ck.kind != CheckpointKind::Masked {
        return Err(Error::Checkpoint("expected a masked checkpoint".into()));
    }
    let model = ck.masked_model()?;
    let structure = match (&ck.structure, ck.log_alpha()?) {
        (Some(s), _) => s.clone(),
        (None, Some(log_alpha)) => {
            let field = |k: &str| ck.metadata.get(k).cloned().filter(|v| !v.is_null());
            let families: MaskFamilies = match field("mask_families") {
                Some(v) => serde_json::from_value(v)?,
                None => MaskFamilies::ALL,
            };
            let dist: HardConcrete = match field("gates") {
                Some(v) => serde_json::from_value(v)?,
                None => HardConcrete::default(),
            };
            let masks = MaskSet {
                log_alpha,
                dist,
                families,
            };
            binarize(&masks.deterministic(), &model.config)?
        }
        (None, None) => {
            return Err(Error::Checkpoint(
                "checkpoint has neither a structure nor mask parameters".into(),
            ))
        }
    };
    structure.validate(&model.config)?;
    Ok((model, structure))
}

fn check_gate(
    model: &cofi::model::MaskableEncoder,
    structure: &PrunedStructure,
    compact: &cofi::compile::CompactModel,
) -> cofi::Result<()> {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    let probe = cofi::bench::random_batch(&mut rng, model.config.vocab, 16, model.config.max_seq);
    let diff = cofi::bench::equivalence_gate(model, structure, compact, &probe)?;
    debug_assert!(diff <= EQUIVALENCE_TOLERANCE);
    Ok(())
}
