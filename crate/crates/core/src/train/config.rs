use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::distill::MatchMode;
use crate::error::{Error, Result};
use crate::l0::HardConcrete;
use crate::model::ModelConfig;
use crate::task::{SyntheticTask, TaskKind};

/// Encoder shape; vocabulary, sequence length and class count come from the
/// task.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Architecture {
    pub n_layers: usize,
    pub hidden: usize,
    pub n_heads: usize,
    pub ffn_dim: usize,
}

/// Which distillation signal the student sees.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Distillation {
    /// `λ·L_pred + (1 − λ)·L_layer`.
    #[default]
    Full,
    /// `L_pred` only.
    PredOnly,
    /// Cross-entropy on the task labels, no teacher.
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub seed: u64,
    /// Fraction of prunable parameters to remove.
    pub target_sparsity: f64,
    /// Weight `λ` of the prediction loss against the layer loss.
    pub distill_lambda: f32,
    pub temperature: f32,
    pub distillation: Distillation,
    pub match_mode: MatchMode,
    /// 0-based teacher blocks to distill from; every third block of a
    /// 12-layer teacher, scaled to depth, when absent.
    pub teacher_layers: Option<Vec<usize>>,
    /// Learn whole-layer gates `z_MHA`, `z_FFN`.
    pub layer_masks: bool,
    pub lr_teacher: f64,
    pub lr_weights: f64,
    pub lr_masks: f64,
    pub lr_multipliers: f64,
    pub lr_finetune: f64,
    pub batch_size: usize,
    pub eval_batch_size: usize,
    pub epochs_teacher: usize,
    pub epochs_prewarm: usize,
    /// Pruning epochs, including the warmup.
    pub epochs_prune: usize,
    pub sparsity_warmup_epochs: usize,
    pub epochs_finetune: usize,
    pub clip_norm: f64,
    /// Eval-time sparsity band within which a structure can be selected.
    pub sparsity_tolerance: f64,
    /// Structure checks per pruning epoch once the schedule has warmed up.
    pub evals_per_epoch: usize,
    /// Write a resumable run state every this many steps (0: never).
    pub checkpoint_every: u64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            target_sparsity: 0.6,
            distill_lambda: 0.5,
            temperature: 2.0,
            distillation: Distillation::Full,
            match_mode: MatchMode::Dynamic,
            teacher_layers: None,
            layer_masks: true,
            lr_teacher: 2e-3,
            lr_weights: 1e-3,
            lr_masks: 0.1,
            lr_multipliers: 0.1,
            lr_finetune: 5e-4,
            batch_size: 16,
            eval_batch_size: 100,
            epochs_teacher: 10,
            epochs_prewarm: 1,
            epochs_prune: 10,
            sparsity_warmup_epochs: 4,
            epochs_finetune: 5,
            clip_norm: 1.0,
            sparsity_tolerance: 0.02,
            evals_per_epoch: 4,
            checkpoint_every: 0,
        }
    }
}

/// Everything a run needs; the TOML form is the CLI's `--config` file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub model: Architecture,
    pub task: SyntheticTask,
    #[serde(default)]
    pub training: TrainingConfig,
    #[serde(default)]
    pub gates: HardConcrete,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            model: Architecture {
                n_layers: 4,
                hidden: 64,
                n_heads: 4,
                ffn_dim: 256,
            },
            task: SyntheticTask {
                kind: TaskKind::ParityOfMarkedTokens,
                vocab: 64,
                seq_len: 32,
                n_classes: 2,
                train_size: 2000,
                dev_size: 500,
                seed: 0,
            },
            training: TrainingConfig::default(),
            gates: HardConcrete::default(),
        }
    }
}

impl PipelineConfig {
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            n_layers: self.model.n_layers,
            hidden: self.model.hidden,
            n_heads: self.model.n_heads,
            ffn_dim: self.model.ffn_dim,
            vocab: self.task.vocab,
            max_seq: self.task.seq_len,
            n_classes: self.task.n_classes,
        }
    }

    pub fn teacher_layers(&self) -> Vec<usize> {
        self.training
            .teacher_layers
            .clone()
            .unwrap_or_else(|| crate::distill::default_teacher_layers(self.model.n_layers))
    }

    pub fn validate(&self) -> Result<()> {
        self.model_config().validate()?;
        self.task.validate()?;
        self.gates.validate()?;
        let t = &self.training;
        let bad = |m: &str| Err(Error::Config(m.into()));
        if !(0.0..1.0).contains(&t.target_sparsity) {
            return bad("target_sparsity must lie in [0, 1)");
        }
        if !(0.0..=1.0).contains(&t.distill_lambda) {
            return bad("distill_lambda must lie in [0, 1]");
        }
        if !(t.temperature > 0.0) {
            return bad("temperature must be positive");
        }
        if t.batch_size == 0 || t.eval_batch_size == 0 {
            return bad("batch sizes must be positive");
        }
        if t.batch_size > self.task.train_size {
            return bad("batch_size exceeds train_size");
        }
        if t.sparsity_warmup_epochs > t.epochs_prune {
            return bad("sparsity_warmup_epochs exceeds epochs_prune");
        }
        for lr in [t.lr_teacher, t.lr_weights, t.lr_masks, t.lr_multipliers, t.lr_finetune] {
            if !(lr > 0.0 && lr.is_finite()) {
                return bad("learning rates must be positive and finite");
            }
        }
        let layers = self.teacher_layers();
        if layers.is_empty() || layers.iter().any(|&i| i >= self.model.n_layers) {
            return bad("teacher_layers must be non-empty and within the model depth");
        }
        if !layers.windows(2).all(|w| w[0] < w[1]) {
            return bad("teacher_layers must be strictly increasing");
        }
        Ok(())
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }
}

/// Linear ramp of the sparsity target from 0 to `final_target`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SparsitySchedule {
    pub start_step: u64,
    pub warmup_steps: u64,
    pub final_target: f64,
}

impl SparsitySchedule {
    pub fn target(&self, step: u64) -> f64 {
        if step < self.start_step {
            0.0
        } else if step >= self.start_step + self.warmup_steps {
            self.final_target
        } else {
            self.final_target * (step - self.start_step) as f64 / self.warmup_steps as f64
        }
    }

    pub fn warmed_up(&self, step: u64) -> bool {
        step >= self.start_step + self.warmup_steps
    }
}
