//! Run summaries in JSON, CSV and plain-text form.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::bench::LatencyResult;
use crate::compile::{count_dense, count_params, ParamCount, PrunedStructure};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::train::{EpochRecord, PipelineConfig, PipelineOutput, StepRecord};

/// Achieved sparsity further than this from the target is flagged.
pub const SPARSITY_MISS: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Json,
    Csv,
    Text,
}

impl std::str::FromStr for Format {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "json" => Ok(Format::Json),
            "csv" => Ok(Format::Csv),
            "text" => Ok(Format::Text),
            other => Err(Error::InvalidArgument(format!("unknown format {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSummary {
    pub mha: bool,
    pub ffn: bool,
    pub heads: usize,
    pub int_dims: usize,
}

/// Surviving shape of a pruned model.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StructureSummary {
    /// One letter pair per layer: `m` for a kept MHA, `n` for a dropped one,
    /// then `f` or `g` for the FFN.
    pub layer_pattern: String,
    pub layers: Vec<LayerSummary>,
    pub hidden: usize,
}

impl StructureSummary {
    pub fn new(s: &PrunedStructure) -> Self {
        let layers: Vec<LayerSummary> = (0..s.n_layers())
            .map(|i| LayerSummary {
                mha: s.keep_mha[i],
                ffn: s.keep_ffn[i],
                heads: s.kept_heads[i].len(),
                int_dims: s.kept_int_dims[i].len(),
            })
            .collect();
        Self {
            layer_pattern: layer_pattern(s),
            layers,
            hidden: s.kept_hidden_dims.len(),
        }
    }

    pub fn mha_layers(&self) -> usize {
        self.layers.iter().filter(|l| l.mha).count()
    }

    pub fn ffn_layers(&self) -> usize {
        self.layers.iter().filter(|l| l.ffn).count()
    }
}

pub fn layer_pattern(s: &PrunedStructure) -> String {
    (0..s.n_layers())
        .flat_map(|i| {
            [
                if s.keep_mha[i] { 'm' } else { 'n' },
                if s.keep_ffn[i] { 'f' } else { 'g' },
            ]
        })
        .collect()
}

/// Per-layer averages over several runs of the same configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeanStructure {
    pub runs: usize,
    pub heads: Vec<f64>,
    pub int_dims: Vec<f64>,
    pub mha_kept: Vec<f64>,
    pub ffn_kept: Vec<f64>,
    pub hidden: f64,
}

pub fn mean_structure(runs: &[StructureSummary]) -> Result<MeanStructure> {
    let Some(first) = runs.first() else {
        return Err(Error::InvalidArgument("no runs to average".into()));
    };
    let l = first.layers.len();
    if runs.iter().any(|r| r.layers.len() != l) {
        return Err(Error::InvalidArgument("runs differ in depth".into()));
    }
    let n = runs.len() as f64;
    let avg = |f: &dyn Fn(&LayerSummary) -> f64| -> Vec<f64> {
        (0..l).map(|i| runs.iter().map(|r| f(&r.layers[i])).sum::<f64>() / n).collect()
    };
    Ok(MeanStructure {
        runs: runs.len(),
        heads: avg(&|x| x.heads as f64),
        int_dims: avg(&|x| x.int_dims as f64),
        mha_kept: avg(&|x| x.mha as u8 as f64),
        ffn_kept: avg(&|x| x.ffn as u8 as f64),
        hidden: runs.iter().map(|r| r.hidden as f64).sum::<f64>() / n,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Accuracies {
    pub majority_baseline: f64,
    pub teacher: Option<f64>,
    pub distilled: Option<f64>,
    pub pruned: Option<f64>,
    #[serde(rename = "final")]
    pub final_: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Flags {
    pub sparsity_miss: bool,
    pub all_layers_pruned: bool,
}

/// Everything needed to reproduce the headline numbers of one run. Contains
/// no timestamps, so identical runs give byte-identical JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config: PipelineConfig,
    pub target_sparsity: f64,
    pub achieved_sparsity: f64,
    pub accuracy: Accuracies,
    pub params: ParamCount,
    pub dense_params: ParamCount,
    pub structure: StructureSummary,
    pub equivalence_diff: f32,
    pub flags: Flags,
    pub epochs: Vec<EpochRecord>,
    pub steps: Vec<StepRecord>,
    pub latency: Option<LatencyResult>,
}

impl RunReport {
    pub fn new(config: &PipelineConfig, out: &PipelineOutput, majority_baseline: f64) -> Self {
        let cfg: ModelConfig = config.model_config();
        let params = count_params(&out.compact);
        let achieved = params.sparsity(&cfg);
        let target = config.training.target_sparsity;
        let st = &out.state;
        Self {
            config: config.clone(),
            target_sparsity: target,
            achieved_sparsity: achieved,
            accuracy: Accuracies {
                majority_baseline,
                teacher: st.teacher_accuracy,
                distilled: st.distilled_accuracy,
                pruned: st.pruned_accuracy,
                final_: st.final_accuracy,
            },
            params,
            dense_params: count_dense(&st.student),
            structure: StructureSummary::new(&out.structure),
            equivalence_diff: out.equivalence_diff,
            flags: Flags {
                sparsity_miss: (achieved - target).abs() > SPARSITY_MISS,
                all_layers_pruned: out.structure.all_layers_pruned(),
            },
            epochs: st.epochs.clone(),
            steps: st.history.clone(),
            latency: None,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn epochs_csv(&self) -> String {
        let mut s = String::from("phase,epoch,train_loss,dev_accuracy,sparsity,expected_sparsity\n");
        for e in &self.epochs {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{}",
                phase_name(e.phase),
                e.epoch,
                e.train_loss,
                e.dev_accuracy,
                e.sparsity,
                e.expected_sparsity
            );
        }
        s
    }

    pub fn steps_csv(&self) -> String {
        let mut s = String::from(
            "step,phase,loss,task_loss,layer_loss,s_hat,target_sparsity,lambda1,lambda2\n",
        );
        for r in &self.steps {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{}",
                r.step,
                phase_name(r.phase),
                r.loss,
                r.task_loss,
                r.layer_loss,
                r.s_hat,
                r.target_sparsity,
                r.lambda1,
                r.lambda2
            );
        }
        s
    }

    pub fn layers_csv(&self) -> String {
        let mut s = String::from("layer,mha,ffn,heads,int_dims\n");
        for (i, l) in self.structure.layers.iter().enumerate() {
            let _ = writeln!(s, "{i},{},{},{},{}", l.mha as u8, l.ffn as u8, l.heads, l.int_dims);
        }
        s
    }

    pub fn to_text(&self) -> String {
        let opt = |v: Option<f64>| v.map_or("-".to_string(), |a| format!("{a:.4}"));
        let mut s = String::new();
        let a = &self.accuracy;
        let _ = writeln!(s, "target sparsity   {:.4}", self.target_sparsity);
        let _ = writeln!(s, "achieved sparsity {:.4}", self.achieved_sparsity);
        let _ = writeln!(s, "prunable params   {} of {}", self.params.prunable(), self.dense_params.prunable());
        let _ = writeln!(s, "total params      {} of {}", self.params.total(), self.dense_params.total());
        let _ = writeln!(s, "majority baseline {:.4}", a.majority_baseline);
        let _ = writeln!(s, "teacher accuracy  {}", opt(a.teacher));
        let _ = writeln!(s, "distilled         {}", opt(a.distilled));
        let _ = writeln!(s, "pruned            {}", opt(a.pruned));
        let _ = writeln!(s, "final             {}", opt(a.final_));
        let _ = writeln!(s, "layer pattern     {}", self.structure.layer_pattern);
        let _ = writeln!(s, "hidden dims       {}", self.structure.hidden);
        let _ = writeln!(s, "equivalence diff  {:e}", self.equivalence_diff);
        if let Some(l) = &self.latency {
            let _ = writeln!(
                s,
                "latency           dense {:.3} ms  compact {:.3} ms  speedup {:.2}x",
                l.dense.median * 1e3,
                l.compact.median * 1e3,
                l.speedup
            );
        }
        if self.flags.sparsity_miss {
            let _ = writeln!(s, "warning: sparsity missed the target by more than {SPARSITY_MISS}");
        }
        if self.flags.all_layers_pruned {
            let _ = writeln!(s, "warning: every sublayer was pruned");
        }
        let _ = writeln!(s, "\nlayer  mha  ffn  heads  int_dims");
        for (i, l) in self.structure.layers.iter().enumerate() {
            let _ = writeln!(
                s,
                "{i:>5}  {:>3}  {:>3}  {:>5}  {:>8}",
                if l.mha { "y" } else { "n" },
                if l.ffn { "y" } else { "n" },
                l.heads,
                l.int_dims
            );
        }
        s
    }

    /// Writes the report into `dir` and returns the paths written.
    pub fn emit(&self, dir: impl AsRef<Path>, format: Format) -> Result<Vec<PathBuf>> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        let files: Vec<(&str, String)> = match format {
            Format::Json => vec![("report.json", self.to_json()?)],
            Format::Csv => vec![
                ("epochs.csv", self.epochs_csv()),
                ("steps.csv", self.steps_csv()),
                ("layers.csv", self.layers_csv()),
            ],
            Format::Text => vec![("report.txt", self.to_text())],
        };
        let mut paths = Vec::new();
        for (name, body) in files {
            let p = dir.join(name);
            std::fs::write(&p, body)?;
            paths.push(p);
        }
        Ok(paths)
    }
}

fn phase_name(p: crate::train::Phase) -> &'static str {
    use crate::train::Phase::*;
    match p {
        Teacher => "teacher",
        Prewarm => "prewarm",
        Prune => "prune",
        Finetune => "finetune",
        Done => "done",
    }
}
