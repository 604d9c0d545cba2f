//! The three-phase pruning pipeline: distillation warmup, scheduled pruning
//! with jointly learned gates and multipliers, and finetuning of the fixed
//! subnetwork.

mod config;

pub use config::{Architecture, Distillation, PipelineConfig, SparsitySchedule, TrainingConfig};

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::compile::{binarize, count_structure, extract, CompactModel, PrunedStructure};
use crate::distill::{self, LayerTransform, TeacherSnapshot};
use crate::error::{Error, Result};
use crate::l0::{self, MaskFamilies, MaskSet, SparsityAccounting};
use crate::model::{MaskValues, MaskVars, MaskableEncoder, ModelConfig, Trainable};
use crate::optim::{clip_global_norm, Adam};
use crate::task::Dataset;
use crate::tensor::Tensor;

/// Logit tolerance of the compact-versus-masked equivalence gate.
pub const EQUIVALENCE_TOLERANCE: f32 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    /// Cross-entropy training of the dense teacher.
    Teacher,
    /// Distillation only, all gates open.
    Prewarm,
    /// Gates, weights and multipliers trained jointly.
    Prune,
    /// Distillation with the binarized gates frozen.
    Finetune,
    Done,
}

impl Phase {
    fn next(self) -> Self {
        match self {
            Phase::Teacher => Phase::Prewarm,
            Phase::Prewarm => Phase::Prune,
            Phase::Prune => Phase::Finetune,
            Phase::Finetune | Phase::Done => Phase::Done,
        }
    }

    fn stream(self) -> u64 {
        self as u64 + 1
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub phase: Phase,
    pub loss: f32,
    /// Cross-entropy, or `L_pred` under distillation.
    pub task_loss: f32,
    pub layer_loss: f32,
    /// Retained fraction of the sampled gates (1 outside pruning).
    pub s_hat: f32,
    pub target_sparsity: f64,
    pub lambda1: f32,
    pub lambda2: f32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub phase: Phase,
    pub epoch: usize,
    pub train_loss: f64,
    pub dev_accuracy: f64,
    /// Sparsity of the structure the gates binarize to.
    pub sparsity: f64,
    /// `1 − ŝ` of the deterministic gates.
    pub expected_sparsity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub epoch: usize,
    pub dev_accuracy: f64,
    pub sparsity: f64,
    pub structure: PrunedStructure,
    pub student: MaskableEncoder,
    pub transform: LayerTransform,
}

/// Everything needed to continue a run bit-for-bit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunState {
    pub phase: Phase,
    /// Epoch within the current phase.
    pub epoch: usize,
    /// Next batch within the current epoch.
    pub batch: usize,
    pub step: u64,
    pub teacher: MaskableEncoder,
    pub student: MaskableEncoder,
    pub masks: MaskSet,
    pub transform: LayerTransform,
    pub lambda1: f32,
    pub lambda2: f32,
    pub opt_teacher: Adam,
    pub opt_weights: Adam,
    pub opt_masks: Adam,
    pub opt_transform: Adam,
    pub opt_multipliers: Adam,
    pub mask_rng: ChaCha8Rng,
    pub schedule: Option<SparsitySchedule>,
    pub structure: Option<PrunedStructure>,
    pub best: Option<Candidate>,
    pub teacher_accuracy: Option<f64>,
    pub distilled_accuracy: Option<f64>,
    pub pruned_accuracy: Option<f64>,
    pub final_accuracy: Option<f64>,
    pub history: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
    epoch_loss: f64,
}

impl RunState {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_vec(self)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

fn adam_for(tensors: &[&Tensor]) -> Adam {
    Adam::for_params(tensors)
}

/// Products of a finished run.
#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub state: RunState,
    pub structure: PrunedStructure,
    pub compact: CompactModel,
    /// Largest logit difference between compact and masked model on the probe.
    pub equivalence_diff: f32,
}

pub struct Trainer {
    pub config: PipelineConfig,
    pub model_config: ModelConfig,
    pub train: Dataset,
    pub dev: Dataset,
    pub state: RunState,
    teacher: Option<TeacherSnapshot>,
    acct: SparsityAccounting,
}

impl Trainer {
    pub fn new(config: PipelineConfig) -> Result<Self> {
        config.validate()?;
        let cfg = config.model_config();
        let seed = config.training.seed;
        let teacher = MaskableEncoder::init(cfg, &mut stream_rng(seed, 100))?;
        let families = if config.training.layer_masks {
            MaskFamilies::ALL
        } else {
            MaskFamilies::NO_LAYER
        };
        let masks = MaskSet::init(&cfg, config.gates, families, &mut stream_rng(seed, 101));
        let mask_shapes: Vec<&Tensor> = masks.log_alpha.families().iter().map(|f| f.1).collect();
        let transform = LayerTransform::identity(cfg.hidden);
        let state = RunState {
            phase: Phase::Teacher,
            epoch: 0,
            batch: 0,
            step: 0,
            opt_teacher: adam_for(&teacher.tensors()),
            opt_weights: adam_for(&teacher.tensors()),
            opt_masks: adam_for(&mask_shapes),
            opt_transform: adam_for(&[&transform.w]),
            opt_multipliers: adam_for(&[&Tensor::scalar(0.0), &Tensor::scalar(0.0)]),
            student: teacher.clone(),
            teacher,
            masks,
            transform,
            lambda1: 0.0,
            lambda2: 0.0,
            mask_rng: stream_rng(seed, 102),
            schedule: None,
            structure: None,
            best: None,
            teacher_accuracy: None,
            distilled_accuracy: None,
            pruned_accuracy: None,
            final_accuracy: None,
            history: Vec::new(),
            epochs: Vec::new(),
            epoch_loss: 0.0,
        };
        Self::resume(config, state)
    }

    /// Starts from an already trained teacher and skips the teacher phase.
    pub fn with_teacher(config: PipelineConfig, teacher: &MaskableEncoder) -> Result<Self> {
        let mut t = Self::new(config)?;
        if teacher.config != t.model_config {
            return Err(Error::Config("teacher shape does not match the configured model".into()));
        }
        t.state.teacher = teacher.clone();
        t.state.student = teacher.clone();
        t.state.teacher_accuracy = Some(t.accuracy(&CompactModel::dense(teacher)?)?);
        t.enter(Phase::Prewarm)?;
        Ok(t)
    }

    pub fn resume(config: PipelineConfig, state: RunState) -> Result<Self> {
        config.validate()?;
        let model_config = config.model_config();
        if state.student.config != model_config || state.teacher.config != model_config {
            return Err(Error::Config("run state does not match the configured model".into()));
        }
        let (train, dev) = config.task.generate()?;
        let teacher = if state.phase > Phase::Teacher {
            Some(TeacherSnapshot::new(&state.teacher, config.teacher_layers())?)
        } else {
            None
        };
        Ok(Self {
            acct: SparsityAccounting::new(&model_config),
            config,
            model_config,
            train,
            dev,
            state,
            teacher,
        })
    }

    pub fn is_done(&self) -> bool {
        self.state.phase == Phase::Done
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.train.len() / self.config.training.batch_size
    }

    fn phase_epochs(&self, phase: Phase) -> usize {
        let t = &self.config.training;
        match phase {
            Phase::Teacher => t.epochs_teacher,
            Phase::Prewarm => t.epochs_prewarm,
            Phase::Prune => t.epochs_prune,
            Phase::Finetune => t.epochs_finetune,
            Phase::Done => 0,
        }
    }

    /// Dev accuracy of a compact model.
    pub fn accuracy(&self, model: &CompactModel) -> Result<f64> {
        accuracy(model, &self.dev, self.config.training.eval_batch_size)
    }

    /// Gate values the student runs with in the current phase.
    fn fixed_masks(&self) -> MaskValues {
        match (&self.state.structure, self.state.phase) {
            (Some(s), Phase::Finetune | Phase::Done) => s.to_mask_values(&self.model_config),
            _ => MaskValues::ones(&self.model_config),
        }
    }

    /// Runs one training step and any epoch or phase bookkeeping that
    /// follows it.
    pub fn advance(&mut self) -> Result<()> {
        self.advance_inner().map_err(|e| {
            let s_hat = self.state.history.last().map_or(1.0, |r| r.s_hat);
            self.numerical(e, s_hat)
        })
    }

    fn advance_inner(&mut self) -> Result<()> {
        if self.is_done() {
            return Ok(());
        }
        if self.phase_epochs(self.state.phase) == 0 {
            return self.enter(self.state.phase.next());
        }
        let bs = self.config.training.batch_size;
        let mut order: Vec<usize> = (0..self.train.len()).collect();
        let stream = (self.state.phase.stream() << 32) | self.state.epoch as u64;
        order.shuffle(&mut stream_rng(self.config.training.seed, stream));
        let idx = &order[self.state.batch * bs..(self.state.batch + 1) * bs];
        let (tokens, labels) = self.train.batch(idx);
        let rec = self.train_step(&tokens, &labels)?;
        self.state.epoch_loss += rec.loss as f64;
        self.state.history.push(rec);
        self.state.step += 1;
        self.state.batch += 1;
        let nb = self.batches_per_epoch();
        if self.state.batch == nb {
            self.end_epoch()?;
        } else if self.state.phase == Phase::Prune {
            let every = (nb / self.config.training.evals_per_epoch.max(1)).max(1);
            if self.state.batch % every == 0 {
                self.probe_candidate()?;
            }
        }
        Ok(())
    }

    /// Mid-epoch structure check during pruning.
    fn probe_candidate(&mut self) -> Result<()> {
        let schedule = self.state.schedule.expect("prune phase has a schedule");
        if !schedule.warmed_up(self.state.step) {
            return Ok(());
        }
        let cfg = self.model_config;
        let s = binarize(&self.state.masks.deterministic(), &cfg)?;
        let sp = count_structure(&s, &cfg).sparsity(&cfg);
        let acc = self.accuracy(&extract(&self.state.student, &s)?)?;
        self.consider_candidate(acc, sp, false)
    }

    pub fn run(&mut self, checkpoint_dir: Option<&Path>) -> Result<()> {
        let every = self.config.training.checkpoint_every;
        while !self.is_done() {
            self.advance()?;
            if let Some(dir) = checkpoint_dir {
                if every > 0 && self.state.step % every == 0 && !self.is_done() {
                    self.state.save(dir.join("run_state.json"))?;
                }
            }
        }
        Ok(())
    }

    /// Runs to completion and extracts the compact model behind the
    /// equivalence gate.
    pub fn finish(mut self, checkpoint_dir: Option<&Path>) -> Result<PipelineOutput> {
        self.run(checkpoint_dir)?;
        let structure = self
            .state
            .structure
            .clone()
            .ok_or_else(|| Error::Numerical("pipeline finished without a structure".into()))?;
        let compact = extract(&self.state.student, &structure)?;
        let n = self.dev.len().min(self.config.training.eval_batch_size);
        let (probe, _) = self.dev.batch(&(0..n).collect::<Vec<_>>());
        let masked = self.state.student.logits(&structure.to_mask_values(&self.model_config), &probe)?;
        let diff = masked.max_abs_diff(&compact.logits(&probe)?);
        if !(diff <= EQUIVALENCE_TOLERANCE) {
            return Err(Error::EquivalenceGate {
                max_abs_diff: diff,
                tolerance: EQUIVALENCE_TOLERANCE,
            });
        }
        Ok(PipelineOutput {
            state: self.state,
            structure,
            compact,
            equivalence_diff: diff,
        })
    }

    fn enter(&mut self, phase: Phase) -> Result<()> {
        let nb = self.batches_per_epoch() as u64;
        let prune_epochs = self.phase_epochs(Phase::Prune);
        let st = &mut self.state;
        st.phase = phase;
        st.epoch = 0;
        st.batch = 0;
        st.epoch_loss = 0.0;
        match phase {
            Phase::Prewarm => {
                self.teacher = Some(TeacherSnapshot::new(&st.teacher, self.config.teacher_layers())?);
                st.student = st.teacher.clone();
            }
            Phase::Prune => {
                st.schedule = Some(SparsitySchedule {
                    start_step: st.step,
                    warmup_steps: nb * self.config.training.sparsity_warmup_epochs as u64,
                    final_target: self.config.training.target_sparsity,
                });
            }
            Phase::Finetune => {
                if let Some(best) = st.best.take() {
                    st.student = best.student;
                    st.transform = best.transform;
                    st.structure = Some(best.structure);
                    st.pruned_accuracy = Some(best.dev_accuracy);
                }
                if st.structure.is_none() {
                    // no pruning epochs ran: the dense student is the result
                    let s = if prune_epochs == 0 {
                        PrunedStructure::identity(&self.model_config)
                    } else {
                        binarize(&st.masks.deterministic(), &self.model_config)?
                    };
                    st.structure = Some(s);
                }
                st.opt_weights = adam_for(&st.student.tensors());
                st.opt_transform = adam_for(&[&st.transform.w]);
            }
            Phase::Done => {
                if st.structure.is_none() {
                    st.structure = Some(PrunedStructure::identity(&self.model_config));
                }
                let s = st.structure.clone().expect("set above");
                let acc = self.accuracy(&extract(&self.state.student, &s)?)?;
                self.state.final_accuracy = Some(acc);
            }
            Phase::Teacher => {}
        }
        Ok(())
    }

    fn end_epoch(&mut self) -> Result<()> {
        let cfg = self.model_config;
        let phase = self.state.phase;
        let train_loss = self.state.epoch_loss / self.batches_per_epoch() as f64;
        let (model, sparsity, expected) = match phase {
            Phase::Teacher => (CompactModel::dense(&self.state.teacher)?, 0.0, 0.0),
            Phase::Prewarm => (CompactModel::dense(&self.state.student)?, 0.0, 0.0),
            Phase::Prune => {
                let det = self.state.masks.deterministic();
                let s = binarize(&det, &cfg)?;
                let sp = count_structure(&s, &cfg).sparsity(&cfg);
                let exp = 1.0 - l0::retained_fraction_values(&det, &self.acct)?;
                (extract(&self.state.student, &s)?, sp, exp)
            }
            Phase::Finetune => {
                let s = self.state.structure.as_ref().expect("finetune has a structure");
                let sp = count_structure(s, &cfg).sparsity(&cfg);
                (extract(&self.state.student, s)?, sp, sp)
            }
            Phase::Done => unreachable!("no epochs after the run ends"),
        };
        let acc = self.accuracy(&model)?;
        self.state.epochs.push(EpochRecord {
            phase,
            epoch: self.state.epoch,
            train_loss,
            dev_accuracy: acc,
            sparsity,
            expected_sparsity: expected,
        });
        match phase {
            Phase::Teacher => self.state.teacher_accuracy = Some(acc),
            Phase::Prewarm => self.state.distilled_accuracy = Some(acc),
            Phase::Prune => {
                let last = self.state.epoch + 1 == self.phase_epochs(Phase::Prune);
                self.consider_candidate(acc, sparsity, last)?
            }
            _ => {}
        }
        self.state.epoch += 1;
        self.state.batch = 0;
        self.state.epoch_loss = 0.0;
        if self.state.epoch == self.phase_epochs(phase) {
            self.enter(phase.next())?;
        }
        Ok(())
    }

    /// Keeps the best dev-accuracy structure whose sparsity is within
    /// tolerance of the target once the schedule has warmed up. Before any
    /// epoch qualifies, the one closest to the target is held.
    fn consider_candidate(&mut self, acc: f64, sparsity: f64, last: bool) -> Result<()> {
        let schedule = self.state.schedule.expect("prune phase has a schedule");
        let warm = schedule.warmed_up(self.state.step);
        if !warm && !last {
            return Ok(());
        }
        let t = self.config.training.target_sparsity;
        let tol = self.config.training.sparsity_tolerance;
        let gap = (sparsity - t).abs();
        let better = match &self.state.best {
            None => true,
            Some(b) => {
                let b_gap = (b.sparsity - t).abs();
                match (gap <= tol, b_gap <= tol) {
                    (true, false) => true,
                    (false, true) => false,
                    (true, true) => acc > b.dev_accuracy,
                    (false, false) => gap < b_gap,
                }
            }
        };
        if better {
            let structure = binarize(&self.state.masks.deterministic(), &self.model_config)?;
            self.state.best = Some(Candidate {
                epoch: self.state.epoch,
                dev_accuracy: acc,
                sparsity,
                structure,
                student: self.state.student.clone(),
                transform: self.state.transform.clone(),
            });
        }
        Ok(())
    }

    /// One optimizer step in the mode implied by the current phase.
    pub fn train_step(&mut self, tokens: &[Vec<usize>], labels: &[usize]) -> Result<StepRecord> {
        let phase = self.state.phase;
        let tc = self.config.training.clone();
        let cfg = self.model_config;
        let mut g = Graph::new();

        if phase == Phase::Teacher {
            let vars = self.state.teacher.bind(&mut g, Trainable::ALL);
            let masks = MaskValues::ones(&cfg).to_graph(&mut g, false);
            let out = self.state.teacher.forward(&mut g, &vars, &masks, tokens)?;
            let loss = g.cross_entropy(out.logits, labels)?;
            let l = g.value(loss).item();
            self.check_finite(l, 1.0)?;
            let grads = g.backward(loss)?;
            let mut gw: Vec<Tensor> = vars
                .all
                .iter()
                .zip(self.state.teacher.tensors())
                .map(|(&v, t)| grads.get_or_zeros(v, t))
                .collect();
            clip_global_norm(&mut gw, tc.clip_norm);
            let mut params = self.state.teacher.tensors_mut();
            self.state.opt_teacher.update(&mut params, &gw, tc.lr_teacher, false)?;
            return Ok(self.record(l, l, 0.0, 1.0, 0.0));
        }

        let pruning = phase == Phase::Prune;
        let vars = self.state.student.bind(&mut g, Trainable::ALL);
        let la = pruning.then(|| self.state.masks.bind(&mut g));
        let masks: MaskVars = match &la {
            Some(la) => {
                let u = self.state.masks.draw_uniforms(&mut self.state.mask_rng);
                self.state.masks.sample(&mut g, la, &u)?
            }
            None => self.fixed_masks().to_graph(&mut g, false),
        };
        let out = self.state.student.forward(&mut g, &vars, &masks, tokens);
        let out = out.map_err(|e| self.numerical(e, 1.0))?;

        let w_layer = g.param(self.state.transform.w.clone());
        let (task, layer) = match tc.distillation {
            Distillation::None => (g.cross_entropy(out.logits, labels)?, None),
            mode => {
                let teacher = self.teacher.as_ref().expect("teacher snapshot after the teacher phase");
                let t_out = teacher.outputs(tokens)?;
                let t_logits = g.constant(t_out.logits);
                let pred = distill::prediction_loss(&mut g, out.logits, t_logits, tc.temperature)?;
                if mode == Distillation::Full {
                    let h_s: Vec<Tensor> = out.hidden_states.iter().map(|&h| g.value(h).clone()).collect();
                    let ffn = g.value(masks.ffn).data().to_vec();
                    let map = distill::match_layers(
                        &h_s,
                        &t_out.hidden,
                        teacher.layers(),
                        &self.state.transform,
                        &ffn,
                        tc.match_mode,
                    )?;
                    let h_t: Vec<Var> = t_out.hidden.into_iter().map(|h| g.constant(h)).collect();
                    let ll = distill::layer_loss(&mut g, &map, &out.hidden_states, &h_t, w_layer)?;
                    (pred, Some(ll))
                } else {
                    (pred, None)
                }
            }
        };
        let objective = match layer {
            Some(ll) => distill::combined_loss(&mut g, task, ll, tc.distill_lambda)?,
            None => task,
        };

        let mut lambdas = None;
        let mut s_hat_value = 1.0f32;
        let mut target = 0.0f64;
        let total = if pruning {
            let s_hat = l0::retained_fraction(&mut g, &masks, &self.acct)?;
            s_hat_value = g.value(s_hat).item();
            target = self.state.schedule.expect("prune phase has a schedule").target(self.state.step);
            let l1 = g.param(Tensor::scalar(self.state.lambda1));
            let l2 = g.param(Tensor::scalar(self.state.lambda2));
            lambdas = Some((l1, l2));
            let pen = l0::lagrangian_penalty(&mut g, s_hat, l1, l2, (1.0 - target) as f32)?;
            g.add(objective, pen)?
        } else {
            objective
        };
        let loss = g.value(total).item();
        self.check_finite(loss, s_hat_value)?;
        let task_loss = g.value(task).item();
        let layer_loss = layer.map(|v| g.value(v).item()).unwrap_or(0.0);
        let grads = g.backward(total)?;

        let st = &mut self.state;
        let mut gw: Vec<Tensor> = vars
            .all
            .iter()
            .zip(st.student.tensors())
            .map(|(&v, t)| grads.get_or_zeros(v, t))
            .collect();
        gw.push(grads.get_or_zeros(w_layer, &st.transform.w));
        clip_global_norm(&mut gw, tc.clip_norm);
        let gt = gw.pop().expect("transform gradient");
        let lr = if phase == Phase::Finetune { tc.lr_finetune } else { tc.lr_weights };
        st.opt_weights.update(&mut st.student.tensors_mut(), &gw, lr, false)?;
        if layer.is_some() {
            st.opt_transform.update(&mut [&mut st.transform.w], &[gt], lr, false)?;
        }

        if let (Some(la), Some((l1, l2))) = (la, lambdas) {
            let mut gm: Vec<Tensor> = la
                .vars
                .iter()
                .zip(st.masks.log_alpha.families())
                .map(|(&v, (_, t))| grads.get_or_zeros(v, t))
                .collect();
            clip_global_norm(&mut gm, tc.clip_norm);
            st.opt_masks.update(&mut st.masks.tensors_mut(), &gm, tc.lr_masks, false)?;
            let mut l1t = Tensor::scalar(st.lambda1);
            let mut l2t = Tensor::scalar(st.lambda2);
            let gl = [
                grads.get_or_zeros(l1, &l1t),
                grads.get_or_zeros(l2, &l2t),
            ];
            st.opt_multipliers.update(&mut [&mut l1t, &mut l2t], &gl, tc.lr_multipliers, true)?;
            st.lambda1 = l1t.item();
            st.lambda2 = l2t.item();
        }
        Ok(StepRecord {
            target_sparsity: target,
            ..self.record(loss, task_loss, layer_loss, s_hat_value, target)
        })
    }

    fn record(&self, loss: f32, task_loss: f32, layer_loss: f32, s_hat: f32, target: f64) -> StepRecord {
        StepRecord {
            step: self.state.step,
            phase: self.state.phase,
            loss,
            task_loss,
            layer_loss,
            s_hat,
            target_sparsity: target,
            lambda1: self.state.lambda1,
            lambda2: self.state.lambda2,
        }
    }

    fn diagnostic(&self, s_hat: f32) -> String {
        format!(
            "step {} ({:?}): s_hat={s_hat}, lambda1={}, lambda2={}",
            self.state.step, self.state.phase, self.state.lambda1, self.state.lambda2
        )
    }

    fn check_finite(&self, loss: f32, s_hat: f32) -> Result<()> {
        if loss.is_finite() {
            Ok(())
        } else {
            Err(Error::Numerical(format!("non-finite loss {loss} at {}", self.diagnostic(s_hat))))
        }
    }

    fn numerical(&self, e: Error, s_hat: f32) -> Error {
        match e {
            Error::NonFinite(what) => Error::Numerical(format!("non-finite {what} at {}", self.diagnostic(s_hat))),
            other => other,
        }
    }
}

/// Fraction of `data` a compact model classifies correctly.
pub fn accuracy(model: &CompactModel, data: &Dataset, batch_size: usize) -> Result<f64> {
    let mut correct = 0usize;
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        let (tokens, labels) = data.batch(chunk);
        let logits = model.logits(&tokens)?;
        for (r, &y) in labels.iter().enumerate() {
            let row = logits.row(r);
            let pred = (0..row.len())
                .fold(0, |best, k| if row[k] > row[best] { k } else { best });
            correct += usize::from(pred == y);
        }
    }
    Ok(correct as f64 / data.len().max(1) as f64)
}
