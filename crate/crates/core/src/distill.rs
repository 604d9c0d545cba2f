//! Teacher-to-student distillation losses and dynamic layer matching.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::compile::CompactModel;
use crate::error::{Error, Result};
use crate::model::MaskableEncoder;
use crate::tensor::{self, Tensor};

/// How teacher layers are paired with student layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MatchMode {
    /// Closest student layer with an unpruned FFN, recomputed every batch.
    #[default]
    Dynamic,
    /// As `Dynamic`, but walking teacher layers from the top down and only
    /// allowing strictly lower student layers than the previous match.
    Monotonic,
    /// Teacher layer `i` always distills into student layer `i`.
    Fixed,
}

/// `student[k]` is the student layer matched to `teacher_layers[k]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerMap {
    pub teacher_layers: Vec<usize>,
    pub student: Vec<Option<usize>>,
}

impl LayerMap {
    pub fn matched(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.student
            .iter()
            .enumerate()
            .filter_map(|(k, s)| s.map(|j| (k, j)))
    }
}

/// The shared `d × d` map applied to student states before comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerTransform {
    pub w: Tensor,
}

impl LayerTransform {
    pub fn identity(d: usize) -> Self {
        Self {
            w: Tensor::identity(d),
        }
    }
}

/// Teacher layers to distill from: every third layer of a 12-layer teacher
/// (0-based 2, 5, 8, 11), scaled to shallower teachers.
pub fn default_teacher_layers(n_layers: usize) -> Vec<usize> {
    let step = (n_layers / 4).max(1);
    (step - 1..n_layers).step_by(step).collect()
}

/// Frozen teacher. Its forward never touches a tape, so it cannot receive
/// gradients.
#[derive(Debug, Clone)]
pub struct TeacherSnapshot {
    model: CompactModel,
    layers: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct TeacherOutputs {
    pub logits: Tensor,
    /// Block outputs for each teacher layer in the snapshot's layer set.
    pub hidden: Vec<Tensor>,
}

impl TeacherSnapshot {
    pub fn new(teacher: &MaskableEncoder, layers: Vec<usize>) -> Result<Self> {
        if let Some(&bad) = layers.iter().find(|&&i| i >= teacher.config.n_layers) {
            return Err(Error::Config(format!(
                "teacher layer {bad} out of range for {} layers",
                teacher.config.n_layers
            )));
        }
        Ok(Self {
            model: CompactModel::dense(teacher)?,
            layers,
        })
    }

    pub fn layers(&self) -> &[usize] {
        &self.layers
    }

    pub fn outputs(&self, tokens: &[Vec<usize>]) -> Result<TeacherOutputs> {
        let out = self.model.forward(tokens)?;
        Ok(TeacherOutputs {
            logits: out.logits,
            hidden: self.layers.iter().map(|&i| out.hidden_states[i].clone()).collect(),
        })
    }
}

/// `T² · KL(p_s ∥ p_t)` of temperature-softened distributions, averaged over
/// rows.
pub fn prediction_loss(g: &mut Graph, student_logits: Var, teacher_logits: Var, temperature: f32) -> Result<Var> {
    if !(temperature > 0.0) {
        return Err(Error::InvalidArgument(format!("temperature {temperature} must be positive")));
    }
    g.kl_div(student_logits, teacher_logits, temperature)
}

fn mse64(a: &[f32], b: &[f32]) -> f64 {
    let s: f64 = a
        .iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum();
    s / a.len() as f64
}

/// `mse[k][j] = MSE(H_s^j · W, H_t^k)` over all tokens of the batch.
pub fn mse_matrix(student: &[Tensor], teacher: &[Tensor], transform: &LayerTransform) -> Result<Vec<Vec<f64>>> {
    let d = transform.w.rows();
    let projected: Vec<Vec<f32>> = student
        .iter()
        .map(|h| {
            if h.cols() != d {
                return Err(Error::Shape {
                    op: "mse_matrix",
                    lhs: h.shape().to_vec(),
                    rhs: transform.w.shape().to_vec(),
                });
            }
            Ok(tensor::matmul(h.data(), transform.w.data(), h.rows(), d, transform.w.cols()))
        })
        .collect::<Result<_>>()?;
    teacher
        .iter()
        .map(|t| {
            projected
                .iter()
                .map(|p| {
                    if p.len() != t.numel() {
                        return Err(Error::Shape {
                            op: "mse_matrix",
                            lhs: vec![p.len()],
                            rhs: t.shape().to_vec(),
                        });
                    }
                    Ok(mse64(p, t.data()))
                })
                .collect()
        })
        .collect()
}

/// Pairs rows of an MSE matrix (teacher layers, ascending) with columns
/// (student layers). Only students with `z_FFN > 0` are eligible; ties go to
/// the lower student index.
pub fn match_from_mse(mse: &[Vec<f64>], teacher_layers: &[usize], ffn_gates: &[f32], mode: MatchMode) -> Vec<Option<usize>> {
    let eligible = |j: usize| ffn_gates[j] > 0.0;
    let argmin = |row: &[f64], below: usize| -> Option<usize> {
        let mut best: Option<usize> = None;
        for j in (0..below.min(row.len())).filter(|&j| eligible(j)) {
            if best.is_none_or(|b| row[j] < row[b]) {
                best = Some(j);
            }
        }
        best
    };
    match mode {
        MatchMode::Dynamic => mse.iter().map(|row| argmin(row, usize::MAX)).collect(),
        MatchMode::Monotonic => {
            let mut out = vec![None; mse.len()];
            let mut bound = usize::MAX;
            for k in (0..mse.len()).rev() {
                out[k] = argmin(&mse[k], bound);
                match out[k] {
                    Some(j) => bound = j,
                    None => break,
                }
            }
            out
        }
        MatchMode::Fixed => teacher_layers
            .iter()
            .map(|&i| (i < ffn_gates.len()).then_some(i))
            .collect(),
    }
}

pub fn match_layers(
    student: &[Tensor],
    teacher: &[Tensor],
    teacher_layers: &[usize],
    transform: &LayerTransform,
    ffn_gates: &[f32],
    mode: MatchMode,
) -> Result<LayerMap> {
    if teacher.len() != teacher_layers.len() || student.len() != ffn_gates.len() {
        return Err(Error::InvalidArgument(format!(
            "{} teacher states for {} layers, {} student states for {} gates",
            teacher.len(),
            teacher_layers.len(),
            student.len(),
            ffn_gates.len()
        )));
    }
    let student_map = if mode == MatchMode::Fixed {
        match_from_mse(&[], teacher_layers, ffn_gates, mode)
    } else {
        match_from_mse(&mse_matrix(student, teacher, transform)?, teacher_layers, ffn_gates, mode)
    };
    Ok(LayerMap {
        teacher_layers: teacher_layers.to_vec(),
        student: student_map,
    })
}

/// `Σ MSE(H_s^{m(i)} · W, H_t^i)` over matched pairs; zero when nothing
/// matched.
pub fn layer_loss(g: &mut Graph, map: &LayerMap, student: &[Var], teacher: &[Var], transform: Var) -> Result<Var> {
    let mut total: Option<Var> = None;
    for (k, j) in map.matched() {
        let hw = g.matmul(student[j], transform)?;
        let l = g.mse(hw, teacher[k])?;
        total = Some(match total {
            Some(t) => g.add(t, l)?,
            None => l,
        });
    }
    Ok(total.unwrap_or_else(|| g.constant(Tensor::scalar(0.0))))
}

/// `λ·L_pred + (1 − λ)·L_layer`.
pub fn combined_loss(g: &mut Graph, pred: Var, layer: Var, lambda: f32) -> Result<Var> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::InvalidArgument(format!("distillation weight {lambda} outside [0, 1]")));
    }
    let a = g.affine(pred, lambda, 0.0);
    let b = g.affine(layer, 1.0 - lambda, 0.0);
    g.add(a, b)
}
