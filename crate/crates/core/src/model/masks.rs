use serde::{Deserialize, Serialize};

use super::ModelConfig;
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Real-valued gates for the five mask families.
///
/// `hidden` is a single vector shared by every layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskValues {
    /// `[L]`
    pub mha: Tensor,
    /// `[L]`
    pub ffn: Tensor,
    /// `[L, N_h]`
    pub head: Tensor,
    /// `[L, d_f]`
    pub int: Tensor,
    /// `[d]`
    pub hidden: Tensor,
}

impl MaskValues {
    pub fn ones(cfg: &ModelConfig) -> Self {
        Self::full(cfg, 1.0)
    }

    pub fn full(cfg: &ModelConfig, value: f32) -> Self {
        Self {
            mha: Tensor::full(&[cfg.n_layers], value),
            ffn: Tensor::full(&[cfg.n_layers], value),
            head: Tensor::full(&[cfg.n_layers, cfg.n_heads], value),
            int: Tensor::full(&[cfg.n_layers, cfg.ffn_dim], value),
            hidden: Tensor::full(&[cfg.hidden], value),
        }
    }

    pub fn families(&self) -> [(&'static str, &Tensor); 5] {
        [
            ("mha", &self.mha),
            ("ffn", &self.ffn),
            ("head", &self.head),
            ("int", &self.int),
            ("hidden", &self.hidden),
        ]
    }

    pub fn families_mut(&mut self) -> [(&'static str, &mut Tensor); 5] {
        [
            ("mha", &mut self.mha),
            ("ffn", &mut self.ffn),
            ("head", &mut self.head),
            ("int", &mut self.int),
            ("hidden", &mut self.hidden),
        ]
    }

    /// Checks shapes against `cfg` and that every value lies in `[0, 1]`.
    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        let expected: [&[usize]; 5] = [
            &[cfg.n_layers],
            &[cfg.n_layers],
            &[cfg.n_layers, cfg.n_heads],
            &[cfg.n_layers, cfg.ffn_dim],
            &[cfg.hidden],
        ];
        for ((name, t), shape) in self.families().into_iter().zip(expected) {
            if t.shape() != shape {
                return Err(Error::MaskLayout(format!(
                    "{name} has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
            if let Some(v) = t.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
                return Err(Error::MaskLayout(format!("{name} value {v} outside [0, 1]")));
            }
        }
        Ok(())
    }

    pub fn to_graph(&self, g: &mut Graph, trainable: bool) -> MaskVars {
        let mut leaf = |t: &Tensor| {
            if trainable {
                g.param(t.clone())
            } else {
                g.constant(t.clone())
            }
        };
        MaskVars {
            mha: leaf(&self.mha),
            ffn: leaf(&self.ffn),
            head: leaf(&self.head),
            int: leaf(&self.int),
            hidden: leaf(&self.hidden),
        }
    }
}

/// Graph handles for the five mask families, laid out as in [`MaskValues`].
#[derive(Debug, Clone, Copy)]
pub struct MaskVars {
    pub mha: Var,
    pub ffn: Var,
    pub head: Var,
    pub int: Var,
    pub hidden: Var,
}

impl MaskVars {
    pub fn values(&self, g: &Graph) -> MaskValues {
        MaskValues {
            mha: g.value(self.mha).clone(),
            ffn: g.value(self.ffn).clone(),
            head: g.value(self.head).clone(),
            int: g.value(self.int).clone(),
            hidden: g.value(self.hidden).clone(),
        }
    }
}
