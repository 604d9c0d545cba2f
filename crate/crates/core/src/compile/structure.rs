use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{MaskValues, ModelConfig};
use crate::tensor::Tensor;

/// Surviving real gate values for every kept unit, aligned with the index
/// sets of [`PrunedStructure`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldScales {
    pub mha: Vec<f32>,
    pub ffn: Vec<f32>,
    pub heads: Vec<Vec<f32>>,
    pub int_dims: Vec<Vec<f32>>,
    pub hidden: Vec<f32>,
}

/// Discrete keep/drop decisions for every prunable unit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrunedStructure {
    pub keep_mha: Vec<bool>,
    pub keep_ffn: Vec<bool>,
    pub kept_heads: Vec<Vec<usize>>,
    pub kept_int_dims: Vec<Vec<usize>>,
    pub kept_hidden_dims: Vec<usize>,
    pub fold_scales: FoldScales,
}

impl PrunedStructure {
    /// Everything kept with unit scales.
    pub fn identity(cfg: &ModelConfig) -> Self {
        Self::from_mask_values(&MaskValues::ones(cfg)).expect("ones are a valid layout")
    }

    /// Units with nonzero gates are kept, scaled by their gate value.
    pub fn from_mask_values(m: &MaskValues) -> Result<Self> {
        let l = m.mha.numel();
        if m.ffn.numel() != l || m.head.rows() != l || m.int.rows() != l {
            return Err(Error::MaskLayout("inconsistent layer counts".into()));
        }
        let nz = |row: &[f32]| -> (Vec<usize>, Vec<f32>) {
            row.iter()
                .enumerate()
                .filter(|(_, &z)| z > 0.0)
                .map(|(i, &z)| (i, z))
                .unzip()
        };
        let (kept_hidden_dims, hidden) = nz(m.hidden.data());
        let mut s = Self {
            keep_mha: m.mha.data().iter().map(|&z| z > 0.0).collect(),
            keep_ffn: m.ffn.data().iter().map(|&z| z > 0.0).collect(),
            kept_heads: Vec::with_capacity(l),
            kept_int_dims: Vec::with_capacity(l),
            kept_hidden_dims,
            fold_scales: FoldScales {
                mha: m.mha.data().to_vec(),
                ffn: m.ffn.data().to_vec(),
                heads: Vec::with_capacity(l),
                int_dims: Vec::with_capacity(l),
                hidden,
            },
        };
        for i in 0..l {
            let (h, hs) = nz(m.head.row(i));
            s.kept_heads.push(h);
            s.fold_scales.heads.push(hs);
            let (f, fs) = nz(m.int.row(i));
            s.kept_int_dims.push(f);
            s.fold_scales.int_dims.push(fs);
        }
        s.normalize();
        Ok(s)
    }

    /// Enforces the layer/unit consistency rules: a layer with no kept units is
    /// dropped, and a dropped layer keeps no units.
    pub fn normalize(&mut self) {
        let no_hidden = self.kept_hidden_dims.is_empty();
        for i in 0..self.keep_mha.len() {
            if self.kept_heads[i].is_empty() || no_hidden {
                self.keep_mha[i] = false;
            }
            if !self.keep_mha[i] {
                self.kept_heads[i].clear();
                self.fold_scales.heads[i].clear();
                self.fold_scales.mha[i] = 0.0;
            }
            if self.kept_int_dims[i].is_empty() || no_hidden {
                self.keep_ffn[i] = false;
            }
            if !self.keep_ffn[i] {
                self.kept_int_dims[i].clear();
                self.fold_scales.int_dims[i].clear();
                self.fold_scales.ffn[i] = 0.0;
            }
        }
    }

    pub fn n_layers(&self) -> usize {
        self.keep_mha.len()
    }

    /// Gate values that make the masked model compute exactly what the compact
    /// model computes: zero for pruned units, the fold scale for kept ones.
    pub fn to_mask_values(&self, cfg: &ModelConfig) -> MaskValues {
        let mut m = MaskValues::full(cfg, 0.0);
        for i in 0..cfg.n_layers {
            if self.keep_mha[i] {
                m.mha.data_mut()[i] = self.fold_scales.mha[i];
            }
            if self.keep_ffn[i] {
                m.ffn.data_mut()[i] = self.fold_scales.ffn[i];
            }
            for (&h, &s) in self.kept_heads[i].iter().zip(&self.fold_scales.heads[i]) {
                m.head.data_mut()[i * cfg.n_heads + h] = s;
            }
            for (&f, &s) in self.kept_int_dims[i].iter().zip(&self.fold_scales.int_dims[i]) {
                m.int.data_mut()[i * cfg.ffn_dim + f] = s;
            }
        }
        for (&k, &s) in self.kept_hidden_dims.iter().zip(&self.fold_scales.hidden) {
            m.hidden.data_mut()[k] = s;
        }
        m
    }

    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        let l = cfg.n_layers;
        let err = |msg: String| Err(Error::StructureMismatch(msg));
        if self.keep_mha.len() != l
            || self.keep_ffn.len() != l
            || self.kept_heads.len() != l
            || self.kept_int_dims.len() != l
            || self.fold_scales.mha.len() != l
            || self.fold_scales.ffn.len() != l
            || self.fold_scales.heads.len() != l
            || self.fold_scales.int_dims.len() != l
        {
            return err(format!("expected {l} layers"));
        }
        let sorted_in = |idx: &[usize], bound: usize| {
            idx.windows(2).all(|w| w[0] < w[1]) && idx.iter().all(|&i| i < bound)
        };
        for i in 0..l {
            if !sorted_in(&self.kept_heads[i], cfg.n_heads)
                || self.kept_heads[i].len() != self.fold_scales.heads[i].len()
            {
                return err(format!("layer {i}: bad head set"));
            }
            if !sorted_in(&self.kept_int_dims[i], cfg.ffn_dim)
                || self.kept_int_dims[i].len() != self.fold_scales.int_dims[i].len()
            {
                return err(format!("layer {i}: bad intermediate set"));
            }
            if self.keep_mha[i] == self.kept_heads[i].is_empty() {
                return err(format!("layer {i}: MHA gate inconsistent with heads"));
            }
            if self.keep_ffn[i] == self.kept_int_dims[i].is_empty() {
                return err(format!("layer {i}: FFN gate inconsistent with dims"));
            }
        }
        if !sorted_in(&self.kept_hidden_dims, cfg.hidden)
            || self.kept_hidden_dims.len() != self.fold_scales.hidden.len()
        {
            return err("bad hidden set".into());
        }
        if self.kept_hidden_dims.is_empty() {
            return err("no hidden dimension kept".into());
        }
        Ok(())
    }

    /// Retained prunable parameters.
    pub fn retained_params(&self, cfg: &ModelConfig) -> u64 {
        let d = self.kept_hidden_dims.len() as u64;
        let dh = cfg.head_dim() as u64;
        (0..self.n_layers())
            .map(|i| {
                4 * dh * d * self.kept_heads[i].len() as u64
                    + 2 * d * self.kept_int_dims[i].len() as u64
            })
            .sum()
    }

    pub fn sparsity(&self, cfg: &ModelConfig) -> f64 {
        1.0 - self.retained_params(cfg) as f64 / cfg.full_size() as f64
    }

    pub fn all_layers_pruned(&self) -> bool {
        self.keep_mha.iter().chain(&self.keep_ffn).all(|k| !k)
    }
}

/// Indices to keep in one mask family: the top `floor(Σ z)` gates by value,
/// where equal values are pruned in ascending index order.
///
/// Pruning the smallest gates one at a time, the retained count first reaches
/// the family's expected mass `Σ z` at `floor(Σ z)`.
fn keep_top(values: &[f32], min_keep: usize) -> Vec<usize> {
    let mass: f64 = values.iter().map(|&v| v as f64).sum();
    let nonzero = values.iter().filter(|&&v| v > 0.0).count();
    let keep = (mass.floor() as usize).min(nonzero).max(min_keep.min(values.len()));
    let mut order: Vec<usize> = (0..values.len()).collect();
    // ascending by value, ties ascending by index: the first entries are pruned
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]).then(a.cmp(&b)));
    let mut kept: Vec<usize> = order[values.len() - keep..].to_vec();
    kept.sort_unstable();
    kept
}

/// Thresholds deterministic gate values into a structure, one family at a
/// time. A family's retained count is its expected mass rounded down;
/// surviving gates keep their real values as fold scales. At least one hidden
/// dimension always survives.
///
/// Layer gates are decided first. A head or intermediate gate then counts
/// with its contribution to the retained parameters, `z_layer · z_unit`, so
/// units inside a dropped layer never take a slot from a live one.
pub fn binarize(masks: &MaskValues, cfg: &ModelConfig) -> Result<PrunedStructure> {
    masks.validate(cfg)?;
    let mut bin = MaskValues::full(cfg, 0.0);
    let layer = |src: &Tensor, dst: &mut Tensor| {
        for k in keep_top(src.data(), 0) {
            dst.data_mut()[k] = src.data()[k];
        }
    };
    layer(&masks.mha, &mut bin.mha);
    layer(&masks.ffn, &mut bin.ffn);
    let units = |src: &Tensor, gate: &Tensor, dst: &mut Tensor| {
        let width = src.cols();
        let contribution: Vec<f32> = src
            .data()
            .iter()
            .enumerate()
            .map(|(k, &z)| z * gate.data()[k / width])
            .collect();
        for k in keep_top(&contribution, 0) {
            dst.data_mut()[k] = src.data()[k];
        }
    };
    units(&masks.head, &bin.mha, &mut bin.head);
    units(&masks.int, &bin.ffn, &mut bin.int);
    for k in keep_top(masks.hidden.data(), 1) {
        let z = masks.hidden.data()[k];
        // an all-zero hidden family still keeps one dimension at unit scale
        bin.hidden.data_mut()[k] = if z > 0.0 { z } else { 1.0 };
    }
    PrunedStructure::from_mask_values(&bin)
}
