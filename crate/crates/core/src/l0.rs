//! Hard concrete gates, the expected retained fraction `ŝ`, and the
//! Lagrangian sparsity penalty.
//!
//! `ŝ` is the retained fraction of the prunable parameters (all-open masks
//! give `ŝ = 1`), so a desired sparsity `p` corresponds to the equality
//! constraint `ŝ = 1 - p`.

use rand::Rng;
use rand_distr::{Distribution, Normal, Open01};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::model::{MaskValues, MaskVars, ModelConfig};
use crate::tensor::{self, Tensor};

/// Shape constants of the stretched, clamped concrete distribution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HardConcrete {
    pub beta: f32,
    pub l: f32,
    pub r: f32,
}

impl Default for HardConcrete {
    fn default() -> Self {
        Self {
            beta: 2.0 / 3.0,
            l: -0.1,
            r: 1.1,
        }
    }
}

impl HardConcrete {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0) || !(self.l < 0.0) || !(self.r > 1.0) {
            return Err(Error::Config(format!(
                "hard concrete needs beta > 0, l < 0, r > 1; got {self:?}"
            )));
        }
        Ok(())
    }

    /// Logistic noise `log(u / (1 - u))`.
    pub fn noise(u: f64) -> Result<f64> {
        if !(u > 0.0 && u < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "uniform draw must lie in (0, 1), got {u}"
            )));
        }
        Ok((u / (1.0 - u)).ln())
    }

    /// One gate sample for a given uniform draw.
    pub fn sample(&self, log_alpha: f32, u: f64) -> Result<f32> {
        let s = tensor::sigmoid(((Self::noise(u)? + log_alpha as f64) / self.beta as f64) as f32);
        Ok(self.stretch(s))
    }

    /// The `u = 1/2` point of the distribution: `min(1, max(0, σ(log α / β)(r - l) + l))`.
    pub fn deterministic(&self, log_alpha: f32) -> f32 {
        self.stretch(tensor::sigmoid(log_alpha / self.beta))
    }

    fn stretch(&self, s: f32) -> f32 {
        (s as f64 * (self.r - self.l) as f64 + self.l as f64).clamp(0.0, 1.0) as f32
    }

    /// `P(z > 0)`, the probability a gate is nonzero.
    pub fn prob_nonzero(&self, log_alpha: f32) -> f32 {
        let x = (-self.l as f64 / (self.r - self.l) as f64).ln()
            - (1.0 + self.l as f64 / (self.r - self.l) as f64).ln();
        tensor::sigmoid((log_alpha as f64 - self.beta as f64 * x) as f32)
    }
}

/// A single learnable gate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HardConcreteGate {
    pub log_alpha: f32,
    pub dist: HardConcrete,
}

impl HardConcreteGate {
    pub fn sample(&self, u: f64) -> Result<f32> {
        self.dist.sample(self.log_alpha, u)
    }

    pub fn deterministic(&self) -> f32 {
        self.dist.deterministic(self.log_alpha)
    }
}

/// Which mask families are learned; a disabled family is held at 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskFamilies {
    pub mha: bool,
    pub ffn: bool,
    pub head: bool,
    pub int: bool,
    pub hidden: bool,
}

impl Default for MaskFamilies {
    fn default() -> Self {
        Self::ALL
    }
}

impl MaskFamilies {
    pub const ALL: Self = Self {
        mha: true,
        ffn: true,
        head: true,
        int: true,
        hidden: true,
    };

    /// Fine-grained units only, without whole-layer gates.
    pub const NO_LAYER: Self = Self {
        mha: false,
        ffn: false,
        head: true,
        int: true,
        hidden: true,
    };

    fn as_array(&self) -> [bool; 5] {
        [self.mha, self.ffn, self.head, self.int, self.hidden]
    }
}

/// Learnable `log α` for every gate, laid out like [`MaskValues`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskSet {
    pub log_alpha: MaskValues,
    pub dist: HardConcrete,
    pub families: MaskFamilies,
}

/// Graph leaves for the `log α` of each family.
#[derive(Debug, Clone, Copy)]
pub struct LogAlphaVars {
    pub vars: [Var; 5],
}

pub const LOG_ALPHA_INIT_MEAN: f32 = 2.0;
pub const LOG_ALPHA_INIT_STD: f32 = 0.01;

impl MaskSet {
    pub fn init(
        cfg: &ModelConfig,
        dist: HardConcrete,
        families: MaskFamilies,
        rng: &mut impl Rng,
    ) -> Self {
        let normal = Normal::new(LOG_ALPHA_INIT_MEAN, LOG_ALPHA_INIT_STD).expect("std > 0");
        let mut log_alpha = MaskValues::full(cfg, 0.0);
        for (_, t) in log_alpha.families_mut() {
            t.data_mut().iter_mut().for_each(|x| *x = normal.sample(rng));
        }
        Self {
            log_alpha,
            dist,
            families,
        }
    }

    pub fn bind(&self, g: &mut Graph) -> LogAlphaVars {
        let fam = self.log_alpha.families();
        LogAlphaVars {
            vars: std::array::from_fn(|i| g.param(fam[i].1.clone())),
        }
    }

    /// One independent `U(0, 1)` draw per gate.
    pub fn draw_uniforms(&self, rng: &mut impl Rng) -> MaskValues {
        let mut u = self.log_alpha.clone();
        for (_, t) in u.families_mut() {
            t.data_mut().iter_mut().for_each(|x| {
                let v: f64 = Open01.sample(rng);
                *x = v as f32;
            });
        }
        u
    }

    /// Differentiable gate samples for fixed uniform draws `u`.
    pub fn sample(&self, g: &mut Graph, la: &LogAlphaVars, u: &MaskValues) -> Result<MaskVars> {
        let enabled = self.families.as_array();
        let us = u.families();
        let mut out = [la.vars[0]; 5];
        for i in 0..5 {
            let z = if enabled[i] {
                let noise = us[i]
                    .1
                    .data()
                    .iter()
                    .map(|&v| HardConcrete::noise(v as f64).map(|n| n as f32))
                    .collect::<Result<Vec<f32>>>()?;
                let noise = g.constant(Tensor::new(us[i].1.shape().to_vec(), noise)?);
                let pre = g.add(la.vars[i], noise)?;
                let pre = g.affine(pre, 1.0 / self.dist.beta, 0.0);
                let s = g.sigmoid(pre);
                let stretched = g.affine(s, self.dist.r - self.dist.l, self.dist.l);
                g.clamp(stretched, 0.0, 1.0)
            } else {
                g.constant(Tensor::ones(us[i].1.shape()))
            };
            out[i] = z;
        }
        Ok(MaskVars {
            mha: out[0],
            ffn: out[1],
            head: out[2],
            int: out[3],
            hidden: out[4],
        })
    }

    /// Eval-time gate values ([`HardConcrete::deterministic`]); disabled
    /// families are 1.
    pub fn deterministic(&self) -> MaskValues {
        let mut z = self.log_alpha.clone();
        let enabled = self.families.as_array();
        for (i, (_, t)) in z.families_mut().into_iter().enumerate() {
            for x in t.data_mut() {
                *x = if enabled[i] {
                    self.dist.deterministic(*x)
                } else {
                    1.0
                };
            }
        }
        z
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 5] {
        let [a, b, c, d, e] = self.log_alpha.families_mut();
        [a.1, b.1, c.1, d.1, e.1]
    }
}

/// Dimensions needed to turn gate values into a retained parameter count.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SparsityAccounting {
    pub n_layers: usize,
    pub n_heads: usize,
    pub head_dim: usize,
    pub ffn_dim: usize,
    pub hidden: usize,
    /// `4·d²·L + 2·d·d_f·L`
    pub full_size: u64,
}

impl SparsityAccounting {
    pub fn new(cfg: &ModelConfig) -> Self {
        Self {
            n_layers: cfg.n_layers,
            n_heads: cfg.n_heads,
            head_dim: cfg.head_dim(),
            ffn_dim: cfg.ffn_dim,
            hidden: cfg.hidden,
            full_size: cfg.full_size(),
        }
    }

    fn check(&self, shapes: [&[usize]; 5]) -> Result<()> {
        let expected: [&[usize]; 5] = [
            &[self.n_layers],
            &[self.n_layers],
            &[self.n_layers, self.n_heads],
            &[self.n_layers, self.ffn_dim],
            &[self.hidden],
        ];
        for (got, want) in shapes.iter().zip(expected) {
            if *got != want {
                return Err(Error::MaskLayout(format!(
                    "mask shape {got:?} does not match expected {want:?}"
                )));
            }
        }
        Ok(())
    }
}

/// `ŝ` as a graph node, built from factored sums.
pub fn retained_fraction(g: &mut Graph, masks: &MaskVars, acct: &SparsityAccounting) -> Result<Var> {
    acct.check([
        g.value(masks.mha).shape(),
        g.value(masks.ffn).shape(),
        g.value(masks.head).shape(),
        g.value(masks.int).shape(),
        g.value(masks.hidden).shape(),
    ])?;
    let m = acct.full_size as f32;
    let ones_h = g.constant(Tensor::ones(&[acct.n_heads, 1]));
    let ones_f = g.constant(Tensor::ones(&[acct.ffn_dim, 1]));
    let heads_per_layer = g.matmul(masks.head, ones_h)?;
    let int_per_layer = g.matmul(masks.int, ones_f)?;
    let mha = g.matmul(masks.mha, heads_per_layer)?;
    let ffn = g.matmul(masks.ffn, int_per_layer)?;
    let hidden = g.sum(masks.hidden);
    let mha = g.scale_by(mha, hidden)?;
    let ffn = g.scale_by(ffn, hidden)?;
    let mha = g.affine(mha, 4.0 * acct.head_dim as f32 / m, 0.0);
    let ffn = g.affine(ffn, 2.0 / m, 0.0);
    let total = g.add(mha, ffn)?;
    Ok(g.sum(total))
}

/// `ŝ` evaluated directly in `f64`.
pub fn retained_fraction_values(masks: &MaskValues, acct: &SparsityAccounting) -> Result<f64> {
    acct.check([
        masks.mha.shape(),
        masks.ffn.shape(),
        masks.head.shape(),
        masks.int.shape(),
        masks.hidden.shape(),
    ])?;
    Ok(retained_params_values(masks, acct) / acct.full_size as f64)
}

/// Retained parameter mass `ŝ · M` for layouts already checked.
pub(crate) fn retained_params_values(masks: &MaskValues, acct: &SparsityAccounting) -> f64 {
    let hidden: f64 = masks.hidden.data().iter().map(|&v| v as f64).sum();
    let mut mha = 0.0f64;
    let mut ffn = 0.0f64;
    for i in 0..acct.n_layers {
        let heads: f64 = masks.head.row(i).iter().map(|&v| v as f64).sum();
        let ints: f64 = masks.int.row(i).iter().map(|&v| v as f64).sum();
        mha += masks.mha.data()[i] as f64 * heads;
        ffn += masks.ffn.data()[i] as f64 * ints;
    }
    (4 * acct.head_dim) as f64 * mha * hidden + 2.0 * ffn * hidden
}

/// Equality-constraint multipliers and the current retained-fraction target.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LagrangianState {
    pub lambda1: f32,
    pub lambda2: f32,
    /// Target retained fraction `t = 1 - sparsity`.
    pub target: f32,
}

/// `λ1·(ŝ - t) + λ2·(ŝ - t)²` as a graph node; `lambda1`/`lambda2` are
/// one-element nodes.
pub fn lagrangian_penalty(
    g: &mut Graph,
    s_hat: Var,
    lambda1: Var,
    lambda2: Var,
    target: f32,
) -> Result<Var> {
    let gap = g.affine(s_hat, 1.0, -target);
    let lin = g.scale_by(gap, lambda1)?;
    let sq = g.mul(gap, gap)?;
    let quad = g.scale_by(sq, lambda2)?;
    g.add(lin, quad)
}

pub fn lagrangian_value(s_hat: f64, state: &LagrangianState) -> f64 {
    let gap = s_hat - state.target as f64;
    state.lambda1 as f64 * gap + state.lambda2 as f64 * gap * gap
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn sample_at_midpoint_with_unit_beta() {
        let hc = HardConcrete {
            beta: 1.0,
            l: -0.1,
            r: 1.1,
        };
        // s = sigmoid(0) = 0.5; z = 0.5 * 1.2 - 0.1 = 0.5
        assert!((hc.sample(0.0, 0.5).unwrap() - 0.5).abs() < 1e-7);
        assert!((HardConcrete::default().deterministic(0.0) - 0.5).abs() < 1e-7);
    }

    #[test]
    fn saturation() {
        let hc = HardConcrete::default();
        for u in [1e-6, 0.3, 0.5, 0.9, 1.0 - 1e-6] {
            assert_eq!(hc.sample(20.0, u).unwrap(), 1.0);
            assert_eq!(hc.sample(-20.0, u).unwrap(), 0.0);
        }
        assert_eq!(hc.deterministic(20.0), 1.0);
        assert_eq!(hc.deterministic(-20.0), 0.0);
    }

    #[test]
    fn endpoint_draws_rejected() {
        let hc = HardConcrete::default();
        assert!(hc.sample(0.0, 0.0).is_err());
        assert!(hc.sample(0.0, 1.0).is_err());
    }

    #[test]
    fn samples_stay_in_unit_interval() {
        let hc = HardConcrete::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..10_000 {
            let u: f64 = Open01.sample(&mut rng);
            let la: f32 = rng.random_range(-8.0..8.0);
            let z = hc.sample(la, u).unwrap();
            assert!((0.0..=1.0).contains(&z));
        }
    }

    #[test]
    fn graph_sample_matches_scalar_formula() {
        let cfg = ModelConfig::tiny();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let set = MaskSet::init(&cfg, HardConcrete::default(), MaskFamilies::ALL, &mut rng);
        let u = set.draw_uniforms(&mut rng);
        let mut g = Graph::new();
        let la = set.bind(&mut g);
        let z = set.sample(&mut g, &la, &u).unwrap();
        let zv = z.values(&g);
        for ((_, la_t), ((_, u_t), (_, z_t))) in set
            .log_alpha
            .families()
            .into_iter()
            .zip(u.families().into_iter().zip(zv.families()))
        {
            for i in 0..la_t.numel() {
                let want = set.dist.sample(la_t.data()[i], u_t.data()[i] as f64).unwrap();
                assert!((want - z_t.data()[i]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn disabled_families_are_open() {
        let cfg = ModelConfig::tiny();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut set = MaskSet::init(&cfg, HardConcrete::default(), MaskFamilies::NO_LAYER, &mut rng);
        set.log_alpha.mha.data_mut().iter_mut().for_each(|x| *x = -10.0);
        let det = set.deterministic();
        assert!(det.mha.data().iter().all(|&z| z == 1.0));
        let u = set.draw_uniforms(&mut rng);
        let mut g = Graph::new();
        let la = set.bind(&mut g);
        let z = set.sample(&mut g, &la, &u).unwrap();
        assert!(g.value(z.mha).data().iter().all(|&v| v == 1.0));
        assert!(g.value(z.ffn).data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn retained_fraction_examples() {
        let cfg = ModelConfig::tiny();
        let acct = SparsityAccounting::new(&cfg);
        let mut m = MaskValues::ones(&cfg);
        assert_eq!(retained_fraction_values(&m, &acct).unwrap(), 1.0);
        m.head.data_mut()[1] = 0.0;
        assert_eq!(retained_fraction_values(&m, &acct).unwrap(), 896.0 / 1024.0);
        let mut m = MaskValues::ones(&cfg);
        m.hidden.data_mut()[3] = 0.0;
        assert_eq!(retained_fraction_values(&m, &acct).unwrap(), 896.0 / 1024.0);

        let mut g = Graph::new();
        let mv = m.to_graph(&mut g, false);
        let s = retained_fraction(&mut g, &mv, &acct).unwrap();
        assert!((g.value(s).item() - 0.875).abs() < 1e-7);
    }

    #[test]
    fn retained_fraction_rejects_layout_mismatch() {
        let cfg = ModelConfig::tiny();
        let mut other = cfg;
        other.n_heads = 4;
        let acct = SparsityAccounting::new(&other);
        assert!(retained_fraction_values(&MaskValues::ones(&cfg), &acct).is_err());
    }

    #[test]
    fn lagrangian_examples() {
        let st = |l1, l2, t| LagrangianState {
            lambda1: l1,
            lambda2: l2,
            target: t,
        };
        assert_eq!(lagrangian_value(0.4f32 as f64, &st(3.0, 5.0, 0.4)), 0.0);
        assert!((lagrangian_value(0.5, &st(0.0, 1.0, 0.4)) - 0.01).abs() < 1e-7);
        assert!((lagrangian_value(0.35, &st(1.0, 0.0, 0.4)) + 0.05).abs() < 1e-7);

        let mut g = Graph::new();
        let s = g.param(Tensor::scalar(0.5));
        let l1 = g.param(Tensor::scalar(0.0));
        let l2 = g.param(Tensor::scalar(1.0));
        let p = lagrangian_penalty(&mut g, s, l1, l2, 0.4).unwrap();
        assert!((g.value(p).item() - 0.01).abs() < 1e-7);
        let grads = g.backward(p).unwrap();
        // dL/dλ1 = gap, dL/dλ2 = gap², dL/dŝ = λ1 + 2λ2·gap
        assert!((grads.get(l1).unwrap().item() - 0.1).abs() < 1e-6);
        assert!((grads.get(l2).unwrap().item() - 0.01).abs() < 1e-6);
        assert!((grads.get(s).unwrap().item() - 0.2).abs() < 1e-6);
    }

    #[test]
    fn penalty_minimizer_location() {
        // for λ2 > 0 the minimizer over ŝ is t - λ1 / (2 λ2)
        for (l1, l2, t) in [(0.3f32, 2.0f32, 0.4f32), (-1.0, 0.5, 0.1), (0.0, 3.0, 0.9)] {
            let state = LagrangianState {
                lambda1: l1,
                lambda2: l2,
                target: t,
            };
            let star = t as f64 - l1 as f64 / (2.0 * l2 as f64);
            let f0 = lagrangian_value(star, &state);
            for delta in [-1e-3, 1e-3, -0.1, 0.1] {
                assert!(lagrangian_value(star + delta, &state) > f0);
            }
        }
    }
}
