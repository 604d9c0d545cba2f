//! Independent reference computations shared by the test targets.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use cofi::autodiff::{grad_check, Graph, Var};
use cofi::distill::{self, LayerMap};
use cofi::l0::{self, HardConcrete, LogAlphaVars, MaskFamilies, MaskSet, SparsityAccounting};
use cofi::model::{BlockVars, EncoderVars, MaskValues, MaskableEncoder, ModelConfig};
use cofi::tensor::Tensor;
use cofi::Result;

pub fn toy() -> ModelConfig {
    ModelConfig {
        n_layers: 4,
        hidden: 64,
        n_heads: 4,
        ffn_dim: 256,
        vocab: 64,
        max_seq: 32,
        n_classes: 2,
    }
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f32) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-1.0..1.0) * scale).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Worst relative error of `build` over ten random points. Tensor outputs are
/// contracted against fixed random weights first.
pub fn primitive_error<F>(name: &str, shapes: &[&[usize]], scale: f32, mut build: F) -> f64
where
    F: FnMut(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(name.len() as u64 * 7919);
    let mut worst = 0.0f64;
    for _ in 0..10 {
        let params: Vec<Tensor> = shapes.iter().map(|s| rand_tensor(&mut rng, s, scale)).collect();
        let seed = rng.random::<u64>();
        let report = grad_check(
            |g, vars| {
                let y = build(g, vars)?;
                if g.value(y).is_scalar() {
                    return Ok(y);
                }
                let shape = g.value(y).shape().to_vec();
                let w = g.constant(rand_tensor(&mut ChaCha8Rng::seed_from_u64(seed), &shape, 1.0));
                let p = g.mul(y, w)?;
                Ok(g.sum(p))
            },
            &params,
            1e-3,
        )
        .unwrap();
        worst = worst.max(report.max_rel_error);
    }
    worst
}

/// Worst finite-difference error of every graph primitive.
pub fn primitive_errors() -> Vec<(&'static str, f64)> {
    vec![
        ("matmul", primitive_error("matmul", &[&[3, 4], &[4, 2]], 1.0, |g, v| g.matmul(v[0], v[1]))),
        ("add", primitive_error("add", &[&[3, 4], &[3, 4]], 1.0, |g, v| g.add(v[0], v[1]))),
        ("sub", primitive_error("sub", &[&[3, 4], &[3, 4]], 1.0, |g, v| g.sub(v[0], v[1]))),
        ("mul", primitive_error("mul", &[&[3, 4], &[3, 4]], 1.0, |g, v| g.mul(v[0], v[1]))),
        ("scale_by", primitive_error("scale_by", &[&[3, 4], &[1]], 1.0, |g, v| g.scale_by(v[0], v[1]))),
        ("scale_rows", primitive_error("scale_rows", &[&[3, 4], &[3]], 1.0, |g, v| g.scale_rows(v[0], v[1]))),
        ("scale_cols", primitive_error("scale_cols", &[&[3, 4], &[4]], 1.0, |g, v| g.scale_cols(v[0], v[1]))),
        ("gelu", primitive_error("gelu", &[&[3, 4]], 2.0, |g, v| Ok(g.gelu(v[0])))),
        ("softmax", primitive_error("softmax", &[&[3, 5]], 2.0, |g, v| Ok(g.softmax(v[0])))),
        ("layer_norm", primitive_error("layer_norm", &[&[3, 6], &[6], &[6]], 1.0, |g, v| {
            g.layer_norm(v[0], v[1], v[2], None)
        })),
        ("layer_norm_support", primitive_error("layer_norm_support", &[&[3, 6], &[6], &[6]], 1.0, |g, v| {
            g.layer_norm(v[0], v[1], v[2], Some(vec![0, 2, 3, 5]))
        })),
        ("mse", primitive_error("mse", &[&[3, 4], &[3, 4]], 1.0, |g, v| g.mse(v[0], v[1]))),
        ("kl_div", primitive_error("kl_div", &[&[4, 3], &[4, 3]], 2.0, |g, v| g.kl_div(v[0], v[1], 2.0))),
        ("cross_entropy", primitive_error("cross_entropy", &[&[4, 3]], 2.0, |g, v| {
            g.cross_entropy(v[0], &[0, 2, 1, 2])
        })),
        ("sigmoid", primitive_error("sigmoid", &[&[3, 4]], 3.0, |g, v| Ok(g.sigmoid(v[0])))),
        ("log", primitive_error("log", &[&[3, 4]], 1.0, |g, v| {
            // keep the argument well inside the domain
            let sq = g.mul(v[0], v[0])?;
            let shifted = g.affine(sq, 1.0, 0.5);
            Ok(g.log(shifted))
        })),
        ("clamp", primitive_error("clamp", &[&[3, 4]], 1.0, |g, v| {
            // some entries saturate; the kinks sit far from every sample
            let s = g.affine(v[0], 1.0, 0.01);
            Ok(g.clamp(s, -0.5, 0.5))
        })),
        ("affine", primitive_error("affine", &[&[3, 4]], 1.0, |g, v| Ok(g.affine(v[0], -1.5, 0.25)))),
        ("sum", primitive_error("sum", &[&[3, 4]], 1.0, |g, v| Ok(g.sum(v[0])))),
        ("transpose", primitive_error("transpose", &[&[3, 4]], 1.0, |g, v| g.transpose(v[0]))),
        ("slice_rows", primitive_error("slice_rows", &[&[5, 4]], 1.0, |g, v| g.slice_rows(v[0], 1, 3))),
        ("slice_cols", primitive_error("slice_cols", &[&[3, 6]], 1.0, |g, v| g.slice_cols(v[0], 2, 3))),
        ("gather_rows", primitive_error("gather_rows", &[&[4, 3]], 1.0, |g, v| g.gather_rows(v[0], &[3, 0, 3, 1]))),
        ("concat_rows", primitive_error("concat_rows", &[&[2, 3], &[1, 3]], 1.0, |g, v| g.concat_rows(&[v[0], v[1]]))),
        ("concat_cols", primitive_error("concat_cols", &[&[2, 3], &[2, 1]], 1.0, |g, v| g.concat_cols(&[v[0], v[1]]))),
    ]
}

/// Rebuilds encoder handles from a flat slice in `named_tensors` order.
fn encoder_vars(vars: &[Var], n_layers: usize) -> EncoderVars {
    let blocks = (0..n_layers)
        .map(|i| {
            let b = &vars[4 + 10 * i..];
            BlockVars {
                wq: b[0],
                wk: b[1],
                wv: b[2],
                wo: b[3],
                attn_ln_gamma: b[4],
                attn_ln_beta: b[5],
                wu: b[6],
                wd: b[7],
                ffn_ln_gamma: b[8],
                ffn_ln_beta: b[9],
            }
        })
        .collect();
    let n = 5 + 10 * n_layers;
    EncoderVars {
        tok_emb: vars[0],
        pos_emb: vars[1],
        emb_ln_gamma: vars[2],
        emb_ln_beta: vars[3],
        blocks,
        classifier: vars[n - 1],
        all: vars[..n].to_vec(),
    }
}

/// Finite-difference error of masked encoder + distillation + Lagrangian
/// with respect to every weight, gate logit, the transform and both
/// multipliers. Returns `(max relative error, coordinates checked)`.
pub fn full_objective_error() -> (f64, usize) {
    let cfg = ModelConfig::tiny();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let model = MaskableEncoder::init(cfg, &mut rng).unwrap();
    let teacher = MaskableEncoder::init(cfg, &mut rng).unwrap();
    let toks: Vec<Vec<usize>> = (0..3)
        .map(|_| (0..5).map(|_| rng.random_range(0..cfg.vocab)).collect())
        .collect();
    let labels = [0usize, 2, 1];
    let t_out = teacher.forward_values(&MaskValues::ones(&cfg), &toks).unwrap();

    // log_alpha near zero with interior draws keeps every gate off the clamp
    let mut masks = MaskSet::init(&cfg, HardConcrete::default(), MaskFamilies::ALL, &mut rng);
    for (_, t) in masks.log_alpha.families_mut() {
        t.data_mut().iter_mut().for_each(|x| *x = rng.random_range(-0.5..0.5));
    }
    let mut u = masks.draw_uniforms(&mut rng);
    for (_, t) in u.families_mut() {
        t.data_mut().iter_mut().for_each(|x| *x = rng.random_range(0.3..0.7));
    }
    let transform = rand_tensor(&mut rng, &[cfg.hidden, cfg.hidden], 0.5);
    let map = LayerMap {
        teacher_layers: vec![0, 1],
        student: vec![Some(1), Some(0)],
    };
    let acct = SparsityAccounting::new(&cfg);

    let mut params: Vec<Tensor> = model.tensors().into_iter().cloned().collect();
    let n_model = params.len();
    params.extend(masks.log_alpha.families().iter().map(|f| f.1.clone()));
    params.push(transform);
    params.push(Tensor::scalar(0.7));
    params.push(Tensor::scalar(1.3));

    let report = grad_check(
        |g: &mut Graph, v: &[Var]| {
            let ev = encoder_vars(v, cfg.n_layers);
            let la = LogAlphaVars {
                vars: std::array::from_fn(|i| v[n_model + i]),
            };
            let z = masks.sample(g, &la, &u)?;
            let out = model.forward(g, &ev, &z, &toks)?;
            let tl = g.constant(t_out.logits.clone());
            let th: Vec<Var> = t_out.hidden_states.iter().map(|h| g.constant(h.clone())).collect();
            let pred = distill::prediction_loss(g, out.logits, tl, 2.0)?;
            let layer = distill::layer_loss(g, &map, &out.hidden_states, &th, v[n_model + 5])?;
            let obj = distill::combined_loss(g, pred, layer, 0.5)?;
            let ce = g.cross_entropy(out.logits, &labels)?;
            let obj = g.add(obj, ce)?;
            let s_hat = l0::retained_fraction(g, &z, &acct)?;
            let pen = l0::lagrangian_penalty(g, s_hat, v[n_model + 6], v[n_model + 7], 0.4)?;
            g.add(obj, pen)
        },
        &params,
        1e-3,
    )
    .unwrap();
    assert_eq!(report.coordinates, params.iter().map(|p| p.numel()).sum::<usize>());
    (report.max_rel_error, report.coordinates)
}

/// Counts surviving weights by walking every entry of every prunable matrix
/// and multiplying the gates that govern it.
pub fn enumerate_retained(cfg: &ModelConfig, z: &MaskValues) -> f64 {
    let (d, dh, f) = (cfg.hidden, cfg.head_dim(), cfg.ffn_dim);
    let hid = z.hidden.data();
    let mut total = 0.0f64;
    for l in 0..cfg.n_layers {
        let zm = z.mha.data()[l] as f64;
        let zf = z.ffn.data()[l] as f64;
        // W_Q, W_K, W_V are [d, d] with head columns; W_O is [d, d] with head rows
        for _matrix in 0..3 {
            for i in 0..d {
                for j in 0..d {
                    total += zm * z.head.at(l, j / dh) as f64 * hid[i] as f64;
                }
            }
        }
        for i in 0..d {
            for j in 0..d {
                total += zm * z.head.at(l, i / dh) as f64 * hid[j] as f64;
            }
        }
        for i in 0..d {
            for k in 0..f {
                let w = zf * z.int.at(l, k) as f64 * hid[i] as f64;
                total += 2.0 * w; // W_U[i, k] and W_D[k, i]
            }
        }
    }
    total
}

pub fn random_binary(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> MaskValues {
    let p: f64 = rng.random_range(0.1..0.95);
    let mut z = MaskValues::ones(cfg);
    for (_, t) in z.families_mut() {
        t.data_mut().iter_mut().for_each(|x| *x = rng.random_bool(p) as u8 as f32);
    }
    z
}

/// `(mean, variance, P(z = 0), P(z = 1))` of `n` gate samples.
pub fn gate_stats(hc: &HardConcrete, la: f32, n: usize, seed: u64) -> (f64, f64, f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut s, mut s2, mut zeros, mut ones) = (0.0f64, 0.0f64, 0usize, 0usize);
    for _ in 0..n {
        let u: f64 = rng.sample(rand::distr::Open01);
        let z = hc.sample(la, u).unwrap() as f64;
        s += z;
        s2 += z * z;
        zeros += (z == 0.0) as usize;
        ones += (z == 1.0) as usize;
    }
    let mean = s / n as f64;
    (mean, s2 / n as f64 - mean * mean, zeros as f64 / n as f64, ones as f64 / n as f64)
}

/// Exhaustive argmin over eligible student layers, ties to the lowest index.
pub fn argmin_oracle(row: &[f64], gates: &[f32]) -> Option<usize> {
    let eligible: Vec<usize> = (0..row.len()).filter(|&j| gates[j] > 0.0).collect();
    let min = eligible.iter().map(|&j| row[j]).fold(f64::INFINITY, f64::min);
    eligible.into_iter().find(|&j| row[j] == min)
}

/// A random MSE matrix on a coarse grid, so exact ties are common, and
/// random FFN gates with some pruned.
pub fn random_matching_case(rng: &mut ChaCha8Rng) -> (Vec<Vec<f64>>, Vec<f32>) {
    let n_student = rng.random_range(1..=6);
    let n_teacher = rng.random_range(1..=4);
    let mse = (0..n_teacher)
        .map(|_| (0..n_student).map(|_| rng.random_range(0..4) as f64 * 0.25).collect())
        .collect();
    let gates = (0..n_student)
        .map(|_| if rng.random_bool(0.25) { 0.0 } else { rng.random_range(0.1..1.0) })
        .collect();
    (mse, gates)
}

/// Gates that are zero with probability `p_zero`, otherwise uniform in (0, 1].
pub fn random_masks(rng: &mut impl Rng, cfg: &ModelConfig, p_zero: f64) -> MaskValues {
    let mut m = MaskValues::ones(cfg);
    for (_, t) in m.families_mut() {
        for v in t.data_mut() {
            *v = if rng.random_bool(p_zero) { 0.0 } else { 1.0 - rng.random::<f32>() };
        }
    }
    m
}
