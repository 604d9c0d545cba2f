mod common;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use cofi::autodiff::Graph;
use cofi::l0::{retained_fraction, retained_fraction_values, HardConcrete, SparsityAccounting};
use cofi::model::{MaskValues, ModelConfig};
use common::oracles::{enumerate_retained, gate_stats, random_binary, toy};

#[test]
fn small_sample_mean_agrees_with_large_reference() {
    let hc = HardConcrete::default();
    for (i, la) in [-2.0f32, 0.0, 0.7, 2.0].into_iter().enumerate() {
        let (reference, _, _, _) = gate_stats(&hc, la, 10_000_000, 1000 + i as u64);
        let (mean, var, _, _) = gate_stats(&hc, la, 100_000, 7 + i as u64);
        let se = (var / 100_000.0).sqrt();
        assert!((mean - reference).abs() <= 3.0 * se, "log_alpha {la}: {mean} vs {reference} (se {se})");
    }
}

#[test]
fn point_masses_at_both_ends() {
    let hc = HardConcrete::default();
    let n = 200_000;
    let (_, _, p0, p1) = gate_stats(&hc, 0.0, n, 3);
    assert!(p0 > 0.0 && p1 > 0.0);
    // closed form: P(z = 0) = σ(β·logit(-l / (r - l)) - log α)
    let logit = |p: f64| (p / (1.0 - p)).ln();
    let sig = |x: f64| 1.0 / (1.0 + (-x).exp());
    let c0 = -hc.l as f64 / (hc.r - hc.l) as f64;
    let c1 = (1.0 - hc.l as f64) / (hc.r - hc.l) as f64;
    let want0 = sig(hc.beta as f64 * logit(c0));
    let want1 = 1.0 - sig(hc.beta as f64 * logit(c1));
    for (got, want) in [(p0, want0), (p1, want1)] {
        let se = (want * (1.0 - want) / n as f64).sqrt();
        assert!((got - want).abs() <= 4.0 * se, "{got} vs {want}");
    }
    let nz = hc.prob_nonzero(0.0) as f64;
    assert!((nz - (1.0 - want0)).abs() < 1e-6);
}

#[test]
fn retained_fraction_matches_enumeration() {
    let cfg = toy();
    let acct = SparsityAccounting::new(&cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for trial in 0..100 {
        let z = random_binary(&cfg, &mut rng);
        let want = enumerate_retained(&cfg, &z) / cfg.full_size() as f64;
        let got = retained_fraction_values(&z, &acct).unwrap();
        let rel = (got - want).abs() / want.abs().max(f64::MIN_POSITIVE);
        assert!(rel <= 1e-9 || (want == 0.0 && got == 0.0), "trial {trial}: {got} vs {want}");
    }
    let ones = MaskValues::ones(&cfg);
    assert_eq!(retained_fraction_values(&ones, &acct).unwrap(), 1.0);
}

#[test]
fn graph_and_direct_retained_fraction_agree() {
    let cfg = toy();
    let acct = SparsityAccounting::new(&cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..20 {
        let mut z = MaskValues::ones(&cfg);
        for (_, t) in z.families_mut() {
            t.data_mut().iter_mut().for_each(|x| *x = rng.random_range(0.0..1.0));
        }
        let mut g = Graph::new();
        let zv = z.to_graph(&mut g, false);
        let s = retained_fraction(&mut g, &zv, &acct).unwrap();
        let got = g.value(s).item() as f64;
        let want = retained_fraction_values(&z, &acct).unwrap();
        assert!((got - want).abs() <= 1e-6 * want.max(1e-3), "{got} vs {want}");
    }
}

#[test]
fn raising_any_gate_never_lowers_retained_fraction() {
    let cfg = toy();
    let acct = SparsityAccounting::new(&cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..200 {
        let mut z = MaskValues::ones(&cfg);
        for (_, t) in z.families_mut() {
            t.data_mut().iter_mut().for_each(|x| *x = rng.random_range(0.0..1.0));
        }
        let before = retained_fraction_values(&z, &acct).unwrap();
        let fam = rng.random_range(0..5);
        let t = z.families_mut().into_iter().nth(fam).unwrap().1;
        let k = rng.random_range(0..t.numel());
        let x = t.data()[k];
        t.data_mut()[k] = rng.random_range(x..=1.0);
        let after = retained_fraction_values(&z, &acct).unwrap();
        assert!(after >= before, "{after} < {before}");
    }
}

#[test]
fn retained_fraction_gradient_is_analytic() {
    let cfg = toy();
    let acct = SparsityAccounting::new(&cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut z = MaskValues::ones(&cfg);
    for (_, t) in z.families_mut() {
        t.data_mut().iter_mut().for_each(|x| *x = rng.random_range(0.0..1.0));
    }
    let mut g = Graph::new();
    let zv = z.to_graph(&mut g, true);
    let s = retained_fraction(&mut g, &zv, &acct).unwrap();
    let grads = g.backward(s).unwrap();
    let m = cfg.full_size() as f64;
    let dh = cfg.head_dim() as f64;
    let hid: f64 = z.hidden.data().iter().map(|&v| v as f64).sum();
    let rel = |got: f32, want: f64| (got as f64 - want).abs() / want.abs().max(1e-12);
    let gh = grads.get_or_zeros(zv.head, &z.head);
    let gi = grads.get_or_zeros(zv.int, &z.int);
    let gm = grads.get_or_zeros(zv.mha, &z.mha);
    let gd = grads.get_or_zeros(zv.hidden, &z.hidden);
    let mut hidden_want = 0.0f64;
    for l in 0..cfg.n_layers {
        let zm = z.mha.data()[l] as f64;
        let zf = z.ffn.data()[l] as f64;
        let heads: f64 = z.head.row(l).iter().map(|&v| v as f64).sum();
        let ints: f64 = z.int.row(l).iter().map(|&v| v as f64).sum();
        hidden_want += (4.0 * dh * zm * heads + 2.0 * zf * ints) / m;
        assert!(rel(gm.data()[l], 4.0 * dh * heads * hid / m) <= 1e-4);
        for h in 0..cfg.n_heads {
            assert!(rel(gh.at(l, h), 4.0 * dh * zm * hid / m) <= 1e-4);
        }
        for k in 0..cfg.ffn_dim {
            assert!(rel(gi.at(l, k), 2.0 * zf * hid / m) <= 1e-4);
        }
    }
    for &v in gd.data() {
        assert!(rel(v, hidden_want) <= 1e-4);
    }
}

#[test]
fn bert_base_prunable_size() {
    assert_eq!(ModelConfig::bert_base().full_size(), 84_934_656);
}
