mod common;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use cofi::autodiff::Graph;
use cofi::distill::{
    combined_loss, default_teacher_layers, layer_loss, match_from_mse, match_layers, mse_matrix,
    prediction_loss, LayerMap, LayerTransform, MatchMode,
};
use cofi::tensor::Tensor;
use common::oracles::{argmin_oracle, random_matching_case};

#[test]
fn dynamic_matching_equals_exhaustive_argmin() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for trial in 0..1000 {
        let (mse, gates) = random_matching_case(&mut rng);
        let layers: Vec<usize> = (0..mse.len()).collect();
        let got = match_from_mse(&mse, &layers, &gates, MatchMode::Dynamic);
        let want: Vec<Option<usize>> = mse.iter().map(|r| argmin_oracle(r, &gates)).collect();
        assert_eq!(got, want, "trial {trial}: {mse:?} {gates:?}");
    }
}

#[test]
fn monotonic_matching_is_strictly_increasing() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    for _ in 0..500 {
        let mse: Vec<Vec<f64>> = (0..4).map(|_| (0..6).map(|_| rng.random_range(0.0..1.0)).collect()).collect();
        let gates = vec![1.0f32; 6];
        let got = match_from_mse(&mse, &[0, 1, 2, 3], &gates, MatchMode::Monotonic);
        let matched: Vec<usize> = got.iter().flatten().copied().collect();
        assert!(matched.windows(2).all(|w| w[0] < w[1]), "{got:?}");
        // the top teacher layer is always free to take its global argmin
        assert_eq!(got[3], argmin_oracle(&mse[3], &gates));
    }
}

#[test]
fn pruned_ffn_layers_are_never_targets() {
    let mse = vec![vec![0.0, 1.0, 2.0]];
    assert_eq!(match_from_mse(&mse, &[0], &[0.0, 0.5, 1.0], MatchMode::Dynamic), vec![Some(1)]);
    assert_eq!(match_from_mse(&mse, &[0], &[0.0, 0.0, 0.0], MatchMode::Dynamic), vec![None]);
}

#[test]
fn fixed_mode_pairs_by_index() {
    let got = match_from_mse(&[], &[1, 3], &[1.0; 4], MatchMode::Fixed);
    assert_eq!(got, vec![Some(1), Some(3)]);
}

#[test]
fn default_layers_scale_with_depth() {
    assert_eq!(default_teacher_layers(12), vec![2, 5, 8, 11]);
    assert_eq!(default_teacher_layers(4), vec![0, 1, 2, 3]);
    assert_eq!(default_teacher_layers(2), vec![0, 1]);
}

fn kl(s: &[f32], t: &[f32], temp: f32) -> f32 {
    let mut g = Graph::new();
    let a = g.constant(Tensor::matrix(1, s.len(), s.to_vec()).unwrap());
    let b = g.constant(Tensor::matrix(1, t.len(), t.to_vec()).unwrap());
    let l = prediction_loss(&mut g, a, b, temp).unwrap();
    g.value(l).item()
}

#[test]
fn prediction_loss_examples() {
    assert!(kl(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0], 2.0).abs() < 1e-7);
    // confident and opposite: KL ≈ 20 at T = 1
    let v = kl(&[10.0, -10.0], &[-10.0, 10.0], 1.0);
    assert!((v - 20.0).abs() < 1e-3, "{v}");
    // T² scaling keeps the high-temperature limit finite: ½·Var_p(Δ) = 200
    let v = kl(&[10.0, -10.0], &[-10.0, 10.0], 100.0);
    assert!((v - 200.0).abs() / 200.0 < 0.01, "{v}");
    assert!(kl(&[0.0, 1.0], &[1.0, 0.0], 3.0) > 0.0);
}

#[test]
fn prediction_loss_rejects_bad_temperature() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::matrix(1, 2, vec![0.0, 1.0]).unwrap());
    assert!(prediction_loss(&mut g, a, a, 0.0).is_err());
}

fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
    Tensor::matrix(r, c, (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

#[test]
fn mse_matrix_matches_f64_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let d = 8;
    let student: Vec<Tensor> = (0..3).map(|_| rand_mat(&mut rng, 10, d)).collect();
    let teacher: Vec<Tensor> = (0..2).map(|_| rand_mat(&mut rng, 10, d)).collect();
    let w = LayerTransform { w: rand_mat(&mut rng, d, d) };
    let got = mse_matrix(&student, &teacher, &w).unwrap();
    for (k, t) in teacher.iter().enumerate() {
        for (j, s) in student.iter().enumerate() {
            let mut acc = 0.0f64;
            for r in 0..10 {
                for c in 0..d {
                    let p: f64 = (0..d).map(|i| s.at(r, i) as f64 * w.w.at(i, c) as f64).sum();
                    acc += (p - t.at(r, c) as f64).powi(2);
                }
            }
            let want = acc / (10 * d) as f64;
            assert!((got[k][j] - want).abs() <= 1e-6, "{} vs {want}", got[k][j]);
        }
    }
}

#[test]
fn a_student_copy_of_the_teacher_matches_itself() {
    let mut rng = ChaCha8Rng::seed_from_u64(24);
    let states: Vec<Tensor> = (0..4).map(|_| rand_mat(&mut rng, 6, 4)).collect();
    let teacher = vec![states[1].clone(), states[3].clone()];
    let map = match_layers(&states, &teacher, &[1, 3], &LayerTransform::identity(4), &[1.0; 4], MatchMode::Dynamic)
        .unwrap();
    assert_eq!(map.student, vec![Some(1), Some(3)]);
}

#[test]
fn layer_and_combined_losses() {
    let mut rng = ChaCha8Rng::seed_from_u64(25);
    let mut g = Graph::new();
    let s: Vec<_> = (0..2).map(|_| g.constant(rand_mat(&mut rng, 3, 4))).collect();
    let t: Vec<_> = (0..2).map(|_| g.constant(rand_mat(&mut rng, 3, 4))).collect();
    let w = g.constant(Tensor::identity(4));
    let none = LayerMap { teacher_layers: vec![0, 1], student: vec![None, None] };
    let zero = layer_loss(&mut g, &none, &s, &t, w).unwrap();
    assert_eq!(g.value(zero).item(), 0.0);
    let both = LayerMap { teacher_layers: vec![0, 1], student: vec![Some(0), Some(1)] };
    let ll = layer_loss(&mut g, &both, &s, &t, w).unwrap();
    let m0 = g.mse(s[0], t[0]).unwrap();
    let m1 = g.mse(s[1], t[1]).unwrap();
    let want = g.value(m0).item() + g.value(m1).item();
    assert!((g.value(ll).item() - want).abs() < 1e-6);

    let p = g.constant(Tensor::scalar(2.0));
    let l = g.constant(Tensor::scalar(4.0));
    let c = combined_loss(&mut g, p, l, 0.25).unwrap();
    assert!((g.value(c).item() - 3.5).abs() < 1e-6);
    assert!(combined_loss(&mut g, p, l, 1.5).is_err());
}
