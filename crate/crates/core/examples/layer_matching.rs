//! Pairs teacher layers with student layers by hidden-state distance.
//!
//!     cargo run --example layer_matching

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use cofi::distill::{match_from_mse, match_layers, mse_matrix, LayerTransform, MatchMode};
use cofi::tensor::Tensor;

fn main() -> cofi::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (tokens, d) = (12, 8);
    let mut noisy = |base: &Tensor, scale: f32| {
        let data = base.data().iter().map(|&x| x + scale * rng.random_range(-1.0f32..1.0)).collect();
        Tensor::new(base.shape().to_vec(), data).expect("same shape")
    };
    let teacher: Vec<Tensor> = (0..2)
        .map(|i| Tensor::full(&[tokens, d], i as f32))
        .collect();
    // student layer 2 resembles teacher state 0, layer 3 teacher state 1
    let student = vec![
        noisy(&Tensor::full(&[tokens, d], 3.0), 0.1),
        noisy(&Tensor::full(&[tokens, d], -2.0), 0.1),
        noisy(&teacher[0], 0.1),
        noisy(&teacher[1], 0.1),
    ];
    let w = LayerTransform::identity(d);
    let mse = mse_matrix(&student, &teacher, &w)?;
    for (k, row) in mse.iter().enumerate() {
        println!("teacher state {k}: {}", row.iter().map(|m| format!("{m:7.3}")).collect::<String>());
    }
    let open = [1.0f32; 4];
    println!("dynamic:   {:?}", match_layers(&student, &teacher, &[1, 3], &w, &open, MatchMode::Dynamic)?.student);
    println!("monotonic: {:?}", match_from_mse(&mse, &[1, 3], &open, MatchMode::Monotonic));
    println!("fixed:     {:?}", match_from_mse(&mse, &[1, 3], &open, MatchMode::Fixed));
    // pruning the FFN of student layer 3 takes it out of the running
    let gates = [1.0, 1.0, 1.0, 0.0];
    println!("layer 3 pruned: {:?}", match_from_mse(&mse, &[1, 3], &gates, MatchMode::Dynamic));
    Ok(())
}
