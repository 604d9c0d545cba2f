//! Binarizes real-valued gates, extracts a physically smaller model, checks it
//! against the masked original and round-trips it through a checkpoint file.
//!
//!     cargo run --example compact_checkpoint

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use cofi::compile::{binarize, count_dense, count_params, extract, Checkpoint};
use cofi::model::{MaskValues, MaskableEncoder, ModelConfig};

fn main() -> cofi::Result<()> {
    let cfg = ModelConfig {
        n_layers: 4,
        hidden: 64,
        n_heads: 4,
        ffn_dim: 256,
        vocab: 64,
        max_seq: 32,
        n_classes: 2,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let model = MaskableEncoder::init(cfg, &mut rng)?;
    let mut gates = MaskValues::ones(&cfg);
    for (_, t) in gates.families_mut() {
        t.data_mut().iter_mut().for_each(|z| *z = rng.random_range(0.0f32..1.4).min(1.0));
    }
    let structure = binarize(&gates, &cfg)?;
    let compact = extract(&model, &structure)?;
    let (dense, small) = (count_dense(&model), count_params(&compact));
    println!("prunable params {} -> {} (sparsity {:.3})", dense.prunable(), small.prunable(), small.sparsity(&cfg));
    println!("heads per layer {:?}", structure.kept_heads.iter().map(Vec::len).collect::<Vec<_>>());
    println!("FFN dims per layer {:?}", structure.kept_int_dims.iter().map(Vec::len).collect::<Vec<_>>());

    let tokens: Vec<Vec<usize>> = (0..8).map(|_| (0..32).map(|_| rng.random_range(0..64)).collect()).collect();
    let masked = model.logits(&structure.to_mask_values(&cfg), &tokens)?;
    println!("max |masked - compact| = {:e}", masked.max_abs_diff(&compact.logits(&tokens)?));

    let path = std::env::temp_dir().join("cofi-example-compact.ckpt");
    Checkpoint::from_compact(&compact, &structure, serde_json::json!({ "note": "example" })).save(&path)?;
    let loaded = Checkpoint::load(&path)?.compact_model()?;
    println!("reloaded model identical: {}", loaded.logits(&tokens)? == compact.logits(&tokens)?);
    std::fs::remove_file(path)?;
    Ok(())
}
