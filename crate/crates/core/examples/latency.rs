//! Times a dense encoder against a compact one pruned to one layer's worth
//! of weights.
//!
//!     cargo run --release --example latency

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use cofi::bench::{bench, BenchSpec};
use cofi::compile::{extract, PrunedStructure};
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
    let model = MaskableEncoder::init(cfg, &mut ChaCha8Rng::seed_from_u64(0))?;
    let spec = BenchSpec::new(16, 32);

    let identity = PrunedStructure::identity(&cfg);
    let same = bench(&model, &identity, &extract(&model, &identity)?, &spec)?;
    println!("dense vs itself: speedup {:.2}", same.speedup);

    let mut m = MaskValues::ones(&cfg);
    for l in 1..4 {
        m.mha.data_mut()[l] = 0.0;
        m.ffn.data_mut()[l] = 0.0;
    }
    let one_layer = PrunedStructure::from_mask_values(&m)?;
    let r = bench(&model, &one_layer, &extract(&model, &one_layer)?, &spec)?;
    println!(
        "one layer left: dense {:.3} ms, compact {:.3} ms (p10 {:.3}, p90 {:.3}), speedup {:.2}",
        r.dense.median * 1e3,
        r.compact.median * 1e3,
        r.compact.p10 * 1e3,
        r.compact.p90 * 1e3,
        r.speedup
    );
    Ok(())
}
