//! Runs the encoder under different gate settings and shows how much of the
//! prunable weight mass each setting keeps.
//!
//!     cargo run --example masked_forward

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use cofi::l0::{retained_fraction_values, SparsityAccounting};
use cofi::model::{MaskValues, MaskableEncoder, ModelConfig};

fn main() -> cofi::Result<()> {
    let cfg = ModelConfig::tiny();
    let model = MaskableEncoder::init(cfg, &mut ChaCha8Rng::seed_from_u64(1))?;
    let acct = SparsityAccounting::new(&cfg);
    let tokens = vec![vec![0, 3, 5, 7, 9, 11]];

    let full = MaskValues::ones(&cfg);
    let mut one_head = full.clone();
    one_head.head.data_mut()[0] = 0.0;
    let mut no_ffn = full.clone();
    no_ffn.ffn.data_mut()[1] = 0.0;
    let mut narrow = full.clone();
    narrow.hidden.data_mut()[..4].iter_mut().for_each(|z| *z = 0.0);
    let soft = MaskValues::full(&cfg, 0.5);

    for (name, m) in [
        ("all gates open", &full),
        ("layer 0 head 0 off", &one_head),
        ("layer 1 FFN off", &no_ffn),
        ("half the hidden dims off", &narrow),
        ("every gate at 0.5", &soft),
    ] {
        let logits = model.logits(m, &tokens)?;
        let kept = retained_fraction_values(m, &acct)?;
        println!("{name:<26} retained {kept:.4}  logits {:?}", logits.data());
    }
    Ok(())
}
