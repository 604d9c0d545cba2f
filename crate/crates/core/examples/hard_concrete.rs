//! Samples hard concrete gates and compares the empirical point masses with
//! their closed forms.
//!
//!     cargo run --example hard_concrete

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use cofi::l0::HardConcrete;

fn main() -> cofi::Result<()> {
    let hc = HardConcrete::default();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let n = 100_000;
    println!("log_alpha   mean     P(z=0)   P(z>0) closed   deterministic");
    for la in [-3.0f32, -1.0, 0.0, 1.0, 3.0] {
        let mut sum = 0.0f64;
        let mut zeros = 0usize;
        for _ in 0..n {
            let z = hc.sample(la, rng.sample(rand::distr::Open01))?;
            sum += z as f64;
            zeros += (z == 0.0) as usize;
        }
        println!(
            "{la:>9.1}   {:.4}   {:.4}   {:.4}          {:.4}",
            sum / n as f64,
            zeros as f64 / n as f64,
            hc.prob_nonzero(la),
            hc.deterministic(la)
        );
    }

    // a coarse histogram for log_alpha = 0 shows mass piling up at both ends
    let mut bins = [0usize; 10];
    for _ in 0..n {
        let z = hc.sample(0.0, rng.sample(rand::distr::Open01))?;
        bins[((z * 10.0) as usize).min(9)] += 1;
    }
    for (i, b) in bins.iter().enumerate() {
        println!("[{:.1}, {:.1}{} {}", i as f32 / 10.0, (i + 1) as f32 / 10.0, if i == 9 { "]" } else { ")" }, "#".repeat(b * 200 / n));
    }
    Ok(())
}
