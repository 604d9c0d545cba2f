//! Checks reverse-mode gradients of a masked encoder against central
//! differences.
//!
//!     cargo run --example gradcheck

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use cofi::autodiff::{grad_check, Graph, Var};
use cofi::model::{MaskValues, MaskableEncoder, ModelConfig, Trainable};
use cofi::tensor::Tensor;

fn main() -> cofi::Result<()> {
    // a single primitive first: d/dx sum(softmax(x) * w)
    let x = Tensor::matrix(2, 3, vec![0.1, -0.4, 0.3, 1.0, 0.2, -0.7])?;
    let w = Tensor::matrix(2, 3, vec![1.0, 2.0, -1.0, 0.5, 0.0, 3.0])?;
    let report = grad_check(
        |g: &mut Graph, v: &[Var]| {
            let s = g.softmax(v[0]);
            let wc = g.constant(w.clone());
            let p = g.mul(s, wc)?;
            Ok(g.sum(p))
        },
        &[x],
        1e-3,
    )?;
    println!("softmax: max relative error {:.2e} over {} coordinates", report.max_rel_error, report.coordinates);

    // now the classifier weights of a whole encoder under fractional gates
    let cfg = ModelConfig::tiny();
    let model = MaskableEncoder::init(cfg, &mut ChaCha8Rng::seed_from_u64(0))?;
    let masks = MaskValues::full(&cfg, 0.7);
    let tokens = vec![vec![1, 2, 3, 4], vec![5, 6, 7, 8]];
    let labels = [0, 2];
    let report = grad_check(
        |g: &mut Graph, v: &[Var]| {
            let mut vars = model.bind(g, Trainable::NONE);
            vars.classifier = v[0];
            let mv = masks.to_graph(g, false);
            let out = model.forward(g, &vars, &mv, &tokens)?;
            g.cross_entropy(out.logits, &labels)
        },
        &[model.classifier.clone()],
        1e-3,
    )?;
    println!("encoder classifier: max relative error {:.2e}", report.max_rel_error);
    Ok(())
}
