use super::graph::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Outcome of a finite-difference comparison.
#[derive(Debug, Clone)]
pub struct GradCheck {
    /// max over coordinates of `|analytic - numeric| / max(1, |analytic|)`.
    pub max_rel_error: f64,
    /// `(parameter index, flat coordinate)` where the maximum was found.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub coordinates: usize,
}

/// Compares reverse-mode gradients of `f` against central differences.
///
/// `f` builds a scalar loss from one graph leaf per entry of `params`; those
/// leaves are trainable for the analytic pass and constants for the
/// perturbed evaluations. `f` must be deterministic.
pub fn grad_check<F>(mut f: F, params: &[Tensor], eps: f32) -> Result<GradCheck>
where
    F: FnMut(&mut Graph, &[Var]) -> Result<Var>,
{
    if !(1e-4..=1e-2).contains(&eps) {
        return Err(Error::InvalidArgument(format!(
            "grad_check: eps {eps} outside [1e-4, 1e-2]"
        )));
    }
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
    let root = f(&mut g, &vars)?;
    let base = g.value(root).item();
    if !base.is_finite() {
        return Err(Error::NonFinite("grad_check: loss at unperturbed point".into()));
    }
    let grads = g.backward(root)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(params)
        .map(|(&v, p)| grads.get_or_zeros(v, p))
        .collect();

    let mut eval = |ps: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = ps.iter().map(|p| g.constant(p.clone())).collect();
        let root = f(&mut g, &vars)?;
        Ok(g.value(root).item() as f64)
    };

    let mut work: Vec<Tensor> = params.to_vec();
    let mut report = GradCheck {
        max_rel_error: 0.0,
        worst: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
        coordinates: 0,
    };
    for (pi, p) in params.iter().enumerate() {
        for ci in 0..p.numel() {
            let x = p.data()[ci];
            let hi = x + eps;
            let lo = x - eps;
            work[pi].data_mut()[ci] = hi;
            let fp = eval(&work)?;
            work[pi].data_mut()[ci] = lo;
            let fm = eval(&work)?;
            work[pi].data_mut()[ci] = x;
            let numeric = (fp - fm) / (hi as f64 - lo as f64);
            let a = analytic[pi].data()[ci] as f64;
            if !numeric.is_finite() || !a.is_finite() {
                return Err(Error::NonFinite(format!(
                    "grad_check: parameter {pi}, coordinate {ci}"
                )));
            }
            let rel = (a - numeric).abs() / a.abs().max(1.0);
            report.coordinates += 1;
            if report.coordinates == 1 || rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = (pi, ci);
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}
