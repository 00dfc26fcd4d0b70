//! Central-difference gradient checking.
//!
//! Only forward evaluations are used here, so the numeric gradient is
//! independent of every backward rule it is compared against.

use crate::error::Result;
use crate::tensor::Tensor;

use super::{Graph, Var};

#[derive(Clone, Debug)]
pub struct GradReport {
    /// Worst relative error across inputs.
    pub max_rel_err: f64,
    pub per_input: Vec<f64>,
}

/// Norm-relative error `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |xs: &[f64]| xs.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, n)| a - n).collect();
    norm(&diff) / norm(analytic).max(norm(numeric)).max(1e-3)
}

/// Compares reverse-mode gradients of the scalar `f(inputs)` against
/// central differences with step `h`.
pub fn check<F>(inputs: &[Tensor], h: f64, f: F) -> Result<GradReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let loss = f(&mut g, &vars)?;
    g.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| {
            g.grad(*v)
                .map(|t| t.data().to_vec())
                .unwrap_or_else(|| vec![0.0; t.len()])
        })
        .collect();

    let eval = |perturbed: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).item())
    };

    let mut per_input = Vec::with_capacity(inputs.len());
    let mut work = inputs.to_vec();
    for (idx, input) in inputs.iter().enumerate() {
        let mut numeric = vec![0.0; input.len()];
        for (e, slot) in numeric.iter_mut().enumerate() {
            let orig = input.data()[e];
            work[idx].data_mut()[e] = orig + h;
            let plus = eval(&work)?;
            work[idx].data_mut()[e] = orig - h;
            let minus = eval(&work)?;
            work[idx].data_mut()[e] = orig;
            *slot = (plus - minus) / (2.0 * h);
        }
        per_input.push(relative_error(&analytic[idx], &numeric));
    }
    let max_rel_err = per_input.iter().copied().fold(0.0, f64::max);
    Ok(GradReport {
        max_rel_err,
        per_input,
    })
}
