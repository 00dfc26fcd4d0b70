//! Central-difference checks of whole-model gradients.

use std::collections::BTreeMap;

use crate::autodiff::gradcheck::{relative_error, GradReport};
use crate::autodiff::Var;
use crate::error::Result;

use super::params::Parameters;
use super::transformer::Forward;

/// Compares the reverse-mode gradient of `f` with respect to every weight
/// it reads against central differences over every scalar of those
/// weights. `per_input` lists one error per weight, in name order.
pub fn check_params<F>(params: &Parameters, h: f64, f: F) -> Result<(GradReport, Vec<String>)>
where
    F: Fn(&mut Forward<'_>) -> Result<Var>,
{
    let mut fw = Forward::new(params, true);
    let loss = f(&mut fw)?;
    fw.graph.backward(loss)?;
    let analytic: BTreeMap<String, Vec<f64>> = fw
        .bound_weights()
        .into_iter()
        .map(|(name, v)| {
            let g = fw.graph.grad(v).map(|t| t.data().to_vec());
            let n = params.get(&name).map(|t| t.len()).unwrap_or(0);
            (name, g.unwrap_or_else(|| vec![0.0; n]))
        })
        .collect();
    drop(fw);

    let eval = |p: &Parameters| -> Result<f64> {
        let mut fw = Forward::new(p, false);
        let out = f(&mut fw)?;
        Ok(fw.graph.value(out).item())
    };
    let mut work = params.clone();
    let mut per_input = Vec::with_capacity(analytic.len());
    let mut names = Vec::with_capacity(analytic.len());
    for (name, a) in &analytic {
        let mut numeric = vec![0.0; a.len()];
        for (e, slot) in numeric.iter_mut().enumerate() {
            let orig = params.get(name)?.data()[e];
            work.get_mut(name).expect("bound weight").data_mut()[e] = orig + h;
            let plus = eval(&work)?;
            work.get_mut(name).expect("bound weight").data_mut()[e] = orig - h;
            let minus = eval(&work)?;
            work.get_mut(name).expect("bound weight").data_mut()[e] = orig;
            *slot = (plus - minus) / (2.0 * h);
        }
        per_input.push(relative_error(a, &numeric));
        names.push(name.clone());
    }
    let max_rel_err = per_input.iter().copied().fold(0.0, f64::max);
    Ok((
        GradReport {
            max_rel_err,
            per_input,
        },
        names,
    ))
}
