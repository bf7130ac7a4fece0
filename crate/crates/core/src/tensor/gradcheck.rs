use std::sync::Arc;

use super::{Element, GradMap, ParamBinding, ParamStore, Tape, Tensor};
use crate::error::{Error, Result};

/// Outcome of a central finite-difference sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// Worst `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`.
    pub max_rel_error: f64,
    /// Parameter name and flat index where the worst error occurred.
    pub worst: Option<(String, usize)>,
    pub analytic: f64,
    pub numeric: f64,
    /// Number of scalars checked.
    pub checked: usize,
}

/// Denominator floor for the relative error.
pub const REL_ERROR_FLOOR: f64 = 1e-8;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR);
    (analytic - numeric).abs() / denom
}

fn evaluate<F>(f: &F, params: &ParamStore<f64>) -> Result<f64>
where
    F: for<'t, 's> Fn(&ParamBinding<'t, 's, f64>) -> Result<Tensor<'t, f64>>,
{
    let tape = Tape::new();
    let binding = ParamBinding::trainable(&tape, params);
    let v = f(&binding)?.item()?;
    if !v.is_finite() {
        return Err(Error::Numeric(format!("objective evaluated to {v}")));
    }
    Ok(v)
}

/// Reverse-mode gradients of the scalar objective `f`.
pub fn analytic_gradients<F>(f: F, params: &ParamStore<f64>) -> Result<GradMap<f64>>
where
    F: for<'t, 's> Fn(&ParamBinding<'t, 's, f64>) -> Result<Tensor<'t, f64>>,
{
    let tape = Tape::new();
    let binding = ParamBinding::trainable(&tape, params);
    let loss = f(&binding)?;
    let v = loss.item()?;
    if !v.is_finite() {
        return Err(Error::Numeric(format!("objective evaluated to {v}")));
    }
    Ok(loss.backward()?.into_grad_map())
}

/// Compares reverse-mode gradients of `f` with central differences
/// `(f(p + eps) - f(p - eps)) / (2 eps)` for every scalar of every parameter.
pub fn finite_diff_check<F>(f: F, params: &ParamStore<f64>, eps: f64) -> Result<GradCheckReport>
where
    F: for<'t, 's> Fn(&ParamBinding<'t, 's, f64>) -> Result<Tensor<'t, f64>>,
{
    let analytic = analytic_gradients(&f, params)?;
    compare_with_finite_differences(f, params, &analytic, eps)
}

/// Compares the given gradients against central differences of `f`.
pub fn compare_with_finite_differences<F>(
    f: F,
    params: &ParamStore<f64>,
    analytic: &GradMap<f64>,
    eps: f64,
) -> Result<GradCheckReport>
where
    F: for<'t, 's> Fn(&ParamBinding<'t, 's, f64>) -> Result<Tensor<'t, f64>>,
{
    if eps.is_nan() || eps <= 0.0 {
        return Err(Error::Contract(format!(
            "finite-difference step must be positive, got {eps}"
        )));
    }
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
    };
    let mut probe = params.clone();
    let names: Vec<String> = params.names().cloned().collect();
    for name in names {
        let original = Arc::clone(&params.get(&name).expect("listed").data);
        let grads = analytic.get(&name);
        for i in 0..original.len() {
            let mut shifted = original.as_ref().clone();
            shifted[i] = original[i] + eps;
            probe.get_mut(&name).expect("listed").data = Arc::new(shifted.clone());
            let plus = evaluate(&f, &probe)?;
            shifted[i] = original[i] - eps;
            probe.get_mut(&name).expect("listed").data = Arc::new(shifted);
            let minus = evaluate(&f, &probe)?;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = grads.map_or(0.0, |g| g[i].to_f64());
            let err = relative_error(a, numeric);
            report.checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = err;
                report.worst = Some((name.clone(), i));
                report.analytic = a;
                report.numeric = numeric;
            }
        }
        probe.get_mut(&name).expect("listed").data = original;
    }
    Ok(report)
}
