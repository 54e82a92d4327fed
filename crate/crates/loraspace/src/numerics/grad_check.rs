//! Central-finite-difference verification of analytic gradients.
//!
//! The numeric side never touches the tape: it only re-evaluates the loss
//! value at perturbed parameters, so it is an independent oracle for the
//! backward pass.

use crate::error::{Error, Result};
use crate::params::{GradMap, Params};

/// Outcome of a gradient check, with the worst offender per parameter.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// `(parameter name, max relative error over its elements)`, name order.
    pub per_param: Vec<(String, f64)>,
    pub max_rel_err: f64,
    pub checked_elements: usize,
    pub pass: bool,
}

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Compare the analytic gradient of `f` against central finite differences.
///
/// `f` returns the scalar loss and its analytic gradient map; only the loss
/// value is used on the perturbed evaluations. Parameters absent from the
/// gradient map are treated as having zero analytic gradient.
pub fn grad_check<F>(f: F, params: &Params<f64>, eps: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&Params<f64>) -> Result<(f64, GradMap<f64>)>,
{
    if !(1e-6..=1e-3).contains(&eps) {
        return Err(Error::InvalidConfig(format!(
            "grad_check eps {eps} outside [1e-6, 1e-3]"
        )));
    }
    let (loss0, analytic) = f(params)?;
    if !loss0.is_finite() {
        return Err(Error::NonFinite { op: "grad_check" });
    }

    let mut per_param = Vec::new();
    let mut max_rel = 0.0_f64;
    let mut checked = 0usize;

    for (name, value) in params.iter() {
        let zero;
        let a = match analytic.get(name) {
            Some(g) => g,
            None => {
                zero = crate::numerics::Array::zeros(value.shape().to_vec());
                &zero
            }
        };
        let mut param_max = 0.0_f64;
        for i in 0..value.len() {
            let mut perturbed = params.clone();
            perturbed.get_mut(name)?.data_mut()[i] += eps;
            let hi = f(&perturbed)?.0;
            perturbed.get_mut(name)?.data_mut()[i] -= 2.0 * eps;
            let lo = f(&perturbed)?.0;
            if !hi.is_finite() || !lo.is_finite() {
                return Err(Error::NonFinite { op: "grad_check" });
            }
            let numeric = (hi - lo) / (2.0 * eps);
            let e = rel_err(a.data()[i], numeric);
            param_max = param_max.max(e);
            checked += 1;
        }
        max_rel = max_rel.max(param_max);
        per_param.push((name.to_string(), param_max));
    }

    Ok(GradCheckReport {
        per_param,
        max_rel_err: max_rel,
        checked_elements: checked,
        pass: max_rel <= tol,
    })
}
