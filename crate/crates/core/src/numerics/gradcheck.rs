//! Central-difference verification of reverse-mode gradients.

use crate::error::{Error, Result};

use super::{Gradients, ParamId, ParamSet, RngState};

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub coordinates_checked: usize,
    pub coordinates_total: usize,
}

/// Magnitude below which gradients are compared absolutely: central
/// differences of an O(1) loss carry roundoff of roughly 1e-10.
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-6;

/// `|a − n| / max(|a|, |n|, RELATIVE_ERROR_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(RELATIVE_ERROR_FLOOR);
    (analytic - numeric).abs() / denom
}

/// Compares `loss_fn`'s analytic gradient against (f(θ+ε) − f(θ−ε)) / 2ε.
///
/// `loss_fn` must be deterministic (dropout off). With `max_coords` set, at
/// most that many coordinates per parameter tensor are sampled from `rng`.
pub fn grad_check<F>(
    params: &mut ParamSet<f64>,
    eps: f64,
    max_coords: Option<(usize, &mut RngState)>,
    mut loss_fn: F,
) -> Result<GradCheckReport>
where
    F: FnMut(&ParamSet<f64>) -> Result<(f64, Gradients<f64>)>,
{
    let (loss, analytic) = loss_fn(params)?;
    if !loss.is_finite() {
        return Err(Error::Numeric(format!("loss is {loss}")));
    }
    let mut sampler = max_coords;
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        coordinates_checked: 0,
        coordinates_total: params.scalar_count(),
    };
    let ids: Vec<ParamId> = params.ids().collect();
    for id in ids {
        let n = params.get(id).numel();
        let coords: Vec<usize> = match sampler.as_mut() {
            Some((k, rng)) if *k < n => rng.choose_distinct(n, *k),
            _ => (0..n).collect(),
        };
        for i in coords {
            let orig = params.get(id).data()[i];
            params.get_mut(id).data_mut()[i] = orig + eps;
            let (plus, _) = loss_fn(params)?;
            params.get_mut(id).data_mut()[i] = orig - eps;
            let (minus, _) = loss_fn(params)?;
            params.get_mut(id).data_mut()[i] = orig;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::Numeric(format!("non-finite loss perturbing {}[{i}]", params.name(id))));
            }
            let numeric = (plus - minus) / (2.0 * eps);
            let err = relative_error(analytic.get(id)[i], numeric);
            report.coordinates_checked += 1;
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst_param = params.name(id).to_string();
                report.worst_index = i;
            }
        }
    }
    log::info!(
        "grad_check: {} of {} coordinates, max relative error {:.3e} at {}[{}]",
        report.coordinates_checked,
        report.coordinates_total,
        report.max_rel_error,
        report.worst_param,
        report.worst_index
    );
    Ok(report)
}
