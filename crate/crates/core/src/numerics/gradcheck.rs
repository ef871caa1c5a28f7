//! Central finite differences, used as the independent oracle for `backward`.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub type ParamMap = BTreeMap<String, Tensor>;

pub const DEFAULT_STEP: f64 = 1e-5;

/// `(f(θ + h·eᵢ) − f(θ − h·eᵢ)) / 2h` for every coordinate of every tensor in `theta`.
pub fn finite_diff_grad<F>(mut f: F, theta: &ParamMap, h: f64) -> Result<ParamMap>
where
    F: FnMut(&ParamMap) -> Result<f64>,
{
    if !(h > 0.0) {
        return Err(Error::invalid("finite-difference step must be positive"));
    }
    let mut probe = theta.clone();
    let mut out = ParamMap::new();
    for (name, tensor) in theta {
        let mut grad = Tensor::zeros(tensor.shape());
        for i in 0..tensor.len() {
            let orig = tensor.data()[i];
            probe.get_mut(name).expect("probe mirrors theta").data_mut()[i] = orig + h;
            let plus = f(&probe)?;
            probe.get_mut(name).expect("probe mirrors theta").data_mut()[i] = orig - h;
            let minus = f(&probe)?;
            probe.get_mut(name).expect("probe mirrors theta").data_mut()[i] = orig;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::NonFinite("finite_diff_grad"));
            }
            grad.data_mut()[i] = (plus - minus) / (2.0 * h);
        }
        out.insert(name.clone(), grad);
    }
    Ok(out)
}

/// Denominator floor for [`relative_error`]: below this magnitude the
/// comparison degrades gracefully to an absolute one.
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-6;

/// `|a − b| / max(|a|, |b|, floor)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(RELATIVE_ERROR_FLOOR)
}

/// Largest coordinate-wise relative error between two gradient maps.
/// Keys missing from either side count as an infinite error.
pub fn max_relative_error(analytic: &ParamMap, numeric: &ParamMap) -> f64 {
    let mut worst: f64 = 0.0;
    for (name, a) in analytic {
        let Some(n) = numeric.get(name) else {
            return f64::INFINITY;
        };
        if !a.same_shape(n) {
            return f64::INFINITY;
        }
        for (x, y) in a.data().iter().zip(n.data()) {
            worst = worst.max(relative_error(*x, *y));
        }
    }
    if numeric.keys().any(|k| !analytic.contains_key(k)) {
        return f64::INFINITY;
    }
    worst
}
