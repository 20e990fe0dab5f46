//! Central finite differences, used as the independent oracle for every
//! analytic gradient in this crate.

use crate::numerics::{ParamId, ParamStore};

/// `|a - n| / max(|a|, |n|, floor)`
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Central difference of `f` along one coordinate of one parameter.
pub fn central_difference(
    store: &ParamStore,
    id: ParamId,
    index: usize,
    h: f64,
    f: &mut dyn FnMut(&ParamStore) -> f64,
) -> f64 {
    let mut s = store.clone();
    let orig = s.get(id).tensor.data()[index];
    s.get_mut(id).tensor.data_mut()[index] = orig + h;
    let plus = f(&s);
    s.get_mut(id).tensor.data_mut()[index] = orig - h;
    let minus = f(&s);
    (plus - minus) / (2.0 * h)
}

/// Central difference of a function of a plain vector.
pub fn central_difference_vec(
    x: &[f64],
    index: usize,
    h: f64,
    f: &mut dyn FnMut(&[f64]) -> f64,
) -> f64 {
    let mut v = x.to_vec();
    v[index] = x[index] + h;
    let plus = f(&v);
    v[index] = x[index] - h;
    let minus = f(&v);
    (plus - minus) / (2.0 * h)
}
