//! Central finite differences, used as an independent oracle for the tape.

use serde::{Deserialize, Serialize};

use crate::param::{ParamId, ParamStore};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Default perturbation.
pub const FD_STEP: f64 = 1e-5;

/// Relative errors are taken against `max(|analytic|, |numeric|, REL_ERR_FLOOR)`.
/// Central differences with the default step on O(1) losses carry about
/// 1e-10 of round-off plus truncation error, so smaller gradients cannot be
/// resolved to 1e-4 relative accuracy.
pub const REL_ERR_FLOOR: f64 = 1e-5;

/// Central-difference gradient of `f` at `point`.
pub fn finite_diff(mut f: impl FnMut(&[f64]) -> f64, point: &[f64], h: f64) -> Vec<f64> {
    assert!(h > 0.0, "finite difference step must be positive");
    let mut x = point.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = x[i];
            x[i] = orig + h;
            let plus = f(&x);
            x[i] = orig - h;
            let minus = f(&x);
            x[i] = orig;
            (plus - minus) / (2.0 * h)
        })
        .collect()
}

/// Central-difference gradient of `f` with respect to one parameter of `store`,
/// perturbing it in place. The parameter is restored bit-exactly afterwards.
pub fn finite_diff_grad(
    store: &mut ParamStore,
    id: ParamId,
    h: f64,
    mut f: impl FnMut(&ParamStore) -> f64,
) -> Tensor {
    assert!(h > 0.0, "finite difference step must be positive");
    let shape = store.value(id).shape().to_vec();
    let n = store.value(id).len();
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let orig = store.value(id).data()[i];
        store.get_mut(id).value_mut().data_mut()[i] = orig + h;
        let plus = f(store);
        store.get_mut(id).value_mut().data_mut()[i] = orig - h;
        let minus = f(store);
        store.get_mut(id).value_mut().data_mut()[i] = orig;
        out.push((plus - minus) / (2.0 * h));
    }
    Tensor::from_vec(shape, out).expect("shape preserved")
}

/// Central differences at selected flat indices of one parameter.
pub fn finite_diff_at(
    store: &mut ParamStore,
    id: ParamId,
    indices: &[usize],
    h: f64,
    mut f: impl FnMut(&ParamStore) -> f64,
) -> Vec<f64> {
    assert!(h > 0.0, "finite difference step must be positive");
    indices
        .iter()
        .map(|&i| {
            let orig = store.value(id).data()[i];
            store.get_mut(id).value_mut().data_mut()[i] = orig + h;
            let plus = f(store);
            store.get_mut(id).value_mut().data_mut()[i] = orig - h;
            let minus = f(store);
            store.get_mut(id).value_mut().data_mut()[i] = orig;
            (plus - minus) / (2.0 * h)
        })
        .collect()
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParamCheck {
    pub name: String,
    pub scalars: usize,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn checked_scalars(&self) -> usize {
        self.params.iter().map(|p| p.scalars).sum()
    }
}

/// Compares the analytic gradients already held in `store` against central
/// differences of `f` for every scalar of every trainable parameter.
pub fn compare_all(
    store: &mut ParamStore,
    h: f64,
    tolerance: f64,
    f: impl FnMut(&ParamStore) -> f64,
) -> GradCheckReport {
    compare_sampled(store, h, tolerance, None, 0, f)
}

/// Like [`compare_all`], but parameters with more than `per_param` scalars
/// are checked at that many distinct indices drawn from `seed`.
pub fn compare_sampled(
    store: &mut ParamStore,
    h: f64,
    tolerance: f64,
    per_param: Option<usize>,
    seed: u64,
    mut f: impl FnMut(&ParamStore) -> f64,
) -> GradCheckReport {
    let ids: Vec<ParamId> = store
        .iter()
        .filter(|(_, p)| p.trainable())
        .map(|(id, _)| id)
        .collect();
    let mut rng = Rng::derive(seed, 0x6C4E);
    let mut params = Vec::with_capacity(ids.len());
    for id in ids {
        let analytic = store.get(id).grad().expect("trainable").clone();
        let n = analytic.len();
        let mut indices: Vec<usize> = (0..n).collect();
        if let Some(cap) = per_param.filter(|&c| c < n) {
            rng.shuffle(&mut indices);
            indices.truncate(cap);
            indices.sort_unstable();
        }
        let numeric = finite_diff_at(store, id, &indices, h, &mut f);
        let mut max_rel: f64 = 0.0;
        let mut max_abs: f64 = 0.0;
        for (&i, &num) in indices.iter().zip(&numeric) {
            let a = analytic.data()[i];
            max_rel = max_rel.max(relative_error(a, num));
            max_abs = max_abs.max((a - num).abs());
        }
        params.push(ParamCheck {
            name: store.get(id).name().to_string(),
            scalars: indices.len(),
            max_rel_err: max_rel,
            max_abs_err: max_abs,
        });
    }
    let max_rel_err = params.iter().map(|p| p.max_rel_err).fold(0.0, f64::max);
    GradCheckReport {
        params,
        max_rel_err,
        tolerance,
        passed: max_rel_err < tolerance,
    }
}
