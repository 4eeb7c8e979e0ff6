//! Central-difference gradient oracle. Slow; meant for tests.

use super::{Gradients, ParamStore, Tensor};

/// Estimates `∂f/∂p` for every parameter entry with `(f(p+h) − f(p−h)) / 2h`.
pub fn finite_diff_gradient<F>(mut f: F, params: &ParamStore, h: f64) -> Gradients
where
    F: FnMut(&ParamStore) -> f64,
{
    assert!(h > 0.0, "finite difference step must be positive");
    let mut work = params.clone();
    let mut out = Gradients::default();
    for id in params.ids() {
        let base = params.get(id).clone();
        let mut grad = Tensor::zeros(base.shape());
        for i in 0..base.numel() {
            work.get_mut(id).data_mut()[i] = base.data()[i] + h;
            let plus = f(&work);
            work.get_mut(id).data_mut()[i] = base.data()[i] - h;
            let minus = f(&work);
            work.get_mut(id).data_mut()[i] = base.data()[i];
            grad.data_mut()[i] = (plus - minus) / (2.0 * h);
        }
        out.insert(id, grad);
    }
    out
}

/// Largest entrywise mismatch between two gradients, as
/// `|a − b| / max(|a|, |b|)` with an absolute floor `atol` in the denominator.
pub fn max_relative_error(analytic: &Gradients, numeric: &Gradients, atol: f64) -> f64 {
    let mut worst = 0.0_f64;
    for (id, n) in numeric.iter() {
        let zeros;
        let a = match analytic.get(id) {
            Some(a) => a,
            None => {
                zeros = Tensor::zeros(n.shape());
                &zeros
            }
        };
        for (&x, &y) in a.data().iter().zip(n.data()) {
            let err = (x - y).abs() / x.abs().max(y.abs()).max(atol);
            worst = worst.max(err);
        }
    }
    worst
}
