//! Central finite differences for verifying backward passes.
//!
//! Nothing here touches a layer's `backward`; the numeric gradient is built
//! purely from repeated forward evaluations.

use ndarray::{Array, ArrayViewD, Dimension};

use super::{Params, Real};

/// Norm floor below which two gradients are compared absolutely.
pub const GRAD_FLOOR: f64 = 1e-8;

/// Numeric gradient of `f` at `point` by central differences.
pub fn finite_difference<D, F>(point: &Array<f64, D>, f: F, eps: f64) -> Array<f64, D>
where
    D: Dimension,
    F: Fn(&Array<f64, D>) -> f64,
{
    let mut probe = point.clone();
    let mut grad = Array::zeros(point.raw_dim());
    let n = point.len();
    for i in 0..n {
        let orig = probe.as_slice_memory_order().expect("contiguous")[i];
        probe.as_slice_memory_order_mut().expect("contiguous")[i] = orig + eps;
        let plus = f(&probe);
        probe.as_slice_memory_order_mut().expect("contiguous")[i] = orig - eps;
        let minus = f(&probe);
        probe.as_slice_memory_order_mut().expect("contiguous")[i] = orig;
        grad.as_slice_memory_order_mut().expect("contiguous")[i] = (plus - minus) / (2.0 * eps);
    }
    grad
}

/// `‖a − b‖₂ / max(‖a‖₂, ‖b‖₂, GRAD_FLOOR)`.
pub fn relative_error<T: Real>(analytic: ArrayViewD<'_, T>, numeric: ArrayViewD<'_, T>) -> f64 {
    assert_eq!(analytic.shape(), numeric.shape(), "gradient shapes differ");
    let mut diff = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for (a, b) in analytic.iter().zip(numeric.iter()) {
        let (a, b) = (a.as_f64(), b.as_f64());
        diff += (a - b) * (a - b);
        na += a * a;
        nb += b * b;
    }
    diff.sqrt() / na.sqrt().max(nb.sqrt()).max(GRAD_FLOOR)
}

/// Per-array comparison of `grads` against a finite-difference gradient of
/// `loss` over every element of `params`. Returns `(name, relative error)`.
pub fn param_errors<P, F>(params: &P, grads: &P, loss: F, eps: f64) -> Vec<(String, f64)>
where
    P: Params<f64> + Clone,
    F: Fn(&P) -> f64,
{
    let mut probe = params.clone();
    let analytic = grads.arrays();
    let mut report = Vec::with_capacity(analytic.len());
    for (idx, (name, analytic)) in analytic.iter().enumerate() {
        let len = analytic.len();
        let mut numeric = Vec::with_capacity(len);
        for i in 0..len {
            let orig = nth(&mut probe, idx, i, None);
            nth(&mut probe, idx, i, Some(orig + eps));
            let plus = loss(&probe);
            nth(&mut probe, idx, i, Some(orig - eps));
            let minus = loss(&probe);
            nth(&mut probe, idx, i, Some(orig));
            numeric.push((plus - minus) / (2.0 * eps));
        }
        let analytic_flat: Vec<f64> = analytic
            .as_slice_memory_order()
            .expect("contiguous")
            .to_vec();
        let err = relative_error(
            ndarray::ArrayView1::from(&analytic_flat).into_dyn(),
            ndarray::ArrayView1::from(&numeric).into_dyn(),
        );
        report.push((name.clone(), err));
    }
    report
}

/// Asserts every array's relative error is at most `tol`.
pub fn check_params<P, F>(params: &P, grads: &P, loss: F, eps: f64, tol: f64)
where
    P: Params<f64> + Clone,
    F: Fn(&P) -> f64,
{
    for (name, err) in param_errors(params, grads, loss, eps) {
        assert!(
            err <= tol,
            "gradient mismatch for `{name}`: relative error {err:.3e} > {tol:.0e}"
        );
    }
}

fn nth<P: Params<f64>>(params: &mut P, array: usize, elem: usize, set: Option<f64>) -> f64 {
    let mut arrays = params.arrays_mut();
    let view = &mut arrays[array].1;
    let slot = &mut view
        .as_slice_memory_order_mut()
        .expect("contiguous parameter")[elem];
    if let Some(v) = set {
        *slot = v;
    }
    *slot
}
