//! Finite-difference gradient verification.
//!
//! Layers prove their backward passes against a central-difference oracle:
//! perturb one parameter coordinate at a time, measure the loss slope, and
//! compare with the analytically accumulated gradient. Checks run in `f64`
//! where truncation error sits far below the comparison tolerance.

use rand::Rng;

use super::{Grads, ParamId, ParamSet};

/// Central finite-difference derivative of `loss` with respect to one flat
/// coordinate of one parameter.
pub fn numeric_partial(
    params: &mut ParamSet<f64>,
    id: ParamId,
    flat_index: usize,
    eps: f64,
    loss: &mut impl FnMut(&ParamSet<f64>) -> f64,
) -> f64 {
    let original = params.get(id).as_slice().expect("standard layout")[flat_index];
    params.get_mut(id).as_slice_mut().unwrap()[flat_index] = original + eps;
    let up = loss(params);
    params.get_mut(id).as_slice_mut().unwrap()[flat_index] = original - eps;
    let down = loss(params);
    params.get_mut(id).as_slice_mut().unwrap()[flat_index] = original;
    (up - down) / (2.0 * eps)
}

/// Verifies analytic parameter gradients on randomly probed coordinates.
///
/// `backward` must accumulate the gradients of the same scalar objective
/// that `loss` evaluates. For each probe the analytic and numeric values
/// must agree within `tol * max(1, |analytic|, |numeric|)`.
///
/// # Panics
/// Panics (failing the surrounding test) on the first disagreement.
pub fn check_param_gradients<R: Rng>(
    params: &mut ParamSet<f64>,
    rng: &mut R,
    probes_per_param: usize,
    eps: f64,
    tol: f64,
    mut loss: impl FnMut(&ParamSet<f64>) -> f64,
    backward: impl FnOnce(&ParamSet<f64>, &mut Grads<f64>),
) {
    let mut grads = Grads::new(params);
    backward(params, &mut grads);

    let ids: Vec<ParamId> = params.ids().collect();
    for id in ids {
        let len = params.get(id).len();
        for _ in 0..probes_per_param.min(len) {
            let flat = rng.gen_range(0..len);
            // Accumulated gradients may carry a transposed layout; convert
            // so the flat index means the same coordinate as in the param.
            let analytic = match grads.get(id) {
                Some(g) => g.as_standard_layout().as_slice().unwrap()[flat],
                None => 0.0,
            };
            let numeric = numeric_partial(params, id, flat, eps, &mut loss);
            let scale = 1.0_f64.max(analytic.abs()).max(numeric.abs());
            assert!(
                (analytic - numeric).abs() <= tol * scale,
                "gradient mismatch for {}[{}]: analytic {analytic} vs numeric {numeric}",
                params.name(id),
                flat
            );
        }
    }
}
