//! Elementwise nonlinearities and row-wise softmax with explicit backward
//! passes.

use ndarray::{Array2, Axis};

use super::Scalar;

// ============================================================================
// ReLU
// ============================================================================

pub fn relu<T: Scalar>(x: &Array2<T>) -> Array2<T> {
    x.mapv(|v| v.max(T::zero()))
}

/// Gradient of ReLU given the forward *input*.
pub fn relu_backward<T: Scalar>(x: &Array2<T>, grad_out: &Array2<T>) -> Array2<T> {
    let mut grad = grad_out.clone();
    ndarray::Zip::from(&mut grad).and(x).for_each(|g, &v| {
        if v <= T::zero() {
            *g = T::zero();
        }
    });
    grad
}

// ============================================================================
// GELU (tanh approximation)
// ============================================================================

const GELU_COEF: f64 = 0.044_715;

fn gelu_inner<T: Scalar>(x: T) -> (T, T) {
    let c = T::from_f64_lossy((2.0 / std::f64::consts::PI).sqrt());
    let a = T::from_f64_lossy(GELU_COEF);
    let half = T::from_f64_lossy(0.5);
    let three = T::from_f64_lossy(3.0);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let y = half * x * (T::one() + t);
    let sech2 = T::one() - t * t;
    let du = c * (T::one() + three * a * x * x);
    let dy = half * (T::one() + t) + half * x * sech2 * du;
    (y, dy)
}

pub fn gelu<T: Scalar>(x: &Array2<T>) -> Array2<T> {
    x.mapv(|v| gelu_inner(v).0)
}

/// Gradient of GELU given the forward *input*.
pub fn gelu_backward<T: Scalar>(x: &Array2<T>, grad_out: &Array2<T>) -> Array2<T> {
    let mut grad = grad_out.clone();
    ndarray::Zip::from(&mut grad).and(x).for_each(|g, &v| {
        *g = *g * gelu_inner(v).1;
    });
    grad
}

// ============================================================================
// Sigmoid
// ============================================================================

/// Numerically stable logistic function.
pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

// ============================================================================
// Row-wise softmax
// ============================================================================

/// Stable softmax applied independently to each row.
pub fn softmax_rows<T: Scalar>(x: &Array2<T>) -> Array2<T> {
    let mut out = x.clone();
    for mut row in out.axis_iter_mut(Axis(0)) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

/// Gradient of row-wise softmax given the forward *output* `y`.
///
/// Per row: `dx = y * (dy - sum(dy * y))`.
pub fn softmax_rows_backward<T: Scalar>(y: &Array2<T>, grad_out: &Array2<T>) -> Array2<T> {
    let mut grad = grad_out.clone();
    for (mut g, y_row) in grad.axis_iter_mut(Axis(0)).zip(y.axis_iter(Axis(0))) {
        let dot = g
            .iter()
            .zip(y_row.iter())
            .fold(T::zero(), |acc, (&gv, &yv)| acc + gv * yv);
        ndarray::Zip::from(&mut g).and(&y_row).for_each(|g, &yv| {
            *g = yv * (*g - dot);
        });
    }
    grad
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;

    /// Central finite difference of a scalar map.
    fn numeric_derivative(f: impl Fn(f64) -> f64, x: f64) -> f64 {
        let eps = 1e-6;
        (f(x + eps) - f(x - eps)) / (2.0 * eps)
    }

    #[test]
    fn relu_forward_and_backward() {
        let x = arr2(&[[-1.0, 0.0, 2.0]]);
        let y = relu(&x);
        assert_eq!(y, arr2(&[[0.0, 0.0, 2.0]]));
        let g = relu_backward(&x, &arr2(&[[5.0, 5.0, 5.0]]));
        assert_eq!(g, arr2(&[[0.0, 0.0, 5.0]]));
    }

    #[test]
    fn gelu_matches_reference_values() {
        // gelu(0) = 0 and gelu is close to identity for large positive x.
        let x: Array2<f64> = arr2(&[[0.0, 3.0, -3.0]]);
        let y = gelu(&x);
        assert!(y[[0, 0]].abs() < 1e-12);
        assert!((y[[0, 1]] - 3.0f64).abs() < 2e-2);
        assert!(y[[0, 2]].abs() < 2e-2);
    }

    #[test]
    fn gelu_gradient_matches_finite_difference() {
        for &v in &[-2.0, -0.5, 0.0, 0.3, 1.7] {
            let x = arr2(&[[v]]);
            let analytic = gelu_backward(&x, &arr2(&[[1.0]]))[[0, 0]];
            let numeric = numeric_derivative(|t| gelu(&arr2(&[[t]]))[[0, 0]], v);
            assert!(
                (analytic - numeric).abs() < 1e-7,
                "x={v}: analytic {analytic} vs numeric {numeric}"
            );
        }
    }

    #[test]
    fn sigmoid_is_stable_at_extremes() {
        assert!((sigmoid(0.0f64) - 0.5).abs() < 1e-15);
        assert!(sigmoid(500.0f64) <= 1.0);
        assert!(sigmoid(-500.0f64) >= 0.0);
        assert!((sigmoid(-500.0f64)).abs() < 1e-100);
    }

    #[test]
    fn softmax_rows_sum_to_one_and_order_preserved() {
        let x = arr2(&[[1.0, 2.0, 3.0], [1000.0, 1000.0, 1000.0]]);
        let y = softmax_rows(&x);
        for row in y.axis_iter(Axis(0)) {
            assert!((row.sum() - 1.0f64).abs() < 1e-12);
        }
        assert!(y[[0, 2]] > y[[0, 1]] && y[[0, 1]] > y[[0, 0]]);
        // Uniform row stays uniform even with large magnitudes.
        assert!((y[[1, 0]] - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_backward_matches_finite_difference() {
        let x = arr2(&[[0.2, -1.0, 0.7, 0.0]]);
        let weights = arr2(&[[0.3, -0.8, 0.1, 0.9]]);
        // Scalar objective: sum(weights * softmax(x)).
        let loss = |x: &Array2<f64>| (softmax_rows(x) * &weights).sum();
        let y = softmax_rows(&x);
        let analytic = softmax_rows_backward(&y, &weights);
        let eps = 1e-6;
        for j in 0..4 {
            let mut xp = x.clone();
            xp[[0, j]] += eps;
            let mut xm = x.clone();
            xm[[0, j]] -= eps;
            let numeric = (loss(&xp) - loss(&xm)) / (2.0 * eps);
            assert!(
                (analytic[[0, j]] - numeric).abs() < 1e-8,
                "coord {j}: analytic {} vs numeric {numeric}",
                analytic[[0, j]]
            );
        }
    }
}
