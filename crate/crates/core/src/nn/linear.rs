//! Fully connected layer on row-major activation matrices.

use ndarray::{Array1, Array2, ArrayD, Axis};
use rand::Rng;

use super::{glorot_init, Grads, ParamId, ParamSet, Scalar};

/// Affine map `y = x W + b` for activations shaped `[rows, in_dim]`.
#[derive(Debug, Clone)]
pub struct Linear {
    w: ParamId,
    b: Option<ParamId>,
    in_dim: usize,
    out_dim: usize,
}

impl Linear {
    /// Glorot-initialized weights; bias (if any) starts at zero.
    pub fn init<T: Scalar, R: Rng>(
        params: &mut ParamSet<T>,
        rng: &mut R,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
    ) -> Self {
        let w = params.add(format!("{name}.w"), glorot_init(rng, in_dim, out_dim));
        let b = bias.then(|| params.add(format!("{name}.b"), ArrayD::zeros(ndarray::IxDyn(&[out_dim]))));
        Self { w, b, in_dim, out_dim }
    }

    /// All-zero weights and bias. Used for output heads whose initial
    /// predictions must be exactly uniform over the allowed support.
    pub fn init_zero<T: Scalar>(
        params: &mut ParamSet<T>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
    ) -> Self {
        let w = params.add(
            format!("{name}.w"),
            ArrayD::zeros(ndarray::IxDyn(&[in_dim, out_dim])),
        );
        let b = bias.then(|| params.add(format!("{name}.b"), ArrayD::zeros(ndarray::IxDyn(&[out_dim]))));
        Self { w, b, in_dim, out_dim }
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn weight_id(&self) -> ParamId {
        self.w
    }

    pub fn forward<T: Scalar>(&self, params: &ParamSet<T>, x: &Array2<T>) -> Array2<T> {
        debug_assert_eq!(x.ncols(), self.in_dim);
        let mut y = x.dot(&params.get2(self.w));
        if let Some(b) = self.b {
            y += &params.get1(b);
        }
        y
    }

    /// Accumulates `dW = x^T g` (and `db = sum_rows g`) and returns
    /// `dx = g W^T`. `x` is the cached forward input.
    pub fn backward<T: Scalar>(
        &self,
        params: &ParamSet<T>,
        x: &Array2<T>,
        grad_out: &Array2<T>,
        grads: &mut Grads<T>,
    ) -> Array2<T> {
        let dw = x.t().dot(grad_out);
        grads.accumulate(self.w, dw.into_dyn());
        if let Some(b) = self.b {
            let db: Array1<T> = grad_out.sum_axis(Axis(0));
            grads.accumulate(b, db.into_dyn());
        }
        grad_out.dot(&params.get2(self.w).t())
    }
}
