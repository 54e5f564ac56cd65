//! Layer normalization over the last axis of a row-major activation matrix,
//! plus a channels-first wrapper for convolutional feature maps.

use ndarray::{Array1, Array2, Array3, ArrayD, Axis, IxDyn};

use super::{Grads, ParamId, ParamSet, Scalar};

const EPS: f64 = 1e-5;

/// `y = (x - mean) / sqrt(var + eps) * gamma + beta`, computed per row.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    gamma: ParamId,
    beta: ParamId,
    dim: usize,
}

/// Forward intermediates needed by the backward pass.
#[derive(Debug, Clone)]
pub struct LayerNormCache<T> {
    x_hat: Array2<T>,
    inv_std: Array1<T>,
}

impl LayerNorm {
    pub fn init<T: Scalar>(params: &mut ParamSet<T>, name: &str, dim: usize) -> Self {
        let gamma = params.add(format!("{name}.gamma"), ArrayD::ones(IxDyn(&[dim])));
        let beta = params.add(format!("{name}.beta"), ArrayD::zeros(IxDyn(&[dim])));
        Self { gamma, beta, dim }
    }

    pub fn forward<T: Scalar>(
        &self,
        params: &ParamSet<T>,
        x: &Array2<T>,
    ) -> (Array2<T>, LayerNormCache<T>) {
        debug_assert_eq!(x.ncols(), self.dim);
        let n = T::from_f64_lossy(self.dim as f64);
        let eps = T::from_f64_lossy(EPS);
        let mut x_hat = x.clone();
        let mut inv_std = Array1::zeros(x.nrows());
        for (mut row, inv) in x_hat.axis_iter_mut(Axis(0)).zip(inv_std.iter_mut()) {
            let mean = row.sum() / n;
            row.mapv_inplace(|v| v - mean);
            let var = row.fold(T::zero(), |acc, &v| acc + v * v) / n;
            let is = T::one() / (var + eps).sqrt();
            row.mapv_inplace(|v| v * is);
            *inv = is;
        }
        let gamma = params.get1(self.gamma);
        let beta = params.get1(self.beta);
        let mut y = x_hat.clone();
        for mut row in y.axis_iter_mut(Axis(0)) {
            ndarray::Zip::from(&mut row)
                .and(&gamma)
                .and(&beta)
                .for_each(|y, &g, &b| *y = *y * g + b);
        }
        (y, LayerNormCache { x_hat, inv_std })
    }

    /// Standard per-row backward:
    /// `dx = inv_std/D * (D*dxh - sum(dxh) - xh * sum(dxh*xh))` with
    /// `dxh = dy * gamma`.
    pub fn backward<T: Scalar>(
        &self,
        params: &ParamSet<T>,
        cache: &LayerNormCache<T>,
        grad_out: &Array2<T>,
        grads: &mut Grads<T>,
    ) -> Array2<T> {
        let gamma = params.get1(self.gamma);
        let d = T::from_f64_lossy(self.dim as f64);

        let dgamma: Array1<T> = (grad_out * &cache.x_hat).sum_axis(Axis(0));
        let dbeta: Array1<T> = grad_out.sum_axis(Axis(0));
        grads.accumulate(self.gamma, dgamma.into_dyn());
        grads.accumulate(self.beta, dbeta.into_dyn());

        let mut grad_in = Array2::zeros(grad_out.raw_dim());
        for ((dy, xh), (mut dx, &inv)) in grad_out
            .axis_iter(Axis(0))
            .zip(cache.x_hat.axis_iter(Axis(0)))
            .zip(grad_in.axis_iter_mut(Axis(0)).zip(cache.inv_std.iter()))
        {
            // dxh = dy * gamma
            let dxh: Array1<T> = ndarray::Zip::from(&dy)
                .and(&gamma)
                .map_collect(|&dy, &g| dy * g);
            let sum_dxh = dxh.sum();
            let sum_dxh_xh = ndarray::Zip::from(&dxh)
                .and(&xh)
                .fold(T::zero(), |acc, &a, &b| acc + a * b);
            ndarray::Zip::from(&mut dx)
                .and(&dxh)
                .and(&xh)
                .for_each(|dx, &dxh, &xh| {
                    *dx = inv / d * (d * dxh - sum_dxh - xh * sum_dxh_xh);
                });
        }
        grad_in
    }
}

// ============================================================================
// Channel normalization for feature maps
// ============================================================================

/// Layer norm applied across channels independently at every spatial
/// position of a `[channels, height, width]` feature map.
///
/// Statistics never mix spatial positions or samples, so inference is
/// batch-independent and deterministic.
#[derive(Debug, Clone)]
pub struct ChannelNorm {
    inner: LayerNorm,
    channels: usize,
}

#[derive(Debug, Clone)]
pub struct ChannelNormCache<T> {
    inner: LayerNormCache<T>,
    h: usize,
    w: usize,
}

impl ChannelNorm {
    pub fn init<T: Scalar>(params: &mut ParamSet<T>, name: &str, channels: usize) -> Self {
        Self {
            inner: LayerNorm::init(params, name, channels),
            channels,
        }
    }

    fn to_rows<T: Scalar>(x: &Array3<T>) -> Array2<T> {
        let (c, h, w) = x.dim();
        let flat = x
            .view()
            .into_shape_with_order((c, h * w))
            .expect("standard layout");
        flat.t().as_standard_layout().to_owned()
    }

    fn from_rows<T: Scalar>(rows: Array2<T>, c: usize, h: usize, w: usize) -> Array3<T> {
        rows.t()
            .as_standard_layout()
            .to_owned()
            .into_shape_with_order((c, h, w))
            .expect("channel-major reshape")
    }

    pub fn forward<T: Scalar>(
        &self,
        params: &ParamSet<T>,
        x: &Array3<T>,
    ) -> (Array3<T>, ChannelNormCache<T>) {
        let (c, h, w) = x.dim();
        debug_assert_eq!(c, self.channels);
        let rows = Self::to_rows(x);
        let (y_rows, inner) = self.inner.forward(params, &rows);
        (
            Self::from_rows(y_rows, c, h, w),
            ChannelNormCache { inner, h, w },
        )
    }

    pub fn backward<T: Scalar>(
        &self,
        params: &ParamSet<T>,
        cache: &ChannelNormCache<T>,
        grad_out: &Array3<T>,
        grads: &mut Grads<T>,
    ) -> Array3<T> {
        let rows = Self::to_rows(grad_out);
        let d_rows = self.inner.backward(params, &cache.inner, &rows, grads);
        Self::from_rows(d_rows, self.channels, cache.h, cache.w)
    }
}
