//! 2D convolution via im2col on channels-first single-sample tensors.

use ndarray::{Array1, Array2, Array3, ArrayD, Axis, IxDyn};
use rand::Rng;

use super::{normal_init, Grads, ParamId, ParamSet, Scalar};

/// Convolution over `[channels, height, width]` activations.
///
/// The kernel is stored flattened as `[c_out, c_in * k * k]` so forward and
/// backward reduce to matrix products against the im2col patch matrix.
#[derive(Debug, Clone)]
pub struct Conv2d {
    w: ParamId,
    b: ParamId,
    c_in: usize,
    c_out: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
}

/// Forward intermediates: the patch matrix plus spatial bookkeeping.
#[derive(Debug, Clone)]
pub struct ConvCache<T> {
    cols: Array2<T>,
    in_h: usize,
    in_w: usize,
    out_h: usize,
    out_w: usize,
}

impl Conv2d {
    /// He-initialized kernel (`std = sqrt(2 / fan_in)`), zero bias.
    pub fn init<T: Scalar, R: Rng>(
        params: &mut ParamSet<T>,
        rng: &mut R,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let fan_in = c_in * kernel * kernel;
        let std = (2.0 / fan_in as f64).sqrt();
        let w = params.add(format!("{name}.w"), normal_init(rng, &[c_out, fan_in], std));
        let b = params.add(format!("{name}.b"), ArrayD::zeros(IxDyn(&[c_out])));
        Self { w, b, c_in, c_out, kernel, stride, pad }
    }

    /// Zero-initialized kernel and bias, for output heads that should
    /// start out as a constant function.
    pub fn init_zero<T: Scalar>(
        params: &mut ParamSet<T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let fan_in = c_in * kernel * kernel;
        let w = params.add(format!("{name}.w"), ArrayD::zeros(IxDyn(&[c_out, fan_in])));
        let b = params.add(format!("{name}.b"), ArrayD::zeros(IxDyn(&[c_out])));
        Self { w, b, c_in, c_out, kernel, stride, pad }
    }

    pub fn out_channels(&self) -> usize {
        self.c_out
    }

    /// Output spatial size for an input of `(h, w)`.
    pub fn out_size(&self, h: usize, w: usize) -> (usize, usize) {
        let oh = (h + 2 * self.pad - self.kernel) / self.stride + 1;
        let ow = (w + 2 * self.pad - self.kernel) / self.stride + 1;
        (oh, ow)
    }

    fn im2col<T: Scalar>(&self, x: &Array3<T>, out_h: usize, out_w: usize) -> Array2<T> {
        let (c_in, h, w) = x.dim();
        let k = self.kernel;
        let mut cols = Array2::zeros((c_in * k * k, out_h * out_w));
        for ci in 0..c_in {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    for oy in 0..out_h {
                        let in_y = (oy * self.stride + ky) as isize - self.pad as isize;
                        if in_y < 0 || in_y >= h as isize {
                            continue;
                        }
                        for ox in 0..out_w {
                            let in_x = (ox * self.stride + kx) as isize - self.pad as isize;
                            if in_x < 0 || in_x >= w as isize {
                                continue;
                            }
                            cols[[row, oy * out_w + ox]] =
                                x[[ci, in_y as usize, in_x as usize]];
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im<T: Scalar>(&self, d_cols: &Array2<T>, h: usize, w: usize) -> Array3<T> {
        let k = self.kernel;
        let out_w = {
            let (_, ow) = self.out_size(h, w);
            ow
        };
        let (out_h, _) = self.out_size(h, w);
        let mut dx = Array3::zeros((self.c_in, h, w));
        for ci in 0..self.c_in {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    for oy in 0..out_h {
                        let in_y = (oy * self.stride + ky) as isize - self.pad as isize;
                        if in_y < 0 || in_y >= h as isize {
                            continue;
                        }
                        for ox in 0..out_w {
                            let in_x = (ox * self.stride + kx) as isize - self.pad as isize;
                            if in_x < 0 || in_x >= w as isize {
                                continue;
                            }
                            dx[[ci, in_y as usize, in_x as usize]] =
                                dx[[ci, in_y as usize, in_x as usize]]
                                    + d_cols[[row, oy * out_w + ox]];
                        }
                    }
                }
            }
        }
        dx
    }

    pub fn forward<T: Scalar>(
        &self,
        params: &ParamSet<T>,
        x: &Array3<T>,
    ) -> (Array3<T>, ConvCache<T>) {
        let (c_in, h, w) = x.dim();
        debug_assert_eq!(c_in, self.c_in);
        let (out_h, out_w) = self.out_size(h, w);
        let cols = self.im2col(x, out_h, out_w);
        let mut out_mat = params.get2(self.w).dot(&cols);
        let bias = params.get1(self.b);
        for (mut row, &b) in out_mat.axis_iter_mut(Axis(0)).zip(bias.iter()) {
            row.mapv_inplace(|v| v + b);
        }
        let out = out_mat
            .into_shape_with_order((self.c_out, out_h, out_w))
            .expect("conv output reshape");
        (out, ConvCache { cols, in_h: h, in_w: w, out_h, out_w })
    }

    pub fn backward<T: Scalar>(
        &self,
        params: &ParamSet<T>,
        cache: &ConvCache<T>,
        grad_out: &Array3<T>,
        grads: &mut Grads<T>,
    ) -> Array3<T> {
        let d_out = grad_out
            .view()
            .into_shape_with_order((self.c_out, cache.out_h * cache.out_w))
            .expect("conv gradient reshape");
        let dw = d_out.dot(&cache.cols.t());
        let db: Array1<T> = d_out.sum_axis(Axis(1));
        grads.accumulate(self.w, dw.into_dyn());
        grads.accumulate(self.b, db.into_dyn());
        let d_cols = params.get2(self.w).t().dot(&d_out);
        self.col2im(&d_cols, cache.in_h, cache.in_w)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::check_param_gradients;
    use crate::util::rng_from_seed;

    fn sample3(rng: &mut impl Rng, c: usize, h: usize, w: usize) -> Array3<f64> {
        normal_init::<f64, _>(rng, &[c, h, w], 1.0)
            .into_dimensionality()
            .unwrap()
    }

    #[test]
    fn identity_kernel_reproduces_input() {
        // 1x1 kernel with weight 1 and zero bias is the identity map.
        let mut ps: ParamSet<f64> = ParamSet::new();
        let conv = Conv2d::init(&mut ps, &mut rng_from_seed(1), "c", 1, 1, 1, 1, 0);
        ps.get_mut(conv.w).mapv_inplace(|_| 1.0);
        let x = sample3(&mut rng_from_seed(2), 1, 4, 4);
        let (y, _) = conv.forward(&ps, &x);
        assert_eq!(y, x);
    }

    #[test]
    fn shapes_follow_stride_and_padding() {
        let mut ps: ParamSet<f64> = ParamSet::new();
        let conv = Conv2d::init(&mut ps, &mut rng_from_seed(3), "c", 3, 8, 3, 2, 1);
        assert_eq!(conv.out_size(64, 64), (32, 32));
        let x = sample3(&mut rng_from_seed(4), 3, 10, 8);
        let (y, _) = conv.forward(&ps, &x);
        assert_eq!(y.dim(), (8, 5, 4));
    }

    #[test]
    fn averaging_kernel_matches_hand_computation() {
        // 2x2 kernel of 0.25 with stride 2 computes non-overlapping means.
        let mut ps: ParamSet<f64> = ParamSet::new();
        let conv = Conv2d::init(&mut ps, &mut rng_from_seed(5), "c", 1, 1, 2, 2, 0);
        ps.get_mut(conv.w).mapv_inplace(|_| 0.25);
        let x = ndarray::arr3(&[[[1.0, 2.0, 3.0, 4.0], [5.0, 6.0, 7.0, 8.0]]]);
        let (y, _) = conv.forward(&ps, &x);
        assert_eq!(y, ndarray::arr3(&[[[3.5, 5.5]]]));
    }

    #[test]
    fn gradients_match_finite_difference() {
        let mut rng = rng_from_seed(7);
        let mut ps: ParamSet<f64> = ParamSet::new();
        let conv = Conv2d::init(&mut ps, &mut rng, "c", 2, 3, 3, 2, 1);
        let x = sample3(&mut rng, 2, 5, 5);
        let weights = sample3(&mut rng, 3, 3, 3);
        check_param_gradients(
            &mut ps,
            &mut rng,
            10,
            1e-5,
            1e-6,
            |ps| (&conv.forward(ps, &x).0 * &weights).sum(),
            |ps, grads| {
                let (_, cache) = conv.forward(ps, &x);
                conv.backward(ps, &cache, &weights, grads);
            },
        );
    }

    #[test]
    fn input_gradient_matches_finite_difference() {
        let mut rng = rng_from_seed(9);
        let mut ps: ParamSet<f64> = ParamSet::new();
        let conv = Conv2d::init(&mut ps, &mut rng, "c", 1, 2, 3, 1, 1);
        let x = sample3(&mut rng, 1, 4, 4);
        let weights = sample3(&mut rng, 2, 4, 4);
        let loss = |x: &Array3<f64>| (&conv.forward(&ps, x).0 * &weights).sum();
        let (_, cache) = conv.forward(&ps, &x);
        let mut grads = Grads::new(&ps);
        let dx = conv.backward(&ps, &cache, &weights, &mut grads);
        let eps = 1e-6;
        for c in 0..1 {
            for i in 0..4 {
                for j in 0..4 {
                    let mut xp = x.clone();
                    xp[[c, i, j]] += eps;
                    let mut xm = x.clone();
                    xm[[c, i, j]] -= eps;
                    let numeric = (loss(&xp) - loss(&xm)) / (2.0 * eps);
                    assert!(
                        (dx[[c, i, j]] - numeric).abs() < 1e-7,
                        "({c},{i},{j}): analytic {} vs numeric {numeric}",
                        dx[[c, i, j]]
                    );
                }
            }
        }
    }
}
