//! Multi-head scaled dot-product attention (self- and cross-attention).

use ndarray::{s, Array2};
use rand::Rng;

use super::activation::{softmax_rows, softmax_rows_backward};
use super::{Grads, Linear, ParamSet, Scalar};

/// Bidirectional multi-head attention.
///
/// Queries come from one activation matrix and keys/values from another;
/// passing the same matrix for both gives self-attention. No causal or
/// padding mask is applied — sequences are processed one sample at a time
/// at their natural length, and decoding is non-autoregressive, so every
/// position may attend everywhere.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    wq: Linear,
    wk: Linear,
    wv: Linear,
    wo: Linear,
    heads: usize,
    d_k: usize,
}

/// Forward intermediates for one attention invocation.
#[derive(Debug, Clone)]
pub struct AttentionCache<T> {
    q: Array2<T>,
    k: Array2<T>,
    v: Array2<T>,
    /// Post-softmax attention rows, one matrix per head.
    attn: Vec<Array2<T>>,
    /// Concatenated head outputs (input to the output projection).
    concat: Array2<T>,
}

impl MultiHeadAttention {
    pub fn init<T: Scalar, R: Rng>(
        params: &mut ParamSet<T>,
        rng: &mut R,
        name: &str,
        d_model: usize,
        heads: usize,
    ) -> Self {
        assert!(
            heads > 0 && d_model % heads == 0,
            "model dim {d_model} must divide evenly into {heads} heads"
        );
        Self {
            wq: Linear::init(params, rng, &format!("{name}.wq"), d_model, d_model, true),
            wk: Linear::init(params, rng, &format!("{name}.wk"), d_model, d_model, true),
            wv: Linear::init(params, rng, &format!("{name}.wv"), d_model, d_model, true),
            wo: Linear::init(params, rng, &format!("{name}.wo"), d_model, d_model, true),
            heads,
            d_k: d_model / heads,
        }
    }

    /// Attention weights from the most recent forward, one `[nq, nk]`
    /// matrix per head.
    pub fn attention_rows<'c, T>(cache: &'c AttentionCache<T>) -> &'c [Array2<T>] {
        &cache.attn
    }

    pub fn forward<T: Scalar>(
        &self,
        params: &ParamSet<T>,
        q_in: &Array2<T>,
        kv_in: &Array2<T>,
    ) -> (Array2<T>, AttentionCache<T>) {
        let q = self.wq.forward(params, q_in);
        let k = self.wk.forward(params, kv_in);
        let v = self.wv.forward(params, kv_in);
        let scale = T::from_f64_lossy(1.0 / (self.d_k as f64).sqrt());

        let mut concat = Array2::zeros((q_in.nrows(), self.heads * self.d_k));
        let mut attn = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let cols = h * self.d_k..(h + 1) * self.d_k;
            let q_h = q.slice(s![.., cols.clone()]);
            let k_h = k.slice(s![.., cols.clone()]);
            let v_h = v.slice(s![.., cols.clone()]);
            let scores = q_h.dot(&k_h.t()).mapv_into(|x| x * scale);
            let a = softmax_rows(&scores);
            let o_h = a.dot(&v_h);
            concat.slice_mut(s![.., cols]).assign(&o_h);
            attn.push(a);
        }
        let out = self.wo.forward(params, &concat);
        (out, AttentionCache { q, k, v, attn, concat })
    }

    /// Returns `(grad_q_in, grad_kv_in)`. For self-attention callers must
    /// add the two (queries and keys/values came from the same tensor).
    pub fn backward<T: Scalar>(
        &self,
        params: &ParamSet<T>,
        q_in: &Array2<T>,
        kv_in: &Array2<T>,
        cache: &AttentionCache<T>,
        grad_out: &Array2<T>,
        grads: &mut Grads<T>,
    ) -> (Array2<T>, Array2<T>) {
        let scale = T::from_f64_lossy(1.0 / (self.d_k as f64).sqrt());
        let d_concat = self.wo.backward(params, &cache.concat, grad_out, grads);

        let mut dq = Array2::zeros(cache.q.raw_dim());
        let mut dk = Array2::zeros(cache.k.raw_dim());
        let mut dv = Array2::zeros(cache.v.raw_dim());
        for h in 0..self.heads {
            let cols = h * self.d_k..(h + 1) * self.d_k;
            let a = &cache.attn[h];
            let q_h = cache.q.slice(s![.., cols.clone()]);
            let k_h = cache.k.slice(s![.., cols.clone()]);
            let v_h = cache.v.slice(s![.., cols.clone()]);
            let d_o = d_concat.slice(s![.., cols.clone()]);

            let d_a = d_o.dot(&v_h.t());
            let d_scores = softmax_rows_backward(a, &d_a).mapv_into(|x| x * scale);
            dq.slice_mut(s![.., cols.clone()])
                .assign(&d_scores.dot(&k_h));
            dk.slice_mut(s![.., cols.clone()])
                .assign(&d_scores.t().dot(&q_h));
            dv.slice_mut(s![.., cols]).assign(&a.t().dot(&d_o));
        }

        let d_q_in = self.wq.backward(params, q_in, &dq, grads);
        let d_kv_k = self.wk.backward(params, kv_in, &dk, grads);
        let d_kv_v = self.wv.backward(params, kv_in, &dv, grads);
        (d_q_in, d_kv_k + &d_kv_v)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::check_param_gradients;
    use crate::nn::normal_init;
    use crate::util::rng_from_seed;
    use ndarray::Axis;

    fn sample(rng: &mut impl Rng, rows: usize, cols: usize) -> Array2<f64> {
        normal_init::<f64, _>(rng, &[rows, cols], 0.7)
            .into_dimensionality()
            .unwrap()
    }

    #[test]
    fn attention_rows_are_distributions() {
        let mut rng = rng_from_seed(23);
        let mut ps: ParamSet<f64> = ParamSet::new();
        let mha = MultiHeadAttention::init(&mut ps, &mut rng, "attn", 8, 2);
        let x = sample(&mut rng, 5, 8);
        let ctx = sample(&mut rng, 3, 8);
        let (out, cache) = mha.forward(&ps, &x, &ctx);
        assert_eq!(out.dim(), (5, 8));
        assert_eq!(cache.attn.len(), 2);
        for a in &cache.attn {
            assert_eq!(a.dim(), (5, 3));
            for row in a.axis_iter(Axis(0)) {
                assert!((row.sum() - 1.0).abs() < 1e-12);
                assert!(row.iter().all(|&p| p >= 0.0));
            }
        }
    }

    #[test]
    fn cross_attention_gradients_match_finite_difference() {
        let mut rng = rng_from_seed(29);
        let mut ps: ParamSet<f64> = ParamSet::new();
        let mha = MultiHeadAttention::init(&mut ps, &mut rng, "attn", 6, 3);
        let x = sample(&mut rng, 4, 6);
        let ctx = sample(&mut rng, 2, 6);
        let weights = sample(&mut rng, 4, 6);
        check_param_gradients(
            &mut ps,
            &mut rng,
            8,
            1e-5,
            1e-6,
            |ps| (&mha.forward(ps, &x, &ctx).0 * &weights).sum(),
            |ps, grads| {
                let (_, cache) = mha.forward(ps, &x, &ctx);
                mha.backward(ps, &x, &ctx, &cache, &weights, grads);
            },
        );
    }

    #[test]
    fn self_attention_input_gradient_matches_finite_difference() {
        let mut rng = rng_from_seed(31);
        let mut ps: ParamSet<f64> = ParamSet::new();
        let mha = MultiHeadAttention::init(&mut ps, &mut rng, "attn", 4, 2);
        let x = sample(&mut rng, 3, 4);
        let weights = sample(&mut rng, 3, 4);
        let loss = |x: &Array2<f64>| (&mha.forward(&ps, x, x).0 * &weights).sum();
        let (_, cache) = mha.forward(&ps, &x, &x);
        let mut grads = Grads::new(&ps);
        let (dq, dkv) = mha.backward(&ps, &x, &x, &cache, &weights, &mut grads);
        let dx = dq + &dkv;
        let eps = 1e-6;
        for i in 0..3 {
            for j in 0..4 {
                let mut xp = x.clone();
                xp[[i, j]] += eps;
                let mut xm = x.clone();
                xm[[i, j]] -= eps;
                let numeric = (loss(&xp) - loss(&xm)) / (2.0 * eps);
                assert!(
                    (dx[[i, j]] - numeric).abs() < 1e-7,
                    "({i},{j}): analytic {} vs numeric {numeric}",
                    dx[[i, j]]
                );
            }
        }
    }
}
