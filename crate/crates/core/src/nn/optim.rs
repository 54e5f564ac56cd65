//! AdamW optimizer with decoupled weight decay and the warmup/inverse-sqrt
//! learning-rate schedule used by the sequence models.

use ndarray::ArrayD;

use super::{Grads, ParamSet, Scalar};

// ============================================================================
// Learning-rate schedule
// ============================================================================

/// Learning rate at 1-based `step`: linear warmup to `base` over
/// `warmup_steps`, then inverse-square-root decay.
///
/// `lr(step) = base * min(step / warmup, sqrt(warmup / step))`, so the two
/// branches meet exactly at `step == warmup`.
pub fn lr_at_step(base: f64, warmup_steps: usize, step: usize) -> f64 {
    assert!(step >= 1, "schedule steps are 1-based");
    let warmup = warmup_steps.max(1) as f64;
    let step = step as f64;
    base * (step / warmup).min((warmup / step).sqrt())
}

// ============================================================================
// AdamW
// ============================================================================

/// AdamW: Adam moment estimates with weight decay applied directly to the
/// parameters rather than folded into the gradient.
#[derive(Debug, Clone)]
pub struct AdamW<T> {
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    step: usize,
    m: Vec<Option<ArrayD<T>>>,
    v: Vec<Option<ArrayD<T>>>,
}

impl<T: Scalar> AdamW<T> {
    /// Optimizer with moment coefficients `(beta1, beta2)`.
    pub fn new(params: &ParamSet<T>, beta1: f64, beta2: f64, weight_decay: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: vec![None; params.len()],
            v: vec![None; params.len()],
        }
    }

    /// Number of completed optimizer steps.
    pub fn steps_done(&self) -> usize {
        self.step
    }

    /// Applies one update with learning rate `lr`.
    ///
    /// Parameters without an accumulated gradient are still weight-decayed;
    /// their moments stay untouched.
    pub fn step(&mut self, params: &mut ParamSet<T>, grads: &Grads<T>, lr: f64) {
        self.step += 1;
        let t = self.step as i32;
        let bias1 = 1.0 - self.beta1.powi(t);
        let bias2 = 1.0 - self.beta2.powi(t);
        let b1 = T::from_f64_lossy(self.beta1);
        let b2 = T::from_f64_lossy(self.beta2);
        let one_minus_b1 = T::from_f64_lossy(1.0 - self.beta1);
        let one_minus_b2 = T::from_f64_lossy(1.0 - self.beta2);
        let eps = T::from_f64_lossy(self.eps);
        let lr_t = T::from_f64_lossy(lr);
        let decay = T::from_f64_lossy(lr * self.weight_decay);
        let inv_bias1 = T::from_f64_lossy(1.0 / bias1);
        let inv_bias2 = T::from_f64_lossy(1.0 / bias2);

        let ids: Vec<_> = params.ids().collect();
        for (i, id) in ids.into_iter().enumerate() {
            if self.weight_decay != 0.0 {
                params.get_mut(id).mapv_inplace(|p| p - decay * p);
            }
            let Some(grad) = grads.get(id) else { continue };
            let m = self.m[i].get_or_insert_with(|| ArrayD::zeros(grad.raw_dim()));
            let v = self.v[i].get_or_insert_with(|| ArrayD::zeros(grad.raw_dim()));
            ndarray::Zip::from(&mut *m).and(&grad).for_each(|m, &g| {
                *m = b1 * *m + one_minus_b1 * g;
            });
            ndarray::Zip::from(&mut *v).and(&grad).for_each(|v, &g| {
                *v = b2 * *v + one_minus_b2 * g * g;
            });
            let value = params.get_mut(id);
            ndarray::Zip::from(value)
                .and(&*m)
                .and(&*v)
                .for_each(|p, &m, &v| {
                    let m_hat = m * inv_bias1;
                    let v_hat = v * inv_bias2;
                    *p = *p - lr_t * m_hat / (v_hat.sqrt() + eps);
                });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;

    #[test]
    fn schedule_warms_up_linearly_then_decays() {
        let base = 1e-3;
        let warmup = 100;
        assert!((lr_at_step(base, warmup, 1) - base / 100.0).abs() < 1e-15);
        assert!((lr_at_step(base, warmup, 50) - base * 0.5).abs() < 1e-15);
        // The branches meet at the warmup boundary.
        assert!((lr_at_step(base, warmup, 100) - base).abs() < 1e-15);
        // Inverse-sqrt decay: four times the steps halves the rate.
        let after = lr_at_step(base, warmup, 400);
        assert!((after - base * 0.5).abs() < 1e-15);
        // Monotone non-increasing past warmup.
        assert!(lr_at_step(base, warmup, 101) <= base);
    }

    #[test]
    fn first_step_moves_parameter_by_lr() {
        // With a single scalar parameter, bias correction makes the very
        // first Adam update equal to lr * sign(grad) (up to eps).
        let mut ps: ParamSet<f64> = ParamSet::new();
        let w = ps.add("w", ndarray::arr1(&[1.0]).into_dyn());
        let mut grads = Grads::new(&ps);
        grads.accumulate(w, ndarray::arr1(&[0.5]).into_dyn());
        let mut opt = AdamW::new(&ps, 0.9, 0.98, 0.0);
        opt.step(&mut ps, &grads, 0.1);
        let got = ps.get(w)[[0]];
        assert!((got - (1.0 - 0.1)).abs() < 1e-6, "got {got}");
    }

    #[test]
    fn descends_a_quadratic() {
        // Minimize f(w) = 0.5 * w^2 starting from w = 3; gradient is w.
        let mut ps: ParamSet<f64> = ParamSet::new();
        let w = ps.add("w", ndarray::arr1(&[3.0]).into_dyn());
        let mut opt = AdamW::new(&ps, 0.9, 0.98, 0.0);
        for _ in 0..500 {
            let mut grads = Grads::new(&ps);
            let value = ps.get(w)[[0]];
            grads.accumulate(w, ndarray::arr1(&[value]).into_dyn());
            opt.step(&mut ps, &grads, 0.05);
        }
        assert!(ps.get(w)[[0]].abs() < 1e-2);
    }

    #[test]
    fn weight_decay_shrinks_untouched_parameters() {
        let mut ps: ParamSet<f64> = ParamSet::new();
        let w = ps.add("w", ndarray::arr1(&[2.0]).into_dyn());
        let grads = Grads::new(&ps); // no gradient accumulated
        let mut opt = AdamW::new(&ps, 0.9, 0.98, 0.1);
        opt.step(&mut ps, &grads, 1.0);
        let got = ps.get(w)[[0]];
        assert!((got - 2.0 * (1.0 - 0.1)).abs() < 1e-12);
    }

    #[test]
    fn moments_track_parameter_shapes() {
        let mut ps: ParamSet<f32> = ParamSet::new();
        let w = ps.add("w", ArrayD::zeros(IxDyn(&[2, 3])));
        let mut grads = Grads::new(&ps);
        grads.accumulate(w, ArrayD::ones(IxDyn(&[2, 3])));
        let mut opt = AdamW::new(&ps, 0.9, 0.98, 0.0);
        opt.step(&mut ps, &grads, 0.01);
        assert_eq!(opt.m[0].as_ref().unwrap().shape(), &[2, 3]);
        assert_eq!(opt.steps_done(), 1);
    }
}
