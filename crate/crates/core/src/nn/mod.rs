//! Minimal neural-network toolkit: a named parameter store, explicit
//! forward/backward layers, an AdamW optimizer, and checkpoint archives.
//!
//! Every layer follows the same contract: `forward` consumes activations and
//! returns the output together with a cache of whatever intermediates the
//! backward pass needs; `backward` consumes that cache and the upstream
//! gradient, accumulates parameter gradients into a [`Grads`] buffer, and
//! returns the gradient with respect to the layer input. Models compose
//! layers by chaining these calls by hand, which keeps the data flow
//! explicit and lets every layer be verified in isolation against a
//! finite-difference oracle (see [`gradcheck`]).
//!
//! All layers are generic over the element type so the same code path runs
//! in `f32` for training and in `f64` when validating gradients.

use std::collections::HashMap;

use ndarray::{ArrayD, ArrayViewD, IxDyn};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

pub mod activation;
pub mod attention;
pub mod checkpoint;
pub mod conv;
pub mod gradcheck;
pub mod linear;
pub mod norm;
pub mod optim;

pub use activation::{gelu, gelu_backward, relu, relu_backward, sigmoid, softmax_rows, softmax_rows_backward};
pub use attention::MultiHeadAttention;
pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC};
pub use conv::Conv2d;
pub use linear::Linear;
pub use norm::{ChannelNorm, LayerNorm};
pub use optim::{lr_at_step, AdamW};

// ============================================================================
// Scalar element type
// ============================================================================

/// Floating-point element type usable by every layer in this module.
///
/// `f32` is the training dtype; `f64` is used by gradient checks where the
/// finite-difference oracle needs headroom below the truncation error.
pub trait Scalar: ndarray::NdFloat + num_traits::FromPrimitive {
    /// Lossy conversion from `f64`, used when materializing constants.
    fn from_f64_lossy(v: f64) -> Self {
        Self::from_f64(v).expect("finite f64 converts to any Scalar")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

// ============================================================================
// Parameter store
// ============================================================================

/// Opaque handle to one tensor inside a [`ParamSet`].
///
/// Handles are only meaningful for the set that issued them; layers hold the
/// ids of their own parameters and resolve them at forward/backward time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Ordered collection of named parameter tensors.
///
/// Registration order is part of the contract: optimizer state, gradient
/// buffers, and checkpoint manifests all address parameters by their
/// position, so rebuilding a model with the same code yields bit-compatible
/// indices.
#[derive(Debug, Clone)]
pub struct ParamSet<T> {
    names: Vec<String>,
    values: Vec<ArrayD<T>>,
    by_name: HashMap<String, usize>,
}

impl<T: Scalar> Default for ParamSet<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    /// Registers a tensor under a unique name and returns its handle.
    ///
    /// # Panics
    /// Panics if the name is already taken; parameter names are authored by
    /// model constructors, so a collision is a programming error.
    pub fn add(&mut self, name: impl Into<String>, value: ArrayD<T>) -> ParamId {
        let name = name.into();
        assert!(
            !self.by_name.contains_key(&name),
            "duplicate parameter name {name:?}"
        );
        let id = ParamId(self.values.len());
        self.by_name.insert(name.clone(), id.0);
        self.names.push(name);
        self.values.push(value);
        id
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Total number of scalar entries across all tensors.
    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    pub fn get(&self, id: ParamId) -> &ArrayD<T> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut ArrayD<T> {
        &mut self.values[id.0]
    }

    /// View of a parameter known to be a matrix.
    pub fn get2(&self, id: ParamId) -> ndarray::ArrayView2<'_, T> {
        self.values[id.0]
            .view()
            .into_dimensionality()
            .expect("parameter is 2-dimensional")
    }

    /// View of a parameter known to be a vector.
    pub fn get1(&self, id: ParamId) -> ndarray::ArrayView1<'_, T> {
        self.values[id.0]
            .view()
            .into_dimensionality()
            .expect("parameter is 1-dimensional")
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    /// All handles in registration order.
    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ArrayD<T>)> {
        self.names
            .iter()
            .map(String::as_str)
            .zip(self.values.iter())
    }

    /// Copies every tensor into a new store with a different element type.
    ///
    /// Used to mirror an `f32` model into `f64` for gradient checking.
    pub fn cast<U: Scalar>(&self) -> ParamSet<U> {
        let mut out = ParamSet::new();
        for (name, value) in self.iter() {
            out.add(name, value.mapv(|x| U::from_f64_lossy(x.to_f64().unwrap())));
        }
        out
    }
}

// ============================================================================
// Gradient buffer
// ============================================================================

/// Per-parameter gradient accumulator aligned with a [`ParamSet`].
///
/// Slots start empty and are created on first accumulation, so a backward
/// pass over a sub-network touches only the parameters it owns.
#[derive(Debug, Clone)]
pub struct Grads<T> {
    slots: Vec<Option<ArrayD<T>>>,
}

impl<T: Scalar> Grads<T> {
    pub fn new(params: &ParamSet<T>) -> Self {
        Self {
            slots: vec![None; params.len()],
        }
    }

    /// Adds `grad` into the slot for `id`, creating it if absent.
    ///
    /// # Panics
    /// Panics if the shape disagrees with an existing accumulation.
    pub fn accumulate(&mut self, id: ParamId, grad: ArrayD<T>) {
        match &mut self.slots[id.0] {
            Some(existing) => {
                assert_eq!(
                    existing.shape(),
                    grad.shape(),
                    "gradient shape mismatch for parameter {}",
                    id.0
                );
                *existing += &grad;
            }
            slot @ None => *slot = Some(grad),
        }
    }

    pub fn get(&self, id: ParamId) -> Option<ArrayViewD<'_, T>> {
        self.slots[id.0].as_ref().map(|g| g.view())
    }

    /// Sums another gradient buffer into this one (same parameter set).
    pub fn merge(&mut self, other: Grads<T>) {
        assert_eq!(self.slots.len(), other.slots.len());
        for (i, slot) in other.slots.into_iter().enumerate() {
            if let Some(grad) = slot {
                self.accumulate(ParamId(i), grad);
            }
        }
    }

    /// Multiplies every accumulated gradient by `factor` (e.g. 1/batch).
    pub fn scale(&mut self, factor: T) {
        for slot in self.slots.iter_mut().flatten() {
            slot.mapv_inplace(|g| g * factor);
        }
    }

    /// Global L2 norm over all accumulated gradients.
    pub fn l2_norm(&self) -> f64 {
        let mut total = 0.0;
        for slot in self.slots.iter().flatten() {
            for &g in slot.iter() {
                let g = g.to_f64().unwrap();
                total += g * g;
            }
        }
        total.sqrt()
    }

    /// Rescales gradients so the global L2 norm does not exceed `max_norm`.
    pub fn clip_l2_norm(&mut self, max_norm: f64) {
        let norm = self.l2_norm();
        if norm > max_norm && norm > 0.0 {
            self.scale(T::from_f64_lossy(max_norm / norm));
        }
    }
}

// ============================================================================
// Initialization helpers
// ============================================================================

/// Tensor with entries drawn i.i.d. from `N(0, std^2)`.
pub fn normal_init<T: Scalar, R: Rng>(rng: &mut R, shape: &[usize], std: f64) -> ArrayD<T> {
    let dist = Normal::new(0.0, std).expect("std must be finite and non-negative");
    ArrayD::from_shape_simple_fn(IxDyn(shape), || T::from_f64_lossy(dist.sample(rng)))
}

/// Glorot-style initialization for a `[fan_in, fan_out]` weight matrix.
pub fn glorot_init<T: Scalar, R: Rng>(rng: &mut R, fan_in: usize, fan_out: usize) -> ArrayD<T> {
    let std = (2.0 / (fan_in + fan_out) as f64).sqrt();
    normal_init(rng, &[fan_in, fan_out], std)
}

/// Rejects non-finite values anywhere in a tensor.
pub fn ensure_finite<T: Scalar>(label: &str, value: &ArrayD<T>) -> Result<()> {
    if value.iter().any(|v| !v.to_f64().unwrap().is_finite()) {
        return Err(Error::Numerical(format!("non-finite values in {label}")));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::util::rng_from_seed;
    use ndarray::arr2;

    #[test]
    fn param_set_registers_and_resolves_by_name() {
        let mut ps: ParamSet<f64> = ParamSet::new();
        let a = ps.add("layer.w", ArrayD::zeros(IxDyn(&[2, 3])));
        let b = ps.add("layer.b", ArrayD::zeros(IxDyn(&[3])));
        assert_eq!(ps.len(), 2);
        assert_eq!(ps.num_scalars(), 9);
        assert_eq!(ps.name(a), "layer.w");
        assert_eq!(ps.id_of("layer.b"), Some(b));
        assert_eq!(ps.id_of("missing"), None);
    }

    #[test]
    #[should_panic(expected = "duplicate parameter name")]
    fn param_set_rejects_duplicate_names() {
        let mut ps: ParamSet<f32> = ParamSet::new();
        ps.add("w", ArrayD::zeros(IxDyn(&[1])));
        ps.add("w", ArrayD::zeros(IxDyn(&[1])));
    }

    #[test]
    fn grads_accumulate_and_merge() {
        let mut ps: ParamSet<f64> = ParamSet::new();
        let w = ps.add("w", ArrayD::zeros(IxDyn(&[2, 2])));
        let mut g1 = Grads::new(&ps);
        g1.accumulate(w, arr2(&[[1.0, 2.0], [3.0, 4.0]]).into_dyn());
        g1.accumulate(w, arr2(&[[1.0, 1.0], [1.0, 1.0]]).into_dyn());
        let mut g2 = Grads::new(&ps);
        g2.accumulate(w, arr2(&[[0.5, 0.5], [0.5, 0.5]]).into_dyn());
        g1.merge(g2);
        let got = g1.get(w).unwrap();
        assert_eq!(got, arr2(&[[2.5, 3.5], [4.5, 5.5]]).into_dyn().view());
    }

    #[test]
    fn grads_scale_and_clip() {
        let mut ps: ParamSet<f64> = ParamSet::new();
        let w = ps.add("w", ArrayD::zeros(IxDyn(&[2])));
        let mut g = Grads::new(&ps);
        g.accumulate(w, ndarray::arr1(&[3.0, 4.0]).into_dyn());
        assert!((g.l2_norm() - 5.0).abs() < 1e-12);
        g.clip_l2_norm(1.0);
        assert!((g.l2_norm() - 1.0).abs() < 1e-12);
        g.scale(2.0);
        assert!((g.l2_norm() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn cast_round_trip_preserves_values_within_f32() {
        let mut rng = rng_from_seed(7);
        let mut ps: ParamSet<f32> = ParamSet::new();
        ps.add("w", normal_init(&mut rng, &[4, 4], 0.1));
        let as_f64 = ps.cast::<f64>();
        let back = as_f64.cast::<f32>();
        for (a, b) in ps.iter().zip(back.iter()) {
            assert_eq!(a.0, b.0);
            assert_eq!(a.1, b.1);
        }
    }

    #[test]
    fn normal_init_is_seed_deterministic() {
        let a: ArrayD<f32> = normal_init(&mut rng_from_seed(3), &[8], 1.0);
        let b: ArrayD<f32> = normal_init(&mut rng_from_seed(3), &[8], 1.0);
        assert_eq!(a, b);
    }

    #[test]
    fn ensure_finite_flags_nan() {
        let ok: ArrayD<f64> = ArrayD::zeros(IxDyn(&[2]));
        assert!(ensure_finite("ok", &ok).is_ok());
        let mut bad = ok.clone();
        bad[[0]] = f64::NAN;
        assert!(ensure_finite("bad", &bad).is_err());
    }
}
