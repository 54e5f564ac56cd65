//! Non-autoregressive transformer over layout token sequences.
//!
//! The decoder fills MASK slots in a `[BOS, (c,x,y,w,h)*, EOS]` sequence in
//! a single bidirectional pass: token embeddings are summed with a triple
//! positional encoding (token index, element index, element count), pushed
//! through pre-norm transformer blocks that self-attend over the sequence
//! and cross-attend over a convolutional encoding of the current wireframe
//! render, and projected to vocabulary logits. Logits outside a position's
//! slot support (categories for category slots, coordinate bins for
//! geometry slots) are forced to −∞ before the softmax, so any decoded
//! sequence is structurally valid by construction.

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layout::{SlotKind, TokenSequence, Vocabulary, SLOTS_PER_ELEMENT};
use crate::nn::attention::AttentionCache;
use crate::nn::norm::LayerNormCache;
use crate::nn::{
    normal_init, Grads, LayerNorm, Linear, MultiHeadAttention, ParamId, ParamSet, Scalar,
};
use crate::render::WireframeImage;
use crate::util::rng_from_seed;

mod image;
pub mod train;

pub use image::ImageEncoder;
pub use train::{
    element_count_histogram, load_decoder, sample_training_masks, save_decoder, train_decoder,
    training_wireframe, DecoderExtras, TrainReport, Trainer,
};

/// Logit assigned to tokens outside a slot's support; exp(−1e30) == 0 in
/// both f32 and f64, so these tokens carry exactly zero probability mass.
const NEG_INF_LOGIT: f64 = -1e30;

/// Hidden width of the position-wise feed-forward block, as a multiple of
/// the model width.
const FFN_MULTIPLIER: usize = 4;

// ============================================================================
// Configuration
// ============================================================================

/// Decoder hyperparameters plus the vocabulary the model is bound to.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub num_layers: usize,
    pub num_heads: usize,
    pub model_dim: usize,
    pub max_elements: usize,
    pub warmup_steps: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    /// Wireframe resolution consumed by the cross-attention image encoder.
    pub image_size: usize,
    pub vocab: Vocabulary,
}

impl DecoderConfig {
    /// Full-scale profile: 4 layers, width 512, 8 heads, 224px wireframes.
    pub fn new(vocab: Vocabulary) -> Self {
        Self {
            num_layers: 4,
            num_heads: 8,
            model_dim: 512,
            max_elements: crate::layout::DEFAULT_MAX_ELEMENTS,
            warmup_steps: 4000,
            learning_rate: 5e-5,
            batch_size: 128,
            beta1: 0.9,
            beta2: 0.98,
            image_size: 224,
            vocab,
        }
    }

    /// Single-CPU profile: 2 layers, width 128, 4 heads, and a smaller
    /// batch/wireframe/warmup budget so training runs in minutes.
    pub fn desk_scale(vocab: Vocabulary) -> Self {
        Self {
            num_layers: 2,
            num_heads: 4,
            model_dim: 128,
            batch_size: 16,
            image_size: 64,
            warmup_steps: 200,
            learning_rate: 3e-4,
            ..Self::new(vocab)
        }
    }

    /// Per-head key width used by the attention scaling factor.
    pub fn key_dim(&self) -> usize {
        self.model_dim / self.num_heads
    }

    /// Longest supported sequence: `5 * max_elements + 2`.
    pub fn max_seq_len(&self) -> usize {
        SLOTS_PER_ELEMENT * self.max_elements + 2
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_heads == 0 || self.model_dim % self.num_heads != 0 {
            return Err(Error::config(format!(
                "model dim {} is not divisible by {} heads",
                self.model_dim, self.num_heads
            )));
        }
        if self.image_size % image::DOWNSCALE != 0 {
            return Err(Error::config(format!(
                "image size {} is not a multiple of {}",
                self.image_size,
                image::DOWNSCALE
            )));
        }
        if self.num_layers == 0 || self.max_elements == 0 || self.batch_size == 0 {
            return Err(Error::config("layers, max elements, and batch size must be positive"));
        }
        if self.learning_rate <= 0.0 || self.warmup_steps == 0 {
            return Err(Error::config("learning rate and warmup must be positive"));
        }
        Ok(())
    }
}

// ============================================================================
// Prediction output
// ============================================================================

/// Distribution produced for one masked position.
#[derive(Debug, Clone)]
pub struct PositionPrediction {
    pub position: usize,
    /// Probabilities over the full vocabulary; exactly zero outside the
    /// slot support.
    pub probs: Vec<f64>,
    /// Token id with the highest probability.
    pub argmax_id: usize,
    /// Probability of the argmax token.
    pub confidence: f64,
}

/// Per-masked-position distributions from one forward pass.
#[derive(Debug, Clone)]
pub struct PredictionOutput {
    pub predictions: Vec<PositionPrediction>,
}

impl PredictionOutput {
    /// Probability the model assigns to a given token at a given masked
    /// position, if that position was predicted.
    pub fn prob_of(&self, position: usize, token: usize) -> Option<f64> {
        self.predictions
            .iter()
            .find(|p| p.position == position)
            .map(|p| p.probs[token])
    }
}

/// Vocabulary id range `(base, count)` a slot may legally emit.
pub fn slot_support(vocab: &Vocabulary, kind: SlotKind) -> Result<(usize, usize)> {
    match kind {
        SlotKind::Category => Ok((vocab.category_base(), vocab.num_categories())),
        SlotKind::CoordX | SlotKind::CoordY | SlotKind::CoordW | SlotKind::CoordH => {
            Ok((vocab.bin_base(), vocab.num_bins()))
        }
        SlotKind::Special => Err(Error::Precondition(
            "special positions are never predicted".to_string(),
        )),
    }
}

// ============================================================================
// Model
// ============================================================================

struct DecoderLayer {
    norm_self: LayerNorm,
    self_attn: MultiHeadAttention,
    norm_cross: LayerNorm,
    cross_attn: MultiHeadAttention,
    norm_ffn: LayerNorm,
    ffn_in: Linear,
    ffn_out: Linear,
}

/// The trained model: parameter store plus the layer structure addressing
/// it. Generic over the scalar type so gradient checks can run the exact
/// same network in `f64`.
pub struct Decoder<T: Scalar> {
    cfg: DecoderConfig,
    params: ParamSet<T>,
    token_emb: ParamId,
    gamma1: ParamId,
    gamma2: ParamId,
    gamma3: ParamId,
    image_encoder: ImageEncoder,
    layers: Vec<DecoderLayer>,
    final_norm: LayerNorm,
    head: Linear,
}

/// Per-layer forward intermediates.
struct LayerCache<T> {
    ns_out: Array2<T>,
    ns_cache: LayerNormCache<T>,
    sa_cache: AttentionCache<T>,
    nc_out: Array2<T>,
    nc_cache: LayerNormCache<T>,
    ca_cache: AttentionCache<T>,
    nf_out: Array2<T>,
    nf_cache: LayerNormCache<T>,
    ffn_pre: Array2<T>,
    ffn_mid: Array2<T>,
}

/// Everything the backward pass needs from one forward invocation.
pub struct ForwardCache<T> {
    tokens: Vec<usize>,
    n: usize,
    img_tokens: Array2<T>,
    img_cache: image::ImageEncoderCache<T>,
    layers: Vec<LayerCache<T>>,
    final_cache: LayerNormCache<T>,
    final_out: Array2<T>,
}

impl<T: Scalar> Decoder<T> {
    /// Builds a freshly initialized decoder. The same `(config, seed)` pair
    /// always produces the same parameter names, shapes, and values.
    pub fn new(cfg: DecoderConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = rng_from_seed(seed);
        let mut params = ParamSet::new();
        let dim = cfg.model_dim;
        let vocab_len = cfg.vocab.len();
        let token_emb = params.add("token_emb", normal_init(&mut rng, &[vocab_len, dim], 0.02));
        let gamma1 = params.add(
            "pos_token",
            normal_init(&mut rng, &[cfg.max_seq_len(), dim], 0.02),
        );
        let gamma2 = params.add(
            "pos_element",
            normal_init(&mut rng, &[cfg.max_elements + 1, dim], 0.02),
        );
        let gamma3 = params.add(
            "pos_count",
            normal_init(&mut rng, &[cfg.max_elements + 1, dim], 0.02),
        );
        let image_encoder = ImageEncoder::init(&mut params, &mut rng, "img", cfg.image_size, dim);
        let mut layers = Vec::with_capacity(cfg.num_layers);
        for l in 0..cfg.num_layers {
            let p = format!("layer{l}");
            layers.push(DecoderLayer {
                norm_self: LayerNorm::init(&mut params, &format!("{p}.norm_self"), dim),
                self_attn: MultiHeadAttention::init(
                    &mut params,
                    &mut rng,
                    &format!("{p}.self_attn"),
                    dim,
                    cfg.num_heads,
                ),
                norm_cross: LayerNorm::init(&mut params, &format!("{p}.norm_cross"), dim),
                cross_attn: MultiHeadAttention::init(
                    &mut params,
                    &mut rng,
                    &format!("{p}.cross_attn"),
                    dim,
                    cfg.num_heads,
                ),
                norm_ffn: LayerNorm::init(&mut params, &format!("{p}.norm_ffn"), dim),
                ffn_in: Linear::init(
                    &mut params,
                    &mut rng,
                    &format!("{p}.ffn_in"),
                    dim,
                    FFN_MULTIPLIER * dim,
                    true,
                ),
                ffn_out: Linear::init(
                    &mut params,
                    &mut rng,
                    &format!("{p}.ffn_out"),
                    FFN_MULTIPLIER * dim,
                    dim,
                    true,
                ),
            });
        }
        let final_norm = LayerNorm::init(&mut params, "final_norm", dim);
        // Zero-initialized head: before any training step the restricted
        // softmax is exactly uniform over each slot's support.
        let head = Linear::init_zero(&mut params, "head", dim, vocab_len, true);
        Ok(Self {
            cfg,
            params,
            token_emb,
            gamma1,
            gamma2,
            gamma3,
            image_encoder,
            layers,
            final_norm,
            head,
        })
    }

    pub fn config(&self) -> &DecoderConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    /// Mirrors this model into another scalar type, copying all weights.
    pub fn cast<U: Scalar>(&self) -> Decoder<U> {
        let mut out = Decoder::<U>::new(self.cfg.clone(), 0).expect("config already validated");
        out.params
            .load_values_from(&self.params.cast::<U>())
            .expect("identical structure");
        out
    }

    /// Row of the element-index table for position `i` in a sequence of
    /// `len` tokens: `⌊(i−1)/5⌋` for attribute positions, a dedicated
    /// sentinel row for BOS/EOS.
    fn element_row(&self, i: usize, len: usize) -> usize {
        if i == 0 || i + 1 == len {
            self.cfg.max_elements
        } else {
            (i - 1) / SLOTS_PER_ELEMENT
        }
    }

    /// Triple positional encoding for position `i` of an `n`-element
    /// sequence: `PE(i) = γ1(i) + γ2(element(i)) + γ3(n)`.
    pub fn positional_encode(&self, i: usize, n: usize) -> Result<Array1<T>> {
        let len = SLOTS_PER_ELEMENT * n + 2;
        if n > self.cfg.max_elements || i >= len {
            return Err(Error::domain(format!(
                "position {i} out of range for an {n}-element sequence"
            )));
        }
        let g1 = self.params.get2(self.gamma1);
        let g2 = self.params.get2(self.gamma2);
        let g3 = self.params.get2(self.gamma3);
        let mut out = g1.row(i).to_owned();
        out += &g2.row(self.element_row(i, len));
        out += &g3.row(n);
        Ok(out)
    }

    /// Full forward pass to vocabulary logits (no slot restriction yet).
    pub fn forward(
        &self,
        seq: &TokenSequence,
        image: &WireframeImage,
    ) -> Result<(Array2<T>, ForwardCache<T>)> {
        if seq.len() > self.cfg.max_seq_len() {
            return Err(Error::config(format!(
                "sequence length {} exceeds the configured maximum {}",
                seq.len(),
                self.cfg.max_seq_len()
            )));
        }
        if image.height() != self.cfg.image_size || image.width() != self.cfg.image_size {
            return Err(Error::config(format!(
                "wireframe is {}x{} but the decoder expects {}x{}",
                image.height(),
                image.width(),
                self.cfg.image_size,
                self.cfg.image_size
            )));
        }
        let len = seq.len();
        let n = seq.num_elements();
        let dim = self.cfg.model_dim;

        let emb_table = self.params.get2(self.token_emb);
        let g1 = self.params.get2(self.gamma1);
        let g2 = self.params.get2(self.gamma2);
        let g3 = self.params.get2(self.gamma3);
        let mut x = Array2::<T>::zeros((len, dim));
        for (i, mut row) in x.outer_iter_mut().enumerate() {
            let id = seq.id(i);
            row.assign(&emb_table.row(id));
            row += &g1.row(i);
            row += &g2.row(self.element_row(i, len));
            row += &g3.row(n);
        }

        let (img_tokens, img_cache) = self.image_encoder.forward(&self.params, image);

        let mut layer_caches = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let x_in = x;
            let (ns_out, ns_cache) = layer.norm_self.forward(&self.params, &x_in);
            let (sa, sa_cache) = layer.self_attn.forward(&self.params, &ns_out, &ns_out);
            let x1 = &x_in + &sa;
            let (nc_out, nc_cache) = layer.norm_cross.forward(&self.params, &x1);
            let (ca, ca_cache) = layer.cross_attn.forward(&self.params, &nc_out, &img_tokens);
            let x2 = &x1 + &ca;
            let (nf_out, nf_cache) = layer.norm_ffn.forward(&self.params, &x2);
            let ffn_pre = layer.ffn_in.forward(&self.params, &nf_out);
            let ffn_mid = crate::nn::gelu(&ffn_pre);
            let ffn_out = layer.ffn_out.forward(&self.params, &ffn_mid);
            x = &x2 + &ffn_out;
            layer_caches.push(LayerCache {
                ns_out,
                ns_cache,
                sa_cache,
                nc_out,
                nc_cache,
                ca_cache,
                nf_out,
                nf_cache,
                ffn_pre,
                ffn_mid,
            });
        }

        let (final_out, final_cache) = self.final_norm.forward(&self.params, &x);
        let logits = self.head.forward(&self.params, &final_out);
        Ok((
            logits,
            ForwardCache {
                tokens: seq.ids().to_vec(),
                n,
                img_tokens,
                img_cache,
                layers: layer_caches,
                final_cache,
                final_out,
            },
        ))
    }

    /// Backpropagates a logit gradient through the whole network,
    /// accumulating into `grads`.
    pub fn backward(&self, cache: &ForwardCache<T>, d_logits: &Array2<T>, grads: &mut Grads<T>) {
        let d_final_out = self
            .head
            .backward(&self.params, &cache.final_out, d_logits, grads);
        let mut dx = self
            .final_norm
            .backward(&self.params, &cache.final_cache, &d_final_out, grads);
        let mut d_img = Array2::<T>::zeros(cache.img_tokens.raw_dim());

        for (layer, lc) in self.layers.iter().zip(cache.layers.iter()).rev() {
            // x3 = x2 + ffn_out(gelu(ffn_in(norm_ffn(x2))))
            let d_ffn_mid = layer.ffn_out.backward(&self.params, &lc.ffn_mid, &dx, grads);
            let d_ffn_pre = crate::nn::gelu_backward(&lc.ffn_pre, &d_ffn_mid);
            let d_nf_out = layer.ffn_in.backward(&self.params, &lc.nf_out, &d_ffn_pre, grads);
            let mut dx2 = layer
                .norm_ffn
                .backward(&self.params, &lc.nf_cache, &d_nf_out, grads);
            dx2 += &dx;

            // x2 = x1 + cross_attn(norm_cross(x1), img)
            let (d_nc_out, d_img_l) = layer.cross_attn.backward(
                &self.params,
                &lc.nc_out,
                &cache.img_tokens,
                &lc.ca_cache,
                &dx2,
                grads,
            );
            d_img += &d_img_l;
            let mut dx1 = layer
                .norm_cross
                .backward(&self.params, &lc.nc_cache, &d_nc_out, grads);
            dx1 += &dx2;

            // x1 = x_in + self_attn(norm_self(x_in))
            let (dq, dkv) = layer.self_attn.backward(
                &self.params,
                &lc.ns_out,
                &lc.ns_out,
                &lc.sa_cache,
                &dx1,
                grads,
            );
            let d_ns = dq + &dkv;
            let mut dx0 = layer
                .norm_self
                .backward(&self.params, &lc.ns_cache, &d_ns, grads);
            dx0 += &dx1;
            dx = dx0;
        }

        self.image_encoder
            .backward(&self.params, &cache.img_cache, &d_img, grads);

        // Embedding and positional-table gradients (scatter-add by row).
        let dim = self.cfg.model_dim;
        let len = cache.tokens.len();
        let mut d_emb = Array2::<T>::zeros((self.cfg.vocab.len(), dim));
        let mut d_g1 = Array2::<T>::zeros((self.cfg.max_seq_len(), dim));
        let mut d_g2 = Array2::<T>::zeros((self.cfg.max_elements + 1, dim));
        let mut d_g3 = Array2::<T>::zeros((self.cfg.max_elements + 1, dim));
        for (i, d_row) in dx.outer_iter().enumerate() {
            let mut emb_row = d_emb.row_mut(cache.tokens[i]);
            emb_row += &d_row;
            let mut g1_row = d_g1.row_mut(i);
            g1_row += &d_row;
            let mut g2_row = d_g2.row_mut(self.element_row(i, len));
            g2_row += &d_row;
            let mut g3_row = d_g3.row_mut(cache.n);
            g3_row += &d_row;
        }
        grads.accumulate(self.token_emb, d_emb.into_dyn());
        grads.accumulate(self.gamma1, d_g1.into_dyn());
        grads.accumulate(self.gamma2, d_g2.into_dyn());
        grads.accumulate(self.gamma3, d_g3.into_dyn());
    }

    /// Slot-restricted distributions for every masked position.
    pub fn predictions(
        &self,
        seq: &TokenSequence,
        image: &WireframeImage,
    ) -> Result<PredictionOutput> {
        let masked = seq.masked_positions();
        let (logits, _) = self.forward(seq, image)?;
        let vocab_len = self.cfg.vocab.len();
        let mut predictions = Vec::with_capacity(masked.len());
        for pos in masked {
            let kind = seq.kind(pos);
            let (base, count) = slot_support(&self.cfg.vocab, kind)?;
            let row = logits.row(pos);
            let mut support: Vec<f64> = (0..count)
                .map(|j| row[base + j].to_f64().unwrap())
                .collect();
            let max = support.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in support.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            let mut probs = vec![0.0; vocab_len];
            let mut best = (0usize, f64::NEG_INFINITY);
            for (j, v) in support.iter().enumerate() {
                let p = v / sum;
                probs[base + j] = p;
                if p > best.1 {
                    best = (base + j, p);
                }
            }
            predictions.push(PositionPrediction {
                position: pos,
                probs,
                argmax_id: best.0,
                confidence: best.1,
            });
        }
        Ok(PredictionOutput { predictions })
    }

    /// Replaces every masked token with its argmax prediction.
    ///
    /// Unmasked positions are returned byte-identical; the confidence list
    /// covers exactly the replaced positions, in ascending position order.
    /// A sequence with no masks is a documented no-op with an empty list.
    pub fn predict_masked(
        &self,
        seq: &TokenSequence,
        image: &WireframeImage,
    ) -> Result<(TokenSequence, Vec<(usize, f64)>)> {
        if seq.masked_positions().is_empty() {
            return Ok((seq.clone(), Vec::new()));
        }
        let output = self.predictions(seq, image)?;
        let mut filled = seq.clone();
        let mut confidences = Vec::with_capacity(output.predictions.len());
        for p in &output.predictions {
            filled.set_id(p.position, p.argmax_id);
            confidences.push((p.position, p.confidence));
        }
        confidences.sort_by_key(|&(pos, _)| pos);
        Ok((filled, confidences))
    }

    /// Cross-attention row sums of the last forward pass, for invariant
    /// tests: every query's weights over image tokens must sum to 1.
    pub fn cross_attention_row_sums(&self, cache: &ForwardCache<T>) -> Vec<f64> {
        let mut sums = Vec::new();
        for lc in &cache.layers {
            for head in MultiHeadAttention::attention_rows(&lc.ca_cache) {
                for row in head.outer_iter() {
                    sums.push(row.iter().fold(0.0, |acc, &v| acc + v.to_f64().unwrap()));
                }
            }
        }
        sums
    }
}

// ============================================================================
// Masked negative log-likelihood
// ============================================================================

/// Sum of slot-restricted NLL over `targets = [(position, true id)]`, plus
/// the logit gradient of that sum. Gradient rows are zero everywhere except
/// the masked positions — tokens that stayed visible contribute nothing.
pub fn masked_nll_grad<T: Scalar>(
    logits: &Array2<T>,
    seq_len: usize,
    vocab: &Vocabulary,
    targets: &[(usize, usize)],
) -> Result<(f64, Array2<T>)> {
    let mut d_logits = Array2::<T>::zeros(logits.raw_dim());
    let mut total = 0.0;
    for &(pos, target) in targets {
        let kind = crate::layout::slot_kind(pos, seq_len)?;
        let (base, count) = slot_support(vocab, kind)?;
        if target < base || target >= base + count {
            return Err(Error::Precondition(format!(
                "target id {target} lies outside the slot support at position {pos}"
            )));
        }
        let row = logits.row(pos);
        let mut support: Vec<f64> = (0..count)
            .map(|j| row[base + j].to_f64().unwrap())
            .collect();
        let max = support.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in support.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        let p_target = support[target - base] / sum;
        total += -(p_target.max(f64::MIN_POSITIVE)).ln();
        let mut d_row = d_logits.row_mut(pos);
        for (j, v) in support.iter().enumerate() {
            let p = v / sum;
            let grad = if base + j == target { p - 1.0 } else { p };
            d_row[base + j] = T::from_f64_lossy(grad);
        }
    }
    Ok((total, d_logits))
}

/// Exposes the −∞ masking rule for tests: a full-vocabulary logit row with
/// out-of-support entries forced down.
pub fn restrict_logits_row<T: Scalar>(
    row: &mut ndarray::ArrayViewMut1<'_, T>,
    vocab: &Vocabulary,
    kind: SlotKind,
) -> Result<()> {
    let (base, count) = slot_support(vocab, kind)?;
    for (id, v) in row.iter_mut().enumerate() {
        if id < base || id >= base + count {
            *v = T::from_f64_lossy(NEG_INF_LOGIT);
        }
    }
    Ok(())
}
