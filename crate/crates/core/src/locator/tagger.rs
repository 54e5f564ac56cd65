//! Object-space re-masking ablation: a small self-attention tagger that
//! reads token sequences directly and flags geometry tokens for
//! re-prediction, without ever rendering pixels.
//!
//! It shares the annotation contract (and the training-record format) with
//! the pixel locator, so the two sources of masking decisions can be
//! trained on the same data and scored by the same evaluation.

use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::{map_items, Parallelism};
use crate::layout::{Layout, SequenceCodec, TokenSequence, Vocabulary, SLOTS_PER_ELEMENT};
use crate::matching::MaskAnnotation;
use crate::nn::attention::AttentionCache;
use crate::nn::norm::LayerNormCache;
use crate::nn::{
    gelu, gelu_backward, normal_init, sigmoid, AdamW, Checkpoint, Grads, LayerNorm, Linear,
    MultiHeadAttention, ParamId, ParamSet, Scalar,
};
use crate::util::{derive_seed, rng_from_seed};

use super::loss::bce_with_logits;
use super::{
    evaluate_annotations, f64_of, record_usable, LocatorEval, LocatorExtras, LocatorRecord,
    LocatorTrainReport,
};

/// Checkpoint kind tag for serialized taggers.
const TAGGER_KIND: &str = "tagger";

/// Hidden width of the position-wise feed-forward block, as a multiple of
/// the model dimension.
const FFN_MULTIPLIER: usize = 4;

// ============================================================================
// Configuration
// ============================================================================

/// Hyperparameters for the sequence tagger.
///
/// The vocabulary travels inside the config so a checkpoint is
/// self-describing: loading one rebuilds the exact token space it was
/// trained on.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TaggerConfig {
    pub vocab: Vocabulary,
    pub max_elements: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub model_dim: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
}

impl TaggerConfig {
    pub fn new(vocab: Vocabulary, max_elements: usize) -> Self {
        Self {
            vocab,
            max_elements,
            num_layers: 2,
            num_heads: 2,
            model_dim: 64,
            learning_rate: 1e-3,
            batch_size: 32,
            beta1: 0.9,
            beta2: 0.98,
        }
    }

    /// Longest token sequence the tagger accepts: `5 * max_elements + 2`.
    pub fn max_seq_len(&self) -> usize {
        SLOTS_PER_ELEMENT * self.max_elements + 2
    }

    /// Codec for the tagger's own token space.
    pub fn codec(&self) -> SequenceCodec {
        SequenceCodec::new(self.vocab.clone(), self.max_elements)
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_elements == 0 {
            return Err(Error::config("max_elements must be positive"));
        }
        if self.num_layers == 0 {
            return Err(Error::config("the tagger needs at least one layer"));
        }
        if self.num_heads == 0 || self.model_dim % self.num_heads != 0 {
            return Err(Error::config(format!(
                "model dim {} must divide evenly into {} heads",
                self.model_dim, self.num_heads
            )));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::config("learning rate must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch size must be positive"));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::config(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        Ok(())
    }
}

// ============================================================================
// Model
// ============================================================================

struct TaggerLayer {
    norm_attn: LayerNorm,
    attn: MultiHeadAttention,
    norm_ffn: LayerNorm,
    ffn_in: Linear,
    ffn_out: Linear,
}

struct TagLayerCache<T: Scalar> {
    na_out: Array2<T>,
    na_cache: LayerNormCache<T>,
    attn_cache: AttentionCache<T>,
    nf_out: Array2<T>,
    nf_cache: LayerNormCache<T>,
    ffn_pre: Array2<T>,
    ffn_mid: Array2<T>,
}

struct TaggerCache<T: Scalar> {
    tokens: Vec<usize>,
    layers: Vec<TagLayerCache<T>>,
    final_cache: LayerNormCache<T>,
    final_out: Array2<T>,
}

/// Pre-norm self-attention stack over token embeddings with a per-position
/// scalar head: the logit that this token should be re-predicted.
pub struct ObjectTagger<T: Scalar> {
    cfg: TaggerConfig,
    pub(crate) params: ParamSet<T>,
    codec: SequenceCodec,
    token_emb: ParamId,
    pos_emb: ParamId,
    layers: Vec<TaggerLayer>,
    final_norm: LayerNorm,
    head: Linear,
}

impl<T: Scalar> ObjectTagger<T> {
    pub fn new(cfg: TaggerConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = rng_from_seed(seed);
        let mut params = ParamSet::new();
        let dim = cfg.model_dim;
        let token_emb =
            params.add("token_emb", normal_init(&mut rng, &[cfg.vocab.len(), dim], 0.02));
        let pos_emb =
            params.add("pos_token", normal_init(&mut rng, &[cfg.max_seq_len(), dim], 0.02));
        let mut layers = Vec::with_capacity(cfg.num_layers);
        for l in 0..cfg.num_layers {
            let p = format!("layer{l}");
            layers.push(TaggerLayer {
                norm_attn: LayerNorm::init(&mut params, &format!("{p}.norm_attn"), dim),
                attn: MultiHeadAttention::init(
                    &mut params,
                    &mut rng,
                    &format!("{p}.attn"),
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
        // Zero-initialized head: an untrained tagger sits at probability
        // one half everywhere and therefore flags nothing.
        let head = Linear::init_zero(&mut params, "head", dim, 1, true);
        let codec = cfg.codec();
        Ok(Self { cfg, params, codec, token_emb, pos_emb, layers, final_norm, head })
    }

    pub fn config(&self) -> &TaggerConfig {
        &self.cfg
    }

    /// Per-position re-prediction logits for a token sequence.
    fn forward(&self, seq: &TokenSequence) -> Result<(Array1<T>, TaggerCache<T>)> {
        let len = seq.len();
        if len > self.cfg.max_seq_len() {
            return Err(Error::Capacity { got: seq.num_elements(), max: self.cfg.max_elements });
        }
        let vocab_len = self.cfg.vocab.len();
        let dim = self.cfg.model_dim;
        let emb_table = self.params.get2(self.token_emb);
        let pos_table = self.params.get2(self.pos_emb);
        let mut x = Array2::<T>::zeros((len, dim));
        for (i, (&id, mut row)) in seq.ids().iter().zip(x.outer_iter_mut()).enumerate() {
            if id >= vocab_len {
                return Err(Error::domain(format!(
                    "token id {id} outside vocabulary of length {vocab_len}"
                )));
            }
            row.assign(&emb_table.row(id));
            row += &pos_table.row(i);
        }

        let mut layer_caches = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let x_in = x;
            let (na_out, na_cache) = layer.norm_attn.forward(&self.params, &x_in);
            let (sa, attn_cache) = layer.attn.forward(&self.params, &na_out, &na_out);
            let x1 = &x_in + &sa;
            let (nf_out, nf_cache) = layer.norm_ffn.forward(&self.params, &x1);
            let ffn_pre = layer.ffn_in.forward(&self.params, &nf_out);
            let ffn_mid = gelu(&ffn_pre);
            let ffn_out = layer.ffn_out.forward(&self.params, &ffn_mid);
            x = &x1 + &ffn_out;
            layer_caches.push(TagLayerCache {
                na_out,
                na_cache,
                attn_cache,
                nf_out,
                nf_cache,
                ffn_pre,
                ffn_mid,
            });
        }

        let (final_out, final_cache) = self.final_norm.forward(&self.params, &x);
        let logits = self.head.forward(&self.params, &final_out);
        Ok((
            logits.column(0).to_owned(),
            TaggerCache {
                tokens: seq.ids().to_vec(),
                layers: layer_caches,
                final_cache,
                final_out,
            },
        ))
    }

    /// Backpropagates per-position logit gradients, accumulating into
    /// `grads`.
    fn backward(&self, cache: &TaggerCache<T>, d_logits: &Array1<T>, grads: &mut Grads<T>) {
        let d_head_out = d_logits.clone().insert_axis(Axis(1));
        let d_final_out = self.head.backward(&self.params, &cache.final_out, &d_head_out, grads);
        let mut dx = self
            .final_norm
            .backward(&self.params, &cache.final_cache, &d_final_out, grads);

        for (layer, lc) in self.layers.iter().zip(cache.layers.iter()).rev() {
            // x2 = x1 + ffn_out(gelu(ffn_in(norm_ffn(x1))))
            let d_ffn_mid = layer.ffn_out.backward(&self.params, &lc.ffn_mid, &dx, grads);
            let d_ffn_pre = gelu_backward(&lc.ffn_pre, &d_ffn_mid);
            let d_nf_out = layer.ffn_in.backward(&self.params, &lc.nf_out, &d_ffn_pre, grads);
            let mut dx1 = layer
                .norm_ffn
                .backward(&self.params, &lc.nf_cache, &d_nf_out, grads);
            dx1 += &dx;

            // x1 = x_in + attn(norm_attn(x_in))
            let (dq, dkv) = layer.attn.backward(
                &self.params,
                &lc.na_out,
                &lc.na_out,
                &lc.attn_cache,
                &dx1,
                grads,
            );
            let d_na = dq + &dkv;
            let mut dx0 = layer
                .norm_attn
                .backward(&self.params, &lc.na_cache, &d_na, grads);
            dx0 += &dx1;
            dx = dx0;
        }

        // Embedding and positional-table gradients (scatter-add by row).
        let dim = self.cfg.model_dim;
        let mut d_emb = Array2::<T>::zeros((self.cfg.vocab.len(), dim));
        let mut d_pos = Array2::<T>::zeros((self.cfg.max_seq_len(), dim));
        for (i, d_row) in dx.outer_iter().enumerate() {
            let mut emb_row = d_emb.row_mut(cache.tokens[i]);
            emb_row += &d_row;
            let mut pos_row = d_pos.row_mut(i);
            pos_row += &d_row;
        }
        grads.accumulate(self.token_emb, d_emb.into_dyn());
        grads.accumulate(self.pos_emb, d_pos.into_dyn());
    }

    /// Mean binary-cross-entropy over the targeted positions, optionally
    /// accumulating parameter gradients.
    fn example_loss(
        &self,
        seq: &TokenSequence,
        targets: &[(usize, f64)],
        grads: Option<&mut Grads<T>>,
    ) -> Result<f64> {
        if targets.is_empty() {
            return Err(Error::Precondition("tagger loss needs at least one target".to_string()));
        }
        let (logits, cache) = self.forward(seq)?;
        let count = T::from_f64_lossy(targets.len() as f64);
        let mut total = 0.0;
        let mut d = Array1::<T>::zeros(logits.len());
        for &(pos, y) in targets {
            let (loss, dz) = bce_with_logits(logits[pos], T::from_f64_lossy(y));
            total += f64_of(loss);
            d[pos] = dz / count;
        }
        if let Some(grads) = grads {
            self.backward(&cache, &d, grads);
        }
        Ok(total / targets.len() as f64)
    }

    /// Flags each geometry attribute whose re-prediction probability
    /// exceeds one half. The layout must fit the tagger's token space.
    pub fn annotate(&self, layout: &Layout) -> Result<MaskAnnotation> {
        let seq = self.codec.encode(layout)?;
        let (logits, _) = self.forward(&seq)?;
        let mut flags = Vec::with_capacity(layout.len());
        for e in 0..layout.len() {
            let mut row = [false; 4];
            for (k, slot) in row.iter_mut().enumerate() {
                let pos = seq.position_of(e, k + 1)?;
                *slot = f64_of(sigmoid(logits[pos])) > 0.5;
            }
            flags.push(row);
        }
        Ok(MaskAnnotation { flags })
    }
}

/// Positions of every geometry token (x, y, w, h per element) paired with
/// its 0/1 training target from the record annotation.
fn geometry_targets(seq: &TokenSequence, annotation: &MaskAnnotation) -> Vec<(usize, f64)> {
    let mut targets = Vec::with_capacity(4 * annotation.flags.len());
    for (e, flags) in annotation.flags.iter().enumerate() {
        for (k, &flag) in flags.iter().enumerate() {
            let pos = seq
                .position_of(e, k + 1)
                .expect("annotation rows correspond to encoded elements");
            targets.push((pos, if flag { 1.0 } else { 0.0 }));
        }
    }
    targets
}

// ============================================================================
// Training and evaluation
// ============================================================================

/// Trains a sequence tagger from scratch on annotated snapshots.
///
/// Batches are drawn uniformly with replacement; the learning rate is
/// constant. The same seed yields the same model under both execution
/// modes.
pub fn train_tagger(
    records: &[LocatorRecord],
    cfg: &TaggerConfig,
    steps: usize,
    seed: u64,
    par: Parallelism,
    mut on_step: impl FnMut(usize, f64),
) -> Result<(ObjectTagger<f32>, LocatorTrainReport)> {
    cfg.validate()?;
    if steps == 0 {
        return Err(Error::Precondition("tagger training needs at least one step".to_string()));
    }
    let codec = cfg.codec();
    let usable: Vec<&LocatorRecord> = records
        .iter()
        .filter(|r| record_usable(r) && r.layout.len() <= cfg.max_elements)
        .collect();
    if usable.is_empty() {
        return Err(Error::data("no usable tagger training records"));
    }
    // Sequences and targets are pure functions of the records, so encode
    // once up front.
    let examples: Vec<(TokenSequence, Vec<(usize, f64)>)> = usable
        .iter()
        .map(|r| {
            let seq = codec.encode(&r.layout)?;
            let targets = geometry_targets(&seq, &r.annotation);
            Ok((seq, targets))
        })
        .collect::<Result<_>>()?;
    let mut tagger = ObjectTagger::<f32>::new(cfg.clone(), derive_seed(seed, "tagger-init"))?;
    let mut opt = AdamW::new(&tagger.params, cfg.beta1, cfg.beta2, 0.0);
    let mut rng = rng_from_seed(derive_seed(seed, "tagger-batches"));
    let mut losses = Vec::with_capacity(steps);
    for step in 0..steps {
        // Indices are drawn sequentially so the result does not depend on
        // the execution mode.
        let items: Vec<usize> = (0..cfg.batch_size)
            .map(|_| {
                use rand::Rng;
                rng.gen_range(0..examples.len())
            })
            .collect();
        let tg = &tagger;
        let results: Vec<Result<(f64, Grads<f32>)>> = map_items(par, &items, |&idx| {
            let (seq, targets) = &examples[idx];
            let mut grads = Grads::new(&tg.params);
            let loss = tg.example_loss(seq, targets, Some(&mut grads))?;
            Ok((loss, grads))
        });
        let mut total = 0.0;
        let mut grads = Grads::new(&tagger.params);
        for result in results {
            let (loss, g) = result?;
            total += loss;
            grads.merge(g);
        }
        grads.scale(1.0 / items.len() as f32);
        opt.step(&mut tagger.params, &grads, cfg.learning_rate);
        let mean = total / items.len() as f64;
        losses.push(mean);
        on_step(step, mean);
    }
    let tail = losses.len().min(20);
    let report = LocatorTrainReport {
        steps,
        initial_loss: losses[0],
        final_loss: losses[losses.len() - tail..].iter().sum::<f64>() / tail as f64,
        losses,
    };
    Ok((tagger, report))
}

/// Compares tagger annotations against record labels, micro-averaged over
/// every element-attribute pair.
pub fn evaluate_tagger(
    tagger: &ObjectTagger<f32>,
    records: &[LocatorRecord],
    par: Parallelism,
) -> Result<LocatorEval> {
    evaluate_annotations(records, par, |record| tagger.annotate(&record.layout))
}

// ============================================================================
// Checkpoints
// ============================================================================

/// Saves the tagger; the vocabulary hash is derived from the embedded
/// vocabulary so loads can verify schema compatibility.
pub fn save_tagger(
    tagger: &ObjectTagger<f32>,
    extras: &LocatorExtras,
    path: impl AsRef<std::path::Path>,
) -> Result<()> {
    let ckpt = Checkpoint::new(
        TAGGER_KIND,
        serde_json::to_value(tagger.config())?,
        &tagger.config().vocab.hash(),
        serde_json::to_value(extras)?,
        tagger.params.clone(),
    );
    ckpt.save(path)
}

/// Loads a tagger checkpoint, optionally insisting on a vocabulary hash.
pub fn load_tagger(
    path: impl AsRef<std::path::Path>,
    expected_vocab_hash: Option<&str>,
) -> Result<(ObjectTagger<f32>, LocatorExtras)> {
    let ckpt = Checkpoint::load(path)?;
    if ckpt.kind != TAGGER_KIND {
        return Err(Error::data(format!(
            "checkpoint kind {:?} where {TAGGER_KIND:?} is required",
            ckpt.kind
        )));
    }
    if let Some(expected) = expected_vocab_hash {
        if ckpt.vocab_hash != expected {
            return Err(Error::Schema(format!(
                "tagger was trained against vocabulary {} but the current vocabulary is {expected}",
                ckpt.vocab_hash
            )));
        }
    }
    let cfg: TaggerConfig = serde_json::from_value(ckpt.config)?;
    if cfg.vocab.hash() != ckpt.vocab_hash {
        return Err(Error::Schema(format!(
            "checkpoint vocabulary hash {} does not match its embedded vocabulary {}",
            ckpt.vocab_hash,
            cfg.vocab.hash()
        )));
    }
    let extras: LocatorExtras = serde_json::from_value(ckpt.extras)?;
    let mut tagger = ObjectTagger::<f32>::new(cfg, 0)?;
    tagger.params.load_values_from(&ckpt.params)?;
    Ok((tagger, extras))
}

// ============================================================================
// Tests
// ============================================================================
