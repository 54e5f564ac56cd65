//! Learned feature extractors for Fréchet-distance evaluation.
//!
//! Two embedding spaces share one training recipe: a small self-attention
//! encoder over token sequences and a small residual convnet over rendered
//! wireframes, each trained to separate real layouts from
//! attribute-perturbed copies. The penultimate (post-projection) layer is
//! the feature embedding; the classifier head is discarded at evaluation
//! time.

use ndarray::{Array1, Array2, Array3, Axis};
use serde::{Deserialize, Serialize};

use crate::corpus::perturb::perturb;
use crate::error::{Error, Result};
use crate::exec::{map_items, Parallelism};
use crate::layout::{Layout, SequenceCodec, Vocabulary, SLOTS_PER_ELEMENT};
use crate::locator::backbone::{Backbone, BackboneCache, BackboneDepth};
use crate::locator::loss::bce_with_logits;
use crate::nn::attention::AttentionCache;
use crate::nn::norm::LayerNormCache;
use crate::nn::{
    gelu, gelu_backward, normal_init, AdamW, Checkpoint, Grads, LayerNorm, Linear,
    MultiHeadAttention, ParamId, ParamSet, Scalar,
};
use crate::render::{render_wireframe, RenderConfig, WireframeImage};
use crate::util::{derive_seed, rng_from_seed, short_hash};

use super::{fit_gaussian, frechet_distance};

/// Checkpoint kind tag for serialized feature extractors.
const FEATURES_KIND: &str = "feature-extractor";

/// Hidden width of the encoder feed-forward block, as a multiple of the
/// model dimension.
const FFN_MULTIPLIER: usize = 4;

/// Noise range used to manufacture the "fake" class during training.
pub const TRAINING_NOISE: f64 = 0.2;

// ============================================================================
// Configuration
// ============================================================================

/// Which representation of a layout the extractor embeds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FeatureSpace {
    /// Token sequences through a self-attention encoder.
    Sequence,
    /// Rendered wireframe images through a residual convnet.
    Pixel,
}

impl std::fmt::Display for FeatureSpace {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            FeatureSpace::Sequence => write!(f, "sequence"),
            FeatureSpace::Pixel => write!(f, "pixel"),
        }
    }
}

/// Hyperparameters for one feature extractor. The vocabulary travels
/// inside the config so checkpoints are self-describing.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FeatureExtractorConfig {
    pub space: FeatureSpace,
    pub vocab: Vocabulary,
    pub max_elements: usize,
    /// Embedding width of the sequence encoder.
    pub model_dim: usize,
    pub num_heads: usize,
    pub num_layers: usize,
    /// Wireframe resolution for the pixel extractor.
    pub image_size: usize,
    pub base_channels: usize,
    /// Width of the penultimate feature layer.
    pub feature_dim: usize,
    /// Perturbation range for the fake class.
    pub noise: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
}

impl FeatureExtractorConfig {
    pub fn new(space: FeatureSpace, vocab: Vocabulary, max_elements: usize) -> Self {
        Self {
            space,
            vocab,
            max_elements,
            model_dim: 64,
            num_heads: 2,
            num_layers: 1,
            image_size: 64,
            base_channels: 8,
            feature_dim: 256,
            noise: TRAINING_NOISE,
            learning_rate: 1e-3,
            batch_size: 16,
            beta1: 0.9,
            beta2: 0.98,
        }
    }

    /// Longest token sequence the extractor accepts: `5 * max_elements + 2`.
    pub fn max_seq_len(&self) -> usize {
        SLOTS_PER_ELEMENT * self.max_elements + 2
    }

    /// Codec for the extractor's own token space.
    pub fn codec(&self) -> SequenceCodec {
        SequenceCodec::new(self.vocab.clone(), self.max_elements)
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_elements == 0 {
            return Err(Error::config("max_elements must be positive"));
        }
        if self.feature_dim == 0 {
            return Err(Error::config("feature dimension must be positive"));
        }
        if !(self.noise.is_finite() && self.noise > 0.0) {
            return Err(Error::config("training noise must be positive"));
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
        match self.space {
            FeatureSpace::Sequence => {
                if self.num_layers == 0 {
                    return Err(Error::config("the sequence encoder needs at least one layer"));
                }
                if self.num_heads == 0 || self.model_dim % self.num_heads != 0 {
                    return Err(Error::config(format!(
                        "model dim {} must divide evenly into {} heads",
                        self.model_dim, self.num_heads
                    )));
                }
            }
            FeatureSpace::Pixel => {
                let stride = BackboneDepth::Depth18.feature_stride();
                if self.image_size == 0 || self.image_size % stride != 0 {
                    return Err(Error::config(format!(
                        "image size {} must be a positive multiple of the feature stride {stride}",
                        self.image_size
                    )));
                }
                if self.base_channels == 0 {
                    return Err(Error::config("base channel count must be positive"));
                }
            }
        }
        Ok(())
    }
}

// ============================================================================
// Model
// ============================================================================

struct EncoderLayer {
    norm_attn: LayerNorm,
    attn: MultiHeadAttention,
    norm_ffn: LayerNorm,
    ffn_in: Linear,
    ffn_out: Linear,
}

struct EncoderLayerCache<T: Scalar> {
    na_out: Array2<T>,
    na_cache: LayerNormCache<T>,
    attn_cache: AttentionCache<T>,
    nf_out: Array2<T>,
    nf_cache: LayerNormCache<T>,
    ffn_pre: Array2<T>,
    ffn_mid: Array2<T>,
}

enum Body {
    Sequence {
        token_emb: ParamId,
        pos_emb: ParamId,
        layers: Vec<EncoderLayer>,
        final_norm: LayerNorm,
    },
    Pixel {
        backbone: Backbone,
    },
}

enum BodyCache<T: Scalar> {
    Sequence {
        tokens: Vec<usize>,
        layers: Vec<EncoderLayerCache<T>>,
        final_cache: LayerNormCache<T>,
    },
    Pixel {
        backbone: BackboneCache<T>,
        height: usize,
        width: usize,
    },
}

struct FeatureCache<T: Scalar> {
    body: BodyCache<T>,
    /// Pooled body output, the projection input (one row).
    pooled: Array2<T>,
    /// Projection pre-activation (one row).
    proj_pre: Array2<T>,
}

/// A trained embedding of layouts into `feature_dim`-dimensional vectors,
/// with the training-time classifier head still attached.
pub struct FeatureExtractor<T: Scalar> {
    cfg: FeatureExtractorConfig,
    pub(crate) params: ParamSet<T>,
    body: Body,
    proj: Linear,
    head: Linear,
}

impl<T: Scalar> FeatureExtractor<T> {
    pub fn new(cfg: FeatureExtractorConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = rng_from_seed(seed);
        let mut params = ParamSet::new();
        let (body, body_dim) = match cfg.space {
            FeatureSpace::Sequence => {
                let dim = cfg.model_dim;
                let token_emb =
                    params.add("token_emb", normal_init(&mut rng, &[cfg.vocab.len(), dim], 0.02));
                let pos_emb =
                    params.add("pos_token", normal_init(&mut rng, &[cfg.max_seq_len(), dim], 0.02));
                let mut layers = Vec::with_capacity(cfg.num_layers);
                for l in 0..cfg.num_layers {
                    let p = format!("layer{l}");
                    layers.push(EncoderLayer {
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
                (Body::Sequence { token_emb, pos_emb, layers, final_norm }, dim)
            }
            FeatureSpace::Pixel => {
                let backbone = Backbone::init(
                    &mut params,
                    &mut rng,
                    "bb",
                    BackboneDepth::Depth18,
                    cfg.base_channels,
                );
                let dim = backbone.out_channels();
                (Body::Pixel { backbone }, dim)
            }
        };
        let proj = Linear::init(&mut params, &mut rng, "proj", body_dim, cfg.feature_dim, true);
        // Zero-initialized classifier: an untrained extractor scores every
        // layout at probability one half.
        let head = Linear::init_zero(&mut params, "head", cfg.feature_dim, 1, true);
        Ok(Self { cfg, params, body, proj, head })
    }

    pub fn config(&self) -> &FeatureExtractorConfig {
        &self.cfg
    }

    /// Stable identifier for this exact model: configuration plus every
    /// parameter value. Reports carry it so downstream comparisons can
    /// detect numbers produced by different extractors.
    pub fn fingerprint(&self) -> String {
        let mut bytes =
            serde_json::to_vec(&self.cfg).expect("extractor configs always serialize");
        for id in self.params.ids() {
            for v in self.params.get(id).iter() {
                bytes.extend_from_slice(&v.to_f64().expect("finite scalar").to_le_bytes());
            }
        }
        short_hash(&bytes)
    }

    fn render(&self, layout: &Layout) -> Result<WireframeImage> {
        render_wireframe(
            layout,
            self.cfg.vocab.num_categories(),
            &RenderConfig { width: self.cfg.image_size, height: self.cfg.image_size },
        )
    }

    /// Embeds one layout, keeping every intermediate needed for backward.
    fn forward_layout(&self, layout: &Layout) -> Result<(Array2<T>, FeatureCache<T>)> {
        let (pooled, body_cache) = match &self.body {
            Body::Sequence { token_emb, pos_emb, layers, final_norm } => {
                let seq = self.cfg.codec().encode(layout)?;
                let len = seq.len();
                let dim = self.cfg.model_dim;
                let emb_table = self.params.get2(*token_emb);
                let pos_table = self.params.get2(*pos_emb);
                let mut x = Array2::<T>::zeros((len, dim));
                for (i, (&id, mut row)) in seq.ids().iter().zip(x.outer_iter_mut()).enumerate() {
                    row.assign(&emb_table.row(id));
                    row += &pos_table.row(i);
                }
                let mut layer_caches = Vec::with_capacity(layers.len());
                for layer in layers {
                    let x_in = x;
                    let (na_out, na_cache) = layer.norm_attn.forward(&self.params, &x_in);
                    let (sa, attn_cache) = layer.attn.forward(&self.params, &na_out, &na_out);
                    let x1 = &x_in + &sa;
                    let (nf_out, nf_cache) = layer.norm_ffn.forward(&self.params, &x1);
                    let ffn_pre = layer.ffn_in.forward(&self.params, &nf_out);
                    let ffn_mid = gelu(&ffn_pre);
                    let ffn_out = layer.ffn_out.forward(&self.params, &ffn_mid);
                    x = &x1 + &ffn_out;
                    layer_caches.push(EncoderLayerCache {
                        na_out,
                        na_cache,
                        attn_cache,
                        nf_out,
                        nf_cache,
                        ffn_pre,
                        ffn_mid,
                    });
                }
                let (final_out, final_cache) = final_norm.forward(&self.params, &x);
                let pooled = final_out
                    .mean_axis(Axis(0))
                    .expect("sequences are never empty")
                    .insert_axis(Axis(0));
                (
                    pooled,
                    BodyCache::Sequence {
                        tokens: seq.ids().to_vec(),
                        layers: layer_caches,
                        final_cache,
                    },
                )
            }
            Body::Pixel { backbone } => {
                let image = self.render(layout)?;
                let tensor = image_tensor::<T>(&image);
                let (feat, cache) = backbone.forward(&self.params, &tensor);
                let (_, h, w) = feat.dim();
                let pooled = feat
                    .mean_axis(Axis(2))
                    .expect("feature maps are never empty")
                    .mean_axis(Axis(1))
                    .expect("feature maps are never empty")
                    .insert_axis(Axis(0));
                (pooled, BodyCache::Pixel { backbone: cache, height: h, width: w })
            }
        };
        let proj_pre = self.proj.forward(&self.params, &pooled);
        let feats = gelu(&proj_pre);
        Ok((feats, FeatureCache { body: body_cache, pooled, proj_pre }))
    }

    /// Backpropagates a feature-row gradient, accumulating into `grads`.
    fn backward(&self, cache: &FeatureCache<T>, d_feats: &Array2<T>, grads: &mut Grads<T>) {
        let d_proj_pre = gelu_backward(&cache.proj_pre, d_feats);
        let d_pooled = self.proj.backward(&self.params, &cache.pooled, &d_proj_pre, grads);
        match (&self.body, &cache.body) {
            (
                Body::Sequence { token_emb, pos_emb, layers, final_norm },
                BodyCache::Sequence { tokens, layers: layer_caches, final_cache },
            ) => {
                let len = tokens.len();
                let inv_len = T::from_f64_lossy(1.0 / len as f64);
                let mut d_final = Array2::<T>::zeros((len, self.cfg.model_dim));
                for mut row in d_final.outer_iter_mut() {
                    row.assign(&d_pooled.row(0));
                    row.mapv_inplace(|v| v * inv_len);
                }
                let mut dx = final_norm.backward(&self.params, final_cache, &d_final, grads);
                for (layer, lc) in layers.iter().zip(layer_caches.iter()).rev() {
                    // x2 = x1 + ffn_out(gelu(ffn_in(norm_ffn(x1))))
                    let d_ffn_mid =
                        layer.ffn_out.backward(&self.params, &lc.ffn_mid, &dx, grads);
                    let d_ffn_pre = gelu_backward(&lc.ffn_pre, &d_ffn_mid);
                    let d_nf_out =
                        layer.ffn_in.backward(&self.params, &lc.nf_out, &d_ffn_pre, grads);
                    let mut dx1 =
                        layer.norm_ffn.backward(&self.params, &lc.nf_cache, &d_nf_out, grads);
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
                    let mut dx0 =
                        layer.norm_attn.backward(&self.params, &lc.na_cache, &d_na, grads);
                    dx0 += &dx1;
                    dx = dx0;
                }
                let mut d_emb = Array2::<T>::zeros((self.cfg.vocab.len(), self.cfg.model_dim));
                let mut d_pos = Array2::<T>::zeros((self.cfg.max_seq_len(), self.cfg.model_dim));
                for (i, d_row) in dx.outer_iter().enumerate() {
                    let mut emb_row = d_emb.row_mut(tokens[i]);
                    emb_row += &d_row;
                    let mut pos_row = d_pos.row_mut(i);
                    pos_row += &d_row;
                }
                grads.accumulate(*token_emb, d_emb.into_dyn());
                grads.accumulate(*pos_emb, d_pos.into_dyn());
            }
            (Body::Pixel { backbone }, BodyCache::Pixel { backbone: cache, height, width }) => {
                let channels = d_pooled.ncols();
                let inv_area = T::from_f64_lossy(1.0 / (height * width) as f64);
                let d_map = Array3::from_shape_fn((channels, *height, *width), |(c, _, _)| {
                    d_pooled[[0, c]] * inv_area
                });
                backbone.backward(&self.params, cache, &d_map, grads);
            }
            _ => unreachable!("cache variant always matches the body variant"),
        }
    }

    /// Real-versus-perturbed classification loss on one labelled layout,
    /// optionally accumulating parameter gradients.
    fn example_loss(
        &self,
        layout: &Layout,
        label: f64,
        grads: Option<&mut Grads<T>>,
    ) -> Result<f64> {
        let (feats, cache) = self.forward_layout(layout)?;
        let logit = self.head.forward(&self.params, &feats);
        let (loss, dz) = bce_with_logits(logit[[0, 0]], T::from_f64_lossy(label));
        if let Some(grads) = grads {
            let mut d_logit = Array2::<T>::zeros((1, 1));
            d_logit[[0, 0]] = dz;
            let d_feats = self.head.backward(&self.params, &feats, &d_logit, grads);
            self.backward(&cache, &d_feats, grads);
        }
        Ok(loss.to_f64().expect("finite scalar"))
    }

    /// Embeds every layout into a row of the returned matrix
    /// (`layouts.len() x feature_dim`).
    pub fn features(&self, layouts: &[Layout], par: Parallelism) -> Result<Array2<f64>> {
        if layouts.is_empty() {
            return Err(Error::data("no layouts to embed"));
        }
        let rows: Vec<Result<Vec<f64>>> = map_items(par, layouts, |layout| {
            let (feats, _) = self.forward_layout(layout)?;
            Ok(feats.row(0).iter().map(|v| v.to_f64().expect("finite scalar")).collect())
        });
        let mut out = Array2::<f64>::zeros((layouts.len(), self.cfg.feature_dim));
        for (i, row) in rows.into_iter().enumerate() {
            let row = row?;
            out.row_mut(i).assign(&Array1::from(row));
        }
        Ok(out)
    }
}

fn image_tensor<T: Scalar>(image: &WireframeImage) -> Array3<T> {
    let (h, w) = (image.height(), image.width());
    let view = image.view();
    Array3::from_shape_fn((3, h, w), |(c, y, x)| T::from_f64_lossy(view[[y, x, c]] as f64))
}

// ============================================================================
// Training
// ============================================================================

/// Loss curve summary from one extractor training run.
#[derive(Debug, Clone)]
pub struct ExtractorTrainReport {
    pub steps: usize,
    /// Mean classification loss per step, measured before each update.
    pub losses: Vec<f64>,
    pub initial_loss: f64,
    /// Mean over the final stretch (up to 20 steps).
    pub final_loss: f64,
}

/// Trains a feature extractor from scratch: each batch item is a corpus
/// layout kept intact (label 1) or attribute-perturbed at the configured
/// noise (label 0), drawn uniformly with replacement. The same seed yields
/// the same model under both execution modes.
pub fn train_feature_extractor(
    layouts: &[Layout],
    cfg: &FeatureExtractorConfig,
    steps: usize,
    seed: u64,
    par: Parallelism,
    mut on_step: impl FnMut(usize, f64),
) -> Result<(FeatureExtractor<f32>, ExtractorTrainReport)> {
    cfg.validate()?;
    if steps == 0 {
        return Err(Error::Precondition(
            "extractor training needs at least one step".to_string(),
        ));
    }
    let usable: Vec<&Layout> = layouts
        .iter()
        .filter(|l| !l.is_empty() && l.len() <= cfg.max_elements)
        .collect();
    if usable.is_empty() {
        return Err(Error::data("no usable layouts for extractor training"));
    }
    let mut model = FeatureExtractor::<f32>::new(cfg.clone(), derive_seed(seed, "features-init"))?;
    let mut opt = AdamW::new(&model.params, cfg.beta1, cfg.beta2, 0.0);
    let mut rng = rng_from_seed(derive_seed(seed, "features-batches"));
    let mut losses = Vec::with_capacity(steps);
    for step in 0..steps {
        // Indices, labels, and perturbation seeds are drawn sequentially so
        // the result does not depend on the execution mode.
        let items: Vec<(usize, bool, u64)> = (0..cfg.batch_size)
            .map(|_| {
                use rand::Rng;
                (rng.gen_range(0..usable.len()), rng.gen_bool(0.5), rng.gen())
            })
            .collect();
        let m = &model;
        let results: Vec<Result<(f64, Grads<f32>)>> = map_items(par, &items, |&(idx, fake, s)| {
            let mut grads = Grads::new(&m.params);
            let loss = if fake {
                let (noisy, _) = perturb(usable[idx], m.cfg.noise, s);
                m.example_loss(&noisy, 0.0, Some(&mut grads))?
            } else {
                m.example_loss(usable[idx], 1.0, Some(&mut grads))?
            };
            Ok((loss, grads))
        });
        let mut total = 0.0;
        let mut grads = Grads::new(&model.params);
        for result in results {
            let (loss, g) = result?;
            total += loss;
            grads.merge(g);
        }
        grads.scale(1.0 / items.len() as f32);
        opt.step(&mut model.params, &grads, cfg.learning_rate);
        let mean = total / items.len() as f64;
        losses.push(mean);
        on_step(step, mean);
    }
    let tail = losses.len().min(20);
    let report = ExtractorTrainReport {
        steps,
        initial_loss: losses[0],
        final_loss: losses[losses.len() - tail..].iter().sum::<f64>() / tail as f64,
        losses,
    };
    Ok((model, report))
}

// ============================================================================
// Fréchet feature distance
// ============================================================================

/// A Fréchet feature distance plus its sample-size caveat.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FidOutcome {
    pub value: f64,
    /// Set when either side has fewer samples than the feature dimension,
    /// making the fitted Gaussians rank-deficient.
    pub low_sample_warning: bool,
    /// Fingerprint of the extractor that produced the embeddings.
    pub extractor_fingerprint: String,
}

/// Embeds both corpora with `model` and returns the Fréchet distance
/// between their fitted feature Gaussians.
///
/// `space` must match the extractor's space: scores from different
/// embedding models are not comparable, so a mismatch is an error rather
/// than a silent fallback.
pub fn fid(
    space: FeatureSpace,
    generated: &[Layout],
    real: &[Layout],
    model: &FeatureExtractor<f32>,
    par: Parallelism,
) -> Result<FidOutcome> {
    if model.cfg.space != space {
        return Err(Error::config(format!(
            "requested {space} features from a {} extractor",
            model.cfg.space
        )));
    }
    let gen_features = model.features(generated, par)?;
    let real_features = model.features(real, par)?;
    let (mu1, sigma1) = fit_gaussian(gen_features.view())?;
    let (mu2, sigma2) = fit_gaussian(real_features.view())?;
    let value = frechet_distance(mu1.view(), sigma1.view(), mu2.view(), sigma2.view())?;
    Ok(FidOutcome {
        value,
        low_sample_warning: generated.len() < model.cfg.feature_dim
            || real.len() < model.cfg.feature_dim,
        extractor_fingerprint: model.fingerprint(),
    })
}

// ============================================================================
// Checkpoints
// ============================================================================

/// Side information stored with an extractor checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractorExtras {
    pub training_steps: usize,
}

/// Saves the extractor; the vocabulary hash is derived from the embedded
/// vocabulary so loads can verify schema compatibility.
pub fn save_feature_extractor(
    model: &FeatureExtractor<f32>,
    extras: &ExtractorExtras,
    path: impl AsRef<std::path::Path>,
) -> Result<()> {
    let ckpt = Checkpoint::new(
        FEATURES_KIND,
        serde_json::to_value(model.config())?,
        &model.config().vocab.hash(),
        serde_json::to_value(extras)?,
        model.params.clone(),
    );
    ckpt.save(path)
}

/// Loads an extractor checkpoint, optionally insisting on a vocabulary
/// hash.
pub fn load_feature_extractor(
    path: impl AsRef<std::path::Path>,
    expected_vocab_hash: Option<&str>,
) -> Result<(FeatureExtractor<f32>, ExtractorExtras)> {
    let ckpt = Checkpoint::load(path)?;
    if ckpt.kind != FEATURES_KIND {
        return Err(Error::data(format!(
            "checkpoint kind {:?} where {FEATURES_KIND:?} is required",
            ckpt.kind
        )));
    }
    if let Some(expected) = expected_vocab_hash {
        if ckpt.vocab_hash != expected {
            return Err(Error::Schema(format!(
                "extractor was trained against vocabulary {} but the current vocabulary is \
                 {expected}",
                ckpt.vocab_hash
            )));
        }
    }
    let cfg: FeatureExtractorConfig = serde_json::from_value(ckpt.config)?;
    if cfg.vocab.hash() != ckpt.vocab_hash {
        return Err(Error::Schema(format!(
            "checkpoint vocabulary hash {} does not match its embedded vocabulary {}",
            ckpt.vocab_hash,
            cfg.vocab.hash()
        )));
    }
    let extras: ExtractorExtras = serde_json::from_value(ckpt.extras)?;
    let mut model = FeatureExtractor::<f32>::new(cfg, 0)?;
    model.params.load_values_from(&ckpt.params)?;
    Ok((model, extras))
}

// ============================================================================
// Tests
// ============================================================================
