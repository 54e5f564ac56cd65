//! BERT-style masked training for the sequence decoder.
//!
//! Each step draws a batch of ground-truth layouts, samples a fresh mask
//! pattern per sample, renders the wireframe with the masked elements
//! removed (matching the refinement loop, where the render reflects the
//! previous iteration's partial state), and minimizes the slot-restricted
//! negative log-likelihood of the hidden tokens. Optimizer updates form a
//! single logical stream; the per-sample forward/backward passes are pure
//! and may fan out across workers.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{masked_nll_grad, Decoder, DecoderConfig};
use crate::error::{Error, Result};
use crate::exec::{self, Parallelism};
use crate::layout::{Layout, SequenceCodec, TokenSequence, Vocabulary, SLOTS_PER_ELEMENT};
use crate::nn::{AdamW, Checkpoint, Grads, lr_at_step};
use crate::render::{render_wireframe, RenderConfig, WireframeImage};
use crate::util::{derive_seed, rng_from_seed};

// ============================================================================
// Mask sampling
// ============================================================================

/// Draws the training mask set for one sequence: a ratio `r ~ U(0,1]`
/// masks `⌈r·|maskable|⌉` uniformly chosen positions; with probability 0.5
/// the maskable set is first restricted to geometry slots, mimicking the
/// categories-given generation task.
///
/// The returned positions are sorted. The set is never empty for a
/// non-empty maskable set (`r > 0` makes the ceiling at least 1).
pub fn sample_training_masks(seq: &TokenSequence, rng: &mut impl Rng) -> Result<Vec<usize>> {
    let geometry_only = rng.gen_bool(0.5);
    let mut maskable = seq.maskable_positions();
    if geometry_only {
        let geometry: Vec<usize> = maskable
            .iter()
            .copied()
            .filter(|&p| seq.kind(p).is_geometry())
            .collect();
        if !geometry.is_empty() {
            maskable = geometry;
        }
    }
    if maskable.is_empty() {
        return Err(Error::Precondition(
            "sequence has no maskable positions to train on".to_string(),
        ));
    }
    let r = 1.0 - rng.gen::<f64>(); // (0, 1]
    let k = ((r * maskable.len() as f64).ceil() as usize).clamp(1, maskable.len());
    maskable.shuffle(rng);
    let mut chosen: Vec<usize> = maskable.into_iter().take(k).collect();
    chosen.sort_unstable();
    Ok(chosen)
}

/// Renders the ground-truth layout with every masked element removed.
///
/// An element counts as masked when any of its five tokens is masked; the
/// remaining elements are drawn normally. This is the training-time analog
/// of the refinement loop's partial render.
pub fn training_wireframe(
    layout: &Layout,
    masked_positions: &[usize],
    num_categories: usize,
    image_size: usize,
) -> Result<WireframeImage> {
    let mut masked_elements = vec![false; layout.len()];
    for &pos in masked_positions {
        let elem = (pos - 1) / SLOTS_PER_ELEMENT;
        if elem >= layout.len() {
            return Err(Error::Precondition(format!(
                "masked position {pos} does not belong to any of {} elements",
                layout.len()
            )));
        }
        masked_elements[elem] = true;
    }
    let kept: Vec<_> = layout
        .elements
        .iter()
        .zip(&masked_elements)
        .filter(|(_, &m)| !m)
        .map(|(e, _)| e.clone())
        .collect();
    render_wireframe(
        &Layout::new(kept),
        num_categories,
        &RenderConfig { width: image_size, height: image_size },
    )
}

// ============================================================================
// Trainer
// ============================================================================

/// One prepared training sample: masked sequence, target ids for the
/// masked positions, and the partial wireframe.
struct PreparedSample {
    seq: TokenSequence,
    targets: Vec<(usize, usize)>,
    wireframe: WireframeImage,
}

/// Owns the decoder and its optimizer state across steps.
pub struct Trainer {
    decoder: Decoder<f32>,
    opt: AdamW<f32>,
    codec: SequenceCodec,
}

impl Trainer {
    pub fn new(decoder: Decoder<f32>) -> Self {
        let cfg = decoder.config().clone();
        let opt = AdamW::new(decoder.params(), cfg.beta1, cfg.beta2, 0.0);
        let codec = SequenceCodec::new(cfg.vocab.clone(), cfg.max_elements);
        Self { decoder, opt, codec }
    }

    pub fn decoder(&self) -> &Decoder<f32> {
        &self.decoder
    }

    pub fn into_decoder(self) -> Decoder<f32> {
        self.decoder
    }

    pub fn steps_done(&self) -> usize {
        self.opt.steps_done()
    }

    /// Runs one optimizer step on a batch of ground-truth layouts and
    /// returns the mean masked NLL (measured before the update).
    ///
    /// Mask sampling consumes `rng` sequentially so results do not depend
    /// on the execution mode; the heavy forward/backward passes then fan
    /// out via `par`.
    pub fn train_step(
        &mut self,
        batch: &[&Layout],
        rng: &mut ChaCha8Rng,
        par: Parallelism,
    ) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::Precondition("empty training batch".to_string()));
        }
        let cfg = self.decoder.config().clone();
        let mut prepared = Vec::with_capacity(batch.len());
        for layout in batch {
            let full = self.codec.encode(layout)?;
            let masks = sample_training_masks(&full, rng)?;
            let mut seq = full.clone();
            seq.apply_masks(&masks)?;
            let targets: Vec<(usize, usize)> = masks.iter().map(|&p| (p, full.id(p))).collect();
            let wireframe = training_wireframe(
                layout,
                &masks,
                cfg.vocab.num_categories(),
                cfg.image_size,
            )?;
            prepared.push(PreparedSample { seq, targets, wireframe });
        }

        let decoder = &self.decoder;
        let results: Vec<Result<(f64, usize, Grads<f32>)>> =
            exec::map_items(par, &prepared, |sample| {
                let (logits, cache) = decoder.forward(&sample.seq, &sample.wireframe)?;
                let (nll, d_logits) = masked_nll_grad(
                    &logits,
                    sample.seq.len(),
                    &decoder.config().vocab,
                    &sample.targets,
                )?;
                let mut grads = Grads::new(decoder.params());
                decoder.backward(&cache, &d_logits, &mut grads);
                Ok((nll, sample.targets.len(), grads))
            });

        let mut total_nll = 0.0;
        let mut total_masked = 0usize;
        let mut grads = Grads::new(self.decoder.params());
        for result in results {
            let (nll, count, g) = result?;
            total_nll += nll;
            total_masked += count;
            grads.merge(g);
        }
        grads.scale(1.0 / total_masked as f32);

        let lr = lr_at_step(cfg.learning_rate, cfg.warmup_steps, self.opt.steps_done() + 1);
        self.opt.step(self.decoder.params_mut(), &grads, lr);
        Ok(total_nll / total_masked as f64)
    }
}

// ============================================================================
// Full training run
// ============================================================================

/// Loss curve summary from one training run.
#[derive(Debug, Clone)]
pub struct TrainReport {
    pub steps: usize,
    /// Mean masked NLL per step, measured before each update.
    pub losses: Vec<f64>,
    pub initial_loss: f64,
    pub final_loss: f64,
}

/// Trains a fresh decoder for `steps` optimizer steps over the given
/// corpus, reporting `(step, loss)` through `on_step` as it goes.
pub fn train_decoder(
    layouts: &[Layout],
    cfg: DecoderConfig,
    steps: usize,
    seed: u64,
    par: Parallelism,
    mut on_step: impl FnMut(usize, f64),
) -> Result<(Decoder<f32>, TrainReport)> {
    cfg.validate()?;
    if layouts.is_empty() {
        return Err(Error::data("decoder training corpus is empty"));
    }
    if steps == 0 {
        return Err(Error::config("training requires at least one step"));
    }
    let usable: Vec<&Layout> = layouts
        .iter()
        .filter(|l| !l.is_empty() && l.len() <= cfg.max_elements)
        .collect();
    if usable.is_empty() {
        return Err(Error::data(
            "no training layout fits within the element capacity",
        ));
    }

    let decoder = Decoder::new(cfg.clone(), derive_seed(seed, "decoder-init"))?;
    let mut trainer = Trainer::new(decoder);
    let mut rng = rng_from_seed(derive_seed(seed, "decoder-batches"));
    let mut losses = Vec::with_capacity(steps);
    for step in 0..steps {
        let batch: Vec<&Layout> = (0..cfg.batch_size)
            .map(|_| usable[rng.gen_range(0..usable.len())])
            .collect();
        let loss = trainer.train_step(&batch, &mut rng, par)?;
        on_step(step + 1, loss);
        losses.push(loss);
    }
    let tail = losses.len().min(20);
    let final_loss = losses[losses.len() - tail..].iter().sum::<f64>() / tail as f64;
    let report = TrainReport {
        steps,
        initial_loss: losses[0],
        final_loss,
        losses,
    };
    Ok((trainer.into_decoder(), report))
}

/// Frequencies of element counts in the training corpus, used to sample a
/// length when generating unconditionally.
pub fn element_count_histogram(layouts: &[Layout], max_elements: usize) -> Vec<u64> {
    let mut hist = vec![0u64; max_elements + 1];
    for layout in layouts {
        if layout.len() <= max_elements {
            hist[layout.len()] += 1;
        }
    }
    hist
}

// ============================================================================
// Checkpointing
// ============================================================================

/// Side data stored with a decoder checkpoint.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DecoderExtras {
    /// `histogram[n]` = number of training layouts with exactly n elements.
    pub element_count_histogram: Vec<u64>,
    pub training_steps: usize,
}

const DECODER_KIND: &str = "decoder";

pub fn save_decoder(
    decoder: &Decoder<f32>,
    extras: &DecoderExtras,
    path: impl AsRef<std::path::Path>,
) -> Result<()> {
    let cfg = decoder.config();
    let ckpt = Checkpoint::new(
        DECODER_KIND,
        serde_json::to_value(cfg)?,
        cfg.vocab.hash(),
        serde_json::to_value(extras)?,
        decoder.params().clone(),
    );
    ckpt.save(path)
}

/// Loads a decoder checkpoint, verifying the stored vocabulary hash is
/// self-consistent. Pass `expected_vocab` to additionally refuse models
/// trained against a different token table.
pub fn load_decoder(
    path: impl AsRef<std::path::Path>,
    expected_vocab: Option<&Vocabulary>,
) -> Result<(Decoder<f32>, DecoderExtras)> {
    let ckpt = match expected_vocab {
        Some(vocab) => Checkpoint::load_expected(&path, DECODER_KIND, &vocab.hash())?,
        None => {
            let ckpt = Checkpoint::load(&path)?;
            if ckpt.kind != DECODER_KIND {
                return Err(Error::data(format!(
                    "checkpoint kind {:?} where {DECODER_KIND:?} is required",
                    ckpt.kind
                )));
            }
            ckpt
        }
    };
    let cfg: DecoderConfig = serde_json::from_value(ckpt.config.clone())?;
    if cfg.vocab.hash() != ckpt.vocab_hash {
        return Err(Error::Schema(
            "checkpoint vocabulary hash disagrees with its stored vocabulary".to_string(),
        ));
    }
    let extras: DecoderExtras = serde_json::from_value(ckpt.extras.clone())?;
    let mut decoder = Decoder::new(cfg, 0)?;
    decoder.params_mut().load_values_from(&ckpt.params)?;
    Ok((decoder, extras))
}
