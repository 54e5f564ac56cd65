//! Iterative mask-predict generation.
//!
//! Generation starts from a sequence whose unknown slots are MASK tokens,
//! then alternates for up to `T` iterations: render the current hypothesis
//! as a wireframe, let the decoder fill every masked slot in parallel, and
//! re-mask the tokens most likely wrong — either the lowest-confidence
//! predictions (optionally phased by attribute group) or the attributes a
//! trained locator flags on the rendered image. Conditioned tokens are
//! never re-masked, so whatever the caller pinned survives every
//! iteration verbatim.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::decoder::Decoder;
use crate::error::{Error, Result};
use crate::exec::{self, Parallelism};
use crate::layout::discretize;
use crate::layout::{Layout, SequenceCodec, TokenSequence, Vocabulary, SLOTS_PER_ELEMENT};
use crate::render::{render_partial, RenderConfig, WireframeImage};
use crate::util::rng_from_seed;

// ============================================================================
// Tasks
// ============================================================================

/// What the caller pins before generation starts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Condition {
    /// Nothing given; the element count is drawn from the training
    /// element-count histogram.
    None,
    /// Categories given; sizes and positions are generated.
    Categories(Vec<usize>),
    /// Categories and sizes given; positions are generated.
    CategoriesAndSizes(Vec<(usize, (f64, f64))>),
}

/// Conditioning mode implied by a [`Condition`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum GenerationMode {
    Unconditional,
    CategoryToSizePosition,
    CategorySizeToPosition,
}

/// How tokens are chosen for re-masking between iterations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MaskingPolicy {
    /// A trained locator flags erroneous attributes on the rendered image.
    Locator,
    /// Lowest-confidence predictions, linearly decaying count.
    LeastConfident,
    /// Same count, but restricted to one attribute group per phase
    /// (category, then size, then position), skipping conditioned groups.
    LeastConfidentGrouped,
}

/// One generation request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationTask {
    pub condition: Condition,
    /// Refinement iterations `T >= 1`.
    pub iterations: usize,
    pub policy: MaskingPolicy,
    pub seed: u64,
}

pub const DEFAULT_ITERATIONS: usize = 10;

impl GenerationTask {
    pub fn new(condition: Condition, policy: MaskingPolicy, seed: u64) -> Self {
        Self { condition, iterations: DEFAULT_ITERATIONS, policy, seed }
    }

    pub fn mode(&self) -> GenerationMode {
        match self.condition {
            Condition::None => GenerationMode::Unconditional,
            Condition::Categories(_) => GenerationMode::CategoryToSizePosition,
            Condition::CategoriesAndSizes(_) => GenerationMode::CategorySizeToPosition,
        }
    }

    pub fn validate(&self, max_elements: usize) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::domain("iteration count must be at least 1"));
        }
        let given = match &self.condition {
            Condition::None => return Ok(()),
            Condition::Categories(c) => c.len(),
            Condition::CategoriesAndSizes(c) => c.len(),
        };
        if given == 0 {
            return Err(Error::Precondition(
                "conditioned generation requires at least one element".to_string(),
            ));
        }
        if given > max_elements {
            return Err(Error::Capacity { got: given, max: max_elements });
        }
        Ok(())
    }
}

// ============================================================================
// Traces
// ============================================================================

/// State captured at one refinement iteration, after prediction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationSnapshot {
    /// The fully filled hypothesis, decoded.
    pub layout: Layout,
    /// Positions that were masked when the iteration started.
    pub masked_entering: Vec<usize>,
    /// Content hash of the wireframe the decoder attended to.
    pub wireframe_hash: String,
    /// Token ids of the filled hypothesis.
    pub token_ids: Vec<usize>,
}

/// Per-iteration history of one generation run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct IterationTrace {
    pub snapshots: Vec<IterationSnapshot>,
}

impl IterationTrace {
    pub fn len(&self) -> usize {
        self.snapshots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.snapshots.is_empty()
    }
}

// ============================================================================
// Locator interface
// ============================================================================

/// Scores each rendered element's attributes for being wrong.
///
/// `boxes` are the normalized `(x, y, w, h)` boxes of the current
/// hypothesis, in element order; the result holds, per element, the
/// probability that each of `x, y, w, h` should be re-predicted.
pub trait MaskScorer: Sync {
    fn score(&self, image: &WireframeImage, boxes: &[[f64; 4]]) -> Result<Vec<[f64; 4]>>;
}

// ============================================================================
// Sequence initialization
// ============================================================================

/// Builds the starting sequence for a task: conditioned slots hold their
/// given tokens and are pinned; everything else is MASK.
///
/// Unconditional tasks draw the element count from `histogram`
/// (`histogram[n]` = training frequency of n-element layouts) using `rng`.
pub fn init_sequence(
    task: &GenerationTask,
    histogram: &[u64],
    codec: &SequenceCodec,
    rng: &mut ChaCha8Rng,
) -> Result<TokenSequence> {
    task.validate(codec.max_elements())?;
    let vocab = codec.vocab();
    let bins = vocab.num_bins();

    enum Slot {
        Given(usize),
        Masked,
    }
    let element_slots: Vec<[Slot; SLOTS_PER_ELEMENT]> = match &task.condition {
        Condition::None => {
            let n = sample_element_count(histogram, codec.max_elements(), rng)?;
            (0..n)
                .map(|_| [Slot::Masked, Slot::Masked, Slot::Masked, Slot::Masked, Slot::Masked])
                .collect()
        }
        Condition::Categories(categories) => categories
            .iter()
            .map(|&c| {
                Ok([
                    Slot::Given(vocab.category_id(c)?),
                    Slot::Masked,
                    Slot::Masked,
                    Slot::Masked,
                    Slot::Masked,
                ])
            })
            .collect::<Result<_>>()?,
        Condition::CategoriesAndSizes(pairs) => pairs
            .iter()
            .map(|&(c, (w, h))| {
                Ok([
                    Slot::Given(vocab.category_id(c)?),
                    Slot::Masked,
                    Slot::Masked,
                    Slot::Given(vocab.bin_id(discretize(w, bins)?)?),
                    Slot::Given(vocab.bin_id(discretize(h, bins)?)?),
                ])
            })
            .collect::<Result<_>>()?,
    };

    let mut ids = Vec::with_capacity(element_slots.len() * SLOTS_PER_ELEMENT + 2);
    ids.push(Vocabulary::BOS);
    for slots in &element_slots {
        for slot in slots {
            ids.push(match slot {
                Slot::Given(id) => *id,
                Slot::Masked => Vocabulary::MASK,
            });
        }
    }
    ids.push(Vocabulary::EOS);

    let mut seq = TokenSequence::new(ids)?;
    for (e, slots) in element_slots.iter().enumerate() {
        for (a, slot) in slots.iter().enumerate() {
            if matches!(slot, Slot::Given(_)) {
                seq.set_conditioned(seq.position_of(e, a)?, true);
            }
        }
    }
    Ok(seq)
}

fn sample_element_count(
    histogram: &[u64],
    max_elements: usize,
    rng: &mut ChaCha8Rng,
) -> Result<usize> {
    let weights: Vec<u64> = (1..=max_elements)
        .map(|n| histogram.get(n).copied().unwrap_or(0))
        .collect();
    let total: u64 = weights.iter().sum();
    if total == 0 {
        return Err(Error::data(
            "element-count histogram is empty; cannot sample a length",
        ));
    }
    let mut draw = rng.gen_range(0..total);
    for (i, &w) in weights.iter().enumerate() {
        if draw < w {
            return Ok(i + 1);
        }
        draw -= w;
    }
    unreachable!("draw below total weight")
}

// ============================================================================
// Heuristic masking policies
// ============================================================================

/// Attribute groups for the phased heuristic, in phase order.
const GROUP_SLOT_OFFSETS: [(GenerationMode, [&[usize]; 3]); 3] = [
    // category (slot 0) -> size (w, h) -> position (x, y); conditioned
    // groups are dropped per mode.
    (GenerationMode::Unconditional, [&[0], &[3, 4], &[1, 2]]),
    (GenerationMode::CategoryToSizePosition, [&[3, 4], &[1, 2], &[]]),
    (GenerationMode::CategorySizeToPosition, [&[1, 2], &[], &[]]),
];

fn active_groups(mode: GenerationMode) -> Vec<&'static [usize]> {
    GROUP_SLOT_OFFSETS
        .iter()
        .find(|(m, _)| *m == mode)
        .expect("every mode listed")
        .1
        .iter()
        .copied()
        .filter(|g| !g.is_empty())
        .collect()
}

/// Number of tokens to re-mask after completing iteration `t` of `T`:
/// `⌊L·(T−t)/T⌋`, reaching zero exactly at `t = T`.
fn remask_count(maskable: usize, t: usize, iterations: usize) -> usize {
    (maskable * iterations.saturating_sub(t)) / iterations
}

/// Selects the token positions to re-mask after iteration `t` (1-based,
/// `t = T` selects nothing). `confidences` holds `(position, confidence)`
/// for every non-conditioned position; ties break toward lower positions.
///
/// `LeastConfident` takes the lowest-confidence positions overall;
/// `LeastConfidentGrouped` restricts candidates to the attribute group
/// active in the upcoming iteration's phase (conditioned groups are
/// skipped entirely). The policy must be one of the two heuristics.
pub fn heuristic_mask_select(
    confidences: &[(usize, f64)],
    t: usize,
    iterations: usize,
    policy: MaskingPolicy,
    mode: GenerationMode,
) -> Vec<usize> {
    let count = remask_count(confidences.len(), t, iterations);
    if count == 0 {
        return Vec::new();
    }
    let mut candidates: Vec<(usize, f64)> = match policy {
        MaskingPolicy::LeastConfident => confidences.to_vec(),
        MaskingPolicy::LeastConfidentGrouped => {
            let groups = active_groups(mode);
            // Phase of the upcoming iteration u = t+1 over 1..=T, with the
            // phases splitting T as evenly as possible.
            let u = (t + 1).min(iterations);
            let phase = ((u - 1) * groups.len()) / iterations;
            let offsets = groups[phase];
            confidences
                .iter()
                .copied()
                .filter(|&(pos, _)| offsets.contains(&((pos - 1) % SLOTS_PER_ELEMENT)))
                .collect()
        }
        MaskingPolicy::Locator => {
            unreachable!("locator masking is not a heuristic selection")
        }
    };
    candidates.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    let mut chosen: Vec<usize> =
        candidates.into_iter().take(count).map(|(pos, _)| pos).collect();
    chosen.sort_unstable();
    chosen
}

/// Converts locator scores into the re-mask set: every geometry token whose
/// attribute is flagged with probability > 0.5, except conditioned slots.
/// If the locator floods (flags more than 80% of the maskable tokens), the
/// selection falls back to the top half of maskable tokens by flag
/// probability, guarding against degenerate early-training locators.
fn locator_mask_select(
    scores: &[[f64; 4]],
    seq: &TokenSequence,
    maskable_total: usize,
) -> Result<Vec<usize>> {
    let mut scored: Vec<(usize, f64)> = Vec::new();
    for (e, attrs) in scores.iter().enumerate() {
        for (a, &p) in attrs.iter().enumerate() {
            // Attribute a of (x, y, w, h) lives in element slot a + 1.
            let pos = seq.position_of(e, a + 1)?;
            if !seq.is_conditioned(pos) {
                scored.push((pos, p));
            }
        }
    }
    let flagged: Vec<usize> =
        scored.iter().filter(|&&(_, p)| p > 0.5).map(|&(pos, _)| pos).collect();
    if flagged.len() as f64 > 0.8 * maskable_total as f64 {
        let cap = (0.5 * maskable_total as f64).ceil() as usize;
        let mut by_prob = scored;
        by_prob.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        let mut chosen: Vec<usize> =
            by_prob.into_iter().take(cap).map(|(pos, _)| pos).collect();
        chosen.sort_unstable();
        return Ok(chosen);
    }
    Ok(flagged)
}

// ============================================================================
// The generation loop
// ============================================================================

/// Runs the full mask-predict loop for one task.
///
/// Iteration `t` renders the previous iteration's complete hypothesis
/// (iteration 1 renders the condition-only partial state), predicts every
/// masked slot, then — unless this was iteration `T` — re-masks the
/// policy's selection and continues. An empty selection stops early. The
/// returned trace holds one snapshot per executed iteration.
pub fn generate(
    task: &GenerationTask,
    decoder: &Decoder<f32>,
    locator: Option<&dyn MaskScorer>,
    histogram: &[u64],
    codec: &SequenceCodec,
) -> Result<(Layout, IterationTrace)> {
    if task.policy == MaskingPolicy::Locator && locator.is_none() {
        return Err(Error::Precondition(
            "locator masking policy requires a locator model".to_string(),
        ));
    }
    let render_cfg = RenderConfig {
        width: decoder.config().image_size,
        height: decoder.config().image_size,
    };
    let mut rng = rng_from_seed(task.seed);
    let mut seq = init_sequence(task, histogram, codec, &mut rng)?;
    let maskable_total = seq.maskable_positions().len();
    let mut confidence: Vec<f64> = vec![0.0; seq.len()];
    let mut trace = IterationTrace::default();
    let mut image = render_partial(&seq, codec, &render_cfg)?;

    loop {
        let t = trace.len() + 1;
        let masked_entering = seq.masked_positions();
        let (filled, confs) = decoder.predict_masked(&seq, &image)?;
        for &(pos, c) in &confs {
            confidence[pos] = c;
        }
        let layout = codec.decode(&filled)?;
        trace.snapshots.push(IterationSnapshot {
            layout,
            masked_entering,
            wireframe_hash: image.content_hash(),
            token_ids: filled.ids().to_vec(),
        });
        if t == task.iterations {
            return finish(filled, trace, codec);
        }

        // The next iteration attends to the complete current hypothesis.
        let next_image = render_partial(&filled, codec, &render_cfg)?;
        let selection = match task.policy {
            MaskingPolicy::LeastConfident | MaskingPolicy::LeastConfidentGrouped => {
                let pairs: Vec<(usize, f64)> = seq
                    .maskable_positions()
                    .into_iter()
                    .map(|pos| (pos, confidence[pos]))
                    .collect();
                heuristic_mask_select(&pairs, t, task.iterations, task.policy, task.mode())
            }
            MaskingPolicy::Locator => {
                let snapshot = trace.snapshots.last().expect("pushed above");
                let boxes: Vec<[f64; 4]> =
                    snapshot.layout.elements.iter().map(|e| e.bbox()).collect();
                let scores =
                    locator.expect("checked above").score(&next_image, &boxes)?;
                if scores.len() != boxes.len() {
                    return Err(Error::Invariant(format!(
                        "locator scored {} elements for {} boxes",
                        scores.len(),
                        boxes.len()
                    )));
                }
                locator_mask_select(&scores, &filled, maskable_total)?
            }
        };
        if selection.is_empty() {
            return finish(filled, trace, codec);
        }
        seq = filled;
        seq.apply_masks(&selection)?;
        image = next_image;
    }
}

fn finish(
    seq: TokenSequence,
    trace: IterationTrace,
    codec: &SequenceCodec,
) -> Result<(Layout, IterationTrace)> {
    debug_assert!(seq.is_complete());
    let layout = codec.decode(&seq)?;
    Ok((layout, trace))
}

/// Runs many tasks, fanning out across workers; output order follows task
/// order regardless of execution mode.
pub fn generate_batch(
    tasks: &[GenerationTask],
    decoder: &Decoder<f32>,
    locator: Option<&dyn MaskScorer>,
    histogram: &[u64],
    codec: &SequenceCodec,
    par: Parallelism,
) -> Result<Vec<(Layout, IterationTrace)>> {
    exec::map_items(par, tasks, |task| {
        generate(task, decoder, locator, histogram, codec)
    })
    .into_iter()
    .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decoder::DecoderConfig;
    use crate::layout::CategorySchema;
    use std::sync::atomic::{AtomicUsize, Ordering};

    fn tiny_decoder() -> (Decoder<f32>, SequenceCodec) {
        let vocab = Vocabulary::new(&CategorySchema::synthetic(), 128).unwrap();
        let mut cfg = DecoderConfig::desk_scale(vocab.clone());
        cfg.num_layers = 1;
        cfg.model_dim = 32;
        cfg.num_heads = 2;
        cfg.image_size = 32;
        let codec = SequenceCodec::new(vocab, cfg.max_elements);
        (Decoder::new(cfg, 77).unwrap(), codec)
    }

    fn flat_histogram() -> Vec<u64> {
        let mut h = vec![0u64; 10];
        for n in 2..=9 {
            h[n] = 1;
        }
        h
    }

    #[test]
    fn init_categories_masks_all_geometry() {
        let (_, codec) = tiny_decoder();
        let task = GenerationTask::new(
            Condition::Categories(vec![0, 1, 2]),
            MaskingPolicy::LeastConfident,
            1,
        );
        let seq =
            init_sequence(&task, &flat_histogram(), &codec, &mut rng_from_seed(1)).unwrap();
        assert_eq!(seq.len(), 17);
        assert_eq!(seq.masked_positions().len(), 12);
        for e in 0..3 {
            let cat_pos = seq.position_of(e, 0).unwrap();
            assert!(seq.is_conditioned(cat_pos));
            assert_ne!(seq.id(cat_pos), Vocabulary::MASK);
        }
    }

    #[test]
    fn init_categories_and_sizes_masks_positions_only() {
        let (_, codec) = tiny_decoder();
        let task = GenerationTask::new(
            Condition::CategoriesAndSizes(vec![
                (0, (0.8, 0.1)),
                (1, (0.3, 0.2)),
                (2, (0.4, 0.4)),
            ]),
            MaskingPolicy::LeastConfident,
            1,
        );
        let seq =
            init_sequence(&task, &flat_histogram(), &codec, &mut rng_from_seed(1)).unwrap();
        assert_eq!(seq.masked_positions().len(), 6);
        // Size slots hold the discretized bins of the given sizes.
        let vocab = codec.vocab();
        let w_pos = seq.position_of(0, 3).unwrap();
        let expected = vocab.bin_id(discretize(0.8, vocab.num_bins()).unwrap()).unwrap();
        assert_eq!(seq.id(w_pos), expected);
        assert!(seq.is_conditioned(w_pos));
    }

    #[test]
    fn init_unconditional_draws_count_from_histogram() {
        let (_, codec) = tiny_decoder();
        let task =
            GenerationTask::new(Condition::None, MaskingPolicy::LeastConfident, 1);
        // Point-mass histogram pins the count.
        let mut hist = vec![0u64; 10];
        hist[4] = 7;
        let seq = init_sequence(&task, &hist, &codec, &mut rng_from_seed(5)).unwrap();
        assert_eq!(seq.num_elements(), 4);
        assert_eq!(seq.masked_positions().len(), 20);
        // Same seed, same draw.
        let again = init_sequence(&task, &hist, &codec, &mut rng_from_seed(5)).unwrap();
        assert_eq!(seq, again);
        // Empty histogram is a data error.
        assert!(init_sequence(&task, &[0; 10], &codec, &mut rng_from_seed(5)).is_err());
    }

    #[test]
    fn init_rejects_oversized_and_empty_conditions() {
        let (_, codec) = tiny_decoder();
        let too_many = GenerationTask::new(
            Condition::Categories(vec![0; 10]),
            MaskingPolicy::LeastConfident,
            1,
        );
        assert!(matches!(
            init_sequence(&too_many, &flat_histogram(), &codec, &mut rng_from_seed(1)),
            Err(Error::Capacity { got: 10, max: 9 })
        ));
        let empty = GenerationTask::new(
            Condition::Categories(vec![]),
            MaskingPolicy::LeastConfident,
            1,
        );
        assert!(init_sequence(&empty, &flat_histogram(), &codec, &mut rng_from_seed(1))
            .is_err());
    }

    #[test]
    fn remask_schedule_matches_hand_evaluation() {
        // L = 12 maskable tokens, T = 10: the counts after iterations
        // 1, 2, 3, ... are 10, 9, 8, ...
        let confs: Vec<(usize, f64)> = (0..12).map(|i| (1 + i, 0.5)).collect();
        let counts: Vec<usize> = (1..=10)
            .map(|t| {
                heuristic_mask_select(
                    &confs,
                    t,
                    10,
                    MaskingPolicy::LeastConfident,
                    GenerationMode::Unconditional,
                )
                .len()
            })
            .collect();
        assert_eq!(counts, vec![10, 9, 8, 7, 6, 4, 3, 2, 1, 0]);
    }

    #[test]
    fn equal_confidences_break_ties_toward_lower_positions() {
        let confs: Vec<(usize, f64)> = (0..12).map(|i| (1 + i, 0.5)).collect();
        let chosen = heuristic_mask_select(
            &confs,
            5,
            10,
            MaskingPolicy::LeastConfident,
            GenerationMode::Unconditional,
        );
        assert_eq!(chosen, (1..=6).collect::<Vec<_>>());
    }

    #[test]
    fn grouped_policy_respects_phases_and_skips_conditioned_groups() {
        // C->SP over 2 elements: positions 1..=10, geometry offsets only.
        let confs: Vec<(usize, f64)> = (1..=10)
            .filter(|p| (p - 1) % 5 != 0)
            .map(|p| (p, 0.5))
            .collect();
        // Early phase: only size slots (w, h at offsets 3, 4).
        let early = heuristic_mask_select(
            &confs,
            1,
            10,
            MaskingPolicy::LeastConfidentGrouped,
            GenerationMode::CategoryToSizePosition,
        );
        assert!(!early.is_empty());
        assert!(early.iter().all(|p| [3, 4].contains(&((p - 1) % 5))));
        // Late phase: only position slots (x, y at offsets 1, 2).
        let late = heuristic_mask_select(
            &confs,
            8,
            10,
            MaskingPolicy::LeastConfidentGrouped,
            GenerationMode::CategoryToSizePosition,
        );
        assert!(!late.is_empty());
        assert!(late.iter().all(|p| [1, 2].contains(&((p - 1) % 5))));
        // The category group never appears in this mode.
        for t in 1..10 {
            let sel = heuristic_mask_select(
                &confs,
                t,
                10,
                MaskingPolicy::LeastConfidentGrouped,
                GenerationMode::CategoryToSizePosition,
            );
            assert!(sel.iter().all(|p| (p - 1) % 5 != 0));
        }
    }

    #[test]
    fn final_iteration_selects_nothing() {
        let confs: Vec<(usize, f64)> = (0..12).map(|i| (1 + i, 0.5)).collect();
        let sel = heuristic_mask_select(
            &confs,
            10,
            10,
            MaskingPolicy::LeastConfident,
            GenerationMode::Unconditional,
        );
        assert!(sel.is_empty());
    }

    #[test]
    fn single_iteration_is_one_shot() {
        let (decoder, codec) = tiny_decoder();
        let mut task = GenerationTask::new(
            Condition::Categories(vec![0, 1, 2]),
            MaskingPolicy::LeastConfident,
            3,
        );
        task.iterations = 1;
        let (layout, trace) =
            generate(&task, &decoder, None, &flat_histogram(), &codec).unwrap();
        assert_eq!(trace.len(), 1);
        assert_eq!(layout.len(), 3);
        assert_eq!(trace.snapshots[0].masked_entering.len(), 12);
    }

    #[test]
    fn conditioned_tokens_survive_every_snapshot() {
        let (decoder, codec) = tiny_decoder();
        let task = GenerationTask::new(
            Condition::Categories(vec![2, 0, 1]),
            MaskingPolicy::LeastConfident,
            11,
        );
        let (_, trace) =
            generate(&task, &decoder, None, &flat_histogram(), &codec).unwrap();
        assert_eq!(trace.len(), 10);
        let vocab = codec.vocab();
        let expected: Vec<usize> = [2usize, 0, 1]
            .iter()
            .map(|&c| vocab.category_id(c).unwrap())
            .collect();
        for snap in &trace.snapshots {
            for (e, &want) in expected.iter().enumerate() {
                assert_eq!(snap.token_ids[1 + 5 * e], want);
            }
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let (decoder, codec) = tiny_decoder();
        for policy in [MaskingPolicy::LeastConfident, MaskingPolicy::LeastConfidentGrouped] {
            let mut task = GenerationTask::new(Condition::None, policy, 21);
            task.iterations = 4;
            let a = generate(&task, &decoder, None, &flat_histogram(), &codec).unwrap();
            let b = generate(&task, &decoder, None, &flat_histogram(), &codec).unwrap();
            assert_eq!(a.0, b.0);
            assert_eq!(a.1, b.1);
        }
    }

    /// Flags element 0's x on the first call, nothing afterwards.
    struct OneShotScorer {
        calls: AtomicUsize,
    }

    impl MaskScorer for OneShotScorer {
        fn score(&self, _: &WireframeImage, boxes: &[[f64; 4]]) -> Result<Vec<[f64; 4]>> {
            let call = self.calls.fetch_add(1, Ordering::SeqCst);
            let mut scores = vec![[0.0; 4]; boxes.len()];
            if call == 0 {
                scores[0][0] = 0.9;
            }
            Ok(scores)
        }
    }

    #[test]
    fn locator_policy_stops_when_nothing_is_flagged() {
        let (decoder, codec) = tiny_decoder();
        let task = GenerationTask::new(
            Condition::Categories(vec![0, 1, 2]),
            MaskingPolicy::Locator,
            9,
        );
        let scorer = OneShotScorer { calls: AtomicUsize::new(0) };
        let (_, trace) =
            generate(&task, &decoder, Some(&scorer), &flat_histogram(), &codec).unwrap();
        // Flagged once after iteration 1, nothing after iteration 2.
        assert_eq!(trace.len(), 2);
        // Iteration 2 re-predicted exactly the flagged x slot of element 0.
        assert_eq!(trace.snapshots[1].masked_entering, vec![2]);
    }

    #[test]
    fn locator_policy_requires_a_locator() {
        let (decoder, codec) = tiny_decoder();
        let task = GenerationTask::new(
            Condition::Categories(vec![0]),
            MaskingPolicy::Locator,
            9,
        );
        assert!(generate(&task, &decoder, None, &flat_histogram(), &codec).is_err());
    }

    /// Flags everything with high probability, forever.
    struct FloodScorer;

    impl MaskScorer for FloodScorer {
        fn score(&self, _: &WireframeImage, boxes: &[[f64; 4]]) -> Result<Vec<[f64; 4]>> {
            Ok(vec![[0.9; 4]; boxes.len()])
        }
    }

    #[test]
    fn flooding_locator_falls_back_to_half_the_maskable_tokens() {
        let (decoder, codec) = tiny_decoder();
        let mut task = GenerationTask::new(
            Condition::Categories(vec![0, 1, 2]),
            MaskingPolicy::Locator,
            9,
        );
        task.iterations = 3;
        let (_, trace) =
            generate(&task, &decoder, Some(&FloodScorer), &flat_histogram(), &codec)
                .unwrap();
        assert_eq!(trace.len(), 3);
        // 12 maskable tokens, all flagged (> 80%): fall back to top 6.
        assert_eq!(trace.snapshots[1].masked_entering.len(), 6);
        assert_eq!(trace.snapshots[2].masked_entering.len(), 6);
    }

    #[test]
    fn locator_selection_never_touches_conditioned_slots() {
        let (decoder, codec) = tiny_decoder();
        let mut task = GenerationTask::new(
            Condition::CategoriesAndSizes(vec![(0, (0.5, 0.2)), (1, (0.3, 0.3))]),
            MaskingPolicy::Locator,
            13,
        );
        task.iterations = 4;
        let (_, trace) =
            generate(&task, &decoder, Some(&FloodScorer), &flat_histogram(), &codec)
                .unwrap();
        // Only x/y slots (offsets 1, 2) are maskable in CS->P mode.
        for snap in trace.snapshots.iter().skip(1) {
            assert!(!snap.masked_entering.is_empty());
            assert!(snap
                .masked_entering
                .iter()
                .all(|p| [1, 2].contains(&((p - 1) % 5))));
        }
    }

    #[test]
    fn batch_generation_matches_individual_runs() {
        let (decoder, codec) = tiny_decoder();
        let tasks: Vec<GenerationTask> = (0..4)
            .map(|i| {
                let mut t = GenerationTask::new(
                    Condition::Categories(vec![0, 1]),
                    MaskingPolicy::LeastConfident,
                    100 + i,
                );
                t.iterations = 3;
                t
            })
            .collect();
        let hist = flat_histogram();
        let batch = generate_batch(
            &tasks,
            &decoder,
            None,
            &hist,
            &codec,
            Parallelism::default(),
        )
        .unwrap();
        for (task, got) in tasks.iter().zip(&batch) {
            let solo = generate(task, &decoder, None, &hist, &codec).unwrap();
            assert_eq!(&solo, got);
        }
    }
}
