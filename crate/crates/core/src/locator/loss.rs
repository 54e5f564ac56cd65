//! Detection losses and target assignment.
//!
//! Scalar losses return `(value, d_value / d_input)` pairs so heads can
//! backpropagate without recomputing. Target assignment follows the usual
//! two-stage recipe: anchors are matched to ground truth for the proposal
//! head, pooled proposals are matched again for the per-region heads, and
//! both sides are subsampled to keep the positive/negative balance and the
//! per-step cost bounded.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::nn::Scalar;

use super::roi::box_iou;

// ============================================================================
// Scalar losses
// ============================================================================

/// Binary cross-entropy on a logit, in the overflow-safe arrangement
/// `max(z, 0) - z y + ln(1 + e^{-|z|})`. Returns `(loss, dloss/dz)` with
/// `dloss/dz = sigmoid(z) - y`.
pub fn bce_with_logits<T: Scalar>(z: T, y: T) -> (T, T) {
    let zero = T::zero();
    let one = T::one();
    let loss = z.max(zero) - z * y + ((-z.abs()).exp() + one).ln();
    let sig = one / (one + (-z).exp());
    (loss, sig - y)
}

/// Huber-style regression loss: quadratic inside the unit interval, linear
/// outside. Returns `(loss, dloss/dd)`; the gradient is `d` clamped to
/// `[-1, 1]`, continuous at the seam.
pub fn smooth_l1<T: Scalar>(d: T) -> (T, T) {
    let one = T::one();
    let half = T::from_f64_lossy(0.5);
    if d.abs() < one {
        (half * d * d, d)
    } else {
        (d.abs() - half, if d > T::zero() { one } else { -one })
    }
}

// ============================================================================
// Target assignment
// ============================================================================

/// Anchors at or above this best-IoU are positives.
const ANCHOR_POSITIVE_IOU: f64 = 0.5;
/// Anchors strictly below this best-IoU are negatives; the band between is
/// ignored.
const ANCHOR_NEGATIVE_IOU: f64 = 0.3;
/// Per-image sample caps for the proposal head.
const ANCHOR_SAMPLES: usize = 32;

/// Proposals at or above this best-IoU train as foreground.
const PROPOSAL_FOREGROUND_IOU: f64 = 0.5;
/// Per-image sample caps for the per-region heads.
const PROPOSAL_SAMPLES: usize = 16;

/// Subsampled anchor assignment: `positives` pairs an anchor index with its
/// ground-truth index, `negatives` lists background anchor indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AnchorTargets {
    pub positives: Vec<(usize, usize)>,
    pub negatives: Vec<usize>,
}

/// Best ground-truth index and IoU for one box, ties to the lower index.
fn best_match(bbox: [f64; 4], gt: &[[f64; 4]]) -> (usize, f64) {
    let mut best = (0, -1.0);
    for (g, &gt_box) in gt.iter().enumerate() {
        let v = box_iou(bbox, gt_box);
        if v > best.1 {
            best = (g, v);
        }
    }
    (best.0, best.1)
}

/// Assigns anchors to ground-truth boxes and subsamples both classes.
///
/// Positives are every anchor whose best IoU reaches the positive
/// threshold, plus the single best anchor of each ground-truth box (ties to
/// the lower anchor index) so that no box goes unclaimed even when all IoUs
/// are poor. Negatives are anchors below the negative threshold; the band
/// between the thresholds trains neither head. Both classes are capped by a
/// seeded shuffle.
pub fn match_anchors<R: Rng>(
    anchors: &[[f64; 4]],
    gt: &[[f64; 4]],
    rng: &mut R,
) -> AnchorTargets {
    let mut assigned: Vec<Option<usize>> = vec![None; anchors.len()];
    let mut negatives: Vec<usize> = Vec::new();
    for (a, &anchor) in anchors.iter().enumerate() {
        let (g, v) = best_match(anchor, gt);
        if v >= ANCHOR_POSITIVE_IOU {
            assigned[a] = Some(g);
        } else if v < ANCHOR_NEGATIVE_IOU {
            negatives.push(a);
        }
    }
    // Force-assign each ground-truth box its best anchor.
    for (g, &gt_box) in gt.iter().enumerate() {
        let mut best = (usize::MAX, -1.0);
        for (a, &anchor) in anchors.iter().enumerate() {
            let v = box_iou(anchor, gt_box);
            if v > best.1 {
                best = (a, v);
            }
        }
        if best.0 != usize::MAX {
            assigned[best.0] = Some(g);
        }
    }
    let mut positives: Vec<(usize, usize)> = assigned
        .iter()
        .enumerate()
        .filter_map(|(a, g)| g.map(|g| (a, g)))
        .collect();
    negatives.retain(|&a| assigned[a].is_none());
    positives.shuffle(rng);
    positives.truncate(ANCHOR_SAMPLES);
    positives.sort_unstable();
    negatives.shuffle(rng);
    negatives.truncate(ANCHOR_SAMPLES);
    negatives.sort_unstable();
    AnchorTargets { positives, negatives }
}

/// Subsampled proposal assignment for the per-region heads.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProposalTargets {
    pub foreground: Vec<(usize, usize)>,
    pub background: Vec<usize>,
}

/// Splits proposals into foreground (best IoU at or above the foreground
/// threshold, paired with that ground-truth index) and background, then
/// caps both classes by a seeded shuffle.
pub fn match_proposals<R: Rng>(
    proposals: &[[f64; 4]],
    gt: &[[f64; 4]],
    rng: &mut R,
) -> ProposalTargets {
    let mut foreground: Vec<(usize, usize)> = Vec::new();
    let mut background: Vec<usize> = Vec::new();
    for (p, &bbox) in proposals.iter().enumerate() {
        let (g, v) = best_match(bbox, gt);
        if v >= PROPOSAL_FOREGROUND_IOU {
            foreground.push((p, g));
        } else {
            background.push(p);
        }
    }
    foreground.shuffle(rng);
    foreground.truncate(PROPOSAL_SAMPLES);
    foreground.sort_unstable();
    background.shuffle(rng);
    background.truncate(PROPOSAL_SAMPLES);
    background.sort_unstable();
    ProposalTargets { foreground, background }
}
